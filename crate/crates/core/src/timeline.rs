//! Time spans, video references and hierarchical segmentation plans.
//!
//! All times are quantized to whole milliseconds when they enter the
//! system, so segment tiling and span algebra are exact integer arithmetic.
//! Seconds are the unit of every public accessor.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("invalid time value {0}: must be finite and non-negative")]
    InvalidTime(f64),
    #[error("span start {start} is after end {end}")]
    Inverted { start: f64, end: f64 },
    #[error("video duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("invalid hierarchy config: {0}")]
    InvalidHierarchy(String),
}

/// Converts seconds to whole milliseconds, rejecting NaN, infinities and negatives.
pub fn seconds_to_ms(s: f64) -> Result<u64, TimelineError> {
    if !s.is_finite() || s < 0.0 {
        return Err(TimelineError::InvalidTime(s));
    }
    Ok((s * 1000.0).round() as u64)
}

#[inline]
pub fn ms_to_seconds(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

/// A closed interval `[start, end]` within a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeSpan {
    start_ms: u64,
    end_ms: u64,
}

impl TimeSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, TimelineError> {
        let start_ms = seconds_to_ms(start_s)?;
        let end_ms = seconds_to_ms(end_s)?;
        if start_ms > end_ms {
            return Err(TimelineError::Inverted { start: start_s, end: end_s });
        }
        Ok(Self { start_ms, end_ms })
    }

    pub fn from_millis(start_ms: u64, end_ms: u64) -> Result<Self, TimelineError> {
        if start_ms > end_ms {
            return Err(TimelineError::Inverted {
                start: ms_to_seconds(start_ms),
                end: ms_to_seconds(end_ms),
            });
        }
        Ok(Self { start_ms, end_ms })
    }

    pub fn start_ms(&self) -> u64 {
        self.start_ms
    }

    pub fn end_ms(&self) -> u64 {
        self.end_ms
    }

    pub fn len_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn start_s(&self) -> f64 {
        ms_to_seconds(self.start_ms)
    }

    pub fn end_s(&self) -> f64 {
        ms_to_seconds(self.end_ms)
    }

    pub fn length(&self) -> f64 {
        ms_to_seconds(self.len_ms())
    }

    /// Closed-interval membership of a time point in seconds.
    pub fn contains(&self, t_s: f64) -> bool {
        t_s >= self.start_s() && t_s <= self.end_s()
    }

    pub fn contains_span(&self, other: &TimeSpan) -> bool {
        other.start_ms >= self.start_ms && other.end_ms <= self.end_ms
    }

    /// Restricts the span to `[0, limit_ms]`. A span entirely past the limit
    /// collapses to the zero-length span at the limit.
    pub fn clamp_to(&self, limit_ms: u64) -> TimeSpan {
        let start_ms = self.start_ms.min(limit_ms);
        let end_ms = self.end_ms.min(limit_ms);
        TimeSpan { start_ms, end_ms }
    }
}

impl fmt::Display for TimeSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start_s(), self.end_s())
    }
}

// Spans travel as `[start_s, end_s]` in every file format.
impl Serialize for TimeSpan {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (self.start_s(), self.end_s()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TimeSpan {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (start, end) = <(f64, f64)>::deserialize(deserializer)?;
        TimeSpan::new(start, end).map_err(serde::de::Error::custom)
    }
}

/// Length of the overlap of two spans, in seconds.
pub fn intersect_len(a: &TimeSpan, b: &TimeSpan) -> f64 {
    ms_to_seconds(intersect_ms(a, b))
}

/// Length of the union of two spans (inclusion-exclusion), in seconds.
pub fn union_len(a: &TimeSpan, b: &TimeSpan) -> f64 {
    ms_to_seconds(union_ms(a, b))
}

pub fn intersect_ms(a: &TimeSpan, b: &TimeSpan) -> u64 {
    let lo = a.start_ms.max(b.start_ms);
    let hi = a.end_ms.min(b.end_ms);
    hi.saturating_sub(lo)
}

pub fn union_ms(a: &TimeSpan, b: &TimeSpan) -> u64 {
    a.len_ms() + b.len_ms() - intersect_ms(a, b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VideoRefRepr", into = "VideoRefRepr")]
pub struct VideoRef {
    pub video_id: String,
    duration_ms: u64,
    pub uri: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct VideoRefRepr {
    video_id: String,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uri: Option<String>,
}

impl TryFrom<VideoRefRepr> for VideoRef {
    type Error = TimelineError;

    fn try_from(r: VideoRefRepr) -> Result<Self, Self::Error> {
        let mut v = VideoRef::new(r.video_id, r.duration_s)?;
        v.uri = r.uri;
        Ok(v)
    }
}

impl From<VideoRef> for VideoRefRepr {
    fn from(v: VideoRef) -> Self {
        VideoRefRepr {
            duration_s: v.duration_s(),
            video_id: v.video_id,
            uri: v.uri,
        }
    }
}

impl VideoRef {
    pub fn new(video_id: impl Into<String>, duration_s: f64) -> Result<Self, TimelineError> {
        let duration_ms = seconds_to_ms(duration_s)
            .map_err(|_| TimelineError::NonPositiveDuration(duration_s))?;
        if duration_ms == 0 {
            return Err(TimelineError::NonPositiveDuration(duration_s));
        }
        Ok(Self {
            video_id: video_id.into(),
            duration_ms,
            uri: None,
        })
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = Some(uri.into());
        self
    }

    pub fn duration_s(&self) -> f64 {
        ms_to_seconds(self.duration_ms)
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms
    }

    /// The span `[0, duration]`.
    pub fn full_span(&self) -> TimeSpan {
        TimeSpan {
            start_ms: 0,
            end_ms: self.duration_ms,
        }
    }

    /// Integer-second timestamps `0, 1, …` strictly below the duration (1 fps grid).
    pub fn one_fps_timestamps(&self) -> Vec<f64> {
        let count = self.duration_ms.div_ceil(1000);
        (0..count).map(|k| k as f64).collect()
    }
}

/// Segment lengths and per-segment frame counts for each hierarchy level,
/// shortest level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub level_lengths_s: Vec<f64>,
    pub frames_per_level: Vec<usize>,
}

impl HierarchyConfig {
    pub fn new(level_lengths_s: Vec<f64>, frames_per_level: Vec<usize>) -> Result<Self, TimelineError> {
        let cfg = Self {
            level_lengths_s,
            frames_per_level,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Levels {10, 35, 65} s with 5/7/13 frames.
    pub fn deve_qa() -> Self {
        Self {
            level_lengths_s: vec![10.0, 35.0, 65.0],
            frames_per_level: vec![5, 7, 13],
        }
    }

    /// Alternative short level of 15 s, otherwise identical to [`HierarchyConfig::deve_qa`].
    pub fn deve_qa_15s() -> Self {
        Self {
            level_lengths_s: vec![15.0, 35.0, 65.0],
            frames_per_level: vec![5, 7, 13],
        }
    }

    /// Levels {5, 15, 45} s with 5/7/13 frames.
    pub fn next_gqa() -> Self {
        Self {
            level_lengths_s: vec![5.0, 15.0, 45.0],
            frames_per_level: vec![5, 7, 13],
        }
    }

    pub fn levels(&self) -> usize {
        self.level_lengths_s.len()
    }

    pub fn validate(&self) -> Result<(), TimelineError> {
        if self.level_lengths_s.is_empty() {
            return Err(TimelineError::InvalidHierarchy("at least one level is required".into()));
        }
        if self.level_lengths_s.len() != self.frames_per_level.len() {
            return Err(TimelineError::InvalidHierarchy(format!(
                "{} level lengths but {} frame counts",
                self.level_lengths_s.len(),
                self.frames_per_level.len()
            )));
        }
        let mut prev = 0u64;
        for &len in &self.level_lengths_s {
            let ms = seconds_to_ms(len)
                .map_err(|_| TimelineError::InvalidHierarchy(format!("bad level length {len}")))?;
            if ms <= prev {
                return Err(TimelineError::InvalidHierarchy(
                    "level lengths must be positive and strictly increasing".into(),
                ));
            }
            prev = ms;
        }
        if self.frames_per_level.contains(&0) {
            return Err(TimelineError::InvalidHierarchy("frame counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub span: TimeSpan,
    pub frame_timestamps_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub level_length_s: f64,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub levels: Vec<LevelPlan>,
}

/// Tiles `[0, duration]` with consecutive segments at every level.
///
/// The trailing segment of a level holds the remainder and may be shorter
/// than the level length. Frames sit at `start + (k + 0.5) * len / n`.
pub fn plan_segments(video: &VideoRef, cfg: &HierarchyConfig) -> Result<SegmentPlan, TimelineError> {
    cfg.validate()?;
    let total = video.duration_ms();
    let levels = cfg
        .level_lengths_s
        .iter()
        .zip(&cfg.frames_per_level)
        .map(|(&len_s, &frames)| {
            let step = seconds_to_ms(len_s).expect("validated");
            let count = total.div_ceil(step);
            let segments = (0..count)
                .map(|k| {
                    let start = k * step;
                    let end = ((k + 1) * step).min(total);
                    let span = TimeSpan::from_millis(start, end).expect("start < end");
                    Segment {
                        frame_timestamps_s: uniform_frames(&span, frames),
                        span,
                    }
                })
                .collect();
            LevelPlan {
                level_length_s: len_s,
                segments,
            }
        })
        .collect();
    Ok(SegmentPlan { levels })
}

fn uniform_frames(span: &TimeSpan, n: usize) -> Vec<f64> {
    let start = span.start_s();
    let step = span.length() / n as f64;
    (0..n).map(|k| start + (k as f64 + 0.5) * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(a: f64, b: f64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    #[test]
    fn single_level_covers_whole_video() {
        let video = VideoRef::new("v", 65.0).unwrap();
        let cfg = HierarchyConfig::new(vec![65.0], vec![13]).unwrap();
        let plan = plan_segments(&video, &cfg).unwrap();
        assert_eq!(plan.levels.len(), 1);
        let segs = &plan.levels[0].segments;
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].span, span(0.0, 65.0));
        assert_eq!(segs[0].frame_timestamps_s.len(), 13);
        assert!((segs[0].frame_timestamps_s[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ceil_counts_per_level() {
        let video = VideoRef::new("v", 127.0).unwrap();
        let plan = plan_segments(&video, &HierarchyConfig::deve_qa()).unwrap();
        let counts: Vec<_> = plan.levels.iter().map(|l| l.segments.len()).collect();
        assert_eq!(counts, vec![13, 4, 2]);
    }

    #[test]
    fn remainder_segment_is_kept() {
        let video = VideoRef::new("v", 127.0).unwrap();
        let cfg = HierarchyConfig::new(vec![65.0], vec![13]).unwrap();
        let plan = plan_segments(&video, &cfg).unwrap();
        let segs = &plan.levels[0].segments;
        assert_eq!(segs[0].span, span(0.0, 65.0));
        assert_eq!(segs[1].span, span(65.0, 127.0));
        assert_eq!(segs[1].span.length(), 62.0);
    }

    #[test]
    fn exact_multiple_has_no_empty_tail() {
        let video = VideoRef::new("v", 130.0).unwrap();
        let cfg = HierarchyConfig::new(vec![65.0], vec![3]).unwrap();
        let plan = plan_segments(&video, &cfg).unwrap();
        assert_eq!(plan.levels[0].segments.len(), 2);
    }

    #[test]
    fn span_algebra_examples() {
        assert_eq!(intersect_len(&span(0.0, 10.0), &span(5.0, 15.0)), 5.0);
        assert_eq!(intersect_len(&span(0.0, 10.0), &span(10.0, 20.0)), 0.0);
        let a = span(3.25, 9.5);
        assert_eq!(intersect_len(&a, &a), a.length());
        assert_eq!(union_len(&span(0.0, 10.0), &span(5.0, 15.0)), 15.0);
        assert_eq!(union_len(&span(0.0, 10.0), &span(0.0, 10.0)), 10.0);
        assert_eq!(union_len(&span(0.0, 0.0), &span(5.0, 5.0)), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(TimeSpan::new(5.0, 1.0), Err(TimelineError::Inverted { .. })));
        assert!(TimeSpan::new(-1.0, 1.0).is_err());
        assert!(TimeSpan::new(f64::NAN, 1.0).is_err());
        assert!(VideoRef::new("v", 0.0).is_err());
        assert!(VideoRef::new("v", 0.0004).is_err());
        assert!(HierarchyConfig::new(vec![35.0, 10.0], vec![5, 7]).is_err());
        assert!(HierarchyConfig::new(vec![10.0, 10.0], vec![5, 7]).is_err());
        assert!(HierarchyConfig::new(vec![10.0], vec![5, 7]).is_err());
        assert!(HierarchyConfig::new(vec![], vec![]).is_err());
        assert!(HierarchyConfig::new(vec![10.0], vec![0]).is_err());
    }

    #[test]
    fn one_fps_grid() {
        let ts = |d: f64| VideoRef::new("v", d).unwrap().one_fps_timestamps();
        assert_eq!(ts(3.5), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(ts(1.0), vec![0.0]);
        assert_eq!(ts(0.2), vec![0.0]);
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = span(1.5, 10.0);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[1.5,10.0]");
        let back: TimeSpan = serde_json::from_str("[1.5, 10]").unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<TimeSpan>("[3, 1]").is_err());
    }

    fn arb_span() -> impl Strategy<Value = TimeSpan> {
        (0u64..400_000, 0u64..400_000)
            .prop_map(|(a, b)| TimeSpan::from_millis(a.min(b), a.max(b)).unwrap())
    }

    proptest! {
        #[test]
        fn plan_tiles_duration(duration_ms in 1u64..900_000, base in 1u64..20_000, frames in 1usize..16) {
            let video = VideoRef::new("v", duration_ms as f64 / 1000.0).unwrap();
            let cfg = HierarchyConfig::new(
                vec![base as f64 / 1000.0, (base * 3) as f64 / 1000.0],
                vec![frames, frames + 2],
            ).unwrap();
            let plan = plan_segments(&video, &cfg).unwrap();
            for (level, &frames) in plan.levels.iter().zip(&cfg.frames_per_level) {
                let segs = &level.segments;
                prop_assert_eq!(segs.first().unwrap().span.start_ms(), 0);
                prop_assert_eq!(segs.last().unwrap().span.end_ms(), video.duration_ms());
                let total: u64 = segs.iter().map(|s| s.span.len_ms()).sum();
                prop_assert_eq!(total, video.duration_ms());
                for pair in segs.windows(2) {
                    prop_assert_eq!(pair[0].span.end_ms(), pair[1].span.start_ms());
                }
                let step = seconds_to_ms(level.level_length_s).unwrap();
                prop_assert_eq!(segs.len() as u64, video.duration_ms().div_ceil(step));
                for seg in segs {
                    prop_assert!(seg.span.len_ms() > 0);
                    prop_assert_eq!(seg.frame_timestamps_s.len(), frames);
                    for w in seg.frame_timestamps_s.windows(2) {
                        prop_assert!(w[0] < w[1]);
                    }
                    for &t in &seg.frame_timestamps_s {
                        prop_assert!(seg.span.contains(t));
                    }
                }
            }
        }

        #[test]
        fn span_algebra_bounds(a in arb_span(), b in arb_span()) {
            prop_assert_eq!(intersect_len(&a, &b), intersect_len(&b, &a));
            prop_assert_eq!(union_len(&a, &b), union_len(&b, &a));
            prop_assert!(intersect_len(&a, &b) <= a.length().min(b.length()));
            prop_assert!(union_len(&a, &b) >= a.length().max(b.length()));
        }
    }
}
