//! Grounded-QA metrics and dataset statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounder::{GroundedPrediction, McqItem};
use crate::timeline::{intersect_len, union_len, TimeSpan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("qid {0} appears more than once")]
    DuplicateQid(String),
    #[error("prediction for unknown qid {0}")]
    UnknownQid(String),
    #[error("ground truth for {0} lacks answer_idx or span")]
    MissingGroundTruth(String),
    #[error("no duration known for video {0}")]
    MissingDuration(String),
    #[error("grounding threshold {0} outside [0.5, 1]")]
    InvalidThreshold(f64),
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(pred: &TimeSpan, gt: &TimeSpan) -> f64 {
    let u = union_len(pred, gt);
    if u == 0.0 {
        0.0
    } else {
        intersect_len(pred, gt) / u
    }
}

/// Intersection over the predicted length; 0 for a zero-length prediction.
pub fn iop(pred: &TimeSpan, gt: &TimeSpan) -> f64 {
    let p = pred.length();
    if p == 0.0 {
        0.0
    } else {
        intersect_len(pred, gt) / p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub qid: String,
    pub correct: bool,
    pub iop: f64,
    pub iou: f64,
    pub gqa_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub acc_qa: f64,
    pub m_iop: f64,
    pub iop_at_05: f64,
    pub m_iou: f64,
    pub iou_at_05: f64,
    pub acc_gqa: f64,
    pub gqa_threshold: f64,
    pub per_question: Vec<QuestionScore>,
}

impl EvalReport {
    /// Headline columns as percentages: mIoP, IoP@0.5, mIoU, IoU@0.5, Acc@QA, Acc@GQA.
    pub fn headline(&self) -> [(&'static str, f64); 6] {
        [
            ("mIoP", self.m_iop * 100.0),
            ("IoP@0.5", self.iop_at_05 * 100.0),
            ("mIoU", self.m_iou * 100.0),
            ("IoU@0.5", self.iou_at_05 * 100.0),
            ("Acc@QA", self.acc_qa * 100.0),
            ("Acc@GQA", self.acc_gqa * 100.0),
        ]
    }

    pub fn table(&self) -> String {
        let cols = self.headline();
        let header: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
        let values: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>8.2}")).collect();
        format!("{}\n{}\n", header.join(" "), values.join(" "))
    }

    pub fn satisfies_dominance(&self) -> bool {
        self.acc_gqa <= self.acc_qa && self.acc_gqa <= self.iop_at_05
    }
}

/// Scores predictions against ground truth. Ground-truth items without a
/// prediction count as wrong and ungrounded. `gqa_threshold` is the IoP a
/// correct answer needs to count as grounded (0.5 by convention).
pub fn evaluate(predictions: &[GroundedPrediction], gt: &[McqItem], gqa_threshold: f64) -> Result<EvalReport, EvalError> {
    if !(0.5..=1.0).contains(&gqa_threshold) {
        return Err(EvalError::InvalidThreshold(gqa_threshold));
    }
    let mut truth: BTreeMap<&str, (usize, TimeSpan)> = BTreeMap::new();
    for item in gt {
        let (Some(a), Some(s)) = (item.answer_idx, item.gt_span) else {
            return Err(EvalError::MissingGroundTruth(item.qid.clone()));
        };
        if truth.insert(&item.qid, (a, s)).is_some() {
            return Err(EvalError::DuplicateQid(item.qid.clone()));
        }
    }
    let mut by_qid: HashMap<&str, &GroundedPrediction> = HashMap::new();
    for p in predictions {
        if !truth.contains_key(p.qid.as_str()) {
            return Err(EvalError::UnknownQid(p.qid.clone()));
        }
        if by_qid.insert(&p.qid, p).is_some() {
            return Err(EvalError::DuplicateQid(p.qid.clone()));
        }
    }

    let per_question: Vec<QuestionScore> = truth
        .iter()
        .map(|(qid, (answer, span))| {
            let p = by_qid.get(qid);
            let correct = p.and_then(|p| p.choice_idx) == Some(*answer);
            let grounded = p.and_then(|p| p.grounded_span);
            let (iop_v, iou_v) = grounded.map_or((0.0, 0.0), |g| (iop(&g, span), iou(&g, span)));
            QuestionScore {
                qid: qid.to_string(),
                correct,
                iop: iop_v,
                iou: iou_v,
                gqa_hit: correct && iop_v >= gqa_threshold,
            }
        })
        .collect();

    let n = per_question.len();
    let mean = |f: &dyn Fn(&QuestionScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_question.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(EvalReport {
        n_questions: n,
        acc_qa: mean(&|q| flag(q.correct)),
        m_iop: mean(&|q| q.iop),
        iop_at_05: mean(&|q| flag(q.iop >= 0.5)),
        m_iou: mean(&|q| q.iou),
        iou_at_05: mean(&|q| flag(q.iou >= 0.5)),
        acc_gqa: mean(&|q| flag(q.gqa_hit)),
        gqa_threshold,
        per_question,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_videos: usize,
    pub n_questions: usize,
    pub avg_question_len_words: f64,
    pub avg_segment_dur_s: f64,
    pub avg_video_dur_s: f64,
    pub ratio_seg_over_video: f64,
    pub certificate_len_s: f64,
    pub question_type_histogram: BTreeMap<String, usize>,
}

/// Lowercased first two words of a question.
pub fn question_type(question: &str) -> String {
    question
        .split_whitespace()
        .take(2)
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Table-style statistics. Video duration is averaged over distinct videos;
/// the certificate length is the mean ground-truth span length per question.
pub fn dataset_stats(items: &[McqItem], durations_s: &BTreeMap<String, f64>) -> Result<DatasetStats, EvalError> {
    let mut videos = BTreeSet::new();
    let mut seg_total = 0.0;
    let mut words = 0usize;
    let mut histogram = BTreeMap::new();
    for item in items {
        let span = item.gt_span.ok_or_else(|| EvalError::MissingGroundTruth(item.qid.clone()))?;
        if !durations_s.contains_key(&item.video_id) {
            return Err(EvalError::MissingDuration(item.video_id.clone()));
        }
        videos.insert(item.video_id.as_str());
        seg_total += span.length();
        words += item.question.split_whitespace().count();
        *histogram.entry(question_type(&item.question)).or_insert(0) += 1;
    }
    let n = items.len();
    let per_q = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    let avg_video = if videos.is_empty() {
        0.0
    } else {
        videos.iter().map(|v| durations_s[*v]).sum::<f64>() / videos.len() as f64
    };
    let avg_seg = per_q(seg_total);
    Ok(DatasetStats {
        n_videos: videos.len(),
        n_questions: n,
        avg_question_len_words: per_q(words as f64),
        avg_segment_dur_s: avg_seg,
        avg_video_dur_s: avg_video,
        ratio_seg_over_video: if avg_video == 0.0 { 0.0 } else { avg_seg / avg_video },
        certificate_len_s: avg_seg,
        question_type_histogram: histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(a: f64, b: f64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    fn item(qid: &str, video: &str, q: &str, answer: usize, gt: TimeSpan) -> McqItem {
        McqItem {
            qid: qid.into(),
            video_id: video.into(),
            question: q.into(),
            options: ["a", "b", "c", "d", "e"].map(String::from),
            answer_idx: Some(answer),
            gt_span: Some(gt),
        }
    }

    fn pred(qid: &str, choice: Option<usize>, g: Option<TimeSpan>) -> GroundedPrediction {
        GroundedPrediction {
            qid: qid.into(),
            choice_idx: choice,
            candidate_spans: g.into_iter().collect(),
            grounded_span: g,
            consistency: 0.5,
            iterations_used: 1,
            passed: false,
        }
    }

    #[test]
    fn interval_ratios() {
        let a = span(0.0, 10.0);
        let b = span(5.0, 15.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &span(20.0, 30.0)), 0.0);
        assert_eq!(iop(&a, &b), 0.5);
        assert_eq!(iop(&span(2.0, 4.0), &a), 1.0);
        assert_eq!(iop(&span(3.0, 3.0), &a), 0.0);
        assert_eq!(iou(&span(3.0, 3.0), &span(3.0, 3.0)), 0.0);
        // not symmetric
        assert_ne!(iop(&span(2.0, 4.0), &a), iop(&a, &span(2.0, 4.0)));
    }

    #[test]
    fn perfect_run_scores_one() {
        let gt = vec![item("1", "v", "why x", 2, span(1.0, 5.0)), item("2", "v", "how y", 0, span(0.0, 9.0))];
        let p = vec![pred("1", Some(2), Some(span(1.0, 5.0))), pred("2", Some(0), Some(span(0.0, 9.0)))];
        let r = evaluate(&p, &gt, 0.5).unwrap();
        for (_, v) in r.headline() {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn missing_and_null_predictions_count_zero() {
        let gt = vec![item("1", "v", "q", 0, span(0.0, 10.0)), item("2", "v", "q", 0, span(0.0, 10.0))];
        let r = evaluate(&[pred("1", None, None)], &gt, 0.5).unwrap();
        assert_eq!(r.n_questions, 2);
        assert_eq!(r.acc_qa, 0.0);
        assert_eq!(r.m_iop, 0.0);
    }

    #[test]
    fn join_errors() {
        let gt = vec![item("1", "v", "q", 0, span(0.0, 10.0))];
        assert_eq!(evaluate(&[pred("9", None, None)], &gt, 0.5), Err(EvalError::UnknownQid("9".into())));
        assert_eq!(
            evaluate(&[pred("1", None, None), pred("1", None, None)], &gt, 0.5),
            Err(EvalError::DuplicateQid("1".into()))
        );
        assert!(evaluate(&[], &[gt[0].clone(), gt[0].clone()], 0.5).is_err());
        assert!(evaluate(&[], &gt, 0.3).is_err());
    }

    #[test]
    fn stats_examples() {
        let durations = BTreeMap::from([("v".to_string(), 100.0)]);
        let one = dataset_stats(&[item("1", "v", "Why did the man run", 0, span(10.0, 50.0))], &durations).unwrap();
        assert_eq!(one.avg_segment_dur_s, 40.0);
        assert_eq!(one.ratio_seg_over_video, 0.4);
        assert_eq!(one.certificate_len_s, 40.0);
        assert_eq!(one.question_type_histogram.keys().collect::<Vec<_>>(), vec!["why did"]);

        let two = dataset_stats(
            &[item("1", "v", "what is", 0, span(0.0, 10.0)), item("2", "v", "what is", 0, span(0.0, 30.0))],
            &durations,
        )
        .unwrap();
        assert_eq!(two.avg_segment_dur_s, 20.0);
        assert_eq!(two.ratio_seg_over_video, 0.2);
        assert_eq!(two.n_videos, 1);

        assert_eq!(
            dataset_stats(&[item("1", "w", "q", 0, span(0.0, 1.0))], &durations),
            Err(EvalError::MissingDuration("w".into()))
        );
    }

    fn arb_span() -> impl Strategy<Value = TimeSpan> {
        (0u64..300_000, 0u64..300_000).prop_map(|(a, b)| TimeSpan::from_millis(a.min(b), a.max(b)).unwrap())
    }

    proptest! {
        #[test]
        fn iou_bounded_by_both_iops(a in arb_span(), b in arb_span()) {
            prop_assume!(a.len_ms() > 0 && b.len_ms() > 0);
            let u = iou(&a, &b);
            prop_assert!(u >= 0.0);
            prop_assert!(u <= iop(&a, &b).min(iop(&b, &a)) + 1e-12);
            prop_assert_eq!(u, iou(&b, &a));
        }

        #[test]
        fn contained_prediction_has_full_iop(g in arb_span(), x in 0u64..1000, y in 0u64..1000) {
            prop_assume!(g.len_ms() > 1);
            let lo = g.start_ms() + x % g.len_ms();
            let hi = lo + 1 + y % (g.end_ms() - lo);
            let p = TimeSpan::from_millis(lo, hi.min(g.end_ms())).unwrap();
            prop_assume!(p.len_ms() > 0);
            prop_assert_eq!(iop(&p, &g), 1.0);
        }

        #[test]
        fn reports_respect_dominance(
            rows in prop::collection::vec((0usize..5, prop::option::of(0usize..5), arb_span(), prop::option::of(arb_span())), 0..30),
            threshold in 0.5f64..=1.0,
        ) {
            let gt: Vec<McqItem> = rows.iter().enumerate().map(|(i, r)| item(&i.to_string(), "v", "q", r.0, r.2)).collect();
            let preds: Vec<GroundedPrediction> = rows.iter().enumerate().map(|(i, r)| pred(&i.to_string(), r.1, r.3)).collect();
            let rep = evaluate(&preds, &gt, threshold).unwrap();
            prop_assert!(rep.satisfies_dominance());
            for v in [rep.acc_qa, rep.m_iop, rep.iop_at_05, rep.m_iou, rep.iou_at_05, rep.acc_gqa] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
