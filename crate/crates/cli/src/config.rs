//! Run configuration: a TOML document, optionally overridden from the
//! command line, resolved into concrete backends.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use devi_core::backends::{
    BackendProfile, CachedChat, CachedFrameEmbedder, CachedTextEmbedder, ChatBackend, ChatSettings, CommandFrameExtractor,
    FrameEmbedder, HttpBackend, MockChat, MockFrameEmbedder, MockScript, MockTextEmbedder, ResponseCache, RetryPolicy, Role,
    TextEmbedder,
};
use devi_core::grounder::GrounderConfig;
use devi_core::timeline::HierarchyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    DeveQa,
    #[value(name = "deve-qa-15s")]
    #[serde(rename = "deve-qa-15s")]
    DeveQa15s,
    NextGqa,
}

impl Preset {
    pub fn hierarchy(&self) -> HierarchyConfig {
        match self {
            Preset::DeveQa => HierarchyConfig::deve_qa(),
            Preset::DeveQa15s => HierarchyConfig::deve_qa_15s(),
            Preset::NextGqa => HierarchyConfig::next_gqa(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// One role's backend. HTTP fields are ignored for the mock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub model: String,
    pub auth_env_var: Option<String>,
    pub retry: RetryPolicy,
    pub cache_enabled: bool,
    pub attach_frames: bool,
    pub timeout_s: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            model: "mock".into(),
            auth_env_var: Some(devi_core::backends::DEFAULT_AUTH_ENV_VAR.into()),
            retry: RetryPolicy::default(),
            cache_enabled: true,
            attach_frames: false,
            timeout_s: 120.0,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl BackendSpec {
    pub fn profile(&self, role: Role) -> BackendProfile {
        BackendProfile {
            role,
            endpoint_url: self.endpoint_url.clone(),
            model: self.model.clone(),
            auth_env_var: self.auth_env_var.clone(),
            retry: self.retry.clone(),
            cache_enabled: self.cache_enabled,
            attach_frames: self.attach_frames,
            timeout_s: self.timeout_s,
        }
    }

    pub fn settings(&self) -> ChatSettings {
        ChatSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendsConfig {
    pub captioner: BackendSpec,
    pub reasoner: BackendSpec,
    pub text_embedder: BackendSpec,
    pub frame_embedder: BackendSpec,
}

/// External frame grabber used by an HTTP frame embedder or by captioning
/// requests with `attach_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameCommand {
    pub program: String,
    pub args: Vec<String>,
    /// Video locator with `{video_id}` substituted, e.g. `videos/{video_id}.mp4`.
    pub uri_template: String,
}

impl Default for FrameCommand {
    fn default() -> Self {
        let f = CommandFrameExtractor::ffmpeg();
        Self {
            program: f.program,
            args: f.args,
            uri_template: "videos/{video_id}.mp4".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub gqa_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gqa_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Overrides the preset when present.
    pub hierarchy: Option<HierarchyConfig>,
    pub grounder: GrounderConfig,
    pub backends: BackendsConfig,
    pub frames: FrameCommand,
    pub mock_script: Option<PathBuf>,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::DeveQa,
            hierarchy: None,
            grounder: GrounderConfig::default(),
            backends: BackendsConfig::default(),
            frames: FrameCommand::default(),
            mock_script: None,
            workers: 4,
            cache_dir: None,
            run_dir: PathBuf::from("runs/default"),
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative paths in a config file are relative to that file
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.mock_script.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.cache_dir.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.run_dir);
        Ok(cfg)
    }

    /// Fills `hierarchy` from the preset and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        let h = self.hierarchy.take().unwrap_or_else(|| self.preset.hierarchy());
        h.validate().context("hierarchy")?;
        self.hierarchy = Some(h);
        self.grounder.validate().context("grounder")?;
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if !(0.5..=1.0).contains(&self.eval.gqa_threshold) {
            bail!("eval.gqa_threshold must lie in [0.5, 1]");
        }
        let specs = [
            &self.backends.captioner,
            &self.backends.reasoner,
            &self.backends.text_embedder,
            &self.backends.frame_embedder,
        ];
        for spec in specs {
            spec.retry.validate().context("backend retry policy")?;
            if spec.kind == BackendKind::Http && spec.endpoint_url.is_empty() {
                bail!("http backends need an endpoint_url");
            }
        }
        if specs.iter().any(|s| s.kind == BackendKind::Mock) && self.mock_script.is_none() {
            bail!("mock backends need a mock_script");
        }
        Ok(self)
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        self.hierarchy.clone().unwrap_or_else(|| self.preset.hierarchy())
    }
}

/// Scripted backends kept by handle so their call counters stay readable.
#[derive(Clone)]
pub struct MockHandles {
    pub captioner: Arc<MockChat>,
    pub reasoner: Arc<MockChat>,
    pub text_embedder: Arc<MockTextEmbedder>,
    pub frame_embedder: Arc<MockFrameEmbedder>,
}

impl MockHandles {
    pub fn new(script: Arc<MockScript>) -> Self {
        Self {
            captioner: Arc::new(MockChat::new(script.clone())),
            reasoner: Arc::new(MockChat::new(script.clone())),
            text_embedder: Arc::new(MockTextEmbedder::new(script.clone())),
            frame_embedder: Arc::new(MockFrameEmbedder::new(script)),
        }
    }

    pub fn total_calls(&self) -> usize {
        self.captioner.calls() + self.reasoner.calls() + self.text_embedder.calls() + self.frame_embedder.calls()
    }
}

#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn ChatBackend>,
    pub reasoner: Arc<dyn ChatBackend>,
    pub text_embedder: Arc<dyn TextEmbedder>,
    pub frame_embedder: Arc<dyn FrameEmbedder>,
    pub captioner_settings: ChatSettings,
    pub reasoner_settings: ChatSettings,
}

impl Backends {
    /// Builds the four role backends. Mock roles use `mocks` when given,
    /// otherwise fresh mocks over the configured script.
    pub fn from_config(cfg: &RunConfig, mocks: Option<MockHandles>) -> Result<Self> {
        let b = &cfg.backends;
        let mocks = match mocks {
            Some(m) => Some(m),
            None => match &cfg.mock_script {
                Some(path) => Some(MockHandles::new(Arc::new(
                    MockScript::load(path).with_context(|| format!("loading {}", path.display()))?,
                ))),
                None => None,
            },
        };
        let cache = cfg.cache_dir.as_ref().map(ResponseCache::new);
        let cache_for = |spec: &BackendSpec| cache.clone().filter(|_| spec.cache_enabled);
        let extractor = Arc::new(CommandFrameExtractor {
            program: cfg.frames.program.clone(),
            args: cfg.frames.args.clone(),
            uri_template: cfg.frames.uri_template.clone(),
        });
        let http = |spec: &BackendSpec, role: Role| -> Result<HttpBackend> {
            Ok(HttpBackend::new(spec.profile(role))?.with_frame_extractor(extractor.clone()))
        };
        let need_mock = || mocks.clone().context("mock backend requested without a mock script");

        let chat = |spec: &BackendSpec, role: Role, mock: fn(&MockHandles) -> Arc<MockChat>| -> Result<Arc<dyn ChatBackend>> {
            let inner: Arc<dyn ChatBackend> = match spec.kind {
                BackendKind::Http => Arc::new(http(spec, role)?),
                BackendKind::Mock => mock(&need_mock()?),
            };
            Ok(match cache_for(spec) {
                Some(c) => Arc::new(CachedChat::new(inner, c, role)),
                None => inner,
            })
        };
        let captioner = chat(&b.captioner, Role::Captioner, |m| m.captioner.clone())?;
        let reasoner = chat(&b.reasoner, Role::Reasoner, |m| m.reasoner.clone())?;

        let text_inner: Arc<dyn TextEmbedder> = match b.text_embedder.kind {
            BackendKind::Http => Arc::new(http(&b.text_embedder, Role::TextEmbedder)?),
            BackendKind::Mock => need_mock()?.text_embedder,
        };
        let text_embedder: Arc<dyn TextEmbedder> = match cache_for(&b.text_embedder) {
            Some(c) => Arc::new(CachedTextEmbedder::new(text_inner, c, b.text_embedder.model.clone())),
            None => text_inner,
        };
        let frame_inner: Arc<dyn FrameEmbedder> = match b.frame_embedder.kind {
            BackendKind::Http => Arc::new(http(&b.frame_embedder, Role::FrameEmbedder)?),
            BackendKind::Mock => need_mock()?.frame_embedder,
        };
        let frame_embedder: Arc<dyn FrameEmbedder> = match cache_for(&b.frame_embedder) {
            Some(c) => Arc::new(CachedFrameEmbedder::new(frame_inner, c, b.frame_embedder.model.clone())),
            None => frame_inner,
        };
        Ok(Self {
            captioner,
            reasoner,
            text_embedder,
            frame_embedder,
            captioner_settings: b.captioner.settings(),
            reasoner_settings: b.reasoner.settings(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        let cfg = RunConfig {
            mock_script: Some("s.json".into()),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.hierarchy().level_lengths_s, vec![10.0, 35.0, 65.0]);
        assert_eq!(cfg.grounder.sigma, 0.6);
        assert_eq!(cfg.grounder.delta, 2);
        assert_eq!(Preset::NextGqa.hierarchy().level_lengths_s, vec![5.0, 15.0, 45.0]);
    }

    #[test]
    fn toml_roundtrip_and_partial_documents() {
        let cfg: RunConfig = toml::from_str(
            r#"
            preset = "next-gqa"
            seed = 7
            mock_script = "script.json"
            [grounder]
            sigma = 0.5
            [backends.reasoner]
            kind = "http"
            endpoint_url = "http://localhost:8000/v1"
            model = "gpt-4o"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::NextGqa);
        assert_eq!(cfg.grounder.delta, 2);
        assert_eq!(cfg.backends.reasoner.kind, BackendKind::Http);
        assert_eq!(cfg.backends.captioner.kind, BackendKind::Mock);
        let resolved = cfg.resolve().unwrap();
        let back: RunConfig = toml::from_str(&toml::to_string(&resolved).unwrap()).unwrap();
        assert_eq!(back, resolved);
    }

    #[test]
    fn rejects_bad_values() {
        let base = RunConfig {
            mock_script: Some("s.json".into()),
            ..Default::default()
        };
        let mut c = base.clone();
        c.grounder.delta = 0;
        assert!(c.resolve().is_err());
        let mut c = base.clone();
        c.workers = 0;
        assert!(c.resolve().is_err());
        let mut c = base.clone();
        c.mock_script = None;
        assert!(c.resolve().is_err());
        let mut c = base;
        c.backends.reasoner.kind = BackendKind::Http;
        assert!(c.resolve().is_err());
    }
}
