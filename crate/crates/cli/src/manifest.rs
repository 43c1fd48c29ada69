//! Run manifest for `generate`.
//!
//! Relative paths resolve against the manifest's directory. Command-line
//! flags override manifest values, which override the environment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diagsynth_core::agents::DupStrategy;
use diagsynth_core::llm::{ENV_ENDPOINT, ENV_MODEL};
use diagsynth_core::orchestrator::SessionConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Script,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default)]
    pub model_overrides: std::collections::BTreeMap<diagsynth_core::llm::OpTag, String>,
    pub max_retries: Option<u32>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    pub exchange_cap: Option<usize>,
    pub max_topics: Option<usize>,
    pub max_depth: Option<usize>,
    pub dup_strategy: Option<DupStrategy>,
    pub history_window: Option<usize>,
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub cases: PathBuf,
    pub k: usize,
    pub roster: PathBuf,
    pub trees: PathBuf,
    pub graph: PathBuf,
    pub output: PathBuf,
    pub failures: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub workers: Option<usize>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub session: SessionSection,
}

/// Flag values that override the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub backend: Option<BackendKind>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub output: Option<PathBuf>,
}

/// Backend settings after precedence is applied.
#[derive(Debug, Clone)]
pub enum Backend {
    Script(PathBuf),
    Http { endpoint: String, model: String },
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub manifest: Manifest,
    pub backend: Backend,
    pub workers: usize,
    pub session: SessionConfig,
    pub failures: PathBuf,
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let mut m: Manifest = toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut m.cases, &mut m.roster, &mut m.trees, &mut m.graph, &mut m.output] {
            *p = rebase(base, p);
        }
        for p in [&mut m.failures, &mut m.templates, &mut m.backend.script]
            .into_iter()
            .flatten()
        {
            *p = rebase(base, p);
        }
        Ok(m)
    }

    pub fn resolve(mut self, flags: Overrides) -> Result<Resolved> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(out) = flags.output {
            self.output = out;
        }
        let kind = flags.backend.or(self.backend.kind).unwrap_or(BackendKind::Script);
        let backend = match kind {
            BackendKind::Script => Backend::Script(
                self.backend
                    .script
                    .clone()
                    .context("script backend selected but [backend].script is not set")?,
            ),
            BackendKind::Http => {
                let endpoint = flags
                    .endpoint
                    .or_else(|| self.backend.endpoint.clone())
                    .or_else(|| std::env::var(ENV_ENDPOINT).ok())
                    .with_context(|| {
                        format!("no endpoint: pass --endpoint, set [backend].endpoint or {ENV_ENDPOINT}")
                    })?;
                let model = flags
                    .model
                    .or_else(|| self.backend.model.clone())
                    .or_else(|| std::env::var(ENV_MODEL).ok())
                    .with_context(|| format!("no model: pass --model, set [backend].model or {ENV_MODEL}"))?;
                Backend::Http { endpoint, model }
            }
        };
        let s = &self.session;
        let mut session = SessionConfig::default();
        session.dup_strategy = s.dup_strategy.unwrap_or(match kind {
            BackendKind::Script => DupStrategy::Substring,
            BackendKind::Http => DupStrategy::Llm,
        });
        if let Some(v) = s.exchange_cap {
            if v == 0 {
                bail!("session.exchange_cap must be at least 1");
            }
            session.exchange_cap = v;
        }
        if let Some(v) = s.max_topics {
            session.caps.max_topics = v;
        }
        if let Some(v) = s.max_depth {
            session.caps.max_depth = v;
        }
        if let Some(v) = s.history_window {
            session.history_window = v;
        }
        if let Some(v) = s.temperature {
            if !(0.0..=2.0).contains(&v) {
                bail!("session.temperature {v} outside [0, 2]");
            }
            session.sampling.generative_temperature = v;
        }
        if let Some(v) = s.max_tokens {
            session.sampling.max_tokens = v;
        }
        let workers = flags.workers.or(self.workers).unwrap_or(1);
        if workers == 0 {
            bail!("workers must be at least 1");
        }
        let failures = self.failures.clone().unwrap_or_else(|| {
            let mut p = self.output.clone().into_os_string();
            p.push(".failures");
            PathBuf::from(p)
        });
        Ok(Resolved {
            manifest: self,
            backend,
            workers,
            session,
            failures,
        })
    }
}
