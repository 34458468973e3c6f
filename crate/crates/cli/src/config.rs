//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use kcr_core::backends::{BackendRole, BackendSpec};
use kcr_core::condense::DecodeParams;
use kcr_core::corpus::AnswerMode;
use kcr_core::eval::Metric;
use kcr_core::reason::AblationConfig;
use kcr_core::retrieval::DEFAULT_TOP_K;
use serde::{Deserialize, Serialize};

/// Input and output locations. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub visual_contexts: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Defaults to the embeddings path with an `.ids.jsonl` extension.
    pub embedding_ids: Option<PathBuf>,
    pub implicit: Option<PathBuf>,
    /// Condensation records. Written by `condense`; when set, `answer` and
    /// the experiment commands read it instead of condensing live.
    pub condensed: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            visual_contexts: None,
            passages: None,
            embeddings: None,
            embedding_ids: None,
            implicit: None,
            condensed: None,
            cache_dir: None,
            output_dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub concepts: DecodeParams,
    pub essence: DecodeParams,
    pub answer: DecodeParams,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            concepts: DecodeParams::concepts(),
            essence: DecodeParams::long(),
            answer: DecodeParams::long(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_mode")]
    pub mode: AnswerMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub skip_failed: bool,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
}

fn default_mode() -> AnswerMode {
    AnswerMode::DirectAnswer
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}

fn default_workers() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            mode: default_mode(),
            k: default_k(),
            workers: default_workers(),
            seed: None,
            metric: Metric::default(),
            skip_failed: false,
            decoding: Decoding::default(),
            ablation: AblationConfig::default(),
            backends: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.dataset,
            &mut p.visual_contexts,
            &mut p.passages,
            &mut p.embeddings,
            &mut p.embedding_ids,
            &mut p.implicit,
            &mut p.condensed,
            &mut p.cache_dir,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
    }

    pub fn backends_with_role(&self, role: BackendRole) -> impl Iterator<Item = &BackendSpec> {
        self.backends.iter().filter(move |b| b.role == role)
    }

    pub fn embedding_ids_path(&self) -> Option<PathBuf> {
        self.paths.embedding_ids.clone().or_else(|| {
            self.paths
                .embeddings
                .as_ref()
                .map(|e| e.with_extension("ids.jsonl"))
        })
    }

    /// Checks the invariants that do not need any file to be opened.
    ///
    /// `live_condense` says whether the command will run the condensers
    /// itself rather than read a condensation file; `answering` whether it
    /// calls the reasoner.
    pub fn validate(&self, live_condense: bool, answering: bool) -> anyhow::Result<()> {
        let a = &self.ablation;
        if self.k == 0 {
            bail!("k must be positive");
        }
        if self.workers == 0 {
            bail!("workers must be positive");
        }
        let mut ids = std::collections::HashSet::new();
        for b in &self.backends {
            if !ids.insert(b.id.as_str()) {
                bail!("duplicate backend id '{}'", b.id);
            }
        }
        let need = |role: BackendRole, why: &str| -> anyhow::Result<()> {
            if self.backends_with_role(role).next().is_none() {
                bail!("{why} needs a '{role}' backend, none is configured");
            }
            Ok(())
        };
        if answering {
            need(BackendRole::Reasoner, "answering")?;
        }
        if self.backends_with_role(BackendRole::Reasoner).count() > 1 {
            bail!("exactly one 'reasoner' backend may be configured");
        }
        if self.backends_with_role(BackendRole::Embedder).count() > 1 {
            bail!("at most one 'embedder' backend may be configured");
        }
        if self.backends_with_role(BackendRole::CondenserLlm).count() > 1 {
            bail!("at most one 'condenser-llm' backend may be configured");
        }
        if answering && a.use_passages {
            need(BackendRole::Embedder, "use_passages")?;
        }
        if live_condense && a.needs_condensation() {
            need(BackendRole::Embedder, "live condensation")?;
            if a.use_concepts && a.n_concepts > 0 {
                need(BackendRole::CondenserVlm, "use_concepts")?;
            }
            if a.use_essence && a.n_essences > 0 {
                need(BackendRole::CondenserLlm, "use_essence")?;
            }
            let most = a.n_concepts.max(a.n_essences);
            if self.k < most {
                bail!("k = {} is smaller than the configured knowledge count {most}", self.k);
            }
        }
        Ok(())
    }
}
