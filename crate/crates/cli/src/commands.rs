//! Subcommand bodies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use kcr_core::backends::{
    Backend, BackendError, BackendRole, BackendSpec, CachedBackend, Request, Response, ResponseCache,
};
use kcr_core::condense::{self, CondensedKnowledge, Condensers};
use kcr_core::corpus::{self, AnswerMode, ImplicitCandidate, Passage, Sample, VisualContext};
use kcr_core::eval::{self, Metric};
use kcr_core::events::Event;
use kcr_core::reason::{self, AblationConfig, Backends, Fusion, PipelineSettings, Prediction, Stores};
use kcr_core::retrieval::{self, EmbeddingMatrix, Index};
use kcr_core::synth::{self, SynthParams};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad or incomplete configuration (exit 2).
    Config(anyhow::Error),
    /// Validation or run failure (exit 1).
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

macro_rules! run_failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Run(e.into())
            }
        }
    )*};
}

run_failure_from!(
    corpus::CorpusError,
    retrieval::RetrievalError,
    reason::PipelineError,
    eval::EvalError,
    synth::SynthError,
    serde_json::Error,
    toml::ser::Error
);

pub type CmdResult = Result<(), Failure>;

fn config_error(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

pub const RETRIEVED_FILE: &str = "retrieved.jsonl";
pub const CONDENSED_FILE: &str = "condensed.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Counts requests that actually reach a backend (cache hits never do).
struct Counted {
    inner: Arc<dyn Backend>,
    calls: Arc<AtomicUsize>,
}

impl Backend for Counted {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn role(&self) -> kcr_core::backends::BackendRole {
        self.inner.role()
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.call(request)
    }
}

/// Everything a command needs: the resolved config and its backends.
pub struct Context<'o> {
    pub cfg: RunConfig,
    pub out: &'o mut dyn Write,
    calls: Arc<AtomicUsize>,
    cache: Option<ResponseCache>,
}

struct Built {
    embedder: Option<Arc<dyn Backend>>,
    vlms: Vec<Arc<dyn Backend>>,
    llm: Option<Arc<dyn Backend>>,
    reasoner: Option<Arc<dyn Backend>>,
}

impl<'o> Context<'o> {
    pub fn new(cfg: RunConfig, out: &'o mut dyn Write) -> Result<Self, Failure> {
        let cache = match &cfg.paths.cache_dir {
            Some(dir) => Some(
                ResponseCache::open(dir)
                    .with_context(|| format!("opening cache dir {}", dir.display()))?,
            ),
            None => None,
        };
        Ok(Self {
            cfg,
            out,
            calls: Arc::default(),
            cache,
        })
    }

    /// Requests that reached a backend so far in this process.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn wrap(&self, spec: &BackendSpec) -> Result<Arc<dyn Backend>, Failure> {
        let inner = spec.build().map_err(config_error)?;
        let counted: Arc<dyn Backend> = Arc::new(Counted {
            inner,
            calls: self.calls.clone(),
        });
        Ok(Arc::new(CachedBackend::new(counted, self.cache.clone())))
    }

    fn build(&self) -> Result<Built, Failure> {
        let first = |role| -> Result<Option<Arc<dyn Backend>>, Failure> {
            self.cfg.backends_with_role(role).next().map(|s| self.wrap(s)).transpose()
        };
        Ok(Built {
            embedder: first(BackendRole::Embedder)?,
            vlms: self
                .cfg
                .backends_with_role(BackendRole::CondenserVlm)
                .map(|s| self.wrap(s))
                .collect::<Result<_, _>>()?,
            llm: first(BackendRole::CondenserLlm)?,
            reasoner: first(BackendRole::Reasoner)?,
        })
    }

    fn condensers(&self, built: &Built) -> Condensers {
        Condensers {
            vlms: built.vlms.clone(),
            llm: built.llm.clone(),
            concept_params: self.cfg.decoding.concepts,
            essence_params: self.cfg.decoding.essence,
        }
    }

    fn backends(&self) -> Result<Backends, Failure> {
        let built = self.build()?;
        Ok(Backends {
            embedder: built.embedder.clone(),
            condensers: self.condensers(&built),
            reasoner: built
                .reasoner
                .clone()
                .ok_or_else(|| config_error("no reasoner backend configured"))?,
        })
    }

    fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            ablation: self.cfg.ablation,
            k: self.cfg.k,
            answer_params: self.cfg.decoding.answer,
            workers: self.cfg.workers,
            mode: self.cfg.mode,
        }
    }

    fn path(&self, slot: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
        slot.clone()
            .ok_or_else(|| config_error(format!("paths.{name} is not set")))
    }

    fn output(&self, name: &str) -> anyhow::Result<PathBuf> {
        let dir = &self.cfg.paths.output_dir;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir.join(name))
    }

    fn condensed_path(&self) -> PathBuf {
        self.cfg
            .paths
            .condensed
            .clone()
            .unwrap_or_else(|| self.cfg.paths.output_dir.join(CONDENSED_FILE))
    }
}

struct Inputs {
    dataset: Vec<Sample>,
    visual_contexts: Option<BTreeMap<String, VisualContext>>,
    index: Option<Index>,
    implicit: Option<HashMap<String, Vec<ImplicitCandidate>>>,
    condensed: Option<HashMap<String, CondensedKnowledge>>,
}

impl Inputs {
    fn stores(&self) -> Stores<'_> {
        Stores {
            visual_contexts: self.visual_contexts.as_ref(),
            index: self.index.as_ref(),
            implicit: self.implicit.as_ref(),
            condensed: self.condensed.as_ref(),
        }
    }
}

fn load_dataset(ctx: &Context) -> Result<Vec<Sample>, Failure> {
    let path = ctx.path(&ctx.cfg.paths.dataset, "dataset")?;
    Ok(corpus::load_dataset(&path, ctx.cfg.mode)?)
}

fn load_visual_contexts(ctx: &Context) -> Result<BTreeMap<String, VisualContext>, Failure> {
    let path = ctx.path(&ctx.cfg.paths.visual_contexts, "visual_contexts")?;
    Ok(corpus::load_visual_contexts(&path)?)
}

fn load_index(ctx: &Context) -> Result<Index, Failure> {
    let passages = corpus::load_passages(&ctx.path(&ctx.cfg.paths.passages, "passages")?)?;
    let emb = ctx.path(&ctx.cfg.paths.embeddings, "embeddings")?;
    let ids = ctx.cfg.embedding_ids_path().expect("embeddings path is set");
    let matrix = EmbeddingMatrix::read(&emb, &ids)?;
    Ok(Index::build(&passages, matrix)?)
}

fn load_implicit(ctx: &Context) -> Result<HashMap<String, Vec<ImplicitCandidate>>, Failure> {
    let path = ctx.path(&ctx.cfg.paths.implicit, "implicit")?;
    Ok(corpus::load_implicit(&path)?)
}

fn load_condensed(path: &Path) -> anyhow::Result<Vec<CondensedKnowledge>> {
    Ok(corpus::read_jsonl::<CondensedKnowledge>(path)?
        .into_iter()
        .map(|(_, ck)| ck)
        .collect())
}

/// Loads what a pipeline run over any of `configs` may touch.
fn load_pipeline_inputs(ctx: &Context, configs: &[AblationConfig]) -> Result<Inputs, Failure> {
    let precomputed = ctx.cfg.paths.condensed.clone();
    let needs_index = configs
        .iter()
        .any(|c| c.use_passages || (c.needs_condensation() && precomputed.is_none()));
    let condensed = match precomputed {
        Some(path) if configs.iter().any(AblationConfig::needs_condensation) => Some(
            load_condensed(&path)
                .with_context(|| format!("reading condensation file {}", path.display()))?
                .into_iter()
                .map(|ck| (ck.sample_id.clone(), ck))
                .collect(),
        ),
        _ => None,
    };
    Ok(Inputs {
        dataset: load_dataset(ctx)?,
        visual_contexts: Some(load_visual_contexts(ctx)?),
        index: if needs_index { Some(load_index(ctx)?) } else { None },
        implicit: if configs.iter().any(|c| c.use_implicit) {
            Some(load_implicit(ctx)?)
        } else {
            None
        },
        condensed,
    })
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reports per-sample failures; they fail the command unless skipped.
fn settle_failures(ctx: &Context, what: &str, failures: &[String]) -> CmdResult {
    for f in failures {
        Event::new(what).error(f).emit();
        eprintln!("{what} failed: {f}");
    }
    if failures.is_empty() || ctx.cfg.skip_failed {
        Ok(())
    } else {
        Err(Failure::Run(anyhow!("{} sample(s) failed during {what}", failures.len())))
    }
}

pub fn ingest(ctx: &mut Context) -> CmdResult {
    let dataset = load_dataset(ctx)?;
    writeln!(ctx.out, "dataset: {} samples ({})", dataset.len(), mode_name(ctx.cfg.mode)).ok();
    if ctx.cfg.paths.visual_contexts.is_some() {
        let vcs = load_visual_contexts(ctx)?;
        let missing: Vec<&str> = dataset
            .iter()
            .filter(|s| !vcs.contains_key(&s.image_ref))
            .map(|s| s.sample_id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Failure::Run(anyhow!(
                "{} sample(s) have no visual context: {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        writeln!(ctx.out, "visual contexts: {}", vcs.len()).ok();
    }
    if let Some(path) = &ctx.cfg.paths.passages {
        let passages: Vec<Passage> = corpus::load_passages(path)?;
        writeln!(ctx.out, "passages: {}", passages.len()).ok();
    }
    if ctx.cfg.paths.implicit.is_some() {
        let implicit = load_implicit(ctx)?;
        writeln!(ctx.out, "implicit records: {}", implicit.len()).ok();
    }
    Ok(())
}

fn mode_name(mode: AnswerMode) -> &'static str {
    match mode {
        AnswerMode::DirectAnswer => "direct-answer",
        AnswerMode::MultipleChoice => "multiple-choice",
    }
}

pub fn index(ctx: &mut Context) -> CmdResult {
    let index = load_index(ctx)?;
    writeln!(ctx.out, "index: {} passages, dim {}", index.len(), index.dim()).ok();
    Ok(())
}

pub fn retrieve(ctx: &mut Context) -> CmdResult {
    let dataset = load_dataset(ctx)?;
    let vcs = load_visual_contexts(ctx)?;
    let index = load_index(ctx)?;
    let embedder = ctx
        .build()?
        .embedder
        .ok_or_else(|| config_error("retrieval needs an 'embedder' backend"))?;
    let results = reason::parallel_map(ctx.cfg.workers, &dataset, |s| {
        let vc = vcs
            .get(&s.image_ref)
            .ok_or_else(|| format!("{}: no visual context for '{}'", s.sample_id, s.image_ref))?;
        retrieval::retrieve_for_sample(&index, embedder.as_ref(), &s.sample_id, vc, &s.question, ctx.cfg.k)
            .map_err(|e| e.to_string())
    });
    let (sets, failures) = split_results(results);
    let path = ctx.output(RETRIEVED_FILE)?;
    corpus::write_jsonl(&path, &sets).with_context(|| format!("writing {}", path.display()))?;
    writeln!(ctx.out, "retrieved top-{} for {} samples -> {}", ctx.cfg.k, sets.len(), path.display()).ok();
    settle_failures(ctx, "retrieve", &failures)
}

fn split_results<T>(results: Vec<Result<T, String>>) -> (Vec<T>, Vec<String>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push(e),
        }
    }
    (ok, failed)
}

/// Live condensation into the condensation file, skipping sample ids that
/// are already present so an interrupted run can be resumed.
pub fn condense(ctx: &mut Context) -> CmdResult {
    ctx.cfg.validate(true, false).map_err(Failure::Config)?;
    let a = ctx.cfg.ablation;
    let (want_concepts, want_essences) = (a.use_concepts, a.use_essence);
    if !want_concepts && !want_essences {
        return Err(config_error("neither concepts nor essence is enabled; nothing to condense"));
    }
    let dataset = load_dataset(ctx)?;
    let vcs = load_visual_contexts(ctx)?;
    let index = load_index(ctx)?;
    let built = ctx.build()?;
    let embedder = built
        .embedder
        .clone()
        .ok_or_else(|| config_error("condensation needs an 'embedder' backend"))?;
    let condensers = ctx.condensers(&built);

    let path = ctx.condensed_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let done: HashSet<String> = if path.exists() {
        load_condensed(&path)
            .with_context(|| format!("reading existing {}", path.display()))?
            .into_iter()
            .map(|ck| ck.sample_id)
            .collect()
    } else {
        HashSet::new()
    };
    let todo: Vec<&Sample> = dataset.iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let k = ctx.cfg.k;
    let results = reason::parallel_map(ctx.cfg.workers, &todo, |s| {
        let vc = vcs
            .get(&s.image_ref)
            .ok_or_else(|| format!("{}: no visual context for '{}'", s.sample_id, s.image_ref))?;
        let set = retrieval::retrieve_for_sample(&index, embedder.as_ref(), &s.sample_id, vc, &s.question, k)
            .map_err(|e| e.to_string())?;
        let passages = index.passages_for(&set.hits);
        condense::condense_sample(&condensers, s, vc, &passages, want_concepts, want_essences)
            .map_err(|e| e.to_string())
    });
    let (records, failures) = split_results(results);
    append_jsonl(&path, &records)?;
    writeln!(
        ctx.out,
        "condensed {} samples ({} already present, {} failed) -> {}; backend calls: {}",
        records.len(),
        done.len(),
        failures.len(),
        path.display(),
        ctx.backend_calls()
    )
    .ok();
    settle_failures(ctx, "condense", &failures)
}

#[derive(Serialize)]
struct InputHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    config_fingerprint: String,
    backend_ids: Vec<String>,
    inputs: BTreeMap<&'static str, InputHash>,
}

fn input_hashes(ctx: &Context, inputs: &Inputs) -> anyhow::Result<BTreeMap<&'static str, InputHash>> {
    let p = &ctx.cfg.paths;
    let mut slots: Vec<(&'static str, Option<PathBuf>)> = vec![
        ("dataset", p.dataset.clone()),
        ("visual_contexts", p.visual_contexts.clone()),
    ];
    if inputs.index.is_some() {
        slots.push(("passages", p.passages.clone()));
        slots.push(("embeddings", p.embeddings.clone()));
        slots.push(("embedding_ids", ctx.cfg.embedding_ids_path()));
    }
    if inputs.implicit.is_some() {
        slots.push(("implicit", p.implicit.clone()));
    }
    if inputs.condensed.is_some() {
        slots.push(("condensed", p.condensed.clone()));
    }
    slots
        .into_iter()
        .filter_map(|(name, path)| path.map(|path| (name, path)))
        .map(|(name, path)| Ok((name, InputHash { sha256: sha256_file(&path)?, path })))
        .collect()
}

pub fn answer(ctx: &mut Context, fusion: Option<Fusion>, row: Option<usize>) -> CmdResult {
    if let Some(f) = fusion {
        ctx.cfg.ablation.fusion = f;
    }
    if let Some(r) = row {
        let flags = AblationConfig::ablation_row(r)
            .ok_or_else(|| config_error(format!("ablation row must be 1..=10, got {r}")))?;
        let a = &mut ctx.cfg.ablation;
        (a.use_passages, a.use_essence, a.use_concepts, a.use_implicit) =
            (flags.use_passages, flags.use_essence, flags.use_concepts, flags.use_implicit);
    }
    ctx.cfg
        .validate(ctx.cfg.paths.condensed.is_none(), true)
        .map_err(Failure::Config)?;
    let inputs = load_pipeline_inputs(ctx, &[ctx.cfg.ablation])?;
    let backends = ctx.backends()?;
    let settings = ctx.settings();
    let out = reason::run_pipeline(&inputs.dataset, &inputs.stores(), &backends, &settings)?;

    let path = ctx.output(PREDICTIONS_FILE)?;
    corpus::write_jsonl(&path, &out.predictions).with_context(|| format!("writing {}", path.display()))?;
    let manifest = Manifest {
        config: &ctx.cfg,
        config_fingerprint: reason::config_fingerprint(&settings, &backends),
        backend_ids: backends.ids(),
        inputs: input_hashes(ctx, &inputs)?,
    };
    let mpath = ctx.output(MANIFEST_FILE)?;
    write_file(&mpath, (serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)? + "\n").as_bytes())?;
    writeln!(
        ctx.out,
        "answered {} samples ({} failed) -> {}; backend calls: {}",
        out.predictions.len(),
        out.failures.len(),
        path.display(),
        ctx.backend_calls()
    )
    .ok();
    let failures: Vec<String> = out.failures.iter().map(ToString::to_string).collect();
    settle_failures(ctx, "answer", &failures)
}

pub fn evaluate(ctx: &mut Context, predictions: Option<PathBuf>, metric: Option<Metric>) -> CmdResult {
    let dataset = load_dataset(ctx)?;
    let path = predictions.unwrap_or_else(|| ctx.cfg.paths.output_dir.join(PREDICTIONS_FILE));
    let preds: Vec<Prediction> = corpus::read_jsonl(&path)?.into_iter().map(|(_, p)| p).collect();
    let report = eval::evaluate(&preds, &dataset, metric.unwrap_or(ctx.cfg.metric), ctx.cfg.mode)?;
    let rpath = ctx.output(REPORT_FILE)?;
    write_file(&rpath, (serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n").as_bytes())?;
    write!(ctx.out, "{}", report.to_text()).ok();
    Ok(())
}

fn rows_from(ids: &[usize], base: &AblationConfig) -> Result<Vec<(String, AblationConfig)>, Failure> {
    let ids: Vec<usize> = if ids.is_empty() { (1..=10).collect() } else { ids.to_vec() };
    ids.iter()
        .map(|&r| {
            let flags = AblationConfig::ablation_row(r)
                .ok_or_else(|| config_error(format!("ablation row must be 1..=10, got {r}")))?;
            Ok((
                r.to_string(),
                AblationConfig {
                    use_passages: flags.use_passages,
                    use_essence: flags.use_essence,
                    use_concepts: flags.use_concepts,
                    use_implicit: flags.use_implicit,
                    ..*base
                },
            ))
        })
        .collect()
}

pub fn ablate(ctx: &mut Context, row_ids: &[usize]) -> CmdResult {
    ctx.cfg.validate(false, true).map_err(Failure::Config)?;
    let rows = rows_from(row_ids, &ctx.cfg.ablation)?;
    let configs: Vec<AblationConfig> = rows.iter().map(|(_, c)| *c).collect();
    let inputs = load_pipeline_inputs(ctx, &configs)?;
    let backends = ctx.backends()?;
    let results = eval::run_ablation_matrix(
        &inputs.dataset,
        &inputs.stores(),
        &backends,
        &ctx.settings(),
        &rows,
        ctx.cfg.metric,
    );
    let path = ctx.output(ABLATION_FILE)?;
    write_file(&path, eval::ablation_csv(&results).as_bytes())?;
    write!(ctx.out, "{}", eval::ablation_grid(&results)).ok();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.accuracy.as_ref().err().map(|e| format!("row {}: {e}", r.row_id)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(anyhow!("{} ablation row(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

pub fn sweep(ctx: &mut Context, ns: &[usize]) -> CmdResult {
    ctx.cfg
        .validate(ctx.cfg.paths.condensed.is_none(), true)
        .map_err(Failure::Config)?;
    let ns: Vec<usize> = if ns.is_empty() { (1..=5).collect() } else { ns.to_vec() };
    let inputs = load_pipeline_inputs(ctx, &[ctx.cfg.ablation])?;
    let backends = ctx.backends()?;
    let rows = eval::run_count_sweep(&inputs.dataset, &inputs.stores(), &backends, &ctx.settings(), &ns, ctx.cfg.metric)?;
    let path = ctx.output(SWEEP_FILE)?;
    write_file(&path, eval::sweep_csv(&rows).as_bytes())?;
    for r in &rows {
        writeln!(ctx.out, "n = {}: {:.2}%", r.n, r.accuracy * 100.0).ok();
    }
    Ok(())
}

/// Config for a synthetic benchmark: mock backends, default knowledge
/// setting, paths relative to the benchmark directory.
pub fn synth_config(params: &SynthParams) -> RunConfig {
    let mut cfg = RunConfig::default();
    let p = &mut cfg.paths;
    p.dataset = Some(synth::DATASET_FILE.into());
    p.visual_contexts = Some(synth::VISUAL_CONTEXTS_FILE.into());
    p.passages = Some(synth::PASSAGES_FILE.into());
    p.embeddings = Some(synth::EMBEDDINGS_FILE.into());
    p.embedding_ids = Some(synth::EMBEDDING_IDS_FILE.into());
    p.implicit = Some(synth::IMPLICIT_FILE.into());
    cfg.seed = Some(params.seed);
    if params.multiple_choice {
        cfg.mode = AnswerMode::MultipleChoice;
    }
    cfg.backends = vec![
        BackendSpec::mock("mock-embedder", BackendRole::Embedder),
        BackendSpec::mock("mock-vlm", BackendRole::CondenserVlm),
        BackendSpec::mock("mock-llm", BackendRole::CondenserLlm),
        BackendSpec::mock("mock-reasoner", BackendRole::Reasoner),
    ];
    cfg
}

pub fn synth(out: &mut dyn Write, dir: &Path, params: SynthParams) -> CmdResult {
    let bench = synth::generate(params)?;
    bench.write_to_dir(dir)?;
    let cfg = toml::to_string(&synth_config(&params))?;
    write_file(&dir.join(CONFIG_FILE), cfg.as_bytes())?;
    writeln!(
        out,
        "wrote {} samples, {} passages (planted rank {}) -> {}",
        bench.samples.len(),
        bench.passages.len(),
        params.planted_rank,
        dir.display()
    )
    .ok();
    Ok(())
}
