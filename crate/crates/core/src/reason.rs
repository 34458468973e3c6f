//! Knowledge reasoning: build the reasoner request from the visual context,
//! the question and whichever knowledge sources are enabled, then ask the
//! reasoner backend for the answer.
//!
//! Segment grammar, in this order:
//!
//! ```text
//! context: {caption} | question: {Q} | candidates: a1 (0.90), a2 (0.30)
//!   | concepts: c1; c2 | facts: e1; e2 | passages: p1; p2
//! ```
//!
//! Concatenated-knowledge fusion joins the present segments into one
//! sequence. Concatenated-embedding fusion emits three sequences that each
//! repeat context and question and carry one knowledge group (concepts,
//! facts, candidates plus optional passages), with empty groups rendered as
//! `none`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{canonical_json, Backend, BackendError, GenerateRequest, ScoreRequest};
use crate::condense::{self, CondenseError, CondensedKnowledge, Condensers, DecodeParams};
use crate::corpus::{AnswerMode, ImplicitCandidate, Passage, Sample, VisualContext};
use crate::events::Event;
use crate::retrieval::{self, Index, RetrievalError};

pub const SEGMENT_SEPARATOR: &str = " | ";
pub const ITEM_SEPARATOR: &str = "; ";
pub const CANDIDATE_SEPARATOR: &str = ", ";
pub const CONTEXT_LABEL: &str = "context: ";
pub const QUESTION_LABEL: &str = "question: ";
pub const CANDIDATES_LABEL: &str = "candidates: ";
pub const CONCEPTS_LABEL: &str = "concepts: ";
pub const FACTS_LABEL: &str = "facts: ";
pub const PASSAGES_LABEL: &str = "passages: ";
pub const NONE_PLACEHOLDER: &str = "none";

pub const DEFAULT_N_KNOWLEDGE: usize = 5;
pub const DEFAULT_N_IMPLICIT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    ConcatKnowledge,
    ConcatEmbedding,
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat-knowledge" => Ok(Self::ConcatKnowledge),
            "concat-embedding" => Ok(Self::ConcatEmbedding),
            other => Err(format!("unknown fusion mode '{other}'")),
        }
    }
}

/// Which knowledge sources feed the reasoner, and how many of each.
///
/// The default is the essence + concepts + implicit setting without raw
/// passages, five of each, concatenated-knowledge fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_passages: bool,
    pub use_essence: bool,
    pub use_concepts: bool,
    pub use_implicit: bool,
    pub n_concepts: usize,
    pub n_essences: usize,
    pub n_implicit: usize,
    pub n_passages: usize,
    pub fusion: Fusion,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::with_flags(false, true, true, true)
    }
}

/// Knowledge-source flags of the ten condensation ablation rows:
/// (passages, essence, concepts, implicit).
const ABLATION_ROWS: [(bool, bool, bool, bool); 10] = [
    (false, false, false, false),
    (true, false, false, false),
    (false, true, false, false),
    (false, false, true, false),
    (false, false, false, true),
    (true, false, false, true),
    (false, true, false, true),
    (false, false, true, true),
    (false, true, true, true),
    (true, true, true, true),
];

impl AblationConfig {
    pub fn with_flags(passages: bool, essence: bool, concepts: bool, implicit: bool) -> Self {
        Self {
            use_passages: passages,
            use_essence: essence,
            use_concepts: concepts,
            use_implicit: implicit,
            n_concepts: DEFAULT_N_KNOWLEDGE,
            n_essences: DEFAULT_N_KNOWLEDGE,
            n_implicit: DEFAULT_N_IMPLICIT,
            n_passages: DEFAULT_N_KNOWLEDGE,
            fusion: Fusion::ConcatKnowledge,
        }
    }

    /// Row `row` (1-based) of the condensation ablation table.
    pub fn ablation_row(row: usize) -> Option<Self> {
        let (p, e, c, i) = *ABLATION_ROWS.get(row.checked_sub(1)?)?;
        Some(Self::with_flags(p, e, c, i))
    }

    /// All ten ablation rows as `(row_id, config)`.
    pub fn ablation_rows() -> Vec<(String, Self)> {
        (1..=ABLATION_ROWS.len())
            .map(|r| (r.to_string(), Self::ablation_row(r).unwrap()))
            .collect()
    }

    pub fn needs_condensation(&self) -> bool {
        (self.use_concepts && self.n_concepts > 0) || (self.use_essence && self.n_essences > 0)
    }
}

/// The reasoner request: one sequence, or three grouped sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub sequences: Vec<String>,
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub sample_id: String,
    /// Raw reasoner output; normalization happens at scoring time.
    pub answer: String,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_index: Option<usize>,
}

fn segment(label: &str, body: &str) -> String {
    format!("{label}{body}")
}

fn list_segment(label: &str, items: &[String], sep: &str) -> Option<String> {
    (!items.is_empty()).then(|| segment(label, &items.join(sep)))
}

fn format_candidates(candidates: &[ImplicitCandidate]) -> Vec<String> {
    candidates
        .iter()
        .map(|c| format!("{} ({:.2})", c.answer, c.score))
        .collect()
}

/// Builds the reasoner input for one sample under `cfg`.
///
/// Lists are cut to the configured counts here as well, so passing
/// untruncated inputs is harmless.
pub fn assemble(
    vc: &VisualContext,
    question: &str,
    ck: &CondensedKnowledge,
    passages: &[Arc<Passage>],
    implicit: &[ImplicitCandidate],
    cfg: &AblationConfig,
) -> AssembledInput {
    let take = |items: &[String], enabled: bool, n: usize| -> Vec<String> {
        if enabled {
            items.iter().take(n).cloned().collect()
        } else {
            Vec::new()
        }
    };
    let concepts = take(&ck.concepts, cfg.use_concepts, cfg.n_concepts);
    let facts = take(&ck.essences, cfg.use_essence, cfg.n_essences);
    let candidates = if cfg.use_implicit {
        format_candidates(&implicit[..implicit.len().min(cfg.n_implicit)])
    } else {
        Vec::new()
    };
    let passage_texts: Vec<String> = if cfg.use_passages {
        passages.iter().take(cfg.n_passages).map(|p| p.text.clone()).collect()
    } else {
        Vec::new()
    };

    let head = [
        segment(CONTEXT_LABEL, &vc.caption),
        segment(QUESTION_LABEL, question),
    ];
    let sequences = match cfg.fusion {
        Fusion::ConcatKnowledge => {
            let segments: Vec<String> = head
                .into_iter()
                .chain(list_segment(CANDIDATES_LABEL, &candidates, CANDIDATE_SEPARATOR))
                .chain(list_segment(CONCEPTS_LABEL, &concepts, ITEM_SEPARATOR))
                .chain(list_segment(FACTS_LABEL, &facts, ITEM_SEPARATOR))
                .chain(list_segment(PASSAGES_LABEL, &passage_texts, ITEM_SEPARATOR))
                .collect();
            vec![segments.join(SEGMENT_SEPARATOR)]
        }
        Fusion::ConcatEmbedding => {
            let group = |label: &str, items: &[String], sep: &str| {
                list_segment(label, items, sep).unwrap_or_else(|| segment(label, NONE_PLACEHOLDER))
            };
            let mut third = vec![group(CANDIDATES_LABEL, &candidates, CANDIDATE_SEPARATOR)];
            if cfg.use_passages {
                third.push(group(PASSAGES_LABEL, &passage_texts, ITEM_SEPARATOR));
            }
            let with_head = |rest: Vec<String>| {
                head.iter()
                    .cloned()
                    .chain(rest)
                    .collect::<Vec<_>>()
                    .join(SEGMENT_SEPARATOR)
            };
            vec![
                with_head(vec![group(CONCEPTS_LABEL, &concepts, ITEM_SEPARATOR)]),
                with_head(vec![group(FACTS_LABEL, &facts, ITEM_SEPARATOR)]),
                with_head(third),
            ]
        }
    };
    AssembledInput {
        sequences,
        image_ref: None,
    }
}

/// Generates the answer with a single reasoner call.
pub fn answer(reasoner: &dyn Backend, ai: &AssembledInput, params: DecodeParams) -> Result<String, BackendError> {
    reasoner.generate(&GenerateRequest {
        inputs: ai.sequences.clone(),
        image_ref: ai.image_ref.clone(),
        beam_size: params.beam_size,
        max_new_tokens: params.max_new_tokens,
    })
}

/// Picks the choice with the highest length-normalized log-likelihood;
/// the lowest index wins ties.
pub fn answer_multiple_choice(
    reasoner: &dyn Backend,
    ai: &AssembledInput,
    choices: &[String],
) -> Result<usize, BackendError> {
    if choices.len() != 4 {
        return Err(BackendError::InvalidRequest(format!(
            "multiple choice needs exactly 4 choices, got {}",
            choices.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, choice) in choices.iter().enumerate() {
        let s = reasoner.score(&ScoreRequest {
            inputs: ai.sequences.clone(),
            image_ref: ai.image_ref.clone(),
            target: choice.clone(),
        })?;
        let normalized = s.logprob / s.token_count as f64;
        if best.is_none_or(|(_, b)| normalized > b) {
            best = Some((i, normalized));
        }
    }
    Ok(best.expect("four choices scored").0)
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Condense(#[from] CondenseError),
    #[error("sample '{sample_id}': {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error("sample '{sample_id}': {message}")]
    MissingInput { sample_id: String, message: String },
}

/// Loaded inputs shared by every sample of a run.
#[derive(Default, Clone, Copy)]
pub struct Stores<'a> {
    pub visual_contexts: Option<&'a BTreeMap<String, VisualContext>>,
    pub index: Option<&'a Index>,
    pub implicit: Option<&'a HashMap<String, Vec<ImplicitCandidate>>>,
    /// Precomputed condensation output; live condensation is used when absent.
    pub condensed: Option<&'a HashMap<String, CondensedKnowledge>>,
}

#[derive(Clone)]
pub struct Backends {
    pub embedder: Option<Arc<dyn Backend>>,
    pub condensers: Condensers,
    pub reasoner: Arc<dyn Backend>,
}

impl Backends {
    pub fn ids(&self) -> Vec<String> {
        self.embedder
            .iter()
            .chain(self.condensers.vlms.iter())
            .chain(self.condensers.llm.iter())
            .chain(std::iter::once(&self.reasoner))
            .map(|b| b.id().to_string())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub ablation: AblationConfig,
    pub k: usize,
    pub answer_params: DecodeParams,
    pub workers: usize,
    pub mode: AnswerMode,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            ablation: AblationConfig::default(),
            k: retrieval::DEFAULT_TOP_K,
            answer_params: DecodeParams::long(),
            workers: 1,
            mode: AnswerMode::DirectAnswer,
        }
    }
}

/// Short hash identifying the configuration and backends behind a run.
pub fn config_fingerprint(settings: &PipelineSettings, backends: &Backends) -> String {
    let value = serde_json::json!({
        "ablation": settings.ablation,
        "k": settings.k,
        "answer_params": settings.answer_params,
        "concept_params": backends.condensers.concept_params,
        "essence_params": backends.condensers.essence_params,
        "mode": settings.mode,
        "backends": backends.ids(),
    });
    let digest = Sha256::digest(canonical_json(&value).as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[derive(Debug)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: PipelineError,
}

impl fmt::Display for SampleFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.sample_id, self.error)
    }
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    pub predictions: Vec<Prediction>,
    pub failures: Vec<SampleFailure>,
}

/// Runs `f` over `items` on a pool of `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

fn check_setup(stores: &Stores<'_>, backends: &Backends, settings: &PipelineSettings) -> Result<(), PipelineError> {
    let cfg = &settings.ablation;
    let setup = |m: &str| Err(PipelineError::Setup(m.to_string()));
    if settings.k == 0 {
        return setup("k must be positive");
    }
    if stores.visual_contexts.is_none() {
        return setup("visual contexts are required");
    }
    if cfg.use_implicit && stores.implicit.is_none() {
        return setup("implicit knowledge is enabled but no implicit file was loaded");
    }
    let live = cfg.needs_condensation() && stores.condensed.is_none();
    if cfg.use_passages || live {
        if stores.index.is_none() {
            return setup("retrieval index is required");
        }
        if backends.embedder.is_none() {
            return setup("an embedder backend is required for retrieval");
        }
    }
    if live {
        if cfg.use_concepts && cfg.n_concepts > 0 && backends.condensers.vlms.is_empty() {
            return setup("concepts are enabled but no condenser-vlm backend is configured");
        }
        if cfg.use_essence && cfg.n_essences > 0 && backends.condensers.llm.is_none() {
            return setup("essence is enabled but no condenser-llm backend is configured");
        }
    }
    Ok(())
}

fn timed<T>(stage: &str, sample_id: &str, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let start = Instant::now();
    let out = f();
    let mut event = Event::new(stage).sample(sample_id).duration(start.elapsed());
    if let Err(e) = &out {
        event = event.error(e);
    }
    event.emit();
    out
}

fn process_sample(
    sample: &Sample,
    stores: &Stores<'_>,
    backends: &Backends,
    settings: &PipelineSettings,
    fingerprint: &str,
) -> Result<Prediction, PipelineError> {
    let cfg = &settings.ablation;
    let sid = sample.sample_id.as_str();
    let missing = |message: String| PipelineError::MissingInput {
        sample_id: sid.to_string(),
        message,
    };
    let vc = stores
        .visual_contexts
        .and_then(|m| m.get(&sample.image_ref))
        .ok_or_else(|| missing(format!("no visual context for image_ref '{}'", sample.image_ref)))?;

    let live = cfg.needs_condensation() && stores.condensed.is_none();
    let passages = if cfg.use_passages || live {
        timed("retrieve", sid, || {
            let index = stores.index.expect("checked in setup");
            let embedder = backends.embedder.as_deref().expect("checked in setup");
            let set = retrieval::retrieve_for_sample(index, embedder, sid, vc, &sample.question, settings.k)?;
            Ok(index.passages_for(&set.hits))
        })?
    } else {
        Vec::new()
    };

    let ck = if !cfg.needs_condensation() {
        CondensedKnowledge::empty(sid)
    } else if let Some(store) = stores.condensed {
        store
            .get(sid)
            .cloned()
            .ok_or_else(|| missing("no condensation record".into()))?
    } else {
        timed("condense", sid, || {
            Ok(condense::condense_sample(
                &backends.condensers,
                sample,
                vc,
                &passages,
                cfg.use_concepts && cfg.n_concepts > 0,
                cfg.use_essence && cfg.n_essences > 0,
            )?)
        })?
    };
    let ck = condense::truncate_knowledge(&ck, cfg.n_concepts, cfg.n_essences);

    let implicit: &[ImplicitCandidate] = if cfg.use_implicit {
        stores
            .implicit
            .and_then(|m| m.get(sid))
            .map(Vec::as_slice)
            .ok_or_else(|| missing("no implicit candidates".into()))?
    } else {
        &[]
    };
    let ai = assemble(vc, &sample.question, &ck, &passages, implicit, cfg);

    timed("answer", sid, || {
        let backend_err = |source| PipelineError::Backend {
            sample_id: sid.to_string(),
            source,
        };
        let answer_text =
            answer(backends.reasoner.as_ref(), &ai, settings.answer_params).map_err(backend_err)?;
        let choice_index = match (&sample.choices, settings.mode) {
            (Some(choices), AnswerMode::MultipleChoice) => Some(
                answer_multiple_choice(backends.reasoner.as_ref(), &ai, choices).map_err(backend_err)?,
            ),
            (None, AnswerMode::MultipleChoice) => {
                return Err(missing("multiple-choice run but the sample has no choices".into()))
            }
            _ => None,
        };
        Ok(Prediction {
            sample_id: sid.to_string(),
            answer: answer_text,
            config_fingerprint: fingerprint.to_string(),
            choice_index,
        })
    })
}

/// Retrieve, condense, assemble and answer every sample.
///
/// Setup problems fail the whole run; per-sample failures are collected in
/// the output next to the successful predictions, both in dataset order.
pub fn run_pipeline(
    dataset: &[Sample],
    stores: &Stores<'_>,
    backends: &Backends,
    settings: &PipelineSettings,
) -> Result<PipelineOutput, PipelineError> {
    check_setup(stores, backends, settings)?;
    let fingerprint = config_fingerprint(settings, backends);
    let results = parallel_map(settings.workers, dataset, |s| {
        process_sample(s, stores, backends, settings, &fingerprint)
    });
    let mut out = PipelineOutput::default();
    for (sample, result) in dataset.iter().zip(results) {
        match result {
            Ok(p) => out.predictions.push(p),
            Err(error) => out.failures.push(SampleFailure {
                sample_id: sample.sample_id.clone(),
                error,
            }),
        }
    }
    Ok(out)
}
