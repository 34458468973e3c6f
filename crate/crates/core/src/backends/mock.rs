//! Deterministic in-process backend.
//!
//! The mock stands in for every model role with simple, hand-checkable
//! rules so the whole pipeline can be asserted exactly:
//!
//! * condensers return the least frequent eligible token of the passage
//!   part of the prompt (alphabetic, at least 3 letters, not a stopword,
//!   not in the question), lowercased; earliest occurrence wins ties;
//!   `"unknown"` if nothing is eligible.
//! * the reasoner returns the plurality concept of the `concepts:`
//!   segments (lexicographically smallest on ties, `"unknown"` concepts
//!   ignored), else the top implicit candidate, else `"unknown"`.
//! * score is `0` when the target normalizes to the generated output and
//!   `-ln 2` per character of edit distance otherwise.
//! * embed maps each text to a seeded, hash-derived unit vector.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, BackendRole, EmbedResponse, GenerateResponse, Request, Response,
    ScoreResponse,
};
use crate::condense::{
    CONCEPT_KNOWLEDGE_LABEL, CONCEPT_QUESTION_LABEL, ESSENCE_ANSWER_LABEL, ESSENCE_KNOWLEDGE_LABEL,
    ESSENCE_QUESTION_LABEL, ESSENCE_SEPARATOR,
};
use crate::corpus::normalize_answer;
use crate::reason::{CANDIDATES_LABEL, CONCEPTS_LABEL, NONE_PLACEHOLDER, SEGMENT_SEPARATOR};

/// Output when the mock has nothing to say.
pub const UNKNOWN: &str = "unknown";

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_EMBED_SEED: u64 = 0;

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "about", "after", "again", "all", "also", "and", "any", "are", "been", "before", "being",
    "both", "but", "can", "could", "did", "does", "doing", "each", "few", "for", "from", "had",
    "has", "have", "her", "here", "him", "his", "how", "into", "its", "just", "may", "might",
    "more", "most", "nor", "not", "now", "off", "once", "only", "onto", "other", "our", "out",
    "over", "own", "same", "she", "should", "some", "such", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "too", "under", "very", "was",
    "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with",
    "would", "you", "your",
];

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    role: BackendRole,
    stopwords: HashSet<String>,
    embed_dim: usize,
    embed_seed: u64,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(id: &str, role: BackendRole) -> Self {
        Self {
            id: id.to_string(),
            role,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: DEFAULT_EMBED_SEED,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self
    }

    pub fn with_embed_seed(mut self, seed: u64) -> Self {
        self.embed_seed = seed;
        self
    }

    pub fn with_stopwords<I: IntoIterator<Item = S>, S: Into<String>>(mut self, words: I) -> Self {
        self.stopwords = words.into_iter().map(|w| w.into().to_lowercase()).collect();
        self
    }

    pub fn with_extra_stopwords<I: IntoIterator<Item = S>, S: Into<String>>(mut self, words: I) -> Self {
        self.stopwords
            .extend(words.into_iter().map(|w| w.into().to_lowercase()));
        self
    }

    /// Recognized params: `stopwords` (replaces the default list),
    /// `extra_stopwords`, `dim`, `seed`.
    pub fn from_params(
        id: &str,
        role: BackendRole,
        params: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self, BackendError> {
        let mut mock = Self::new(id, role);
        for (key, value) in params {
            let bad = || BackendError::Config(format!("mock backend '{id}': invalid param '{key}'"));
            match key.as_str() {
                "stopwords" | "extra_stopwords" => {
                    let words: Vec<String> =
                        serde_json::from_value(value.clone()).map_err(|_| bad())?;
                    mock = if key == "stopwords" {
                        mock.with_stopwords(words)
                    } else {
                        mock.with_extra_stopwords(words)
                    };
                }
                "dim" => {
                    let dim = value.as_u64().filter(|d| *d > 0).ok_or_else(bad)?;
                    mock.embed_dim = dim as usize;
                }
                "seed" => mock.embed_seed = value.as_u64().ok_or_else(bad)?,
                _ => return Err(bad()),
            }
        }
        Ok(mock)
    }

    /// Number of calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn generate_text(&self, inputs: &[String]) -> String {
        match self.role {
            BackendRole::Reasoner => reason_answer(inputs),
            _ => {
                let prompt = inputs.join("\n");
                let (question, passage) = split_condenser_prompt(&prompt);
                least_frequent_token(passage, question, &self.stopwords)
                    .unwrap_or_else(|| UNKNOWN.to_string())
            }
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn role(&self) -> BackendRole {
        self.role
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match request {
            Request::Generate(req) => Response::Generate(GenerateResponse {
                output: self.generate_text(&req.inputs),
            }),
            Request::Score(req) => {
                let generated = self.generate_text(&req.inputs);
                let target = normalize_answer(&req.target);
                let distance = if generated == target {
                    0
                } else {
                    edit_distance(&generated, &target)
                };
                Response::Score(ScoreResponse {
                    logprob: -(distance as f64) * std::f64::consts::LN_2,
                    token_count: req.target.split_whitespace().count().max(1) as u32,
                })
            }
            Request::Embed(req) => Response::Embed(EmbedResponse {
                vectors: req
                    .texts
                    .iter()
                    .map(|t| hash_unit_vector(t, self.embed_dim, self.embed_seed))
                    .collect(),
            }),
        })
    }
}

/// Splits a condenser prompt into `(question, passage)`.
///
/// Understands the essence template and the `question: .. knowledge: ..`
/// concept prompt; anything else is treated as a bare passage.
pub fn split_condenser_prompt(prompt: &str) -> (&str, &str) {
    let knowledge = format!("\n{ESSENCE_KNOWLEDGE_LABEL}");
    let question = format!("\n{ESSENCE_SEPARATOR}\n{ESSENCE_QUESTION_LABEL}");
    let answer = format!("\n{ESSENCE_ANSWER_LABEL}");
    if let Some(k) = prompt.find(&knowledge) {
        let after_k = &prompt[k + knowledge.len()..];
        if let Some(q) = after_k.rfind(&question) {
            let passage = &after_k[..q];
            let rest = &after_k[q + question.len()..];
            let question = rest.rfind(&answer).map_or(rest, |a| &rest[..a]);
            return (question, passage);
        }
    }
    if let Some(rest) = prompt.strip_prefix(CONCEPT_QUESTION_LABEL) {
        if let Some((question, passage)) = rest.split_once(CONCEPT_KNOWLEDGE_LABEL) {
            return (question, passage);
        }
    }
    ("", prompt)
}

fn alpha_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Least frequent eligible token of `passage`; first occurrence breaks ties.
pub fn least_frequent_token(
    passage: &str,
    question: &str,
    stopwords: &HashSet<String>,
) -> Option<String> {
    let excluded: HashSet<String> = alpha_tokens(question).collect();
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (pos, tok) in alpha_tokens(passage).enumerate() {
        if tok.chars().count() < 3 || stopwords.contains(&tok) || excluded.contains(&tok) {
            continue;
        }
        counts.entry(tok).or_insert((0, pos)).0 += 1;
    }
    counts
        .into_iter()
        .min_by_key(|(_, (count, first))| (*count, *first))
        .map(|(tok, _)| tok)
}

fn segment_items<'a>(inputs: &'a [String], label: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    inputs
        .iter()
        .flat_map(|seq| seq.split(SEGMENT_SEPARATOR))
        .filter_map(move |seg| seg.strip_prefix(label))
        .filter(|body| body.trim() != NONE_PLACEHOLDER)
        .flat_map(|body| body.split(crate::reason::ITEM_SEPARATOR))
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn reason_answer(inputs: &[String]) -> String {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for concept in segment_items(inputs, CONCEPTS_LABEL) {
        let concept = concept.to_lowercase();
        if concept != UNKNOWN {
            *counts.entry(concept).or_default() += 1;
        }
    }
    if let Some((best, _)) = counts
        .into_iter()
        .min_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| a.cmp(b)))
    {
        return best;
    }
    inputs
        .iter()
        .flat_map(|seq| seq.split(SEGMENT_SEPARATOR))
        .filter_map(|seg| seg.strip_prefix(CANDIDATES_LABEL))
        .filter(|body| body.trim() != NONE_PLACEHOLDER)
        .find_map(|body| body.split(", ").next())
        .map(strip_score)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| UNKNOWN.to_string())
}

/// `"wilson (0.90)"` -> `"wilson"`.
fn strip_score(candidate: &str) -> &str {
    match candidate.rfind(" (") {
        Some(pos) if candidate.ends_with(')') => &candidate[..pos],
        _ => candidate,
    }
    .trim()
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let subst = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = subst.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Seeded pseudo-random unit vector derived from SHA-256 in counter mode.
pub fn hash_unit_vector(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut raw = Vec::with_capacity(dim);
    let mut block = 0u64;
    while raw.len() < dim {
        let mut h = Sha256::new();
        h.update(b"kcr-mock-embed");
        h.update(seed.to_le_bytes());
        h.update(block.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(4) {
            if raw.len() == dim {
                break;
            }
            let u = u32::from_le_bytes(chunk.try_into().unwrap());
            raw.push(u as f64 / 4_294_967_296.0 * 2.0 - 1.0);
        }
        block += 1;
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|x| (x / norm) as f32).collect()
}
