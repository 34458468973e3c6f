//! Exact dense passage retrieval over precomputed embeddings.
//!
//! Scores are raw inner products. Results are totally ordered by descending
//! score, then ascending passage id, so retrieval is a pure function of the
//! corpus, the query and `k`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};
use crate::corpus::{self, CorpusError, Passage, VisualContext};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"KCR1";

/// Number of passages retrieved per sample unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid embedding matrix: {0}")]
    InvalidMatrix(String),
    #[error("embedding ids missing from the passage corpus: {}", .0.join(", "))]
    MissingPassages(Vec<String>),
    #[error("index is empty")]
    EmptyIndex,
    #[error("query has dimension {got}, index has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query vector contains non-finite values")]
    NonFiniteQuery,
    #[error("k must be positive")]
    ZeroK,
    #[error("sample '{sample_id}': {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
}

/// Row-major `n x dim` matrix of passage embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::InvalidMatrix("dim must be at least 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(RetrievalError::InvalidMatrix(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::InvalidMatrix(format!("duplicate id '{id}'")));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidMatrix(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes the binary matrix and its `{row, passage_id}` sidecar.
    pub fn write(&self, bin_path: &Path, sidecar_path: &Path) -> Result<(), RetrievalError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RetrievalError::Io { path, source }
        };
        let mut w = BufWriter::new(File::create(bin_path).map_err(io_err(bin_path))?);
        let mut header = Vec::with_capacity(16);
        header.extend_from_slice(EMBEDDING_MAGIC);
        header.extend_from_slice(&(self.dim as u32).to_le_bytes());
        header.extend_from_slice(&(self.len() as u64).to_le_bytes());
        w.write_all(&header).map_err(io_err(bin_path))?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err(bin_path))?;
        }
        w.flush().map_err(io_err(bin_path))?;

        let rows: Vec<SidecarRow> = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, id)| SidecarRow {
                row,
                passage_id: id.clone(),
            })
            .collect();
        corpus::write_jsonl(sidecar_path, &rows).map_err(io_err(sidecar_path))
    }

    pub fn read(bin_path: &Path, sidecar_path: &Path) -> Result<Self, RetrievalError> {
        let fmt = |message: String| RetrievalError::Format {
            path: bin_path.to_path_buf(),
            message,
        };
        let file = File::open(bin_path).map_err(|source| RetrievalError::Io {
            path: bin_path.to_path_buf(),
            source,
        })?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|source| RetrievalError::Io {
                path: bin_path.to_path_buf(),
                source,
            })?;
        if bytes.len() < 16 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(fmt("missing KCR1 header".into()));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fmt("header size overflow".into()))?;
        let body = &bytes[16..];
        if body.len() != expected {
            return Err(fmt(format!(
                "expected {expected} payload bytes for {rows} x {dim}, found {}",
                body.len()
            )));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut ids: Vec<Option<String>> = vec![None; rows];
        for (line, rec) in corpus::read_jsonl::<SidecarRow>(sidecar_path)? {
            let side_err = |message: String| RetrievalError::Format {
                path: sidecar_path.to_path_buf(),
                message: format!("line {line}: {message}"),
            };
            let slot = ids
                .get_mut(rec.row)
                .ok_or_else(|| side_err(format!("row {} out of range (rows = {rows})", rec.row)))?;
            if slot.is_some() {
                return Err(side_err(format!("row {} listed twice", rec.row)));
            }
            *slot = Some(rec.passage_id);
        }
        let ids = ids
            .into_iter()
            .enumerate()
            .map(|(row, id)| {
                id.ok_or_else(|| RetrievalError::Format {
                    path: sidecar_path.to_path_buf(),
                    message: format!("row {row} has no passage_id"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dim, ids, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarRow {
    row: usize,
    passage_id: String,
}

/// One search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub passage_id: String,
    pub score: f32,
}

/// Top-K passages retrieved for one sample, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub sample_id: String,
    pub hits: Vec<Hit>,
}

/// Total order used for results: descending score, then ascending id.
///
/// `0.0` and `-0.0` compare equal, so such ties fall through to the id.
pub fn hit_order(a_score: f32, a_id: &str, b_score: f32, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or_else(|| b_score.total_cmp(&a_score))
        .then_with(|| a_id.cmp(b_id))
}

/// Sequential left-to-right dot product starting from `0.0`.
pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Heap entry ordered so that the worst retained hit sits on top.
struct Ranked<'a> {
    score: f32,
    id: &'a str,
    row: usize,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        hit_order(self.score, self.id, other.score, other.id)
    }
}

/// Immutable flat inner-product index.
#[derive(Debug)]
pub struct Index {
    embeddings: EmbeddingMatrix,
    passages: HashMap<String, Arc<Passage>>,
}

impl Index {
    /// Builds an index; every embedding row must name a known passage.
    pub fn build(passages: &[Passage], embeddings: EmbeddingMatrix) -> Result<Self, RetrievalError> {
        if embeddings.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let by_id: HashMap<&str, &Passage> =
            passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
        let missing: Vec<String> = embeddings
            .ids()
            .iter()
            .filter(|id| !by_id.contains_key(id.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(RetrievalError::MissingPassages(missing));
        }
        let passages = embeddings
            .ids()
            .iter()
            .map(|id| (id.clone(), Arc::new(by_id[id.as_str()].clone())))
            .collect();
        Ok(Self {
            embeddings,
            passages,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn passage(&self, id: &str) -> Option<&Arc<Passage>> {
        self.passages.get(id)
    }

    /// Exact top-`k` search. Returns `min(k, len)` hits.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if query.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFiniteQuery);
        }
        let k = k.min(self.len());
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for (row, id) in self.embeddings.ids().iter().enumerate() {
            let cand = Ranked {
                score: inner_product(self.embeddings.row(row), query),
                id,
                row,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let mut ranked = heap.into_vec();
        ranked.sort();
        Ok(ranked
            .into_iter()
            .map(|r| Hit {
                passage_id: self.embeddings.ids()[r.row].clone(),
                score: r.score,
            })
            .collect())
    }

    /// Resolves hits to their passages, preserving rank order.
    pub fn passages_for(&self, hits: &[Hit]) -> Vec<Arc<Passage>> {
        hits.iter()
            .filter_map(|h| self.passages.get(&h.passage_id).cloned())
            .collect()
    }
}

/// Retrieval query text: caption, objects, attributes, OCR, then question,
/// joined by `". "` with empty segments omitted.
pub fn build_query_text(vc: &VisualContext, question: &str) -> String {
    let segments = [
        vc.caption.trim().to_string(),
        vc.objects.join(", "),
        vc.attributes.join(", "),
        vc.ocr.join(", "),
        question.trim().to_string(),
    ];
    segments
        .iter()
        .filter(|s| !s.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(". ")
}

/// Embeds the sample's query text with `embedder` and searches the index.
pub fn retrieve_for_sample(
    index: &Index,
    embedder: &dyn Backend,
    sample_id: &str,
    vc: &VisualContext,
    question: &str,
    k: usize,
) -> Result<RetrievedSet, RetrievalError> {
    let text = build_query_text(vc, question);
    let wrap = |source| RetrievalError::Backend {
        sample_id: sample_id.to_string(),
        source,
    };
    let mut vectors = embedder.embed(&[text]).map_err(wrap)?;
    let query = match vectors.pop() {
        Some(v) if vectors.is_empty() => v,
        _ => {
            return Err(wrap(BackendError::Malformed {
                backend: embedder.id().to_string(),
                message: "expected exactly one embedding".into(),
            }))
        }
    };
    Ok(RetrievedSet {
        sample_id: sample_id.to_string(),
        hits: index.search(&query, k)?,
    })
}
