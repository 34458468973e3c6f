//! Planted-answer benchmark generator.
//!
//! Every sample gets a private block of passages. Exactly one of them holds
//! the answer word, and the embeddings are laid out so that block passage
//! `j` is the sample's retrieval rank `j + 1` under the mock embedder. All
//! other passages contain only question words, stopwords and short words,
//! so the mock condensers turn them into `"unknown"`. Implicit candidates
//! are decoys. With mock backends the answer is therefore recovered iff the
//! planted passage survives retrieval and truncation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backends::mock::{hash_unit_vector, DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED, DEFAULT_STOPWORDS, UNKNOWN};
use crate::corpus::{write_jsonl, ImplicitCandidate, ImplicitRecord, Passage, Sample, VisualContext};
use crate::eval::CATEGORY_ORDER;
use crate::reason::NONE_PLACEHOLDER;
use crate::retrieval::{build_query_text, EmbeddingMatrix, Index, RetrievalError};

pub const QUESTION: &str = "what is the secret word for this picture";
pub const ANSWERS_PER_SAMPLE: usize = 10;
pub const IMPLICIT_PER_SAMPLE: usize = 5;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VISUAL_CONTEXTS_FILE: &str = "visual_contexts.jsonl";
pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EMBEDDING_IDS_FILE: &str = "embeddings.ids.jsonl";
pub const IMPLICIT_FILE: &str = "implicit.jsonl";

const DISTRACTORS: [&str; 4] = [
    "this picture has no secret word at all",
    "the secret word is not in it",
    "there is no word for it here",
    "what is in the picture is not the secret",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("planted rank must be at least 1")]
    ZeroRank,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("sample '{sample_id}': passage '{passage_id}' landed at rank {got}, expected {expected}")]
    RankMismatch {
        sample_id: String,
        passage_id: String,
        expected: usize,
        got: usize,
    },
    #[error("io error writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub n: usize,
    /// 1-based retrieval rank of the answer-bearing passage.
    pub planted_rank: usize,
    pub seed: u64,
    pub multiple_choice: bool,
    /// Must match the embedder used at query time.
    pub dim: usize,
    pub embed_seed: u64,
}

impl SynthParams {
    pub fn new(n: usize, planted_rank: usize, seed: u64) -> Self {
        Self {
            n,
            planted_rank,
            seed,
            multiple_choice: false,
            dim: DEFAULT_EMBED_DIM,
            embed_seed: DEFAULT_EMBED_SEED,
        }
    }

    pub fn passages_per_sample(&self) -> usize {
        self.planted_rank.max(5)
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub params: SynthParams,
    pub samples: Vec<Sample>,
    pub visual_contexts: Vec<VisualContext>,
    pub passages: Vec<Passage>,
    pub embeddings: EmbeddingMatrix,
    pub implicit: Vec<ImplicitRecord>,
}

/// Unique pronounceable words that the mock condensers would accept.
struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn new(rng: ChaCha8Rng) -> Self {
        let used = DEFAULT_STOPWORDS
            .iter()
            .copied()
            .chain(QUESTION.split_whitespace())
            .chain(DISTRACTORS.iter().flat_map(|d| d.split_whitespace()))
            .chain([UNKNOWN, NONE_PLACEHOLDER])
            .map(String::from)
            .collect();
        Self { rng, used }
    }

    fn fresh(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(3..=4);
            let word: String = (0..syllables)
                .flat_map(|_| {
                    let c = CONSONANTS[self.rng.random_range(0..CONSONANTS.len())];
                    let v = VOWELS[self.rng.random_range(0..VOWELS.len())];
                    [c as char, v as char]
                })
                .collect();
            if self.used.insert(word.clone()) {
                return word;
            }
        }
    }
}

pub fn passage_id(sample: usize, slot: usize) -> String {
    format!("syn-{sample:05}-{slot}")
}

/// Generates the benchmark and checks that every planted rank holds.
pub fn generate(params: SynthParams) -> Result<SynthBenchmark, SynthError> {
    if params.planted_rank == 0 {
        return Err(SynthError::ZeroRank);
    }
    let mut words = WordSource::new(ChaCha8Rng::seed_from_u64(params.seed));
    let per = params.passages_per_sample();
    let mut samples = Vec::with_capacity(params.n);
    let mut visual_contexts = Vec::with_capacity(params.n);
    let mut passages = Vec::with_capacity(params.n * per);
    let mut ids = Vec::with_capacity(params.n * per);
    let mut data = Vec::with_capacity(params.n * per * params.dim);
    let mut implicit = Vec::with_capacity(params.n);

    for i in 0..params.n {
        let sample_id = format!("syn-{i:05}");
        let image_ref = format!("synth/{i:05}.jpg");
        let answer = words.fresh();
        let subject = words.fresh();
        let vc = VisualContext {
            image_ref: image_ref.clone(),
            caption: format!("a photo of a {subject}"),
            objects: vec![subject],
            attributes: Vec::new(),
            ocr: Vec::new(),
        };
        let query = hash_unit_vector(&build_query_text(&vc, QUESTION), params.dim, params.embed_seed);
        for j in 0..per {
            let id = passage_id(i, j);
            let text = if j + 1 == params.planted_rank {
                format!("the secret word for this picture is {answer}")
            } else {
                DISTRACTORS[(i + j) % DISTRACTORS.len()].to_string()
            };
            passages.push(Passage {
                passage_id: id.clone(),
                text,
                source: "synthetic".into(),
            });
            let scale = 1.0 - 0.01 * j as f32;
            data.extend(query.iter().map(|x| x * scale));
            ids.push(id);
        }

        let decoys: Vec<String> = (0..IMPLICIT_PER_SAMPLE).map(|_| words.fresh()).collect();
        let mut scores: Vec<f64> = (0..IMPLICIT_PER_SAMPLE)
            .map(|_| (words.rng.random_range(5..=95) as f64) / 100.0)
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        implicit.push(ImplicitRecord {
            sample_id: sample_id.clone(),
            candidates: decoys
                .iter()
                .zip(scores)
                .map(|(answer, score)| ImplicitCandidate {
                    answer: answer.clone(),
                    score,
                })
                .collect(),
        });

        let (choices, correct_choice_index) = if params.multiple_choice {
            let mut choices = vec![answer.clone()];
            choices.extend(decoys.iter().take(3).cloned());
            choices.shuffle(&mut words.rng);
            let idx = choices.iter().position(|c| *c == answer);
            (Some(choices), idx)
        } else {
            (None, None)
        };
        samples.push(Sample {
            sample_id,
            image_ref,
            question: QUESTION.into(),
            answers: vec![answer; ANSWERS_PER_SAMPLE],
            category: Some(CATEGORY_ORDER[i % CATEGORY_ORDER.len()].into()),
            choices,
            correct_choice_index,
        });
        visual_contexts.push(vc);
    }

    let bench = SynthBenchmark {
        params,
        samples,
        visual_contexts,
        passages,
        embeddings: EmbeddingMatrix::new(params.dim, ids, data)?,
        implicit,
    };
    if !bench.samples.is_empty() {
        bench.verify_ranks()?;
    }
    Ok(bench)
}

impl SynthBenchmark {
    /// Confirms each sample's own passages come back first, in slot order.
    pub fn verify_ranks(&self) -> Result<(), SynthError> {
        let index = Index::build(&self.passages, self.embeddings.clone())?;
        let per = self.params.passages_per_sample();
        for (i, (sample, vc)) in self.samples.iter().zip(&self.visual_contexts).enumerate() {
            let query = hash_unit_vector(
                &build_query_text(vc, &sample.question),
                self.params.dim,
                self.params.embed_seed,
            );
            let hits = index.search(&query, per)?;
            for (j, hit) in hits.iter().enumerate() {
                let expected = passage_id(i, j);
                if hit.passage_id != expected {
                    return Err(SynthError::RankMismatch {
                        sample_id: sample.sample_id.clone(),
                        passage_id: expected,
                        expected: j + 1,
                        got: hits.iter().position(|h| h.passage_id == passage_id(i, j)).map_or(0, |p| p + 1),
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes every input file into `dir` and returns the paths written.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let p = |name: &str| dir.join(name);
        write_jsonl(&p(DATASET_FILE), &self.samples).map_err(io(&p(DATASET_FILE)))?;
        write_jsonl(&p(VISUAL_CONTEXTS_FILE), &self.visual_contexts).map_err(io(&p(VISUAL_CONTEXTS_FILE)))?;
        write_jsonl(&p(PASSAGES_FILE), &self.passages).map_err(io(&p(PASSAGES_FILE)))?;
        write_jsonl(&p(IMPLICIT_FILE), &self.implicit).map_err(io(&p(IMPLICIT_FILE)))?;
        self.embeddings
            .write(&p(EMBEDDINGS_FILE), &p(EMBEDDING_IDS_FILE))?;
        Ok([
            DATASET_FILE,
            VISUAL_CONTEXTS_FILE,
            PASSAGES_FILE,
            EMBEDDINGS_FILE,
            EMBEDDING_IDS_FILE,
            IMPLICIT_FILE,
        ]
        .iter()
        .map(|n| p(n))
        .collect())
    }

    pub fn planted_answer(&self, sample: usize) -> &str {
        &self.samples[sample].answers[0]
    }
}
