//! Dataset, visual context, passage and implicit-knowledge ingestion.
//!
//! Every input is JSON Lines. Loaders validate each record as it is read and
//! report failures with the 1-based line number of the offending record.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Category name used for samples that carry none.
pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate {what} '{id}' on lines {first} and {second}")]
    Duplicate {
        path: PathBuf,
        what: &'static str,
        id: String,
        first: usize,
        second: usize,
    },
}

/// How a dataset is going to be answered and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerMode {
    #[default]
    DirectAnswer,
    MultipleChoice,
}

impl std::str::FromStr for AnswerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct-answer" => Ok(Self::DirectAnswer),
            "multiple-choice" => Ok(Self::MultipleChoice),
            other => Err(format!("unknown answer mode '{other}'")),
        }
    }
}

/// One knowledge-based VQA item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub sample_id: String,
    pub image_ref: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice_index: Option<usize>,
}

impl Sample {
    /// Category used for per-category aggregation.
    pub fn category_or_default(&self) -> &str {
        self.category.as_deref().unwrap_or(UNCATEGORIZED)
    }

    fn validate(&self, mode: AnswerMode) -> Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("sample_id must be nonempty".into());
        }
        if mode == AnswerMode::DirectAnswer && self.answers.is_empty() {
            return Err(format!("sample '{}' has no answers", self.sample_id));
        }
        match (&self.choices, self.correct_choice_index) {
            (Some(choices), Some(idx)) => {
                if choices.len() != 4 {
                    return Err(format!(
                        "sample '{}' has {} choices, expected 4",
                        self.sample_id,
                        choices.len()
                    ));
                }
                if idx > 3 {
                    return Err(format!(
                        "sample '{}' correct_choice_index {idx} outside [0,3]",
                        self.sample_id
                    ));
                }
            }
            (None, None) => {
                if mode == AnswerMode::MultipleChoice {
                    return Err(format!(
                        "sample '{}' has no choices but the dataset is multiple-choice",
                        self.sample_id
                    ));
                }
            }
            (Some(_), None) => {
                return Err(format!(
                    "sample '{}' has choices but no correct_choice_index",
                    self.sample_id
                ))
            }
            (None, Some(_)) => {
                return Err(format!(
                    "sample '{}' has correct_choice_index but no choices",
                    self.sample_id
                ))
            }
        }
        Ok(())
    }
}

/// Text stand-in for an image: caption plus detector and OCR output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualContext {
    pub image_ref: String,
    pub caption: String,
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub ocr: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Passage {
    pub passage_id: String,
    pub text: String,
    pub source: String,
}

/// Scored answer candidate from an auxiliary VQA model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitCandidate {
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitRecord {
    pub sample_id: String,
    pub candidates: Vec<ImplicitCandidate>,
}

/// Sorts candidates by descending score, ties by ascending answer.
pub fn sort_candidates(candidates: &mut [ImplicitCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.answer.cmp(&b.answer))
    });
}

/// Reads non-blank lines of a JSONL file as `(line_number, record)` pairs.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

/// Writes records as JSON Lines, one per line.
pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> std::io::Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    use std::io::Write;
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::BadRecord {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn check_unique(
    seen: &mut HashMap<String, usize>,
    path: &Path,
    what: &'static str,
    id: &str,
    line: usize,
) -> Result<(), CorpusError> {
    if let Some(&first) = seen.get(id) {
        return Err(CorpusError::Duplicate {
            path: path.to_path_buf(),
            what,
            id: id.to_string(),
            first,
            second: line,
        });
    }
    seen.insert(id.to_string(), line);
    Ok(())
}

pub fn load_dataset(path: &Path, mode: AnswerMode) -> Result<Vec<Sample>, CorpusError> {
    let mut seen = HashMap::new();
    let mut samples = Vec::new();
    for (line, sample) in read_jsonl::<Sample>(path)? {
        sample.validate(mode).map_err(|m| bad(path, line, m))?;
        check_unique(&mut seen, path, "sample_id", &sample.sample_id, line)?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_visual_contexts(path: &Path) -> Result<BTreeMap<String, VisualContext>, CorpusError> {
    let mut seen = HashMap::new();
    let mut out = BTreeMap::new();
    for (line, vc) in read_jsonl::<VisualContext>(path)? {
        if vc.caption.trim().is_empty() {
            return Err(bad(path, line, format!("empty caption for '{}'", vc.image_ref)));
        }
        check_unique(&mut seen, path, "image_ref", &vc.image_ref, line)?;
        out.insert(vc.image_ref.clone(), vc);
    }
    Ok(out)
}

pub fn load_passages(path: &Path) -> Result<Vec<Passage>, CorpusError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (line, p) in read_jsonl::<Passage>(path)? {
        if p.passage_id.is_empty() {
            return Err(bad(path, line, "empty passage_id"));
        }
        if p.text.is_empty() {
            return Err(bad(path, line, format!("empty text for passage '{}'", p.passage_id)));
        }
        check_unique(&mut seen, path, "passage_id", &p.passage_id, line)?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_implicit(path: &Path) -> Result<HashMap<String, Vec<ImplicitCandidate>>, CorpusError> {
    let mut seen = HashMap::new();
    let mut out = HashMap::new();
    for (line, mut rec) in read_jsonl::<ImplicitRecord>(path)? {
        for c in &rec.candidates {
            if !c.score.is_finite() || !(0.0..=1.0).contains(&c.score) {
                return Err(bad(
                    path,
                    line,
                    format!("candidate '{}' score {} outside [0,1]", c.answer, c.score),
                ));
            }
        }
        check_unique(&mut seen, path, "sample_id", &rec.sample_id, line)?;
        sort_candidates(&mut rec.candidates);
        out.insert(rec.sample_id, rec.candidates);
    }
    Ok(out)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Canonical answer form used for all string equality on answers.
///
/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace (apostrophes included), removes the articles "a", "an" and
/// "the", and collapses whitespace.
pub fn normalize_answer(raw: &str) -> String {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("The Argyle."), "argyle");
        assert_eq!(normalize_answer("  SURFING "), "surfing");
        assert_eq!(normalize_answer("man's best friend"), "mans best friend");
        assert_eq!(normalize_answer("an apple a day"), "apple day");
        assert_eq!(normalize_answer("theater"), "theater");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC*") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }

        #[test]
        fn normalize_is_idempotent_ascii(s in "[ -~]{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }
    }

    #[test]
    fn dataset_single_line_round_trips() {
        let line = r#"{"sample_id":"s1","image_ref":"img/1.jpg","question":"what breed?","answers":["dalmatian","dalmatian"],"category":"Plants and Animals"}"#;
        let f = write_lines(&[line]);
        let samples = load_dataset(f.path(), AnswerMode::DirectAnswer).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(serde_json::to_string(&samples[0]).unwrap(), line);
    }

    #[test]
    fn duplicate_sample_id_cites_both_lines() {
        let rec = |id: &str| {
            format!(r#"{{"sample_id":"{id}","image_ref":"i","question":"q","answers":["a"]}}"#)
        };
        let lines: Vec<String> = ["a", "b", "dup", "c", "d", "e", "dup"]
            .iter()
            .map(|id| rec(id))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write_lines(&refs);
        match load_dataset(f.path(), AnswerMode::DirectAnswer) {
            Err(CorpusError::Duplicate { id, first, second, .. }) => {
                assert_eq!(id, "dup");
                assert_eq!((first, second), (3, 7));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"]}"#,
            "{not json",
        ]);
        let err = load_dataset(f.path(), AnswerMode::DirectAnswer).unwrap_err();
        assert!(matches!(err, CorpusError::BadRecord { line: 2, .. }), "{err}");
    }

    #[test]
    fn multiple_choice_requires_choices() {
        let f = write_lines(&[r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"]}"#]);
        assert!(load_dataset(f.path(), AnswerMode::MultipleChoice).is_err());
        assert!(load_dataset(f.path(), AnswerMode::DirectAnswer).is_ok());

        let ok = write_lines(&[
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"],"choices":["w","x","y","z"],"correct_choice_index":1}"#,
        ]);
        let s = load_dataset(ok.path(), AnswerMode::MultipleChoice).unwrap();
        assert_eq!(s[0].correct_choice_index, Some(1));
    }

    #[test]
    fn choice_invariants() {
        for line in [
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"],"choices":["w","x","y"],"correct_choice_index":1}"#,
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"],"choices":["w","x","y","z"],"correct_choice_index":4}"#,
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"],"choices":["w","x","y","z"]}"#,
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":["x"],"correct_choice_index":0}"#,
            r#"{"sample_id":"","image_ref":"i","question":"q","answers":["x"]}"#,
            r#"{"sample_id":"a","image_ref":"i","question":"q","answers":[]}"#,
        ] {
            let f = write_lines(&[line]);
            assert!(load_dataset(f.path(), AnswerMode::DirectAnswer).is_err(), "{line}");
        }
    }

    #[test]
    fn visual_contexts() {
        let f = write_lines(&[
            r#"{"image_ref":"i1","caption":"a dog","objects":["dog","frisbee"],"attributes":[],"ocr":[]}"#,
        ]);
        let m = load_visual_contexts(f.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["i1"].objects, vec!["dog", "frisbee"]);

        let dup = write_lines(&[
            r#"{"image_ref":"i1","caption":"a dog","objects":[],"attributes":[],"ocr":[]}"#,
            r#"{"image_ref":"i1","caption":"a cat","objects":[],"attributes":[],"ocr":[]}"#,
        ]);
        assert!(load_visual_contexts(dup.path()).is_err());

        let missing = write_lines(&[r#"{"image_ref":"i1","objects":[],"attributes":[],"ocr":[]}"#]);
        let err = load_visual_contexts(missing.path()).unwrap_err();
        assert!(err.to_string().contains("caption"), "{err}");

        let absent_list = write_lines(&[r#"{"image_ref":"i1","caption":"x","objects":[],"attributes":[]}"#]);
        assert!(load_visual_contexts(absent_list.path()).is_err());
    }

    #[test]
    fn passages_keep_file_order() {
        let f = write_lines(&[
            r#"{"passage_id":"p3","text":"c","source":"wikipedia"}"#,
            r#"{"passage_id":"p1","text":"a","source":"wikipedia"}"#,
            r#"{"passage_id":"p2","text":"b","source":"google-search"}"#,
        ]);
        let ps = load_passages(f.path()).unwrap();
        let ids: Vec<_> = ps.iter().map(|p| p.passage_id.as_str()).collect();
        assert_eq!(ids, ["p3", "p1", "p2"]);

        let empty = write_lines(&[
            r#"{"passage_id":"p1","text":"a","source":"s"}"#,
            r#"{"passage_id":"p2","text":"","source":"s"}"#,
        ]);
        let err = load_passages(empty.path()).unwrap_err();
        assert!(matches!(err, CorpusError::BadRecord { line: 2, .. }), "{err}");
    }

    #[test]
    fn large_corpus_has_unique_ids() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..10_000 {
            writeln!(f, r#"{{"passage_id":"p{i:05}","text":"text {i}","source":"synthetic"}}"#).unwrap();
        }
        let ps = load_passages(f.path()).unwrap();
        let ids: std::collections::HashSet<_> = ps.iter().map(|p| &p.passage_id).collect();
        assert_eq!(ids.len(), 10_000);
    }

    fn implicit_answers(line: &str) -> Vec<(String, f64)> {
        let f = write_lines(&[line]);
        let m = load_implicit(f.path()).unwrap();
        m["s"].iter().map(|c| (c.answer.clone(), c.score)).collect()
    }

    #[test]
    fn implicit_sorting() {
        assert_eq!(
            implicit_answers(r#"{"sample_id":"s","candidates":[{"answer":"wilson","score":0.9},{"answer":"nike","score":0.3}]}"#),
            vec![("wilson".into(), 0.9), ("nike".into(), 0.3)]
        );
        assert_eq!(
            implicit_answers(r#"{"sample_id":"s","candidates":[{"answer":"a","score":0.3},{"answer":"b","score":0.9}]}"#),
            vec![("b".into(), 0.9), ("a".into(), 0.3)]
        );
        assert_eq!(
            implicit_answers(r#"{"sample_id":"s","candidates":[{"answer":"b","score":0.5},{"answer":"a","score":0.5}]}"#),
            vec![("a".into(), 0.5), ("b".into(), 0.5)]
        );
    }

    #[test]
    fn implicit_rejects_out_of_range_scores() {
        for bad in ["1.5", "-0.1"] {
            let f = write_lines(&[&format!(
                r#"{{"sample_id":"s","candidates":[{{"answer":"a","score":{bad}}}]}}"#
            )]);
            assert!(load_implicit(f.path()).is_err());
        }
    }

    proptest! {
        #[test]
        fn implicit_output_always_sorted(scores in proptest::collection::vec((0u8..5, 0.0f64..=1.0), 0..12)) {
            let mut cands: Vec<ImplicitCandidate> = scores
                .iter()
                .map(|(a, s)| ImplicitCandidate { answer: format!("ans{a}"), score: *s })
                .collect();
            sort_candidates(&mut cands);
            for w in cands.windows(2) {
                prop_assert!(w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].answer <= w[1].answer));
            }
        }

        #[test]
        fn dataset_round_trip(
            ids in proptest::collection::hash_set("[a-z0-9]{1,8}", 1..6),
            question in "\\PC{0,20}",
            answer in "\\PC{1,10}",
        ) {
            let samples: Vec<Sample> = ids.iter().map(|id| Sample {
                sample_id: id.clone(),
                image_ref: format!("img/{id}"),
                question: question.clone(),
                answers: vec![answer.clone(); 3],
                category: None,
                choices: None,
                correct_choice_index: None,
            }).collect();
            let f = tempfile::NamedTempFile::new().unwrap();
            write_jsonl(f.path(), &samples).unwrap();
            let loaded = load_dataset(f.path(), AnswerMode::DirectAnswer).unwrap();
            prop_assert_eq!(loaded, samples);
        }
    }
}
