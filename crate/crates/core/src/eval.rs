//! Soft VQA scoring, reports, ablation matrices and knowledge-count sweeps.

use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_answer, AnswerMode, Sample};
use crate::reason::{
    run_pipeline, AblationConfig, Backends, PipelineError, PipelineSettings, Prediction, Stores,
};

/// OK-VQA question categories in reporting order.
pub const CATEGORY_ORDER: [&str; 10] = [
    "Plants and Animals",
    "Science and Technology",
    "Sports and Recreation",
    "Geography, History, Language and Culture",
    "Brands, Companies and Products",
    "Vehicles and Transportation",
    "Cooking and Food",
    "Weather and Climate",
    "People and Everyday life",
    "Objects, Material and Clothing",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample '{0}' has no annotated answers")]
    NoAnswers(String),
    #[error("no answers to score against")]
    EmptyAnswers,
    #[error("no prediction for sample '{0}'")]
    MissingPrediction(String),
    #[error("duplicate prediction for sample '{0}'")]
    DuplicatePrediction(String),
    #[error("prediction for unknown sample '{0}'")]
    UnknownSample(String),
    #[error("sample '{0}' has no multiple-choice metadata")]
    NoChoices(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("predictions come from different configurations: {0} and {1}")]
    MixedFingerprints(String, String),
    #[error("count {n} exceeds the number of retrieved passages k = {k}")]
    CountExceedsK { n: usize, k: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{count} sample(s) failed, first: {first}")]
    SampleFailures { count: usize, first: String },
}

/// Which form of the soft accuracy to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `min(#matches / 3, 1)`.
    #[default]
    MinCount,
    /// Mean of `min(#matches / 3, 1)` over the leave-one-annotator-out
    /// subsets of the answer list.
    Official,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min-count" => Ok(Self::MinCount),
            "official" => Ok(Self::Official),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

fn count_matches(prediction: &str, answers: &[String]) -> (String, Vec<bool>) {
    let pred = normalize_answer(prediction);
    let hits = answers.iter().map(|a| normalize_answer(a) == pred).collect();
    (pred, hits)
}

/// Soft VQA accuracy: `min(#a(y) / 3, 1)` over normalized strings.
pub fn vqa_score(prediction: &str, answers: &[String]) -> Result<f64, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyAnswers);
    }
    let (_, hits) = count_matches(prediction, answers);
    let count = hits.iter().filter(|h| **h).count();
    Ok((count as f64 / 3.0).min(1.0))
}

/// Subset-averaged variant of [`vqa_score`].
pub fn vqa_score_official(prediction: &str, answers: &[String]) -> Result<f64, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyAnswers);
    }
    let (_, hits) = count_matches(prediction, answers);
    if answers.len() == 1 {
        return Ok(if hits[0] { 1.0 } else { 0.0 });
    }
    let total = hits.iter().filter(|h| **h).count();
    let sum: f64 = hits
        .iter()
        .map(|&h| ((total - usize::from(h)) as f64 / 3.0).min(1.0))
        .sum();
    Ok(sum / answers.len() as f64)
}

pub fn score_with(metric: Metric, prediction: &str, answers: &[String]) -> Result<f64, EvalError> {
    match metric {
        Metric::MinCount => vqa_score(prediction, answers),
        Metric::Official => vqa_score_official(prediction, answers),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub accuracy: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub per_category: IndexMap<String, CategoryStats>,
    pub per_sample: Vec<SampleScore>,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_accuracy: Option<f64>,
}

impl EvalReport {
    /// Percentages with two decimals, one category per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("overall: {:.2}%\n", self.overall * 100.0);
        if let Some(mc) = self.mc_accuracy {
            out.push_str(&format!("multiple choice: {:.2}%\n", mc * 100.0));
        }
        for (cat, stats) in &self.per_category {
            out.push_str(&format!(
                "{cat}: {:.2}% ({} samples)\n",
                stats.accuracy * 100.0,
                stats.sample_count
            ));
        }
        out
    }
}

/// Known categories first in their fixed order, the rest alphabetically.
pub fn order_categories<'a>(present: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let present: BTreeSet<&str> = present.into_iter().collect();
    CATEGORY_ORDER
        .iter()
        .filter(|c| present.contains(*c))
        .map(|c| c.to_string())
        .chain(
            present
                .iter()
                .filter(|c| !CATEGORY_ORDER.contains(c))
                .map(|c| c.to_string()),
        )
        .collect()
}

fn index_predictions<'a>(
    predictions: &'a [Prediction],
    dataset: &[Sample],
) -> Result<HashMap<&'a str, &'a Prediction>, EvalError> {
    let known: std::collections::HashSet<&str> = dataset.iter().map(|s| s.sample_id.as_str()).collect();
    let mut by_id = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !known.contains(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(p.sample_id.clone()));
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    Ok(by_id)
}

fn fingerprint_of(predictions: &[Prediction]) -> Result<String, EvalError> {
    let first = predictions.first().map(|p| p.config_fingerprint.clone()).unwrap_or_default();
    if let Some(other) = predictions.iter().find(|p| p.config_fingerprint != first) {
        return Err(EvalError::MixedFingerprints(first, other.config_fingerprint.clone()));
    }
    Ok(first)
}

/// Scores one prediction per sample and aggregates overall and per category.
pub fn evaluate_direct(
    predictions: &[Prediction],
    dataset: &[Sample],
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let by_id = index_predictions(predictions, dataset)?;
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
    for sample in dataset {
        let p = by_id
            .get(sample.sample_id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(sample.sample_id.clone()))?;
        if sample.answers.is_empty() {
            return Err(EvalError::NoAnswers(sample.sample_id.clone()));
        }
        let score = score_with(metric, &p.answer, &sample.answers)?;
        let entry = sums.entry(sample.category_or_default()).or_default();
        entry.0 += score;
        entry.1 += 1;
        per_sample.push(SampleScore {
            sample_id: sample.sample_id.clone(),
            score,
        });
    }
    let overall = per_sample.iter().map(|s| s.score).sum::<f64>() / per_sample.len() as f64;
    let per_category = order_categories(sums.keys().copied())
        .into_iter()
        .map(|cat| {
            let (sum, n) = sums[cat.as_str()];
            (
                cat,
                CategoryStats {
                    accuracy: sum / n as f64,
                    sample_count: n,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        overall,
        per_category,
        per_sample,
        config_fingerprint: fingerprint_of(predictions)?,
        mc_accuracy: None,
    })
}

/// Fraction of samples whose chosen index equals the correct one.
pub fn evaluate_mc(chosen: &[(String, usize)], dataset: &[Sample]) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(chosen.len());
    for (id, idx) in chosen {
        if by_id.insert(id.as_str(), *idx).is_some() {
            return Err(EvalError::DuplicatePrediction(id.clone()));
        }
    }
    let mut correct = 0usize;
    for sample in dataset {
        let truth = match (&sample.choices, sample.correct_choice_index) {
            (Some(_), Some(i)) => i,
            _ => return Err(EvalError::NoChoices(sample.sample_id.clone())),
        };
        let picked = by_id
            .get(sample.sample_id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(sample.sample_id.clone()))?;
        correct += usize::from(*picked == truth);
    }
    if by_id.len() != dataset.len() {
        let known: std::collections::HashSet<&str> = dataset.iter().map(|s| s.sample_id.as_str()).collect();
        if let Some(extra) = by_id.keys().find(|id| !known.contains(*id)) {
            return Err(EvalError::UnknownSample(extra.to_string()));
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Full evaluation of a prediction set, including multiple-choice accuracy
/// when the dataset is in that mode.
pub fn evaluate(
    predictions: &[Prediction],
    dataset: &[Sample],
    metric: Metric,
    mode: AnswerMode,
) -> Result<EvalReport, EvalError> {
    let mut report = evaluate_direct(predictions, dataset, metric)?;
    if mode == AnswerMode::MultipleChoice {
        let chosen: Vec<(String, usize)> = predictions
            .iter()
            .map(|p| {
                p.choice_index
                    .map(|i| (p.sample_id.clone(), i))
                    .ok_or_else(|| EvalError::MissingPrediction(p.sample_id.clone()))
            })
            .collect::<Result<_, _>>()?;
        report.mc_accuracy = Some(evaluate_mc(&chosen, dataset)?);
    }
    Ok(report)
}

fn run_and_score(
    dataset: &[Sample],
    stores: &Stores<'_>,
    backends: &Backends,
    settings: &PipelineSettings,
    metric: Metric,
) -> Result<f64, EvalError> {
    let out = run_pipeline(dataset, stores, backends, settings)?;
    if let Some(first) = out.failures.first() {
        return Err(EvalError::SampleFailures {
            count: out.failures.len(),
            first: first.to_string(),
        });
    }
    let report = evaluate(&out.predictions, dataset, metric, settings.mode)?;
    Ok(report.mc_accuracy.unwrap_or(report.overall))
}

#[derive(Debug)]
pub struct AblationResult {
    pub row_id: String,
    pub config: AblationConfig,
    pub accuracy: Result<f64, EvalError>,
}

/// Runs the pipeline once per row; a failing row does not stop the others.
pub fn run_ablation_matrix(
    dataset: &[Sample],
    stores: &Stores<'_>,
    backends: &Backends,
    base: &PipelineSettings,
    rows: &[(String, AblationConfig)],
    metric: Metric,
) -> Vec<AblationResult> {
    rows.iter()
        .map(|(row_id, cfg)| {
            let settings = PipelineSettings {
                ablation: *cfg,
                ..*base
            };
            AblationResult {
                row_id: row_id.clone(),
                config: *cfg,
                accuracy: run_and_score(dataset, stores, backends, &settings, metric),
            }
        })
        .collect()
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing csv to memory");
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

/// Columns: row_id, passages, essence, concepts, implicit, accuracy. Failed
/// rows leave accuracy empty.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    csv_string(|w| {
        w.write_record(["row_id", "passages", "essence", "concepts", "implicit", "accuracy"])?;
        for r in results {
            let c = &r.config;
            w.write_record([
                r.row_id.clone(),
                c.use_passages.to_string(),
                c.use_essence.to_string(),
                c.use_concepts.to_string(),
                c.use_implicit.to_string(),
                r.accuracy.as_ref().map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}

/// Checkmark grid with accuracies as percentages.
pub fn ablation_grid(results: &[AblationResult]) -> String {
    let mark = |b: bool| if b { "✓" } else { " " };
    let mut out = String::from("Row | Passages | Essence | Concepts | Implicit | Accuracy (%)\n");
    out.push_str("----+----------+---------+----------+----------+-------------\n");
    for r in results {
        let c = &r.config;
        let acc = match &r.accuracy {
            Ok(a) => format!("{:.2}", a * 100.0),
            Err(e) => format!("failed: {e}"),
        };
        out.push_str(&format!(
            "{:<3} |    {}     |    {}    |    {}     |    {}     | {acc}\n",
            r.row_id,
            mark(c.use_passages),
            mark(c.use_essence),
            mark(c.use_concepts),
            mark(c.use_implicit),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub accuracy: f64,
}

/// One run per `n` with the concept, essence and passage counts all set to
/// `n`. `n = 0` is the no-knowledge baseline of the enabled sources.
pub fn run_count_sweep(
    dataset: &[Sample],
    stores: &Stores<'_>,
    backends: &Backends,
    base: &PipelineSettings,
    ns: &[usize],
    metric: Metric,
) -> Result<Vec<SweepRow>, EvalError> {
    if let Some(&n) = ns.iter().find(|&&n| n > base.k) {
        return Err(EvalError::CountExceedsK { n, k: base.k });
    }
    ns.iter()
        .map(|&n| {
            let mut settings = *base;
            settings.ablation.n_concepts = n;
            settings.ablation.n_essences = n;
            settings.ablation.n_passages = n;
            Ok(SweepRow {
                n,
                accuracy: run_and_score(dataset, stores, backends, &settings, metric)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    csv_string(|w| {
        w.write_record(["n", "accuracy"])?;
        for r in rows {
            w.write_record([r.n.to_string(), r.accuracy.to_string()])?;
        }
        Ok(())
    })
}
