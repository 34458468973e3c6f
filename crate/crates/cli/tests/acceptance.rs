//! Acceptance suite: one PASS/FAIL line per criterion, mock backends only.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use kcr_core::backends::mock::MockBackend;
use kcr_core::backends::{Backend, BackendRole};
use kcr_core::condense::{self, CondensedKnowledge, Condensers, DecodeParams};
use kcr_core::corpus::{normalize_answer, ImplicitCandidate, Passage, Sample, VisualContext};
use kcr_core::eval::vqa_score;
use kcr_core::reason::{self, AblationConfig, Fusion};
use kcr_core::retrieval::{self, EmbeddingMatrix, Hit, Index};
use kcr_core::synth::{self, SynthParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn kcr(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let code = kcr_cli::run(std::iter::once("kcr").chain(args.iter().copied()), &mut out);
    let out = String::from_utf8(out).map_err(|e| e.to_string())?;
    if code == 0 {
        Ok(out)
    } else {
        Err(format!("kcr {} exited {code}: {out}", args.join(" ")))
    }
}

fn within(start: Instant, limit: Duration) -> Result<String, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.2?}, limit {limit:?}");
    Ok(format!("{took:.2?}"))
}

/// Normalize everything, count, clamp.
fn metric_oracle(pred: &str, answers: &[String]) -> f64 {
    let p = normalize_answer(pred);
    let c = answers.iter().filter(|a| normalize_answer(a) == p).count();
    (c as f64 / 3.0).min(1.0)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let vocab = ["argyle", "Argyle!", "the argyle", "plaid", "PLAID", "a plaid", "tartan", "man's", "mans", "18", "eighteen"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let pred = vocab[rng.random_range(0..vocab.len())];
        let n = rng.random_range(1..=10);
        let answers: Vec<String> = (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect();
        let got = vqa_score(pred, &answers).map_err(|e| e.to_string())?;
        ensure!(got == metric_oracle(pred, &answers), "pair {i}: {pred:?} vs {answers:?}: {got}");
    }
    let ten = |hits: usize| -> Vec<String> {
        (0..10).map(|i| if i < hits { "argyle" } else { "plaid" }.to_string()).collect()
    };
    ensure!(vqa_score("argyle", &ten(1)).unwrap() == 1.0 / 3.0, "one match");
    ensure!(vqa_score("argyle", &ten(3)).unwrap() == 1.0, "three matches");
    ensure!(vqa_score("argyle", &ten(7)).unwrap() == 1.0, "seven matches");
    ensure!(vqa_score("argyle", &ten(0)).unwrap() == 0.0, "no match");
    within(start, Duration::from_secs(1))
}

/// Full scan with its own dot product and ordering.
fn exhaustive(ids: &[String], data: &[f32], dim: usize, q: &[f32], k: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = ids
        .iter()
        .enumerate()
        .map(|(r, id)| {
            let mut s = 0.0f32;
            for j in 0..dim {
                s += data[r * dim + j] * q[j];
            }
            Hit { passage_id: id.clone(), score: s }
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    all.truncate(k);
    all
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..20 {
        let (n, dim) = match inst {
            0 => (10_000, 256),
            1 => (10_000, 8),
            2 => (1, 256),
            _ => (rng.random_range(1..=10_000), rng.random_range(1..=256)),
        };
        // Coarse values on odd instances force score ties.
        let coarse = inst % 2 == 1;
        let value = |rng: &mut ChaCha8Rng| -> f32 {
            if coarse {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let ids: Vec<String> = (0..n).map(|i| format!("p{:05}", (i * 7919) % 100_003)).collect();
        let data: Vec<f32> = (0..n * dim).map(|_| value(&mut rng)).collect();
        let passages: Vec<Passage> = ids
            .iter()
            .map(|id| Passage { passage_id: id.clone(), text: "t".into(), source: "s".into() })
            .collect();
        let matrix = EmbeddingMatrix::new(dim, ids.clone(), data.clone()).map_err(|e| e.to_string())?;
        let index = Index::build(&passages, matrix).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let q: Vec<f32> = (0..dim).map(|_| value(&mut rng)).collect();
            let k = rng.random_range(1..=20);
            let got = index.search(&q, k).map_err(|e| e.to_string())?;
            ensure!(got == exhaustive(&ids, &data, dim, &q, k), "instance {inst} (n={n}, d={dim}, k={k}) differs");
        }
    }
    within(start, Duration::from_secs(10))
}

fn criterion_3() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/prompts");
    for i in 1..=5 {
        let input: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.join(format!("{i:02}.input.json"))).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let expected = fs::read(dir.join(format!("{i:02}.expected.txt"))).map_err(|e| e.to_string())?;
        let field = |k: &str| input[k].as_str().unwrap_or_default().to_string();
        let got = condense::render_essence_prompt(&field("caption"), &field("question"), &field("passage"));
        ensure!(got.as_bytes() == expected.as_slice(), "fixture {i:02} differs");
        ensure!(got.contains("\n===\n") && got.contains("Let's think step by step."), "fixture {i:02} lacks template lines");
    }
    Ok("5 fixtures byte-exact".into())
}

fn criterion_4() -> Outcome {
    let vc = VisualContext {
        image_ref: "i".into(),
        caption: "a man wearing socks".into(),
        objects: vec![],
        attributes: vec![],
        ocr: vec![],
    };
    let ck = CondensedKnowledge {
        sample_id: "s".into(),
        concepts: vec!["argyle".into(), "plaid".into()],
        essences: vec!["argyle is a diamond pattern".into()],
        provenance: vec![],
    };
    let passages = vec![Arc::new(Passage {
        passage_id: "p1".into(),
        text: "Argyle socks have diamonds.".into(),
        source: "wiki".into(),
    })];
    let implicit = vec![ImplicitCandidate { answer: "wool".into(), score: 0.8 }];
    for (row_id, row) in AblationConfig::ablation_rows() {
        for fusion in [Fusion::ConcatKnowledge, Fusion::ConcatEmbedding] {
            let cfg = AblationConfig { fusion, ..row };
            let ai = reason::assemble(&vc, "what pattern is this?", &ck, &passages, &implicit, &cfg);
            let text = ai.sequences.join("\n");
            for (label, on) in [
                ("candidates: wool", cfg.use_implicit),
                ("concepts: argyle", cfg.use_concepts),
                ("facts: argyle", cfg.use_essence),
                ("passages: Argyle", cfg.use_passages),
            ] {
                ensure!(text.contains(label) == on, "row {row_id} {fusion:?}: '{label}' present={}", !on);
            }
            if row_id == "1" && fusion == Fusion::ConcatKnowledge {
                ensure!(
                    ai.sequences == ["context: a man wearing socks | question: what pattern is this?"],
                    "row 1 is {:?}",
                    ai.sequences
                );
            }
        }
    }
    let row9 = reason::assemble(&vc, "q", &ck, &passages, &implicit, &AblationConfig::ablation_row(9).unwrap());
    let s = &row9.sequences[0];
    ensure!(
        s.contains("candidates: ") && s.contains("concepts: ") && s.contains("facts: ") && !s.contains("passages: "),
        "row 9 is {s}"
    );
    Ok("10 rows x 2 fusion modes".into())
}

fn synth_dir(n: usize, rank: usize, extra: &[&str]) -> Result<(TempDir, String), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let out = dir.path().to_str().unwrap().to_string();
    let n = n.to_string();
    let rank = rank.to_string();
    let mut args = vec!["synth", "--seed", "42", "--out", &out, "--n", &n, "--planted-rank", &rank];
    args.extend_from_slice(extra);
    kcr(&args)?;
    let cfg = dir.path().join("config.toml").to_str().unwrap().to_string();
    Ok((dir, cfg))
}

fn report_overall(dir: &Path) -> Result<f64, String> {
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    report["overall"].as_f64().ok_or_else(|| "no overall".into())
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (dir, cfg) = synth_dir(50, 1, &[])?;
    kcr(&["--config", &cfg, "answer"])?;
    kcr(&["--config", &cfg, "evaluate"])?;
    let default = report_overall(dir.path())?;
    kcr(&["--config", &cfg, "answer", "--row", "1"])?;
    kcr(&["--config", &cfg, "evaluate"])?;
    let baseline = report_overall(dir.path())?;
    ensure!(default == 1.0, "default config accuracy {default}");
    ensure!(baseline == 0.0, "row-1 accuracy {baseline}");
    Ok(format!("row 9 = 1.0, row 1 = 0.0, {}", within(start, Duration::from_secs(5))?))
}

fn criterion_6() -> Outcome {
    let (dir, cfg) = synth_dir(50, 3, &[])?;
    kcr(&["--config", &cfg, "sweep", "--ns", "1,2,3,4,5"])?;
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).map_err(|e| e.to_string())?;
    let acc: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (n, a) = l.split_once(',').unwrap();
            (n.parse().unwrap(), a.parse().unwrap())
        })
        .collect();
    let expected = vec![(1, 0.0), (2, 0.0), (3, 1.0), (4, 1.0), (5, 1.0)];
    ensure!(acc == expected, "sweep gave {acc:?}");
    Ok("n=1,2 -> 0.0; n=3,4,5 -> 1.0".into())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn calls_in(out: &str) -> Option<usize> {
    out.trim_end().rsplit("backend calls: ").next()?.parse().ok()
}

fn criterion_7() -> Outcome {
    let (dir, cfg) = synth_dir(50, 2, &[])?;
    let preds: PathBuf = dir.path().join("out/predictions.jsonl");
    kcr(&["--config", &cfg, "--workers", "1", "answer"])?;
    let first = read(&preds)?;
    kcr(&["--config", &cfg, "--workers", "1", "answer"])?;
    ensure!(read(&preds)? == first, "repeat run differs");
    kcr(&["--config", &cfg, "--workers", "8", "answer"])?;
    ensure!(read(&preds)? == first, "8 workers differ from 1");

    let cache = dir.path().join("cache");
    let cache = cache.to_str().unwrap();
    let cold = kcr(&["--config", &cfg, "--cache-dir", cache, "--workers", "8", "answer"])?;
    ensure!(calls_in(&cold).is_some_and(|c| c > 0), "cold run: {cold}");
    ensure!(read(&preds)? == first, "cached run differs");
    let warm = kcr(&["--config", &cfg, "--cache-dir", cache, "--workers", "1", "answer"])?;
    ensure!(calls_in(&warm) == Some(0), "warm run still called backends: {warm}");
    ensure!(read(&preds)? == first, "warm run differs");
    Ok(format!("{} cold calls, 0 warm", calls_in(&cold).unwrap()))
}

fn criterion_8() -> Outcome {
    let sample = Sample {
        sample_id: "e".into(),
        image_ref: "zoo.jpg".into(),
        question: "what is this?".into(),
        answers: vec!["zebra".into()],
        category: None,
        choices: None,
        correct_choice_index: None,
    };
    let passages: Vec<Arc<Passage>> = ["Zebra stripes zebra", "Okapi forest", "Stripes everywhere stripes"]
        .iter()
        .enumerate()
        .map(|(i, t)| Arc::new(Passage { passage_id: format!("p{i}"), text: t.to_string(), source: "s".into() }))
        .collect();
    let a = MockBackend::new("vlm-a", BackendRole::CondenserVlm);
    let b = MockBackend::new("vlm-b", BackendRole::CondenserVlm).with_extra_stopwords(["stripes", "okapi"]);
    let run = |m: &MockBackend| condense::condense_concepts(m, &sample, &passages, DecodeParams::concepts());
    let per_backend = vec![
        ("vlm-a".to_string(), run(&a).map_err(|e| e.to_string())?),
        ("vlm-b".to_string(), run(&b).map_err(|e| e.to_string())?),
    ];
    // vlm-a: stripes, okapi, everywhere; vlm-b: zebra, forest, everywhere.
    let expected = ["stripes", "zebra", "okapi", "forest", "everywhere"];
    let got = condense::ensemble_concepts(&per_backend).map_err(|e| e.to_string())?;
    ensure!(got == expected, "ensemble gave {got:?} from {per_backend:?}");
    let mut folded: Vec<String> = got.iter().map(|c| c.to_lowercase()).collect();
    folded.sort();
    folded.dedup();
    ensure!(folded.len() == got.len(), "duplicates in {got:?}");
    Ok(format!("{got:?}"))
}

fn criterion_9() -> Outcome {
    let mut params = SynthParams::new(20, 1, 42);
    params.multiple_choice = true;
    let bench = synth::generate(params).map_err(|e| e.to_string())?;
    let index = Index::build(&bench.passages, bench.embeddings.clone()).map_err(|e| e.to_string())?;
    let vcs: HashMap<&str, &VisualContext> = bench.visual_contexts.iter().map(|v| (v.image_ref.as_str(), v)).collect();
    let implicit: HashMap<&str, &[ImplicitCandidate]> =
        bench.implicit.iter().map(|r| (r.sample_id.as_str(), r.candidates.as_slice())).collect();
    let mock = |id: &str, role| -> Arc<dyn Backend> { Arc::new(MockBackend::new(id, role)) };
    let embedder = mock("e", BackendRole::Embedder);
    let condensers = Condensers {
        vlms: vec![mock("v", BackendRole::CondenserVlm)],
        llm: Some(mock("l", BackendRole::CondenserLlm)),
        concept_params: DecodeParams::concepts(),
        essence_params: DecodeParams::long(),
    };
    let reasoner = mock("r", BackendRole::Reasoner);
    let cfg = AblationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in &bench.samples {
        let vc = vcs[s.image_ref.as_str()];
        let set = retrieval::retrieve_for_sample(&index, embedder.as_ref(), &s.sample_id, vc, &s.question, 5)
            .map_err(|e| e.to_string())?;
        let passages = index.passages_for(&set.hits);
        let ck = condense::condense_sample(&condensers, s, vc, &passages, true, true).map_err(|e| e.to_string())?;
        let ck = condense::truncate_knowledge(&ck, cfg.n_concepts, cfg.n_essences);
        let ai = reason::assemble(vc, &s.question, &ck, &passages, implicit[s.sample_id.as_str()], &cfg);
        let mut choices = s.choices.clone().ok_or("sample without choices")?;
        let pick = |c: &[String]| -> Result<String, String> {
            let i = reason::answer_multiple_choice(reasoner.as_ref(), &ai, c).map_err(|e| e.to_string())?;
            Ok(c[i].clone())
        };
        let reference = pick(&choices)?;
        for _ in 0..8 {
            for i in (1..choices.len()).rev() {
                choices.swap(i, rng.random_range(0..=i));
            }
            let got = pick(&choices)?;
            ensure!(got == reference, "{}: {got} under {choices:?}, expected {reference}", s.sample_id);
        }
    }
    Ok("20 samples x 9 orderings".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracle", criterion_1),
        ("retrieval exactness", criterion_2),
        ("prompt fidelity", criterion_3),
        ("ablation wiring", criterion_4),
        ("planted-answer end-to-end", criterion_5),
        ("rank-sensitivity sweep", criterion_6),
        ("determinism and caching", criterion_7),
        ("concept ensemble", criterion_8),
        ("multiple-choice invariance", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {} {name}: {detail}", i + 1),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {} {name}: panicked", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
