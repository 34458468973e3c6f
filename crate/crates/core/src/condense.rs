//! Knowledge condensation.
//!
//! Each retrieved passage is condensed twice: into a short knowledge
//! concept by a vision-language backend (image + question + passage) and
//! into a knowledge essence by a text-only language backend prompted with a
//! fixed template (caption + question + passage). Outputs stay rank-aligned
//! with retrieval order regardless of the order calls complete in.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    Backend, BackendError, GenerateRequest, DEFAULT_BEAM_SIZE, DEFAULT_CONCEPT_MAX_TOKENS,
    DEFAULT_LONG_MAX_TOKENS,
};
use crate::corpus::{Passage, Sample, VisualContext};

pub const ESSENCE_INSTRUCTION: &str = "Select the key information of the retrieved knowledge and answer the question according to the visual context and concise knowledge. Let's think step by step.";
pub const ESSENCE_CONTEXT_LABEL: &str = "Visual context: ";
pub const ESSENCE_KNOWLEDGE_LABEL: &str = "Retrieved knowledge: ";
pub const ESSENCE_SEPARATOR: &str = "===";
pub const ESSENCE_QUESTION_LABEL: &str = "Question: ";
pub const ESSENCE_ANSWER_LABEL: &str = "Answer:";

pub const CONCEPT_QUESTION_LABEL: &str = "question: ";
pub const CONCEPT_KNOWLEDGE_LABEL: &str = " knowledge: ";

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("sample '{sample_id}', passage rank {rank}, backend '{backend}': {source}")]
    Backend {
        sample_id: String,
        rank: usize,
        backend: String,
        #[source]
        source: BackendError,
    },
    #[error("ensemble inputs are ragged: backend '{backend}' has {got} concepts, expected {expected}")]
    Ragged {
        backend: String,
        expected: usize,
        got: usize,
    },
    #[error("ensemble needs at least one backend")]
    NoBackends,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnowledgeKind {
    Concept,
    Essence,
}

/// Which backend produced which entry from which passage. `rank` is the
/// 1-based retrieval rank of the source passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub kind: KnowledgeKind,
    pub rank: usize,
    pub passage_id: String,
    pub backend_id: String,
}

/// Condensed knowledge for one sample; also the condensation JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondensedKnowledge {
    pub sample_id: String,
    pub concepts: Vec<String>,
    pub essences: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl CondensedKnowledge {
    pub fn empty(sample_id: &str) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            concepts: Vec::new(),
            essences: Vec::new(),
            provenance: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub beam_size: u32,
    pub max_new_tokens: u32,
}

impl DecodeParams {
    pub fn concepts() -> Self {
        Self {
            beam_size: DEFAULT_BEAM_SIZE,
            max_new_tokens: DEFAULT_CONCEPT_MAX_TOKENS,
        }
    }

    pub fn long() -> Self {
        Self {
            beam_size: DEFAULT_BEAM_SIZE,
            max_new_tokens: DEFAULT_LONG_MAX_TOKENS,
        }
    }
}

/// Instantiates the essence prompt template.
pub fn render_essence_prompt(caption: &str, question: &str, passage_text: &str) -> String {
    format!(
        "{ESSENCE_INSTRUCTION}\n\
         {ESSENCE_CONTEXT_LABEL}{caption}\n\
         {ESSENCE_KNOWLEDGE_LABEL}{passage_text}\n\
         {ESSENCE_SEPARATOR}\n\
         {ESSENCE_QUESTION_LABEL}{question}\n\
         {ESSENCE_ANSWER_LABEL}"
    )
}

/// Single-sequence prompt for the concept path.
pub fn render_concept_prompt(question: &str, passage_text: &str) -> String {
    format!("{CONCEPT_QUESTION_LABEL}{question}{CONCEPT_KNOWLEDGE_LABEL}{passage_text}")
}

fn fan_out<F>(
    backend: &dyn Backend,
    sample_id: &str,
    passages: &[Arc<Passage>],
    make_request: F,
) -> Result<Vec<String>, CondenseError>
where
    F: Fn(&Passage) -> GenerateRequest + Sync,
{
    passages
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            backend
                .generate(&make_request(p))
                .map_err(|source| CondenseError::Backend {
                    sample_id: sample_id.to_string(),
                    rank: i + 1,
                    backend: backend.id().to_string(),
                    source,
                })
        })
        .collect()
}

/// One knowledge concept per passage, in rank order, passed through verbatim.
pub fn condense_concepts(
    vlm: &dyn Backend,
    sample: &Sample,
    passages: &[Arc<Passage>],
    params: DecodeParams,
) -> Result<Vec<String>, CondenseError> {
    fan_out(vlm, &sample.sample_id, passages, |p| GenerateRequest {
        inputs: vec![render_concept_prompt(&sample.question, &p.text)],
        image_ref: Some(sample.image_ref.clone()),
        beam_size: params.beam_size,
        max_new_tokens: params.max_new_tokens,
    })
}

/// One knowledge essence per passage from the text-only template prompt.
pub fn condense_essence(
    llm: &dyn Backend,
    sample_id: &str,
    vc: &VisualContext,
    question: &str,
    passages: &[Arc<Passage>],
    params: DecodeParams,
) -> Result<Vec<String>, CondenseError> {
    fan_out(llm, sample_id, passages, |p| GenerateRequest {
        inputs: vec![render_essence_prompt(&vc.caption, question, &p.text)],
        image_ref: None,
        beam_size: params.beam_size,
        max_new_tokens: params.max_new_tokens,
    })
}

/// Merges rank-aligned concept lists from several backends: interleave by
/// rank, then drop case-insensitive duplicates keeping the first occurrence.
pub fn ensemble_concepts(per_backend: &[(String, Vec<String>)]) -> Result<Vec<String>, CondenseError> {
    let (_, first) = per_backend.first().ok_or(CondenseError::NoBackends)?;
    let expected = first.len();
    if let Some((backend, list)) = per_backend.iter().find(|(_, l)| l.len() != expected) {
        return Err(CondenseError::Ragged {
            backend: backend.clone(),
            expected,
            got: list.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rank in 0..expected {
        for (_, list) in per_backend {
            let concept = &list[rank];
            if seen.insert(concept.to_lowercase()) {
                out.push(concept.clone());
            }
        }
    }
    Ok(out)
}

/// Backends and decoding settings for live condensation.
#[derive(Clone)]
pub struct Condensers {
    pub vlms: Vec<Arc<dyn Backend>>,
    pub llm: Option<Arc<dyn Backend>>,
    pub concept_params: DecodeParams,
    pub essence_params: DecodeParams,
}

/// Runs the requested condensation paths for one sample.
pub fn condense_sample(
    condensers: &Condensers,
    sample: &Sample,
    vc: &VisualContext,
    passages: &[Arc<Passage>],
    want_concepts: bool,
    want_essences: bool,
) -> Result<CondensedKnowledge, CondenseError> {
    let mut ck = CondensedKnowledge::empty(&sample.sample_id);
    let provenance = |kind, backend_id: &str| -> Vec<Provenance> {
        passages
            .iter()
            .enumerate()
            .map(|(i, p)| Provenance {
                kind,
                rank: i + 1,
                passage_id: p.passage_id.clone(),
                backend_id: backend_id.to_string(),
            })
            .collect()
    };

    if want_concepts && !condensers.vlms.is_empty() {
        let per_backend = condensers
            .vlms
            .iter()
            .map(|vlm| {
                condense_concepts(vlm.as_ref(), sample, passages, condensers.concept_params)
                    .map(|c| (vlm.id().to_string(), c))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for vlm in &condensers.vlms {
            ck.provenance.extend(provenance(KnowledgeKind::Concept, vlm.id()));
        }
        ck.concepts = if per_backend.len() == 1 {
            per_backend.into_iter().next().unwrap().1
        } else {
            ensemble_concepts(&per_backend)?
        };
    }
    if want_essences {
        if let Some(llm) = &condensers.llm {
            ck.essences = condense_essence(
                llm.as_ref(),
                &sample.sample_id,
                vc,
                &sample.question,
                passages,
                condensers.essence_params,
            )?;
            ck.provenance.extend(provenance(KnowledgeKind::Essence, llm.id()));
        }
    }
    Ok(ck)
}

/// Keeps the first `n_concepts` concepts and `n_essences` essences.
///
/// Counts larger than the available lists keep everything.
pub fn truncate_knowledge(ck: &CondensedKnowledge, n_concepts: usize, n_essences: usize) -> CondensedKnowledge {
    CondensedKnowledge {
        sample_id: ck.sample_id.clone(),
        concepts: ck.concepts.iter().take(n_concepts).cloned().collect(),
        essences: ck.essences.iter().take(n_essences).cloned().collect(),
        provenance: ck
            .provenance
            .iter()
            .filter(|p| match p.kind {
                KnowledgeKind::Concept => p.rank <= n_concepts,
                KnowledgeKind::Essence => p.rank <= n_essences,
            })
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockBackend;
    use crate::backends::{BackendRole, Request, Response};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn passages(texts: &[&str]) -> Vec<Arc<Passage>> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Arc::new(Passage {
                    passage_id: format!("p{}", i + 1),
                    text: t.to_string(),
                    source: "test".into(),
                })
            })
            .collect()
    }

    fn sample(question: &str) -> Sample {
        Sample {
            sample_id: "s1".into(),
            image_ref: "img/1.jpg".into(),
            question: question.into(),
            answers: vec!["argyle".into()],
            category: None,
            choices: None,
            correct_choice_index: None,
        }
    }

    fn vc(caption: &str) -> VisualContext {
        VisualContext {
            image_ref: "img/1.jpg".into(),
            caption: caption.into(),
            objects: vec![],
            attributes: vec![],
            ocr: vec![],
        }
    }

    #[test]
    fn empty_passage_still_renders() {
        let p = render_essence_prompt("a dog", "what breed?", "");
        assert!(p.contains("\nRetrieved knowledge: \n===\n"));
    }

    #[test]
    fn each_slot_only_changes_its_line() {
        let a = render_essence_prompt("a dog", "what breed?", "Dalmatians have spots.");
        let b = render_essence_prompt("a dog", "what color?", "Dalmatians have spots.");
        let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(diff, vec![("Question: what breed?", "Question: what color?")]);
        assert_eq!(a.lines().count(), 6);
    }

    #[test]
    fn concept_prompt_format() {
        assert_eq!(
            render_concept_prompt("what pattern?", "Argyle socks."),
            "question: what pattern? knowledge: Argyle socks."
        );
    }

    #[test]
    fn concepts_are_rank_aligned() {
        let vlm = MockBackend::new("vlm", BackendRole::CondenserVlm);
        let ps = passages(&["argyle plaid plaid", "zebra zebra okapi", "argyle plaid plaid", "", "tartan"]);
        let c = condense_concepts(&vlm, &sample("what pattern?"), &ps, DecodeParams::concepts()).unwrap();
        assert_eq!(c, vec!["argyle", "okapi", "argyle", "unknown", "tartan"]);
    }

    struct Recorder {
        calls: std::sync::Mutex<Vec<Request>>,
    }

    impl Backend for Recorder {
        fn id(&self) -> &str {
            "rec"
        }
        fn role(&self) -> BackendRole {
            BackendRole::CondenserLlm
        }
        fn call(&self, request: &Request) -> Result<Response, BackendError> {
            self.calls.lock().unwrap().push(request.clone());
            Ok(Response::Generate(crate::backends::GenerateResponse { output: "x".into() }))
        }
    }

    #[test]
    fn essence_requests_are_text_only_template_prompts() {
        let rec = Recorder { calls: Default::default() };
        let out = condense_essence(&rec, "s1", &vc("a dog"), "what breed?", &passages(&["Dalmatians have spots."]), DecodeParams::long())
            .unwrap();
        assert_eq!(out, vec!["x"]);
        let calls = rec.calls.lock().unwrap();
        match &calls[0] {
            Request::Generate(g) => {
                assert_eq!(g.image_ref, None);
                assert_eq!(g.inputs, vec![render_essence_prompt("a dog", "what breed?", "Dalmatians have spots.")]);
                assert_eq!(g.max_new_tokens, DEFAULT_LONG_MAX_TOKENS);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn essence_from_mock_depends_on_question() {
        let llm = MockBackend::new("llm", BackendRole::CondenserLlm);
        let ps = passages(&["Dalmatians have spots spots."]);
        let a = condense_essence(&llm, "s1", &vc("a dog"), "what breed?", &ps, DecodeParams::long()).unwrap();
        assert_eq!(a, vec!["dalmatians"]);
        let b = condense_essence(&llm, "s2", &vc("a dog"), "why are dalmatians spotted?", &ps, DecodeParams::long()).unwrap();
        assert_eq!(b, vec!["spots"]);
    }

    #[test]
    fn backend_errors_name_sample_and_rank() {
        let wrong_role = MockBackend::new("emb", BackendRole::Embedder);
        let err = condense_concepts(&wrong_role, &sample("q"), &passages(&["a b c"]), DecodeParams::concepts()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s1") && msg.contains("rank 1"), "{msg}");
    }

    #[test]
    fn ensemble_rules() {
        let l = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let single = vec![("a".to_string(), l(&["dog", "cat", "dog"]))];
        assert_eq!(ensemble_concepts(&single).unwrap(), l(&["dog", "cat"]));
        let two = vec![("a".to_string(), l(&["dog", "cat"])), ("b".to_string(), l(&["dog", "fox"]))];
        assert_eq!(ensemble_concepts(&two).unwrap(), l(&["dog", "cat", "fox"]));
        let cased = vec![("a".to_string(), l(&["dog", "cat"])), ("b".to_string(), l(&["DOG", "fox"]))];
        assert_eq!(ensemble_concepts(&cased).unwrap(), l(&["dog", "cat", "fox"]));
        let ragged = vec![("a".to_string(), l(&["dog", "cat"])), ("b".to_string(), l(&["dog"]))];
        assert!(matches!(ensemble_concepts(&ragged), Err(CondenseError::Ragged { .. })));
        assert!(matches!(ensemble_concepts(&[]), Err(CondenseError::NoBackends)));
    }

    #[test]
    fn truncation() {
        let ck = CondensedKnowledge {
            sample_id: "s".into(),
            concepts: (1..=5).map(|i| format!("c{i}")).collect(),
            essences: (1..=5).map(|i| format!("e{i}")).collect(),
            provenance: (1..=5)
                .flat_map(|r| {
                    [KnowledgeKind::Concept, KnowledgeKind::Essence].map(|kind| Provenance {
                        kind,
                        rank: r,
                        passage_id: format!("p{r}"),
                        backend_id: "b".into(),
                    })
                })
                .collect(),
        };
        assert_eq!(truncate_knowledge(&ck, 5, 5), ck);
        let one = truncate_knowledge(&ck, 1, 1);
        assert_eq!(one.concepts, vec!["c1"]);
        assert_eq!(one.essences, vec!["e1"]);
        assert_eq!(one.provenance.len(), 2);
        let none = truncate_knowledge(&ck, 0, 2);
        assert!(none.concepts.is_empty());
        assert_eq!(none.essences, vec!["e1", "e2"]);
    }

    #[test]
    fn condense_sample_records_every_backend() {
        let condensers = Condensers {
            vlms: vec![
                Arc::new(MockBackend::new("vlm-a", BackendRole::CondenserVlm)),
                Arc::new(MockBackend::new("vlm-b", BackendRole::CondenserVlm).with_extra_stopwords(["argyle"])),
            ],
            llm: Some(Arc::new(MockBackend::new("llm", BackendRole::CondenserLlm))),
            concept_params: DecodeParams::concepts(),
            essence_params: DecodeParams::long(),
        };
        let ps = passages(&["argyle plaid plaid", "tartan"]);
        let ck = condense_sample(&condensers, &sample("what?"), &vc("socks"), &ps, true, true).unwrap();
        assert_eq!(ck.concepts, vec!["argyle", "plaid", "tartan"]);
        assert_eq!(ck.essences, vec!["argyle", "tartan"]);
        let backends: HashSet<&str> = ck.provenance.iter().map(|p| p.backend_id.as_str()).collect();
        assert_eq!(backends, HashSet::from(["vlm-a", "vlm-b", "llm"]));

        let only_essence = condense_sample(&condensers, &sample("what?"), &vc("socks"), &ps, false, true).unwrap();
        assert!(only_essence.concepts.is_empty());
    }

    /// Replies after a delay that shrinks with rank, so calls finish in
    /// reverse order.
    struct ReverseLatency {
        calls: AtomicUsize,
    }

    impl Backend for ReverseLatency {
        fn id(&self) -> &str {
            "slow"
        }
        fn role(&self) -> BackendRole {
            BackendRole::CondenserVlm
        }
        fn call(&self, request: &Request) -> Result<Response, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let Request::Generate(g) = request else { unreachable!() };
            let text = g.inputs[0].rsplit("knowledge: ").next().unwrap().to_string();
            let n: u64 = text.trim_start_matches('t').parse().unwrap();
            std::thread::sleep(std::time::Duration::from_millis(40 - 5 * n));
            Ok(Response::Generate(crate::backends::GenerateResponse { output: text }))
        }
    }

    #[test]
    fn completion_order_does_not_matter() {
        let backend = ReverseLatency { calls: AtomicUsize::new(0) };
        let texts: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(6).build().unwrap();
        let out = pool
            .install(|| condense_concepts(&backend, &sample("q"), &passages(&refs), DecodeParams::concepts()))
            .unwrap();
        assert_eq!(out, texts);
    }

    proptest! {
        #[test]
        fn ensemble_keeps_each_casefolded_concept_once(
            lists in (1usize..5, 0usize..6).prop_flat_map(|(b, k)| {
                proptest::collection::vec(proptest::collection::vec("[a-cA-C]{1,2}", k), b)
            })
        ) {
            let per_backend: Vec<(String, Vec<String>)> =
                lists.iter().enumerate().map(|(i, l)| (format!("b{i}"), l.clone())).collect();
            let out = ensemble_concepts(&per_backend).unwrap();
            let folded: Vec<String> = out.iter().map(|c| c.to_lowercase()).collect();
            let unique: HashSet<&String> = folded.iter().collect();
            prop_assert_eq!(unique.len(), folded.len());
            let all: HashSet<String> = lists.iter().flatten().map(|c| c.to_lowercase()).collect();
            prop_assert_eq!(unique.len(), all.len());
        }
    }
}
