//! Generators and checks shared by the property tests and the acceptance run.

use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::rngs::StdRng;
use rand::Rng;
use rolefact::evaluation::{Evaluator, EvidencePolicy};
use rolefact::knowledge_base::parse_corpus;
use rolefact::llm::{ChatBackend, ChatRequest, LlmClient, LlmError, PurposeTag};
use rolefact::pipeline::{run, Method, PipelineConfig, ResponseTrace, Threshold};
use rolefact::retrieval::{Bm25Index, Bm25Params, Document, IndexOptions, Retriever, StoryIndex};
use rolefact::task::{InterviewTask, TaskType};

use super::{fixture, index, kb, NaiveBm25, RuleBackend};

// ---- BM25 synthetic corpora ------------------------------------------------

pub const VOCAB: &[&str] = &[
    "dragon", "forge", "night", "fury", "berk", "viking", "tail", "fin", "woods", "arena", "chief", "son", "fire",
    "shield", "axe", "sheep", "fish", "boat", "storm", "cove", "wing", "sky", "ring", "bread", "snow", "hail",
    "scar", "wand", "owl", "castle", "train", "broom", "chess", "knight", "stone", "troll", "letter", "cupboard",
];

pub fn synthetic(rng: &mut StdRng, n: usize) -> Vec<Document> {
    let mut time = 0u64;
    (0..n)
        .map(|i| {
            time += rng.gen_range(1..4);
            let len = rng.gen_range(1..14);
            let text: Vec<&str> = (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
            let speech = rng.gen_bool(0.7);
            let text = text.join(" ");
            let speaker = speech.then(|| ["HICCUP", "ASTRID", "STOICK"][rng.gen_range(0..3)].to_string());
            let rendered_text = match &speaker {
                Some(s) => format!("{s}: {text}"),
                None => format!("[scene] {text}"),
            };
            Document {
                doc_id: format!("d{i:04}"),
                story_id: "s".into(),
                time,
                scene_index: (i / 20) as u32,
                speaker,
                text,
                rendered_text,
            }
        })
        .collect()
}

pub fn query(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..6);
    let mut words: Vec<String> = (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())].to_string()).collect();
    if rng.gen_bool(0.2) {
        words.push("unseen".into());
    }
    if rng.gen_bool(0.2) {
        let w = words[0].to_uppercase();
        words.push(w);
    }
    words.join(" ")
}

pub fn check_oracle(index: &StoryIndex, oracle: &NaiveBm25, q: &str, n: usize, cutoff: Option<u64>) -> Result<(), String> {
    let got = index.search(q, n, cutoff);
    let want = oracle.search(q, n, cutoff);
    let got_ids: Vec<_> = got.hits.iter().map(|h| h.document.doc_id.clone()).collect();
    let want_ids: Vec<_> = want.iter().map(|w| w.0.clone()).collect();
    if got_ids != want_ids {
        return Err(format!("query {q:?} n={n} cutoff={cutoff:?}: {got_ids:?} vs {want_ids:?}"));
    }
    for (h, w) in got.hits.iter().zip(&want) {
        if (h.score - w.1).abs() > 1e-12 {
            return Err(format!("{}: {} vs {}", w.0, h.score, w.1));
        }
    }
    Ok(())
}

pub fn oracle_case(docs: &[Document], q: &str, n: usize, cutoff: Option<u64>) -> Result<(), String> {
    let index = StoryIndex::build(docs.to_vec(), Bm25Params::default()).map_err(|e| e.to_string())?;
    check_oracle(&index, &NaiveBm25::new(docs), q, n, cutoff)
}

// ---- temporal scenarios ----------------------------------------------------

pub const WORDS: &[&str] = &["dragon", "forge", "cove", "storm", "arena", "fin", "shield", "fire"];

/// One story `s` with `times.len()` events; each event is spoken by A or B.
pub fn corpus(times: &[u64], words: &[usize]) -> String {
    let mut out = String::from("{\"record\":\"story\",\"story_id\":\"s\",\"title\":\"Tale\"}\n");
    for (i, (t, w)) in times.iter().zip(words).enumerate() {
        let speaker = if i % 2 == 0 { "A" } else { "B" };
        out.push_str(&format!(
            "{{\"record\":\"event\",\"event_id\":\"t{t}\",\"story_id\":\"s\",\"scene_index\":{},\"time\":{t},\"kind\":\"speech\",\"speaker\":\"{speaker}\",\"text\":\"the {} and the {}\"}}\n",
            i / 3,
            WORDS[w % WORDS.len()],
            WORDS[(w / 3) % WORDS.len()],
        ));
    }
    for c in ["A", "B"] {
        out.push_str(&format!(
            "{{\"record\":\"profile\",\"story_id\":\"s\",\"character\":\"{c}\",\"description\":\"Someone\"}}\n"
        ));
    }
    out
}

pub fn times_strategy() -> impl Strategy<Value = (Vec<u64>, Vec<usize>)> {
    (2usize..25).prop_flat_map(|n| {
        (
            proptest::collection::vec(1u64..5, n).prop_map(|gaps| {
                gaps.iter()
                    .scan(0, |acc, g| {
                        *acc += g;
                        Some(*acc)
                    })
                    .collect()
            }),
            proptest::collection::vec(0usize..64, n),
        )
    })
}

#[derive(Debug, Clone)]
pub struct CutoffCase {
    pub times: Vec<u64>,
    pub words: Vec<usize>,
    pub cut_frac: f64,
    pub query: Vec<usize>,
    pub n: usize,
}

pub fn cutoff_cases() -> impl Strategy<Value = CutoffCase> {
    (times_strategy(), 0.0f64..1.2, proptest::collection::vec(0usize..8, 1..4), 1usize..8).prop_map(
        |((times, words), cut_frac, query, n)| CutoffCase {
            times,
            words,
            cut_frac,
            query,
            n,
        },
    )
}

/// Retrieval, fact evidence and prompt scene lines never reach past the cutoff.
pub fn check_cutoff_case(c: &CutoffCase) -> Result<(), TestCaseError> {
    let kb = parse_corpus("gen", &corpus(&c.times, &c.words)).unwrap();
    let index = Bm25Index::from_knowledge_base(&kb, IndexOptions::default()).unwrap();
    let last = *c.times.last().unwrap();
    let cutoff = ((last as f64 * c.cut_frac) as u64).min(last);
    let query: Vec<&str> = c.query.iter().map(|&i| WORDS[i]).collect();
    let query = query.join(" ");

    let hits = index.retrieve("s", &query, c.n, Some(cutoff)).unwrap();
    prop_assert!(hits.hits.iter().all(|h| h.document.time <= cutoff));

    // Every fact is backed by every event, so retrieval support hinges
    // only on what the cutoff lets through.
    let all: Vec<String> = c.times.iter().map(|t| format!("t{t}")).collect();
    let facts = vec![
        ("A mentions the dragon.".to_string(), all.clone()),
        ("A mentions the forge.".to_string(), all),
    ];
    let client = LlmClient::new(Arc::new(RuleBackend::new("reply", facts)));
    let task = InterviewTask {
        task_id: "p".into(),
        task_type: TaskType::DialogueCompletion,
        story_id: "s".into(),
        character: "A".into(),
        query,
        cutoff: Some(cutoff),
        popularity_rank: None,
    };
    let cfg = PipelineConfig {
        n: c.n,
        m: 0,
        ..Default::default()
    };
    let trace = run(&client, &kb, &index, &task, &cfg).unwrap();
    prop_assert!(trace.retrieved.iter().all(|d| d.time <= cutoff));
    for fact in &trace.facts {
        for id in &fact.evidence {
            let t: u64 = id.trim_start_matches('t').parse().unwrap();
            prop_assert!(t <= cutoff, "evidence {} after cutoff {}", id, cutoff);
        }
    }
    for stage in &trace.stages {
        for line in stage.prompt.lines().filter(|l| l.starts_with("[scene ")) {
            let t: u64 = line.split("t=").nth(1).unwrap().split(']').next().unwrap().parse().unwrap();
            prop_assert!(t <= cutoff, "prompt line {} after cutoff {}", line, cutoff);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ThrCase {
    pub times: Vec<u64>,
    pub words: Vec<usize>,
    pub cut_frac: f64,
    /// Per fact: index of its one supporting event, or none.
    pub support: Vec<Option<usize>>,
}

pub fn thr_cases() -> impl Strategy<Value = ThrCase> {
    (times_strategy(), 0.0f64..1.0, proptest::collection::vec(proptest::option::of(0usize..64), 1..6)).prop_map(
        |((times, words), cut_frac, support)| ThrCase {
            times,
            words,
            cut_frac,
            support,
        },
    )
}

/// The proxy counts exactly the facts whose only support lies after the cutoff.
pub fn check_thr_case(c: &ThrCase) -> Result<(), TestCaseError> {
    let kb = parse_corpus("gen", &corpus(&c.times, &c.words)).unwrap();
    let index = Bm25Index::from_knowledge_base(&kb, IndexOptions::default()).unwrap();
    let cutoff = (*c.times.last().unwrap() as f64 * c.cut_frac) as u64;
    let at = |j: usize| c.times[j % c.times.len()];
    let facts: Vec<(String, Vec<String>)> = c
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("Fact {i} holds."), s.map(|j| vec![format!("t{}", at(j))]).unwrap_or_default()))
        .collect();
    let expected = c.support.iter().filter(|s| s.is_some_and(|j| at(j) > cutoff)).count();
    let client = LlmClient::new(Arc::new(RuleBackend::new("reply", facts)));
    let evaluator = Evaluator::new(&client, &kb, &index).with_policy(EvidencePolicy::AllInScope);
    prop_assert_eq!(evaluator.thr_proxy(&fixed_trace(cutoff)).unwrap(), expected);
    Ok(())
}

/// A fixture trace re-pointed at story `s`, character A, with the given cutoff.
pub fn fixed_trace(cutoff: u64) -> ResponseTrace {
    let text = std::fs::read_to_string(fixture("golden_traces.jsonl")).unwrap();
    let mut trace: ResponseTrace = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    trace.method = Method::Rolefact;
    trace.task = InterviewTask {
        task_id: "p".into(),
        task_type: TaskType::DialogueCompletion,
        story_id: "s".into(),
        character: "A".into(),
        query: "q".into(),
        cutoff: Some(cutoff),
        popularity_rank: None,
    };
    trace.final_response = "reply".into();
    trace
}

// ---- self-check tables -----------------------------------------------------

/// One response's facts: (retrieval-supported, self-check samples).
pub type Table = Vec<(bool, Vec<bool>)>;

pub fn tables() -> impl Strategy<Value = (u32, Vec<Table>)> {
    (1u32..8).prop_flat_map(|m| {
        let fact = (any::<bool>(), proptest::collection::vec(any::<bool>(), m as usize));
        (Just(m), proptest::collection::vec(proptest::collection::vec(fact, 0..5), 1..4))
    })
}

/// Answers every stage from the tables. Response `i` is asked about with a
/// query ending in ` i`; its facts read `Fact i-j.`.
struct Tables(Vec<Table>);

impl ChatBackend for Tables {
    fn backend_id(&self) -> String {
        "tables".into()
    }

    fn generate(&self, r: &ChatRequest, sample: u32) -> Result<String, LlmError> {
        let p = &r.user_prompt;
        let fact_of = |p: &str| -> (usize, usize) {
            let s = p.split("Statement: Fact ").nth(1).unwrap();
            let s = s.split(['\n', '.']).next().unwrap();
            let (a, b) = s.split_once('-').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        };
        let response_of = |p: &str| -> usize { p.rsplit(' ').next().unwrap().parse().unwrap() };
        let verdict = |ok: bool| if ok { "Supported." } else { "Not Supported." }.to_string();
        Ok(match r.purpose {
            PurposeTag::Irg => format!("reply {}", response_of(p)),
            PurposeTag::Dec => {
                let i = response_of(p);
                (0..self.0[i].len()).map(|j| format!("- Fact {i}-{j}.")).collect::<Vec<_>>().join("\n")
            }
            PurposeTag::Fcr => {
                let (i, j) = fact_of(p);
                verdict(self.0[i][j].0)
            }
            PurposeTag::Fcs => {
                let (i, j) = fact_of(p);
                verdict(self.0[i][j].1[sample as usize])
            }
            _ => "rewritten".into(),
        })
    }
}

pub fn table_client(tables: &[Table]) -> LlmClient {
    LlmClient::new(Arc::new(Tables(tables.to_vec())))
}

/// |A_y| for each response at sample size `m` and threshold `t`.
pub fn verified_counts(client: &LlmClient, tables: &[Table], m: u32, t: Threshold) -> Vec<usize> {
    let kb = kb();
    let index = index(&kb);
    (0..tables.len())
        .map(|i| {
            let task = InterviewTask {
                task_id: format!("r{i}"),
                task_type: TaskType::OpenEnded,
                story_id: "httyd".into(),
                character: "HICCUP".into(),
                query: format!("Hiccup, tell me about Toothless {i}"),
                cutoff: None,
                popularity_rank: None,
            };
            let cfg = PipelineConfig {
                m,
                t,
                ..Default::default()
            };
            run(client, &kb, &index, &task, &cfg).unwrap().verified_facts().count()
        })
        .collect()
}

/// Raising t from a/10 to b/10 never grows any |A_y| or the SFPR, and the
/// second sweep draws no new self-check samples.
pub fn check_monotone(m: u32, tables: &[Table], a: u64, b: u64) -> Result<(), TestCaseError> {
    let (lo, hi) = (Threshold::new(a.min(b), 10).unwrap(), Threshold::new(a.max(b), 10).unwrap());
    let client = table_client(tables);
    let low = verified_counts(&client, tables, m, lo);
    let drawn = client.stats().backend_calls_for(PurposeTag::Fcs);
    let high = verified_counts(&client, tables, m, hi);
    for (l, h) in low.iter().zip(&high) {
        prop_assert!(h <= l, "|A_y| grew from {} to {}", l, h);
    }
    let sfpr = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    prop_assert!(sfpr(&high) <= sfpr(&low));
    // The second threshold re-reads the samples already drawn.
    prop_assert_eq!(client.stats().backend_calls_for(PurposeTag::Fcs), drawn);
    Ok(())
}
