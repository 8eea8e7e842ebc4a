//! Fact Score, supported facts per response, temporal-hallucination rate,
//! and their aggregations by method, task type and character popularity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{EvalError, JudgedResponse};
use crate::pipeline::Method;
use crate::task::TaskType;

/// Micro-averaged factual precision: supported facts over all facts.
pub fn fact_score(responses: &[JudgedResponse]) -> Result<f64, EvalError> {
    if responses.is_empty() {
        return Err(EvalError::NoResponses);
    }
    let (supported, total) = responses.iter().fold((0usize, 0usize), |(s, t), r| {
        (s + r.supported_count(), t + r.facts.len())
    });
    if total == 0 {
        return Err(EvalError::NoFacts);
    }
    Ok(supported as f64 / total as f64)
}

/// Supported facts per response; fact-free responses count in the denominator.
pub fn sfpr(responses: &[JudgedResponse]) -> Result<f64, EvalError> {
    if responses.is_empty() {
        return Err(EvalError::NoResponses);
    }
    let supported: usize = responses.iter().map(JudgedResponse::supported_count).sum();
    Ok(supported as f64 / responses.len() as f64)
}

/// Mean of per-response precision over responses that have facts.
pub fn macro_fact_score(responses: &[JudgedResponse]) -> Option<f64> {
    let per: Vec<f64> = responses
        .iter()
        .filter(|r| !r.facts.is_empty())
        .map(|r| r.supported_count() as f64 / r.facts.len() as f64)
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub responses: usize,
    pub facts: usize,
    pub supported_facts: usize,
    pub fact_score: Option<f64>,
    pub macro_fact_score: Option<f64>,
    pub sfpr: Option<f64>,
    /// Responses with a story-time cutoff, the population for the THR proxy.
    pub thr_responses: usize,
    pub thr_facts: usize,
    /// Temporal-hallucination facts per 100 cutoff responses.
    pub thr_proxy: Option<f64>,
}

impl Metrics {
    pub fn compute(responses: &[JudgedResponse]) -> Self {
        let thr: Vec<usize> = responses.iter().filter_map(|r| r.temporal_hallucinations).collect();
        let thr_facts = thr.iter().sum();
        Metrics {
            responses: responses.len(),
            facts: responses.iter().map(|r| r.facts.len()).sum(),
            supported_facts: responses.iter().map(JudgedResponse::supported_count).sum(),
            fact_score: fact_score(responses).ok(),
            macro_fact_score: macro_fact_score(responses),
            sfpr: sfpr(responses).ok(),
            thr_responses: thr.len(),
            thr_facts,
            thr_proxy: (!thr.is_empty()).then(|| 100.0 * thr_facts as f64 / thr.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityBucket {
    /// Inclusive rank range.
    pub first_rank: u32,
    pub last_rank: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityReport {
    pub bucket_size: u32,
    pub buckets: Vec<PopularityBucket>,
    /// Characters ranked below the ten most popular of their story.
    pub excluding_top10: Option<Metrics>,
    /// Set when every ranked response belongs to a top-10 character.
    pub excluding_top10_empty: bool,
    pub missing_rank: usize,
}

/// Groups responses into rank buckets `[1, size]`, `[size+1, 2*size]`, ...
/// Responses without a rank are excluded with a warning.
pub fn popularity_buckets(responses: &[JudgedResponse], bucket_size: u32) -> PopularityReport {
    let bucket_size = bucket_size.max(1);
    let mut groups: BTreeMap<u32, Vec<JudgedResponse>> = BTreeMap::new();
    let mut tail = Vec::new();
    let mut missing = 0;
    for r in responses {
        let Some(rank) = r.popularity_rank.filter(|&r| r > 0) else {
            missing += 1;
            continue;
        };
        groups.entry((rank - 1) / bucket_size).or_default().push(r.clone());
        if rank > 10 {
            tail.push(r.clone());
        }
    }
    if missing > 0 {
        warn!("{missing} responses have no popularity rank and were left out of the buckets");
    }
    let ranked = responses.len() - missing;
    PopularityReport {
        bucket_size,
        buckets: groups
            .into_iter()
            .map(|(b, rs)| PopularityBucket {
                first_rank: b * bucket_size + 1,
                last_rank: (b + 1) * bucket_size,
                metrics: Metrics::compute(&rs),
            })
            .collect(),
        excluding_top10: (!tail.is_empty()).then(|| Metrics::compute(&tail)),
        excluding_top10_empty: ranked > 0 && tail.is_empty(),
        missing_rank: missing,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub overall: Metrics,
    pub by_task_type: BTreeMap<TaskType, Metrics>,
    pub popularity: PopularityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: BTreeMap<Method, MethodReport>,
}

pub const DEFAULT_BUCKET_SIZE: u32 = 10;

impl EvalReport {
    pub fn build(responses: &[JudgedResponse], bucket_size: u32) -> Self {
        let mut by_method: BTreeMap<Method, Vec<JudgedResponse>> = BTreeMap::new();
        for r in responses {
            by_method.entry(r.method).or_default().push(r.clone());
        }
        let methods = by_method
            .into_iter()
            .map(|(method, rs)| {
                let mut by_type: BTreeMap<TaskType, Vec<JudgedResponse>> = BTreeMap::new();
                for r in &rs {
                    by_type.entry(r.task_type).or_default().push(r.clone());
                }
                let report = MethodReport {
                    overall: Metrics::compute(&rs),
                    by_task_type: by_type
                        .into_iter()
                        .map(|(t, v)| (t, Metrics::compute(&v)))
                        .collect(),
                    popularity: popularity_buckets(&rs, bucket_size),
                };
                (method, report)
            })
            .collect();
        EvalReport { methods }
    }

    /// Text table: one row per method, Fact Score and SFPR per task type.
    pub fn table(&self) -> String {
        let headers = ["Adversarial", "Open Ended", "Dialogue Completion", "Scene Grounded"];
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for h in headers {
            let _ = write!(out, " | {h:<21}");
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "Method");
        for _ in headers {
            let _ = write!(out, " | {:<10} {:<10}", "Fact Score", "SFPR");
        }
        out.push('\n');
        out.push_str(&"-".repeat(10 + headers.len() * 24));
        out.push('\n');
        let fmt = |v: Option<f64>, digits: usize| match v {
            Some(x) => format!("{x:.digits$}"),
            None => "-".to_string(),
        };
        for (method, report) in &self.methods {
            let _ = write!(out, "{:<10}", method.as_str());
            for tt in TaskType::ALL {
                let m = report.by_task_type.get(&tt);
                let _ = write!(
                    out,
                    " | {:<10} {:<10}",
                    fmt(m.and_then(|m| m.fact_score), 2),
                    fmt(m.and_then(|m| m.sfpr), 1)
                );
            }
            out.push('\n');
        }
        out
    }
}
