use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Evaluator, JudgedResponse, Metrics};
use crate::knowledge_base::KnowledgeBase;
use crate::parallel::parallel_map;
use crate::pipeline::{self, PipelineConfig, Threshold};
use crate::retrieval::Retriever;
use crate::task::{InterviewTask, TaskType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub t: Threshold,
    pub m: u32,
    pub overall: Metrics,
    pub by_task_type: BTreeMap<TaskType, Metrics>,
}

/// Runs the pipeline over `tasks` for every `(m, t)` in the grid and judges
/// the results. Rows are ordered by `m`, then `t`, as given.
///
/// Self-check samples are cached by prompt and sample index, not by `t`, so
/// sweeping `t` at fixed `m` reuses them; raising `m` only draws the new
/// sample indices.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    evaluator: &Evaluator<'_>,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    tasks: &[InterviewTask],
    t_grid: &[Threshold],
    m_grid: &[u32],
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<Vec<CalibrationRow>, EvalError> {
    if t_grid.is_empty() || m_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(t_grid.len() * m_grid.len());
    for &m in m_grid {
        for &t in t_grid {
            let cfg = PipelineConfig { m, t, ..cfg.clone() };
            let judged: Vec<JudgedResponse> = parallel_map(tasks, workers, |task| {
                let trace = pipeline::run(evaluator.client(), kb, retriever, task, &cfg).map_err(|source| {
                    EvalError::Task {
                        task_id: task.task_id.clone(),
                        source,
                    }
                })?;
                evaluator.judge_trace(&trace)
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
            let mut by_type: BTreeMap<TaskType, Vec<JudgedResponse>> = BTreeMap::new();
            for r in &judged {
                by_type.entry(r.task_type).or_default().push(r.clone());
            }
            rows.push(CalibrationRow {
                t,
                m,
                overall: Metrics::compute(&judged),
                by_task_type: by_type.into_iter().map(|(k, v)| (k, Metrics::compute(&v))).collect(),
            });
        }
    }
    Ok(rows)
}

/// Aligned text rendering of a calibration table.
pub fn calibration_table(rows: &[CalibrationRow]) -> String {
    let fmt = |v: Option<f64>, d: usize| v.map(|x| format!("{x:.d$}")).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "{:<6} {:<4} {:<10} {:<6} {:<6}\n",
        "t", "m", "Fact Score", "SFPR", "THR"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:<4} {:<10} {:<6} {:<6}\n",
            r.t.to_string(),
            r.m,
            fmt(r.overall.fact_score, 3),
            fmt(r.overall.sfpr, 2),
            fmt(r.overall.thr_proxy, 1)
        ));
    }
    out
}
