//! Evaluation metrics and cross-model ranking: accuracy, F1, MAE, MAPE,
//! success rate, success-rate-weighted MAPE, and fractional-tie average
//! ranks. Numeric metrics are computed on the original data scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Target, TaskType};

/// Threshold below which a target magnitude counts as zero for MAPE.
pub const MAPE_ZERO_GUARD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {pred} predictions vs {target} targets")]
    LengthMismatch { pred: usize, target: usize },
    #[error("MAPE undefined: every target is zero")]
    Undefined,
    #[error("all instances failed (success rate 0)")]
    AllFailed,
    #[error("no tasks to rank")]
    NoTasks,
    #[error("record references unknown instance id `{0}`")]
    UnknownInstanceId(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Failure taxonomy: too-long sequence, too-many channels, instruction not
/// followed, or anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    #[serde(rename = "TLS")]
    Tls,
    #[serde(rename = "TMC")]
    Tmc,
    #[serde(rename = "INF")]
    Inf,
    #[serde(rename = "OTHER")]
    Other,
}

/// What a model produced for one instance.
#[derive(Debug, Clone)]
pub enum Outcome {
    Success(Target),
    Failure(FailureReason),
}

/// Per-instance evaluation record.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub task_id: String,
    pub outcome: Outcome,
}

/// Fraction of exactly-matching labels, after trimming and case-folding.
pub fn accuracy(preds: &[String], targets: &[String]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(MetricsError::EmptyInput);
    }
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| normalize_label(p) == normalize_label(t))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// F1 score. With exactly two classes this is the positive-class F1, the
/// positive class being the last entry of `classes`; with more classes it
/// is the macro average of per-class F1 (0 when precision + recall = 0).
pub fn f1(preds: &[String], targets: &[String], classes: &[String]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() || classes.len() < 2 {
        return Err(MetricsError::EmptyInput);
    }
    let norm: Vec<String> = classes.iter().map(|c| normalize_label(c)).collect();
    let class_f1 = |class: &str| -> f64 {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (p, t) in preds.iter().zip(targets) {
            let p_pos = normalize_label(p) == class;
            let t_pos = normalize_label(t) == class;
            match (p_pos, t_pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fne;
        if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }
    };
    if norm.len() == 2 {
        Ok(class_f1(&norm[1]))
    } else {
        Ok(norm.iter().map(|c| class_f1(c)).sum::<f64>() / norm.len() as f64)
    }
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), target: target.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute percentage error, in percent. Terms whose target
/// magnitude is below [`MAPE_ZERO_GUARD`] are excluded from the mean;
/// returns the value and how many terms were excluded. `Undefined` when
/// every term is excluded.
pub fn mape_with_excluded(pred: &[f64], target: &[f64]) -> Result<(f64, usize)> {
    if pred.len() != target.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), target: target.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if t.abs() < MAPE_ZERO_GUARD {
            continue;
        }
        sum += ((t - p) / t).abs();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::Undefined);
    }
    Ok((100.0 * sum / n as f64, pred.len() - n))
}

pub fn mape(pred: &[f64], target: &[f64]) -> Result<f64> {
    mape_with_excluded(pred, target).map(|(v, _)| v)
}

/// Fraction of successfully processed records.
pub fn success_rate(records: &[PredictionRecord]) -> f64 {
    assert!(!records.is_empty(), "success_rate needs at least one record");
    let ok = records.iter().filter(|r| matches!(r.outcome, Outcome::Success(_))).count();
    ok as f64 / records.len() as f64
}

/// MAPE (over successful instances) divided by the success rate. A zero
/// success rate has no finite value and is reported as a failure marker.
pub fn swmape(mape_val: f64, sr: f64) -> Result<f64> {
    if sr <= 0.0 {
        return Err(MetricsError::AllFailed);
    }
    Ok(mape_val / sr)
}

/// Ranking direction for one metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Per-task fractional ranks and their per-model average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    /// `ranks[task][model]`, fractional on ties.
    pub ranks: Vec<Vec<f64>>,
    pub avg_rank: Vec<f64>,
}

/// Ranks models per task and averages across tasks. Ties receive the mean
/// of the tied positions. Models without a score for a task rank strictly
/// below every scoring model, tied among themselves at the mean of the
/// remaining positions.
pub fn avg_rank(
    scores: &BTreeMap<String, BTreeMap<String, Option<f64>>>,
    direction: Direction,
) -> Result<RankTable> {
    let models: Vec<String> = scores.keys().cloned().collect();
    if models.is_empty() {
        return Err(MetricsError::NoTasks);
    }
    let mut tasks: Vec<String> = scores
        .values()
        .flat_map(|per_task| per_task.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    tasks.sort();
    if tasks.is_empty() {
        return Err(MetricsError::NoTasks);
    }

    let n = models.len();
    let mut ranks = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let values: Vec<Option<f64>> =
            models.iter().map(|m| scores[m].get(task).copied().flatten()).collect();
        let mut scoring: Vec<(usize, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect();
        scoring.sort_by(|a, b| match direction {
            Direction::HigherBetter => b.1.partial_cmp(&a.1).unwrap(),
            Direction::LowerBetter => a.1.partial_cmp(&b.1).unwrap(),
        });

        let mut row = vec![0.0; n];
        // Fractional ranks over the scoring models.
        let m = scoring.len();
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && scoring[j + 1].1 == scoring[i].1 {
                j += 1;
            }
            // Positions i+1 ..= j+1 share the mean rank.
            let mean = (i + 1 + j + 1) as f64 / 2.0;
            for k in i..=j {
                row[scoring[k].0] = mean;
            }
            i = j + 1;
        }
        // Failed models: mean of the remaining positions m+1 ..= n.
        if m < n {
            let mean = (m + 1 + n) as f64 / 2.0;
            for (idx, v) in values.iter().enumerate() {
                if v.is_none() {
                    row[idx] = mean;
                }
            }
        }
        ranks.push(row);
    }

    let avg: Vec<f64> = (0..n)
        .map(|mi| ranks.iter().map(|row| row[mi]).sum::<f64>() / tasks.len() as f64)
        .collect();
    Ok(RankTable { models, tasks, ranks, avg_rank: avg })
}

/// Per-task metric bundle for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub task_type: TaskType,
    pub n_total: usize,
    pub n_success: usize,
    pub metrics: BTreeMap<String, f64>,
    /// MAPE terms dropped by the zero-target guard, when MAPE applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape_excluded: Option<usize>,
    /// True when no instance of the task was processed successfully; the
    /// report renders the "(0/n)" marker instead of metric values.
    pub all_failed: bool,
}

/// Scores plus cross-model rank tables, one per task category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<String>,
    pub task_scores: BTreeMap<String, Vec<TaskScore>>,
    pub understanding_ranks: Option<RankTable>,
    pub generation_ranks: Option<RankTable>,
}

fn label_of(target: &Target) -> Option<String> {
    match target {
        Target::TextLabel(s) => Some(s.clone()),
        Target::McqChoice(c) => Some(c.as_str().to_string()),
        _ => None,
    }
}

fn numeric_values(target: &Target) -> Option<Vec<f64>> {
    match target {
        Target::Series(s) => Some(crate::dataset::flatten_input(s)),
        Target::Indices(idx) => Some(idx.iter().map(|&i| i as f64).collect()),
        _ => None,
    }
}

/// Scores one or more models' records against a dataset.
///
/// Understanding tasks: accuracy plus F1 (failures count as wrong answers;
/// MCQ reports accuracy in the F1 slot). Generation tasks: MAE and MAPE
/// pooled over the successful instances' sample pairs, success rate, and
/// swMAPE. A task with no successes carries the `all_failed` marker.
pub fn score_run(
    dataset: &Dataset,
    records_per_model: &BTreeMap<String, Vec<PredictionRecord>>,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &crate::dataset::TaskInstance> =
        dataset.instances().iter().map(|i| (i.id.as_str(), i)).collect();

    let mut task_scores: BTreeMap<String, Vec<TaskScore>> = BTreeMap::new();
    for (model, records) in records_per_model {
        let mut per_task: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
        for rec in records {
            if !by_id.contains_key(rec.instance_id.as_str()) {
                return Err(MetricsError::UnknownInstanceId(rec.instance_id.clone()));
            }
            per_task.entry(rec.task_id.clone()).or_default().push(rec);
        }
        let mut scores = Vec::new();
        for (task_id, recs) in per_task {
            scores.push(score_task(&task_id, &recs, &by_id)?);
        }
        task_scores.insert(model.clone(), scores);
    }

    let (understanding_ranks, generation_ranks) = build_rank_tables(&task_scores)?;
    Ok(EvalReport {
        models: records_per_model.keys().cloned().collect(),
        task_scores,
        understanding_ranks,
        generation_ranks,
    })
}

/// Rebuilds both category rank tables from per-model task scores
/// (understanding ranked by F1 descending, generation by swMAPE
/// ascending; all-failed tasks rank below every scoring model).
pub fn build_rank_tables(
    task_scores: &BTreeMap<String, Vec<TaskScore>>,
) -> Result<(Option<RankTable>, Option<RankTable>)> {
    let understanding =
        rank_category(task_scores, |t| t.is_understanding(), "f1", Direction::HigherBetter)?;
    let generation =
        rank_category(task_scores, |t| t.is_generation(), "swmape", Direction::LowerBetter)?;
    Ok((understanding, generation))
}

fn score_task(
    task_id: &str,
    recs: &[&PredictionRecord],
    by_id: &BTreeMap<&str, &crate::dataset::TaskInstance>,
) -> Result<TaskScore> {
    let task_type = by_id[recs[0].instance_id.as_str()].task_type;
    let n_total = recs.len();
    let n_success = recs.iter().filter(|r| matches!(r.outcome, Outcome::Success(_))).count();
    let mut metrics = BTreeMap::new();
    let mut mape_excluded = None;

    if task_type.is_understanding() {
        let mut preds = Vec::with_capacity(n_total);
        let mut targets = Vec::with_capacity(n_total);
        for rec in recs {
            let inst = by_id[rec.instance_id.as_str()];
            let target = label_of(&inst.target).expect("understanding target is textual");
            // A failed instance scores as a wrong answer.
            let pred = match &rec.outcome {
                Outcome::Success(t) => label_of(t).unwrap_or_default(),
                Outcome::Failure(_) => String::new(),
            };
            preds.push(pred);
            targets.push(target);
        }
        let acc = accuracy(&preds, &targets)?;
        metrics.insert("accuracy".into(), acc);
        if task_type == TaskType::Mcq {
            // Accuracy stands in for F1 on multiple-choice tasks.
            metrics.insert("f1".into(), acc);
        } else {
            let mut classes: Vec<String> =
                targets.iter().map(|t| normalize_label(t)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            classes.sort();
            if classes.len() >= 2 {
                metrics.insert("f1".into(), f1(&preds, &targets, &classes)?);
            } else {
                // Single-class slice: F1 degenerates to accuracy.
                metrics.insert("f1".into(), acc);
            }
        }
    } else {
        let sr = n_success as f64 / n_total as f64;
        metrics.insert("success_rate".into(), sr);
        let mut pred_pool = Vec::new();
        let mut target_pool = Vec::new();
        for rec in recs {
            let Outcome::Success(pred) = &rec.outcome else { continue };
            let inst = by_id[rec.instance_id.as_str()];
            let (Some(p), Some(t)) = (numeric_values(pred), numeric_values(&inst.target)) else {
                continue;
            };
            // Shape-mismatched predictions cannot be paired; skip them.
            if p.len() != t.len() {
                continue;
            }
            pred_pool.extend(p);
            target_pool.extend(t);
        }
        if !pred_pool.is_empty() {
            metrics.insert("mae".into(), mae(&pred_pool, &target_pool)?);
            match mape_with_excluded(&pred_pool, &target_pool) {
                Ok((m, excluded)) => {
                    metrics.insert("mape".into(), m);
                    mape_excluded = Some(excluded);
                    metrics.insert("swmape".into(), swmape(m, sr)?);
                }
                Err(MetricsError::Undefined) => {}
                Err(e) => return Err(e),
            }
        }
    }

    Ok(TaskScore {
        task_id: task_id.to_string(),
        task_type,
        n_total,
        n_success,
        metrics,
        mape_excluded,
        all_failed: n_success == 0,
    })
}

fn rank_category(
    task_scores: &BTreeMap<String, Vec<TaskScore>>,
    category: impl Fn(TaskType) -> bool,
    metric: &str,
    direction: Direction,
) -> Result<Option<RankTable>> {
    let mut scores: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
    let mut any = false;
    for (model, tasks) in task_scores {
        let mut per_task = BTreeMap::new();
        for ts in tasks.iter().filter(|t| category(t.task_type)) {
            any = true;
            let value = if ts.all_failed { None } else { ts.metrics.get(metric).copied() };
            per_task.insert(ts.task_id.clone(), value);
        }
        scores.insert(model.clone(), per_task);
    }
    if !any {
        return Ok(None);
    }
    avg_rank(&scores, direction).map(Some)
}

/// Renders the report as aligned text tables, one per category, with
/// "(completed/total)" markers for tasks a model failed entirely.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    for (title, ranks, metric) in [
        ("Understanding (F1 %; accuracy for MCQ)", &report.understanding_ranks, "f1"),
        ("Generation (swMAPE %)", &report.generation_ranks, "swmape"),
    ] {
        let Some(table) = ranks else { continue };
        out.push_str(title);
        out.push('\n');
        let mut widths: Vec<usize> = table.tasks.iter().map(|t| t.len().max(8)).collect();
        let model_w = table.models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let cells: Vec<Vec<String>> = table
            .models
            .iter()
            .map(|model| {
                table
                    .tasks
                    .iter()
                    .map(|task| {
                        let ts = report.task_scores[model].iter().find(|t| &t.task_id == task);
                        match ts {
                            Some(t) if t.all_failed => format!("({}/{})", t.n_success, t.n_total),
                            Some(t) => t
                                .metrics
                                .get(metric)
                                .map(|v| {
                                    if metric == "f1" {
                                        format!("{:.1}", v * 100.0)
                                    } else {
                                        format!("{v:.1}")
                                    }
                                })
                                .unwrap_or_else(|| format!("({}/{})", t.n_success, t.n_total)),
                            None => "-".to_string(),
                        }
                    })
                    .collect()
            })
            .collect();
        for (ti, w) in widths.iter_mut().enumerate() {
            for row in &cells {
                *w = (*w).max(row[ti].len());
            }
        }
        out.push_str(&format!("{:model_w$}", "model"));
        for (t, w) in table.tasks.iter().zip(&widths) {
            out.push_str(&format!("  {t:>w$}"));
        }
        out.push_str("  AvgRk\n");
        for (mi, model) in table.models.iter().enumerate() {
            out.push_str(&format!("{model:model_w$}"));
            for (c, w) in cells[mi].iter().zip(&widths) {
                out.push_str(&format!("  {c:>w$}"));
            }
            out.push_str(&format!("  {:>5.1}\n", table.avg_rank[mi]));
        }
        out.push('\n');
    }
    out
}
