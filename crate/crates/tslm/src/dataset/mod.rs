//! Task and instance schema, file formats, flattening/normalisation, and
//! the synthetic toy-task generator.

mod io;
mod toy;

pub use io::{load_dataset, write_dataset, INLINE_POINT_LIMIT};
pub use toy::{generate_toy_suite, ToySizes};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Default cap on total points per series (`channels * length`).
pub const MAX_POINTS: usize = 1 << 25;

/// Guard used in place of a zero standard deviation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schema error in field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("sidecar file missing: {0}")]
    SidecarMissing(String),
    #[error("non-finite value in instance `{0}`")]
    NonFiniteValue(String),
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// A multivariate series: `channels` rows, each of the same length, on the
/// original data scale. All values are finite (checked on construction).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<Vec<f64>>,
    pub sample_rate_hz: Option<f64>,
    pub channel_names: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_cap(values, MAX_POINTS)
    }

    pub fn with_cap(values: Vec<Vec<f64>>, cap: usize) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(DatasetError::Schema {
                field: "values".into(),
                reason: "series must have at least one channel and one sample".into(),
            });
        }
        let len = values[0].len();
        if values.iter().any(|c| c.len() != len) {
            return Err(DatasetError::Schema {
                field: "values".into(),
                reason: "all channels must share a length".into(),
            });
        }
        if values.len() * len > cap {
            return Err(DatasetError::Schema {
                field: "values".into(),
                reason: format!("{} points exceed the cap of {}", values.len() * len, cap),
            });
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DatasetError::Schema {
                field: "values".into(),
                reason: "non-finite value".into(),
            });
        }
        Ok(Self { values, sample_rate_hz: None, channel_names: None })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values])
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn length(&self) -> usize {
        self.values[0].len()
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// The seven task types. The first three are understanding (text output),
/// the last four generation (series or index output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    AnomalyDetection,
    Classification,
    #[serde(rename = "MCQ")]
    Mcq,
    EventLocalisation,
    Forecasting,
    Imputation,
    Synthesis,
}

impl TaskType {
    pub const ALL: [TaskType; 7] = [
        TaskType::AnomalyDetection,
        TaskType::Classification,
        TaskType::Mcq,
        TaskType::EventLocalisation,
        TaskType::Forecasting,
        TaskType::Imputation,
        TaskType::Synthesis,
    ];

    pub fn is_understanding(self) -> bool {
        matches!(self, TaskType::AnomalyDetection | TaskType::Classification | TaskType::Mcq)
    }

    pub fn is_generation(self) -> bool {
        !self.is_understanding()
    }
}

/// One of the four multiple-choice options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    C,
    D,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::A => "A",
            Choice::B => "B",
            Choice::C => "C",
            Choice::D => "D",
        }
    }
}

/// Ground truth (or a model prediction) for one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    TextLabel(String),
    McqChoice(Choice),
    Series(TimeSeries),
    Indices(Vec<usize>),
}

/// Per-signal normalisation statistics, stored for exact inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Identity statistics: normalisation is a no-op.
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub discipline: String,
    pub task_id: String,
    pub task_type: TaskType,
    pub prompt: String,
    /// Absent only for synthesis instances.
    pub input: Option<TimeSeries>,
    pub target: Target,
    pub norm_stats: Option<NormStats>,
}

impl TaskInstance {
    /// Checks the cross-field invariants. `Ok(())` means the instance is
    /// well-formed.
    pub fn validate(&self) -> Result<()> {
        match (&self.input, self.task_type) {
            (None, TaskType::Synthesis) => {}
            (None, _) => {
                return Err(DatasetError::Schema {
                    field: "input".into(),
                    reason: format!("{:?} instances require an input series", self.task_type),
                })
            }
            (Some(_), _) => {}
        }
        let target_ok = match (&self.target, self.task_type.is_understanding()) {
            (Target::TextLabel(_) | Target::McqChoice(_), true) => true,
            (Target::Series(_) | Target::Indices(_), false) => true,
            _ => false,
        };
        if !target_ok {
            return Err(DatasetError::Schema {
                field: "target".into(),
                reason: format!("target variant inconsistent with task type {:?}", self.task_type),
            });
        }
        if let (Target::Series(out), Some(input)) = (&self.target, &self.input) {
            if out.channels() != 1 && out.channels() != input.channels() {
                return Err(DatasetError::Schema {
                    field: "target".into(),
                    reason: format!(
                        "series target must have 1 or {} channels, got {}",
                        input.channels(),
                        out.channels()
                    ),
                });
            }
        }
        if let (Target::Indices(idx), Some(input)) = (&self.target, &self.input) {
            if let Some(&bad) = idx.iter().find(|&&i| i >= input.length()) {
                return Err(DatasetError::Schema {
                    field: "target".into(),
                    reason: format!("index {} out of range for input length {}", bad, input.length()),
                });
            }
        }
        Ok(())
    }
}

/// An ordered, immutable collection of validated instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<TaskInstance>,
    manifest: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub count: usize,
    pub task_type: TaskType,
}

impl Dataset {
    /// Builds a dataset, validating every instance and the id-uniqueness
    /// invariant, and deriving the manifest.
    pub fn from_instances(instances: Vec<TaskInstance>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
        for inst in &instances {
            inst.validate()?;
            if !seen.insert(inst.id.clone()) {
                return Err(DatasetError::DuplicateId(inst.id.clone()));
            }
            let entry = manifest
                .entry(inst.task_id.clone())
                .or_insert(ManifestEntry { count: 0, task_type: inst.task_type });
            if entry.task_type != inst.task_type {
                return Err(DatasetError::Schema {
                    field: "task_id".into(),
                    reason: format!("task `{}` mixes task types", inst.task_id),
                });
            }
            entry.count += 1;
        }
        Ok(Self { instances, manifest })
    }

    pub fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    pub fn manifest(&self) -> &BTreeMap<String, ManifestEntry> {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Splits off every `k`-th instance per task into a holdout set,
    /// returning `(train, holdout)`.
    pub fn split_holdout(&self, k: usize) -> Result<(Dataset, Dataset)> {
        assert!(k >= 2, "holdout stride must be at least 2");
        let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
        let mut train = Vec::new();
        let mut held = Vec::new();
        for inst in &self.instances {
            let n = per_task.entry(inst.task_id.as_str()).or_insert(0);
            if *n % k == k - 1 {
                held.push(inst.clone());
            } else {
                train.push(inst.clone());
            }
            *n += 1;
        }
        Ok((Dataset::from_instances(train)?, Dataset::from_instances(held)?))
    }
}

/// Channel-major flattening: channel 0's samples, then channel 1's, etc.
/// Output length is `channels * length`.
pub fn flatten_input(x: &TimeSeries) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.channels() * x.length());
    for c in x.values() {
        out.extend_from_slice(c);
    }
    out
}

/// Inverse of [`flatten_input`] given the channel count.
pub fn unflatten(flat: &[f64], channels: usize) -> Result<TimeSeries> {
    if channels == 0 || flat.len() % channels != 0 {
        return Err(DatasetError::Schema {
            field: "values".into(),
            reason: format!("{} values do not split into {} channels", flat.len(), channels),
        });
    }
    let len = flat.len() / channels;
    TimeSeries::new(flat.chunks(len).map(<[f64]>::to_vec).collect())
}

/// Standardises a signal to zero mean and unit variance; a standard
/// deviation below [`STD_EPS`] is replaced by it, so constant signals map
/// to zeros. The returned stats invert the transform exactly.
pub fn normalize(signal: &[f64]) -> (Vec<f64>, NormStats) {
    assert!(!signal.is_empty(), "cannot normalize an empty signal");
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_EPS);
    let normalized = signal.iter().map(|v| (v - mean) / std).collect();
    (normalized, NormStats { mean, std })
}

/// Affine inverse of [`normalize`].
pub fn denormalize(normalized: &[f64], stats: NormStats) -> Vec<f64> {
    normalized.iter().map(|v| v * stats.std + stats.mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(values: Vec<Vec<f64>>) -> TimeSeries {
        TimeSeries::new(values).unwrap()
    }

    #[test]
    fn flatten_univariate_is_identity() {
        let x = mk(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert_eq!(flatten_input(&x), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn flatten_is_channel_major() {
        let x = mk(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(flatten_input(&x), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_three_channel_length() {
        let x = mk(vec![vec![0.0; 6000], vec![0.0; 6000], vec![0.0; 6000]]);
        assert_eq!(flatten_input(&x).len(), 18000);
    }

    #[test]
    fn unflatten_round_trip() {
        let x = mk(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let back = unflatten(&flatten_input(&x), 2).unwrap();
        assert_eq!(back.values(), x.values());
    }

    #[test]
    fn normalize_constant_signal() {
        let (norm, stats) = normalize(&[5.0, 5.0, 5.0]);
        assert_eq!(norm, vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.mean, 5.0);
        assert_eq!(stats.std, STD_EPS);
        assert_eq!(denormalize(&norm, stats), vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn normalize_standard_signal() {
        let (norm, stats) = normalize(&[-1.0, 1.0]);
        assert_eq!(norm, vec![-1.0, 1.0]);
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.std, 1.0);
    }

    #[test]
    fn normalize_round_trip_small() {
        let x = [1.0, 2.0, 3.0];
        let (norm, stats) = normalize(&x);
        let back = denormalize(&norm, stats);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(TimeSeries::new(vec![vec![1.0, f64::NAN]]).is_err());
        assert!(TimeSeries::new(vec![vec![1.0, f64::INFINITY]]).is_err());
    }

    #[test]
    fn rejects_oversized() {
        assert!(TimeSeries::with_cap(vec![vec![0.0; 10]], 9).is_err());
    }

    #[test]
    fn validate_rejects_type_target_mismatch() {
        let inst = TaskInstance {
            id: "x".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::Forecasting,
            prompt: "p".into(),
            input: Some(mk(vec![vec![1.0, 2.0]])),
            target: Target::TextLabel("oops".into()),
            norm_stats: None,
        };
        assert!(matches!(inst.validate(), Err(DatasetError::Schema { .. })));
    }

    #[test]
    fn validate_rejects_missing_input_for_non_synthesis() {
        let inst = TaskInstance {
            id: "x".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::Classification,
            prompt: "p".into(),
            input: None,
            target: Target::TextLabel("a".into()),
            norm_stats: None,
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn validate_allows_synthesis_without_input() {
        let inst = TaskInstance {
            id: "x".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::Synthesis,
            prompt: "p".into(),
            input: None,
            target: Target::Series(mk(vec![vec![1.0, 2.0]])),
            norm_stats: Some(NormStats::identity()),
        };
        inst.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_channel_count() {
        let inst = TaskInstance {
            id: "x".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::Forecasting,
            prompt: "p".into(),
            input: Some(mk(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])),
            target: Target::Series(mk(vec![vec![1.0], vec![2.0]])),
            norm_stats: None,
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn validate_rejects_out_of_range_index() {
        let inst = TaskInstance {
            id: "x".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::EventLocalisation,
            prompt: "p".into(),
            input: Some(mk(vec![vec![1.0, 2.0, 3.0]])),
            target: Target::Indices(vec![3]),
            norm_stats: None,
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let inst = TaskInstance {
            id: "same".into(),
            discipline: "d".into(),
            task_id: "T1".into(),
            task_type: TaskType::Classification,
            prompt: "p".into(),
            input: Some(mk(vec![vec![1.0, 2.0]])),
            target: Target::TextLabel("a".into()),
            norm_stats: None,
        };
        assert!(matches!(
            Dataset::from_instances(vec![inst.clone(), inst]),
            Err(DatasetError::DuplicateId(_))
        ));
    }
}
