//! Domain types shared by every module.
//!
//! Everything here is plain data: immutable after construction and safe to
//! read from several threads at once.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ_t weight = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// A dense real feature row, one per user (or synthetic sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }
}

/// Nominal samples of one task together with its population weight `m`.
///
/// `labels` carry categorical ids for evaluation and for label-derived
/// initializers. Training and scoring code never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub samples: Vec<FeatureVector>,
    pub weight: f64,
    #[serde(default)]
    pub labels: Option<Vec<u32>>,
}

impl TaskDataset {
    pub fn new(task_id: usize, samples: Vec<FeatureVector>) -> Self {
        TaskDataset {
            task_id,
            samples,
            weight: 0.0,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// All tasks of one experiment plus the flattened population they form.
///
/// The population is the multiset of `(task_id, sample)` exposure events,
/// stored as indices into the task sample lists.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCollection {
    tasks: Vec<TaskDataset>,
    feature_dim: usize,
    population: Vec<(usize, usize)>,
}

impl TaskCollection {
    /// Builds a collection whose weights are the empirical sample shares.
    pub fn from_tasks(mut tasks: Vec<TaskDataset>) -> Self {
        let total: usize = tasks.iter().map(TaskDataset::len).sum();
        for task in &mut tasks {
            task.weight = if total == 0 {
                0.0
            } else {
                task.len() as f64 / total as f64
            };
        }
        Self::with_weights(tasks)
    }

    /// Keeps the weights already stored on each task.
    pub fn with_weights(mut tasks: Vec<TaskDataset>) -> Self {
        for (i, task) in tasks.iter_mut().enumerate() {
            task.task_id = i;
        }
        let feature_dim = tasks
            .iter()
            .flat_map(|t| t.samples.first())
            .map(FeatureVector::dim)
            .next()
            .unwrap_or(0);
        let population = tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| (0..task.len()).map(move |s| (t, s)))
            .collect();
        TaskCollection {
            tasks,
            feature_dim,
            population,
        }
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn task(&self, task_id: usize) -> Option<&TaskDataset> {
        self.tasks.get(task_id)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.weight).collect()
    }

    pub fn population_len(&self) -> usize {
        self.population.len()
    }

    /// Every exposure event as `(task_id, sample)`.
    pub fn population(&self) -> impl Iterator<Item = (usize, &FeatureVector)> + '_ {
        self.population
            .iter()
            .map(move |&(t, s)| (t, &self.tasks[t].samples[s]))
    }

    pub fn into_tasks(self) -> Vec<TaskDataset> {
        self.tasks
    }

    /// Checks every type invariant. Pure: repeated calls agree.
    pub fn validate(&self) -> Result<()> {
        validate_collection(self)
    }
}

/// Succeeds iff the collection satisfies every documented invariant.
pub fn validate_collection(c: &TaskCollection) -> Result<()> {
    if c.tasks.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let dim = c.feature_dim;
    for task in &c.tasks {
        if task.samples.is_empty() {
            return Err(Error::EmptyTask {
                task_id: task.task_id,
            });
        }
        for (i, x) in task.samples.iter().enumerate() {
            if x.dim() != dim || dim == 0 {
                return Err(Error::DimensionMismatch {
                    task_id: task.task_id,
                    expected: dim,
                    found: x.dim(),
                });
            }
            if !x.is_finite() {
                return Err(Error::NonFiniteValue {
                    task_id: task.task_id,
                    sample: i,
                });
            }
        }
        if !(task.weight > 0.0 && task.weight <= 1.0) {
            return Err(Error::InvalidWeight {
                task_id: task.task_id,
                weight: task.weight,
            });
        }
        if let Some(labels) = &task.labels {
            if labels.len() != task.samples.len() {
                return Err(Error::LabelCount {
                    task_id: task.task_id,
                    count: labels.len(),
                    samples: task.samples.len(),
                });
            }
        }
    }
    let sum: f64 = c.tasks.iter().map(|t| t.weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

/// Conditioning vector for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: usize,
    pub vector: Vec<f64>,
}

impl TaskEmbedding {
    pub fn new(task_id: usize, vector: Vec<f64>) -> Self {
        TaskEmbedding { task_id, vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Held-out samples shared by all tasks, each tagged with a category id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestPool {
    pub samples: Vec<FeatureVector>,
    pub categories: Vec<u32>,
}

impl TestPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Which pool samples count as nominal or anomalous for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTestSpec {
    pub nominal: Vec<u32>,
    pub anomalous: Vec<u32>,
    /// Restricts the task's test set to these pool indices; `None` = whole pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<usize>>,
}

/// Training collection plus the labelled test material for every task.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: TaskCollection,
    pub test: TestPool,
    pub task_tests: Vec<TaskTestSpec>,
    /// Active categories per task, known only for synthetic benchmarks.
    pub ground_truth_active: Option<Vec<Vec<u32>>>,
    /// Optional human-readable task names (item ids for ingested data).
    pub task_names: Option<Vec<String>>,
    pub meta: BTreeMap<String, String>,
}

impl Benchmark {
    pub fn num_tasks(&self) -> usize {
        self.train.num_tasks()
    }

    /// Splits the task's test set into (nominal, anomalous) samples.
    pub fn test_split(&self, task_id: usize) -> (Vec<&FeatureVector>, Vec<&FeatureVector>) {
        let spec = &self.task_tests[task_id];
        let mut nominal = Vec::new();
        let mut anomalous = Vec::new();
        let mut visit = |i: usize| {
            let cat = self.test.categories[i];
            if spec.nominal.contains(&cat) {
                nominal.push(&self.test.samples[i]);
            } else if spec.anomalous.contains(&cat) {
                anomalous.push(&self.test.samples[i]);
            }
        };
        match &spec.members {
            Some(members) => members.iter().copied().for_each(&mut visit),
            None => (0..self.test.len()).for_each(&mut visit),
        }
        (nominal, anomalous)
    }
}

/// Per-task and aggregate AUC with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub per_task_auc: BTreeMap<usize, f64>,
    pub mean_auc: f64,
    /// Tasks left out because their test set lacked one side.
    #[serde(default)]
    pub skipped_tasks: Vec<usize>,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(
        experiment: impl Into<String>,
        per_task_auc: BTreeMap<usize, f64>,
        skipped_tasks: Vec<usize>,
        config: BTreeMap<String, String>,
    ) -> Self {
        let mean_auc = if per_task_auc.is_empty() {
            f64::NAN
        } else {
            per_task_auc.values().sum::<f64>() / per_task_auc.len() as f64
        };
        let config_digest = config
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        EvalReport {
            experiment: experiment.into(),
            per_task_auc,
            mean_auc,
            skipped_tasks,
            config,
            config_digest,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn file_stem(&self, seed: u64) -> String {
        format!("report_{}_{}", self.experiment, seed)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment: {}", self.experiment)?;
        writeln!(f, "config:     {}", self.config_digest)?;
        writeln!(f, "{:>8}  {:>8}", "task", "auc")?;
        for (task, auc) in &self.per_task_auc {
            writeln!(f, "{task:>8}  {auc:>8.4}")?;
        }
        if !self.skipped_tasks.is_empty() {
            writeln!(f, "skipped:  {:?}", self.skipped_tasks)?;
        }
        write!(f, "{:>8}  {:>8.4}", "mean", self.mean_auc)
    }
}
