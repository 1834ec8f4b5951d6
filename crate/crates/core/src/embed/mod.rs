//! Task-embedding initializers.
//!
//! The learned initializer trains a pre-embedding model on a handful of
//! seed tasks: a shared trunk followed by one linear head per seed task,
//! head `s` approximating `r_s(x) = log q_s(x) / p(x)` against the full
//! population. Any task is then embedded as the empirical mean of the basis
//! response `r(x)` over its own samples, which needs forward passes only.
//!
//! The alternatives (random, label histogram, active-label indicator and
//! GMM pseudo-label histogram) serve as baselines.

mod gmm;

pub use gmm::{pseudo_label_embedding, DiagonalGmm, GmmConfig};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clr::{
    fit, random_table, split_collection, validation_batch, Contrastive, ContrastiveBatch,
    PairSampler,
};
use crate::error::{Error, Result};
use crate::nn::{rows_to_matrix, Activation, Dense, DenseNet, Optimizer, Tape};
use crate::rng::{fork, stream, Rng64};
use crate::train::{LossTrace, TrainConfig};
use crate::types::{FeatureVector, TaskCollection, TaskDataset, TaskEmbedding};

/// Uniform sample of `m0` distinct task ids, without replacement.
pub fn select_seed_tasks<R: Rng + ?Sized>(
    c: &TaskCollection,
    m0: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let m = c.num_tasks();
    if m0 == 0 || m0 > m {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m0} seed tasks out of {m}"
        )));
    }
    Ok(sample_indices(rng, m, m0).into_vec())
}

/// Anything that maps a batch of samples to basis responses `r(x)`,
/// one row per sample.
pub trait BasisFunctions {
    fn num_basis(&self) -> usize;
    fn basis_responses(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Shared trunk plus one linear head per seed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreEmbeddingModel {
    pub trunk: DenseNet,
    /// Single linear layer with one output per seed task.
    pub heads: DenseNet,
    /// Seed task ids, in head order.
    pub seeds: Vec<usize>,
    /// Head index of every task id in the training collection, if seeded.
    head_of: Vec<Option<usize>>,
}

impl PreEmbeddingModel {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        num_tasks: usize,
        seeds: &[usize],
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.hidden.is_empty() {
            return Err(Error::Config(
                "the pre-embedding trunk needs at least one hidden layer".into(),
            ));
        }
        let mut head_of = vec![None; num_tasks];
        for (h, &s) in seeds.iter().enumerate() {
            match head_of.get_mut(s) {
                Some(slot @ None) => *slot = Some(h),
                Some(Some(_)) => {
                    return Err(Error::InvalidArgument(format!("seed task {s} listed twice")))
                }
                None => {
                    return Err(Error::UnknownTask {
                        task_id: s,
                        num_tasks,
                    })
                }
            }
        }
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("no seed tasks".into()));
        }
        let mut specs = cfg.layer_specs(1);
        specs.pop();
        let trunk = DenseNet::mlp(feature_dim, &specs, rng)?;
        let width = *cfg.hidden.last().unwrap();
        let heads = DenseNet::new(vec![Dense::new(
            width,
            seeds.len(),
            Activation::Identity,
            0.0,
            rng,
        )])?;
        Ok(PreEmbeddingModel {
            trunk,
            heads,
            seeds: seeds.to_vec(),
            head_of,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_heads(&self) -> usize {
        self.seeds.len()
    }

    fn head(&self, task_id: usize) -> Result<usize> {
        self.head_of
            .get(task_id)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} is not a seed task")))
    }

    /// Basis response `r(x)` of one sample.
    pub fn respond(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.basis_responses(view)?.into_raw_vec_and_offset().0)
    }
}

impl BasisFunctions for PreEmbeddingModel {
    fn num_basis(&self) -> usize {
        self.num_heads()
    }

    fn basis_responses(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.trunk.predict(xs)?;
        self.heads.predict(h.view())
    }
}

impl Contrastive for PreEmbeddingModel {
    type Tape = (Tape, Tape);

    fn forward_batch(
        &self,
        batch: &ContrastiveBatch<'_>,
        rng: Option<&mut Rng64>,
    ) -> Result<(Vec<f64>, Self::Tape)> {
        let rows: Vec<&FeatureVector> = batch
            .positives
            .iter()
            .chain(&batch.negatives)
            .copied()
            .collect();
        let input = rows_to_matrix(&rows, self.feature_dim());
        let (hidden, trunk_tape) = match rng {
            Some(rng) => self.trunk.forward_train(input.view(), rng)?,
            None => self.trunk.forward(input.view())?,
        };
        let (out, head_tape) = self.heads.forward(hidden.view())?;
        let n = batch.len();
        let mut scores = Vec::with_capacity(2 * n);
        for pass in 0..2 {
            for (i, &t) in batch.task_ids.iter().enumerate() {
                scores.push(out[[pass * n + i, self.head(t)?]]);
            }
        }
        Ok((scores, (trunk_tape, head_tape)))
    }

    fn update(
        &mut self,
        (trunk_tape, head_tape): Self::Tape,
        batch: &ContrastiveBatch<'_>,
        grad: &[f64],
        opt: &mut Optimizer,
    ) -> Result<()> {
        let n = batch.len();
        let mut upstream = Array2::zeros((2 * n, self.num_heads()));
        for (i, &t) in batch.task_ids.iter().enumerate() {
            let h = self.head(t)?;
            upstream[[i, h]] = grad[i];
            upstream[[n + i, h]] = grad[n + i];
        }
        let (head_grad, hidden_grad) = self.heads.backward(&head_tape, upstream.view())?;
        let (trunk_grad, _) = self.trunk.backward(&trunk_tape, hidden_grad.view())?;
        let mut grads = trunk_grad.slices();
        grads.extend(head_grad.slices());
        let trunk_layers = self.trunk.layers().len();
        let mut params = self.trunk.param_slices_mut();
        params.extend(self.heads.param_slices_mut());
        opt.step_named(&mut params, &grads, |i| {
            let kind = if i % 2 == 0 { "weights" } else { "bias" };
            if i / 2 < trunk_layers {
                format!("trunk layer {} {kind}", i / 2)
            } else {
                format!("head {kind}")
            }
        })
    }
}

/// Trains trunk and heads contrastively: positives from the seed tasks
/// (weights renormalized), negatives from the whole population.
pub fn train_pre_embedding<R: Rng + ?Sized>(
    c: &TaskCollection,
    seeds: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PreEmbeddingModel, LossTrace)> {
    c.validate()?;
    cfg.validate()?;
    let mut rng = fork(rng, stream::PRE_EMBEDDING);
    let model = PreEmbeddingModel::new(
        c.feature_dim(),
        c.num_tasks(),
        seeds,
        cfg,
        &mut fork(&mut rng, stream::INIT),
    )?;
    let (train, val) = split_collection(c, cfg.val_fraction, &mut fork(&mut rng, stream::SPLIT));
    let sampler = PairSampler::restricted(&train, seeds)?;
    let val_batch = validation_batch(&val, seeds, &mut fork(&mut rng, stream::VALIDATION));
    fit(model, &sampler, val_batch.as_ref(), cfg, &mut rng)
}

/// Mean basis response over the task's samples.
pub fn learned_embedding<B: BasisFunctions + ?Sized>(
    model: &B,
    task: &TaskDataset,
) -> Result<TaskEmbedding> {
    Ok(TaskEmbedding::new(
        task.task_id,
        mean_response(model, &task.samples, task.task_id)?,
    ))
}

fn mean_response<B: BasisFunctions + ?Sized>(
    model: &B,
    samples: &[FeatureVector],
    task_id: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyTask { task_id });
    }
    let x = rows_to_matrix(samples, samples[0].dim());
    let r = model.basis_responses(x.view())?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { task_id, sample: 0 });
    }
    Ok(r.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

/// Frozen pre-embedding model plus the optional map into the ratio
/// model's embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedEncoder {
    pub model: PreEmbeddingModel,
    /// Shape `(E, M0)`; `None` when `E = M0`.
    pub projection: Option<Array2<f64>>,
}

impl LearnedEncoder {
    pub fn output_dim(&self) -> usize {
        self.projection
            .as_ref()
            .map_or(self.model.num_heads(), |p| p.nrows())
    }

    /// Embedding of a task given only its samples.
    pub fn encode(&self, samples: &[FeatureVector]) -> Result<Vec<f64>> {
        let raw = mean_response(&self.model, samples, 0)?;
        Ok(match &self.projection {
            Some(p) => p.dot(&ndarray::Array1::from(raw)).to_vec(),
            None => raw,
        })
    }

    /// One row per task of `c`.
    pub fn encode_collection(&self, c: &TaskCollection) -> Result<Array2<f64>> {
        let mut table = Array2::zeros((c.num_tasks(), self.output_dim()));
        for (t, task) in c.tasks().iter().enumerate() {
            let e = self.encode(&task.samples).map_err(|e| match e {
                Error::EmptyTask { .. } => Error::EmptyTask { task_id: t },
                other => other,
            })?;
            table.row_mut(t).assign(&ndarray::Array1::from(e));
        }
        Ok(table)
    }
}

/// Seeded Gaussian map of shape `(target, source)` with entries of
/// variance `1/source`, so projected norms match in expectation.
pub fn random_projection<R: Rng + ?Sized>(source: usize, target: usize, rng: &mut R) -> Array2<f64> {
    let scale = 1.0 / (source as f64).sqrt();
    Array2::from_shape_fn((target, source), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Brings a `(tasks, width)` table to `target` columns. Returns the table
/// unchanged (and no map) when the widths already agree.
pub fn fit_width<R: Rng + ?Sized>(
    table: Array2<f64>,
    target: usize,
    rng: &mut R,
) -> (Array2<f64>, Option<Array2<f64>>) {
    if table.ncols() == target {
        return (table, None);
    }
    let p = random_projection(table.ncols(), target, rng);
    (table.dot(&p.t()), Some(p))
}

/// Normalized label frequencies of the task's samples.
pub fn histogram_embedding(task: &TaskDataset, label_arity: usize) -> Result<TaskEmbedding> {
    let labels = task.labels.as_ref().ok_or(Error::MissingLabels {
        task_id: task.task_id,
    })?;
    if labels.is_empty() {
        return Err(Error::EmptyTask {
            task_id: task.task_id,
        });
    }
    let mut hist = vec![0.0; label_arity];
    for &l in labels {
        *hist.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
            label: l,
            arity: label_arity,
        })? += 1.0;
    }
    let n = labels.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(TaskEmbedding::new(task.task_id, hist))
}

/// Binary indicator of the task's active categories.
pub fn label_embedding(task_id: usize, active: &[u32], label_arity: usize) -> Result<TaskEmbedding> {
    if active.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "task {task_id} has no active category"
        )));
    }
    let mut v = vec![0.0; label_arity];
    for &a in active {
        *v.get_mut(a as usize).ok_or(Error::LabelOutOfRange {
            label: a,
            arity: label_arity,
        })? = 1.0;
    }
    Ok(TaskEmbedding::new(task_id, v))
}

/// I.i.d. standard-normal table of shape `(m, e_dim)`.
pub fn random_embedding<R: Rng + ?Sized>(m: usize, e_dim: usize, rng: &mut R) -> Array2<f64> {
    random_table(m, e_dim, rng)
}

/// Stacks embeddings into a `(tasks, E)` table.
pub fn embeddings_to_table(embs: &[TaskEmbedding]) -> Result<Array2<f64>> {
    let e = embs.first().map_or(0, TaskEmbedding::dim);
    let mut table = Array2::zeros((embs.len(), e));
    for (i, emb) in embs.iter().enumerate() {
        if emb.dim() != e {
            return Err(Error::Shape {
                context: "embedding width",
                expected: e,
                found: emb.dim(),
            });
        }
        table.row_mut(i).assign(&ndarray::ArrayView1::from(&emb.vector));
    }
    Ok(table)
}

pub fn table_to_embeddings(table: &Array2<f64>) -> Vec<TaskEmbedding> {
    table
        .outer_iter()
        .enumerate()
        .map(|(t, row)| TaskEmbedding::new(t, row.to_vec()))
        .collect()
}

/// Pairwise cosine similarities.
pub fn similarity_matrix(embs: &[TaskEmbedding]) -> Result<Array2<f64>> {
    let table = embeddings_to_table(embs)?;
    let norms: Vec<f64> = table
        .outer_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(embs[i].task_id));
    }
    let n = embs.len();
    let gram = table.dot(&table.t());
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else {
            (gram[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    }))
}
