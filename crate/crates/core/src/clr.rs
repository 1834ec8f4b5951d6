//! Conditional likelihood-ratio estimation.
//!
//! A shared network `f(x, e_t)` is trained by logistic regression to tell
//! samples of task `t` (positives) from samples of the population mixture
//! `p(x) = Σ_t m_t q_t(x)` (negatives). At the optimum
//! `f(x, e_t) = log q_t(x) / p(x)` on the support of `q_t`, which serves as
//! the anomaly score: higher means more nominal for task `t`.
//!
//! Batches follow the usual recipe: draw `t_i ∝ m_t`, draw `x_i` uniformly
//! from task `t_i`, and draw the negative `x̃_i` from the population by
//! again drawing a task `∝ m` and a uniform sample from it. Negatives are
//! never filtered against `t_i`, so `p` keeps the `q_t` component.

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rows_to_matrix, DenseNet, Optimizer};
use crate::rng::{fork, stream, Rng64};
use crate::train::{sigmoid, softplus, BestTracker, LossTrace, TrainConfig, DEFAULT_EMBED_DIM};
use crate::types::{FeatureVector, TaskCollection, TaskDataset, TaskEmbedding};

/// `N` contrastive triples `(t_i, x_i, x̃_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<'a> {
    pub task_ids: Vec<usize>,
    pub positives: Vec<&'a FeatureVector>,
    pub negatives: Vec<&'a FeatureVector>,
}

impl ContrastiveBatch<'_> {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

/// Draws contrastive batches from a task collection.
///
/// Positive tasks may be restricted to a subset (the seed tasks of the
/// pre-embedding model); negatives always come from the full population.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    tasks: &'a [TaskDataset],
    positive_tasks: Vec<usize>,
    positive_index: WeightedIndex<f64>,
    negative_tasks: Vec<usize>,
    negative_index: WeightedIndex<f64>,
}

impl<'a> PairSampler<'a> {
    pub fn new(c: &'a TaskCollection) -> Result<Self> {
        let all: Vec<usize> = (0..c.num_tasks()).collect();
        Self::restricted(c, &all)
    }

    /// Positives drawn only from `positive_tasks`, with weights renormalized.
    pub fn restricted(c: &'a TaskCollection, positive_tasks: &[usize]) -> Result<Self> {
        let tasks = c.tasks();
        let usable = |t: &usize| tasks.get(*t).is_some_and(|d| !d.is_empty() && d.weight > 0.0);
        let positive_tasks: Vec<usize> = positive_tasks.iter().copied().filter(usable).collect();
        let negative_tasks: Vec<usize> = (0..tasks.len()).filter(usable).collect();
        if positive_tasks.is_empty() || negative_tasks.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let index = |ids: &[usize]| {
            WeightedIndex::new(ids.iter().map(|&t| tasks[t].weight))
                .map_err(|e| Error::InvalidArgument(format!("task weights: {e}")))
        };
        Ok(PairSampler {
            tasks,
            positive_index: index(&positive_tasks)?,
            positive_tasks,
            negative_index: index(&negative_tasks)?,
            negative_tasks,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ContrastiveBatch<'a> {
        let mut batch = ContrastiveBatch {
            task_ids: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            negatives: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let t = self.positive_tasks[self.positive_index.sample(rng)];
            let samples = &self.tasks[t].samples;
            batch.task_ids.push(t);
            batch.positives.push(&samples[rng.random_range(0..samples.len())]);
            batch.negatives.push(self.negative(rng));
        }
        batch
    }

    fn negative<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a FeatureVector {
        let t = self.negative_tasks[self.negative_index.sample(rng)];
        let samples = &self.tasks[t].samples;
        &samples[rng.random_range(0..samples.len())]
    }

    /// Every positive-task sample once, each paired with a fresh negative.
    pub fn exhaustive<R: Rng + ?Sized>(&self, rng: &mut R) -> ContrastiveBatch<'a> {
        let mut batch = ContrastiveBatch {
            task_ids: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for &t in &self.positive_tasks {
            for x in &self.tasks[t].samples {
                batch.task_ids.push(t);
                batch.positives.push(x);
                batch.negatives.push(self.negative(rng));
            }
        }
        batch
    }

    pub fn positive_count(&self) -> usize {
        self.positive_tasks
            .iter()
            .map(|&t| self.tasks[t].len())
            .sum()
    }
}

/// Draws `n` contrastive triples from the collection.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    c: &'a TaskCollection,
    n: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch<'a>> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(PairSampler::new(c)?.sample(n, rng))
}

/// Mean logistic loss `(1/N) Σ [log(1+e^{-f(x_i)}) + log(1+e^{f(x̃_i)})]`.
pub fn logistic_loss(scores_pos: &[f64], scores_neg: &[f64]) -> f64 {
    assert_eq!(scores_pos.len(), scores_neg.len(), "equal pair counts");
    let n = scores_pos.len() as f64;
    let total: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(&p, &q)| softplus(-p) + softplus(q))
        .sum();
    total / n
}

/// Loss and its gradient w.r.t. the stacked scores `[pos..., neg...]`.
pub(crate) fn logistic_loss_grad(scores: &[f64]) -> (f64, Vec<f64>) {
    let n = scores.len() / 2;
    let (pos, neg) = scores.split_at(n);
    let loss = logistic_loss(pos, neg);
    let inv = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(scores.len());
    grad.extend(pos.iter().map(|&s| -sigmoid(-s) * inv));
    grad.extend(neg.iter().map(|&s| sigmoid(s) * inv));
    (loss, grad)
}

/// A model trainable by the contrastive logistic objective.
pub(crate) trait Contrastive: Clone {
    type Tape;

    /// Scores `[positives..., negatives...]`; dropout is live iff `rng` is given.
    fn forward_batch(
        &self,
        batch: &ContrastiveBatch<'_>,
        rng: Option<&mut Rng64>,
    ) -> Result<(Vec<f64>, Self::Tape)>;

    /// Back-propagates `grad` (one entry per score) and takes an optimizer step.
    fn update(
        &mut self,
        tape: Self::Tape,
        batch: &ContrastiveBatch<'_>,
        grad: &[f64],
        opt: &mut Optimizer,
    ) -> Result<()>;

    fn eval_loss(&self, batch: &ContrastiveBatch<'_>) -> Result<f64> {
        let (scores, _) = self.forward_batch(batch, None)?;
        let (pos, neg) = scores.split_at(batch.len());
        Ok(logistic_loss(pos, neg))
    }
}

/// Where training batches come from.
pub(crate) trait BatchSource<'a> {
    fn draw(&self, n: usize, rng: &mut Rng64) -> ContrastiveBatch<'a>;
    fn train_size(&self) -> usize;
}

impl<'a> BatchSource<'a> for PairSampler<'a> {
    fn draw(&self, n: usize, rng: &mut Rng64) -> ContrastiveBatch<'a> {
        self.sample(n, rng)
    }

    fn train_size(&self) -> usize {
        self.positive_count()
    }
}

/// Single-task source: positives from `q`, negatives from `p`.
pub(crate) struct TwoSets<'a> {
    pub positives: &'a [FeatureVector],
    pub negatives: &'a [FeatureVector],
}

impl<'a> BatchSource<'a> for TwoSets<'a> {
    fn draw(&self, n: usize, rng: &mut Rng64) -> ContrastiveBatch<'a> {
        ContrastiveBatch {
            task_ids: vec![0; n],
            positives: (0..n)
                .map(|_| &self.positives[rng.random_range(0..self.positives.len())])
                .collect(),
            negatives: (0..n)
                .map(|_| &self.negatives[rng.random_range(0..self.negatives.len())])
                .collect(),
        }
    }

    fn train_size(&self) -> usize {
        self.positives.len()
    }
}

/// Cap on the fixed training batch used to report the epoch-0 train loss.
const PROBE_BATCH: usize = 4096;

/// Mini-batch training with best-validation checkpoint selection.
pub(crate) fn fit<'a, M: Contrastive>(
    mut model: M,
    source: &impl BatchSource<'a>,
    val: Option<&ContrastiveBatch<'_>>,
    cfg: &TrainConfig,
    rng: &mut Rng64,
) -> Result<(M, LossTrace)> {
    let mut opt = cfg.optimizer()?;
    let mut batch_rng = fork(rng, stream::BATCHES);
    let mut dropout_rng = fork(rng, stream::DROPOUT);
    let mut probe_rng = fork(rng, stream::VALIDATION);
    let probe = source.draw(source.train_size().clamp(1, PROBE_BATCH), &mut probe_rng);
    let selection = val.filter(|v| !v.is_empty()).unwrap_or(&probe);

    let mut trace = LossTrace::default();
    let mut tracker = BestTracker::new(cfg.patience);
    let val0 = model.eval_loss(selection)?;
    trace.push(0, model.eval_loss(&probe)?, val0);
    tracker.observe(0, val0, &model);

    let batches = cfg.batches_per_epoch(source.train_size());
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let batch = source.draw(cfg.batch_size, &mut batch_rng);
            let (scores, tape) = model.forward_batch(&batch, Some(&mut dropout_rng))?;
            let (loss, grad) = logistic_loss_grad(&scores);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.update(tape, &batch, &grad, &mut opt)?;
            total += loss;
        }
        let val_loss = model.eval_loss(selection)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        trace.push(epoch, total / batches as f64, val_loss);
        log::debug!("epoch {epoch}: train {:.5} val {val_loss:.5}", total / batches as f64);
        if tracker.observe(epoch, val_loss, &model) {
            break;
        }
    }
    let (best, best_epoch) = tracker.finish();
    trace.best_epoch = best_epoch;
    Ok((best, trace))
}

/// Holds out `val_fraction` of every task's samples (at least one sample
/// stays in training). Both halves keep the original task weights.
pub fn split_collection<R: Rng + ?Sized>(
    c: &TaskCollection,
    val_fraction: f64,
    rng: &mut R,
) -> (TaskCollection, TaskCollection) {
    let mut train = Vec::with_capacity(c.num_tasks());
    let mut val = Vec::with_capacity(c.num_tasks());
    for task in c.tasks() {
        let n = task.len();
        let n_val = ((n as f64 * val_fraction).floor() as usize).min(n.saturating_sub(1));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let (v, t) = idx.split_at(n_val);
        let pick = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            TaskDataset {
                task_id: task.task_id,
                samples: ids.iter().map(|&i| task.samples[i].clone()).collect(),
                weight: task.weight,
                labels: task
                    .labels
                    .as_ref()
                    .map(|l| ids.iter().map(|&i| l[i]).collect()),
            }
        };
        train.push(pick(t));
        val.push(pick(v));
    }
    (
        TaskCollection::with_weights(train),
        TaskCollection::with_weights(val),
    )
}

/// Fixed validation pairs: every held-out positive with one population negative.
pub(crate) fn validation_batch<'a>(
    val: &'a TaskCollection,
    positive_tasks: &[usize],
    rng: &mut Rng64,
) -> Option<ContrastiveBatch<'a>> {
    PairSampler::restricted(val, positive_tasks)
        .ok()
        .map(|s| s.exhaustive(rng))
}

/// Conditional scorer `f(x, e_t)`: the network sees `[x, e_t]` concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub net: DenseNet,
    /// One row per task.
    pub embeddings: Array2<f64>,
    pub feature_dim: usize,
}

impl RatioModel {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        embeddings: Array2<f64>,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input = feature_dim + embeddings.ncols();
        let net = DenseNet::mlp(input, &cfg.layer_specs(1), rng)?;
        Ok(RatioModel {
            net,
            embeddings,
            feature_dim,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn task_embedding(&self, task_id: usize) -> Result<TaskEmbedding> {
        self.check_task(task_id)?;
        Ok(TaskEmbedding::new(
            task_id,
            self.embeddings.row(task_id).to_vec(),
        ))
    }

    fn check_task(&self, task_id: usize) -> Result<()> {
        if task_id >= self.num_tasks() {
            return Err(Error::UnknownTask {
                task_id,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(())
    }

    /// `f(x, e_t) ≈ log q_t(x) / p(x)`; dropout disabled.
    pub fn score(&self, task_id: usize, x: &[f64]) -> Result<f64> {
        self.check_task(task_id)?;
        Ok(self.score_with_embedding(self.embeddings.row(task_id).as_slice().unwrap(), &[x])?[0])
    }

    pub fn score_many<S: AsRef<[f64]>>(&self, task_id: usize, xs: &[S]) -> Result<Vec<f64>> {
        self.check_task(task_id)?;
        let e = self.embeddings.row(task_id).to_vec();
        self.score_with_embedding(&e, xs)
    }

    /// Scores with an arbitrary embedding, e.g. one computed for an unseen task.
    pub fn score_with_embedding<S: AsRef<[f64]>>(&self, embedding: &[f64], xs: &[S]) -> Result<Vec<f64>> {
        if embedding.len() != self.embed_dim() {
            return Err(Error::Shape {
                context: "task embedding",
                expected: self.embed_dim(),
                found: embedding.len(),
            });
        }
        let d = self.feature_dim;
        let mut input = Array2::zeros((xs.len(), d + embedding.len()));
        for (mut row, x) in input.outer_iter_mut().zip(xs) {
            let x = x.as_ref();
            if x.len() != d {
                return Err(Error::Shape {
                    context: "feature vector",
                    expected: d,
                    found: x.len(),
                });
            }
            let row = row.as_slice_mut().unwrap();
            row[..d].copy_from_slice(x);
            row[d..].copy_from_slice(embedding);
        }
        Ok(self.net.predict(input.view())?.into_raw_vec_and_offset().0)
    }

    fn batch_input(&self, batch: &ContrastiveBatch<'_>) -> Array2<f64> {
        let n = batch.len();
        let d = self.feature_dim;
        let mut input = Array2::zeros((2 * n, d + self.embed_dim()));
        for (i, &t) in batch.task_ids.iter().enumerate() {
            let e = self.embeddings.row(t);
            for (r, x) in [(i, batch.positives[i]), (n + i, batch.negatives[i])] {
                let mut row = input.row_mut(r);
                let row = row.as_slice_mut().unwrap();
                row[..d].copy_from_slice(x);
                row[d..].copy_from_slice(e.as_slice().unwrap());
            }
        }
        input
    }
}

impl Contrastive for RatioModel {
    type Tape = crate::nn::Tape;

    fn forward_batch(
        &self,
        batch: &ContrastiveBatch<'_>,
        rng: Option<&mut Rng64>,
    ) -> Result<(Vec<f64>, Self::Tape)> {
        let input = self.batch_input(batch);
        let (out, tape) = match rng {
            Some(rng) => self.net.forward_train(input.view(), rng)?,
            None => self.net.forward(input.view())?,
        };
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    fn update(
        &mut self,
        tape: Self::Tape,
        batch: &ContrastiveBatch<'_>,
        grad: &[f64],
        opt: &mut Optimizer,
    ) -> Result<()> {
        let upstream = ArrayView2::from_shape((grad.len(), 1), grad).expect("column");
        let (net_grad, input_grad) = self.net.backward(&tape, upstream)?;
        let n = batch.len();
        let d = self.feature_dim;
        let mut emb_grad = Array2::<f64>::zeros(self.embeddings.dim());
        for (i, &t) in batch.task_ids.iter().enumerate() {
            let mut dst = emb_grad.row_mut(t);
            for r in [i, n + i] {
                let src = input_grad.row(r);
                dst.zip_mut_with(&src.slice(ndarray::s![d..]), |a, &b| *a += b);
            }
        }
        let mut grads = net_grad.slices();
        grads.push(emb_grad.as_slice().unwrap());
        let layers = self.net.layers().len();
        let mut params = self.net.param_slices_mut();
        params.push(self.embeddings.as_slice_mut().unwrap());
        opt.step_named(&mut params, &grads, |i| {
            if i == 2 * layers {
                "embedding table".to_string()
            } else {
                format!("layer {} {}", i / 2, if i % 2 == 0 { "weights" } else { "bias" })
            }
        })
    }
}

/// Standard-normal embedding table of shape `(tasks, dim)`.
pub fn random_table<R: Rng + ?Sized>(tasks: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((tasks, dim), |_| rng.sample(StandardNormal))
}

/// Trains the conditional scorer and the embedding table jointly.
///
/// `init` seeds the embedding table (one row per task); without it the
/// table is drawn from a standard normal with `cfg.embed_dim` columns.
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn estimate_clr<R: Rng + ?Sized>(
    c: &TaskCollection,
    init: Option<&Array2<f64>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(RatioModel, LossTrace)> {
    c.validate()?;
    cfg.validate()?;
    let mut rng = fork(rng, 0);
    let m = c.num_tasks();
    let table = match init {
        Some(t) => {
            if t.nrows() != m {
                return Err(Error::Shape {
                    context: "initial embedding rows",
                    expected: m,
                    found: t.nrows(),
                });
            }
            if let Some(e) = cfg.embed_dim.filter(|&e| e != t.ncols()) {
                return Err(Error::Config(format!(
                    "initial embeddings have width {} but embed_dim is {e}",
                    t.ncols()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite initial embedding".into()));
            }
            t.clone()
        }
        None => {
            let dim = cfg.embed_dim.unwrap_or(DEFAULT_EMBED_DIM);
            random_table(m, dim, &mut fork(&mut rng, stream::EMBEDDING))
        }
    };
    let model = RatioModel::new(
        c.feature_dim(),
        table,
        cfg,
        &mut fork(&mut rng, stream::INIT),
    )?;

    let (train, val) = split_collection(c, cfg.val_fraction, &mut fork(&mut rng, stream::SPLIT));
    let sampler = PairSampler::new(&train)?;
    let all: Vec<usize> = (0..m).collect();
    let val_batch = validation_batch(&val, &all, &mut fork(&mut rng, stream::VALIDATION));
    fit(model, &sampler, val_batch.as_ref(), cfg, &mut rng)
}

/// Unconditional scorer for a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskScorer {
    pub net: DenseNet,
}

impl SingleTaskScorer {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.predict_one(x)?[0])
    }

    pub fn score_many<S: AsRef<[f64]>>(&self, xs: &[S]) -> Result<Vec<f64>> {
        let m = rows_to_matrix(xs, self.net.input_dim());
        Ok(self.net.predict(m.view())?.into_raw_vec_and_offset().0)
    }
}

impl Contrastive for SingleTaskScorer {
    type Tape = crate::nn::Tape;

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
        let input = rows_to_matrix(&rows, self.net.input_dim());
        let (out, tape) = match rng {
            Some(rng) => self.net.forward_train(input.view(), rng)?,
            None => self.net.forward(input.view())?,
        };
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    fn update(
        &mut self,
        tape: Self::Tape,
        _batch: &ContrastiveBatch<'_>,
        grad: &[f64],
        opt: &mut Optimizer,
    ) -> Result<()> {
        let upstream = ArrayView2::from_shape((grad.len(), 1), grad).expect("column");
        let (g, _) = self.net.backward(&tape, upstream)?;
        self.net.apply_gradients(opt, &g)
    }
}

/// Trains an unconditional classifier of `positives` (from `q`) against
/// `negatives` (from `p`); its logit approximates `log q(x)/p(x)`.
pub fn score_single_task<R: Rng + ?Sized>(
    positives: &[FeatureVector],
    negatives: &[FeatureVector],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(SingleTaskScorer, LossTrace)> {
    cfg.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let d = positives[0].dim();
    if let Some(bad) = positives.iter().chain(negatives).find(|x| x.dim() != d) {
        return Err(Error::Shape {
            context: "feature vector",
            expected: d,
            found: bad.dim(),
        });
    }
    let mut rng = fork(rng, 0);
    let net = DenseNet::mlp(d, &cfg.layer_specs(1), &mut fork(&mut rng, stream::INIT))?;

    let mut split_rng = fork(&mut rng, stream::SPLIT);
    let split = |xs: &[FeatureVector], rng: &mut Rng64| {
        let n_val = ((xs.len() as f64 * cfg.val_fraction).floor() as usize).min(xs.len() - 1);
        let mut v = xs.to_vec();
        v.shuffle(rng);
        let train = v.split_off(n_val);
        (train, v)
    };
    let (pos_train, pos_val) = split(positives, &mut split_rng);
    let (neg_train, neg_val) = split(negatives, &mut split_rng);
    let source = TwoSets {
        positives: &pos_train,
        negatives: &neg_train,
    };
    let val_batch = (!pos_val.is_empty() && !neg_val.is_empty()).then(|| {
        let n = pos_val.len().min(neg_val.len());
        ContrastiveBatch {
            task_ids: vec![0; n],
            positives: pos_val[..n].iter().collect(),
            negatives: neg_val[..n].iter().collect(),
        }
    });
    fit(
        SingleTaskScorer { net },
        &source,
        val_batch.as_ref(),
        cfg,
        &mut rng,
    )
}
