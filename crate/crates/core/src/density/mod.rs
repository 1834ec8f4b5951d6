//! Density-estimation baselines scored by log-density.
//!
//! Three models share one maximum-likelihood trainer: a conditional
//! diagonal Gaussian whose mean and log-variance are predicted from a task
//! embedding, a per-task Gaussian fitted in closed form, and a conditional
//! masked affine autoregressive flow.

mod flow;
mod gaussian;

pub use flow::{flow_forward, flow_inverse, flow_logpdf, AffineFlow, FlowBlock, FlowConfig};
pub use gaussian::{gaussian_logpdf, ConditionalGaussian, SeparateGaussian, VARIANCE_FLOOR};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clr::{split_collection, PairSampler};
use crate::error::{Error, Result};
use crate::nn::Optimizer;
use crate::rng::{fork, stream, Rng64};
use crate::train::{BestTracker, LossTrace, TrainConfig};
use crate::types::{FeatureVector, TaskCollection};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `(task, sample)` pairs for likelihood training.
#[derive(Debug, Clone)]
pub(crate) struct NllBatch<'a> {
    pub tasks: Vec<usize>,
    pub xs: Vec<&'a FeatureVector>,
}

/// A model trained by minimizing mean negative log-likelihood.
pub(crate) trait NllModel: Clone {
    type Tape;

    /// Per-sample negative log-likelihoods.
    fn nll_forward(&self, batch: &NllBatch<'_>) -> Result<(Vec<f64>, Self::Tape)>;

    /// Back-propagates the batch-mean NLL and takes an optimizer step.
    fn nll_step(&mut self, tape: Self::Tape, batch: &NllBatch<'_>, opt: &mut Optimizer) -> Result<()>;

    /// Data-dependent initialization from the first training batch.
    fn data_init(&mut self, _batch: &NllBatch<'_>) -> Result<()> {
        Ok(())
    }

    fn mean_nll(&self, batch: &NllBatch<'_>) -> Result<f64> {
        let (nll, _) = self.nll_forward(batch)?;
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }
}

fn draw<'a>(sampler: &PairSampler<'a>, n: usize, rng: &mut Rng64) -> NllBatch<'a> {
    let b = sampler.sample(n, rng);
    NllBatch {
        tasks: b.task_ids,
        xs: b.positives,
    }
}

fn every_sample(c: &TaskCollection) -> NllBatch<'_> {
    let (tasks, xs) = c.population().unzip();
    NllBatch { tasks, xs }
}

/// Cap on the fixed batch used to report train loss at epoch 0.
const PROBE_BATCH: usize = 4096;

/// Minimizes mean NLL over `(task, sample)` pairs drawn with `t ∝ m_t`;
/// returns the parameters with the best held-out NLL.
pub(crate) fn fit_nll<M: NllModel>(
    mut model: M,
    c: &TaskCollection,
    cfg: &TrainConfig,
    rng: &mut Rng64,
) -> Result<(M, LossTrace)> {
    c.validate()?;
    cfg.validate()?;
    let (train, val) = split_collection(c, cfg.val_fraction, &mut fork(rng, stream::SPLIT));
    let sampler = PairSampler::new(&train)?;
    let mut batch_rng = fork(rng, stream::BATCHES);
    let mut probe_rng = fork(rng, stream::VALIDATION);
    let mut opt = cfg.optimizer()?;

    let init_batch = draw(&sampler, cfg.batch_size.max(2), &mut batch_rng);
    model.data_init(&init_batch)?;

    let probe = draw(&sampler, train.population_len().clamp(1, PROBE_BATCH), &mut probe_rng);
    let val_batch = every_sample(&val);
    let selection = if val_batch.xs.is_empty() { &probe } else { &val_batch };

    let mut trace = LossTrace::default();
    let mut tracker = BestTracker::new(cfg.patience);
    let v0 = model.mean_nll(selection)?;
    trace.push(0, model.mean_nll(&probe)?, v0);
    tracker.observe(0, v0, &model);

    let batches = cfg.batches_per_epoch(train.population_len());
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let batch = draw(&sampler, cfg.batch_size, &mut batch_rng);
            let (nll, tape) = model.nll_forward(&batch)?;
            let loss = nll.iter().sum::<f64>() / nll.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.nll_step(tape, &batch, &mut opt)?;
            total += loss;
        }
        let val_loss = model.mean_nll(selection)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        trace.push(epoch, total / batches as f64, val_loss);
        if tracker.observe(epoch, val_loss, &model) {
            break;
        }
    }
    let (best, best_epoch) = tracker.finish();
    trace.best_epoch = best_epoch;
    Ok((best, trace))
}

/// Any trained density baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DensityModel {
    Gaussian(ConditionalGaussian),
    Separate(SeparateGaussian),
    Flow(AffineFlow),
}

impl DensityModel {
    pub fn num_tasks(&self) -> usize {
        match self {
            DensityModel::Gaussian(m) => m.num_tasks(),
            DensityModel::Separate(m) => m.means.nrows(),
            DensityModel::Flow(m) => m.num_tasks(),
        }
    }

    /// Log-density of each sample under task `task_id`.
    pub fn score_many<S: AsRef<[f64]>>(&self, task_id: usize, xs: &[S]) -> Result<Vec<f64>> {
        if task_id >= self.num_tasks() {
            return Err(Error::UnknownTask {
                task_id,
                num_tasks: self.num_tasks(),
            });
        }
        match self {
            DensityModel::Gaussian(m) => m.logpdf_many(task_id, xs),
            DensityModel::Separate(m) => m.logpdf_many(task_id, xs),
            DensityModel::Flow(m) => m.logpdf_many(task_id, xs),
        }
    }
}

/// Log-density of `x` under task `task_id`: the anomaly-ranking statistic.
pub fn density_score(model: &DensityModel, task_id: usize, x: &[f64]) -> Result<f64> {
    Ok(model.score_many(task_id, &[x])?[0])
}

/// Trains a conditional Gaussian whose embedding table starts at `embeddings`.
pub fn train_gaussian<R: Rng + ?Sized>(
    c: &TaskCollection,
    embeddings: ndarray::Array2<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ConditionalGaussian, LossTrace)> {
    if embeddings.nrows() != c.num_tasks() {
        return Err(Error::Shape {
            context: "embedding rows",
            expected: c.num_tasks(),
            found: embeddings.nrows(),
        });
    }
    let mut rng = fork(rng, 0);
    let model = ConditionalGaussian::new(
        c.feature_dim(),
        embeddings,
        &cfg.hidden,
        &mut fork(&mut rng, stream::INIT),
    )?;
    fit_nll(model, c, cfg, &mut rng)
}

/// Trains a conditional flow with its own per-task conditioning vectors.
pub fn train_flow<R: Rng + ?Sized>(
    c: &TaskCollection,
    flow_cfg: &FlowConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(AffineFlow, LossTrace)> {
    let mut rng = fork(rng, 0);
    let model = AffineFlow::new(
        c.feature_dim(),
        c.num_tasks(),
        flow_cfg,
        &mut fork(&mut rng, stream::INIT),
        &mut fork(&mut rng, stream::PRIORS),
    )?;
    fit_nll(model, c, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::types::TaskDataset;
    use rand_distr::StandardNormal;

    fn normal_task(n: usize, d: usize, seed: u64) -> TaskCollection {
        let mut rng = seeded(seed, 0);
        let samples = (0..n)
            .map(|_| FeatureVector::new((0..d).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        TaskCollection::from_tasks(vec![TaskDataset::new(0, samples)])
    }

    #[test]
    fn gaussian_recovers_standard_normal() {
        // MLE on 10k samples: sd of the mean estimate is 0.01, of the
        // variance estimate ~0.014.
        let c = normal_task(10_000, 2, 0);
        let cfg = TrainConfig {
            epochs: 30,
            lr: 1e-2,
            hidden: vec![8],
            dropout: vec![0.0],
            patience: None,
            ..TrainConfig::default()
        };
        let (m, trace) =
            train_gaussian(&c, ndarray::Array2::ones((1, 2)), &cfg, &mut seeded(1, 0)).unwrap();
        let (mu, var) = m.moments(m.embeddings.row(0).as_slice().unwrap()).unwrap();
        for i in 0..2 {
            assert!(mu[i].abs() < 0.05, "{mu:?}");
            assert!((var[i] - 1.0).abs() < 0.1, "{var:?}");
        }
        let first: Vec<f64> = trace.records.iter().take(4).map(|r| r.val_loss).collect();
        for w in first.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{first:?}");
        }
    }

    #[test]
    fn flow_reaches_gaussian_entropy() {
        let d = 2;
        let c = normal_task(4000, d, 2);
        let cfg = TrainConfig {
            epochs: 20,
            lr: 3e-3,
            patience: None,
            ..TrainConfig::default()
        };
        let flow_cfg = FlowConfig {
            blocks: 2,
            hidden: 16,
            ..FlowConfig::default()
        };
        let (_, trace) = train_flow(&c, &flow_cfg, &cfg, &mut seeded(3, 0)).unwrap();
        let optimum = d as f64 / 2.0 * (1.0 + LN_2PI);
        let best = trace.best_val_loss().unwrap();
        assert!((best - optimum).abs() < 0.2, "{best} vs {optimum}");
    }

    #[test]
    fn unknown_task_rejected() {
        let g = SeparateGaussian::fit(&normal_task(10, 1, 0)).unwrap();
        let m = DensityModel::Separate(g);
        assert!(matches!(
            density_score(&m, 1, &[0.0]),
            Err(Error::UnknownTask { .. })
        ));
    }
}
