//! Training configuration, loss traces and best-checkpoint bookkeeping
//! shared by every trainable model.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, Optimizer, OptimizerKind};

/// Default embedding width for randomly initialized tables.
pub const DEFAULT_EMBED_DIM: usize = 16;

/// Key-value training settings, loadable from TOML.
///
/// Documented keys: `epochs`, `batch_size`, `lr`, `optimizer`
/// (`"adam"`/`"sgd"`), `embed_dim`, `val_fraction`, `seed`; plus
/// `patience` (epochs without validation improvement before stopping),
/// `hidden`/`dropout` (scorer layer widths and rates) and
/// `batches_per_epoch` (defaults to one pass over the training samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            embed_dim: None,
            val_fraction: 0.1,
            seed: 0,
            patience: Some(10),
            hidden: vec![32, 32, 16],
            dropout: vec![0.5, 0.5, 0.3],
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.hidden.len() != self.dropout.len() {
            return Err(Error::Config(format!(
                "{} hidden widths but {} dropout rates",
                self.hidden.len(),
                self.dropout.len()
            )));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Optimizer::new(self.optimizer, self.lr)?;
        Ok(())
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(self.optimizer, self.lr)
    }

    /// Hidden ReLU layers with dropout, followed by a linear output of `outputs` units.
    pub fn layer_specs(&self, outputs: usize) -> Vec<LayerSpec> {
        let mut specs: Vec<_> = self
            .hidden
            .iter()
            .zip(&self.dropout)
            .map(|(&w, &p)| LayerSpec::new(w, Activation::Relu, p))
            .collect();
        specs.push(LayerSpec::new(outputs, Activation::Identity, 0.0));
        specs
    }

    pub fn batches_per_epoch(&self, train_samples: usize) -> usize {
        self.batches_per_epoch
            .unwrap_or_else(|| train_samples.div_ceil(self.batch_size))
            .max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch losses. Epoch 0 holds the losses of the untrained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl LossTrace {
    pub fn push(&mut self, epoch: usize, train_loss: f64, val_loss: f64) {
        self.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss).unwrap();
        }
        out
    }

    pub fn initial_val_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.val_loss)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map(|r| r.val_loss)
    }
}

/// Tracks the best validation loss; the earliest epoch wins ties.
#[derive(Debug, Clone)]
pub(crate) struct BestTracker<M> {
    best: Option<(f64, usize, M)>,
    patience: Option<usize>,
    since_improvement: usize,
}

impl<M: Clone> BestTracker<M> {
    pub fn new(patience: Option<usize>) -> Self {
        BestTracker {
            best: None,
            patience,
            since_improvement: 0,
        }
    }

    /// Records an epoch; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, model: &M) -> bool {
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => val_loss < *best,
        };
        if improved {
            self.best = Some((val_loss, epoch, model.clone()));
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        matches!(self.patience, Some(p) if self.since_improvement >= p)
    }

    pub fn finish(self) -> (M, usize) {
        let (_, epoch, model) = self.best.expect("at least one epoch observed");
        (model, epoch)
    }
}

/// Numerically stable `log(1 + exp(z))`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            epochs: 7,
            embed_dim: Some(10),
            lr: 3e-4,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_keys_parse() {
        let cfg = TrainConfig::from_toml_str(
            "epochs = 3\nbatch_size = 64\nlr = 0.01\noptimizer = \"sgd\"\nembed_dim = 8\nval_fraction = 0.2\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.embed_dim, Some(8));
        assert_eq!(cfg.seed, 42);
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("lr = -1.0").is_err());
    }

    #[test]
    fn best_tracker_keeps_earliest_minimum() {
        let mut t = BestTracker::new(None);
        t.observe(0, 2.0, &"a");
        t.observe(1, 1.0, &"b");
        t.observe(2, 1.0, &"c");
        t.observe(3, 1.5, &"d");
        assert_eq!(t.finish(), ("b", 1));
    }

    #[test]
    fn patience_stops() {
        let mut t = BestTracker::new(Some(2));
        assert!(!t.observe(0, 1.0, &()));
        assert!(!t.observe(1, 1.1, &()));
        assert!(t.observe(2, 1.2, &()));
    }

    #[test]
    fn stable_softplus() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
