//! End-to-end recipes: pick an embedding initializer, then train the
//! conditional ratio model or a density baseline on a benchmark.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clr::{estimate_clr, RatioModel};
use crate::density::{train_gaussian, ConditionalGaussian};
use crate::embed::{
    embeddings_to_table, fit_width, histogram_embedding, label_embedding, learned_embedding,
    pseudo_label_embedding, random_embedding, select_seed_tasks, train_pre_embedding, GmmConfig,
    LearnedEncoder,
};
use crate::error::{Error, Result};
use crate::rng::{fork, stream};
use crate::train::{LossTrace, TrainConfig, DEFAULT_EMBED_DIM};
use crate::types::Benchmark;

/// Training settings calibrated on the synthetic blob benchmarks for the
/// conditional ratio model. The library defaults regularize with dropout,
/// which suits large noisy populations; on a few thousand clean blob
/// samples it mostly slows convergence.
pub fn blob_clr_recipe() -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        epochs: 100,
        patience: Some(20),
        lr: 3e-3,
        dropout: vec![0.0; base.hidden.len()],
        ..base
    }
}

/// Training settings calibrated on the synthetic blob benchmarks for the
/// conditional Gaussian baseline: a shallower mean/variance network given
/// more epochs.
pub fn blob_gaussian_recipe() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        patience: Some(50),
        lr: 3e-3,
        hidden: vec![32, 32],
        dropout: vec![0.0, 0.0],
        ..TrainConfig::default()
    }
}

/// How the task-embedding table is initialized before joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "lowercase")]
pub enum InitKind {
    Random,
    /// Learned from `m0` randomly chosen seed tasks.
    Learned { m0: usize },
    Histogram,
    Label,
    Pseudo,
}

impl InitKind {
    pub fn name(&self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Learned { .. } => "learned",
            InitKind::Histogram => "histogram",
            InitKind::Label => "label",
            InitKind::Pseudo => "pseudo",
        }
    }

    /// Parses an initializer name; `m0` is required for `learned` only.
    pub fn parse(name: &str, m0: Option<usize>) -> Result<Self> {
        Ok(match name {
            "random" => InitKind::Random,
            "learned" => InitKind::Learned {
                m0: m0.ok_or_else(|| Error::Config("learned initialization needs m0".into()))?,
            },
            "histogram" => InitKind::Histogram,
            "label" => InitKind::Label,
            "pseudo" => InitKind::Pseudo,
            other => return Err(Error::Config(format!("unknown initializer {other:?}"))),
        })
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitKind::Learned { m0 } => write!(f, "learned(m0={m0})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, None)
    }
}

/// Number of label categories a benchmark uses.
pub fn label_arity(b: &Benchmark) -> usize {
    if let Some(l) = b.meta.get("L").and_then(|v| v.parse().ok()) {
        return l;
    }
    let from_tests = b
        .task_tests
        .iter()
        .flat_map(|s| s.nominal.iter().chain(&s.anomalous))
        .chain(&b.test.categories);
    let from_train = b
        .train
        .tasks()
        .iter()
        .flat_map(|t| t.labels.iter().flatten());
    from_tests.chain(from_train).max().map_or(0, |&m| m as usize + 1)
}

/// An initial embedding table plus whatever produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub kind: InitKind,
    /// One row per task.
    pub table: Array2<f64>,
    /// Present for learned initialization.
    pub encoder: Option<LearnedEncoder>,
    pub pre_trace: Option<LossTrace>,
    /// Map applied to bring the natural width to `embed_dim`, if any.
    pub projection: Option<Array2<f64>>,
}

/// Builds the initial table.
///
/// Each initializer has a natural width (16 for random, `m0` for learned,
/// the label arity otherwise). When `cfg.embed_dim` asks for a different
/// width, the table goes through a seeded random linear map.
pub fn initialize<R: Rng + ?Sized>(
    b: &Benchmark,
    kind: InitKind,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Initialization> {
    let c = &b.train;
    let m = c.num_tasks();
    let mut rng = fork(rng, stream::EMBEDDING);
    let mut encoder = None;
    let mut pre_trace = None;
    let natural = match kind {
        InitKind::Random => {
            let dim = cfg.embed_dim.unwrap_or(DEFAULT_EMBED_DIM);
            random_embedding(m, dim, &mut rng)
        }
        InitKind::Learned { m0 } => {
            let seeds = select_seed_tasks(c, m0, &mut fork(&mut rng, stream::SEEDS))?;
            let (model, trace) = train_pre_embedding(c, &seeds, cfg, &mut rng)?;
            let embs = c
                .tasks()
                .iter()
                .map(|t| learned_embedding(&model, t))
                .collect::<Result<Vec<_>>>()?;
            encoder = Some(LearnedEncoder {
                model,
                projection: None,
            });
            pre_trace = Some(trace);
            embeddings_to_table(&embs)?
        }
        InitKind::Histogram => {
            let l = label_arity(b);
            let embs = c
                .tasks()
                .iter()
                .map(|t| histogram_embedding(t, l))
                .collect::<Result<Vec<_>>>()?;
            embeddings_to_table(&embs)?
        }
        InitKind::Label => {
            let l = label_arity(b);
            let embs = (0..m)
                .map(|t| {
                    let active = match &b.ground_truth_active {
                        Some(a) => &a[t],
                        None => &b.task_tests[t].nominal,
                    };
                    label_embedding(t, active, l)
                })
                .collect::<Result<Vec<_>>>()?;
            embeddings_to_table(&embs)?
        }
        InitKind::Pseudo => {
            let l = label_arity(b);
            pseudo_label_embedding(c, l, &GmmConfig::default(), &mut fork(&mut rng, stream::GMM))?.0
        }
    };
    let target = cfg.embed_dim.unwrap_or(natural.ncols());
    let (table, projection) = fit_width(natural, target, &mut fork(&mut rng, stream::PROJECTION));
    if let Some(enc) = encoder.as_mut() {
        enc.projection = projection.clone();
    }
    Ok(Initialization {
        kind,
        table,
        encoder,
        pre_trace,
        projection,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedRatio {
    pub model: RatioModel,
    pub trace: LossTrace,
    pub init: Initialization,
}

/// Initializes embeddings, then trains scorer and embeddings jointly.
pub fn train_clr<R: Rng + ?Sized>(
    b: &Benchmark,
    kind: InitKind,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedRatio> {
    let init = initialize(b, kind, cfg, rng)?;
    let cfg = TrainConfig {
        embed_dim: Some(init.table.ncols()),
        ..cfg.clone()
    };
    let (model, trace) = estimate_clr(&b.train, Some(&init.table), &cfg, rng)?;
    Ok(TrainedRatio { model, trace, init })
}

#[derive(Debug, Clone)]
pub struct TrainedGaussian {
    pub model: ConditionalGaussian,
    pub trace: LossTrace,
    pub init: Initialization,
}

/// Conditional Gaussian baseline with the same initializer choices.
pub fn train_gaussian_baseline<R: Rng + ?Sized>(
    b: &Benchmark,
    kind: InitKind,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedGaussian> {
    let init = initialize(b, kind, cfg, rng)?;
    let (model, trace) = train_gaussian(&b.train, init.table.clone(), cfg, rng)?;
    Ok(TrainedGaussian { model, trace, init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::synth::{generate, SynthConfig};

    fn bench() -> Benchmark {
        generate(&SynthConfig {
            categories: 4,
            dim: 4,
            k: 2,
            n_per_category: 60,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn parse_names() {
        assert_eq!(InitKind::parse("learned", Some(3)).unwrap(), InitKind::Learned { m0: 3 });
        assert!(InitKind::parse("learned", None).is_err());
        assert_eq!("label".parse::<InitKind>().unwrap(), InitKind::Label);
        assert!("graph".parse::<InitKind>().is_err());
        assert_eq!(InitKind::Learned { m0: 10 }.to_string(), "learned(m0=10)");
    }

    #[test]
    fn natural_widths() {
        let b = bench();
        assert_eq!(label_arity(&b), 4);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut rng = seeded(0, 0);
        let mut w = |kind| initialize(&b, kind, &cfg, &mut rng).unwrap().table.ncols();
        assert_eq!(w(InitKind::Random), 16);
        assert_eq!(w(InitKind::Label), 4);
        assert_eq!(w(InitKind::Histogram), 4);
        assert_eq!(w(InitKind::Pseudo), 4);
        assert_eq!(w(InitKind::Learned { m0: 3 }), 3);
    }

    #[test]
    fn label_rows_are_indicators() {
        let b = bench();
        let init = initialize(&b, InitKind::Label, &TrainConfig::default(), &mut seeded(0, 0)).unwrap();
        // combinations(4, 2)[0] = {0, 1}
        assert_eq!(init.table.row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_width_is_projected_and_recorded() {
        let b = bench();
        let cfg = TrainConfig {
            epochs: 1,
            embed_dim: Some(5),
            ..TrainConfig::default()
        };
        let init = initialize(&b, InitKind::Learned { m0: 2 }, &cfg, &mut seeded(1, 0)).unwrap();
        assert_eq!(init.table.ncols(), 5);
        let enc = init.encoder.unwrap();
        assert_eq!(enc.projection.as_ref().unwrap().dim(), (5, 2));
        assert_eq!(enc.output_dim(), 5);
        let row = enc.encode(&b.train.tasks()[0].samples).unwrap();
        for (a, e) in row.iter().zip(init.table.row(0)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let b = bench();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || train_clr(&b, InitKind::Learned { m0: 2 }, &cfg, &mut seeded(7, 0)).unwrap();
        let (a, c) = (run(), run());
        assert_eq!(a.model, c.model);
        assert_eq!(a.trace, c.trace);
    }
}
