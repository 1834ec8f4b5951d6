//! Self-contained correctness checks with known answers.
//!
//! Each check builds its own fixtures from a seed and returns a report with
//! the measured quantities, so callers (tests, the command-line `verify`
//! subcommand) decide how to present them.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::clr::score_single_task;
use crate::density::{AffineFlow, FlowConfig};
use crate::error::Result;
use crate::eval::{
    auc, ratio_recovery_error, uniform_grid, verify_base_optimality, Gaussian1d,
    BASE_OPTIMALITY_TOLERANCE,
};
use crate::nn::{Activation, Dense, DenseNet};
use crate::train::TrainConfig;
use crate::types::FeatureVector;

/// Acceptance bound on the analytic-vs-numeric gradient discrepancy.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Acceptance bound on the grid error of a recovered log-ratio.
pub const RATIO_RECOVERY_TOLERANCE: f64 = 0.15;
/// Acceptance bound on `max |score|` when positives and negatives agree.
pub const RATIO_CONTROL_TOLERANCE: f64 = 0.10;
pub const FLOW_ROUND_TRIP_TOLERANCE: f64 = 1e-9;
pub const FLOW_JACOBIAN_TOLERANCE: f64 = 1e-8;
pub const FLOW_INTEGRAL_TOLERANCE: f64 = 0.02;

/// Quadratic pair-counting AUC, the reference for [`auc`].
pub fn auc_pairwise(nominal: &[f64], anomalous: &[f64]) -> f64 {
    let mut twice: u128 = 0;
    for &a in nominal {
        for &b in anomalous {
            twice += match a.partial_cmp(&b) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    twice as f64 / (2 * nominal.len() * anomalous.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub nets: usize,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so that entries whose
/// true value is essentially zero are judged on absolute error.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn random_net<R: Rng + ?Sized>(rng: &mut R) -> DenseNet {
    let depth = rng.random_range(1..=3);
    let mut width = rng.random_range(1..=16);
    let layers = (0..depth)
        .map(|_| {
            let out = rng.random_range(1..=16);
            let act = match rng.random_range(0..3) {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                _ => Activation::Identity,
            };
            let mut layer = Dense::new(width, out, act, 0.0, rng);
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            width = out;
            layer
        })
        .collect();
    DenseNet::new(layers).expect("chained widths")
}

/// Central finite differences against back-propagation on `nets` random
/// networks of at most 3 layers and 16 units, for every weight, bias and
/// input entry. The loss is a random linear functional of the outputs.
pub fn gradient_check<R: Rng + ?Sized>(nets: usize, rng: &mut R) -> Result<GradCheckReport> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..nets {
        let net = random_net(rng);
        let batch = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, net.input_dim()), |_| rng.random_range(-2.0..2.0));
        let c = Array2::from_shape_fn((batch, net.output_dim()), |_| rng.random_range(-1.0..1.0));
        let loss = |n: &DenseNet, x: &Array2<f64>| -> Result<f64> { Ok((n.predict(x.view())? * &c).sum()) };
        let (_, tape) = net.forward(x.view())?;
        let (grad, input_grad) = net.backward(&tape, c.view())?;

        for (l, layer_grad) in grad.layers.iter().enumerate() {
            let analytic = layer_grad.weights.iter().chain(&layer_grad.bias);
            let n_weights = layer_grad.weights.len();
            for (idx, &a) in analytic.enumerate() {
                let bump = |delta: f64| -> Result<f64> {
                    let mut n = net.clone();
                    let layer = &mut n.layers_mut()[l];
                    if idx < n_weights {
                        layer.weights.as_slice_mut().expect("standard layout")[idx] += delta;
                    } else {
                        layer.bias[idx - n_weights] += delta;
                    }
                    loss(&n, &x)
                };
                let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
                worst = worst.max(relative_error(a, numeric));
                checked += 1;
            }
        }
        for ((i, j), &a) in input_grad.indexed_iter() {
            let bump = |delta: f64| {
                let mut xb = x.clone();
                xb[[i, j]] += delta;
                loss(&net, &xb)
            };
            let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        nets,
        entries_checked: checked,
        max_relative_error: worst,
        passed: worst < GRADIENT_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecoveryReport {
    pub pairs: usize,
    /// `max |f(x) − (x − 0.5)|` on the grid for `q = N(1,1)`, `p = N(0,1)`.
    pub max_error: f64,
    /// `max |f(x)|` on the grid when `q = p = N(0,1)`.
    pub control_max_abs: f64,
    pub grid_points: usize,
    pub passed: bool,
}

/// Training settings for the ratio-recovery check: the default scorer
/// architecture without dropout.
pub fn ratio_recovery_config() -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        dropout: vec![0.0; base.hidden.len()],
        ..base
    }
}

fn normal_samples<R: Rng + ?Sized>(n: usize, mean: f64, rng: &mut R) -> Vec<FeatureVector> {
    let dist = Normal::new(mean, 1.0).expect("unit sd");
    (0..n).map(|_| FeatureVector::new(vec![dist.sample(rng)])).collect()
}

/// Trains single-task scorers on `pairs` positives and `pairs` negatives
/// and compares them with the closed-form log-ratio on `[−2, 2]`, step 0.1.
pub fn ratio_recovery<R: Rng + ?Sized>(pairs: usize, cfg: &TrainConfig, rng: &mut R) -> Result<RatioRecoveryReport> {
    let grid = uniform_grid(-2.0, 2.0, 0.1);
    let p = Gaussian1d::new(0.0, 1.0);
    let q = Gaussian1d::new(1.0, 1.0);

    let pos = normal_samples(pairs, 1.0, rng);
    let neg = normal_samples(pairs, 0.0, rng);
    let (scorer, _) = score_single_task(&pos, &neg, cfg, rng)?;
    let max_error = ratio_recovery_error(|x| scorer.score(&[x]).unwrap_or(f64::INFINITY), q, p, &grid);

    let pos = normal_samples(pairs, 0.0, rng);
    let neg = normal_samples(pairs, 0.0, rng);
    let (control, _) = score_single_task(&pos, &neg, cfg, rng)?;
    let control_max_abs = ratio_recovery_error(|x| control.score(&[x]).unwrap_or(f64::INFINITY), p, p, &grid);

    Ok(RatioRecoveryReport {
        pairs,
        max_error,
        control_max_abs,
        grid_points: grid.len(),
        passed: max_error < RATIO_RECOVERY_TOLERANCE && control_max_abs < RATIO_CONTROL_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseOptimalityTrials {
    pub trials: usize,
    pub failures: usize,
    /// Largest `J(mixture) − min_grid J` seen (negative means the mixture won).
    pub worst_gap: f64,
    pub passed: bool,
}

/// Uniform draw from the probability simplex.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random instances of the base-distribution optimality check.
pub fn base_optimality_trials<R: Rng + ?Sized>(
    trials: usize,
    tasks: usize,
    alphabet: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<BaseOptimalityTrials> {
    let mut failures = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..trials {
        let qs: Vec<Vec<f64>> = (0..tasks).map(|_| random_simplex(alphabet, rng)).collect();
        let m = random_simplex(tasks, rng);
        let r = verify_base_optimality(&qs, &m, resolution)?;
        worst_gap = worst_gap.max(r.mixture_objective - r.grid_min_objective);
        if !r.passed {
            failures += 1;
        }
    }
    Ok(BaseOptimalityTrials {
        trials,
        failures,
        worst_gap,
        passed: failures == 0 && worst_gap <= BASE_OPTIMALITY_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEquivalenceReport {
    pub trials: usize,
    pub mismatches: usize,
    pub hand_case: f64,
    pub passed: bool,
}

/// Fast AUC against pair counting on random score sets drawn from a small
/// integer range so that ties are frequent.
pub fn auc_equivalence<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<AucEquivalenceReport> {
    let mut mismatches = 0;
    for _ in 0..trials {
        let levels = rng.random_range(1..=20);
        let n_nom = rng.random_range(1..=60);
        let n_anom = rng.random_range(1..=60);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect()
        };
        let (a, b) = (draw(n_nom), draw(n_anom));
        if auc(&a, &b)? != auc_pairwise(&a, &b) {
            mismatches += 1;
        }
    }
    let hand_case = auc(&[0.9, 0.4], &[0.5, 0.1])?;
    Ok(AucEquivalenceReport {
        trials,
        mismatches,
        hand_case,
        passed: mismatches == 0 && hand_case == 0.75,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckReport {
    /// `max |forward(inverse(x)) − x|`.
    pub round_trip_error: f64,
    /// Largest `|∂u_i/∂x_j|` with `j > i` in a single block.
    pub jacobian_leak: f64,
    /// Smallest `|∂u_i/∂x_i|` in a single block, to show the check has teeth.
    pub min_diagonal: f64,
    /// Numerical integral of a one-dimensional flow density.
    pub integral: f64,
    pub passed: bool,
}

/// Moves every parameter of a freshly built flow away from the identity
/// map, respecting the autoregressive masks.
pub fn perturb_flow<R: Rng + ?Sized>(flow: &mut AffineFlow, rng: &mut R) {
    for block in &mut flow.blocks {
        for net in [&mut block.shift, &mut block.log_scale] {
            for layer in net.layers_mut() {
                layer.weights.mapv_inplace(|_| rng.random_range(-0.8..0.8));
                if let Some(mask) = &layer.mask {
                    layer.weights *= mask;
                }
                layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        block.norm_log_scale.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        block.norm_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        block.cond_scale.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        block.cond_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
    }
}

fn random_flow<R: Rng + ?Sized>(d: usize, tasks: usize, blocks: usize, rng: &mut R) -> Result<AffineFlow> {
    let cfg = FlowConfig {
        blocks,
        hidden: 8,
        ..FlowConfig::default()
    };
    let mut prior_rng = crate::rng::fork(rng, crate::rng::stream::PRIORS);
    let mut flow = AffineFlow::new(d, tasks, &cfg, rng, &mut prior_rng)?;
    perturb_flow(&mut flow, rng);
    Ok(flow)
}

/// Invertibility, autoregressive structure and normalization of the flow.
pub fn flow_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<FlowCheckReport> {
    let flow = random_flow(4, 2, 3, rng)?;
    let mut round_trip_error: f64 = 0.0;
    for t in 0..2 {
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (u, _) = flow.inverse(t, &x)?;
            let back = flow.forward(t, &u)?;
            for (a, b) in x.iter().zip(&back) {
                round_trip_error = round_trip_error.max((a - b).abs());
            }
        }
    }

    // Coordinates are reversed between blocks, so triangularity holds per block.
    let d = 5;
    let block = random_flow(d, 1, 1, rng)?;
    let h = 1e-5;
    let mut jacobian_leak: f64 = 0.0;
    let mut min_diagonal = f64::INFINITY;
    for _ in 0..10 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for j in 0..d {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            let (uu, _) = block.inverse(0, &up)?;
            let (ud, _) = block.inverse(0, &dn)?;
            for i in 0..d {
                let dij = (uu[i] - ud[i]) / (2.0 * h);
                if j > i {
                    jacobian_leak = jacobian_leak.max(dij.abs());
                } else if j == i {
                    min_diagonal = min_diagonal.min(dij.abs());
                }
            }
        }
    }

    let line = random_flow(1, 1, 3, rng)?;
    let step = 1e-3;
    let xs = uniform_grid(-30.0, 30.0, step);
    let dens: Vec<f64> = line.logpdf_many(0, &xs.iter().map(|&x| [x]).collect::<Vec<_>>())?
        .into_iter()
        .map(f64::exp)
        .collect();
    let integral = step * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[dens.len() - 1]));

    Ok(FlowCheckReport {
        round_trip_error,
        jacobian_leak,
        min_diagonal,
        integral,
        passed: round_trip_error < FLOW_ROUND_TRIP_TOLERANCE
            && jacobian_leak < FLOW_JACOBIAN_TOLERANCE
            && (integral - 1.0).abs() < FLOW_INTEGRAL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn pairwise_auc_hand_case() {
        assert_eq!(auc_pairwise(&[0.9, 0.4], &[0.5, 0.1]), 0.75);
        assert_eq!(auc_pairwise(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn gradients_agree() {
        let r = gradient_check(20, &mut seeded(0, 0)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.entries_checked > 200);
    }

    #[test]
    fn flow_oracles_pass() {
        let r = flow_checks(&mut seeded(1, 0)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.min_diagonal > 1e-3, "{r:?}");
    }

    #[test]
    fn auc_oracle_passes() {
        assert!(auc_equivalence(200, &mut seeded(2, 0)).unwrap().passed);
    }

    #[test]
    fn base_optimality_small_grid() {
        let r = base_optimality_trials(5, 2, 3, 50, &mut seeded(3, 0)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn simplex_draws_are_distributions() {
        let mut rng = seeded(4, 0);
        for n in 1..6 {
            let p = random_simplex(n, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }
}
