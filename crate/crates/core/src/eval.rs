//! Metrics and numeric oracles.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::clr::RatioModel;
use crate::embed::LearnedEncoder;
use crate::error::{Error, Result};
use crate::types::{Benchmark, EvalReport, FeatureVector};

/// Mann–Whitney AUC: the fraction of (nominal, anomalous) pairs where the
/// nominal score is strictly greater, ties counting one half.
///
/// Runs in `O(n log n)` by sweeping tie groups in sorted order. The pair
/// count is accumulated as an exact integer (twice the U statistic), so the
/// result is bit-identical to quadratic pair counting.
pub fn auc(scores_nominal: &[f64], scores_anomalous: &[f64]) -> Result<f64> {
    if scores_nominal.is_empty() || scores_anomalous.is_empty() {
        return Err(Error::InvalidArgument(
            "auc needs at least one nominal and one anomalous score".into(),
        ));
    }
    if scores_nominal
        .iter()
        .chain(scores_anomalous)
        .any(|s| s.is_nan())
    {
        return Err(Error::InvalidArgument("auc scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_nominal
        .iter()
        .map(|&s| (s, true))
        .chain(scores_anomalous.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut twice_u: u128 = 0;
    let mut anomalous_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut nom, mut anom) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                nom += 1;
            } else {
                anom += 1;
            }
            j += 1;
        }
        twice_u += nom * (2 * anomalous_below + anom);
        anomalous_below += anom;
        i = j;
    }
    let pairs = 2 * scores_nominal.len() as u128 * scores_anomalous.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// `Σ q_i log(q_i / p_i)` with `0·log 0 = 0`.
pub fn kl_divergence_discrete(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape {
            context: "kl divergence",
            expected: q.len(),
            found: p.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Err(Error::SupportViolation { index: i });
            }
            kl += qi * (qi / pi).ln();
        }
    }
    Ok(kl)
}

/// Largest simplex grid [`verify_base_optimality`] will enumerate.
pub const MAX_GRID_POINTS: u128 = 5_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOptimalityReport {
    pub mixture: Vec<f64>,
    pub mixture_objective: f64,
    pub grid_min_objective: f64,
    pub grid_argmin: Vec<f64>,
    /// L1 distance between the grid argmin and the mixture.
    pub argmin_l1_distance: f64,
    pub grid_points: u128,
    pub passed: bool,
}

/// Tolerance on `J(mixture) ≤ min_grid J + tol`.
pub const BASE_OPTIMALITY_TOLERANCE: f64 = 1e-6;

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Brute-force check that the weighted mixture `Σ_t m_t q_t` minimizes
/// `J(p) = Σ_t m_t KL(q_t ‖ p)` over a simplex grid of step `1/resolution`.
pub fn verify_base_optimality(
    qs: &[Vec<f64>],
    weights: &[f64],
    resolution: usize,
) -> Result<BaseOptimalityReport> {
    if qs.is_empty() || qs.len() != weights.len() {
        return Err(Error::InvalidArgument(
            "need one weight per distribution".into(),
        ));
    }
    let alphabet = qs[0].len();
    if alphabet == 0 || qs.iter().any(|q| q.len() != alphabet) {
        return Err(Error::InvalidArgument("distributions differ in length".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::WeightSum { sum: wsum });
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let points = binomial((resolution + alphabet - 1) as u128, (alphabet - 1) as u128);
    if points > MAX_GRID_POINTS {
        return Err(Error::InfeasibleGrid {
            points,
            limit: MAX_GRID_POINTS,
        });
    }

    let objective = |p: &[f64]| -> f64 {
        let mut j = 0.0;
        for (q, &m) in qs.iter().zip(weights) {
            if m == 0.0 {
                continue;
            }
            match kl_divergence_discrete(q, p) {
                Ok(kl) => j += m * kl,
                Err(_) => return f64::INFINITY,
            }
        }
        j
    };

    let mixture: Vec<f64> = (0..alphabet)
        .map(|i| qs.iter().zip(weights).map(|(q, &m)| m * q[i]).sum())
        .collect();
    let mixture_objective = objective(&mixture);

    let mut best = (f64::INFINITY, vec![0.0; alphabet]);
    let mut counts = vec![0usize; alphabet];
    let mut p = vec![0.0; alphabet];
    enumerate_compositions(resolution, 0, &mut counts, &mut |c| {
        for (pi, &ci) in p.iter_mut().zip(c) {
            *pi = ci as f64 / resolution as f64;
        }
        let j = objective(&p);
        if j < best.0 {
            best = (j, p.clone());
        }
    });

    let argmin_l1_distance = best
        .1
        .iter()
        .zip(&mixture)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(BaseOptimalityReport {
        passed: mixture_objective <= best.0 + BASE_OPTIMALITY_TOLERANCE,
        mixture,
        mixture_objective,
        grid_min_objective: best.0,
        grid_argmin: best.1,
        argmin_l1_distance,
        grid_points: points,
    })
}

fn enumerate_compositions(
    remaining: usize,
    pos: usize,
    counts: &mut [usize],
    visit: &mut impl FnMut(&[usize]),
) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        enumerate_compositions(remaining - c, pos + 1, counts, visit);
    }
}

/// 1-D Gaussian with closed-form log-density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1d {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian1d {
    pub fn new(mean: f64, std: f64) -> Self {
        Gaussian1d { mean, std }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * (2.0 * std::f64::consts::PI).ln() - self.std.ln() - 0.5 * z * z
    }

    /// `log q(x) / p(x)` for `q = self`.
    pub fn log_ratio(&self, p: &Gaussian1d, x: f64) -> f64 {
        self.log_pdf(x) - p.log_pdf(x)
    }
}

/// Evenly spaced points from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// `max_x |scorer(x) − log q(x)/p(x)|` over the grid.
pub fn ratio_recovery_error(
    scorer: impl Fn(f64) -> f64,
    q: Gaussian1d,
    p: Gaussian1d,
    grid: &[f64],
) -> f64 {
    grid.iter()
        .map(|&x| (scorer(x) - q.log_ratio(&p, x)).abs())
        .fold(0.0, f64::max)
}

fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with mid-ranked ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "spearman",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations"));
    }
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Strict upper triangle, row-major.
pub fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| m[[i, j]])
        .collect()
}

/// Spearman correlation between the off-diagonal entries of two matrices.
pub fn similarity_rank_correlation(learned: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if learned.dim() != truth.dim() || !learned.is_square() {
        return Err(Error::Shape {
            context: "similarity matrices",
            expected: truth.nrows(),
            found: learned.nrows(),
        });
    }
    spearman(&upper_triangle(learned), &upper_triangle(truth))
}

/// Per-task AUC for any scorer over a benchmark's test sets.
///
/// Tasks whose test set lacks nominal or anomalous samples are skipped and
/// listed in the report.
pub fn evaluate_with<F>(
    benchmark: &Benchmark,
    experiment: &str,
    config: BTreeMap<String, String>,
    mut scorer: F,
) -> Result<EvalReport>
where
    F: FnMut(usize, &[&FeatureVector]) -> Result<Vec<f64>>,
{
    let mut per_task = BTreeMap::new();
    let mut skipped = Vec::new();
    for t in 0..benchmark.num_tasks() {
        let (nominal, anomalous) = benchmark.test_split(t);
        if nominal.is_empty() || anomalous.is_empty() {
            skipped.push(t);
            continue;
        }
        let sn = scorer(t, &nominal)?;
        let sa = scorer(t, &anomalous)?;
        per_task.insert(t, auc(&sn, &sa)?);
    }
    if per_task.is_empty() {
        return Err(Error::InvalidArgument("no task has a usable test set".into()));
    }
    Ok(EvalReport::new(experiment, per_task, skipped, config))
}

/// In-distribution evaluation of a trained ratio model.
pub fn evaluate_ratio_model(
    model: &RatioModel,
    benchmark: &Benchmark,
    experiment: &str,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if model.num_tasks() != benchmark.num_tasks() {
        return Err(Error::Shape {
            context: "model tasks vs benchmark tasks",
            expected: benchmark.num_tasks(),
            found: model.num_tasks(),
        });
    }
    evaluate_with(benchmark, experiment, config, |t, xs| model.score_many(t, xs))
}

/// Scores unseen tasks with frozen models.
///
/// Each task of `test` is encoded from its own training samples by the
/// frozen pre-embedding model, and that embedding is fed to the frozen
/// ratio model. Nothing is retrained.
pub fn evaluate_generalization(
    encoder: &LearnedEncoder,
    model: &RatioModel,
    test: &Benchmark,
    experiment: &str,
    mut config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if encoder.output_dim() != model.embed_dim() {
        return Err(Error::Shape {
            context: "encoder width vs model embedding width",
            expected: model.embed_dim(),
            found: encoder.output_dim(),
        });
    }
    if test.train.feature_dim() != model.feature_dim {
        return Err(Error::Shape {
            context: "feature dimension",
            expected: model.feature_dim,
            found: test.train.feature_dim(),
        });
    }
    let embeddings = encoder.encode_collection(&test.train)?;
    config
        .entry("test_tasks".into())
        .or_insert_with(|| test.num_tasks().to_string());
    evaluate_with(test, experiment, config, |t, xs| {
        model.score_with_embedding(embeddings.row(t).as_slice().unwrap(), xs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence_discrete(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let kl = kl_divergence_discrete(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            kl_divergence_discrete(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::SupportViolation { index: 1 })
        ));
    }

    #[test]
    fn base_optimality_hand_case() {
        let qs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]];
        let r = verify_base_optimality(&qs, &[0.5, 0.5], 200).unwrap();
        assert!(r.passed);
        for (a, b) in r.mixture.iter().zip([0.4, 0.2, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        // the mixture lies on the grid, so the argmin is the mixture itself
        assert!(r.argmin_l1_distance < 1e-9);
        assert_eq!(r.grid_points, 20301);
    }

    #[test]
    fn base_optimality_degenerate_cases() {
        let r = verify_base_optimality(&[vec![0.25, 0.75]], &[1.0], 100).unwrap();
        assert!(r.passed);
        assert_eq!(r.mixture_objective, 0.0);
        let qs = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]];
        let r = verify_base_optimality(&qs, &[1.0, 0.0], 100).unwrap();
        assert_eq!(r.mixture, qs[0]);
        assert!(r.passed && r.mixture_objective.abs() < 1e-15);
    }

    #[test]
    fn infeasible_grid_rejected() {
        let q = vec![0.2; 5];
        assert!(matches!(
            verify_base_optimality(&[q], &[1.0], 200),
            Err(Error::InfeasibleGrid { .. })
        ));
    }

    #[test]
    fn grid_has_41_points() {
        let g = uniform_grid(-2.0, 2.0, 0.1);
        assert_eq!(g.len(), 41);
        assert!((g[40] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_recovery_against_closed_form() {
        let q = Gaussian1d::new(1.0, 1.0);
        let p = Gaussian1d::new(0.0, 1.0);
        let grid = uniform_grid(-2.0, 2.0, 0.1);
        assert!(ratio_recovery_error(|x| x - 0.5, q, p, &grid) < 1e-12);
        let e = ratio_recovery_error(|_| 0.0, p, p, &grid);
        assert_eq!(e, 0.0);
        let e = ratio_recovery_error(|_| 0.3, p, p, &grid);
        assert!((e - 0.3).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        // ranks (1,2,3) vs (1,3,2): 1 − 6·2/(3·8) = 0.5
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn matrix_rank_correlation_uses_upper_triangle() {
        let truth = ndarray::array![[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]];
        assert!((similarity_rank_correlation(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        let neg = truth.mapv(|v| -v);
        assert!((similarity_rank_correlation(&neg, &truth).unwrap() + 1.0).abs() < 1e-12);
    }
}
