//! Diagonal-covariance Gaussian mixtures fitted by EM.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rows_to_matrix;
use crate::types::TaskCollection;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            max_iter: 200,
            tol: 1e-6,
            var_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGmm {
    pub weights: Array1<f64>,
    /// `(components, d)`.
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    /// Mean per-sample log-likelihood after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
}

impl DiagonalGmm {
    /// Fits `components` Gaussians to the rows of `x`, seeding the means
    /// k-means++ style.
    pub fn fit<R: Rng + ?Sized>(
        x: ArrayView2<f64>,
        components: usize,
        cfg: &GmmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if components == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        if n < components {
            return Err(Error::InvalidArgument(format!(
                "{n} samples cannot support {components} components"
            )));
        }
        let global_var = x
            .var_axis(Axis(0), 0.0)
            .mapv(|v| v.max(cfg.var_floor));
        let means = kmeans_plus_plus(x, components, rng);
        let mut gmm = DiagonalGmm {
            weights: Array1::from_elem(components, 1.0 / components as f64),
            variances: Array2::from_shape_fn((components, d), |(_, j)| global_var[j]),
            means,
            log_likelihood_trace: Vec::new(),
        };

        let mut prev = f64::NEG_INFINITY;
        for _ in 0..cfg.max_iter {
            let (resp, ll) = gmm.e_step(x);
            if prev.is_finite() && ll - prev < cfg.tol {
                gmm.log_likelihood_trace.push(ll);
                break;
            }
            gmm.log_likelihood_trace.push(ll);
            prev = ll;
            gmm.m_step(x, &resp, cfg.var_floor);
        }
        Ok(gmm)
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    /// Log of `w_k N(x; μ_k, diag σ²_k)` for every row and component.
    fn joint_log_density(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let k = self.num_components();
        let mut out = Array2::zeros((x.nrows(), k));
        for c in 0..k {
            let mu = self.means.row(c);
            let var = self.variances.row(c);
            let norm: f64 = self.weights[c].ln()
                - 0.5 * var.iter().map(|v| LN_2PI + v.ln()).sum::<f64>();
            for (i, row) in x.outer_iter().enumerate() {
                let mut q = 0.0;
                for j in 0..row.len() {
                    let z = row[j] - mu[j];
                    q += z * z / var[j];
                }
                out[[i, c]] = norm - 0.5 * q;
            }
        }
        out
    }

    /// Responsibilities and mean log-likelihood.
    fn e_step(&self, x: ArrayView2<f64>) -> (Array2<f64>, f64) {
        let mut lp = self.joint_log_density(x);
        let mut total = 0.0;
        for mut row in lp.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        (lp, total / x.nrows() as f64)
    }

    fn m_step(&mut self, x: ArrayView2<f64>, resp: &Array2<f64>, var_floor: f64) {
        let n = x.nrows() as f64;
        let nk = resp.sum_axis(Axis(0));
        for c in 0..self.num_components() {
            let w = nk[c].max(1e-300);
            self.weights[c] = nk[c] / n;
            let r = resp.column(c);
            let mean = r.dot(&x) / w;
            let mut var = Array1::<f64>::zeros(x.ncols());
            for (ri, row) in r.iter().zip(x.outer_iter()) {
                for j in 0..row.len() {
                    let z = row[j] - mean[j];
                    var[j] += ri * z * z;
                }
            }
            var.mapv_inplace(|v| (v / w).max(var_floor));
            if nk[c] > 0.0 {
                self.means.row_mut(c).assign(&mean);
            }
            self.variances.row_mut(c).assign(&var);
        }
        let wsum = self.weights.sum();
        if wsum > 0.0 {
            self.weights /= wsum;
        }
        self.weights.mapv_inplace(|w| w.max(1e-300));
    }

    /// Posterior component probabilities, one row per sample.
    pub fn responsibilities(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.e_step(x).0
    }
}

fn kmeans_plus_plus<R: Rng + ?Sized>(x: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
    };
    let mut dist: Vec<f64> = x.outer_iter().map(|r| sq(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.outer_iter().enumerate() {
            dist[i] = dist[i].min(sq(r, centers.row(c)));
        }
    }
    centers
}

/// Fits a GMM with `components` clusters on the pooled population and
/// embeds every task as its samples' mean responsibility vector.
pub fn pseudo_label_embedding<R: Rng + ?Sized>(
    c: &TaskCollection,
    components: usize,
    cfg: &GmmConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, DiagonalGmm)> {
    c.validate()?;
    let pooled: Vec<_> = c.population().map(|(_, x)| x).collect();
    let x = rows_to_matrix(&pooled, c.feature_dim());
    let gmm = DiagonalGmm::fit(x.view(), components, cfg, rng)?;
    let mut table = Array2::zeros((c.num_tasks(), components));
    for (t, task) in c.tasks().iter().enumerate() {
        let xt = rows_to_matrix(&task.samples, c.feature_dim());
        let r = gmm.responsibilities(xt.view());
        table
            .row_mut(t)
            .assign(&r.mean_axis(Axis(0)).expect("non-empty task"));
    }
    Ok((table, gmm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::types::{FeatureVector, TaskDataset};
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> TaskCollection {
        let mut rng = seeded(seed, 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |c: f64| FeatureVector::new(vec![c + noise.sample(&mut rng)]);
        // task 0: all left blob; task 1: 3/4 right blob, 1/4 left blob
        let t0 = (0..200).map(|_| draw(-10.0)).collect();
        let t1 = (0..200)
            .map(|i| draw(if i % 4 == 0 { -10.0 } else { 10.0 }))
            .collect();
        TaskCollection::from_tasks(vec![TaskDataset::new(0, t0), TaskDataset::new(1, t1)])
    }

    #[test]
    fn single_component_gives_unit_embedding() {
        let (table, _) =
            pseudo_label_embedding(&blobs(0), 1, &GmmConfig::default(), &mut seeded(0, 1)).unwrap();
        assert!(table.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn separated_blobs_recover_membership() {
        let (table, gmm) =
            pseudo_label_embedding(&blobs(1), 2, &GmmConfig::default(), &mut seeded(1, 1)).unwrap();
        // Identify the left component by its mean.
        let left = if gmm.means[[0, 0]] < gmm.means[[1, 0]] { 0 } else { 1 };
        assert!((table[[0, left]] - 1.0).abs() < 1e-6);
        assert!((table[[1, left]] - 0.25).abs() < 1e-6);
        for w in gmm.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", gmm.log_likelihood_trace);
        }
    }

    #[test]
    fn identical_points_hit_the_variance_floor() {
        let x = Array2::from_elem((10, 2), 3.0);
        let gmm = DiagonalGmm::fit(x.view(), 2, &GmmConfig::default(), &mut seeded(0, 0)).unwrap();
        assert!(gmm.variances.iter().all(|&v| v >= 1e-6 && v.is_finite()));
        assert!(gmm.log_likelihood_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_points_rejected() {
        let x = Array2::zeros((2, 1));
        assert!(DiagonalGmm::fit(x.view(), 3, &GmmConfig::default(), &mut seeded(0, 0)).is_err());
    }
}
