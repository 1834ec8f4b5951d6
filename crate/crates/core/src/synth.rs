//! Synthetic multi-task benchmarks with known structure.
//!
//! `L` categories are isotropic Gaussian blobs. Every `k`-subset of
//! categories is a task; each training sample is exposed to exactly one
//! task, chosen uniformly among those whose active set holds its category.
//! A task's nominal test samples are those of its active categories, the
//! rest of the shared test pool is anomalous.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::types::{
    Benchmark, FeatureVector, TaskCollection, TaskDataset, TaskTestSpec, TestPool,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: usize,
    pub dim: usize,
    pub k: usize,
    /// Samples drawn per category before the test split.
    pub n_per_category: usize,
    /// Explicit blob centers, one per category; default is [`default_centers`].
    pub centers: Option<Vec<Vec<f64>>>,
    pub center_scale: f64,
    pub stddev: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 10,
            dim: 10,
            k: 1,
            n_per_category: 1000,
            centers: None,
            center_scale: 3.0,
            stddev: 1.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.dim == 0 {
            return Err(Error::Config("categories and dim must be positive".into()));
        }
        if self.k == 0 || self.k > self.categories {
            return Err(Error::Config(format!(
                "k = {} must lie in 1..={}",
                self.k, self.categories
            )));
        }
        if self.stddev.is_nan() || self.stddev <= 0.0 {
            return Err(Error::Config("stddev must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if let Some(centers) = &self.centers {
            if centers.len() != self.categories || centers.iter().any(|c| c.len() != self.dim) {
                return Err(Error::Config(format!(
                    "expected {} centers of length {}",
                    self.categories, self.dim
                )));
            }
            for i in 0..centers.len() {
                for j in i + 1..centers.len() {
                    if centers[i] == centers[j] {
                        return Err(Error::Config(format!("centers {i} and {j} coincide")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `scale · e_ℓ` for `d ≥ L` (one-hot in the first `L` coordinates);
/// for `d < L`, random directions of norm `scale`.
pub fn default_centers(categories: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    if dim >= categories {
        return (0..categories)
            .map(|l| {
                let mut c = vec![0.0; dim];
                c[l] = scale;
                c
            })
            .collect();
    }
    let mut rng = seeded(seed, stream::SYNTH + 100);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..categories)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| scale * x / norm).collect()
        })
        .collect()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur: Vec<u32> = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i as u32);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, stream::SYNTH);
    let centers = cfg
        .centers
        .clone()
        .unwrap_or_else(|| default_centers(cfg.categories, cfg.dim, cfg.center_scale, cfg.seed));
    let noise = Normal::new(0.0, cfg.stddev).expect("positive stddev");

    let active = combinations(cfg.categories, cfg.k);
    let mut containing: Vec<Vec<usize>> = vec![Vec::new(); cfg.categories];
    for (t, set) in active.iter().enumerate() {
        for &c in set {
            containing[c as usize].push(t);
        }
    }

    let n_test = (cfg.n_per_category as f64 * cfg.test_fraction).round() as usize;
    let mut test = TestPool::default();
    let mut samples: Vec<Vec<FeatureVector>> = vec![Vec::new(); active.len()];
    let mut labels: Vec<Vec<u32>> = vec![Vec::new(); active.len()];
    for (cat, center) in centers.iter().enumerate() {
        let mut points: Vec<FeatureVector> = (0..cfg.n_per_category)
            .map(|_| FeatureVector::new(center.iter().map(|c| c + noise.sample(&mut rng)).collect()))
            .collect();
        points.shuffle(&mut rng);
        let train = points.split_off(n_test);
        for x in points {
            test.samples.push(x);
            test.categories.push(cat as u32);
        }
        for x in train {
            let t = containing[cat][rng.random_range(0..containing[cat].len())];
            samples[t].push(x);
            labels[t].push(cat as u32);
        }
    }

    if let Some(t) = samples.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "task {t} received no training samples; increase n_per_category"
        )));
    }
    let tasks = samples
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(t, (s, l))| TaskDataset::new(t, s).with_labels(l))
        .collect();
    let task_tests = active
        .iter()
        .map(|set| TaskTestSpec {
            nominal: set.clone(),
            anomalous: (0..cfg.categories as u32).filter(|c| !set.contains(c)).collect(),
            members: None,
        })
        .collect();
    let task_names = active
        .iter()
        .map(|set| {
            set.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("+")
        })
        .collect();
    let meta: BTreeMap<String, String> = [
        ("generator", "blobs".to_string()),
        ("L", cfg.categories.to_string()),
        ("k", cfg.k.to_string()),
        ("d", cfg.dim.to_string()),
        ("n_per_category", cfg.n_per_category.to_string()),
        ("stddev", cfg.stddev.to_string()),
        ("center_scale", cfg.center_scale.to_string()),
        ("test_fraction", cfg.test_fraction.to_string()),
        ("seed", cfg.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    Ok(Benchmark {
        train: TaskCollection::from_tasks(tasks),
        test,
        task_tests,
        ground_truth_active: Some(active),
        task_names: Some(task_names),
        meta,
    })
}

/// Number of active categories tasks `i` and `j` share.
pub fn ground_truth_overlap(benchmark: &Benchmark, i: usize, j: usize) -> Result<usize> {
    let active = benchmark
        .ground_truth_active
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("benchmark has no ground truth".into()))?;
    let get = |t: usize| {
        active.get(t).ok_or(Error::UnknownTask {
            task_id: t,
            num_tasks: active.len(),
        })
    };
    let (a, b) = (get(i)?, get(j)?);
    Ok(a.iter().filter(|c| b.contains(c)).count())
}

/// Pairwise overlap counts as a matrix.
pub fn ground_truth_overlap_matrix(benchmark: &Benchmark) -> Result<ndarray::Array2<f64>> {
    let m = benchmark.num_tasks();
    let mut out = ndarray::Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            out[[i, j]] = ground_truth_overlap(benchmark, i, j)? as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize) -> SynthConfig {
        SynthConfig {
            k,
            n_per_category: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn task_counts_match_binomials() {
        assert_eq!(combinations(10, 2).len(), 45);
        assert_eq!(combinations(10, 3).len(), 120);
        assert_eq!(combinations(10, 4).len(), 210);
        assert_eq!(combinations(10, 5).len(), 252);
        assert_eq!(combinations(4, 2)[0], vec![0, 1]);
        assert_eq!(combinations(4, 2)[5], vec![2, 3]);
        assert_eq!(generate(&small(2)).unwrap().num_tasks(), 45);
    }

    #[test]
    fn k_equals_l_is_one_task() {
        let b = generate(&small(10)).unwrap();
        assert_eq!(b.num_tasks(), 1);
        assert_eq!(b.train.tasks()[0].len(), 10 * 160);
        let (nom, anom) = b.test_split(0);
        assert_eq!((nom.len(), anom.len()), (400, 0));
    }

    #[test]
    fn exposure_partition_and_labels() {
        let b = generate(&small(3)).unwrap();
        let total: usize = b.train.tasks().iter().map(TaskDataset::len).sum();
        assert_eq!(total, 10 * 160);
        assert_eq!(b.test.len(), 10 * 40);
        let active = b.ground_truth_active.as_ref().unwrap();
        for (t, task) in b.train.tasks().iter().enumerate() {
            for &l in task.labels.as_ref().unwrap() {
                assert!(active[t].contains(&l));
            }
        }
        b.train.validate().unwrap();
    }

    #[test]
    fn reproducible() {
        let a = generate(&small(2)).unwrap();
        let b = generate(&small(2)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small(2) }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn overlaps() {
        let b = generate(&small(3)).unwrap();
        let active = b.ground_truth_active.clone().unwrap();
        let find = |s: &[u32]| active.iter().position(|a| a == s).unwrap();
        let (a, c, d) = (find(&[0, 1, 2]), find(&[2, 3, 4]), find(&[5, 6, 7]));
        assert_eq!(ground_truth_overlap(&b, a, a).unwrap(), 3);
        assert_eq!(ground_truth_overlap(&b, a, c).unwrap(), 1);
        assert_eq!(ground_truth_overlap(&b, a, d).unwrap(), 0);
        assert!(ground_truth_overlap(&b, a, 1000).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { k: 11, ..small(1) }).is_err());
        assert!(generate(&SynthConfig { k: 0, ..small(1) }).is_err());
        let centers = Some(vec![vec![0.0; 10]; 10]);
        assert!(generate(&SynthConfig { centers, ..small(1) }).is_err());
    }

    #[test]
    fn low_dim_centers_have_requested_norm() {
        let c = default_centers(10, 3, 3.0, 0);
        for v in c {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 3.0).abs() < 1e-12);
        }
    }
}
