//! Conditional masked affine autoregressive flow.
//!
//! Density evaluation maps data `x` to noise `u`. Each block applies
//! `u_i = (y_i − μ_i) · exp(−α_i)` where `μ` and `α` come from masked
//! conditioner networks that only see `y_{<i}`, then an activation
//! normalization `z = u · exp(s) + b`. Coordinates are reversed between
//! blocks. The task enters through `μ ← μ ⊙ tanh(e_scale) + tanh(e_bias)`
//! with per-block, per-task vectors, and through a task-specific
//! unit-covariance Gaussian prior on the final `z`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NllBatch, NllModel, LN_2PI};
use crate::error::{Error, Result};
use crate::nn::{rows_to_matrix, Activation, Dense, DenseNet, Optimizer, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Width of every hidden conditioner layer.
    pub hidden: usize,
    /// Dense layers per conditioner network, output layer included.
    pub conditioner_layers: usize,
    pub alpha_clamp: f64,
    /// Prior means are drawn uniformly from `[−prior_range, prior_range]^d`.
    pub prior_range: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks: 5,
            hidden: 64,
            conditioner_layers: 4,
            alpha_clamp: 7.0,
            prior_range: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    /// Conditioner producing `μ` (before task conditioning).
    pub shift: DenseNet,
    /// Conditioner producing `α` (before clamping).
    pub log_scale: DenseNet,
    pub norm_log_scale: Array1<f64>,
    pub norm_bias: Array1<f64>,
    /// `(tasks, d)` conditioning vectors.
    pub cond_scale: Array2<f64>,
    pub cond_bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFlow {
    pub blocks: Vec<FlowBlock>,
    /// `(tasks, d)` prior means.
    pub prior_means: Array2<f64>,
    pub alpha_clamp: f64,
}

/// Autoregressive connectivity masks for a `d → hidden… → d` network.
///
/// Input `i` has degree `i + 1`, hidden unit `k` degree `1 + k mod (d − 1)`.
/// A hidden unit sees inputs of degree at most its own; output `i` sees
/// hidden units of degree strictly below `i + 1`, so it depends on `x_{<i}`.
pub fn made_masks(d: usize, hidden: usize, layers: usize) -> Vec<Array2<f64>> {
    let input: Vec<usize> = (1..=d).collect();
    let hid: Vec<usize> = (0..hidden).map(|k| 1 + k % (d.max(2) - 1)).collect();
    let connect = |outs: &[usize], ins: &[usize], strict: bool| {
        Array2::from_shape_fn((outs.len(), ins.len()), |(o, i)| {
            let ok = if strict { outs[o] > ins[i] } else { outs[o] >= ins[i] };
            if ok {
                1.0
            } else {
                0.0
            }
        })
    };
    let mut masks = Vec::with_capacity(layers);
    if layers == 1 {
        masks.push(connect(&input, &input, true));
        return masks;
    }
    masks.push(connect(&hid, &input, false));
    for _ in 1..layers - 1 {
        masks.push(connect(&hid, &hid, false));
    }
    masks.push(connect(&input, &hid, true));
    masks
}

fn conditioner<R: Rng + ?Sized>(d: usize, cfg: &FlowConfig, rng: &mut R) -> Result<DenseNet> {
    let masks = made_masks(d, cfg.hidden, cfg.conditioner_layers);
    let n = masks.len();
    let layers = masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| {
            let (outs, ins) = mask.dim();
            let last = i + 1 == n;
            let act = if last { Activation::Identity } else { Activation::Tanh };
            let mut layer = Dense::new(ins, outs, act, 0.0, rng);
            if last {
                // Start every block at the identity map.
                layer.weights.fill(0.0);
            }
            layer.with_mask(mask)
        })
        .collect();
    DenseNet::new(layers)
}

fn reverse_columns(a: &Array2<f64>) -> Array2<f64> {
    a.slice(s![.., ..;-1]).to_owned()
}

struct BlockTape {
    shift_tape: Tape,
    scale_tape: Tape,
    raw_mu: Array2<f64>,
    raw_alpha: Array2<f64>,
    alpha: Array2<f64>,
    u: Array2<f64>,
    tanh_scale: Array2<f64>,
    tanh_bias: Array2<f64>,
}

pub struct FlowTape {
    blocks: Vec<BlockTape>,
    z: Array2<f64>,
}

impl AffineFlow {
    pub fn new<R: Rng + ?Sized, P: Rng + ?Sized>(
        feature_dim: usize,
        num_tasks: usize,
        cfg: &FlowConfig,
        rng: &mut R,
        prior_rng: &mut P,
    ) -> Result<Self> {
        if feature_dim == 0 || num_tasks == 0 || cfg.blocks == 0 || cfg.conditioner_layers == 0 {
            return Err(Error::Config("flow needs positive dims, tasks, blocks and layers".into()));
        }
        let d = feature_dim;
        let blocks = (0..cfg.blocks)
            .map(|_| {
                Ok(FlowBlock {
                    shift: conditioner(d, cfg, rng)?,
                    log_scale: conditioner(d, cfg, rng)?,
                    norm_log_scale: Array1::zeros(d),
                    norm_bias: Array1::zeros(d),
                    cond_scale: Array2::ones((num_tasks, d)),
                    cond_bias: Array2::zeros((num_tasks, d)),
                })
            })
            .collect::<Result<_>>()?;
        let r = cfg.prior_range;
        let prior_means = Array2::from_shape_fn((num_tasks, d), |_| {
            if r > 0.0 {
                prior_rng.random_range(-r..=r)
            } else {
                0.0
            }
        });
        Ok(AffineFlow {
            blocks,
            prior_means,
            alpha_clamp: cfg.alpha_clamp,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prior_means.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.prior_means.nrows()
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

    /// Maps a batch of data rows to noise; returns `(z, log|det ∂z/∂x|, tape)`.
    fn inverse_batch(&self, x: Array2<f64>, tasks: &[usize]) -> Result<(Array2<f64>, Vec<f64>, FlowTape)> {
        let mut y = x;
        let mut logdet = vec![0.0; tasks.len()];
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (b, block) in self.blocks.iter().enumerate() {
            let (z, tape) = self.block_inverse(block, &y, tasks, &mut logdet)?;
            tapes.push(tape);
            y = if b < last { reverse_columns(&z) } else { z };
        }
        Ok((
            y.clone(),
            logdet,
            FlowTape {
                blocks: tapes,
                z: y,
            },
        ))
    }

    fn block_inverse(
        &self,
        block: &FlowBlock,
        y: &Array2<f64>,
        tasks: &[usize],
        logdet: &mut [f64],
    ) -> Result<(Array2<f64>, BlockTape)> {
        let (raw_mu, shift_tape) = block.shift.forward(y.view())?;
        let (raw_alpha, scale_tape) = block.log_scale.forward(y.view())?;
        let d = y.ncols();
        let pick = |table: &Array2<f64>| {
            Array2::from_shape_fn((tasks.len(), d), |(i, j)| table[[tasks[i], j]].tanh())
        };
        let tanh_scale = pick(&block.cond_scale);
        let tanh_bias = pick(&block.cond_bias);
        let c = self.alpha_clamp;
        let alpha = raw_alpha.mapv(|a| a.clamp(-c, c));
        let mu = &raw_mu * &tanh_scale + &tanh_bias;
        let u = (y - &mu) * alpha.mapv(|a| (-a).exp());
        let z = &u * &block.norm_log_scale.mapv(f64::exp) + &block.norm_bias;
        let norm_ld = block.norm_log_scale.sum();
        for (ld, row) in logdet.iter_mut().zip(alpha.outer_iter()) {
            *ld += norm_ld - row.sum();
        }
        Ok((
            z,
            BlockTape {
                shift_tape,
                scale_tape,
                raw_mu,
                raw_alpha,
                alpha,
                u,
                tanh_scale,
                tanh_bias,
            },
        ))
    }

    /// Noise `u` and `log|det ∂u/∂x|` for one sample of task `task_id`.
    pub fn inverse(&self, task_id: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_task(task_id)?;
        self.check_dim(x.len())?;
        let (z, ld, _) = self.inverse_batch(rows_to_matrix(&[x], x.len()), &[task_id])?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.feature_dim() {
            return Err(Error::Shape {
                context: "feature vector",
                expected: self.feature_dim(),
                found,
            });
        }
        Ok(())
    }

    /// Maps noise back to data by solving each block coordinate by coordinate.
    pub fn forward(&self, task_id: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_task(task_id)?;
        self.check_dim(z.len())?;
        let d = z.len();
        let mut cur = Array1::from(z.to_vec());
        let c = self.alpha_clamp;
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let u = (&cur - &block.norm_bias) * block.norm_log_scale.mapv(|s| (-s).exp());
            let mut y = Array2::<f64>::zeros((1, d));
            for i in 0..d {
                let mu_raw = block.shift.predict(y.view())?[[0, i]];
                let alpha = block.log_scale.predict(y.view())?[[0, i]].clamp(-c, c);
                let mu = mu_raw * block.cond_scale[[task_id, i]].tanh()
                    + block.cond_bias[[task_id, i]].tanh();
                y[[0, i]] = u[i] * alpha.exp() + mu;
            }
            let y = y.row(0).to_owned();
            cur = if b > 0 { y.slice(s![..;-1]).to_owned() } else { y };
        }
        Ok(cur.to_vec())
    }

    fn prior_logpdf(&self, task_id: usize, z: ndarray::ArrayView1<f64>) -> f64 {
        let m = self.prior_means.row(task_id);
        z.iter()
            .zip(m)
            .map(|(zi, mi)| -0.5 * LN_2PI - 0.5 * (zi - mi) * (zi - mi))
            .sum()
    }

    pub fn logpdf_many<S: AsRef<[f64]>>(&self, task_id: usize, xs: &[S]) -> Result<Vec<f64>> {
        self.check_task(task_id)?;
        if let Some(bad) = xs.iter().find(|x| x.as_ref().len() != self.feature_dim()) {
            self.check_dim(bad.as_ref().len())?;
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tasks = vec![task_id; xs.len()];
        let (z, ld, _) = self.inverse_batch(rows_to_matrix(xs, self.feature_dim()), &tasks)?;
        Ok(z.outer_iter()
            .zip(ld)
            .map(|(row, l)| self.prior_logpdf(task_id, row) + l)
            .collect())
    }
}

/// `(u, log|det ∂u/∂x|)`.
pub fn flow_inverse(flow: &AffineFlow, task_id: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    flow.inverse(task_id, x)
}

/// Inverse of [`flow_inverse`]: noise to data.
pub fn flow_forward(flow: &AffineFlow, task_id: usize, u: &[f64]) -> Result<Vec<f64>> {
    flow.forward(task_id, u)
}

pub fn flow_logpdf(flow: &AffineFlow, task_id: usize, x: &[f64]) -> Result<f64> {
    Ok(flow.logpdf_many(task_id, &[x])?[0])
}

struct FlowGrads {
    shift: Vec<crate::nn::NetGrad>,
    scale: Vec<crate::nn::NetGrad>,
    norm_log_scale: Vec<Array1<f64>>,
    norm_bias: Vec<Array1<f64>>,
    cond_scale: Vec<Array2<f64>>,
    cond_bias: Vec<Array2<f64>>,
}

impl AffineFlow {
    fn gradients(&self, tape: FlowTape, tasks: &[usize]) -> Result<FlowGrads> {
        let n = tasks.len() as f64;
        let mut prior = Array2::zeros(tape.z.dim());
        for (i, &t) in tasks.iter().enumerate() {
            prior.row_mut(i).assign(&self.prior_means.row(t));
        }
        // ∂(mean NLL)/∂z for the Gaussian prior term.
        let mut g = (&tape.z - &prior) / n;
        let k = self.blocks.len();
        let mut grads = FlowGrads {
            shift: Vec::with_capacity(k),
            scale: Vec::with_capacity(k),
            norm_log_scale: Vec::with_capacity(k),
            norm_bias: Vec::with_capacity(k),
            cond_scale: Vec::with_capacity(k),
            cond_bias: Vec::with_capacity(k),
        };
        let c = self.alpha_clamp;
        for (b, (block, bt)) in self.blocks.iter().zip(tape.blocks).enumerate().rev() {
            if b + 1 < k {
                g = reverse_columns(&g);
            }
            let scale = block.norm_log_scale.mapv(f64::exp);
            let gu = &g * &scale;
            let g_nls = (&g * &bt.u).sum_axis(Axis(0)) * &scale - 1.0;
            let g_nb = g.sum_axis(Axis(0));

            let inv = bt.alpha.mapv(|a| (-a).exp());
            let mut g_alpha = -(&gu * &bt.u) + 1.0 / n;
            g_alpha.zip_mut_with(&bt.raw_alpha, |ga, &a| {
                if a < -c || a > c {
                    *ga = 0.0;
                }
            });
            let g_mu = -(&gu * &inv);
            let mut g_y = &gu * &inv;
            let g_raw_mu = &g_mu * &bt.tanh_scale;

            let mut g_cs = Array2::zeros(block.cond_scale.dim());
            let mut g_cb = Array2::zeros(block.cond_bias.dim());
            for (i, &t) in tasks.iter().enumerate() {
                for j in 0..g_mu.ncols() {
                    let ts = bt.tanh_scale[[i, j]];
                    let tb = bt.tanh_bias[[i, j]];
                    g_cs[[t, j]] += g_mu[[i, j]] * bt.raw_mu[[i, j]] * (1.0 - ts * ts);
                    g_cb[[t, j]] += g_mu[[i, j]] * (1.0 - tb * tb);
                }
            }

            let (shift_grad, gy_shift) = block.shift.backward(&bt.shift_tape, g_raw_mu.view())?;
            let (scale_grad, gy_scale) = block.log_scale.backward(&bt.scale_tape, g_alpha.view())?;
            g_y += &gy_shift;
            g_y += &gy_scale;

            grads.shift.push(shift_grad);
            grads.scale.push(scale_grad);
            grads.norm_log_scale.push(g_nls);
            grads.norm_bias.push(g_nb);
            grads.cond_scale.push(g_cs);
            grads.cond_bias.push(g_cb);
            g = g_y;
        }
        grads.shift.reverse();
        grads.scale.reverse();
        grads.norm_log_scale.reverse();
        grads.norm_bias.reverse();
        grads.cond_scale.reverse();
        grads.cond_bias.reverse();
        Ok(grads)
    }

    fn batch_matrix(&self, batch: &NllBatch<'_>) -> Array2<f64> {
        rows_to_matrix(&batch.xs, self.feature_dim())
    }
}

impl NllModel for AffineFlow {
    type Tape = FlowTape;

    fn nll_forward(&self, batch: &NllBatch<'_>) -> Result<(Vec<f64>, Self::Tape)> {
        let (z, ld, tape) = self.inverse_batch(self.batch_matrix(batch), &batch.tasks)?;
        let nll = z
            .outer_iter()
            .zip(&batch.tasks)
            .zip(ld)
            .map(|((row, &t), l)| -(self.prior_logpdf(t, row) + l))
            .collect();
        Ok((nll, tape))
    }

    fn nll_step(&mut self, tape: Self::Tape, batch: &NllBatch<'_>, opt: &mut Optimizer) -> Result<()> {
        let grads = self.gradients(tape, &batch.tasks)?;
        let mut g: Vec<&[f64]> = Vec::new();
        for b in 0..self.blocks.len() {
            g.extend(grads.shift[b].slices());
            g.extend(grads.scale[b].slices());
            g.push(grads.norm_log_scale[b].as_slice().unwrap());
            g.push(grads.norm_bias[b].as_slice().unwrap());
            g.push(grads.cond_scale[b].as_slice().unwrap());
            g.push(grads.cond_bias[b].as_slice().unwrap());
        }
        let per_block = g.len() / self.blocks.len();
        let mut p: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.blocks {
            p.extend(block.shift.param_slices_mut());
            p.extend(block.log_scale.param_slices_mut());
            p.push(block.norm_log_scale.as_slice_mut().unwrap());
            p.push(block.norm_bias.as_slice_mut().unwrap());
            p.push(block.cond_scale.as_slice_mut().unwrap());
            p.push(block.cond_bias.as_slice_mut().unwrap());
        }
        opt.step_named(&mut p, &g, |i| format!("flow block {} group {}", i / per_block, i % per_block))
    }

    /// Sets every normalization layer so its output on the batch has zero
    /// mean and unit variance per coordinate.
    fn data_init(&mut self, batch: &NllBatch<'_>) -> Result<()> {
        let mut y = self.batch_matrix(batch);
        let mut scratch = vec![0.0; batch.tasks.len()];
        let last = self.blocks.len() - 1;
        for b in 0..self.blocks.len() {
            let (_, tape) = self.block_inverse(&self.blocks[b], &y, &batch.tasks, &mut scratch)?;
            let mean = tape.u.mean_axis(Axis(0)).expect("non-empty batch");
            let std = tape.u.std_axis(Axis(0), 0.0);
            let block = &mut self.blocks[b];
            block.norm_log_scale = std.mapv(|s| -(s.max(1e-6)).ln());
            block.norm_bias = -&mean * &block.norm_log_scale.mapv(f64::exp);
            let z = &tape.u * &block.norm_log_scale.mapv(f64::exp) + &block.norm_bias;
            y = if b < last { reverse_columns(&z) } else { z };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_flow(d: usize, tasks: usize, seed: u64) -> AffineFlow {
        let cfg = FlowConfig {
            blocks: 3,
            hidden: 8,
            ..FlowConfig::default()
        };
        let mut rng = seeded(seed, 0);
        let mut f = AffineFlow::new(d, tasks, &cfg, &mut rng, &mut seeded(seed, 1)).unwrap();
        // Perturb everything so the flow is far from the identity.
        for block in &mut f.blocks {
            for net in [&mut block.shift, &mut block.log_scale] {
                for layer in net.layers_mut() {
                    let mask = layer.mask.clone().unwrap();
                    layer.weights.mapv_inplace(|_| rng.random_range(-0.8..0.8));
                    layer.weights *= &mask;
                    layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
            }
            block.norm_log_scale.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            block.norm_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            block.cond_scale.mapv_inplace(|_| rng.random_range(-2.0..2.0));
            block.cond_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        f
    }

    fn constant_scale_flow(d: usize, alpha: f64) -> AffineFlow {
        let cfg = FlowConfig {
            blocks: 1,
            hidden: 4,
            prior_range: 0.0,
            ..FlowConfig::default()
        };
        let mut f = AffineFlow::new(d, 1, &cfg, &mut seeded(0, 0), &mut seeded(0, 1)).unwrap();
        let out = f.blocks[0].log_scale.layers_mut().last_mut().unwrap();
        out.bias.fill(alpha);
        f
    }

    #[test]
    fn masks_are_autoregressive() {
        for d in [1, 2, 5] {
            let masks = made_masks(d, 7, 4);
            let mut reach = masks[0].clone();
            for m in &masks[1..] {
                reach = m.dot(&reach).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            }
            for i in 0..d {
                for j in i..d {
                    assert_eq!(reach[[i, j]], 0.0, "d={d} output {i} sees input {j}");
                }
            }
        }
    }

    #[test]
    fn fresh_flow_is_identity() {
        let f = constant_scale_flow(3, 0.0);
        let x = [0.4, -1.0, 2.5];
        let (u, ld) = flow_inverse(&f, 0, &x).unwrap();
        assert_eq!(u, x.to_vec());
        assert_eq!(ld, 0.0);
        let lp = flow_logpdf(&constant_scale_flow(1, 0.0), 0, &[0.0]).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn constant_scale_example() {
        let ln2 = std::f64::consts::LN_2;
        let f = constant_scale_flow(3, ln2);
        let (u, ld) = flow_inverse(&f, 0, &[2.0, -4.0, 1.0]).unwrap();
        for (a, b) in u.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ld + 3.0 * ln2).abs() < 1e-12);
        let f1 = constant_scale_flow(1, ln2);
        let lp = flow_logpdf(&f1, 0, &[0.0]).unwrap();
        assert!((lp - (-0.5 * LN_2PI - ln2)).abs() < 1e-12);
        let x = 1.3;
        let expected = -0.5 * LN_2PI - 0.5 * (x / 2.0) * (x / 2.0) - ln2;
        assert!((flow_logpdf(&f1, 0, &[x]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn prior_mean_is_the_mode() {
        let mut f = constant_scale_flow(1, 0.0);
        f.prior_means[[0, 0]] = 0.7;
        let at = |x: f64| flow_logpdf(&f, 0, &[x]).unwrap();
        assert!(at(0.7) > at(0.69) && at(0.7) > at(0.71));
    }

    #[test]
    fn forward_inverts_inverse() {
        let f = random_flow(4, 2, 5);
        let mut rng = seeded(6, 0);
        for t in 0..2 {
            for _ in 0..20 {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (u, _) = f.inverse(t, &x).unwrap();
                let back = f.forward(t, &u).unwrap();
                for (a, b) in x.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-9, "{x:?} vs {back:?}");
                }
            }
        }
    }

    #[test]
    fn clamped_scales_stay_finite() {
        let f = constant_scale_flow(2, 50.0);
        let (u, ld) = f.inverse(0, &[1e3, -1e3]).unwrap();
        assert!(u.iter().all(|v| v.is_finite()));
        assert!((ld + 14.0).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let f = random_flow(3, 2, 8);
        let mut rng = seeded(9, 0);
        let data: Vec<crate::types::FeatureVector> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>().into())
            .collect();
        let batch = NllBatch {
            tasks: vec![0, 1, 1, 0, 1],
            xs: data.iter().collect(),
        };
        let (_, tape) = f.nll_forward(&batch).unwrap();
        let grads = f.gradients(tape, &batch.tasks).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64| {
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "fd {fd} vs analytic {an}");
        };
        let fd = |perturb: &dyn Fn(&mut AffineFlow, f64)| {
            let mut up = f.clone();
            let mut dn = f.clone();
            perturb(&mut up, h);
            perturb(&mut dn, -h);
            (up.mean_nll(&batch).unwrap() - dn.mean_nll(&batch).unwrap()) / (2.0 * h)
        };
        for b in 0..3 {
            check(
                fd(&|m, e| m.blocks[b].norm_log_scale[1] += e),
                grads.norm_log_scale[b][1],
            );
            check(fd(&|m, e| m.blocks[b].norm_bias[2] += e), grads.norm_bias[b][2]);
            check(fd(&|m, e| m.blocks[b].cond_scale[[1, 2]] += e), grads.cond_scale[b][[1, 2]]);
            check(fd(&|m, e| m.blocks[b].cond_bias[[0, 1]] += e), grads.cond_bias[b][[0, 1]]);
            check(
                fd(&|m, e| m.blocks[b].shift.layers_mut()[0].bias[3] += e),
                grads.shift[b].layers[0].bias[3],
            );
            check(
                fd(&|m, e| m.blocks[b].log_scale.layers_mut()[3].bias[2] += e),
                grads.scale[b].layers[3].bias[2],
            );
        }
    }

    #[test]
    fn data_init_standardizes() {
        let mut f = random_flow(2, 1, 3);
        let mut rng = seeded(4, 0);
        let data: Vec<crate::types::FeatureVector> = (0..200)
            .map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(-1.0..1.0)].into())
            .collect();
        let batch = NllBatch {
            tasks: vec![0; 200],
            xs: data.iter().collect(),
        };
        f.data_init(&batch).unwrap();
        let (z, _, _) = f.inverse_batch(f.batch_matrix(&batch), &batch.tasks).unwrap();
        for j in 0..2 {
            let col = z.column(j);
            assert!(col.mean().unwrap().abs() < 1e-9);
            assert!((col.std(0.0) - 1.0).abs() < 1e-6);
        }
    }
}
