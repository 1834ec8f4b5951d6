use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NllBatch, NllModel, LN_2PI};
use crate::error::{Error, Result};
use crate::nn::{rows_to_matrix, Activation, DenseNet, LayerSpec, NetGrad, Optimizer, Tape};
use crate::types::TaskCollection;

/// Smallest variance any Gaussian baseline will use.
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn min_log_var() -> f64 {
    VARIANCE_FLOOR.ln()
}

/// Diagonal Gaussian log-density with log-variances `log_var`.
pub fn gaussian_logpdf(mean: &[f64], log_var: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .zip(x)
        .map(|((&m, &s), &xi)| {
            let s = s.max(min_log_var());
            -0.5 * LN_2PI - 0.5 * s - (xi - m) * (xi - m) / (2.0 * s.exp())
        })
        .sum()
}

/// Mean and log-variance predicted from a task embedding by an MLP with
/// two linear output heads (stored as one `2d`-wide output layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussian {
    pub net: DenseNet,
    /// Trainable task embeddings, one row per task.
    pub embeddings: Array2<f64>,
    pub feature_dim: usize,
}

impl ConditionalGaussian {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        embeddings: Array2<f64>,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut spec: Vec<LayerSpec> = hidden
            .iter()
            .map(|&w| LayerSpec::new(w, Activation::Relu, 0.0))
            .collect();
        spec.push(LayerSpec::new(2 * feature_dim, Activation::Identity, 0.0));
        Ok(ConditionalGaussian {
            net: DenseNet::mlp(embeddings.ncols(), &spec, rng)?,
            embeddings,
            feature_dim,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.embeddings.nrows()
    }

    /// `(μ, σ²)` for an embedding, with the variance floor applied.
    pub fn moments(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.predict_one(embedding)?;
        let d = self.feature_dim;
        let var = out[d..]
            .iter()
            .map(|&s| s.max(min_log_var()).exp())
            .collect();
        Ok((out[..d].to_vec(), var))
    }

    pub fn logpdf_many<S: AsRef<[f64]>>(&self, task_id: usize, xs: &[S]) -> Result<Vec<f64>> {
        let out = self.net.predict_one(self.embeddings.row(task_id).as_slice().unwrap())?;
        let d = self.feature_dim;
        xs.iter()
            .map(|x| {
                let x = x.as_ref();
                if x.len() != d {
                    return Err(Error::Shape {
                        context: "feature vector",
                        expected: d,
                        found: x.len(),
                    });
                }
                Ok(gaussian_logpdf(&out[..d], &out[d..], x))
            })
            .collect()
    }

    fn heads(&self, tasks: &[usize]) -> Result<(Array2<f64>, Tape)> {
        let e = Array2::from_shape_fn((tasks.len(), self.embeddings.ncols()), |(i, j)| {
            self.embeddings[[tasks[i], j]]
        });
        self.net.forward(e.view())
    }

    /// Gradients of the batch-mean NLL w.r.t. network and embeddings.
    pub(crate) fn gradients(&self, tape: &Tape, out: &Array2<f64>, batch: &NllBatch<'_>) -> Result<(NetGrad, Array2<f64>)> {
        let d = self.feature_dim;
        let n = batch.tasks.len() as f64;
        let x = rows_to_matrix(&batch.xs, d);
        let mut g = Array2::zeros(out.dim());
        for i in 0..batch.tasks.len() {
            for j in 0..d {
                let mu = out[[i, j]];
                let s = out[[i, d + j]];
                let clamped = s < min_log_var();
                let v = s.max(min_log_var()).exp();
                let r = x[[i, j]] - mu;
                g[[i, j]] = -r / v / n;
                g[[i, d + j]] = if clamped { 0.0 } else { (0.5 - r * r / (2.0 * v)) / n };
            }
        }
        let (net_grad, input_grad) = self.net.backward(tape, g.view())?;
        let mut emb_grad = Array2::zeros(self.embeddings.dim());
        for (i, &t) in batch.tasks.iter().enumerate() {
            let mut row = emb_grad.row_mut(t);
            row += &input_grad.row(i);
        }
        Ok((net_grad, emb_grad))
    }
}

impl NllModel for ConditionalGaussian {
    type Tape = (Tape, Array2<f64>);

    fn nll_forward(&self, batch: &NllBatch<'_>) -> Result<(Vec<f64>, Self::Tape)> {
        let (out, tape) = self.heads(&batch.tasks)?;
        let d = self.feature_dim;
        let nll = batch
            .xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let row = out.row(i);
                let row = row.as_slice().unwrap();
                -gaussian_logpdf(&row[..d], &row[d..], x)
            })
            .collect();
        Ok((nll, (tape, out)))
    }

    fn nll_step(&mut self, (tape, out): Self::Tape, batch: &NllBatch<'_>, opt: &mut Optimizer) -> Result<()> {
        let (net_grad, emb_grad) = self.gradients(&tape, &out, batch)?;
        let mut grads = net_grad.slices();
        grads.push(emb_grad.as_slice().unwrap());
        let layers = self.net.layers().len();
        let mut params = self.net.param_slices_mut();
        params.push(self.embeddings.as_slice_mut().unwrap());
        opt.step_named(&mut params, &grads, |i| {
            if i == 2 * layers {
                "embedding table".into()
            } else {
                format!("layer {} {}", i / 2, if i % 2 == 0 { "weights" } else { "bias" })
            }
        })
    }
}

/// Independent maximum-likelihood diagonal Gaussian per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparateGaussian {
    /// `(tasks, d)`.
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

impl SeparateGaussian {
    pub fn fit(c: &TaskCollection) -> Result<Self> {
        c.validate()?;
        let d = c.feature_dim();
        let mut means = Array2::zeros((c.num_tasks(), d));
        let mut variances = Array2::zeros((c.num_tasks(), d));
        for (t, task) in c.tasks().iter().enumerate() {
            let x = rows_to_matrix(&task.samples, d);
            let mean: Array1<f64> = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
            let var = x.var_axis(ndarray::Axis(0), 0.0).mapv(|v| v.max(VARIANCE_FLOOR));
            means.slice_mut(s![t, ..]).assign(&mean);
            variances.slice_mut(s![t, ..]).assign(&var);
        }
        Ok(SeparateGaussian { means, variances })
    }

    pub fn logpdf_many<S: AsRef<[f64]>>(&self, task_id: usize, xs: &[S]) -> Result<Vec<f64>> {
        let mean = self.means.row(task_id).to_vec();
        let log_var: Vec<f64> = self.variances.row(task_id).iter().map(|v| v.ln()).collect();
        xs.iter()
            .map(|x| {
                let x = x.as_ref();
                if x.len() != mean.len() {
                    return Err(Error::Shape {
                        context: "feature vector",
                        expected: mean.len(),
                        found: x.len(),
                    });
                }
                Ok(gaussian_logpdf(&mean, &log_var, x))
            })
            .collect()
    }
}
