use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First-order optimizer over a fixed, ordered list of parameter groups.
///
/// Moment buffers are allocated on the first step and matched to groups by
/// position, so callers must pass groups in the same order every time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moments: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        Self::with_betas(kind, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        kind: OptimizerKind,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        self.step_named(params, grads, |i| format!("parameter group {i}"))
    }

    /// Like [`Optimizer::step`]; `name` labels a group in error messages.
    ///
    /// Nothing is updated when any gradient is non-finite.
    pub fn step_named(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                context: "optimizer groups",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    context: "optimizer group length",
                    expected: p.len(),
                    found: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name(i)));
            }
        }

        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.learning_rate;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moments.len() != params.len() {
                    self.first_moments = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.second_moments = params.iter().map(|p| vec![0.0; p.len()]).collect();
                }
                let t = self.step_count as i32;
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let (lr, eps) = (self.learning_rate, self.epsilon);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moments[i];
                    let v = &mut self.second_moments[i];
                    if m.len() != p.len() {
                        return Err(Error::Shape {
                            context: "optimizer state",
                            expected: m.len(),
                            found: p.len(),
                        });
                    }
                    for j in 0..p.len() {
                        let gj = g[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
