//! Dense feed-forward networks with hand-derived gradients.
//!
//! A [`DenseNet`] is a chain of [`Dense`] layers. Each layer computes
//! `a = act(x Wᵀ + b)` and, at training time, applies inverted dropout to
//! `a` so inference needs no rescaling. Layers may carry a fixed binary
//! mask on their weights (used for autoregressive conditioners).
//!
//! # Checkpoint format
//!
//! Networks serialize to JSON as `{"layers": [...]}` where each layer is
//! `{"weights": <array>, "bias": <array>, "activation": "relu"|"tanh"|"identity",
//! "dropout": f64, "mask": <array>|null}` and arrays use ndarray's
//! `{"v": 1, "dim": [rows, cols], "data": [...]}` layout (row-major).
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

mod optim;

pub use optim::{Optimizer, OptimizerKind};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses subgradient 0 at `z = 0`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(outputs, inputs)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
    #[serde(default)]
    pub mask: Option<Array2<f64>>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..limit));
        Dense {
            weights,
            bias: Array1::zeros(outputs),
            activation,
            dropout,
            mask: None,
        }
    }

    /// Applies a fixed 0/1 connectivity mask of shape `(outputs, inputs)`.
    pub fn with_mask(mut self, mask: Array2<f64>) -> Self {
        assert_eq!(mask.dim(), self.weights.dim(), "mask shape");
        self.weights *= &mask;
        self.mask = Some(mask);
        self
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Activations recorded by a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Scaled keep-masks (0 or 1/(1-p)) for layers where dropout was live.
    dropout_masks: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    pub fn dropout_masks(&self) -> &[Option<Array2<f64>>] {
        &self.dropout_masks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<DenseGrad>,
}

impl NetGrad {
    /// Gradient slices ordered like [`DenseNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.weights.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Width, activation and dropout rate of one layer in [`DenseNet::mlp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation, dropout: f64) -> Self {
        LayerSpec {
            width,
            activation,
            dropout,
        }
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs a layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape {
                    context: "layer chaining",
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        for layer in &layers {
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::InvalidArgument(format!(
                    "dropout {} outside [0, 1)",
                    layer.dropout
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn mlp<R: Rng + ?Sized>(input: usize, spec: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut fan_in = input;
        for s in spec {
            layers.push(Dense::new(fan_in, s.width, s.activation, s.dropout, rng));
            fan_in = s.width;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Inference on a batch of rows; dropout disabled, no tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Inference-mode forward pass that records a tape.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.run(x, None::<&mut crate::rng::Rng64>)
    }

    /// Training-mode forward pass: dropout masks are drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Tape)> {
        self.run(x, Some(rng))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            dropout_masks: Vec::with_capacity(n),
        };
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            let mut out = z.mapv(|v| layer.activation.apply(v));
            let mask = match rng.as_deref_mut() {
                Some(rng) if layer.dropout > 0.0 => {
                    let keep = 1.0 - layer.dropout;
                    let scale = 1.0 / keep;
                    let mask = Array2::from_shape_fn(out.dim(), |_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    });
                    out *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            tape.inputs.push(a);
            tape.pre_activations.push(z);
            tape.dropout_masks.push(mask);
            a = out;
        }
        Ok((a, tape))
    }

    /// Back-propagates `upstream = ∂loss/∂output` through a recorded pass.
    ///
    /// Returns parameter gradients and `∂loss/∂input`.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(NetGrad, Array2<f64>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape(format!(
                "tape has {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, input)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if input.ncols() != layer.inputs() || tape.pre_activations[i].ncols() != layer.outputs() {
                return Err(Error::StaleTape(format!("layer {i} shape changed")));
            }
        }
        let batch = tape.batch_size();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::StaleTape(format!(
                "upstream gradient {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &tape.dropout_masks[i] {
                g *= mask;
            }
            let z = &tape.pre_activations[i];
            if layer.activation != Activation::Identity {
                g.zip_mut_with(z, |gv, &zv| *gv *= layer.activation.derivative(zv));
            }
            // gᵀ·x may come back column-major; slices() needs row-major.
            let mut gw = g.t().dot(&tape.inputs[i]).as_standard_layout().into_owned();
            if let Some(mask) = &layer.mask {
                gw *= mask;
            }
            let gb = g.sum_axis(Axis(0));
            let g_in = g.dot(&layer.weights);
            grads.push(DenseGrad {
                weights: gw,
                bias: gb,
            });
            g = g_in;
        }
        grads.reverse();
        Ok((NetGrad { layers: grads }, g))
    }

    /// Mutable parameter slices: `[w0, b0, w1, b1, ...]`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// One optimizer step on this network alone.
    pub fn apply_gradients(&mut self, opt: &mut Optimizer, grads: &NetGrad) -> Result<()> {
        let g = grads.slices();
        let mut p = self.param_slices_mut();
        opt.step_named(&mut p, &g, |i| {
            let kind = if i % 2 == 0 { "weights" } else { "bias" };
            format!("layer {} {kind}", i / 2)
        })
    }
}

/// Converts a list of equal-length rows into a batch matrix.
pub fn rows_to_matrix<S: AsRef<[f64]>>(rows: &[S], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (mut dst, src) in m.outer_iter_mut().zip(rows) {
        dst.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(src.as_ref());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn identity_layer(n: usize, act: Activation) -> Dense {
        Dense {
            weights: Array2::eye(n),
            bias: Array1::zeros(n),
            activation: act,
            dropout: 0.0,
            mask: None,
        }
    }

    #[test]
    fn identity_and_relu_forward() {
        let net = DenseNet::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert_eq!(net.predict_one(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let net = DenseNet::new(vec![identity_layer(2, Activation::Relu)]).unwrap();
        assert_eq!(net.predict_one(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_multiply() {
        // Oracle: h = relu(W1 x + b1), y = W2 h + b2 by hand.
        let l1 = Dense {
            weights: array![[0.5, -0.2], [0.1, 0.3], [-0.4, 0.7]],
            bias: array![0.1, -0.05, 0.0],
            activation: Activation::Relu,
            dropout: 0.0,
            mask: None,
        };
        let l2 = Dense {
            weights: array![[1.0, -2.0, 0.5]],
            bias: array![0.25],
            activation: Activation::Identity,
            dropout: 0.0,
            mask: None,
        };
        let net = DenseNet::new(vec![l1, l2]).unwrap();
        let x = [1.0, 0.0];
        let h = [(0.5f64 + 0.1).max(0.0), (0.1f64 - 0.05).max(0.0), (-0.4f64).max(0.0)];
        let expected = 1.0 * h[0] - 2.0 * h[1] + 0.5 * h[2] + 0.25;
        let y = net.predict_one(&x).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
        assert!((expected - 0.75).abs() < 1e-12);
    }

    #[test]
    fn identity_backward_passes_gradient() {
        let net = DenseNet::new(vec![identity_layer(1, Activation::Identity)]).unwrap();
        let (_, tape) = net.forward(array![[3.0]].view()).unwrap();
        let (_, gin) = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(gin, array![[1.0]]);
    }

    #[test]
    fn relu_at_zero_has_zero_subgradient() {
        let net = DenseNet::new(vec![identity_layer(1, Activation::Relu)]).unwrap();
        let (_, tape) = net.forward(array![[0.0]].view()).unwrap();
        let (g, gin) = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(gin[[0, 0]], 0.0);
        assert_eq!(g.layers[0].weights[[0, 0]], 0.0);
        assert_eq!(g.layers[0].bias[0], 0.0);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = seeded(1, 0);
        let a = DenseNet::mlp(3, &[LayerSpec::new(4, Activation::Tanh, 0.0)], &mut rng).unwrap();
        let b = DenseNet::mlp(
            3,
            &[
                LayerSpec::new(4, Activation::Tanh, 0.0),
                LayerSpec::new(1, Activation::Identity, 0.0),
            ],
            &mut rng,
        )
        .unwrap();
        let (_, tape) = a.forward(Array2::zeros((2, 3)).view()).unwrap();
        assert!(matches!(
            b.backward(&tape, Array2::zeros((2, 1)).view()),
            Err(Error::StaleTape(_))
        ));
        assert!(matches!(
            a.backward(&tape, Array2::zeros((3, 4)).view()),
            Err(Error::StaleTape(_))
        ));
    }

    #[test]
    fn input_dimension_checked() {
        let net = DenseNet::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert!(matches!(net.predict_one(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn chaining_checked() {
        let mut rng = seeded(0, 0);
        let layers = vec![
            Dense::new(2, 3, Activation::Relu, 0.0, &mut rng),
            Dense::new(4, 1, Activation::Identity, 0.0, &mut rng),
        ];
        assert!(DenseNet::new(layers).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = seeded(5, 0);
        let l = Dense::new(10, 6, Activation::Relu, 0.0, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(l.weights.iter().all(|w| w.abs() <= limit));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn masked_weights_stay_zero_under_updates() {
        let mut rng = seeded(9, 0);
        let mask = array![[1.0, 0.0], [1.0, 1.0]];
        let layer = Dense::new(2, 2, Activation::Tanh, 0.0, &mut rng).with_mask(mask);
        let mut net = DenseNet::new(vec![layer]).unwrap();
        let mut opt = Optimizer::adam(0.1).unwrap();
        for _ in 0..5 {
            let x = array![[0.3, -1.2], [1.0, 2.0]];
            let (_, tape) = net.forward(x.view()).unwrap();
            let (g, _) = net.backward(&tape, Array2::ones((2, 2)).view()).unwrap();
            net.apply_gradients(&mut opt, &g).unwrap();
        }
        assert_eq!(net.layers()[0].weights[[0, 1]], 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = seeded(11, 0);
        let net = DenseNet::mlp(
            5,
            &[
                LayerSpec::new(7, Activation::Relu, 0.5),
                LayerSpec::new(1, Activation::Identity, 0.0),
            ],
            &mut rng,
        )
        .unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: DenseNet = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }
}
