//! Fully connected networks on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adam, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Linear {
            weight: Tensor::new(inputs, outputs, draw(inputs * outputs)).expect("shape"),
            bias: Tensor::row(draw(outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// How a network's parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Params {
    Trainable,
    Frozen,
}

/// Rectifier MLP producing raw outputs from the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Drop probability applied after every hidden activation in training.
    pub dropout: f64,
}

/// Output of a recorded forward pass.
pub struct Forward {
    pub output: Var,
    /// Weight and bias vars, in the order of [`Mlp::params_mut`].
    pub params: Vec<Var>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], dropout: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records the forward pass. Dropout is active only when `train_rng` is
    /// given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        params: Params,
        mut train_rng: Option<&mut R>,
    ) -> Result<Forward> {
        let mut h = x;
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match params {
                Params::Trainable => (
                    tape.param(layer.weight.clone()),
                    tape.param(layer.bias.clone()),
                ),
                Params::Frozen => (
                    tape.constant(layer.weight.clone()),
                    tape.constant(layer.bias.clone()),
                ),
            };
            vars.push(w);
            vars.push(b);
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i < last {
                h = tape.relu(h);
                if let Some(rng) = train_rng.as_deref_mut() {
                    h = tape.dropout(h, 1.0 - self.dropout, true, rng);
                }
            }
        }
        Ok(Forward {
            output: h,
            params: vars,
        })
    }

    /// Evaluation-mode forward without recording.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp_forward", x.shape(), self.layers[0].weight.shape()));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let cols = h.cols();
            let bias = layer.bias.data();
            for row in h.data_mut().chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if i < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Row-wise softmax of the evaluation-mode output.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut logits = self.forward_plain(x)?;
        let cols = logits.cols();
        for row in logits.data_mut().chunks_mut(cols) {
            crate::tensor::softmax_in_place(row, 1.0);
        }
        Ok(logits)
    }

    /// Reads gradients for `fwd.params` off the tape and takes one step.
    pub fn apply_gradients(&mut self, tape: &Tape, fwd: &Forward, opt: &mut Adam) -> Result<()> {
        let grads: Vec<Option<&Tensor>> = fwd.params.iter().map(|&v| tape.grad(v)).collect();
        let mut params = self.params_mut();
        opt.step(&mut params, &grads)
    }
}

/// Added to the batch variance before normalizing.
pub const BN_EPS: f64 = 1e-5;

/// Per-column standardization over the batch followed by a learned affine
/// map. Always uses the statistics of the batch at hand, so a single-row
/// batch maps every column to `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    /// `[1, width]`
    pub gamma: Tensor,
    /// `[1, width]`
    pub beta: Tensor,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(1, width, 1.0),
            beta: Tensor::zeros(1, width),
        }
    }

    /// Returns the output and the `gamma`, `beta` vars.
    pub fn forward_on_tape(&self, tape: &mut Tape, h: Var, params: Params) -> Result<(Var, [Var; 2])> {
        let (g, b) = match params {
            Params::Trainable => (tape.param(self.gamma.clone()), tape.param(self.beta.clone())),
            Params::Frozen => (tape.constant(self.gamma.clone()), tape.constant(self.beta.clone())),
        };
        let mu = tape.mean_cols(h);
        let centered = tape.sub(h, mu)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_cols(sq);
        let shifted = tape.add_scalar(var, BN_EPS);
        let log_var = tape.ln(shifted);
        let half = tape.scale(log_var, -0.5);
        let inv_std = tape.exp(half);
        let normed = tape.mul(centered, inv_std)?;
        let scaled = tape.mul(normed, g)?;
        Ok((tape.add(scaled, b)?, [g, b]))
    }

    pub fn forward_plain(&self, h: &mut Tensor) {
        let (n, c) = (h.rows(), h.cols());
        if n == 0 {
            return;
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in h.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in h.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let (g, b) = (self.gamma.data(), self.beta.data());
        for row in h.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt() * g[j] + b[j];
            }
        }
    }
}
