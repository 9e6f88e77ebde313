//! Fully connected `1 → 30 → 30 → 30 → 5` network with tanh hidden layers and a
//! linear output layer.
//!
//! Parameters live in plain vectors ([`NetworkParams`]); for training they are
//! placed on a [`Tape`] as leaves ([`TapeNetwork`]) so that outputs and their
//! time derivatives can be differentiated w.r.t. every weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::epi_model::COMPARTMENTS;

/// Layer widths of the default network.
pub const DEFAULT_WIDTHS: [usize; 5] = [1, 30, 30, 30, COMPARTMENTS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParameterCountMismatch { expected: usize, found: usize },
    #[error("invalid widths {0:?}: need at least two layers, input width 1 and output width 5")]
    InvalidWidths(Vec<usize>),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("malformed parameter snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

fn check_widths(widths: &[usize]) -> Result<(), NetworkError> {
    if widths.len() < 2 || widths[0] != 1 || widths[widths.len() - 1] != COMPARTMENTS || widths.contains(&0) {
        return Err(NetworkError::InvalidWidths(widths.to_vec()));
    }
    Ok(())
}

/// `Σ (in·out + out)` over consecutive widths.
pub fn parameter_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl NetworkParams {
    /// Default architecture, fan-based uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        Self::init_with_widths(&DEFAULT_WIDTHS, seed).expect("default widths are valid")
    }

    /// Weights uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_with_widths(widths: &[usize], seed: u64) -> Result<Self, NetworkError> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                let mut layer = Layer::zeros(inputs, outputs);
                for x in &mut layer.weights {
                    *x = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(NetworkParams { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self, NetworkError> {
        check_widths(widths)?;
        Ok(NetworkParams {
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.widths())
    }

    /// Layer-major; within a layer, row-major weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn unflatten(widths: &[usize], flat: &[f64]) -> Result<Self, NetworkError> {
        check_widths(widths)?;
        let expected = parameter_count(widths);
        if flat.len() != expected {
            return Err(NetworkError::ParameterCountMismatch {
                expected,
                found: flat.len(),
            });
        }
        if let Some(i) = flat.iter().position(|x| !x.is_finite()) {
            return Err(NetworkError::NonFinite(i));
        }
        let mut offset = 0;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let nw = inputs * outputs;
                let weights = flat[offset..offset + nw].to_vec();
                let bias = flat[offset + nw..offset + nw + outputs].to_vec();
                offset += nw + outputs;
                Layer {
                    inputs,
                    outputs,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(NetworkParams { layers })
    }

    /// Replaces all parameters from a flat vector in [`flatten`](Self::flatten) order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, NetworkError> {
        Self::unflatten(&self.widths(), flat)
    }

    /// Plain evaluation with forward-mode time derivative.
    pub fn eval_with_derivative(&self, t: f64) -> ([f64; COMPARTMENTS], [f64; COMPARTMENTS]) {
        let mut x = vec![t];
        let mut dx = vec![1.0];
        let last = self.layers.len() - 1;
        for (n, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            let mut dy = vec![0.0; layer.outputs];
            for j in 0..layer.outputs {
                let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    y[j] += row[i] * x[i];
                    dy[j] += row[i] * dx[i];
                }
            }
            if n != last {
                for j in 0..layer.outputs {
                    y[j] = y[j].tanh();
                    dy[j] *= 1.0 - y[j] * y[j];
                }
            }
            x = y;
            dx = dy;
        }
        (
            std::array::from_fn(|k| x[k]),
            std::array::from_fn(|k| dx[k]),
        )
    }

    pub fn eval(&self, t: f64) -> [f64; COMPARTMENTS] {
        self.eval_with_derivative(t).0
    }

    /// Places the parameters on `tape` and evaluates once at `t`.
    pub fn forward<'t>(&self, tape: &'t Tape, t: f64) -> Result<NetOutput<'t>, NetworkError> {
        self.to_tape(tape)?.forward(t)
    }

    /// Registers every parameter as a leaf with zero tangent.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> Result<TapeNetwork<'t>, NetworkError> {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let weights = layer
                    .weights
                    .iter()
                    .map(|&w| tape.leaf(w, 0.0))
                    .collect::<Result<Vec<_>, _>>()?;
                let bias = layer
                    .bias
                    .iter()
                    .map(|&b| tape.leaf(b, 0.0))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(TapeLayer {
                    inputs: layer.inputs,
                    outputs: layer.outputs,
                    weights,
                    bias,
                })
            })
            .collect::<Result<Vec<_>, NetworkError>>()?;
        Ok(TapeNetwork { tape, layers })
    }

    /// Snapshot text: a `widths` line, a `seed` line, a `value` header and
    /// one parameter per line in flatten order, 17 significant digits.
    pub fn to_snapshot(&self, seed: u64) -> String {
        let widths: Vec<String> = self.widths().iter().map(|w| w.to_string()).collect();
        let mut out = format!("widths,{}\nseed,{seed}\nvalue\n", widths.join(","));
        for x in self.flatten() {
            out.push_str(&crate::fmt_real(x));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<(Self, u64), NetworkError> {
        let bad = |msg: &str| NetworkError::Snapshot(msg.to_string());
        let mut lines = text.lines();
        let widths_line = lines.next().ok_or_else(|| bad("missing widths line"))?;
        let widths = widths_line
            .strip_prefix("widths,")
            .ok_or_else(|| bad("first line must start with `widths,`"))?
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| bad("non-integer width")))
            .collect::<Result<Vec<_>, _>>()?;
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed,"))
            .ok_or_else(|| bad("second line must start with `seed,`"))?
            .trim()
            .parse::<u64>()
            .map_err(|_| bad("non-integer seed"))?;
        if lines.next().map(str::trim) != Some("value") {
            return Err(bad("third line must be `value`"));
        }
        let flat = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad("non-numeric value")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((Self::unflatten(&widths, &flat)?, seed))
    }
}

struct TapeLayer<'t> {
    inputs: usize,
    outputs: usize,
    weights: Vec<Var<'t>>,
    bias: Vec<Var<'t>>,
}

/// Network parameters recorded as leaves on one tape.
pub struct TapeNetwork<'t> {
    tape: &'t Tape,
    layers: Vec<TapeLayer<'t>>,
}

/// Network outputs at one time point and their time derivatives, all on the
/// same tape.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput<'t> {
    pub values: [Var<'t>; COMPARTMENTS],
    pub time_derivatives: [Var<'t>; COMPARTMENTS],
}

impl<'t> TapeNetwork<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Parameter leaves in flatten order.
    pub fn parameters(&self) -> Vec<Var<'t>> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn forward(&self, t: f64) -> Result<NetOutput<'t>, NetworkError> {
        let mut x = vec![self.tape.leaf(t, 1.0)?];
        let last = self.layers.len() - 1;
        for (n, layer) in self.layers.iter().enumerate() {
            let y: Vec<Var<'t>> = (0..layer.outputs)
                .map(|j| {
                    let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    let pre = row
                        .iter()
                        .zip(&x)
                        .fold(layer.bias[j], |acc, (&w, &xi)| acc + w * xi);
                    if n == last {
                        pre
                    } else {
                        pre.tanh()
                    }
                })
                .collect();
            x = y;
        }
        let values: [Var<'t>; COMPARTMENTS] = std::array::from_fn(|k| x[k]);
        let time_derivatives = std::array::from_fn(|k| {
            values[k]
                .tangent()
                .expect("network outputs carry a time tangent")
        });
        Ok(NetOutput {
            values,
            time_derivatives,
        })
    }
}
