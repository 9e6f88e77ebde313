//! Loss assembly, learning-rate schedule, Adam and the training loop.
//!
//! The data loss is the mean squared Euclidean distance between network
//! outputs and normalized observations; the residual loss is the mean squared
//! defect `d(net)/dt - F(net)` with `F` the SVIHR right-hand side expressed in
//! normalized coordinates. Training minimizes `alpha * data + (1 - alpha) * residual`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data_io::{NormalizationMeta, NormalizedSeries};
use crate::epi_model::{scaled_rhs, DerivedRates, SvihrParams, COMPARTMENTS};
use crate::mlp::{NetOutput, NetworkError, NetworkParams, TapeNetwork};
use crate::pareto::OutcomePoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {what} has length {found}, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("no time points to evaluate the loss on")]
    EmptyPoints,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Where the residual loss is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Collocation {
    /// The training time points.
    #[default]
    TrainingPoints,
    /// `points` equally spaced normalized times covering `[0, 1]`.
    Uniform { points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub collocation: Collocation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.995,
            iterations: 2000,
            lr_start: 0.003,
            lr_end: 0.00015,
            adam: AdamConfig::default(),
            seed: 0,
            collocation: Collocation::TrainingPoints,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got lr_start = {}, lr_end = {}",
                self.lr_start, self.lr_end
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad(format!("invalid Adam constants {a:?}"));
        }
        if let Collocation::Uniform { points } = self.collocation {
            if points < 2 {
                return bad("uniform collocation needs at least 2 points".into());
            }
        }
        Ok(())
    }
}

/// Learning rate at iteration `kappa` of `iterations`: a logistic drop from
/// `lr_start` towards `lr_end`, centred at half of the run with width
/// `0.08 * iterations`.
pub fn lr_schedule(kappa: usize, iterations: usize, lr_start: f64, lr_end: f64) -> f64 {
    let max = iterations as f64;
    let z = (kappa as f64 - 0.5 * max) / (0.08 * max);
    let e = z.exp();
    let sigma = if e.is_infinite() { 1.0 } else { e / (e + 1.0) };
    -(lr_start - lr_end) * sigma + lr_start
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (what, len) in [("gradient", grad.len()), ("first moment", state.m.len()), ("second moment", state.v.len())] {
        if len != params.len() {
            return Err(TrainError::ShapeMismatch {
                what,
                expected: params.len(),
                found: len,
            });
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// The ODE system in the network's normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsModel {
    pub params: SvihrParams,
    pub rates: DerivedRates,
    pub scales: [f64; COMPARTMENTS],
    pub horizon_weeks: f64,
}

impl PhysicsModel {
    pub fn new(params: SvihrParams, series: &NormalizedSeries) -> Self {
        PhysicsModel {
            params,
            rates: params.derive_rates(),
            scales: series.scales,
            horizon_weeks: series.horizon_weeks,
        }
    }
}

/// Data loss, residual loss and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_u: f64,
    pub mse_f: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn new(mse_u: f64, mse_f: f64, alpha: f64) -> Self {
        LossBreakdown {
            mse_u,
            mse_f,
            combined: alpha * mse_u + (1.0 - alpha) * mse_f,
        }
    }
}

fn mean<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>, TrainError> {
    let n = terms.len();
    let total = crate::autodiff::sum(terms).ok_or(TrainError::EmptyPoints)?;
    Ok(total.scale(1.0 / n as f64))
}

fn data_loss_from_outputs<'t>(
    outputs: &[NetOutput<'t>],
    targets: &[[f64; COMPARTMENTS]],
) -> Result<Var<'t>, TrainError> {
    let terms = outputs
        .iter()
        .zip(targets)
        .map(|(out, target)| {
            crate::autodiff::sum((0..COMPARTMENTS).map(|k| (out.values[k] + -target[k]).square()))
                .expect("five compartments")
        })
        .collect();
    mean(terms)
}

fn residual_loss_from_outputs<'t>(outputs: &[NetOutput<'t>], model: &PhysicsModel) -> Result<Var<'t>, TrainError> {
    let terms = outputs
        .iter()
        .map(|out| {
            let f = scaled_rhs(
                &model.params,
                &model.rates,
                out.values,
                &model.scales,
                model.horizon_weeks,
            );
            crate::autodiff::sum((0..COMPARTMENTS).map(|k| (out.time_derivatives[k] - f[k]).square()))
                .expect("five compartments")
        })
        .collect();
    mean(terms)
}

fn forward_all<'t>(net: &TapeNetwork<'t>, times: &[f64]) -> Result<Vec<NetOutput<'t>>, TrainError> {
    if times.is_empty() {
        return Err(TrainError::EmptyPoints);
    }
    Ok(times.iter().map(|&t| net.forward(t)).collect::<Result<Vec<_>, _>>()?)
}

/// `(1/l) Σ ||net(t_i) - observed(t_i)||²` over the given points.
pub fn data_loss<'t>(
    net: &TapeNetwork<'t>,
    times: &[f64],
    targets: &[[f64; COMPARTMENTS]],
) -> Result<Var<'t>, TrainError> {
    if times.len() != targets.len() {
        return Err(TrainError::ShapeMismatch {
            what: "targets",
            expected: times.len(),
            found: targets.len(),
        });
    }
    data_loss_from_outputs(&forward_all(net, times)?, targets)
}

/// `(1/l) Σ ||d(net)/dt(t_i) - F(net(t_i))||²` over the collocation times.
pub fn residual_loss<'t>(net: &TapeNetwork<'t>, model: &PhysicsModel, times: &[f64]) -> Result<Var<'t>, TrainError> {
    residual_loss_from_outputs(&forward_all(net, times)?, model)
}

/// Normalized collocation times for `collocation`.
pub fn collocation_times(collocation: Collocation, series: &NormalizedSeries) -> Vec<f64> {
    match collocation {
        Collocation::TrainingPoints => series.training_times().to_vec(),
        Collocation::Uniform { points } => (0..points).map(|k| k as f64 / (points - 1) as f64).collect(),
    }
}

/// Both losses recorded on `net`'s tape.
pub fn loss_terms<'t>(
    net: &TapeNetwork<'t>,
    model: &PhysicsModel,
    series: &NormalizedSeries,
    collocation: Collocation,
) -> Result<(Var<'t>, Var<'t>), TrainError> {
    let train_outputs = forward_all(net, series.training_times())?;
    let mse_u = data_loss_from_outputs(&train_outputs, series.training_values())?;
    let mse_f = match collocation {
        Collocation::TrainingPoints => residual_loss_from_outputs(&train_outputs, model)?,
        other => residual_loss(net, model, &collocation_times(other, series))?,
    };
    Ok((mse_u, mse_f))
}

/// Losses of fixed parameters.
pub fn evaluate(
    params: &NetworkParams,
    model: &PhysicsModel,
    series: &NormalizedSeries,
    collocation: Collocation,
    alpha: f64,
) -> Result<LossBreakdown, TrainError> {
    let tape = Tape::new();
    let net = params.to_tape(&tape)?;
    let (u, f) = loss_terms(&net, model, series, collocation)?;
    Ok(LossBreakdown::new(u.value(), f.value(), alpha))
}

/// Combined loss and its gradient in flatten order.
pub fn loss_and_gradient(
    params: &NetworkParams,
    model: &PhysicsModel,
    series: &NormalizedSeries,
    collocation: Collocation,
    alpha: f64,
    tape_capacity: usize,
) -> Result<(LossBreakdown, Vec<f64>, usize), TrainError> {
    let tape = Tape::with_capacity(tape_capacity);
    let net = params.to_tape(&tape)?;
    let (u, f) = loss_terms(&net, model, series, collocation)?;
    let combined = u.scale(alpha) + f.scale(1.0 - alpha);
    let losses = LossBreakdown {
        mse_u: u.value(),
        mse_f: f.value(),
        combined: combined.value(),
    };
    let grads = tape.backward(combined)?;
    let grad = net.parameters().into_iter().map(|w| grads.wrt(w)).collect();
    Ok((losses, grad, tape.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub mse_u: f64,
    pub mse_f: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<LossRecord>,
    /// Losses of the returned parameters.
    pub final_losses: LossBreakdown,
    pub outcome: OutcomePoint,
}

impl TrainOutcome {
    /// CSV `iteration,lr,mse_u,mse_f,combined`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,lr,mse_u,mse_f,combined\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration,
                crate::fmt_real(r.lr),
                crate::fmt_real(r.mse_u),
                crate::fmt_real(r.mse_f),
                crate::fmt_real(r.combined)
            ));
        }
        out
    }
}

/// Full-batch Adam on the combined loss, starting from `NetworkParams::init(seed)`.
pub fn train(config: &TrainConfig, model: &PhysicsModel, series: &NormalizedSeries) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if series.train_len == 0 {
        return Err(TrainError::EmptyPoints);
    }
    let mut params = NetworkParams::init(config.seed);
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let mut history = Vec::with_capacity(config.iterations);
    let mut capacity = 0;

    for iteration in 1..=config.iterations {
        let (losses, grad, used) =
            match loss_and_gradient(&params, model, series, config.collocation, config.alpha, capacity) {
                Ok(v) => v,
                Err(TrainError::Autodiff(AutodiffError::NonFinite { .. })) => {
                    return Err(TrainError::Diverged { iteration })
                }
                Err(e) => return Err(e),
            };
        capacity = used;
        if !losses.combined.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { iteration });
        }
        let lr = lr_schedule(iteration, config.iterations, config.lr_start, config.lr_end);
        history.push(LossRecord {
            iteration,
            lr,
            mse_u: losses.mse_u,
            mse_f: losses.mse_f,
            combined: losses.combined,
        });
        adam_step(&mut flat, &grad, &mut state, lr, &config.adam)?;
        params = match params.with_flat(&flat) {
            Ok(p) => p,
            Err(NetworkError::NonFinite(_)) => return Err(TrainError::Diverged { iteration }),
            Err(e) => return Err(e.into()),
        };
    }

    let final_losses = evaluate(&params, model, series, config.collocation, config.alpha)?;
    if !(final_losses.mse_u.is_finite() && final_losses.mse_f.is_finite()) {
        return Err(TrainError::Diverged {
            iteration: config.iterations,
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        final_losses,
        outcome: OutcomePoint {
            alpha: config.alpha,
            f_residual: final_losses.mse_f,
            f_data: final_losses.mse_u,
            run_id: 0,
        },
    })
}

/// Network predictions at the given weeks, in original units.
pub fn predict(params: &NetworkParams, weeks: &[f64], meta: &NormalizationMeta) -> Vec<[f64; COMPARTMENTS]> {
    weeks
        .iter()
        .map(|&w| meta.denormalize(&params.eval(meta.time_of(w))))
        .collect()
}
