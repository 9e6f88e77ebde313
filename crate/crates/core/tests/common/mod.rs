#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svihr_pinn::autodiff::{Tape, Var};
use svihr_pinn::data_io::{normalize, synthesize, synthesize_regimes, NormalizedSeries, Regime, SplitSpec};
use svihr_pinn::epi_model::{scaled_rhs, CompartmentState, SvihrParams, COMPARTMENTS};
use svihr_pinn::mlp::NetworkParams;
use svihr_pinn::pareto::{Evaluation, OutcomePoint};
use svihr_pinn::pinn_train::PhysicsModel;

/// Operations of a random straight-line program. Indices refer to earlier
/// slots; slots `0..leaves` are the inputs.
#[derive(Debug, Clone, Copy)]
pub enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    /// `a * tanh(b)`
    MulTanh(usize, usize),
    Tanh(usize),
    /// `exp(tanh(a))`
    ExpTanh(usize),
    /// `tanh(a)^2`
    SquareTanh(usize),
    Scale(usize, f64),
    /// `a / (1 + b^2)`
    DivSafe(usize, usize),
}

#[derive(Debug, Clone)]
pub struct Program {
    pub leaves: usize,
    pub ops: Vec<Op>,
}

pub fn random_program(seed: u64, leaves: usize, ops: usize) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut list = Vec::with_capacity(ops);
    for k in 0..ops {
        let avail = leaves + k;
        // bias towards recent slots so the output depends on most of the program
        let pick = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.6) {
                avail - 1 - rng.gen_range(0..avail.min(3))
            } else {
                rng.gen_range(0..avail)
            }
        };
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        let op = match rng.gen_range(0..8) {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::MulTanh(a, b),
            3 => Op::Tanh(a),
            4 => Op::ExpTanh(a),
            5 => Op::SquareTanh(a),
            6 => Op::Scale(a, rng.gen_range(-2.0..2.0)),
            _ => Op::DivSafe(a, b),
        };
        list.push(op);
    }
    Program { leaves, ops: list }
}

pub fn eval_f64(p: &Program, x: &[f64]) -> f64 {
    let mut slots = x.to_vec();
    for op in &p.ops {
        let v = match *op {
            Op::Add(a, b) => slots[a] + slots[b],
            Op::Sub(a, b) => slots[a] - slots[b],
            Op::MulTanh(a, b) => slots[a] * slots[b].tanh(),
            Op::Tanh(a) => slots[a].tanh(),
            Op::ExpTanh(a) => slots[a].tanh().exp(),
            Op::SquareTanh(a) => slots[a].tanh().powi(2),
            Op::Scale(a, c) => slots[a] * c,
            Op::DivSafe(a, b) => slots[a] / (1.0 + slots[b] * slots[b]),
        };
        slots.push(v);
    }
    *slots.last().unwrap()
}

pub fn eval_tape<'t>(p: &Program, leaves: &[Var<'t>]) -> Var<'t> {
    let mut slots = leaves.to_vec();
    for op in &p.ops {
        let v = match *op {
            Op::Add(a, b) => slots[a] + slots[b],
            Op::Sub(a, b) => slots[a] - slots[b],
            Op::MulTanh(a, b) => slots[a] * slots[b].tanh(),
            Op::Tanh(a) => slots[a].tanh(),
            Op::ExpTanh(a) => slots[a].tanh().exp(),
            Op::SquareTanh(a) => slots[a].tanh().square(),
            Op::Scale(a, c) => slots[a].scale(c),
            Op::DivSafe(a, b) => {
                let den = slots[b].square() + 1.0;
                slots[a].checked_div(den).expect("denominator >= 1")
            }
        };
        slots.push(v);
    }
    *slots.last().unwrap()
}

pub fn random_point(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// `|a - b| <= rel * |b|` or `|a - b| <= abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= rel * b.abs() || d <= abs
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn unit(n: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[j] = 1.0;
    e
}

/// Whether the reverse gradient, the forward tangent and the gradient of the
/// tangent agree with central differences.
pub struct ProgramCheck {
    pub gradient_ok: bool,
    pub tangent_ok: bool,
    pub mixed_ok: bool,
}

pub fn check_program(p: &Program, x: &[f64], dir: &[f64]) -> ProgramCheck {
    let n = p.leaves;
    let tape = Tape::new();
    let leaves: Vec<Var> = (0..n).map(|j| tape.leaf(x[j], dir[j]).unwrap()).collect();
    let out = eval_tape(p, &leaves);
    let grads = tape.backward(out).unwrap();
    let f = |y: &[f64]| eval_f64(p, y);

    let gradient_ok = (0..n).all(|j| {
        let fd = central_difference(f, x, &unit(n, j), 1e-6);
        close(grads.wrt(leaves[j]), fd, 1e-5, 1e-8)
    });

    let fd_dir = central_difference(f, x, dir, 1e-6);
    let tangent = out.tangent_value().unwrap_or(0.0);
    let tangent_ok = close(tangent, fd_dir, 1e-5, 1e-8);

    let mixed_ok = match out.tangent() {
        Some(t) => {
            let g2 = tape.backward(t).unwrap();
            (0..n).all(|j| {
                let dd = |y: &[f64]| central_difference(f, y, dir, 1e-4);
                let fd = central_difference(dd, x, &unit(n, j), 1e-4);
                close(g2.wrt(leaves[j]), fd, 1e-4, 1e-6)
            })
        }
        None => false,
    };
    ProgramCheck {
        gradient_ok,
        tangent_ok,
        mixed_ok,
    }
}

pub fn long_term_initial() -> CompartmentState {
    CompartmentState::new(7.9e7, 3.0e6, 5.0e4, 5.0e3, 1.045e6)
}

/// Noiseless 20-week NSFD series, all weeks used for training.
pub fn twenty_point_series() -> (SvihrParams, NormalizedSeries) {
    let p = SvihrParams::long_term();
    let raw = synthesize(&p, &p.derive_rates(), 1.0, long_term_initial(), 19, 0.0, 0).unwrap();
    let split = SplitSpec {
        train_range: [0, 19],
        validate_range: [19, 19],
    };
    (p, normalize(&raw, &split).unwrap())
}

/// Two infection waves produced by switching beta; the model keeps a single
/// constant beta, so data and residual losses pull in different directions.
pub fn two_wave_series() -> (SvihrParams, NormalizedSeries) {
    let p = SvihrParams::long_term();
    let regimes = [
        Regime { steps: 10, beta: 1.45e-8 },
        Regime { steps: 6, beta: 0.6e-8 },
        Regime { steps: 13, beta: 1.8e-8 },
    ];
    let raw = synthesize_regimes(&p, 1.0, long_term_initial(), &regimes, 0.0, 0).unwrap();
    let split = SplitSpec {
        train_range: [0, 25],
        validate_range: [25, 29],
    };
    (p, normalize(&raw, &split).unwrap())
}

/// Plain f64 evaluation of both losses.
pub fn loss_oracle(net: &NetworkParams, model: &PhysicsModel, series: &NormalizedSeries) -> (f64, f64) {
    let times = series.training_times();
    let l = times.len() as f64;
    let (mut u, mut f) = (0.0, 0.0);
    for (t, target) in times.iter().zip(series.training_values()) {
        let (y, dy) = net.eval_with_derivative(*t);
        let rhs = scaled_rhs(&model.params, &model.rates, y, &model.scales, model.horizon_weeks);
        for k in 0..COMPARTMENTS {
            u += (y[k] - target[k]).powi(2);
            f += (dy[k] - rhs[k]).powi(2);
        }
    }
    (u / l, f / l)
}

/// Exact weighted-sum minimizer of `alpha (x-1)^2 + (1-alpha) (x+1)^2`.
pub fn toy_trainer(alpha: f64) -> Result<Evaluation<f64>, String> {
    let x = 2.0 * alpha - 1.0;
    Ok(Evaluation {
        f_residual: (x + 1.0) * (x + 1.0),
        f_data: (x - 1.0) * (x - 1.0),
        artifact: x,
    })
}

/// Points on the toy front satisfy `sqrt(f_residual) + sqrt(f_data) = 2`.
pub fn on_toy_front(p: &OutcomePoint) -> bool {
    (p.f_residual.sqrt() + p.f_data.sqrt() - 2.0).abs() < 1e-12
}

/// O(n^2) nondominated subset, keeping the first of identical points.
pub fn brute_force_front(points: &[OutcomePoint]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let dominated = points
            .iter()
            .any(|q| svihr_pinn::pareto::dominates(q.objectives(), p.objectives()));
        let duplicate = points[..i].iter().any(|q| q.objectives() == p.objectives());
        if !dominated && !duplicate {
            out.push(p.objectives());
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    out
}

pub fn random_cloud(seed: u64, n: usize) -> Vec<OutcomePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|run_id| OutcomePoint {
            alpha: rng.gen_range(0.0..1.0),
            // coarse values so ties and duplicates occur
            f_residual: (rng.gen_range(0.0..10.0) * 4.0_f64).round() / 4.0,
            f_data: (rng.gen_range(0.0..10.0) * 4.0_f64).round() / 4.0,
            run_id,
        })
        .collect()
}
