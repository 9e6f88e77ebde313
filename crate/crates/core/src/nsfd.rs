//! Nonstandard finite-difference integration of the SVIHR system and
//! peak-matching estimation of the transmission parameters.
//!
//! The explicit scheme updates S, V, I, H, R in that order, each update using
//! the values already computed in the same step. The step is replaced by the
//! denominator function `phi(h) = (exp(mu h) - 1) / mu`, which makes the
//! discrete total population follow the exact solution of `N' = Lambda - mu N`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::NormalizedSeries;
use crate::epi_model::{CompartmentState, DerivedRates, ModelError, SvihrParams, INFECTED};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NsfdError {
    #[error("NSFD positivity condition failed at step {step}: {compartment} denominator/numerator = {value}")]
    Positivity {
        step: usize,
        compartment: &'static str,
        value: f64,
    },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fit grid is empty")]
    EmptyGrid,
    #[error("no feasible parameters on grid")]
    NoFeasiblePoint,
    #[error("observed series has no infected values")]
    EmptyObservation,
}

/// Denominator function replacing the step size.
pub fn denominator(h: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        h
    } else {
        (mu * h).exp_m1() / mu
    }
}

/// One explicit NSFD step of size `h` weeks.
///
/// The returned error carries `step = 0`; [`simulate`] fills in the index.
pub fn step(
    p: &SvihrParams,
    d: &DerivedRates,
    h: f64,
    state: &CompartmentState,
) -> Result<CompartmentState, NsfdError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NsfdError::InvalidStep(h));
    }
    let phi = denominator(h, p.mu);
    let CompartmentState { s, v, i, h: hosp, r } = *state;

    let s1 = (s + phi * p.lambda_in) / (1.0 + phi * (p.beta * i + p.vac + p.mu));

    let v_num = v + phi * s1 * (p.vac - p.beta * p.kappa * i);
    if v_num < 0.0 {
        return Err(NsfdError::Positivity {
            step: 0,
            compartment: "V",
            value: v_num,
        });
    }
    let v1 = v_num / (1.0 + phi * p.mu);

    let i_den = 1.0 + phi * (d.eta + d.omega1 + p.mu - p.beta * (1.0 + p.kappa) * s1);
    if !(i_den > 0.0) {
        return Err(NsfdError::Positivity {
            step: 0,
            compartment: "I",
            value: i_den,
        });
    }
    let i1 = i / i_den;

    let h1 = (phi * d.eta * i1 + hosp) / (1.0 + phi * (d.omega2 + p.mu));
    let r1 = (r + phi * (d.omega1 * i1 + d.omega2 * h1)) / (1.0 + phi * p.mu);

    Ok(CompartmentState::new(s1, v1, i1, h1, r1))
}

/// A simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct NsfdRun {
    pub step_weeks: f64,
    pub steps: usize,
    pub initial: CompartmentState,
    /// `steps + 1` states, starting with `initial`.
    pub trajectory: Vec<CompartmentState>,
}

impl NsfdRun {
    /// Index and value of the largest infected count.
    pub fn infected_peak(&self) -> (usize, f64) {
        self.trajectory
            .iter()
            .enumerate()
            .map(|(n, st)| (n, st.i))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
    }

    /// CSV with header `week,S,V,I,H,R`, reals in 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("week,S,V,I,H,R\n");
        for (n, st) in self.trajectory.iter().enumerate() {
            let week = n as f64 * self.step_weeks;
            out.push_str(&crate::fmt_real(week));
            for x in st.to_array() {
                out.push(',');
                out.push_str(&crate::fmt_real(x));
            }
            out.push('\n');
        }
        out
    }
}

pub fn simulate(
    p: &SvihrParams,
    d: &DerivedRates,
    h: f64,
    initial: CompartmentState,
    steps: usize,
) -> Result<NsfdRun, NsfdError> {
    p.validate()?;
    initial.validate()?;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(initial);
    let mut state = initial;
    for n in 0..steps {
        state = step(p, d, h, &state).map_err(|e| match e {
            NsfdError::Positivity {
                compartment, value, ..
            } => NsfdError::Positivity {
                step: n + 1,
                compartment,
                value,
            },
            other => other,
        })?;
        trajectory.push(state);
    }
    Ok(NsfdRun {
        step_weeks: h,
        steps,
        initial,
        trajectory,
    })
}

/// Candidate values for the peak-matching fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitGrid {
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl FitGrid {
    /// `count` log-spaced values over `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => {
                let (a, b) = (lo.ln(), hi.ln());
                (0..count)
                    .map(|k| {
                        if k == 0 {
                            lo
                        } else if k == count - 1 {
                            hi
                        } else {
                            (a + (b - a) * k as f64 / (count - 1) as f64).exp()
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty() || self.kappa.is_empty()
    }
}

impl Default for FitGrid {
    /// 40 log-spaced beta in [1e-9, 1e-7] times five kappa values.
    fn default() -> Self {
        FitGrid {
            beta: Self::log_spaced(1e-9, 1e-7, 40),
            kappa: vec![0.001, 0.005, 0.01, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: f64,
    pub kappa: f64,
    /// `|max predicted I - max observed I|` in normalized units.
    pub peak_error: f64,
}

/// Grid search for (beta, kappa) such that the simulated infected peak matches
/// the observed one. Ties go to the smaller beta, then the smaller kappa.
pub fn fit_peak(
    observed: &NormalizedSeries,
    grid: &FitGrid,
    template: &SvihrParams,
    h: f64,
    initial: CompartmentState,
    steps: usize,
) -> Result<FitResult, NsfdError> {
    if grid.is_empty() {
        return Err(NsfdError::EmptyGrid);
    }
    let observed_peak = observed
        .values
        .iter()
        .map(|row| row[INFECTED])
        .fold(f64::NEG_INFINITY, f64::max);
    if !observed_peak.is_finite() {
        return Err(NsfdError::EmptyObservation);
    }
    let scale = observed.scales[INFECTED];

    let points: Vec<(f64, f64)> = grid
        .beta
        .iter()
        .flat_map(|&b| grid.kappa.iter().map(move |&k| (b, k)))
        .collect();

    let evaluated: Vec<Option<FitResult>> = points
        .par_iter()
        .map(|&(beta, kappa)| {
            let p = SvihrParams { beta, kappa, ..*template };
            let d = p.derive_rates();
            let run = simulate(&p, &d, h, initial, steps).ok()?;
            let predicted_peak = run.infected_peak().1 / scale;
            Some(FitResult {
                beta,
                kappa,
                peak_error: (predicted_peak - observed_peak).abs(),
            })
        })
        .collect();

    evaluated
        .into_iter()
        .flatten()
        .min_by(|a, b| {
            a.peak_error
                .total_cmp(&b.peak_error)
                .then(a.beta.total_cmp(&b.beta))
                .then(a.kappa.total_cmp(&b.kappa))
        })
        .ok_or(NsfdError::NoFeasiblePoint)
}
