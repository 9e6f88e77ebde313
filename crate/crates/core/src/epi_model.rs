//! SVIHR compartment model: parameters, derived transition rates and the
//! right-hand side of the ODE system.
//!
//! Time is measured in weeks throughout.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Var;

/// Number of compartments (S, V, I, H, R).
pub const COMPARTMENTS: usize = 5;

/// Compartment labels in storage order.
pub const COMPARTMENT_NAMES: [&str; COMPARTMENTS] = ["S", "V", "I", "H", "R"];

/// Index of the infected compartment.
pub const INFECTED: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter `{field}` = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("negative compartment {name} = {value}")]
    NegativeState { name: &'static str, value: f64 },
}

/// Scalar arithmetic shared by plain numbers and tape variables, so the
/// right-hand side is written once and evaluated either way.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self> + Add<f64, Output = Self>
{
}

impl Real for f64 {}
impl Real for Var<'_> {}

/// Epidemiological parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvihrParams {
    /// Transmission risk per individual pair and week.
    pub beta: f64,
    /// Residual infection probability after vaccination.
    pub kappa: f64,
    /// Vaccination coefficient (per week).
    pub vac: f64,
    /// Fraction of infected individuals that are hospitalized.
    pub xi: f64,
    /// Mean infection period in weeks.
    pub t_infect: f64,
    /// Mean hospitalization period in weeks.
    pub t_hosp: f64,
    /// Mortality coefficient of hospitalized individuals.
    pub mort: f64,
    /// Recruitment (individuals per week).
    pub lambda_in: f64,
    /// Natural death rate (per week).
    pub mu: f64,
    /// Total population.
    pub population: f64,
}

impl SvihrParams {
    /// Long-horizon calibration (weeks 1–95 of the German data set).
    pub fn long_term() -> Self {
        SvihrParams {
            beta: 1.314e-8,
            kappa: 0.001,
            vac: 0.0159,
            xi: 0.0862,
            t_infect: 1.2,
            t_hosp: 1.5,
            mort: 0.0232,
            lambda_in: 0.0,
            mu: 0.0,
            population: 83_100_000.0,
        }
    }

    /// Short-horizon calibration (delta/omicron waves, weeks 85–104).
    pub fn short_term() -> Self {
        SvihrParams {
            beta: 1.476e-8,
            kappa: 0.001,
            vac: 0.0231,
            xi: 0.0735,
            t_infect: 1.2,
            t_hosp: 1.5,
            mort: 0.0142,
            lambda_in: 0.0,
            mu: 0.0,
            population: 83_100_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("beta", self.beta),
            ("kappa", self.kappa),
            ("vac", self.vac),
            ("xi", self.xi),
            ("t_infect", self.t_infect),
            ("t_hosp", self.t_hosp),
            ("mort", self.mort),
            ("lambda_in", self.lambda_in),
            ("mu", self.mu),
            ("population", self.population),
        ];
        for (field, value) in fields {
            if !value.is_finite() {
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason: "must be finite",
                });
            }
            if value < 0.0 {
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason: "must be nonnegative",
                });
            }
        }
        for (field, value) in [("t_infect", self.t_infect), ("t_hosp", self.t_hosp)] {
            if value <= 0.0 {
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason: "must be positive",
                });
            }
        }
        for (field, value) in [("xi", self.xi), ("mort", self.mort), ("kappa", self.kappa)] {
            if value > 1.0 {
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason: "must lie in [0, 1]",
                });
            }
        }
        Ok(())
    }

    pub fn derive_rates(&self) -> DerivedRates {
        DerivedRates::from_params(self)
    }
}

impl Default for SvihrParams {
    fn default() -> Self {
        Self::short_term()
    }
}

/// Transition rates computed from [`SvihrParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRates {
    /// I → R (per week).
    pub omega1: f64,
    /// H → R (per week).
    pub omega2: f64,
    /// I → H (per week).
    pub eta: f64,
}

impl DerivedRates {
    /// `omega2 = (1 - mort) / t_hosp` is inferred: it reproduces both published
    /// calibrations but is not stated alongside them.
    pub fn from_params(p: &SvihrParams) -> Self {
        DerivedRates {
            omega1: (1.0 - p.xi) / p.t_infect,
            omega2: (1.0 - p.mort) / p.t_hosp,
            eta: p.xi / p.t_infect,
        }
    }
}

/// Compartment sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CompartmentState {
    pub s: f64,
    pub v: f64,
    pub i: f64,
    pub h: f64,
    pub r: f64,
}

impl CompartmentState {
    pub fn new(s: f64, v: f64, i: f64, h: f64, r: f64) -> Self {
        CompartmentState { s, v, i, h, r }
    }

    pub fn from_array(a: [f64; COMPARTMENTS]) -> Self {
        CompartmentState::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn to_array(self) -> [f64; COMPARTMENTS] {
        [self.s, self.v, self.i, self.h, self.r]
    }

    pub fn total(&self) -> f64 {
        self.s + self.v + self.i + self.h + self.r
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in COMPARTMENT_NAMES.iter().zip(self.to_array()) {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::NegativeState { name, value });
            }
        }
        Ok(())
    }
}

/// Time derivatives of (S, V, I, H, R).
pub fn rhs<T: Real>(p: &SvihrParams, d: &DerivedRates, state: [T; COMPARTMENTS]) -> [T; COMPARTMENTS] {
    let [s, v, i, h, r] = state;
    let infection = i * s * p.beta;
    let mut ds = infection * -1.0 + s * -(p.vac + p.mu);
    if p.lambda_in != 0.0 {
        ds = ds + p.lambda_in;
    }
    let dv = s * p.vac + infection * -p.kappa + v * -p.mu;
    let di = infection * (1.0 + p.kappa) + i * -(d.eta + d.omega1 + p.mu);
    let dh = i * d.eta + h * -(d.omega2 + p.mu);
    let dr = i * d.omega1 + h * d.omega2 + r * -p.mu;
    [ds, dv, di, dh, dr]
}

/// Right-hand side in normalized coordinates: compartment `k` is measured in
/// units of `scales[k]` and time in units of `horizon_weeks`.
pub fn scaled_rhs<T: Real>(
    p: &SvihrParams,
    d: &DerivedRates,
    normalized: [T; COMPARTMENTS],
    scales: &[f64; COMPARTMENTS],
    horizon_weeks: f64,
) -> [T; COMPARTMENTS] {
    let state: [T; COMPARTMENTS] = std::array::from_fn(|k| normalized[k] * scales[k]);
    let f = rhs(p, d, state);
    std::array::from_fn(|k| f[k] * (horizon_weeks / scales[k]))
}
