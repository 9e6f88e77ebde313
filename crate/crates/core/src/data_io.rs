//! Weekly compartment data: CSV ingestion, unit-interval normalization,
//! synthetic series from NSFD trajectories and the validation metric.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epi_model::{CompartmentState, DerivedRates, SvihrParams, COMPARTMENTS, COMPARTMENT_NAMES, INFECTED};
use crate::nsfd::{self, NsfdError, NsfdRun};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` (expected header week,S,V,I,H,R)")]
    MissingColumn(&'static str),
    #[error("row {row}: expected {expected} cells, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column}: non-numeric cell `{cell}`")]
    NonNumeric {
        row: usize,
        column: String,
        cell: String,
    },
    #[error("row {row}, column {column}: negative value {value}")]
    NegativeValue { row: usize, column: String, value: f64 },
    #[error("gap at row {row}: week {week} does not follow week {previous}")]
    Gap { row: usize, previous: i64, week: i64 },
    #[error("series is empty")]
    Empty,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("degenerate compartment {0}: maximum over the training window is zero")]
    DegenerateCompartment(&'static str),
    #[error("length mismatch: predicted {predicted}, observed {observed}")]
    LengthMismatch { predicted: usize, observed: usize },
    #[error("noise level must be nonnegative, got {0}")]
    InvalidNoise(f64),
    #[error(transparent)]
    Nsfd(#[from] NsfdError),
}

/// Weekly compartment counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub weeks: Vec<i64>,
    pub values: Vec<[f64; COMPARTMENTS]>,
}

impl RawSeries {
    pub fn new(weeks: Vec<i64>, values: Vec<[f64; COMPARTMENTS]>) -> Result<Self, DataError> {
        let series = RawSeries { weeks, values };
        series.validate()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weeks.is_empty()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.weeks.is_empty() {
            return Err(DataError::Empty);
        }
        if self.weeks.len() != self.values.len() {
            return Err(DataError::RowLength {
                row: self.values.len().min(self.weeks.len()) + 1,
                expected: self.weeks.len(),
                found: self.values.len(),
            });
        }
        for (n, row) in self.values.iter().enumerate() {
            for (k, &x) in row.iter().enumerate() {
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(DataError::NegativeValue {
                        row: n + 1,
                        column: COMPARTMENT_NAMES[k].to_string(),
                        value: x,
                    });
                }
            }
        }
        for n in 1..self.weeks.len() {
            if self.weeks[n] != self.weeks[n - 1] + 1 {
                return Err(DataError::Gap {
                    row: n + 1,
                    previous: self.weeks[n - 1],
                    week: self.weeks[n],
                });
            }
        }
        Ok(())
    }

    pub fn index_of(&self, week: i64) -> Option<usize> {
        let first = *self.weeks.first()?;
        let idx = usize::try_from(week - first).ok()?;
        (idx < self.weeks.len()).then_some(idx)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("week,S,V,I,H,R\n");
        for (week, row) in self.weeks.iter().zip(&self.values) {
            out.push_str(&week.to_string());
            for &x in row {
                out.push(',');
                out.push_str(&crate::fmt_real(x));
            }
            out.push('\n');
        }
        out
    }
}

const HEADER: [&str; 6] = ["week", "S", "V", "I", "H", "R"];

/// Reads a `week,S,V,I,H,R` table. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<RawSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut columns = [0usize; 6];
    for (slot, name) in columns.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::MissingColumn(name))?;
    }

    let mut weeks = Vec::new();
    let mut values = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record?;
        let row = n + 1;
        if record.len() != headers.len() {
            return Err(DataError::RowLength {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let cell = |c: usize| record.get(columns[c]).unwrap_or_default();
        let week: i64 = cell(0).parse().map_err(|_| DataError::NonNumeric {
            row,
            column: HEADER[0].to_string(),
            cell: cell(0).to_string(),
        })?;
        let mut vals = [0.0; COMPARTMENTS];
        for k in 0..COMPARTMENTS {
            let raw = cell(k + 1);
            let x: f64 = raw.parse().map_err(|_| DataError::NonNumeric {
                row,
                column: HEADER[k + 1].to_string(),
                cell: raw.to_string(),
            })?;
            if !x.is_finite() {
                return Err(DataError::NonNumeric {
                    row,
                    column: HEADER[k + 1].to_string(),
                    cell: raw.to_string(),
                });
            }
            if x < 0.0 {
                return Err(DataError::NegativeValue {
                    row,
                    column: HEADER[k + 1].to_string(),
                    value: x,
                });
            }
            vals[k] = x;
        }
        if let Some(&prev) = weeks.last() {
            if week != prev + 1 {
                return Err(DataError::Gap {
                    row,
                    previous: prev,
                    week,
                });
            }
        }
        weeks.push(week);
        values.push(vals);
    }
    RawSeries::new(weeks, values)
}

/// Training weeks `[a, b]` followed by prediction weeks `[b, c]` (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_range: [i64; 2],
    pub validate_range: [i64; 2],
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let [a, b] = self.train_range;
        let [v0, c] = self.validate_range;
        if a > b {
            return Err(DataError::InvalidSplit(format!("empty training range [{a}, {b}]")));
        }
        if v0 < b {
            return Err(DataError::InvalidSplit(format!(
                "validation starts at week {v0}, before training ends at {b}"
            )));
        }
        if c < v0 {
            return Err(DataError::InvalidSplit(format!("empty validation range [{v0}, {c}]")));
        }
        if c <= a {
            return Err(DataError::InvalidSplit("time horizon must span more than one week".into()));
        }
        Ok(())
    }

    fn check_within(&self, raw: &RawSeries) -> Result<(), DataError> {
        for week in [self.train_range[0], self.validate_range[1]] {
            if raw.index_of(week).is_none() {
                return Err(DataError::InvalidSplit(format!(
                    "week {week} is outside the data ({}..={})",
                    raw.weeks[0],
                    raw.weeks[raw.len() - 1]
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to map network inputs/outputs back to weeks and counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationMeta {
    pub scales: [f64; COMPARTMENTS],
    pub start_week: i64,
    pub horizon_weeks: f64,
    pub train_range: [i64; 2],
    pub validate_range: [i64; 2],
}

impl NormalizationMeta {
    pub fn time_of(&self, week: f64) -> f64 {
        (week - self.start_week as f64) / self.horizon_weeks
    }

    pub fn denormalize(&self, normalized: &[f64; COMPARTMENTS]) -> [f64; COMPARTMENTS] {
        std::array::from_fn(|k| normalized[k] * self.scales[k])
    }
}

/// Observations over `[train start, validation end]` on unit scales.
///
/// Rows `0..train_len` form the training window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub weeks: Vec<i64>,
    pub times: Vec<f64>,
    pub values: Vec<[f64; COMPARTMENTS]>,
    pub scales: [f64; COMPARTMENTS],
    pub horizon_weeks: f64,
    pub train_len: usize,
    pub split: SplitSpec,
}

impl NormalizedSeries {
    pub fn training_times(&self) -> &[f64] {
        &self.times[..self.train_len]
    }

    pub fn training_values(&self) -> &[[f64; COMPARTMENTS]] {
        &self.values[..self.train_len]
    }

    pub fn meta(&self) -> NormalizationMeta {
        NormalizationMeta {
            scales: self.scales,
            start_week: self.weeks[0],
            horizon_weeks: self.horizon_weeks,
            train_range: self.split.train_range,
            validate_range: self.split.validate_range,
        }
    }

    pub fn infected(&self) -> Vec<f64> {
        self.values.iter().map(|r| r[INFECTED]).collect()
    }

    pub fn denormalized(&self) -> Vec<[f64; COMPARTMENTS]> {
        let meta = self.meta();
        self.values.iter().map(|r| meta.denormalize(r)).collect()
    }
}

/// Divides each column by its maximum over the training window and maps weeks
/// linearly onto `[0, 1]` across training plus prediction weeks.
pub fn normalize(raw: &RawSeries, split: &SplitSpec) -> Result<NormalizedSeries, DataError> {
    split.validate()?;
    split.check_within(raw)?;
    let [a, b] = split.train_range;
    let c = split.validate_range[1];
    let first = raw.index_of(a).expect("checked");
    let train_end = raw.index_of(b).expect("checked");
    let last = raw.index_of(c).expect("checked");

    let mut scales = [0.0; COMPARTMENTS];
    for (k, scale) in scales.iter_mut().enumerate() {
        *scale = raw.values[first..=train_end]
            .iter()
            .map(|r| r[k])
            .fold(0.0, f64::max);
        if *scale <= 0.0 {
            return Err(DataError::DegenerateCompartment(COMPARTMENT_NAMES[k]));
        }
    }
    let horizon_weeks = (c - a) as f64;
    let weeks = raw.weeks[first..=last].to_vec();
    let times = weeks.iter().map(|&w| (w - a) as f64 / horizon_weeks).collect();
    let values = raw.values[first..=last]
        .iter()
        .map(|r| std::array::from_fn(|k| r[k] / scales[k]))
        .collect();
    Ok(NormalizedSeries {
        weeks,
        times,
        values,
        scales,
        horizon_weeks,
        train_len: train_end - first + 1,
        split: *split,
    })
}

/// Applies multiplicative noise `1 + noise_rel * u`, `u ~ U[-1, 1]`, clipped at 0.
pub fn series_from_run(run: &NsfdRun, start_week: i64, noise_rel: f64, seed: u64) -> Result<RawSeries, DataError> {
    if !(noise_rel >= 0.0) {
        return Err(DataError::InvalidNoise(noise_rel));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weeks = (0..run.trajectory.len()).map(|n| start_week + n as i64).collect();
    let values = run
        .trajectory
        .iter()
        .map(|st| {
            st.to_array().map(|x| {
                if noise_rel == 0.0 {
                    x
                } else {
                    let u: f64 = rng.gen_range(-1.0..=1.0);
                    (x * (1.0 + noise_rel * u)).max(0.0)
                }
            })
        })
        .collect();
    RawSeries::new(weeks, values)
}

/// Synthetic weekly series from an NSFD trajectory, one row per step,
/// numbered from week 0.
pub fn synthesize(
    p: &SvihrParams,
    d: &DerivedRates,
    h: f64,
    initial: CompartmentState,
    steps: usize,
    noise_rel: f64,
    seed: u64,
) -> Result<RawSeries, DataError> {
    if !(noise_rel >= 0.0) {
        return Err(DataError::InvalidNoise(noise_rel));
    }
    let run = nsfd::simulate(p, d, h, initial, steps)?;
    series_from_run(&run, 0, noise_rel, seed)
}

/// One regime of a piecewise-constant transmission history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub steps: usize,
    pub beta: f64,
}

/// Like [`synthesize`], but `beta` switches between regimes, which produces
/// several waves that no single constant-`beta` model reproduces.
pub fn synthesize_regimes(
    p: &SvihrParams,
    h: f64,
    initial: CompartmentState,
    regimes: &[Regime],
    noise_rel: f64,
    seed: u64,
) -> Result<RawSeries, DataError> {
    if !(noise_rel >= 0.0) {
        return Err(DataError::InvalidNoise(noise_rel));
    }
    let mut trajectory = vec![initial];
    let mut state = initial;
    for regime in regimes {
        let params = SvihrParams {
            beta: regime.beta,
            ..*p
        };
        let run = nsfd::simulate(&params, &params.derive_rates(), h, state, regime.steps)?;
        trajectory.extend_from_slice(&run.trajectory[1..]);
        state = *trajectory.last().expect("nonempty");
    }
    let run = NsfdRun {
        step_weeks: h,
        steps: trajectory.len() - 1,
        initial,
        trajectory,
    };
    series_from_run(&run, 0, noise_rel, seed)
}

/// Mean squared error of the infected compartment, normalized units.
pub fn mse_val(predicted: &[f64], observed: &[f64]) -> Result<f64, DataError> {
    if predicted.len() != observed.len() {
        return Err(DataError::LengthMismatch {
            predicted: predicted.len(),
            observed: observed.len(),
        });
    }
    if predicted.is_empty() {
        return Err(DataError::Empty);
    }
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok(sum / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawSeries, DataError> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn two_rows() {
        let s = parse("week,S,V,I,H,R\n1,10,2,3,1,0\n2,9,2,4,1,0.5\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.values[1], [9.0, 2.0, 4.0, 1.0, 0.5]);
    }

    #[test]
    fn gap_is_reported_with_row() {
        let err = parse("week,S,V,I,H,R\n1,10,2,3,1,0\n3,9,2,4,1,0\n").unwrap_err();
        assert!(err.to_string().contains("gap at row 2"), "{err}");
    }

    #[test]
    fn negative_value_is_rejected() {
        let err = parse("week,S,V,I,H,R\n1,10,-2,3,1,0\n").unwrap_err();
        assert!(err.to_string().contains("negative value"), "{err}");
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let err = parse("week,S,V,I,H\n1,10,2,3,1\n").unwrap_err();
        assert!(matches!(err, DataError::MissingColumn("R")));
        let err = parse("week,S,V,I,H,R\n1,10,x,3,1,0\n").unwrap_err();
        assert!(err.to_string().contains("row 1, column V"), "{err}");
    }

    fn ramp() -> RawSeries {
        let values = (0..10)
            .map(|n| {
                let x = n as f64;
                [100.0 - x, 1.0 + x, 11.0 - (x - 4.0).abs(), 2.0, x + 1.0]
            })
            .collect();
        RawSeries::new((10..20).collect(), values).unwrap()
    }

    #[test]
    fn normalization_maps_training_max_to_one() {
        let raw = ramp();
        let split = SplitSpec {
            train_range: [10, 16],
            validate_range: [16, 19],
        };
        let ns = normalize(&raw, &split).unwrap();
        assert_eq!(ns.train_len, 7);
        assert_eq!(ns.times[0], 0.0);
        assert_eq!(*ns.times.last().unwrap(), 1.0);
        assert_eq!(ns.horizon_weeks, 9.0);
        for k in 0..COMPARTMENTS {
            let m = ns.training_values().iter().map(|r| r[k]).fold(0.0, f64::max);
            assert_eq!(m, 1.0);
        }
        // later values of a growing column exceed 1
        assert!(ns.values.last().unwrap()[1] > 1.0);
        for (row, orig) in ns.denormalized().iter().zip(&raw.values) {
            for k in 0..COMPARTMENTS {
                assert!((row[k] - orig[k]).abs() <= 1e-14 * orig[k].abs());
            }
        }
    }

    #[test]
    fn degenerate_column() {
        let values = vec![[1.0, 0.0, 1.0, 1.0, 1.0]; 4];
        let raw = RawSeries::new(vec![0, 1, 2, 3], values).unwrap();
        let split = SplitSpec {
            train_range: [0, 2],
            validate_range: [2, 3],
        };
        assert!(matches!(
            normalize(&raw, &split),
            Err(DataError::DegenerateCompartment("V"))
        ));
    }

    #[test]
    fn split_outside_data() {
        let split = SplitSpec {
            train_range: [10, 16],
            validate_range: [16, 25],
        };
        assert!(matches!(normalize(&ramp(), &split), Err(DataError::InvalidSplit(_))));
    }

    #[test]
    fn mse_val_basics() {
        let x = [0.1, 0.5, 0.9];
        assert_eq!(mse_val(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((mse_val(&x, &y).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse_val(&x, &y[..2]).is_err());
    }

    #[test]
    fn noise_free_synthesis_is_the_trajectory() {
        let p = SvihrParams::short_term();
        let d = p.derive_rates();
        let init = CompartmentState::new(7.9e7, 4.0e6, 2.0e4, 2.0e3, 9.8e4);
        let raw = synthesize(&p, &d, 1.0, init, 12, 0.0, 3).unwrap();
        let run = nsfd::simulate(&p, &d, 1.0, init, 12).unwrap();
        assert_eq!(raw.weeks, (0..=12).collect::<Vec<_>>());
        for (row, st) in raw.values.iter().zip(&run.trajectory) {
            assert_eq!(*row, st.to_array());
        }
        let noisy = synthesize(&p, &d, 1.0, init, 12, 0.05, 3).unwrap();
        assert_eq!(noisy, synthesize(&p, &d, 1.0, init, 12, 0.05, 3).unwrap());
        for (row, st) in noisy.values.iter().zip(&run.trajectory) {
            for (x, y) in row.iter().zip(st.to_array()) {
                assert!((x - y).abs() <= 0.05 * y * (1.0 + 1e-12));
            }
        }
    }
}
