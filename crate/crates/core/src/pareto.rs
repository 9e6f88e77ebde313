//! Biobjective front approximation between residual loss and data loss.
//!
//! Outcome vectors are stored as `(f_residual, f_data)` = `(MSE_F, MSE_U)`,
//! matching plots with MSE_F on the horizontal axis. Weights `(alpha, 1 - alpha)`
//! apply to `(f_data, f_residual)`, as in the training objective
//! `alpha * MSE_U + (1 - alpha) * MSE_F`.
//!
//! [`beds_run`] performs a dichotomic search: starting from two weights it
//! repeatedly trains the weight whose level lines are parallel to the segment
//! between two adjacent nondominated outcomes. Weights that fall outside the
//! guard window are replaced by the midpoint of the two parent weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("duplicate outcomes: segment has zero length")]
    DuplicateOutcomes,
    #[error("outcomes are not ordered by increasing data loss and decreasing residual loss")]
    NotOrdered,
    #[error("exhausted interval: both parent weights equal {0}")]
    ExhaustedInterval(f64),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
}

/// A trained weight and its two objective values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomePoint {
    pub alpha: f64,
    /// Residual loss MSE_F.
    pub f_residual: f64,
    /// Data loss MSE_U.
    pub f_data: f64,
    pub run_id: usize,
}

impl OutcomePoint {
    pub fn objectives(&self) -> (f64, f64) {
        (self.f_residual, self.f_data)
    }
}

/// `a` is no worse than `b` in both objectives and strictly better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Mutually nondominated subset, sorted by `f_data` then `f_residual`.
/// Of several identical outcomes only the first is kept.
pub fn filter_nondominated(points: &[OutcomePoint]) -> Vec<OutcomePoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.f_data.total_cmp(&b.f_data).then(a.f_residual.total_cmp(&b.f_residual)));
    let mut best_residual = f64::INFINITY;
    let mut front = Vec::new();
    for p in sorted {
        if p.f_residual < best_residual {
            best_residual = p.f_residual;
            front.push(p);
        }
    }
    front
}

/// Weight whose level lines are parallel to the segment `prev → next`.
///
/// `prev` has the smaller data loss and the larger residual loss. The result
/// satisfies `alpha * Δf_data + (1 - alpha) * Δf_residual = 0`.
pub fn next_alpha(prev: &OutcomePoint, next: &OutcomePoint) -> Result<f64, ParetoError> {
    let rise = next.f_data - prev.f_data;
    let drop = prev.f_residual - next.f_residual;
    if rise == 0.0 && drop == 0.0 {
        return Err(ParetoError::DuplicateOutcomes);
    }
    if rise < 0.0 || drop < 0.0 {
        return Err(ParetoError::NotOrdered);
    }
    Ok(drop / (rise + drop))
}

/// Midpoint of the two parent weights.
pub fn bisection_fallback(a: f64, b: f64) -> Result<f64, ParetoError> {
    if a == b {
        return Err(ParetoError::ExhaustedInterval(a));
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BedsConfig {
    pub levels: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Generated weights above this are replaced by bisection.
    pub fail_hi: f64,
    /// Generated weights below this are replaced by bisection.
    pub fail_lo: f64,
}

impl Default for BedsConfig {
    fn default() -> Self {
        BedsConfig {
            levels: 4,
            alpha1: 0.9,
            alpha2: 0.999,
            fail_hi: 0.998,
            fail_lo: 0.8,
        }
    }
}

impl BedsConfig {
    pub fn validate(&self) -> Result<(), ParetoError> {
        if self.levels == 0 {
            return Err(ParetoError::InvalidConfig("levels must be at least 1".into()));
        }
        if !(0.0 < self.alpha1 && self.alpha1 < self.alpha2 && self.alpha2 <= 1.0) {
            return Err(ParetoError::InvalidConfig(format!(
                "need 0 < alpha1 < alpha2 <= 1, got alpha1 = {}, alpha2 = {}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.fail_lo < self.fail_hi) {
            return Err(ParetoError::InvalidConfig(format!(
                "need fail_lo < fail_hi, got {} and {}",
                self.fail_lo, self.fail_hi
            )));
        }
        Ok(())
    }
}

/// How a weight entered the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaOrigin {
    Initial,
    Dichotomy,
    Bisection,
    /// Replacement for a weight whose training failed.
    Refill,
}

/// A weight produced from a pair of adjacent front points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAlpha {
    pub alpha: f64,
    pub origin: AlphaOrigin,
    pub level: usize,
    pub prev: OutcomePoint,
    pub next: OutcomePoint,
}

/// What a trainer reports for one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<A> {
    pub f_residual: f64,
    pub f_data: f64,
    pub artifact: A,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Front,
    Dominated,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Front => "front",
            RunStatus::Dominated => "dominated",
            RunStatus::Failed => "failed",
        }
    }
}

/// One trainer invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord<A> {
    pub run_id: usize,
    pub alpha: f64,
    pub level: usize,
    pub origin: AlphaOrigin,
    pub outcome: Result<Evaluation<A>, String>,
    pub status: RunStatus,
}

impl<A> RunRecord<A> {
    pub fn point(&self) -> Option<OutcomePoint> {
        self.outcome.as_ref().ok().map(|e| OutcomePoint {
            alpha: self.alpha,
            f_residual: e.f_residual,
            f_data: e.f_data,
            run_id: self.run_id,
        })
    }
}

/// State of the search after its last completed level.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontApprox<A> {
    /// Nondominated outcomes sorted by increasing data loss.
    pub candidates: Vec<OutcomePoint>,
    /// Every weight handed to the trainer, sorted.
    pub evaluated_alphas: Vec<f64>,
    pub level: usize,
    pub runs: Vec<RunRecord<A>>,
    pub generated: Vec<GeneratedAlpha>,
    /// Candidate set after each completed level.
    pub level_fronts: Vec<Vec<OutcomePoint>>,
}

impl<A> FrontApprox<A> {
    /// CSV `alpha,mse_f,mse_u,run_id,level,status`, one row per run.
    /// Failed runs leave the loss cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,mse_f,mse_u,run_id,level,status\n");
        for run in &self.runs {
            let (f, u) = match &run.outcome {
                Ok(e) => (crate::fmt_real(e.f_residual), crate::fmt_real(e.f_data)),
                Err(_) => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                crate::fmt_real(run.alpha),
                f,
                u,
                run.run_id,
                run.level,
                run.status.as_str()
            ));
        }
        out
    }

    pub fn successful_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_ok()).count()
    }
}

fn already_seen(alpha: f64, seen: &[f64]) -> bool {
    seen.iter().any(|&a| (a - alpha).abs() <= 1e-12)
}

struct Pending {
    alpha: f64,
    origin: AlphaOrigin,
    /// Weights of the two outcomes that produced this one.
    parents: (f64, f64),
}

/// Bisection enhanced dichotomic search.
///
/// Level 1 trains `alpha1` and `alpha2`. Every further level trains the
/// weights generated from adjacent pairs of the current front; pairs that
/// regenerate an already evaluated weight are skipped. The search stops after
/// `levels` levels or when no new weight appears. A failed training run is
/// retried once with a bisected weight; a second failure abandons the slot.
pub fn beds_run<A, F>(config: &BedsConfig, trainer: F) -> Result<FrontApprox<A>, ParetoError>
where
    A: Send,
    F: Fn(f64) -> Result<Evaluation<A>, String> + Sync,
{
    config.validate()?;
    let mut front = FrontApprox {
        candidates: Vec::new(),
        evaluated_alphas: Vec::new(),
        level: 0,
        runs: Vec::new(),
        generated: Vec::new(),
        level_fronts: Vec::new(),
    };
    let mut pending = vec![
        Pending {
            alpha: config.alpha1,
            origin: AlphaOrigin::Initial,
            parents: (config.alpha1, config.alpha2),
        },
        Pending {
            alpha: config.alpha2,
            origin: AlphaOrigin::Initial,
            parents: (config.alpha1, config.alpha2),
        },
    ];
    let mut points: Vec<OutcomePoint> = Vec::new();

    for level in 1..=config.levels {
        if pending.is_empty() {
            break;
        }
        let mut refills = Vec::new();
        for (p, outcome) in train_batch(&pending, &trainer) {
            front.evaluated_alphas.push(p.alpha);
            let failed = outcome.is_err();
            record(&mut front, &mut points, p.alpha, level, p.origin, outcome);
            if failed {
                if let Some(alpha) = refill_alpha(p, &front.evaluated_alphas) {
                    refills.push(Pending {
                        alpha,
                        origin: AlphaOrigin::Refill,
                        parents: p.parents,
                    });
                }
            }
        }
        for (p, outcome) in train_batch(&refills, &trainer) {
            front.evaluated_alphas.push(p.alpha);
            record(&mut front, &mut points, p.alpha, level, p.origin, outcome);
        }
        front.evaluated_alphas.sort_by(f64::total_cmp);

        front.candidates = filter_nondominated(&points);
        front.level = level;
        front.level_fronts.push(front.candidates.clone());

        pending.clear();
        if level == config.levels {
            break;
        }
        for pair in front.candidates.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            let Ok(mut alpha) = next_alpha(&prev, &next) else {
                continue;
            };
            let mut origin = AlphaOrigin::Dichotomy;
            if alpha > config.fail_hi || alpha < config.fail_lo {
                let Ok(mid) = bisection_fallback(prev.alpha, next.alpha) else {
                    continue;
                };
                alpha = mid;
                origin = AlphaOrigin::Bisection;
            }
            let queued: Vec<f64> = pending.iter().map(|p| p.alpha).collect();
            if already_seen(alpha, &front.evaluated_alphas) || already_seen(alpha, &queued) {
                continue;
            }
            front.generated.push(GeneratedAlpha {
                alpha,
                origin,
                level: level + 1,
                prev,
                next,
            });
            pending.push(Pending {
                alpha,
                origin,
                parents: (prev.alpha, next.alpha),
            });
        }
    }

    let on_front: Vec<usize> = front.candidates.iter().map(|c| c.run_id).collect();
    for run in &mut front.runs {
        run.status = match run.outcome {
            Err(_) => RunStatus::Failed,
            Ok(_) if on_front.contains(&run.run_id) => RunStatus::Front,
            Ok(_) => RunStatus::Dominated,
        };
    }
    Ok(front)
}

fn train_batch<'p, A, F>(batch: &'p [Pending], trainer: &F) -> Vec<(&'p Pending, Result<Evaluation<A>, String>)>
where
    A: Send,
    F: Fn(f64) -> Result<Evaluation<A>, String> + Sync,
{
    let results: Vec<Result<Evaluation<A>, String>> = batch
        .par_iter()
        .map(|p| {
            trainer(p.alpha).and_then(|e| {
                if e.f_residual.is_finite() && e.f_data.is_finite() && e.f_residual >= 0.0 && e.f_data >= 0.0 {
                    Ok(e)
                } else {
                    Err(format!(
                        "non-finite or negative objectives ({}, {})",
                        e.f_residual, e.f_data
                    ))
                }
            })
        })
        .collect();
    batch.iter().zip(results).collect()
}

fn record<A>(
    front: &mut FrontApprox<A>,
    points: &mut Vec<OutcomePoint>,
    alpha: f64,
    level: usize,
    origin: AlphaOrigin,
    outcome: Result<Evaluation<A>, String>,
) {
    let run = RunRecord {
        run_id: front.runs.len(),
        alpha,
        level,
        origin,
        outcome,
        status: RunStatus::Dominated,
    };
    if let Some(p) = run.point() {
        points.push(p);
    }
    front.runs.push(run);
}

/// Bisected replacement for a failed weight; `None` when nothing new remains.
fn refill_alpha(failed: &Pending, evaluated: &[f64]) -> Option<f64> {
    let (a, b) = failed.parents;
    let mut alpha = bisection_fallback(a, b).ok()?;
    if (alpha - failed.alpha).abs() <= 1e-12 {
        alpha = bisection_fallback(failed.alpha, a.max(b)).ok()?;
    }
    if failed.origin == AlphaOrigin::Initial {
        // endpoints: move halfway towards the other endpoint
        let other = if failed.alpha == a { b } else { a };
        alpha = bisection_fallback(failed.alpha, other).ok()?;
    }
    (!already_seen(alpha, evaluated)).then_some(alpha)
}

/// Front point closest to the ideal point after scaling each objective to
/// `[0, 1]` over the front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub run_id: usize,
    pub alpha: f64,
    pub f_residual: f64,
    pub f_data: f64,
    pub distance: f64,
}

pub const KNEE_RULE: &str = "minimum Euclidean distance to the ideal point (per-objective minimum over the front), \
each objective scaled by its range over the front; ties broken by smaller run_id";

pub fn knee(front: &[OutcomePoint]) -> Option<Knee> {
    let range = |f: fn(&OutcomePoint) -> f64| {
        let lo = front.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = front.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (r_lo, r_span) = range(|p| p.f_residual);
    let (d_lo, d_span) = range(|p| p.f_data);
    let scaled = |x: f64, lo: f64, span: f64| if span > 0.0 { (x - lo) / span } else { 0.0 };
    front
        .iter()
        .map(|p| {
            let r = scaled(p.f_residual, r_lo, r_span);
            let d = scaled(p.f_data, d_lo, d_span);
            Knee {
                run_id: p.run_id,
                alpha: p.alpha,
                f_residual: p.f_residual,
                f_data: p.f_data,
                distance: r.hypot(d),
            }
        })
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.run_id.cmp(&b.run_id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(f_residual: f64, f_data: f64) -> OutcomePoint {
        OutcomePoint {
            alpha: 0.5,
            f_residual,
            f_data,
            run_id: 0,
        }
    }

    #[test]
    fn dominance_cases() {
        assert!(dominates((1.0, 1.0), (2.0, 2.0)));
        assert!(!dominates((1.0, 2.0), (2.0, 1.0)));
        assert!(!dominates((2.0, 1.0), (1.0, 2.0)));
        assert!(!dominates((1.0, 1.0), (1.0, 1.0)));
    }

    #[test]
    fn filter_keeps_the_staircase() {
        let pts: Vec<_> = [(0.5, 4.0), (1.0, 2.0), (3.0, 1.0), (1.5, 2.5), (2.0, 3.0)]
            .iter()
            .map(|&(a, b)| pt(a, b))
            .collect();
        let front: Vec<_> = filter_nondominated(&pts).iter().map(|p| p.objectives()).collect();
        assert_eq!(front, vec![(3.0, 1.0), (1.0, 2.0), (0.5, 4.0)]);
        assert_eq!(filter_nondominated(&pts[..1]), pts[..1].to_vec());
    }

    #[test]
    fn next_alpha_examples() {
        // written as (f_residual, f_data)
        let a = next_alpha(&pt(3.0, 1.0), &pt(1.0, 3.0)).unwrap();
        assert_eq!(a, 0.5);
        let a = next_alpha(&pt(4.0, 1.0), &pt(1.0, 3.0)).unwrap();
        assert!((a - 0.6).abs() < 1e-15);
        assert!((a * 2.0 + (1.0 - a) * -3.0).abs() < 1e-12);
        assert_eq!(
            next_alpha(&pt(1.0, 1.0), &pt(1.0, 1.0)),
            Err(ParetoError::DuplicateOutcomes)
        );
    }

    #[test]
    fn published_pair_exceeds_guard() {
        let prev = OutcomePoint {
            alpha: 1.0,
            f_residual: 0.2176,
            f_data: 7.495e-5,
            run_id: 0,
        };
        let next = OutcomePoint {
            alpha: 0.994,
            f_residual: 0.0471,
            f_data: 7.599e-5,
            run_id: 1,
        };
        let a = next_alpha(&prev, &next).unwrap();
        assert!((a - 0.1705 / (0.1705 + 1.04e-6)).abs() < 1e-12);
        assert!((a - 0.999_993_9).abs() < 1e-7);
        assert!(a > BedsConfig::default().fail_hi);
    }

    #[test]
    fn bisection_examples() {
        assert_eq!(bisection_fallback(0.9, 1.0).unwrap(), 0.95);
        assert!((bisection_fallback(0.995, 0.9999).unwrap() - 0.99745).abs() < 1e-15);
        assert!(bisection_fallback(0.3, 0.3).is_err());
        let (lo, mut hi) = (0.0, 1.0);
        let mut width = hi - lo;
        for _ in 0..10 {
            hi = bisection_fallback(lo, hi).unwrap();
            assert_eq!(hi - lo, width / 2.0);
            width = hi - lo;
        }
    }

    fn toy(alpha: f64) -> Result<Evaluation<()>, String> {
        let x = 2.0 * alpha - 1.0;
        Ok(Evaluation {
            f_residual: (x + 1.0) * (x + 1.0),
            f_data: (x - 1.0) * (x - 1.0),
            artifact: (),
        })
    }

    #[test]
    fn single_level_trains_endpoints() {
        let cfg = BedsConfig {
            levels: 1,
            ..BedsConfig::default()
        };
        let f = beds_run(&cfg, toy).unwrap();
        assert_eq!(f.runs.len(), 2);
        assert_eq!(f.evaluated_alphas, vec![0.9, 0.999]);
    }

    #[test]
    fn failed_runs_are_refilled_once() {
        let cfg = BedsConfig {
            levels: 2,
            alpha1: 0.2,
            alpha2: 0.8,
            fail_lo: 0.0,
            fail_hi: 1.0,
        };
        // alpha = 0.8 always fails, so does its refill at 0.5
        let f = beds_run(&cfg, |a| {
            if a >= 0.8 - 1e-12 || (a - 0.5).abs() < 1e-12 {
                Err("diverged".to_string())
            } else {
                toy(a)
            }
        })
        .unwrap();
        let failed: Vec<_> = f.runs.iter().filter(|r| r.status == RunStatus::Failed).collect();
        assert_eq!(failed.len(), 2);
        assert_eq!(failed[1].origin, AlphaOrigin::Refill);
        assert_eq!(f.candidates.len(), 1);
        assert!(f.to_csv().lines().any(|l| l.ends_with(",failed")));
    }

    #[test]
    fn knee_of_symmetric_front() {
        let front = vec![pt(4.0, 0.0), pt(1.0, 1.0), pt(0.0, 4.0)];
        assert_eq!(knee(&front).unwrap().f_data, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(BedsConfig::default().validate().is_ok());
        let bad = BedsConfig {
            alpha1: 0.99,
            alpha2: 0.9,
            ..BedsConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BedsConfig {
            fail_lo: 0.999,
            ..BedsConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
