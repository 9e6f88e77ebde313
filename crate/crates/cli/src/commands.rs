use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use svihr_pinn::data_io::{self, normalize, DataError, NormalizedSeries, RawSeries};
use svihr_pinn::epi_model::{COMPARTMENT_NAMES, INFECTED};
use svihr_pinn::mlp::{parameter_count, NetworkError, NetworkParams, DEFAULT_WIDTHS};
use svihr_pinn::nsfd::{self, NsfdError};
use svihr_pinn::pareto::{beds_run, knee, Evaluation, FrontApprox, RunStatus, KNEE_RULE};
use svihr_pinn::pinn_train::{predict, train, PhysicsModel, TrainConfig, TrainError};

use crate::config::{DataSource, RunConfig, TrainerKind};
use crate::plot::{Chart, Series, Style, PALETTE};

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Numerical(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.into())
    }
}

fn nsfd_failure(e: NsfdError) -> Failure {
    match e {
        NsfdError::Positivity { .. } | NsfdError::NoFeasiblePoint => Failure::Numerical(e.into()),
        other => Failure::Config(other.into()),
    }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Nsfd(inner) => nsfd_failure(inner),
        other => Failure::Config(other.into()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Diverged { .. } | TrainError::Autodiff(_) => Failure::Numerical(e.into()),
        other => Failure::Config(other.into()),
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub params: Option<PathBuf>,
}

pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
    pub params: Option<PathBuf>,
}

pub fn prepare(mut config: RunConfig, overrides: Overrides) -> Result<RunContext, Failure> {
    if let Some(alpha) = overrides.alpha {
        config.train.alpha = alpha;
    }
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    let out = overrides.out.unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(RunContext {
        config,
        out,
        params: overrides.params,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    text.push('\n');
    write(dir, name, &text)
}

fn load_data(config: &RunConfig) -> Result<RawSeries, Failure> {
    match &config.data.source {
        DataSource::Csv { path } => data_io::load_csv(path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Config),
        DataSource::Synth {
            noise_rel,
            seed,
            regimes,
        } => {
            let n = &config.nsfd;
            let raw = if regimes.is_empty() {
                data_io::synthesize(
                    &config.model,
                    &config.model.derive_rates(),
                    n.h,
                    n.initial,
                    n.steps,
                    *noise_rel,
                    *seed,
                )
            } else {
                data_io::synthesize_regimes(&config.model, n.h, n.initial, regimes, *noise_rel, *seed)
            };
            raw.map_err(data_failure)
        }
    }
}

fn load_series(config: &RunConfig) -> Result<NormalizedSeries, Failure> {
    let raw = load_data(config)?;
    normalize(&raw, &config.data.split).map_err(data_failure)
}

pub fn simulate(ctx: &RunContext) -> Result<String, Failure> {
    let c = &ctx.config;
    let run = nsfd::simulate(&c.model, &c.model.derive_rates(), c.nsfd.h, c.nsfd.initial, c.nsfd.steps)
        .map_err(nsfd_failure)?;
    write(&ctx.out, "trajectory.csv", &run.to_csv())?;

    let mut chart = Chart::new("NSFD trajectory, each compartment scaled by its maximum", "week", "normalized size");
    for (k, name) in COMPARTMENT_NAMES.iter().enumerate() {
        let max = run.trajectory.iter().map(|s| s.to_array()[k]).fold(0.0, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        let points = run
            .trajectory
            .iter()
            .enumerate()
            .map(|(n, s)| (n as f64 * run.step_weeks, s.to_array()[k] / scale))
            .collect();
        chart.push(Series::new(*name, PALETTE[k], Style::Line, points));
    }
    write(&ctx.out, "trajectory.svg", &chart.render())?;

    let (peak_step, peak) = run.infected_peak();
    Ok(format!(
        "{} steps; infected peak {peak:.1} at week {}",
        run.steps,
        peak_step as f64 * run.step_weeks
    ))
}

pub fn synth(ctx: &RunContext) -> Result<String, Failure> {
    if !matches!(ctx.config.data.source, DataSource::Synth { .. }) {
        return Err(Failure::Config(anyhow!("synth needs data.source.synth in the config")));
    }
    let raw = load_data(&ctx.config)?;
    write(&ctx.out, "data.csv", &raw.to_csv())?;
    Ok(format!("{} weeks written to data.csv", raw.len()))
}

pub fn fit(ctx: &RunContext) -> Result<String, Failure> {
    let c = &ctx.config;
    let observed = load_series(c)?;
    let result = nsfd::fit_peak(
        &observed,
        &c.nsfd.fit_grid,
        &c.model,
        c.nsfd.h,
        c.nsfd.initial,
        c.nsfd.steps,
    )
    .map_err(nsfd_failure)?;
    write_json(&ctx.out, "fit.json", &result)?;
    Ok(format!(
        "beta = {:e}, kappa = {}, peak error = {:e}",
        result.beta, result.kappa, result.peak_error
    ))
}

#[derive(Serialize)]
struct TrainSummary {
    alpha: f64,
    seed: u64,
    iterations: usize,
    mse_u: f64,
    mse_f: f64,
    combined: f64,
}

fn prediction_chart(params: &NetworkParams, series: &NormalizedSeries, title: &str) -> Chart {
    let meta = series.meta();
    let scale = series.scales[INFECTED];
    let observed: Vec<(f64, f64)> = series
        .weeks
        .iter()
        .zip(&series.values)
        .map(|(&w, v)| (w as f64, v[INFECTED] * scale))
        .collect();
    let (train_obs, later_obs) = observed.split_at(series.train_len);
    let first = series.weeks[0] as f64;
    let last = *series.weeks.last().expect("nonempty series") as f64;
    let fine: Vec<f64> = (0..=200).map(|k| first + (last - first) * k as f64 / 200.0).collect();
    let predicted = predict(params, &fine, &meta)
        .iter()
        .zip(&fine)
        .map(|(row, &w)| (w, row[INFECTED]))
        .collect();

    let mut chart = Chart::new(title, "week", "infected");
    chart.push(Series::new("observed (training)", PALETTE[0], Style::Points, train_obs.to_vec()));
    if !later_obs.is_empty() {
        chart.push(Series::new("observed (prediction)", PALETTE[1], Style::Points, later_obs.to_vec()));
    }
    chart.push(Series::new("network", PALETTE[2], Style::Line, predicted));
    chart
}

pub fn train_cmd(ctx: &RunContext) -> Result<String, Failure> {
    let c = &ctx.config;
    let series = load_series(c)?;
    let model = PhysicsModel::new(c.model, &series);
    let outcome = train(&c.train, &model, &series).map_err(train_failure)?;

    write(&ctx.out, "params.txt", &outcome.params.to_snapshot(c.train.seed))?;
    write(&ctx.out, "loss_history.csv", &outcome.history_csv())?;
    write_json(&ctx.out, "normalization.json", &series.meta())?;
    let l = outcome.final_losses;
    write_json(
        &ctx.out,
        "train.json",
        &TrainSummary {
            alpha: c.train.alpha,
            seed: c.train.seed,
            iterations: c.train.iterations,
            mse_u: l.mse_u,
            mse_f: l.mse_f,
            combined: l.combined,
        },
    )?;
    let chart = prediction_chart(&outcome.params, &series, &format!("Infected, alpha = {}", c.train.alpha));
    write(&ctx.out, "prediction.svg", &chart.render())?;
    Ok(format!("MSE_U = {:e}, MSE_F = {:e}", l.mse_u, l.mse_f))
}

#[derive(Serialize)]
struct KneeSummary {
    rule: &'static str,
    run_id: usize,
    alpha: f64,
    mse_f: f64,
    mse_u: f64,
    distance: f64,
    levels_completed: usize,
    runs: usize,
    front_size: usize,
}

fn level_chart<A>(front: &FrontApprox<A>, level: usize) -> Chart {
    let evaluated: Vec<(f64, f64)> = front
        .runs
        .iter()
        .filter(|r| r.level <= level)
        .filter_map(|r| r.point())
        .map(|p| (p.f_residual, p.f_data))
        .collect();
    let hull: Vec<(f64, f64)> = front.level_fronts[level - 1]
        .iter()
        .map(|p| (p.f_residual, p.f_data))
        .collect();
    let mut chart = Chart::new(&format!("Front approximation, level {level}"), "MSE_F", "MSE_U");
    chart.push(Series::new("trained", PALETTE[5], Style::Points, evaluated));
    chart.push(Series::new("nondominated", PALETTE[1], Style::Points, hull.clone()));
    chart.push(Series::new("hull", PALETTE[0], Style::Dashed, hull));
    chart
}

pub fn beds(ctx: &RunContext) -> Result<String, Failure> {
    let c = &ctx.config;
    let search = c.beds.search_config();
    let front: FrontApprox<Option<NetworkParams>> = match c.beds.trainer {
        TrainerKind::Toy => beds_run(&search, |alpha| {
            let x = 2.0 * alpha - 1.0;
            Ok(Evaluation {
                f_residual: (x + 1.0) * (x + 1.0),
                f_data: (x - 1.0) * (x - 1.0),
                artifact: None,
            })
        }),
        TrainerKind::Pinn => {
            let series = load_series(c)?;
            let model = PhysicsModel::new(c.model, &series);
            beds_run(&search, |alpha| {
                let tc = TrainConfig { alpha, ..c.train };
                train(&tc, &model, &series)
                    .map(|o| Evaluation {
                        f_residual: o.final_losses.mse_f,
                        f_data: o.final_losses.mse_u,
                        artifact: Some(o.params),
                    })
                    .map_err(|e| e.to_string())
            })
        }
    }
    .map_err(|e| Failure::Config(e.into()))?;

    write(&ctx.out, "front.csv", &front.to_csv())?;
    for level in 1..=front.level {
        write(&ctx.out, &format!("level_{level}.svg"), &level_chart(&front, level).render())?;
    }
    let params_dir = ctx.out.join("runs");
    for run in &front.runs {
        if let Ok(Evaluation {
            artifact: Some(params), ..
        }) = &run.outcome
        {
            fs::create_dir_all(&params_dir)?;
            write(&params_dir, &format!("run_{}.txt", run.run_id), &params.to_snapshot(c.train.seed))?;
        }
    }
    for run in front.runs.iter().filter(|r| r.status == RunStatus::Failed) {
        if let Err(why) = &run.outcome {
            eprintln!("run {} (alpha = {}) failed: {why}", run.run_id, run.alpha);
        }
    }

    let best = knee(&front.candidates)
        .ok_or_else(|| Failure::Numerical(anyhow!("every training run failed; no front to summarize")))?;
    write_json(
        &ctx.out,
        "knee.json",
        &KneeSummary {
            rule: KNEE_RULE,
            run_id: best.run_id,
            alpha: best.alpha,
            mse_f: best.f_residual,
            mse_u: best.f_data,
            distance: best.distance,
            levels_completed: front.level,
            runs: front.runs.len(),
            front_size: front.candidates.len(),
        },
    )?;
    Ok(format!(
        "{} runs over {} levels, {} front points; knee at alpha = {} (run {})\nknee rule: {KNEE_RULE}",
        front.runs.len(),
        front.level,
        front.candidates.len(),
        best.alpha,
        best.run_id
    ))
}

#[derive(Serialize)]
struct ValidationSummary {
    alpha: f64,
    mse_val: f64,
    mse_train_window: f64,
    mse_prediction_window: Option<f64>,
    train_range: [i64; 2],
    validate_range: [i64; 2],
}

pub fn validate(ctx: &RunContext) -> Result<String, Failure> {
    let c = &ctx.config;
    let path = ctx
        .params
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow!("validate needs --params <snapshot>")))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (params, _) = NetworkParams::from_snapshot(&text).map_err(|e| Failure::Config(e.into()))?;
    if params.widths() != DEFAULT_WIDTHS {
        return Err(Failure::Config(
            NetworkError::ParameterCountMismatch {
                expected: parameter_count(&DEFAULT_WIDTHS),
                found: params.parameter_count(),
            }
            .into(),
        ));
    }

    let series = load_series(c)?;
    let predicted: Vec<f64> = series.times.iter().map(|&t| params.eval(t)[INFECTED]).collect();
    let observed = series.infected();
    let mse = |a: &[f64], b: &[f64]| data_io::mse_val(a, b).map_err(data_failure);
    let n = series.train_len;
    let summary = ValidationSummary {
        alpha: c.train.alpha,
        mse_val: mse(&predicted, &observed)?,
        mse_train_window: mse(&predicted[..n], &observed[..n])?,
        mse_prediction_window: if n < observed.len() {
            Some(mse(&predicted[n..], &observed[n..])?)
        } else {
            None
        },
        train_range: c.data.split.train_range,
        validate_range: c.data.split.validate_range,
    };
    if !summary.mse_val.is_finite() {
        return Err(Failure::Numerical(anyhow!("MSE_val is not finite")));
    }
    write_json(&ctx.out, "validation.json", &summary)?;
    let chart = prediction_chart(&params, &series, &format!("Validation, alpha = {}", c.train.alpha));
    write(&ctx.out, "validation.svg", &chart.render())?;
    Ok(format!("MSE_val = {:e}", summary.mse_val))
}
