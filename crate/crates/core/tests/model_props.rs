mod common;

use proptest::prelude::*;

use common::long_term_initial;
use svihr_pinn::data_io::{mse_val, normalize, synthesize, RawSeries, SplitSpec};
use svihr_pinn::epi_model::{rhs, CompartmentState, SvihrParams};
use svihr_pinn::nsfd::{denominator, fit_peak, simulate, FitGrid};

fn params_strategy() -> impl Strategy<Value = SvihrParams> {
    (1e-10f64..3e-8, 0.0f64..0.2, 0.0f64..0.05, 0.0f64..0.3, 0.5f64..3.0, 0.5f64..3.0, 0.0f64..0.1).prop_map(
        |(beta, kappa, vac, xi, t_infect, t_hosp, mort)| SvihrParams {
            beta,
            kappa,
            vac,
            xi,
            t_infect,
            t_hosp,
            mort,
            lambda_in: 0.0,
            mu: 0.0,
            population: 83.1e6,
        },
    )
}

fn state_strategy() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(0.0f64..1e7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rhs_conserves_population_without_births(p in params_strategy(), x in state_strategy()) {
        let f = rhs(&p, &p.derive_rates(), x);
        let total: f64 = f.iter().sum();
        let scale: f64 = f.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        prop_assert!(total.abs() <= 1e-12 * scale, "{total}");
    }

    #[test]
    fn vaccinated_and_recovered_grow_where_vaccination_dominates(p in params_strategy(), x in state_strategy()) {
        prop_assume!(p.beta * p.kappa * x[2] <= p.vac);
        let f = rhs(&p, &p.derive_rates(), x);
        prop_assert!(f[1] >= 0.0);
        prop_assert!(f[4] >= 0.0);
    }

    #[test]
    fn nsfd_stays_positive(p in params_strategy(), x in prop::array::uniform5(1.0f64..1e6), h in prop::sample::select(vec![0.1, 0.5, 1.0, 2.0])) {
        let initial = CompartmentState::from_array(x);
        match simulate(&p, &p.derive_rates(), h, initial, 100) {
            Ok(run) => {
                for st in &run.trajectory {
                    prop_assert!(st.to_array().iter().all(|&v| v >= 0.0));
                }
            }
            Err(e) => prop_assert!(e.to_string().contains("positivity")),
        }
    }

    #[test]
    fn normalize_round_trip(seed in any::<u64>(), noise in 0.0f64..0.2) {
        let p = SvihrParams::long_term();
        let raw = synthesize(&p, &p.derive_rates(), 1.0, long_term_initial(), 30, noise, seed).unwrap();
        let split = SplitSpec { train_range: [2, 20], validate_range: [20, 28] };
        let series = normalize(&raw, &split).unwrap();
        let back = series.denormalized();
        for (row, orig) in back.iter().zip(&raw.values[2..=28]) {
            for k in 0..5 {
                prop_assert!((row[k] - orig[k]).abs() <= 1e-14 * orig[k].abs());
            }
        }
        for k in 0..5 {
            let max = series.training_values().iter().map(|r| r[k]).fold(0.0, f64::max);
            prop_assert_eq!(max, 1.0);
        }
        prop_assert_eq!(series.times[0], 0.0);
        prop_assert_eq!(*series.times.last().unwrap(), 1.0);
    }

    #[test]
    fn mse_val_detects_translation(xs in prop::collection::vec(-10.0f64..10.0, 1..50), c in -1.0f64..1.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let m = mse_val(&shifted, &xs).unwrap();
        prop_assert!((m - c * c).abs() <= 1e-12 * (1.0 + c * c) + 1e-13);
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded(seed in any::<u64>()) {
        let p = SvihrParams::long_term();
        let d = p.derive_rates();
        let clean = synthesize(&p, &d, 1.0, long_term_initial(), 20, 0.0, seed).unwrap();
        let a = synthesize(&p, &d, 1.0, long_term_initial(), 20, 0.05, seed).unwrap();
        let b = synthesize(&p, &d, 1.0, long_term_initial(), 20, 0.05, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for (noisy, exact) in a.values.iter().zip(&clean.values) {
            for k in 0..5 {
                prop_assert!((noisy[k] - exact[k]).abs() <= 0.05 * exact[k] * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn noiseless_synthesis_satisfies_the_conservation_identity() {
    let p = SvihrParams::long_term();
    let raw = synthesize(&p, &p.derive_rates(), 1.0, long_term_initial(), 60, 0.0, 0).unwrap();
    for w in raw.values.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n0: f64 = a.iter().sum();
        let n1: f64 = b.iter().sum();
        let expected = p.beta * (1.0 + p.kappa) * b[0] * (b[2] - a[2]);
        assert!(((n1 - n0) - expected).abs() / n0 <= 1e-12);
    }
}

#[test]
fn births_and_deaths_follow_the_exact_solution() {
    let p = SvihrParams {
        beta: 0.0,
        vac: 0.0,
        lambda_in: 2.0e4,
        mu: 0.01,
        ..SvihrParams::long_term()
    };
    let init = long_term_initial();
    let h = 0.7;
    let run = simulate(&p, &p.derive_rates(), h, init, 100).unwrap();
    let eq = p.lambda_in / p.mu;
    for (n, st) in run.trajectory.iter().enumerate() {
        let t = n as f64 * h;
        let exact = eq + (init.total() - eq) * (-p.mu * t).exp();
        assert!((st.total() - exact).abs() / exact <= 1e-12, "step {n}");
    }
    assert_eq!(denominator(h, 0.0), h);
}

#[test]
fn fit_recovers_an_on_grid_point() {
    let grid = FitGrid::default();
    let truth = SvihrParams {
        beta: grid.beta[23],
        kappa: grid.kappa[2],
        ..SvihrParams::long_term()
    };
    let raw = synthesize(&truth, &truth.derive_rates(), 1.0, long_term_initial(), 40, 0.0, 0).unwrap();
    let split = SplitSpec { train_range: [0, 40], validate_range: [40, 40] };
    let observed = normalize(&raw, &split).unwrap();
    let fit = fit_peak(&observed, &grid, &SvihrParams::long_term(), 1.0, long_term_initial(), 40).unwrap();
    assert_eq!((fit.beta, fit.kappa), (truth.beta, truth.kappa));
    assert!(fit.peak_error <= 1e-12);
}

#[test]
fn csv_round_trip_of_synthetic_data() {
    let p = SvihrParams::long_term();
    let raw = synthesize(&p, &p.derive_rates(), 1.0, long_term_initial(), 10, 0.02, 9).unwrap();
    let back: RawSeries = svihr_pinn::data_io::read_csv(raw.to_csv().as_bytes()).unwrap();
    assert_eq!(back, raw);
}
