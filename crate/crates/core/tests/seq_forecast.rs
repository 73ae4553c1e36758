use fsv_vb::engine::{fit, AdamConfig, FittedModel, InitConfig, RunConfig};
use fsv_vb::exec::Execution;
use fsv_vb::family::{Family, VariationalSpec};
use fsv_vb::forecast::{clapl, correlation_at, forecast_draws, log_mean_exp, min_variance_weights, predictive_likelihood, ForecastDraws};
use fsv_vb::io::snapshot_bytes;
use fsv_vb::model::{ErrorFamily, ModelSpec, ReturnsPanel};
use fsv_vb::seq::{extend_fit, moments_consistent, sequential_update, UpdateConfig, UpdateMode};
use fsv_vb::sim::{default_params, simulate_fsv};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Normal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn adam() -> AdamConfig {
    AdamConfig {
        alpha: 0.01,
        ..AdamConfig::default()
    }
}

fn sim(s: usize, k: usize, t: usize, ef: ErrorFamily, seed: u64) -> (ModelSpec, ReturnsPanel) {
    let model = ModelSpec::new(s, k, t, ef).unwrap();
    let (y, _) = simulate_fsv(&model, &default_params(&model, seed), seed).unwrap();
    (model, y)
}

fn fit_q(family: Family, model: &ModelSpec, y: &ReturnsPanel, iters: u64, seed: u64) -> FittedModel {
    let run = RunConfig {
        adam: adam(),
        ..RunConfig::new(iters, seed)
    };
    fit(model, &VariationalSpec::new(family), y, &run).unwrap()
}

fn update_cfg(iters: u64) -> UpdateConfig {
    UpdateConfig {
        iters,
        adam: adam(),
        ..UpdateConfig::default()
    }
}

/// Dense `log N(y; 0, Σ)` via nalgebra's Cholesky.
fn dense_log_density(sigma: &[f64], s: usize, y: &[f64]) -> f64 {
    let m = DMatrix::from_row_slice(s, s, sigma);
    let ch = m.cholesky().expect("SPD");
    let l = ch.l();
    let logdet: f64 = 2.0 * (0..s).map(|i| l[(i, i)].ln()).sum::<f64>();
    let yv = DVector::from_column_slice(y);
    let q = yv.dot(&ch.solve(&yv));
    -0.5 * (s as f64 * LN_2PI + logdet + q)
}

// ---------------------------------------------------------------- seq-VA

#[test]
fn zero_new_rows_return_the_fit_unchanged() {
    let (model, y) = sim(3, 1, 20, ErrorFamily::Normal, 1);
    let f = fit_q(Family::Q3, &model, &y, 30, 1);
    let empty = y.slice_rows(0, 0);
    let g = sequential_update(&f, &y, &empty, &update_cfg(100)).unwrap();
    assert_eq!(snapshot_bytes(&g).unwrap(), snapshot_bytes(&f).unwrap());
}

#[test]
fn cold_update_reproduces_batch_fit() {
    for family in [Family::Mf, Family::Q1, Family::Q2, Family::Q3] {
        let (model, y) = sim(3, 1, 25, ErrorFamily::Normal, 2);
        let (old, new) = (y.slice_rows(0, 20), y.slice_rows(20, 25));
        let f = fit_q(family, &model.with_t(20), &old, 40, 9);
        let cfg = UpdateConfig {
            mode: UpdateMode::Cold,
            ..update_cfg(60)
        };
        let g = sequential_update(&f, &old, &new, &cfg).unwrap();
        let batch = fit_q(family, &model, &y, 60, 9);
        assert_eq!(snapshot_bytes(&g).unwrap(), snapshot_bytes(&batch).unwrap(), "{family:?}");
    }
}

#[test]
fn extension_grows_every_block_and_keeps_moments_aligned() {
    for ef in [ErrorFamily::Normal, ErrorFamily::StudentT] {
        for family in [Family::Mf, Family::Q1, Family::Q2, Family::Q3] {
            let (model, y) = sim(3, 2, 15, ef, 3);
            let f = fit_q(family, &model, &y, 10, 3);
            let g = extend_fit(&f, 22, &InitConfig::default()).unwrap();
            assert_eq!(g.model.t, 22);
            assert!(moments_consistent(&g));
            let fresh = FittedModel::initialise(model.with_t(22), f.vspec, 3, &InitConfig::default(), adam());
            assert_eq!(g.n_variational_params(), fresh.n_variational_params(), "{family:?} {ef:?}");
        }
    }
}

#[test]
fn update_rejects_dimension_mismatch() {
    let (model, y) = sim(3, 1, 20, ErrorFamily::Normal, 4);
    let f = fit_q(Family::Q3, &model, &y, 5, 4);
    let (_, other) = sim(4, 1, 5, ErrorFamily::Normal, 4);
    assert!(sequential_update(&f, &y, &other, &update_cfg(5)).is_err());
    assert!(sequential_update(&f, &y.slice_rows(0, 19), &y.slice_rows(0, 1), &update_cfg(5)).is_err());
}

/// First iteration at which the trailing mean over `window` steps reaches
/// `target`.
fn steps_to_reach(trace: &[f64], window: usize, target: f64) -> Option<usize> {
    (window..=trace.len()).find(|&i| {
        let w: Vec<f64> = trace[i - window..i].iter().copied().filter(|v| v.is_finite()).collect();
        !w.is_empty() && w.iter().sum::<f64>() / w.len() as f64 >= target
    })
}

#[test]
fn warm_start_reaches_the_batch_band_in_at_most_half_the_steps() {
    let (model, y) = sim(3, 1, 90, ErrorFamily::Normal, 5);
    let iters = 4000;
    let batch = fit_q(Family::Q3, &model, &y, iters, 11);
    let (mean, sd) = batch.windowed_elbo(500);
    let band_low = mean - sd;
    let cold = steps_to_reach(&batch.elbo_trace, 100, band_low).expect("cold run reaches its own band");

    let prev = fit_q(Family::Q3, &model.with_t(80), &y.slice_rows(0, 80), iters, 11);
    let warm = sequential_update(&prev, &y.slice_rows(0, 80), &y.slice_rows(80, 90), &update_cfg(iters)).unwrap();
    let trace = &warm.elbo_trace[prev.elbo_trace.len()..];
    let warm_steps = steps_to_reach(trace, 100, band_low).expect("warm run reaches the band");
    assert!(2 * warm_steps <= cold, "warm {warm_steps} vs cold {cold}");
}

// ---------------------------------------------------------------- forecasts

/// An MF fit whose θ marginals are points at φ ≈ 0, τ ≈ 0.
fn frozen_fit(model: &ModelSpec) -> FittedModel {
    let mut f = FittedModel::initialise(*model, VariationalSpec::new(Family::Mf), 1, &InitConfig::default(), adam());
    let (s, k) = (model.s, model.k);
    let b = &mut f.srn[0];
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for i in 0..model.n_theta() {
        b.d[i] = 1e-10;
        b.mu[i] = r.random_range(-0.5..0.5);
    }
    for i in s..3 * s + 2 * k {
        b.mu[i] = -40.0;
    }
    f
}

#[test]
fn frozen_dynamics_give_constant_covariance() {
    let model = ModelSpec::new(4, 2, 10, ErrorFamily::Normal).unwrap();
    let (_, y) = sim(4, 2, 10, ErrorFamily::Normal, 6);
    let f = frozen_fit(&model);
    let fd = forecast_draws(&f, &y, 5, 20, 3, Execution::Parallel).unwrap();
    for m in 0..fd.m {
        let b = fd.beta_at(m);
        let target: Vec<f64> = (0..16)
            .map(|ij| {
                let (i, j) = (ij / 4, ij % 4);
                let mut v: f64 = (0..2).map(|q| b[i * 2 + q] * b[j * 2 + q]).sum();
                if i == j {
                    v += fd.v_at(m, 0)[i];
                }
                v
            })
            .collect();
        let kappa_v: Vec<f64> = (0..4).map(|i| f.srn[0].mu[i].exp()).collect();
        for i in 0..4 {
            assert!((fd.v_at(m, 0)[i] / kappa_v[i] - 1.0).abs() < 1e-8);
        }
        assert!(fd.d_at(m, 0).iter().all(|d| (d - 1.0).abs() < 1e-12));
        for h in 0..fd.horizon {
            for (a, t) in fd.sigma(m, h).iter().zip(&target) {
                assert!((a - t).abs() <= 1e-14 * t.abs().max(1.0), "h = {h}: {a} vs {t}");
            }
        }
    }
}

#[test]
fn forecast_covariance_matches_mean_sigma_within_three_standard_errors() {
    let (model, y) = sim(3, 1, 30, ErrorFamily::Normal, 7);
    let f = fit_q(Family::Q3, &model, &y, 300, 7);
    let m = 100_000;
    let fd = forecast_draws(&f, &y, 1, m, 21, Execution::Parallel).unwrap();
    for i in 0..3 {
        for j in 0..=i {
            let diffs: Vec<f64> = (0..m)
                .map(|d| {
                    let yv = fd.y_at(d, 0);
                    yv[i] * yv[j] - fd.sigma(d, 0)[i * 3 + j]
                })
                .collect();
            let mean = diffs.iter().sum::<f64>() / m as f64;
            let sd = (diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
            assert!(mean.abs() <= 3.0 * sd / (m as f64).sqrt(), "({i},{j}): {mean} vs se {}", sd / (m as f64).sqrt());
        }
    }
}

#[test]
fn forecast_draws_are_reproducible_and_parallel_invariant() {
    let (model, y) = sim(3, 2, 20, ErrorFamily::StudentT, 8);
    let f = fit_q(Family::Q3, &model, &y, 20, 8);
    let a = forecast_draws(&f, &y, 3, 50, 4, Execution::Parallel).unwrap();
    let b = forecast_draws(&f, &y, 3, 50, 4, Execution::Parallel).unwrap();
    let c = forecast_draws(&f, &y, 3, 50, 4, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, forecast_draws(&f, &y, 3, 50, 5, Execution::Parallel).unwrap());
}

#[test]
fn forecast_sigma_draws_are_positive_definite() {
    for family in [Family::Mf, Family::Q1, Family::Q2, Family::Q3] {
        let (model, y) = sim(4, 2, 20, ErrorFamily::StudentT, 9);
        let f = fit_q(family, &model, &y, 30, 9);
        let fd = forecast_draws(&f, &y, 4, 30, 2, Execution::Parallel).unwrap();
        for m in 0..fd.m {
            for h in 0..4 {
                assert!(DMatrix::from_row_slice(4, 4, &fd.sigma(m, h)).cholesky().is_some());
            }
        }
    }
}

#[test]
fn woodbury_density_equals_dense_density() {
    let (model, y) = sim(6, 2, 20, ErrorFamily::Normal, 10);
    let f = fit_q(Family::Q3, &model, &y, 50, 10);
    let fd = forecast_draws(&f, &y, 2, 40, 5, Execution::Parallel).unwrap();
    let obs = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1];
    for h in 0..2 {
        let dense: Vec<f64> = (0..fd.m).map(|m| dense_log_density(&fd.sigma(m, h), 6, &obs)).collect();
        for (m, d) in dense.iter().enumerate() {
            let w = fd.sigma_lowrank(m, h).unwrap().log_density(&obs);
            assert!((w - d).abs() <= 1e-10 * d.abs().max(1.0), "{w} vs {d}");
        }
        let lp = fd.log_predictive(h, &obs, Execution::Parallel).unwrap();
        let oracle = {
            let mx = dense.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mx + (dense.iter().map(|v| (v - mx).exp()).sum::<f64>() / dense.len() as f64).ln()
        };
        assert!((lp - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }
}

#[test]
fn single_draw_apl_is_one_gaussian_log_density() {
    let (model, y) = sim(4, 1, 20, ErrorFamily::Normal, 11);
    let f = fit_q(Family::Q1, &model, &y, 20, 11);
    let obs = [0.1, 0.2, -0.3, 0.4];
    let fd = forecast_draws(&f, &y, 1, 1, 6, Execution::Parallel).unwrap();
    let lp = predictive_likelihood(&f, &y, &obs, 1, 6, Execution::Parallel).unwrap();
    let d = dense_log_density(&fd.sigma(0, 0), 4, &obs);
    assert!((lp - d).abs() <= 1e-10 * d.abs());
}

#[test]
fn zero_loadings_give_a_sum_of_univariate_densities() {
    let (s, k, m) = (3, 2, 4);
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut pos = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(0.2..3.0)).collect() };
    let fd = ForecastDraws {
        horizon: 1,
        m,
        s,
        k,
        beta: vec![0.0; m * s * k],
        h_eps: vec![0.0; m * s],
        h_f: vec![0.0; m * k],
        f: vec![0.0; m * k],
        y: vec![0.0; m * s],
        d: pos(m * k),
        v: pos(m * s),
    };
    let obs = [0.5, -1.5, 2.5];
    let per_draw: Vec<f64> = (0..m)
        .map(|d| {
            (0..s)
                .map(|i| Normal::new(0.0, fd.v_at(d, 0)[i].sqrt()).unwrap().ln_pdf(obs[i]))
                .sum()
        })
        .collect();
    let oracle = (per_draw.iter().map(|v| v.exp()).sum::<f64>() / m as f64).ln();
    let lp = fd.log_predictive(0, &obs, Execution::Sequential).unwrap();
    assert!((lp - oracle).abs() < 1e-12, "{lp} vs {oracle}");
}

#[test]
fn log_mean_exp_survives_underflow() {
    let v = log_mean_exp(&[-2000.0, -2000.0 + 2f64.ln()]).unwrap();
    assert!((v - (-2000.0 + 1.5f64.ln())).abs() < 1e-12);
}

#[test]
fn clapl_of_one_row_is_the_predictive_likelihood() {
    let (model, y) = sim(3, 1, 31, ErrorFamily::Normal, 13);
    let train = y.slice_rows(0, 30);
    let f = fit_q(Family::Q3, &model.with_t(30), &train, 50, 13);
    let hold = y.slice_rows(30, 31);
    let c = clapl(&f, &train, &hold, 500, 1, &update_cfg(10), 3).unwrap();
    let p = predictive_likelihood(&f, &train, hold.row(0), 500, 3, Execution::default()).unwrap();
    assert_eq!(c, p);
}

#[test]
fn clapl_is_additive_over_aligned_update_points() {
    let (model, y) = sim(3, 1, 36, ErrorFamily::Normal, 14);
    let train = y.slice_rows(0, 30);
    let f = fit_q(Family::Q3, &model.with_t(30), &train, 50, 14);
    let cfg = update_cfg(20);
    let whole = clapl(&f, &train, &y.slice_rows(30, 36), 300, 2, &cfg, 7).unwrap();
    let first = clapl(&f, &train, &y.slice_rows(30, 34), 300, 2, &cfg, 7).unwrap();
    let mut cur = f.clone();
    let mut data = train.clone();
    for (a, b) in [(30, 32), (32, 34)] {
        cur = sequential_update(&cur, &data, &y.slice_rows(a, b), &cfg).unwrap();
        data = data.concat(&y.slice_rows(a, b)).unwrap();
    }
    let second = clapl(&cur, &data, &y.slice_rows(34, 36), 300, 2, &cfg, 7).unwrap();
    assert!((whole - (first + second)).abs() <= 1e-10 * whole.abs(), "{whole} vs {first} + {second}");
}

#[test]
fn clapl_prefers_the_true_factor_count() {
    let mut wins = 0;
    for rep in 0..10u64 {
        let seed = 1000 + rep;
        let (_, y) = sim(6, 2, 120, ErrorFamily::Normal, seed);
        let train = y.slice_rows(0, 100);
        let hold = y.slice_rows(100, 120);
        let cfg = update_cfg(200);
        let score = |k: usize| {
            let m = ModelSpec::new(6, k, 100, ErrorFamily::Normal).unwrap();
            let f = fit_q(Family::Q3, &m, &train, 3000, seed);
            clapl(&f, &train, &hold, 2000, 5, &cfg, seed).unwrap()
        };
        let (c1, c2) = (score(1), score(2));
        if c2 > c1 {
            wins += 1;
        }
        eprintln!("rep {rep}: CLAPL K=1 {c1:.3}, K=2 {c2:.3}");
    }
    assert!(wins >= 8, "K = 2 preferred in {wins}/10 replications");
}

// ---------------------------------------------------------------- portfolio quantities

fn random_spd(r: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..s * s).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            out[i * s + j] = (0..s).map(|q| a[i * s + q] * a[j * s + q]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    out
}

fn quad(sigma: &[f64], s: usize, w: &[f64]) -> f64 {
    (0..s).map(|i| (0..s).map(|j| w[i] * sigma[i * s + j] * w[j]).sum::<f64>()).sum()
}

#[test]
fn weight_examples() {
    let w = min_variance_weights(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
    assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let w = min_variance_weights(&[1.0, 0.0, 0.0, 4.0], 2).unwrap();
    assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
    assert!(min_variance_weights(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
}

#[test]
fn correlation_examples() {
    let g = correlation_at(&[1.0, 0.5, 0.5, 4.0], 2).unwrap();
    assert_eq!(g[0], 1.0);
    assert_eq!(g[3], 1.0);
    assert!((g[1] - 0.25).abs() < 1e-15 && g[1] == g[2]);
    assert_eq!(correlation_at(&[2.0, 0.0, 0.0, 9.0], 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    assert!(correlation_at(&[0.0, 0.0, 0.0, 1.0], 2).is_err());
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let sig = random_spd(&mut r, 3);
    let g = correlation_at(&sig, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let want = sig[i * 3 + j] / (sig[i * 3 + i] * sig[j * 3 + j]).sqrt();
            assert!((g[i * 3 + j] - want).abs() <= 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn min_variance_weights_sum_to_one_and_dominate(seed in any::<u64>(), s in 2usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let sig = random_spd(&mut r, s);
        let w = min_variance_weights(&sig, s).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let best = quad(&sig, s, &w);
        for _ in 0..1000 {
            let mut v: Vec<f64> = (0..s).map(|_| r.random_range(-2.0..2.0)).collect();
            let tot: f64 = v.iter().sum();
            if tot.abs() < 1e-3 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= tot);
            prop_assert!(best <= quad(&sig, s, &v) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal(seed in any::<u64>(), s in 1usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let sig = random_spd(&mut r, s);
        let g = correlation_at(&sig, s).unwrap();
        for i in 0..s {
            prop_assert!((g[i * s + i] - 1.0).abs() <= 1e-14);
            for j in 0..s {
                prop_assert_eq!(g[i * s + j], g[j * s + i]);
                prop_assert!(g[i * s + j].abs() <= 1.0 + 1e-14);
            }
        }
    }
}
