mod common;

use common::{instance, normal, rng};
use fsv_vb::engine::{
    elbo_gradient, estimate_elbo, fit, sgd_step, AdamConfig, AdamState, FittedModel, InitConfig, RunConfig,
};
use fsv_vb::exec::Execution;
use fsv_vb::family::{count_variational_params, srn_layout, Family, SrnRole, VariationalSpec};
use fsv_vb::joint::{conditionals, log_joint, log_joint_terms, log_lik_marginal_f};
use fsv_vb::model::{ErrorFamily, ModelSpec, ReturnsPanel};
use fsv_vb::sim::{default_params, simulate_fsv};
use fsv_vb::srn::SrnBlock;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// θ ~ N(0, 1), y_i | θ ~ N(θ, 1).
struct Toy {
    y: Vec<f64>,
}

impl Toy {
    fn log_h(&self, th: f64) -> f64 {
        let mut v = -0.5 * (LN_2PI + th * th);
        for y in &self.y {
            v += -0.5 * (LN_2PI + (y - th) * (y - th));
        }
        v
    }

    fn grad(&self, th: f64) -> f64 {
        -th + self.y.iter().map(|y| y - th).sum::<f64>()
    }

    fn posterior(&self) -> (f64, f64) {
        let v = 1.0 / (1.0 + self.y.len() as f64);
        (v * self.y.iter().sum::<f64>(), v)
    }

    /// `log N(y; 0, I + 11ᵀ)` via the determinant lemma.
    fn log_evidence(&self) -> f64 {
        let n = self.y.len() as f64;
        let s: f64 = self.y.iter().sum();
        let ss: f64 = self.y.iter().map(|y| y * y).sum();
        -0.5 * (n * LN_2PI + (1.0 + n).ln() + ss - s * s / (1.0 + n))
    }
}

fn toy() -> Toy {
    Toy {
        y: vec![0.3, 1.7, -0.4, 2.2, 0.9, 1.1],
    }
}

#[test]
fn conjugate_toy_elbo_equals_evidence_at_optimum() {
    let toy = toy();
    let (m, v) = toy.posterior();
    let mut q = SrnBlock::new(1, 0, true, v.sqrt());
    q.mu[0] = m;
    let mut r = rng(11);
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        let s = q.sample(&[], &[normal(&mut r)]).unwrap();
        total += toy.log_h(s.values[0]) - q.log_density(&s.values).unwrap();
    }
    let elbo = total / n as f64;
    assert!((elbo - toy.log_evidence()).abs() < 1e-9, "{elbo} vs {}", toy.log_evidence());
}

#[test]
fn conjugate_toy_adam_reaches_posterior_mean() {
    let toy = toy();
    let (m, _) = toy.posterior();
    let mut q = SrnBlock::new(1, 0, true, 0.1);
    let cfg = AdamConfig {
        alpha: 0.01,
        ..AdamConfig::default()
    };
    let mut st = AdamState::new(q.n_params());
    let mut r = rng(5);
    for _ in 0..5000 {
        let s = q.sample(&[], &[normal(&mut r)]).unwrap();
        let gq = q.grad_log_density(&s.values).unwrap();
        let g = q.backprop(&s, &[toy.grad(s.values[0]) - gq[0]]);
        let d = st.step(&cfg, &g);
        let mut p = q.to_flat();
        p.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        q.set_flat(&p);
    }
    assert!((q.mu[0] - m).abs() < 0.05, "mean {} vs {m}", q.mu[0]);
}

fn small_panel(s: usize, k: usize, t: usize, seed: u64) -> (ModelSpec, ReturnsPanel) {
    let model = ModelSpec::new(s, k, t, ErrorFamily::Normal).unwrap();
    let p = default_params(&model, seed);
    (model, simulate_fsv(&model, &p, seed).unwrap().0)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (model, y) = small_panel(3, 1, 20, 2);
    for fam in [Family::Mf, Family::Q1, Family::Q2, Family::Q3] {
        let adam = AdamConfig {
            alpha: 0.0,
            ..AdamConfig::default()
        };
        let mut f = FittedModel::initialise(model, VariationalSpec::new(fam), 9, &InitConfig::default(), adam);
        let (tbn, srn) = (f.tbn.clone(), f.srn.clone());
        let out = sgd_step(&mut f, &y, &adam, Execution::Parallel).unwrap();
        assert!(out.elbo.is_finite());
        assert_eq!(f.tbn, tbn);
        assert_eq!(f.srn, srn);
        assert_eq!(f.elbo_trace.len(), 1);
    }
}

#[test]
fn fits_are_bit_identical_per_seed_and_schedule() {
    let (model, y) = small_panel(4, 2, 25, 3);
    for fam in [Family::Mf, Family::Q1, Family::Q2, Family::Q3] {
        let vs = VariationalSpec::new(fam);
        let mut run = RunConfig::new(100, 42);
        let a = fit(&model, &vs, &y, &run).unwrap();
        let b = fit(&model, &vs, &y, &run).unwrap();
        run.exec = Execution::Sequential;
        let c = fit(&model, &vs, &y, &run).unwrap();
        assert_eq!(a, b, "{fam}");
        assert_eq!(a.tbn, c.tbn, "{fam}");
        assert_eq!(a.srn, c.srn, "{fam}");
        assert_eq!(a.elbo_trace, c.elbo_trace, "{fam}");
    }
}

#[test]
fn t_family_fits_are_deterministic() {
    let model = ModelSpec::new(3, 1, 20, ErrorFamily::StudentT).unwrap();
    let y = simulate_fsv(&model, &default_params(&model, 4), 4).unwrap().0;
    for fam in [Family::Q1, Family::Q3] {
        let run = RunConfig::new(50, 1);
        let a = fit(&model, &VariationalSpec::new(fam), &y, &run).unwrap();
        let b = fit(&model, &VariationalSpec::new(fam), &y, &run).unwrap();
        assert_eq!(a, b);
        assert!(a.elbo_trace.iter().all(|v| v.is_finite()), "{fam}");
    }
}

#[test]
fn zero_iterations_return_initialisation() {
    let (model, y) = small_panel(3, 1, 15, 5);
    let vs = VariationalSpec::new(Family::Q3);
    let run = RunConfig::new(0, 8);
    let f = fit(&model, &vs, &y, &run).unwrap();
    let mut init = FittedModel::initialise(model, vs, 8, &InitConfig::default(), AdamConfig::default());
    init.data_fingerprint = y.fingerprint();
    assert_eq!(f, init);
    assert!(f.elbo_trace.is_empty());
}

#[test]
fn exact_factor_families_carry_no_factor_or_weight_parameters() {
    for ef in [ErrorFamily::Normal, ErrorFamily::StudentT] {
        let model = ModelSpec::new(6, 2, 30, ef).unwrap();
        let vs = VariationalSpec::new(Family::Q3);
        let layout = srn_layout(&vs, &model);
        assert!(layout
            .iter()
            .all(|l| !matches!(l.role, SrnRole::FactorPath(_) | SrnRole::Joint(_) | SrnRole::All)));
        let covered: usize = layout.iter().map(|l| l.r).sum();
        let dof = if ef == ErrorFamily::StudentT { 8 } else { 0 };
        assert_eq!(covered, model.n_beta() + dof);
        let f = FittedModel::initialise(model, vs, 0, &InitConfig::default(), AdamConfig::default());
        assert_eq!(f.n_variational_params(), count_variational_params(&vs, &model));
    }
}

#[test]
fn marginal_and_complete_data_estimators_agree() {
    // For the same (θ, h) draws, log p(y, f | θ, h) − log p(f | y, θ, h) with
    // f from its conditional equals log p(y | θ, h).
    let n = 10_000;
    let mut diffs = Vec::with_capacity(n);
    let mut scale: f64 = 0.0;
    for i in 0..n {
        let (spec, theta, mut x, y) = instance(3, 2, 4, ErrorFamily::Normal, 1000 + i as u64);
        let conds = conditionals(&theta, &x, &y, &spec, Execution::Sequential).unwrap();
        let mut r = rng(i as u64);
        let mut log_cond = 0.0;
        for (t, (c, _)) in conds.iter().enumerate() {
            let ft = c.sample(&[normal(&mut r), normal(&mut r)]);
            for k in 0..2 {
                x.f[k * spec.t + t] = ft[k];
            }
            log_cond += c.log_density(&ft);
        }
        let terms = log_joint_terms(&theta, &x, &y, &spec).unwrap();
        let q3 = log_lik_marginal_f(&theta, &x, &y, &spec).unwrap() + terms.states_and_priors();
        let q1 = log_joint(&theta, &x, &y, &spec).unwrap() - log_cond;
        scale = scale.max(q3.abs());
        diffs.push(q3 - q1);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!(mean.abs() <= (3.0 * se).max(1e-10 * scale), "mean {mean} se {se}");
}

/// Flat view of all block parameters, in `adam` order.
fn flat(f: &FittedModel) -> Vec<Vec<f64>> {
    f.tbn.iter().map(|b| b.to_flat()).chain(f.srn.iter().map(|b| b.to_flat())).collect()
}

fn set(f: &mut FittedModel, block: usize, idx: usize, v: f64) {
    let nt = f.tbn.len();
    if block < nt {
        let mut p = f.tbn[block].to_flat();
        p[idx] = v;
        f.tbn[block].set_flat(&p);
    } else {
        let mut p = f.srn[block - nt].to_flat();
        p[idx] = v;
        f.srn[block - nt].set_flat(&p);
    }
}

fn gradient_sanity(fam: Family) {
    let (model, y) = small_panel(2, 1, 10, 6);
    let vs = VariationalSpec::new(fam);
    let mut run = RunConfig::new(300, 3);
    run.adam.alpha = 0.01;
    run.exec = Execution::Sequential;
    let fitted = fit(&model, &vs, &y, &run).unwrap();
    let params = flat(&fitted);
    let nt = fitted.tbn.len();
    // (block, flat index): idiosyncratic κ mean, factor ψ mean, a path mean
    // and a log-Cholesky entry, and the first copula mean.
    let picks = [(0usize, 0usize), (nt - 1, 1), (0, 3 + 6 + 4), (1, 3), (nt, params[nt].len() / 2)];
    let n = 10_000;
    let h = 1e-5;
    for &(b, i) in &picks {
        let base = params[b][i];
        let mut stl = Vec::with_capacity(n);
        let mut fd = Vec::with_capacity(n);
        let (mut up, mut dn) = (fitted.clone(), fitted.clone());
        set(&mut up, b, i, base + h);
        set(&mut dn, b, i, base - h);
        for c in 0..n as u64 {
            let (_, g) = elbo_gradient(&fitted, &y, 10_000 + c, Execution::Sequential).unwrap();
            stl.push(g[b][i]);
            let e1 = estimate_elbo(&up, &y, 1, c, Execution::Sequential).unwrap();
            let e0 = estimate_elbo(&dn, &y, 1, c, Execution::Sequential).unwrap();
            fd.push((e1 - e0) / (2.0 * h));
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, s2 / v.len() as f64)
        };
        let (ms, vs_) = stats(&stl);
        let (mf, vf) = stats(&fd);
        let se = (vs_ + vf).sqrt();
        assert!((ms - mf).abs() <= 3.0 * se, "{fam} block {b} entry {i}: stl {ms} fd {mf} se {se}");
    }
}

#[test]
fn stochastic_gradient_matches_elbo_differences_q1() {
    gradient_sanity(Family::Q1);
}

#[test]
fn stochastic_gradient_matches_elbo_differences_q3() {
    gradient_sanity(Family::Q3);
}

#[test]
fn rejected_steps_leave_state_untouched() {
    let (model, y) = small_panel(2, 1, 10, 7);
    let vs = VariationalSpec::new(Family::Q3);
    let adam = AdamConfig::default();
    let mut f = FittedModel::initialise(model, vs, 1, &InitConfig::default(), adam);
    // An absurd copula mean drives the loadings to overflow.
    f.srn[0].mu[0] = 800.0;
    let before = f.clone();
    let out = sgd_step(&mut f, &y, &adam, Execution::Parallel).unwrap();
    assert!(!out.accepted);
    assert!(out.elbo.is_nan());
    assert_eq!(f.tbn, before.tbn);
    assert_eq!(f.srn, before.srn);
    assert_eq!(f.adam, before.adam);
    assert_eq!(f.diagnostics.rejected_steps, 1);
    assert!(f.is_unstable());
}

#[test]
fn estimate_elbo_is_deterministic() {
    let (model, y) = small_panel(3, 1, 12, 8);
    let f = fit(&model, &VariationalSpec::new(Family::Q1), &y, &RunConfig::new(50, 2)).unwrap();
    let a = estimate_elbo(&f, &y, 20, 77, Execution::Parallel).unwrap();
    let b = estimate_elbo(&f, &y, 20, 77, Execution::Sequential).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(estimate_elbo(&f, &y, 0, 77, Execution::Parallel).is_err());
}
