//! Log-joint density `log h(θ, x)`, its analytic gradient and the
//! closed-form conditionals of the factors and mixing weights.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::linalg::{cholesky_in_place, solve_lower, solve_lower_transpose, LN_2PI};
use crate::model::{logistic, softplus, ModelSpec, ReturnsPanel, ThetaReal, LatentStates};

/// Exponent arguments are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 700.0;

#[inline]
fn clamp_arg(a: f64, clamped: &mut usize) -> f64 {
    if a > EXP_CLAMP {
        *clamped += 1;
        EXP_CLAMP
    } else if a < -EXP_CLAMP {
        *clamped += 1;
        -EXP_CLAMP
    } else {
        a
    }
}

/// Additive pieces of the log-joint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointTerms {
    pub observation: f64,
    pub factor: f64,
    pub states: f64,
    pub prior: f64,
    pub jacobian: f64,
    /// `IG(v/2, v/2)` log-densities of the mixing weights (t-family).
    pub mixing: f64,
    /// Number of exponent arguments that hit [`EXP_CLAMP`].
    pub clamped: usize,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.observation + self.factor + self.states + self.prior + self.jacobian + self.mixing
    }

    /// Everything except the observation and factor densities.
    pub fn states_and_priors(&self) -> f64 {
        self.states + self.prior + self.jacobian
    }

    fn check(&self) -> Result<()> {
        for (label, v) in [
            ("observation", self.observation),
            ("factor", self.factor),
            ("states", self.states),
            ("prior", self.prior),
            ("jacobian", self.jacobian),
            ("mixing", self.mixing),
        ] {
            if !v.is_finite() {
                return Err(Error::Evaluation { block: label.to_string() });
            }
        }
        Ok(())
    }
}

/// Partial derivatives of the log-joint, laid out like `(ThetaReal, LatentStates)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub theta: ThetaReal,
    pub h_eps: Vec<f64>,
    pub h_f: Vec<f64>,
    pub f: Option<Vec<f64>>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.theta.to_flat().iter().all(|v| v.is_finite())
            && self.h_eps.iter().all(|v| v.is_finite())
            && self.h_f.iter().all(|v| v.is_finite())
            && self.f.as_ref().is_none_or(|f| f.iter().all(|v| v.is_finite()))
    }
}

/// Natural-scale quantities shared by every evaluation.
struct Prepared {
    beta: Vec<f64>,
    tau_e: Vec<f64>,
    phi_e: Vec<f64>,
    tau_f: Vec<f64>,
    phi_f: Vec<f64>,
    v_e: Vec<f64>,
    v_f: Vec<f64>,
}

impl Prepared {
    fn new(spec: &ModelSpec, theta: &ThetaReal) -> Self {
        Self {
            beta: theta.beta_dense(spec),
            tau_e: theta.tau_eps(),
            phi_e: theta.phi_eps(),
            tau_f: theta.tau_f(),
            phi_f: theta.phi_f(),
            v_e: theta.vstar_eps.iter().map(|v| v.exp()).collect(),
            v_f: theta.vstar_f.iter().map(|v| v.exp()).collect(),
        }
    }
}

fn check_inputs(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<()> {
    theta.check_shape(spec)?;
    x.check_shape(spec)?;
    if y.s != spec.s || y.t != spec.t {
        return Err(Error::input(format!(
            "panel is {} x {}, model expects {} x {}",
            y.t, y.s, spec.t, spec.s
        )));
    }
    Ok(())
}

/// AR(1) log-density of one path with unit innovations and a stationary start.
fn ar1_log_density(h: &[f64], phi: f64) -> f64 {
    let one_m = 1.0 - phi * phi;
    let mut lp = -0.5 * LN_2PI + 0.5 * one_m.ln() - 0.5 * one_m * h[0] * h[0];
    for t in 1..h.len() {
        let e = h[t] - phi * h[t - 1];
        lp += -0.5 * LN_2PI - 0.5 * e * e;
    }
    lp
}

/// Adds `∂/∂h` of the AR(1) density to `g` and returns `∂/∂φ`.
fn ar1_grad(h: &[f64], phi: f64, g: &mut [f64]) -> f64 {
    let n = h.len();
    let mut dphi = phi * h[0] * h[0] - phi / (1.0 - phi * phi);
    g[0] -= (1.0 - phi * phi) * h[0];
    for t in 1..n {
        let e = h[t] - phi * h[t - 1];
        dphi += e * h[t - 1];
        g[t] -= e;
        g[t - 1] += phi * e;
    }
    dphi
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ig_log_pdf(w: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * w.ln() - rate / w
}

/// Sum of the prior and Jacobian terms.
fn prior_and_jacobian(spec: &ModelSpec, theta: &ThetaReal, p: &Prepared) -> (f64, f64) {
    let pr = &spec.priors;
    let mut prior = 0.0;
    let mut jac = 0.0;
    let ln_b = ln_beta_fn(pr.a0, pr.b0);
    let half_cauchy = |tau: f64| (2.0 / std::f64::consts::PI).ln() - (tau * tau).ln_1p();
    let persistence = |phi: f64| {
        (pr.a0 - 1.0) * ((1.0 + phi) / 2.0).ln() + (pr.b0 - 1.0) * ((1.0 - phi) / 2.0).ln()
            - ln_b
            - std::f64::consts::LN_2
    };
    for s in 0..spec.s {
        let k = theta.kappa_eps[s];
        prior += -0.5 * (LN_2PI + pr.kappa_var.ln()) - k * k / (2.0 * pr.kappa_var);
        prior += half_cauchy(p.tau_e[s]) + persistence(p.phi_e[s]);
        jac += -softplus(-theta.alpha_eps[s]);
        jac += -softplus(-theta.psi_eps[s]) - softplus(theta.psi_eps[s]);
    }
    for k in 0..spec.k {
        prior += half_cauchy(p.tau_f[k]) + persistence(p.phi_f[k]);
        jac += -softplus(-theta.alpha_f[k]);
        jac += -softplus(-theta.psi_f[k]) - softplus(theta.psi_f[k]);
    }
    for k in 0..spec.k {
        for s in k..spec.s {
            let b = p.beta[s * spec.k + k];
            prior += -0.5 * (LN_2PI + pr.beta_var.ln()) - b * b / (2.0 * pr.beta_var);
        }
        jac += theta.beta_free[spec.beta_index(k, k).unwrap()];
    }
    if spec.is_student_t() {
        let gamma_lp = |v: f64| (pr.a_v - 1.0) * v.ln() - v / pr.b_v - ln_gamma(pr.a_v) - pr.a_v * pr.b_v.ln();
        for (&v, &vs) in p.v_e.iter().chain(&p.v_f).zip(theta.vstar_eps.iter().chain(&theta.vstar_f)) {
            prior += gamma_lp(v);
            jac += vs;
        }
    }
    (prior, jac)
}

/// Residuals `y_t − β f_t`, series-major.
fn residuals(spec: &ModelSpec, beta: &[f64], x: &LatentStates, y: &ReturnsPanel, s: usize, out: &mut [f64]) {
    let (t_n, k_n) = (spec.t, spec.k);
    for t in 0..t_n {
        let mut r = y.get(t, s);
        for k in 0..k_n.min(s + 1) {
            r -= beta[s * k_n + k] * x.f[k * t_n + t];
        }
        out[t] = r;
    }
}

struct SeriesOut {
    obs: f64,
    states: f64,
    mixing: f64,
    clamped: usize,
    g_kappa: f64,
    g_alpha: f64,
    g_psi: f64,
    g_vstar: f64,
    g_h: Vec<f64>,
    g_beta: Vec<f64>,
    /// `r / Ṽ` per t, used in the factor gradient.
    scaled_resid: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn series_pass(
    spec: &ModelSpec,
    theta: &ThetaReal,
    p: &Prepared,
    x: &LatentStates,
    y: &ReturnsPanel,
    s: usize,
    want_grad: bool,
) -> SeriesOut {
    let t_n = spec.t;
    let k_n = spec.k;
    let h = &x.h_eps[s * t_n..(s + 1) * t_n];
    let w = x.w_eps.as_ref().map(|w| &w[s * t_n..(s + 1) * t_n]);
    let (tau, kappa, phi) = (p.tau_e[s], theta.kappa_eps[s], p.phi_e[s]);
    let mut r = vec![0.0; t_n];
    residuals(spec, &p.beta, x, y, s, &mut r);
    let mut clamped = 0;
    let mut obs = 0.0;
    let mut g_h = vec![0.0; if want_grad { t_n } else { 0 }];
    let mut scaled = vec![0.0; if want_grad { t_n } else { 0 }];
    let (mut g_kappa, mut g_tau) = (0.0, 0.0);
    let mut mixing = 0.0;
    let mut g_v = 0.0;
    for t in 0..t_n {
        let a = clamp_arg(tau * h[t] + kappa, &mut clamped);
        let wt = w.map_or(1.0, |w| w[t]);
        let prec = (-a).exp() / wt;
        let q = r[t] * r[t] * prec;
        obs += -0.5 * (LN_2PI + a + wt.ln() + q);
        if want_grad {
            // ∂/∂a of the observation density.
            let da = 0.5 * (q - 1.0);
            g_h[t] = da * tau;
            g_tau += da * h[t];
            g_kappa += da;
            scaled[t] = r[t] * prec;
        }
        if let Some(w) = w {
            let v = p.v_e[s];
            mixing += ig_log_pdf(w[t], v / 2.0, v / 2.0);
            if want_grad {
                g_v += 0.5 * (v / 2.0).ln() + 0.5 - 0.5 * digamma(v / 2.0) - 0.5 * w[t].ln() - 0.5 / w[t];
            }
        }
    }
    let states = ar1_log_density(h, phi);
    let mut out = SeriesOut {
        obs,
        states,
        mixing,
        clamped,
        g_kappa: 0.0,
        g_alpha: 0.0,
        g_psi: 0.0,
        g_vstar: 0.0,
        g_h,
        g_beta: Vec::new(),
        scaled_resid: Vec::new(),
    };
    if !want_grad {
        return out;
    }
    let pr = &spec.priors;
    let dphi_states = ar1_grad(h, phi, &mut out.g_h);
    let sig = logistic(theta.alpha_eps[s]);
    out.g_alpha = g_tau * sig - 2.0 * tau / (1.0 + tau * tau) * sig + 1.0 - sig;
    out.g_kappa = g_kappa - kappa / pr.kappa_var;
    let dphi_prior = (pr.a0 - 1.0) / (1.0 + phi) - (pr.b0 - 1.0) / (1.0 - phi);
    out.g_psi = (dphi_states + dphi_prior) * phi * (1.0 - phi) + 1.0 - 2.0 * phi;
    if spec.is_student_t() {
        let v = p.v_e[s];
        out.g_vstar = v * (g_v + (pr.a_v - 1.0) / v - 1.0 / pr.b_v) + 1.0;
    }
    let nb = k_n.min(s + 1);
    out.g_beta = (0..nb)
        .map(|k| {
            let mut g = 0.0;
            for t in 0..t_n {
                g += scaled[t] * x.f[k * t_n + t];
            }
            g
        })
        .collect();
    out.scaled_resid = scaled;
    out
}

struct FactorOut {
    lp: f64,
    states: f64,
    mixing: f64,
    clamped: usize,
    g_alpha: f64,
    g_psi: f64,
    g_vstar: f64,
    g_h: Vec<f64>,
    /// `−f / D̃` per t.
    g_f_own: Vec<f64>,
}

fn factor_pass(spec: &ModelSpec, theta: &ThetaReal, p: &Prepared, x: &LatentStates, k: usize, want_grad: bool) -> FactorOut {
    let t_n = spec.t;
    let h = &x.h_f[k * t_n..(k + 1) * t_n];
    let f = &x.f[k * t_n..(k + 1) * t_n];
    let w = x.w_f.as_ref().map(|w| &w[k * t_n..(k + 1) * t_n]);
    let (tau, phi) = (p.tau_f[k], p.phi_f[k]);
    let mut clamped = 0;
    let mut lp = 0.0;
    let mut mixing = 0.0;
    let mut g_h = vec![0.0; if want_grad { t_n } else { 0 }];
    let mut g_f = vec![0.0; if want_grad { t_n } else { 0 }];
    let mut g_tau = 0.0;
    let mut g_v = 0.0;
    for t in 0..t_n {
        let a = clamp_arg(tau * h[t], &mut clamped);
        let wt = w.map_or(1.0, |w| w[t]);
        let prec = (-a).exp() / wt;
        let q = f[t] * f[t] * prec;
        lp += -0.5 * (LN_2PI + a + wt.ln() + q);
        if want_grad {
            let da = 0.5 * (q - 1.0);
            g_h[t] = da * tau;
            g_tau += da * h[t];
            g_f[t] = -f[t] * prec;
        }
        if let Some(w) = w {
            let v = p.v_f[k];
            mixing += ig_log_pdf(w[t], v / 2.0, v / 2.0);
            if want_grad {
                g_v += 0.5 * (v / 2.0).ln() + 0.5 - 0.5 * digamma(v / 2.0) - 0.5 * w[t].ln() - 0.5 / w[t];
            }
        }
    }
    let states = ar1_log_density(h, phi);
    let mut out = FactorOut {
        lp,
        states,
        mixing,
        clamped,
        g_alpha: 0.0,
        g_psi: 0.0,
        g_vstar: 0.0,
        g_h,
        g_f_own: g_f,
    };
    if !want_grad {
        return out;
    }
    let pr = &spec.priors;
    let dphi_states = ar1_grad(h, phi, &mut out.g_h);
    let sig = logistic(theta.alpha_f[k]);
    out.g_alpha = g_tau * sig - 2.0 * tau / (1.0 + tau * tau) * sig + 1.0 - sig;
    let dphi_prior = (pr.a0 - 1.0) / (1.0 + phi) - (pr.b0 - 1.0) / (1.0 - phi);
    out.g_psi = (dphi_states + dphi_prior) * phi * (1.0 - phi) + 1.0 - 2.0 * phi;
    if spec.is_student_t() {
        let v = p.v_f[k];
        out.g_vstar = v * (g_v + (pr.a_v - 1.0) / v - 1.0 / pr.b_v) + 1.0;
    }
    out
}

fn evaluate(
    theta: &ThetaReal,
    x: &LatentStates,
    y: &ReturnsPanel,
    spec: &ModelSpec,
    want_grad: bool,
    include_factors: bool,
    exec: Execution,
) -> Result<(JointTerms, Option<GradientBundle>)> {
    check_inputs(theta, x, y, spec)?;
    let p = Prepared::new(spec, theta);
    let series = map_indexed(exec, spec.s, |s| series_pass(spec, theta, &p, x, y, s, want_grad));
    let factors = map_indexed(exec, spec.k, |k| factor_pass(spec, theta, &p, x, k, want_grad));
    let (prior, jacobian) = prior_and_jacobian(spec, theta, &p);
    let mut terms = JointTerms {
        prior,
        jacobian,
        ..Default::default()
    };
    for o in &series {
        terms.observation += o.obs;
        terms.states += o.states;
        terms.mixing += o.mixing;
        terms.clamped += o.clamped;
    }
    for o in &factors {
        terms.factor += o.lp;
        terms.states += o.states;
        terms.mixing += o.mixing;
        terms.clamped += o.clamped;
    }
    terms.check()?;
    if !want_grad {
        return Ok((terms, None));
    }
    let (s_n, k_n, t_n) = (spec.s, spec.k, spec.t);
    let mut g = ThetaReal::zeros(spec);
    let mut h_eps = Vec::with_capacity(s_n * t_n);
    for (s, o) in series.iter().enumerate() {
        g.kappa_eps[s] = o.g_kappa;
        g.alpha_eps[s] = o.g_alpha;
        g.psi_eps[s] = o.g_psi;
        if spec.is_student_t() {
            g.vstar_eps[s] = o.g_vstar;
        }
        h_eps.extend_from_slice(&o.g_h);
        for (k, &gb) in o.g_beta.iter().enumerate() {
            let idx = spec.beta_index(s, k).unwrap();
            let b = p.beta[s * k_n + k];
            g.beta_free[idx] = if s == k {
                b * (gb - b / spec.priors.beta_var) + 1.0
            } else {
                gb - b / spec.priors.beta_var
            };
        }
    }
    let mut h_f = Vec::with_capacity(k_n * t_n);
    for (k, o) in factors.iter().enumerate() {
        g.alpha_f[k] = o.g_alpha;
        g.psi_f[k] = o.g_psi;
        if spec.is_student_t() {
            g.vstar_f[k] = o.g_vstar;
        }
        h_f.extend_from_slice(&o.g_h);
    }
    let f = include_factors.then(|| {
        let mut gf = Vec::with_capacity(k_n * t_n);
        for (k, fo) in factors.iter().enumerate() {
            for t in 0..t_n {
                let mut acc = fo.g_f_own[t];
                for (s, so) in series.iter().enumerate().skip(k) {
                    acc += p.beta[s * k_n + k] * so.scaled_resid[t];
                }
                gf.push(acc);
            }
        }
        gf
    });
    let bundle = GradientBundle { theta: g, h_eps, h_f, f };
    if !bundle.is_finite() {
        return Err(Error::Evaluation {
            block: "gradient".to_string(),
        });
    }
    Ok((terms, Some(bundle)))
}

pub fn log_joint(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<f64> {
    Ok(log_joint_terms(theta, x, y, spec)?.total())
}

pub fn log_joint_terms(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<JointTerms> {
    Ok(evaluate(theta, x, y, spec, false, false, Execution::Sequential)?.0)
}

pub fn grad_log_joint(
    theta: &ThetaReal,
    x: &LatentStates,
    y: &ReturnsPanel,
    spec: &ModelSpec,
    include_factors: bool,
) -> Result<GradientBundle> {
    Ok(value_and_grad(theta, x, y, spec, include_factors, Execution::Sequential)?.1)
}

/// Log-joint terms and gradient from a single pass, parallel over series.
pub fn value_and_grad(
    theta: &ThetaReal,
    x: &LatentStates,
    y: &ReturnsPanel,
    spec: &ModelSpec,
    include_factors: bool,
    exec: Execution,
) -> Result<(JointTerms, GradientBundle)> {
    let (terms, g) = evaluate(theta, x, y, spec, true, include_factors, exec)?;
    Ok((terms, g.expect("gradient requested")))
}

/// Gaussian conditional of `f_t` given `y_t`, stored through the Cholesky
/// factor of its `K × K` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorConditional {
    pub k: usize,
    pub mean: Vec<f64>,
    /// Lower Cholesky factor of the precision `βᵀṼ⁻¹β + D̃⁻¹`.
    pub prec_chol: Vec<f64>,
}

impl FactorConditional {
    /// `mean + L⁻ᵀ z`.
    pub fn sample(&self, z: &[f64]) -> Vec<f64> {
        let mut v = z.to_vec();
        solve_lower_transpose(&self.prec_chol, self.k, &mut v);
        v.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }

    pub fn covariance(&self) -> Vec<f64> {
        let k = self.k;
        let mut cov = vec![0.0; k * k];
        for j in 0..k {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            solve_lower(&self.prec_chol, k, &mut e);
            solve_lower_transpose(&self.prec_chol, k, &mut e);
            for i in 0..k {
                cov[i * k + j] = e[i];
            }
        }
        for i in 0..k {
            for j in 0..i {
                let m = 0.5 * (cov[i * k + j] + cov[j * k + i]);
                cov[i * k + j] = m;
                cov[j * k + i] = m;
            }
        }
        cov
    }

    pub fn log_density(&self, f: &[f64]) -> f64 {
        let k = self.k;
        let mut u = vec![0.0; k];
        for i in 0..k {
            for j in i..k {
                u[i] += self.prec_chol[j * k + i] * (f[j] - self.mean[j]);
            }
        }
        let log_det: f64 = (0..k).map(|i| self.prec_chol[i * k + i].ln()).sum();
        -0.5 * k as f64 * LN_2PI + log_det - 0.5 * u.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Conditional of `f_t` together with `log N_S(y_t; 0, β D̃ βᵀ + Ṽ)`.
///
/// `beta` is `S × K` row-major, `v_diag` and `d_diag` are the observation
/// and factor variances at `t`.
pub fn factor_conditional(
    beta: &[f64],
    k_n: usize,
    v_diag: &[f64],
    d_diag: &[f64],
    y_t: &[f64],
) -> Result<(FactorConditional, f64)> {
    let s_n = v_diag.len();
    if v_diag.iter().chain(d_diag).any(|v| !(v > &0.0) || !v.is_finite()) {
        return Err(Error::Evaluation {
            block: "factor_conditional variances".to_string(),
        });
    }
    let mut prec = vec![0.0; k_n * k_n];
    let mut b = vec![0.0; k_n];
    let mut log_det_v = 0.0;
    for s in 0..s_n {
        let iv = 1.0 / v_diag[s];
        let row = &beta[s * k_n..(s + 1) * k_n];
        log_det_v += v_diag[s].ln();
        for i in 0..k_n {
            let bi = row[i] * iv;
            if bi == 0.0 {
                continue;
            }
            b[i] += bi * y_t[s];
            for j in 0..=i {
                prec[i * k_n + j] += bi * row[j];
            }
        }
    }
    let mut log_det_d = 0.0;
    for k in 0..k_n {
        prec[k * k_n + k] += 1.0 / d_diag[k];
        log_det_d += d_diag[k].ln();
        for j in 0..k {
            prec[j * k_n + k] = prec[k * k_n + j];
        }
    }
    cholesky_in_place(&mut prec, k_n)?;
    let mut mean = b;
    solve_lower(&prec, k_n, &mut mean);
    solve_lower_transpose(&prec, k_n, &mut mean);
    // yᵀΣ⁻¹y = rᵀṼ⁻¹r + mᵀD̃⁻¹m with r = y − βm; both terms are
    // non-negative, unlike the Woodbury difference yᵀṼ⁻¹y − bᵀP⁻¹b which
    // cancels catastrophically when one Ṽ entry is tiny.
    let mut quad = 0.0;
    for s in 0..s_n {
        let row = &beta[s * k_n..(s + 1) * k_n];
        let r = y_t[s] - row.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        quad += r * r / v_diag[s];
    }
    for k in 0..k_n {
        quad += mean[k] * mean[k] / d_diag[k];
    }
    let log_det_p: f64 = 2.0 * (0..k_n).map(|i| prec[i * k_n + i].ln()).sum::<f64>();
    let ll = -0.5 * (s_n as f64 * LN_2PI + log_det_p + log_det_v + log_det_d + quad);
    Ok((
        FactorConditional {
            k: k_n,
            mean,
            prec_chol: prec,
        },
        ll,
    ))
}

/// Observation and factor variances `(Ṽ_t, D̃_t)` at time `t`.
pub fn variances_at(
    spec: &ModelSpec,
    theta: &ThetaReal,
    h_eps: &[f64],
    h_f: &[f64],
    w_eps: Option<&[f64]>,
    w_f: Option<&[f64]>,
    t: usize,
) -> (Vec<f64>, Vec<f64>) {
    let t_n = spec.t;
    let mut clamped = 0;
    let v = (0..spec.s)
        .map(|s| {
            let a = softplus(theta.alpha_eps[s]) * h_eps[s * t_n + t] + theta.kappa_eps[s];
            w_eps.map_or(1.0, |w| w[s * t_n + t]) * clamp_arg(a, &mut clamped).exp()
        })
        .collect();
    let d = (0..spec.k)
        .map(|k| {
            let a = softplus(theta.alpha_f[k]) * h_f[k * t_n + t];
            w_f.map_or(1.0, |w| w[k * t_n + t]) * clamp_arg(a, &mut clamped).exp()
        })
        .collect();
    (v, d)
}

/// Per-t factor conditionals and marginal log-likelihood contributions.
pub fn conditionals(
    theta: &ThetaReal,
    x: &LatentStates,
    y: &ReturnsPanel,
    spec: &ModelSpec,
    exec: Execution,
) -> Result<Vec<(FactorConditional, f64)>> {
    let beta = theta.beta_dense(spec);
    let out = map_indexed(exec, spec.t, |t| {
        let (v, d) = variances_at(spec, theta, &x.h_eps, &x.h_f, x.w_eps.as_deref(), x.w_f.as_deref(), t);
        factor_conditional(&beta, spec.k, &v, &d, y.row(t))
    });
    out.into_iter().collect()
}

/// `Σ_t log N_S(y_t; 0, β D̃_t βᵀ + Ṽ_t)`, `O(SK² + K³)` per t. Factors in
/// `x` are ignored; mixing weights are used when present.
pub fn log_lik_marginal_f(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<f64> {
    check_inputs(theta, x, y, spec)?;
    let parts = conditionals(theta, x, y, spec, Execution::Sequential)?;
    let total: f64 = parts.iter().map(|(_, l)| l).sum();
    if !total.is_finite() {
        return Err(Error::Evaluation {
            block: "marginal likelihood".to_string(),
        });
    }
    Ok(total)
}

/// Draws `W_ε` and `W_f` from their inverse-gamma full conditionals.
pub fn sample_mixing_weights<R: Rng + ?Sized>(
    theta: &ThetaReal,
    x: &LatentStates,
    y: &ReturnsPanel,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (shape_e, rate_e, shape_f, rate_f) = mixing_conditional_params(theta, x, y, spec)?;
    let draw = |shape: &[f64], rate: &[f64], rng: &mut R| -> Result<Vec<f64>> {
        shape
            .iter()
            .zip(rate)
            .map(|(&a, &b)| {
                let g = Gamma::new(a, 1.0).map_err(|e| Error::numerical(e.to_string()))?;
                Ok(b / g.sample(rng))
            })
            .collect()
    };
    let we = draw(&shape_e, &rate_e, rng)?;
    let wf = draw(&shape_f, &rate_f, rng)?;
    Ok((we, wf))
}

/// `Σ log IG(W; shape, rate)` under the full conditionals, at the weights in `x`.
pub fn log_mixing_conditional(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<f64> {
    let (shape_e, rate_e, shape_f, rate_f) = mixing_conditional_params(theta, x, y, spec)?;
    let we = x.w_eps.as_ref().ok_or_else(|| Error::input("mixing weights missing"))?;
    let wf = x.w_f.as_ref().ok_or_else(|| Error::input("mixing weights missing"))?;
    let mut lp = 0.0;
    for i in 0..we.len() {
        lp += ig_log_pdf(we[i], shape_e[i], rate_e[i]);
    }
    for i in 0..wf.len() {
        lp += ig_log_pdf(wf[i], shape_f[i], rate_f[i]);
    }
    Ok(lp)
}

type IgParams = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn mixing_conditional_params(theta: &ThetaReal, x: &LatentStates, y: &ReturnsPanel, spec: &ModelSpec) -> Result<IgParams> {
    if !spec.is_student_t() {
        return Err(Error::input("mixing weights exist only for the t family"));
    }
    theta.check_shape(spec)?;
    let p = Prepared::new(spec, theta);
    let t_n = spec.t;
    let mut clamped = 0;
    let mut r = vec![0.0; t_n];
    let (mut sh_e, mut rt_e) = (Vec::with_capacity(spec.s * t_n), Vec::with_capacity(spec.s * t_n));
    for s in 0..spec.s {
        residuals(spec, &p.beta, x, y, s, &mut r);
        let v = p.v_e[s];
        for t in 0..t_n {
            let a = clamp_arg(p.tau_e[s] * x.h_eps[s * t_n + t] + theta.kappa_eps[s], &mut clamped);
            sh_e.push((v + 1.0) / 2.0);
            rt_e.push(v / 2.0 + 0.5 * r[t] * r[t] * (-a).exp());
        }
    }
    let (mut sh_f, mut rt_f) = (Vec::with_capacity(spec.k * t_n), Vec::with_capacity(spec.k * t_n));
    for k in 0..spec.k {
        let v = p.v_f[k];
        for t in 0..t_n {
            let i = k * t_n + t;
            let a = clamp_arg(p.tau_f[k] * x.h_f[i], &mut clamped);
            sh_f.push((v + 1.0) / 2.0);
            rt_f.push(v / 2.0 + 0.5 * x.f[i] * x.f[i] * (-a).exp());
        }
    }
    Ok((sh_e, rt_e, sh_f, rt_f))
}
