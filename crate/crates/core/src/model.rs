//! Factor stochastic volatility model: dimensions, priors, parameter
//! transforms and the containers for parameters, latent states and data.
//!
//! The loading matrix `β` is `S × K` lower triangular with a positive
//! leading diagonal. Its free entries are stored column by column
//! (`β_{k..S, k}` for each `k`), with each diagonal entry replaced by
//! `δ_k = log β_{k,k}`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    #[default]
    Normal,
    StudentT,
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// `(φ + 1) / 2 ~ Beta(a0, b0)`.
    pub a0: f64,
    pub b0: f64,
    /// Variance of the Gaussian prior on `κ`.
    pub kappa_var: f64,
    /// Variance of the Gaussian prior on each free loading.
    pub beta_var: f64,
    /// Degrees-of-freedom prior `Gamma(shape = a_v, scale = b_v)`.
    pub a_v: f64,
    pub b_v: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            a0: 20.0,
            b0: 1.5,
            kappa_var: 10.0,
            beta_var: 1.0,
            a_v: 20.0,
            b_v: 1.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub s: usize,
    pub k: usize,
    pub t: usize,
    pub error_family: ErrorFamily,
    pub priors: Priors,
}

impl ModelSpec {
    pub fn new(s: usize, k: usize, t: usize, error_family: ErrorFamily) -> Result<Self> {
        let spec = Self {
            s,
            k,
            t,
            error_family,
            priors: Priors::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 {
            return Err(Error::input("S must be at least 1"));
        }
        if self.k < 1 || self.k > self.s {
            return Err(Error::input(format!("K = {} must satisfy 1 <= K <= S = {}", self.k, self.s)));
        }
        if self.t < 2 {
            return Err(Error::input("T must be at least 2"));
        }
        let p = &self.priors;
        for (name, v) in [
            ("a0", p.a0),
            ("b0", p.b0),
            ("kappa_var", p.kappa_var),
            ("beta_var", p.beta_var),
            ("a_v", p.a_v),
            ("b_v", p.b_v),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::input(format!("prior hyperparameter {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_t(&self, t: usize) -> Self {
        Self { t, ..*self }
    }

    pub fn is_student_t(&self) -> bool {
        self.error_family == ErrorFamily::StudentT
    }

    /// Number of free loading entries, `SK − K(K−1)/2`.
    pub fn n_beta(&self) -> usize {
        self.s * self.k - self.k * (self.k - 1) / 2
    }

    /// Index of `β_{s,k}` in the free vector, `None` above the diagonal.
    pub fn beta_index(&self, s: usize, k: usize) -> Option<usize> {
        if s < k {
            None
        } else {
            Some(beta_offset(self.s, k) + (s - k))
        }
    }

    /// Number of global parameters `θ`.
    pub fn n_theta(&self) -> usize {
        let dof = if self.is_student_t() { self.s + self.k } else { 0 };
        3 * self.s + 2 * self.k + self.n_beta() + dof
    }

    /// Number of latent states (`h_ε`, `h_f`, `f`); mixing weights are
    /// excluded because they are always drawn from their conditional.
    pub fn n_states(&self) -> usize {
        (self.s + 2 * self.k) * self.t
    }
}

/// Offset of loading column `k` for `S` series.
pub fn beta_offset(s: usize, k: usize) -> usize {
    // Σ_{j<k} (S − j)
    k * s - k * k.saturating_sub(1) / 2
}

/// Overflow-safe `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: `log(exp(y) − 1)` for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Natural-scale parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub kappa_eps: Vec<f64>,
    pub tau_eps: Vec<f64>,
    pub phi_eps: Vec<f64>,
    pub tau_f: Vec<f64>,
    pub phi_f: Vec<f64>,
    /// Dense `S × K` row-major loadings; entries above the diagonal are zero.
    pub beta: Vec<f64>,
    pub v_eps: Vec<f64>,
    pub v_f: Vec<f64>,
}

/// Unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ThetaReal {
    pub kappa_eps: Vec<f64>,
    pub alpha_eps: Vec<f64>,
    pub psi_eps: Vec<f64>,
    pub alpha_f: Vec<f64>,
    pub psi_f: Vec<f64>,
    pub beta_free: Vec<f64>,
    pub vstar_eps: Vec<f64>,
    pub vstar_f: Vec<f64>,
}

impl ThetaReal {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let (s, k) = (spec.s, spec.k);
        let dof = spec.is_student_t();
        Self {
            kappa_eps: vec![0.0; s],
            alpha_eps: vec![0.0; s],
            psi_eps: vec![0.0; s],
            alpha_f: vec![0.0; k],
            psi_f: vec![0.0; k],
            beta_free: vec![0.0; spec.n_beta()],
            vstar_eps: if dof { vec![0.0; s] } else { Vec::new() },
            vstar_f: if dof { vec![0.0; k] } else { Vec::new() },
        }
    }

    /// Dense `S × K` loading matrix with diagonal `exp(δ_k)`.
    pub fn beta_dense(&self, spec: &ModelSpec) -> Vec<f64> {
        let (s_n, k_n) = (spec.s, spec.k);
        let mut out = vec![0.0; s_n * k_n];
        for k in 0..k_n {
            let off = beta_offset(s_n, k);
            for s in k..s_n {
                let v = self.beta_free[off + s - k];
                out[s * k_n + k] = if s == k { v.exp() } else { v };
            }
        }
        out
    }

    pub fn tau_eps(&self) -> Vec<f64> {
        self.alpha_eps.iter().map(|&a| softplus(a)).collect()
    }

    pub fn phi_eps(&self) -> Vec<f64> {
        self.psi_eps.iter().map(|&p| logistic(p)).collect()
    }

    pub fn tau_f(&self) -> Vec<f64> {
        self.alpha_f.iter().map(|&a| softplus(a)).collect()
    }

    pub fn phi_f(&self) -> Vec<f64> {
        self.psi_f.iter().map(|&p| logistic(p)).collect()
    }

    /// Flat `[κ, α_ε, ψ_ε, α_f, ψ_f, β_free, v*_ε, v*_f]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in [
            &self.kappa_eps,
            &self.alpha_eps,
            &self.psi_eps,
            &self.alpha_f,
            &self.psi_f,
            &self.beta_free,
            &self.vstar_eps,
            &self.vstar_f,
        ] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Self {
        let mut out = Self::zeros(spec);
        let mut pos = 0;
        for part in [
            &mut out.kappa_eps,
            &mut out.alpha_eps,
            &mut out.psi_eps,
            &mut out.alpha_f,
            &mut out.psi_f,
            &mut out.beta_free,
            &mut out.vstar_eps,
            &mut out.vstar_f,
        ] {
            let n = part.len();
            part.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        out
    }

    pub fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        let dof = if spec.is_student_t() { (spec.s, spec.k) } else { (0, 0) };
        let ok = self.kappa_eps.len() == spec.s
            && self.alpha_eps.len() == spec.s
            && self.psi_eps.len() == spec.s
            && self.alpha_f.len() == spec.k
            && self.psi_f.len() == spec.k
            && self.beta_free.len() == spec.n_beta()
            && self.vstar_eps.len() == dof.0
            && self.vstar_f.len() == dof.1;
        if ok {
            Ok(())
        } else {
            Err(Error::input("parameter vector does not match model dimensions"))
        }
    }
}

fn check_domain(block: &'static str, values: &[f64], ok: impl Fn(f64) -> bool, what: &str) -> Result<()> {
    for (index, &v) in values.iter().enumerate() {
        if !ok(v) {
            return Err(Error::Domain {
                block,
                index,
                message: format!("{v} is not {what}"),
            });
        }
    }
    Ok(())
}

/// Map natural-scale parameters to the unconstrained real space.
pub fn map_to_real(spec: &ModelSpec, nat: &NaturalParams) -> Result<ThetaReal> {
    let pos = |v: f64| v > 0.0 && v.is_finite();
    let unit = |v: f64| v > 0.0 && v < 1.0;
    check_domain("tau_eps", &nat.tau_eps, pos, "positive")?;
    check_domain("tau_f", &nat.tau_f, pos, "positive")?;
    check_domain("phi_eps", &nat.phi_eps, unit, "in (0, 1)")?;
    check_domain("phi_f", &nat.phi_f, unit, "in (0, 1)")?;
    check_domain("kappa_eps", &nat.kappa_eps, f64::is_finite, "finite")?;
    if spec.is_student_t() {
        check_domain("v_eps", &nat.v_eps, pos, "positive")?;
        check_domain("v_f", &nat.v_f, pos, "positive")?;
    }
    if nat.beta.len() != spec.s * spec.k {
        return Err(Error::input("beta must be S x K"));
    }
    let mut beta_free = vec![0.0; spec.n_beta()];
    for k in 0..spec.k {
        for s in k..spec.s {
            let v = nat.beta[s * spec.k + k];
            let idx = spec.beta_index(s, k).expect("lower triangle");
            beta_free[idx] = if s == k {
                if !(v > 0.0) {
                    return Err(Error::Domain {
                        block: "beta_diag",
                        index: k,
                        message: format!("{v} is not positive"),
                    });
                }
                v.ln()
            } else {
                v
            };
        }
    }
    let theta = ThetaReal {
        kappa_eps: nat.kappa_eps.clone(),
        alpha_eps: nat.tau_eps.iter().map(|&t| softplus_inverse(t)).collect(),
        psi_eps: nat.phi_eps.iter().map(|&p| logit(p)).collect(),
        alpha_f: nat.tau_f.iter().map(|&t| softplus_inverse(t)).collect(),
        psi_f: nat.phi_f.iter().map(|&p| logit(p)).collect(),
        beta_free,
        vstar_eps: if spec.is_student_t() { nat.v_eps.iter().map(|v| v.ln()).collect() } else { Vec::new() },
        vstar_f: if spec.is_student_t() { nat.v_f.iter().map(|v| v.ln()).collect() } else { Vec::new() },
    };
    theta.check_shape(spec)?;
    Ok(theta)
}

/// Map unconstrained parameters back to the natural scale.
pub fn map_to_natural(spec: &ModelSpec, theta: &ThetaReal) -> NaturalParams {
    NaturalParams {
        kappa_eps: theta.kappa_eps.clone(),
        tau_eps: theta.tau_eps(),
        phi_eps: theta.phi_eps(),
        tau_f: theta.tau_f(),
        phi_f: theta.phi_f(),
        beta: theta.beta_dense(spec),
        v_eps: theta.vstar_eps.iter().map(|v| v.exp()).collect(),
        v_f: theta.vstar_f.iter().map(|v| v.exp()).collect(),
    }
}

/// Latent log-volatilities, factors and (t-family) mixing weights.
/// All paths are stored series-major: entry `(i, t)` lives at `i * T + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStates {
    pub t: usize,
    pub h_eps: Vec<f64>,
    pub h_f: Vec<f64>,
    pub f: Vec<f64>,
    pub w_eps: Option<Vec<f64>>,
    pub w_f: Option<Vec<f64>>,
}

impl LatentStates {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let t = spec.t;
        let w = spec.is_student_t();
        Self {
            t,
            h_eps: vec![0.0; spec.s * t],
            h_f: vec![0.0; spec.k * t],
            f: vec![0.0; spec.k * t],
            w_eps: w.then(|| vec![1.0; spec.s * t]),
            w_f: w.then(|| vec![1.0; spec.k * t]),
        }
    }

    pub fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        let t = spec.t;
        if self.t != t || self.h_eps.len() != spec.s * t || self.h_f.len() != spec.k * t || self.f.len() != spec.k * t {
            return Err(Error::input("latent states do not match model dimensions"));
        }
        if spec.is_student_t() {
            match (&self.w_eps, &self.w_f) {
                (Some(we), Some(wf)) if we.len() == spec.s * t && wf.len() == spec.k * t => {
                    if we.iter().chain(wf.iter()).any(|&w| !(w > 0.0)) {
                        return Err(Error::input("mixing weights must be positive"));
                    }
                }
                _ => return Err(Error::input("t-family requires mixing weights")),
            }
        }
        Ok(())
    }

    /// Factor vector `f_t`.
    pub fn f_at(&self, k_n: usize, t: usize) -> Vec<f64> {
        (0..k_n).map(|k| self.f[k * self.t + t]).collect()
    }
}

/// Demeaned returns, `T × S` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsPanel {
    pub names: Vec<String>,
    pub t: usize,
    pub s: usize,
    pub data: Vec<f64>,
}

impl ReturnsPanel {
    pub fn new(names: Vec<String>, t: usize, data: Vec<f64>) -> Result<Self> {
        let s = names.len();
        if data.len() != t * s {
            return Err(Error::input("panel data length does not equal T x S"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite return at row {}, column {}", i / s.max(1), i % s.max(1))));
        }
        Ok(Self { names, t, s, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let s = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != s) {
            return Err(Error::input("ragged rows"));
        }
        let names = (0..s).map(|i| format!("y{}", i + 1)).collect();
        Self::new(names, rows.len(), rows.concat())
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.s..(t + 1) * self.s]
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.data[t * self.s + s]
    }

    /// Rows `start..end` as a new panel.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            names: self.names.clone(),
            t: end - start,
            s: self.s,
            data: self.data[start * self.s..end * self.s].to_vec(),
        }
    }

    /// `self` followed by the rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.s != self.s {
            return Err(Error::input(format!("column count {} does not match S = {}", other.s, self.s)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            names: self.names.clone(),
            t: self.t + other.t,
            s: self.s,
            data,
        })
    }

    /// SHA-256 over the dimensions and the little-endian bytes of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.t as u64).to_le_bytes());
        h.update((self.s as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
