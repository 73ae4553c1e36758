//! Simulation of FSV panels with known ground truth.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentStates, ModelSpec, NaturalParams, ReturnsPanel};
use crate::rng::{normals, stream, stream_id, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub theta: NaturalParams,
    pub states: LatentStates,
    pub seed: u64,
}

/// Default simulation parameters: `φ ~ U(0.9, 0.98)`, `τ ~ U(0.1, 0.4)`,
/// `κ ~ U(−1, 0)`, lower-triangular `N(0, 1)` loadings with a positive
/// diagonal and, for the t family, `v ~ U(5, 15)`.
pub fn default_params(model: &ModelSpec, seed: u64) -> NaturalParams {
    let mut r = stream(seed, stream_id(Domain::Simulation, 1), 0);
    let (s_n, k_n) = (model.s, model.k);
    let mut unif = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(lo..hi)).collect() };
    let kappa_eps = unif(-1.0, 0.0, s_n);
    let tau_eps = unif(0.1, 0.4, s_n);
    let phi_eps = unif(0.9, 0.98, s_n);
    let tau_f = unif(0.1, 0.4, k_n);
    let phi_f = unif(0.9, 0.98, k_n);
    let (v_eps, v_f) = if model.is_student_t() {
        (unif(5.0, 15.0, s_n), unif(5.0, 15.0, k_n))
    } else {
        (Vec::new(), Vec::new())
    };
    let z = normals(&mut r, s_n * k_n);
    let mut beta = vec![0.0; s_n * k_n];
    for s in 0..s_n {
        for k in 0..k_n.min(s + 1) {
            let v = z[s * k_n + k];
            beta[s * k_n + k] = if s == k { v.abs().max(1e-3) } else { v };
        }
    }
    NaturalParams {
        kappa_eps,
        tau_eps,
        phi_eps,
        tau_f,
        phi_f,
        beta,
        v_eps,
        v_f,
    }
}

fn check_sim_params(model: &ModelSpec, p: &NaturalParams) -> Result<()> {
    let checks: [(&'static str, &[f64], fn(f64) -> bool, &str); 5] = [
        ("phi_eps", &p.phi_eps, |v| v.abs() < 1.0, "inside (-1, 1)"),
        ("phi_f", &p.phi_f, |v| v.abs() < 1.0, "inside (-1, 1)"),
        ("tau_eps", &p.tau_eps, |v| v >= 0.0 && v.is_finite(), "non-negative"),
        ("tau_f", &p.tau_f, |v| v >= 0.0 && v.is_finite(), "non-negative"),
        ("kappa_eps", &p.kappa_eps, f64::is_finite, "finite"),
    ];
    for (block, vals, ok, what) in checks {
        if let Some(index) = vals.iter().position(|&v| !ok(v)) {
            return Err(Error::Domain {
                block,
                index,
                message: format!("{} is not {what}", vals[index]),
            });
        }
    }
    let lens_ok = p.phi_eps.len() == model.s
        && p.tau_eps.len() == model.s
        && p.kappa_eps.len() == model.s
        && p.phi_f.len() == model.k
        && p.tau_f.len() == model.k
        && p.beta.len() == model.s * model.k;
    if !lens_ok {
        return Err(Error::input("simulation parameters do not match model dimensions"));
    }
    if model.is_student_t() {
        if p.v_eps.len() != model.s || p.v_f.len() != model.k {
            return Err(Error::input("t family needs one dof per series and factor"));
        }
        if let Some(index) = p.v_eps.iter().chain(&p.v_f).position(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                block: "dof",
                index,
                message: "degrees of freedom must be positive".to_string(),
            });
        }
    }
    Ok(())
}

fn ar1_path(r: &mut impl Rng, phi: f64, t_n: usize) -> Vec<f64> {
    let z = normals(r, t_n);
    let mut h = Vec::with_capacity(t_n);
    h.push(z[0] / (1.0 - phi * phi).sqrt());
    for t in 1..t_n {
        h.push(phi * h[t - 1] + z[t]);
    }
    h
}

fn inverse_gamma_draws(r: &mut impl Rng, v: f64, n: usize) -> Result<Vec<f64>> {
    let g = Gamma::new(v / 2.0, 1.0).map_err(|e| Error::numerical(e.to_string()))?;
    Ok((0..n).map(|_| (v / 2.0) / g.sample(r)).collect())
}

/// Draws a panel of length `model.t` from the generative model.
pub fn simulate_fsv(model: &ModelSpec, params: &NaturalParams, seed: u64) -> Result<(ReturnsPanel, SimTruth)> {
    model.validate()?;
    check_sim_params(model, params)?;
    let (s_n, k_n, t_n) = (model.s, model.k, model.t);
    let mut r = stream(seed, stream_id(Domain::Simulation, 0), 0);
    let mut h_eps = Vec::with_capacity(s_n * t_n);
    for s in 0..s_n {
        h_eps.extend(ar1_path(&mut r, params.phi_eps[s], t_n));
    }
    let mut h_f = Vec::with_capacity(k_n * t_n);
    for k in 0..k_n {
        h_f.extend(ar1_path(&mut r, params.phi_f[k], t_n));
    }
    let (w_eps, w_f) = if model.is_student_t() {
        let mut we = Vec::with_capacity(s_n * t_n);
        for s in 0..s_n {
            we.extend(inverse_gamma_draws(&mut r, params.v_eps[s], t_n)?);
        }
        let mut wf = Vec::with_capacity(k_n * t_n);
        for k in 0..k_n {
            wf.extend(inverse_gamma_draws(&mut r, params.v_f[k], t_n)?);
        }
        (Some(we), Some(wf))
    } else {
        (None, None)
    };
    let zf = normals(&mut r, k_n * t_n);
    let f: Vec<f64> = (0..k_n * t_n)
        .map(|i| {
            let k = i / t_n;
            let w = w_f.as_ref().map_or(1.0, |w| w[i]);
            (w * (params.tau_f[k] * h_f[i]).exp()).sqrt() * zf[i]
        })
        .collect();
    let ze = normals(&mut r, t_n * s_n);
    let mut data = Vec::with_capacity(t_n * s_n);
    for t in 0..t_n {
        for s in 0..s_n {
            let i = s * t_n + t;
            let mut v = 0.0;
            for k in 0..k_n {
                v += params.beta[s * k_n + k] * f[k * t_n + t];
            }
            let w = w_eps.as_ref().map_or(1.0, |w| w[i]);
            v += (w * (params.tau_eps[s] * h_eps[i] + params.kappa_eps[s]).exp()).sqrt() * ze[t * s_n + s];
            data.push(v);
        }
    }
    let names = (0..s_n).map(|s| format!("y{}", s + 1)).collect();
    let panel = ReturnsPanel::new(names, t_n, data)?;
    let states = LatentStates {
        t: t_n,
        h_eps,
        h_f,
        f,
        w_eps,
        w_f,
    };
    Ok((
        panel,
        SimTruth {
            theta: params.clone(),
            states,
            seed,
        },
    ))
}
