//! Predictive draws, approximate predictive likelihoods and the portfolio
//! quantities derived from forecast covariances.

use rand_distr::{Distribution, Gamma};

use crate::engine::{posterior_draws, FittedModel};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::linalg::{cholesky_in_place, solve_lower, solve_lower_transpose, LowRankPlusDiag};
use crate::model::ReturnsPanel;
use crate::rng::{normals, stream, stream_id, subseed, Domain};
use crate::seq::{sequential_update, UpdateConfig};

/// `M` predictive draws over horizons `1..=H`. Per-draw arrays are indexed
/// `[m][h][·]`, flattened; `Σ_{T+h} = β D βᵀ + V` is kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDraws {
    pub horizon: usize,
    pub m: usize,
    pub s: usize,
    pub k: usize,
    /// Dense `S × K` loadings per draw.
    pub beta: Vec<f64>,
    pub h_eps: Vec<f64>,
    pub h_f: Vec<f64>,
    pub f: Vec<f64>,
    pub y: Vec<f64>,
    /// Factor variances `D_{T+h}` (diagonal).
    pub d: Vec<f64>,
    /// Idiosyncratic variances `V_{T+h}` (diagonal).
    pub v: Vec<f64>,
}

impl ForecastDraws {
    fn at<'a>(&self, a: &'a [f64], width: usize, m: usize, h: usize) -> &'a [f64] {
        let i = (m * self.horizon + h) * width;
        &a[i..i + width]
    }

    pub fn beta_at(&self, m: usize) -> &[f64] {
        &self.beta[m * self.s * self.k..(m + 1) * self.s * self.k]
    }

    /// `y_{T+h+1}` of draw `m` (`h` is zero-based).
    pub fn y_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.y, self.s, m, h)
    }

    pub fn f_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.f, self.k, m, h)
    }

    pub fn h_eps_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.h_eps, self.s, m, h)
    }

    pub fn h_f_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.h_f, self.k, m, h)
    }

    pub fn d_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.d, self.k, m, h)
    }

    pub fn v_at(&self, m: usize, h: usize) -> &[f64] {
        self.at(&self.v, self.s, m, h)
    }

    /// Dense row-major `Σ` of draw `m` at zero-based horizon `h`.
    pub fn sigma(&self, m: usize, h: usize) -> Vec<f64> {
        let (s_n, k_n) = (self.s, self.k);
        let b = self.beta_at(m);
        let d = self.d_at(m, h);
        let v = self.v_at(m, h);
        let mut out = vec![0.0; s_n * s_n];
        for i in 0..s_n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..k_n {
                    acc += b[i * k_n + k] * d[k] * b[j * k_n + k];
                }
                if i == j {
                    acc += v[i];
                }
                out[i * s_n + j] = acc;
                out[j * s_n + i] = acc;
            }
        }
        out
    }

    /// `Σ` as a low-rank-plus-diagonal operator (`β D^{1/2}`, `V`).
    pub fn sigma_lowrank(&self, m: usize, h: usize) -> Result<LowRankPlusDiag> {
        let k_n = self.k;
        let d = self.d_at(m, h);
        let b: Vec<f64> = self.beta_at(m).iter().enumerate().map(|(i, b)| b * d[i % k_n].sqrt()).collect();
        LowRankPlusDiag::new(&b, k_n, self.v_at(m, h))
    }

    /// `log (1/M) Σ_m N_S(y_obs; 0, Σ^{(m)}_{T+h})` at zero-based horizon `h`.
    pub fn log_predictive(&self, h: usize, y_obs: &[f64], exec: Execution) -> Result<f64> {
        if y_obs.len() != self.s {
            return Err(Error::input(format!("observation has {} values, expected {}", y_obs.len(), self.s)));
        }
        if h >= self.horizon {
            return Err(Error::input(format!("horizon {} beyond forecast length {}", h + 1, self.horizon)));
        }
        let lp = map_indexed(exec, self.m, |m| self.sigma_lowrank(m, h).map(|op| op.log_density(y_obs)));
        let lp = lp.into_iter().collect::<Result<Vec<f64>>>()?;
        log_mean_exp(&lp)
    }
}

/// `log((1/n) Σ exp(a_i))` without underflow.
pub fn log_mean_exp(a: &[f64]) -> Result<f64> {
    let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Evaluation {
            block: "predictive log-density".to_string(),
        });
    }
    let s: f64 = a.iter().map(|v| (v - mx).exp()).sum();
    Ok(mx + (s / a.len() as f64).ln())
}

fn ig_draw(r: &mut impl rand::Rng, v: f64) -> Result<f64> {
    let g = Gamma::new(v / 2.0, 1.0).map_err(|e| Error::numerical(e.to_string()))?;
    Ok((v / 2.0) / g.sample(r))
}

/// Seed of the forecast streams from an origin at time `t`.
fn origin_seed(seed: u64, t: usize) -> u64 {
    subseed(seed, Domain::Forecast, t as u64)
}

/// Draws `M` forecast paths over `H` steps past the end of `y`, each from
/// an independent posterior draw of the fitted family.
pub fn forecast_draws(fitted: &FittedModel, y: &ReturnsPanel, horizon: usize, m: usize, seed: u64, exec: Execution) -> Result<ForecastDraws> {
    if horizon == 0 || m == 0 {
        return Err(Error::input("forecast horizon and draw count must be at least 1"));
    }
    let model = &fitted.model;
    let (s_n, k_n, t_n) = (model.s, model.k, model.t);
    let base = origin_seed(seed, t_n);
    let post = posterior_draws(fitted, y, m, base, exec)?;
    let paths = map_indexed(exec, m, |i| -> Result<(Vec<f64>, [Vec<f64>; 6])> {
        let (theta, x) = &post[i];
        let beta = theta.beta_dense(model);
        let (tau_e, phi_e, tau_f, phi_f) = (theta.tau_eps(), theta.phi_eps(), theta.tau_f(), theta.phi_f());
        let v_e: Vec<f64> = theta.vstar_eps.iter().map(|v| v.exp()).collect();
        let v_f: Vec<f64> = theta.vstar_f.iter().map(|v| v.exp()).collect();
        let mut he: Vec<f64> = (0..s_n).map(|s| x.h_eps[s * t_n + t_n - 1]).collect();
        let mut hf: Vec<f64> = (0..k_n).map(|k| x.h_f[k * t_n + t_n - 1]).collect();
        let mut r = stream(base, stream_id(Domain::Forecast, i as u64), 1);
        let mut out: [Vec<f64>; 6] = Default::default();
        for _ in 0..horizon {
            let ze = normals(&mut r, s_n);
            let zf = normals(&mut r, k_n);
            for s in 0..s_n {
                he[s] = phi_e[s] * he[s] + ze[s];
            }
            for k in 0..k_n {
                hf[k] = phi_f[k] * hf[k] + zf[k];
            }
            let mut d = Vec::with_capacity(k_n);
            for k in 0..k_n {
                let w = if model.is_student_t() { ig_draw(&mut r, v_f[k])? } else { 1.0 };
                d.push(w * (tau_f[k] * hf[k]).exp());
            }
            let mut v = Vec::with_capacity(s_n);
            for s in 0..s_n {
                let w = if model.is_student_t() { ig_draw(&mut r, v_e[s])? } else { 1.0 };
                v.push(w * (tau_e[s] * he[s] + theta.kappa_eps[s]).exp());
            }
            let zk = normals(&mut r, k_n);
            let f: Vec<f64> = (0..k_n).map(|k| d[k].sqrt() * zk[k]).collect();
            let zs = normals(&mut r, s_n);
            let yv: Vec<f64> = (0..s_n)
                .map(|s| (0..k_n).map(|k| beta[s * k_n + k] * f[k]).sum::<f64>() + v[s].sqrt() * zs[s])
                .collect();
            if d.iter().chain(&v).chain(&yv).any(|a| !a.is_finite()) || d.iter().chain(&v).any(|a| *a <= 0.0) {
                return Err(Error::Evaluation {
                    block: format!("forecast draw {i}"),
                });
            }
            out[0].extend_from_slice(&he);
            out[1].extend_from_slice(&hf);
            out[2].extend(f);
            out[3].extend(yv);
            out[4].extend(d);
            out[5].extend(v);
        }
        Ok((beta, out))
    });
    let mut fd = ForecastDraws {
        horizon,
        m,
        s: s_n,
        k: k_n,
        beta: Vec::with_capacity(m * s_n * k_n),
        h_eps: Vec::new(),
        h_f: Vec::new(),
        f: Vec::new(),
        y: Vec::new(),
        d: Vec::new(),
        v: Vec::new(),
    };
    for p in paths {
        let (beta, [he, hf, f, yv, d, v]) = p?;
        fd.beta.extend(beta);
        fd.h_eps.extend(he);
        fd.h_f.extend(hf);
        fd.f.extend(f);
        fd.y.extend(yv);
        fd.d.extend(d);
        fd.v.extend(v);
    }
    Ok(fd)
}

/// One-step log approximate predictive likelihood of `y_obs`.
pub fn predictive_likelihood(fitted: &FittedModel, y: &ReturnsPanel, y_obs: &[f64], m: usize, seed: u64, exec: Execution) -> Result<f64> {
    forecast_draws(fitted, y, 1, m, seed, exec)?.log_predictive(0, y_obs, exec)
}

/// Cumulative log APL over `holdout`. The fit is advanced by
/// [`sequential_update`] after every `update_frequency` rows; rows between
/// updates are scored at the matching multi-step horizon.
pub fn clapl(
    fitted: &FittedModel,
    y: &ReturnsPanel,
    holdout: &ReturnsPanel,
    m: usize,
    update_frequency: usize,
    update: &UpdateConfig,
    seed: u64,
) -> Result<f64> {
    if holdout.t == 0 {
        return Err(Error::input("holdout has no rows"));
    }
    if update_frequency == 0 {
        return Err(Error::input("update frequency must be at least 1"));
    }
    let mut cur = fitted.clone();
    let mut data = y.clone();
    let mut total = 0.0;
    let mut start = 0;
    while start < holdout.t {
        let end = (start + update_frequency).min(holdout.t);
        let block = holdout.slice_rows(start, end);
        let draws = forecast_draws(&cur, &data, end - start, m, seed, update.exec)?;
        for h in 0..end - start {
            total += draws.log_predictive(h, block.row(h), update.exec)?;
        }
        if end < holdout.t {
            cur = sequential_update(&cur, &data, &block, update)?;
            data = data.concat(&block)?;
        }
        start = end;
    }
    Ok(total)
}

/// Global minimum-variance weights `Σ⁻¹1 / 1ᵀΣ⁻¹1`, renormalised to sum to
/// one after the solve.
pub fn min_variance_weights(sigma: &[f64], s: usize) -> Result<Vec<f64>> {
    if sigma.len() != s * s || s == 0 {
        return Err(Error::input("covariance must be a non-empty square matrix"));
    }
    let mut l = sigma.to_vec();
    cholesky_in_place(&mut l, s).map_err(|_| Error::input("covariance is not positive definite"))?;
    let mut w = vec![1.0; s];
    solve_lower(&l, s, &mut w);
    solve_lower_transpose(&l, s, &mut w);
    let total: f64 = w.iter().sum();
    if !(total.abs() > 0.0) || !total.is_finite() {
        return Err(Error::input("covariance is numerically singular"));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// `diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}` with an exact unit diagonal.
pub fn correlation_at(sigma: &[f64], s: usize) -> Result<Vec<f64>> {
    if sigma.len() != s * s {
        return Err(Error::input("covariance must be square"));
    }
    let sd: Vec<f64> = (0..s)
        .map(|i| {
            let v = sigma[i * s + i];
            if v > 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(Error::input(format!("diagonal entry {i} is {v}, not positive")))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            out[i * s + j] = if i == j { 1.0 } else { sigma[i * s + j] / (sd[i] * sd[j]) };
        }
    }
    Ok(out)
}
