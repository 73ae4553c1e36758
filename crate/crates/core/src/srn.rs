//! Gaussian copula block with Yeo-Johnson marginals and a factor covariance.
//!
//! `ξ = μ + B z + d ∘ η`, `value_i = t_{γ_i}⁻¹(ξ_i)` where `Σ = B Bᵀ + D²`,
//! `B` is `R × p` lower triangular and `γ_i = 2 logistic(γ*_i)`. With
//! `pinned_gamma` every `γ_i = 1`, which makes the block a plain Gaussian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::LowRankPlusDiag;
use crate::model::logistic;
use crate::yj;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrnBlock {
    pub r: usize,
    pub p: usize,
    pub pinned_gamma: bool,
    /// Unconstrained Yeo-Johnson parameters; empty when pinned.
    pub gamma_star: Vec<f64>,
    pub mu: Vec<f64>,
    /// Row `i` holds `min(i + 1, p)` entries.
    pub b: Vec<f64>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SrnSample {
    pub values: Vec<f64>,
    pub xi: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: Vec<f64>,
}

fn row_len(i: usize, p: usize) -> usize {
    (i + 1).min(p)
}

fn row_offset(i: usize, p: usize) -> usize {
    if i <= p {
        i * (i + 1) / 2
    } else {
        p * (p + 1) / 2 + (i - p) * p
    }
}

impl SrnBlock {
    pub fn new(r: usize, p: usize, pinned_gamma: bool, d0: f64) -> Self {
        Self {
            r,
            p,
            pinned_gamma,
            gamma_star: if pinned_gamma { Vec::new() } else { vec![0.0; r] },
            mu: vec![0.0; r],
            b: vec![0.0; Self::loading_count(r, p)],
            d: vec![d0; r],
        }
    }

    /// Free entries of a lower-triangular `R × p` matrix.
    pub fn loading_count(r: usize, p: usize) -> usize {
        row_offset(r, p)
    }

    pub fn param_count(r: usize, p: usize, pinned_gamma: bool) -> usize {
        let gamma = if pinned_gamma { 0 } else { r };
        gamma + 2 * r + Self::loading_count(r, p)
    }

    pub fn n_params(&self) -> usize {
        Self::param_count(self.r, self.p, self.pinned_gamma)
    }

    pub fn gamma(&self, i: usize) -> f64 {
        if self.pinned_gamma {
            1.0
        } else {
            2.0 * logistic(self.gamma_star[i])
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for part in [&self.gamma_star, &self.mu, &self.b, &self.d] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for part in [&mut self.gamma_star, &mut self.mu, &mut self.b, &mut self.d] {
            let n = part.len();
            part.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    /// Dense `R × p` loadings with the upper triangle zero.
    pub fn b_dense(&self) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; self.r * p];
        for i in 0..self.r {
            let off = row_offset(i, p);
            for j in 0..row_len(i, p) {
                out[i * p + j] = self.b[off + j];
            }
        }
        out
    }

    fn covariance(&self) -> Result<LowRankPlusDiag> {
        let d2: Vec<f64> = self.d.iter().map(|d| d * d).collect();
        LowRankPlusDiag::new(&self.b_dense(), self.p, &d2)
    }

    pub fn sample(&self, z: &[f64], eta: &[f64]) -> Result<SrnSample> {
        if z.len() != self.p || eta.len() != self.r {
            return Err(Error::input("noise vectors do not match block size"));
        }
        let p = self.p;
        let mut xi = Vec::with_capacity(self.r);
        for i in 0..self.r {
            let off = row_offset(i, p);
            let mut x = self.mu[i] + self.d[i] * eta[i];
            for j in 0..row_len(i, p) {
                x += self.b[off + j] * z[j];
            }
            xi.push(x);
        }
        let values: Vec<f64> = if self.pinned_gamma {
            xi.clone()
        } else {
            xi.iter().enumerate().map(|(i, &x)| yj::inverse(x, self.gamma(i))).collect()
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                block: "srn sample".to_string(),
            });
        }
        Ok(SrnSample {
            values,
            xi,
            z: z.to_vec(),
            eta: eta.to_vec(),
        })
    }

    fn transformed(&self, values: &[f64]) -> Vec<f64> {
        values.iter().enumerate().map(|(i, &v)| yj::forward(v, self.gamma(i))).collect()
    }

    pub fn log_density(&self, values: &[f64]) -> Result<f64> {
        let cov = self.covariance()?;
        let xi = self.transformed(values);
        let centred: Vec<f64> = xi.iter().zip(&self.mu).map(|(x, m)| x - m).collect();
        let mut lp = cov.log_density(&centred);
        if !self.pinned_gamma {
            lp += values.iter().enumerate().map(|(i, &v)| yj::ln_derivative(v, self.gamma(i))).sum::<f64>();
        }
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(Error::Evaluation {
                block: "srn log density".to_string(),
            })
        }
    }

    /// `∇_values log q`.
    pub fn grad_log_density(&self, values: &[f64]) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        let xi = self.transformed(values);
        let centred: Vec<f64> = xi.iter().zip(&self.mu).map(|(x, m)| x - m).collect();
        let sol = cov.solve(&centred);
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.pinned_gamma {
                    -sol[i]
                } else {
                    let g = self.gamma(i);
                    -yj::ln_derivative(v, g).exp() * sol[i] + yj::curvature_ratio(v, g)
                }
            })
            .collect())
    }

    /// Gradient of `L(values(λ))` with respect to the flat parameters given
    /// `∂L/∂values` at the draw.
    pub fn backprop(&self, s: &SrnSample, g_values: &[f64]) -> Vec<f64> {
        let r = self.r;
        let p = self.p;
        let mut out = Vec::with_capacity(self.n_params());
        let mut g_xi = Vec::with_capacity(r);
        let mut g_gs = Vec::with_capacity(if self.pinned_gamma { 0 } else { r });
        for i in 0..r {
            if self.pinned_gamma {
                g_xi.push(g_values[i]);
            } else {
                let gamma = self.gamma(i);
                let v = s.values[i];
                let inv_dt = (-yj::ln_derivative(v, gamma)).exp();
                g_xi.push(g_values[i] * inv_dt);
                let sig = logistic(self.gamma_star[i]);
                g_gs.push(-g_values[i] * yj::dgamma(v, gamma) * inv_dt * 2.0 * sig * (1.0 - sig));
            }
        }
        out.extend_from_slice(&g_gs);
        out.extend_from_slice(&g_xi);
        for (i, gx) in g_xi.iter().enumerate() {
            for j in 0..row_len(i, p) {
                out.push(gx * s.z[j]);
            }
        }
        out.extend(g_xi.iter().zip(&s.eta).map(|(g, e)| g * e));
        out
    }

    /// Rebuilds the block over `new_r` entries. `source[i]` names the old
    /// entry that new entry `i` copies, if any; fresh entries take
    /// `fresh(i) = (μ, d)`, `γ = 1` and zero loadings. Returns the block and
    /// the flat-index map used to carry optimiser moments.
    pub fn remap(&self, new_r: usize, source: &[Option<usize>], fresh: impl Fn(usize) -> (f64, f64)) -> (Self, Vec<Option<usize>>) {
        let p = self.p;
        let mut nb = Self::new(new_r, p, self.pinned_gamma, 0.0);
        let gamma_n = if self.pinned_gamma { 0 } else { new_r };
        let gamma_o = if self.pinned_gamma { 0 } else { self.r };
        let lc_n = Self::loading_count(new_r, p);
        let lc_o = Self::loading_count(self.r, p);
        let mut map = vec![None; nb.n_params()];
        for i in 0..new_r {
            match source[i] {
                Some(j) => {
                    if !self.pinned_gamma {
                        nb.gamma_star[i] = self.gamma_star[j];
                        map[i] = Some(j);
                    }
                    nb.mu[i] = self.mu[j];
                    map[gamma_n + i] = Some(gamma_o + j);
                    let n = row_len(i, p).min(row_len(j, p));
                    for c in 0..n {
                        nb.b[row_offset(i, p) + c] = self.b[row_offset(j, p) + c];
                        map[gamma_n + new_r + row_offset(i, p) + c] = Some(gamma_o + self.r + row_offset(j, p) + c);
                    }
                    nb.d[i] = self.d[j];
                    map[gamma_n + new_r + lc_n + i] = Some(gamma_o + self.r + lc_o + j);
                }
                None => {
                    let (m, d) = fresh(i);
                    nb.mu[i] = m;
                    nb.d[i] = d;
                }
            }
        }
        (nb, map)
    }
}
