//! Conditionally structured Gaussian block over `G` global parameters `ξ`
//! and a length-`T` AR(1) path `ζ`.
//!
//! `q(ξ) = N(μ_G, (C_G C_Gᵀ)⁻¹)` and `q(ζ | ξ) = N(μ_L(ξ), (C_L C_Lᵀ)⁻¹)` with
//! `μ_L = d + C_L⁻ᵀ D (μ_G − ξ)` and a lower-bidiagonal `C_L` whose stored
//! entries are `c* = f* + F ξ`. Diagonals of both Cholesky factors are
//! stored on the log scale.
//!
//! `c*` uses an interleaved layout: index `0` is the first diagonal and, for
//! `t ≥ 1`, `2t − 1` holds `C_L[t, t−1]` and `2t` holds `C_L[t, t]`. Growing
//! the path therefore only appends entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_lower, solve_lower_transpose, LowerBidiagonal, LN_2PI};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbnBlock {
    pub g: usize,
    pub t: usize,
    pub mu_g: Vec<f64>,
    /// Packed lower triangle of `C*_G`, row-major.
    pub cstar_g: Vec<f64>,
    pub d: Vec<f64>,
    /// `T × G`, row-major.
    pub dmat: Vec<f64>,
    pub fstar: Vec<f64>,
    /// `(2T − 1) × G`, row-major.
    pub fmat: Vec<f64>,
}

/// A reparameterised draw together with what backpropagation needs.
#[derive(Debug, Clone)]
pub struct TbnSample {
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
    pub cl: LowerBidiagonal,
    pub eta_g: Vec<f64>,
    pub eta_l: Vec<f64>,
    /// `C_G⁻ᵀ η_G = ξ − μ_G`.
    v: Vec<f64>,
    /// `ζ − d`.
    b: Vec<f64>,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl TbnBlock {
    pub fn zeros(g: usize, t: usize) -> Self {
        Self {
            g,
            t,
            mu_g: vec![0.0; g],
            cstar_g: vec![0.0; g * (g + 1) / 2],
            d: vec![0.0; t],
            dmat: vec![0.0; t * g],
            fstar: vec![0.0; 2 * t - 1],
            fmat: vec![0.0; (2 * t - 1) * g],
        }
    }

    pub fn param_count(g: usize, t: usize) -> usize {
        g + g * (g + 1) / 2 + t + t * g + (2 * t - 1) + (2 * t - 1) * g
    }

    pub fn n_params(&self) -> usize {
        Self::param_count(self.g, self.t)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for part in [&self.mu_g, &self.cstar_g, &self.d, &self.dmat, &self.fstar, &self.fmat] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for part in [
            &mut self.mu_g,
            &mut self.cstar_g,
            &mut self.d,
            &mut self.dmat,
            &mut self.fstar,
            &mut self.fmat,
        ] {
            let n = part.len();
            part.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    pub fn from_flat(g: usize, t: usize, flat: &[f64]) -> Self {
        let mut b = Self::zeros(g, t);
        b.set_flat(flat);
        b
    }

    /// Dense lower `C_G` with exponentiated diagonal.
    pub fn cg(&self) -> Vec<f64> {
        let g = self.g;
        let mut c = vec![0.0; g * g];
        for i in 0..g {
            for j in 0..=i {
                let v = self.cstar_g[packed(i, j)];
                c[i * g + j] = if i == j { v.exp() } else { v };
            }
        }
        c
    }

    /// Stored entries `c* = f* + F ξ`.
    fn cstar_l(&self, xi: &[f64]) -> Vec<f64> {
        let g = self.g;
        (0..2 * self.t - 1)
            .map(|r| {
                let row = &self.fmat[r * g..(r + 1) * g];
                self.fstar[r] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// `C_L(ξ)` on the bidiagonal pattern.
    pub fn cl(&self, xi: &[f64]) -> Result<LowerBidiagonal> {
        let c = self.cstar_l(xi);
        let diag: Vec<f64> = (0..self.t).map(|t| c[2 * t].exp()).collect();
        if let Some(t) = diag.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Evaluation {
                block: format!("tbn local Cholesky diagonal {t}"),
            });
        }
        let sub = (1..self.t).map(|t| c[2 * t - 1]).collect();
        Ok(LowerBidiagonal { diag, sub })
    }

    /// `ξ = μ_G + C_G⁻ᵀ η_G`, `ζ = d + C_L⁻ᵀ (η_L − D (ξ − μ_G))`.
    pub fn sample(&self, eta_g: &[f64], eta_l: &[f64]) -> Result<TbnSample> {
        if eta_g.len() != self.g || eta_l.len() != self.t {
            return Err(Error::input("noise vectors do not match block size"));
        }
        let g = self.g;
        let cg = self.cg();
        let mut v = eta_g.to_vec();
        solve_lower_transpose(&cg, g, &mut v);
        let xi: Vec<f64> = self.mu_g.iter().zip(&v).map(|(m, v)| m + v).collect();
        let cl = self.cl(&xi)?;
        let mut b: Vec<f64> = (0..self.t)
            .map(|t| {
                let row = &self.dmat[t * g..(t + 1) * g];
                eta_l[t] - row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        cl.solve_transpose(&mut b);
        let zeta: Vec<f64> = self.d.iter().zip(&b).map(|(d, b)| d + b).collect();
        if zeta.iter().chain(&xi).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                block: "tbn sample".to_string(),
            });
        }
        Ok(TbnSample {
            xi,
            zeta,
            cl,
            eta_g: eta_g.to_vec(),
            eta_l: eta_l.to_vec(),
            v,
            b,
        })
    }

    /// `C_Gᵀ (ξ − μ_G)`.
    fn whiten_global(&self, cg: &[f64], xi: &[f64]) -> Vec<f64> {
        let g = self.g;
        (0..g)
            .map(|i| (i..g).map(|k| cg[k * g + i] * (xi[k] - self.mu_g[k])).sum())
            .collect()
    }

    /// `C_Lᵀ (ζ − d) + D (ξ − μ_G)`.
    fn whiten_local(&self, cl: &LowerBidiagonal, xi: &[f64], zeta: &[f64]) -> Vec<f64> {
        let g = self.g;
        let e: Vec<f64> = zeta.iter().zip(&self.d).map(|(z, d)| z - d).collect();
        let mut u = cl.mul_transpose(&e);
        for (t, ut) in u.iter_mut().enumerate() {
            let row = &self.dmat[t * g..(t + 1) * g];
            *ut += row.iter().zip(xi.iter().zip(&self.mu_g)).map(|(a, (x, m))| a * (x - m)).sum::<f64>();
        }
        u
    }

    pub fn log_density(&self, xi: &[f64], zeta: &[f64]) -> Result<f64> {
        let cg = self.cg();
        let w = self.whiten_global(&cg, xi);
        let cl = self.cl(xi)?;
        let u = self.whiten_local(&cl, xi, zeta);
        let ld_g: f64 = (0..self.g).map(|i| self.cstar_g[packed(i, i)]).sum();
        let ld_l: f64 = cl.diag.iter().map(|v| v.ln()).sum();
        let n = (self.g + self.t) as f64;
        let lp = -0.5 * n * LN_2PI + ld_g + ld_l
            - 0.5 * w.iter().map(|x| x * x).sum::<f64>()
            - 0.5 * u.iter().map(|x| x * x).sum::<f64>();
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(Error::Evaluation {
                block: "tbn log density".to_string(),
            })
        }
    }

    /// `(∇_ξ log q, ∇_ζ log q)` at an arbitrary point.
    pub fn grad_log_density(&self, xi: &[f64], zeta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.g;
        let t_n = self.t;
        let cg = self.cg();
        let w = self.whiten_global(&cg, xi);
        let cl = self.cl(xi)?;
        let u = self.whiten_local(&cl, xi, zeta);
        let g_zeta: Vec<f64> = cl.mul(&u).iter().map(|v| -v).collect();
        let mut g_xi: Vec<f64> = (0..g).map(|i| -(0..=i).map(|j| cg[i * g + j] * w[j]).sum::<f64>()).collect();
        for j in 0..t_n {
            let e_j = zeta[j] - self.d[j];
            let fd = &self.fmat[2 * j * g..(2 * j + 1) * g];
            let coef_diag = 1.0 - u[j] * cl.diag[j] * e_j;
            for i in 0..g {
                g_xi[i] += coef_diag * fd[i];
            }
            if j + 1 < t_n {
                let e_next = zeta[j + 1] - self.d[j + 1];
                let fs = &self.fmat[(2 * j + 1) * g..(2 * j + 2) * g];
                for i in 0..g {
                    g_xi[i] -= u[j] * e_next * fs[i];
                }
            }
            let drow = &self.dmat[j * g..(j + 1) * g];
            for i in 0..g {
                g_xi[i] -= drow[i] * u[j];
            }
        }
        Ok((g_xi, g_zeta))
    }

    /// Gradient of `L(ξ(λ), ζ(λ))` with respect to the flat parameters, given
    /// `∂L/∂ξ` and `∂L/∂ζ` at the draw (noise held fixed).
    pub fn backprop(&self, s: &TbnSample, g_xi: &[f64], g_zeta: &[f64]) -> Vec<f64> {
        let g = self.g;
        let t_n = self.t;
        let mut a_bar = g_zeta.to_vec();
        s.cl.solve(&mut a_bar);
        let mut out = vec![0.0; self.n_params()];
        let (o_mu, o_cg) = (0, g);
        let o_d = o_cg + g * (g + 1) / 2;
        let o_dm = o_d + t_n;
        let o_fs = o_dm + t_n * g;
        let o_fm = o_fs + 2 * t_n - 1;
        out[o_d..o_d + t_n].copy_from_slice(g_zeta);
        let mut g_xi_total = g_xi.to_vec();
        for j in 0..t_n {
            let gc_diag = -s.b[j] * a_bar[j] * s.cl.diag[j];
            let mut rows = vec![(2 * j, gc_diag)];
            if j + 1 < t_n {
                rows.push((2 * j + 1, -s.b[j + 1] * a_bar[j]));
            }
            for (r, gc) in rows {
                out[o_fs + r] = gc;
                let frow = &self.fmat[r * g..(r + 1) * g];
                for i in 0..g {
                    out[o_fm + r * g + i] = gc * s.xi[i];
                    g_xi_total[i] += frow[i] * gc;
                }
            }
        }
        let mut g_v = g_xi_total.clone();
        for t in 0..t_n {
            let drow = &self.dmat[t * g..(t + 1) * g];
            for i in 0..g {
                out[o_dm + t * g + i] = -a_bar[t] * s.v[i];
                g_v[i] -= drow[i] * a_bar[t];
            }
        }
        out[o_mu..o_mu + g].copy_from_slice(&g_xi_total);
        let cg = self.cg();
        let mut v_bar = g_v;
        solve_lower(&cg, g, &mut v_bar);
        for i in 0..g {
            for j in 0..=i {
                let mut gcij = -s.v[i] * v_bar[j];
                if i == j {
                    gcij *= cg[i * g + i];
                }
                out[o_cg + packed(i, j)] = gcij;
            }
        }
        out
    }

    /// Grows the path to `new_t`, returning the block and, for every new flat
    /// index, the old flat index it was copied from (`None` for fresh entries).
    pub fn extend(&self, new_t: usize) -> (Self, Vec<Option<usize>>) {
        assert!(new_t >= self.t);
        let g = self.g;
        let t_old = self.t;
        let mut nb = Self::zeros(g, new_t);
        nb.mu_g.clone_from(&self.mu_g);
        nb.cstar_g.clone_from(&self.cstar_g);
        let last_d = *self.d.last().unwrap();
        for t in 0..new_t {
            nb.d[t] = if t < t_old { self.d[t] } else { last_d };
        }
        nb.dmat[..t_old * g].copy_from_slice(&self.dmat);
        nb.fstar[..2 * t_old - 1].copy_from_slice(&self.fstar);
        let last_diag = self.fstar[2 * t_old - 2];
        let last_sub = if t_old > 1 { self.fstar[2 * t_old - 3] } else { 0.0 };
        for t in t_old..new_t {
            nb.fstar[2 * t - 1] = last_sub;
            nb.fstar[2 * t] = last_diag;
        }
        nb.fmat[..(2 * t_old - 1) * g].copy_from_slice(&self.fmat);

        let sizes_old = [g, g * (g + 1) / 2, t_old, t_old * g, 2 * t_old - 1, (2 * t_old - 1) * g];
        let sizes_new = [g, g * (g + 1) / 2, new_t, new_t * g, 2 * new_t - 1, (2 * new_t - 1) * g];
        let mut map = Vec::with_capacity(nb.n_params());
        let mut off_old = 0;
        for (so, sn) in sizes_old.iter().zip(&sizes_new) {
            for i in 0..*sn {
                map.push((i < *so).then_some(off_old + i));
            }
            off_old += so;
        }
        (nb, map)
    }
}
