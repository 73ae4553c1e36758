//! Variational family layouts: which blocks exist, which model variables
//! each one covers, and how many parameters they hold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::GradientBundle;
use crate::model::{beta_offset, LatentStates, ModelSpec, ThetaReal};
use crate::srn::SrnBlock;
use crate::tbn::TbnBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mf,
    Q1,
    Q2,
    Q3,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(Family::Mf),
            "q1" => Ok(Family::Q1),
            "q2" => Ok(Family::Q2),
            "q3" => Ok(Family::Q3),
            other => Err(Error::input(format!("unknown family `{other}` (expected mf, q1, q2 or q3)"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Mf => "mf",
            Family::Q1 => "q1",
            Family::Q2 => "q2",
            Family::Q3 => "q3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationalSpec {
    pub family: Family,
    /// Factor count of the loading block (and the Q2 joint blocks).
    pub p_beta: usize,
    /// Factor count of the Q1 factor-path blocks.
    pub p_fpath: usize,
}

impl VariationalSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            p_beta: 4,
            p_fpath: 0,
        }
    }

    /// Whether the factors are drawn from their exact conditional.
    pub fn exact_factors(&self) -> bool {
        self.family == Family::Q3
    }

    pub fn has_tbn(&self) -> bool {
        self.family != Family::Mf
    }
}

/// Model variables covered by one copula block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SrnRole {
    /// `f_{k, 1:T}`.
    FactorPath(usize),
    /// All free loadings.
    Beta,
    /// `(β_{k:S, k}, f_{k, 1:T})`.
    Joint(usize),
    DofEps(usize),
    DofF(usize),
    /// Every parameter and state, in the canonical order
    /// `[θ, h_ε, h_f, f]`.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrnLayout {
    pub role: SrnRole,
    pub r: usize,
    pub p: usize,
    pub pinned_gamma: bool,
}

/// Global parameter count `G` of the idiosyncratic and factor path blocks.
pub const G_IDIO: usize = 3;
pub const G_FACTOR: usize = 2;

pub fn role_size(role: SrnRole, model: &ModelSpec) -> usize {
    match role {
        SrnRole::FactorPath(_) => model.t,
        SrnRole::Beta => model.n_beta(),
        SrnRole::Joint(k) => model.s - k + model.t,
        SrnRole::DofEps(_) | SrnRole::DofF(_) => 1,
        SrnRole::All => model.n_theta() + model.n_states(),
    }
}

pub fn srn_layout(vspec: &VariationalSpec, model: &ModelSpec) -> Vec<SrnLayout> {
    let mk = |role, p, pinned| SrnLayout {
        role,
        r: role_size(role, model),
        p,
        pinned_gamma: pinned,
    };
    let mut out = Vec::new();
    match vspec.family {
        Family::Mf => {
            out.push(mk(SrnRole::All, 0, true));
            return out;
        }
        Family::Q1 => {
            for k in 0..model.k {
                out.push(mk(SrnRole::FactorPath(k), vspec.p_fpath, false));
            }
            out.push(mk(SrnRole::Beta, vspec.p_beta, false));
        }
        Family::Q2 => {
            for k in 0..model.k {
                out.push(mk(SrnRole::Joint(k), vspec.p_beta, false));
            }
        }
        Family::Q3 => out.push(mk(SrnRole::Beta, vspec.p_beta, false)),
    }
    if model.is_student_t() {
        for s in 0..model.s {
            out.push(mk(SrnRole::DofEps(s), 0, false));
        }
        for k in 0..model.k {
            out.push(mk(SrnRole::DofF(k), 0, false));
        }
    }
    out
}

/// Total number of variational parameters.
pub fn count_variational_params(vspec: &VariationalSpec, model: &ModelSpec) -> usize {
    let mut n = 0;
    if vspec.has_tbn() {
        n += model.s * TbnBlock::param_count(G_IDIO, model.t);
        n += model.k * TbnBlock::param_count(G_FACTOR, model.t);
    }
    for l in srn_layout(vspec, model) {
        n += SrnBlock::param_count(l.r, l.p, l.pinned_gamma);
    }
    n
}

/// Writes block values into `(θ, x)`.
pub fn scatter_srn(role: SrnRole, model: &ModelSpec, values: &[f64], theta: &mut ThetaReal, x: &mut LatentStates) {
    let t_n = model.t;
    match role {
        SrnRole::FactorPath(k) => x.f[k * t_n..(k + 1) * t_n].copy_from_slice(values),
        SrnRole::Beta => theta.beta_free.copy_from_slice(values),
        SrnRole::Joint(k) => {
            let nb = model.s - k;
            let off = beta_offset(model.s, k);
            theta.beta_free[off..off + nb].copy_from_slice(&values[..nb]);
            x.f[k * t_n..(k + 1) * t_n].copy_from_slice(&values[nb..]);
        }
        SrnRole::DofEps(s) => theta.vstar_eps[s] = values[0],
        SrnRole::DofF(k) => theta.vstar_f[k] = values[0],
        SrnRole::All => {
            let nt = model.n_theta();
            *theta = ThetaReal::from_flat(model, &values[..nt]);
            let (a, b) = (nt + model.s * t_n, nt + (model.s + model.k) * t_n);
            x.h_eps.copy_from_slice(&values[nt..a]);
            x.h_f.copy_from_slice(&values[a..b]);
            x.f.copy_from_slice(&values[b..]);
        }
    }
}

/// Reads the gradient entries belonging to a block.
pub fn gather_srn(role: SrnRole, model: &ModelSpec, g: &GradientBundle) -> Vec<f64> {
    let t_n = model.t;
    let f = g.f.as_deref().unwrap_or(&[]);
    match role {
        SrnRole::FactorPath(k) => f[k * t_n..(k + 1) * t_n].to_vec(),
        SrnRole::Beta => g.theta.beta_free.clone(),
        SrnRole::Joint(k) => {
            let off = beta_offset(model.s, k);
            let mut v = g.theta.beta_free[off..off + model.s - k].to_vec();
            v.extend_from_slice(&f[k * t_n..(k + 1) * t_n]);
            v
        }
        SrnRole::DofEps(s) => vec![g.theta.vstar_eps[s]],
        SrnRole::DofF(k) => vec![g.theta.vstar_f[k]],
        SrnRole::All => {
            let mut v = g.theta.to_flat();
            v.extend_from_slice(&g.h_eps);
            v.extend_from_slice(&g.h_f);
            v.extend_from_slice(f);
            v
        }
    }
}

/// For each entry of a block at length `new_t`, the entry it corresponds to
/// at length `old_t` (`None` for new time points).
pub fn srn_time_map(role: SrnRole, model_old: &ModelSpec, new_t: usize) -> Vec<Option<usize>> {
    let old_t = model_old.t;
    match role {
        SrnRole::FactorPath(_) | SrnRole::Joint(_) => {
            let n_old = role_size(role, model_old);
            let n_new = n_old + new_t - old_t;
            (0..n_new).map(|i| (i < n_old).then_some(i)).collect()
        }
        SrnRole::Beta | SrnRole::DofEps(_) | SrnRole::DofF(_) => (0..role_size(role, model_old)).map(Some).collect(),
        SrnRole::All => {
            let nt = model_old.n_theta();
            let mut map: Vec<Option<usize>> = (0..nt).map(Some).collect();
            let paths = model_old.s + 2 * model_old.k;
            for path in 0..paths {
                for t in 0..new_t {
                    map.push((t < old_t).then_some(nt + path * old_t + t));
                }
            }
            map
        }
    }
}

/// Time index of canonical entry `i` of the `All` block, or `None` for `θ`
/// and factor entries; used to seed new state entries from the last time.
pub fn mf_entry_kind(model_new: &ModelSpec, i: usize) -> MfEntry {
    let nt = model_new.n_theta();
    if i < nt {
        return MfEntry::Theta;
    }
    let j = i - nt;
    let path = j / model_new.t;
    let t = j % model_new.t;
    if path < model_new.s + model_new.k {
        MfEntry::LogVol { path, t }
    } else {
        MfEntry::Factor { k: path - model_new.s - model_new.k, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfEntry {
    Theta,
    /// `path` counts idiosyncratic series first, then factor log-vols.
    LogVol { path: usize, t: usize },
    Factor { k: usize, t: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ErrorFamily;

    fn count(f: Family, k: usize) -> usize {
        let m = ModelSpec::new(100, k, 1000, ErrorFamily::Normal).unwrap();
        count_variational_params(&VariationalSpec::new(f), &m)
    }

    #[test]
    fn parameter_table_counts() {
        assert_eq!(count(Family::Q1, 1), 1_213_196);
        assert_eq!(count(Family::Q3, 1), 1_210_196);
        assert_eq!(count(Family::Mf, 1), 204_804);
        assert_eq!(count(Family::Q1, 4), 1_251_260);
        assert_eq!(count(Family::Q3, 4), 1_239_260);
        assert_eq!(count(Family::Mf, 4), 217_404);
        assert_eq!(count(Family::Q2, 1), 1_217_196);
        assert_eq!(count(Family::Q2, 4), 1_267_242);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("Q3".parse::<Family>().unwrap(), Family::Q3);
        assert!("q5".parse::<Family>().is_err());
    }
}
