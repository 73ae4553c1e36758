//! Sequential variational updating: grow a fit by new rows and re-optimise
//! against the full likelihood from the previous optimum.

use serde::{Deserialize, Serialize};

use crate::engine::{continue_fit, fit, AdamConfig, AdamState, FittedModel, InitConfig, RunConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::family::{mf_entry_kind, srn_time_map, MfEntry, SrnRole};
use crate::model::ReturnsPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Start from the previous optimum, extended to the new length.
    #[default]
    Warm,
    /// Refit from a fresh initialisation with the fit's master seed.
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub iters: u64,
    pub adam: AdamConfig,
    pub init: InitConfig,
    pub exec: Execution,
    pub mode: UpdateMode,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            adam: AdamConfig::default(),
            init: InitConfig::default(),
            exec: Execution::default(),
            mode: UpdateMode::Warm,
        }
    }
}

/// Extends every time-indexed variational array of `fitted` to `new_t`.
/// Optimiser moments carry over for existing entries and start at zero for
/// new ones.
pub fn extend_fit(fitted: &FittedModel, new_t: usize, init: &InitConfig) -> Result<FittedModel> {
    let old = fitted.model;
    if new_t < old.t {
        return Err(Error::input(format!("cannot shrink a fit from T = {} to {new_t}", old.t)));
    }
    let model = old.with_t(new_t);
    let mut out = fitted.clone();
    out.model = model;
    let mut adam = Vec::with_capacity(fitted.adam.len());
    let mut tbn = Vec::with_capacity(fitted.tbn.len());
    for (i, b) in fitted.tbn.iter().enumerate() {
        let (nb, map) = b.extend(new_t);
        adam.push(fitted.adam[i].remap(&map));
        tbn.push(nb);
    }
    let nt = tbn.len();
    let layout = fitted.layout();
    let mut srn = Vec::with_capacity(fitted.srn.len());
    for (j, (b, l)) in fitted.srn.iter().zip(&layout).enumerate() {
        let time_map = srn_time_map(l.role, &old, new_t);
        let (nb, moments) = if l.role == SrnRole::All {
            // Log-volatility entries copy the last observed time; factor
            // entries start fresh.
            let nth = old.n_theta();
            let copy: Vec<Option<usize>> = time_map
                .iter()
                .enumerate()
                .map(|(i, src)| {
                    src.or(match mf_entry_kind(&model, i) {
                        MfEntry::LogVol { path, .. } => Some(nth + path * old.t + old.t - 1),
                        _ => None,
                    })
                })
                .collect();
            let (nb, _) = b.remap(time_map.len(), &copy, |_| (0.0, init.d_xi));
            let (_, moments) = b.remap(time_map.len(), &time_map, |_| (0.0, init.d_xi));
            (nb, moments)
        } else {
            b.remap(time_map.len(), &time_map, |_| (0.0, init.d_xi))
        };
        adam.push(fitted.adam[nt + j].remap(&moments));
        srn.push(nb);
    }
    out.tbn = tbn;
    out.srn = srn;
    out.adam = adam;
    Ok(out)
}

/// Updates a fit of `y_old` by the rows of `y_new`, re-optimising against
/// the likelihood of all rows. Zero new rows return the fit unchanged.
pub fn sequential_update(fitted: &FittedModel, y_old: &ReturnsPanel, y_new: &ReturnsPanel, cfg: &UpdateConfig) -> Result<FittedModel> {
    if y_old.s != fitted.model.s || y_old.t != fitted.model.t {
        return Err(Error::input(format!(
            "previous panel is {} x {} but the fit covers {} x {}",
            y_old.t, y_old.s, fitted.model.t, fitted.model.s
        )));
    }
    if y_new.s != fitted.model.s {
        return Err(Error::input(format!("new rows have {} columns, expected {}", y_new.s, fitted.model.s)));
    }
    if !fitted.data_fingerprint.is_empty() && fitted.data_fingerprint != y_old.fingerprint() {
        return Err(Error::input("previous panel does not match the data the model was fitted to"));
    }
    if y_new.t == 0 {
        return Ok(fitted.clone());
    }
    let y = y_old.concat(y_new)?;
    match cfg.mode {
        UpdateMode::Cold => {
            let run = RunConfig {
                iters: cfg.iters,
                seed: fitted.master_seed,
                adam: cfg.adam,
                init: cfg.init,
                exec: cfg.exec,
            };
            fit(&fitted.model.with_t(y.t), &fitted.vspec, &y, &run)
        }
        UpdateMode::Warm => {
            let mut out = extend_fit(fitted, y.t, &cfg.init)?;
            out.data_fingerprint = y.fingerprint();
            continue_fit(&mut out, &y, cfg.iters, &cfg.adam, cfg.exec)?;
            Ok(out)
        }
    }
}

/// Every block has an optimiser state of matching size.
pub fn moments_consistent(fitted: &FittedModel) -> bool {
    let sizes = fitted.tbn.iter().map(|b| b.n_params()).chain(fitted.srn.iter().map(|b| b.n_params()));
    fitted.adam.len() == fitted.tbn.len() + fitted.srn.len()
        && sizes.zip(&fitted.adam).all(|(n, a): (usize, &AdamState)| a.m.len() == n && a.v.len() == n)
}
