//! Stochastic-gradient ELBO maximisation with ADAM.
//!
//! Each iteration draws every block once from its own counter-based stream,
//! forms the gradient `∇_λ z · (∇_z log h − ∇_z log q)` with the density of
//! `q` held fixed, and takes one ADAM step per block. Under the Q3 family
//! the factors are drawn from their exact conditional and carry no
//! variational parameters; mixing weights (t family) never do.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::family::{gather_srn, scatter_srn, srn_layout, SrnLayout, VariationalSpec, G_FACTOR, G_IDIO};
use crate::joint::{conditionals, log_mixing_conditional, sample_mixing_weights, value_and_grad, GradientBundle};
use crate::model::{LatentStates, ModelSpec, ReturnsPanel, ThetaReal};
use crate::rng::{normals, stream, stream_id, subseed, Domain};
use crate::srn::{SrnBlock, SrnSample};
use crate::tbn::{TbnBlock, TbnSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            tau1: 0.9,
            tau2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step; returns the increment to add to the parameters.
    pub fn step(&mut self, cfg: &AdamConfig, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - cfg.tau1.powi(self.t as i32);
        let c2 = 1.0 - cfg.tau2.powi(self.t as i32);
        let mut delta = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            self.m[i] = cfg.tau1 * self.m[i] + (1.0 - cfg.tau1) * g[i];
            self.v[i] = cfg.tau2 * self.v[i] + (1.0 - cfg.tau2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            delta.push(cfg.alpha * mh / (vh.sqrt() + cfg.eps));
        }
        delta
    }

    /// Carries moments across a parameter re-layout; new entries start at zero.
    pub fn remap(&self, map: &[Option<usize>]) -> Self {
        Self {
            m: map.iter().map(|m| m.map_or(0.0, |j| self.m[j])).collect(),
            v: map.iter().map(|m| m.map_or(0.0, |j| self.v[j])).collect(),
            t: self.t,
        }
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_update(state: &AdamState, cfg: &AdamConfig, g: &[f64]) -> (Vec<f64>, AdamState) {
    let mut s = state.clone();
    let d = s.step(cfg, g);
    (d, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of the random initial means.
    pub mean_sd: f64,
    /// Initial copula scale `d_ξ`.
    pub d_xi: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { mean_sd: 0.01, d_xi: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub iters: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub init: InitConfig,
    pub exec: Execution,
}

impl RunConfig {
    pub fn new(iters: u64, seed: u64) -> Self {
        Self {
            iters,
            seed,
            adam: AdamConfig::default(),
            init: InitConfig::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rejected_steps: u64,
    /// Evaluations in which an exponent argument was clamped.
    pub clamped_evaluations: u64,
    pub last_rejection: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: ModelSpec,
    pub vspec: VariationalSpec,
    /// `S` idiosyncratic blocks followed by `K` factor blocks.
    pub tbn: Vec<TbnBlock>,
    /// Copula blocks in [`srn_layout`] order.
    pub srn: Vec<SrnBlock>,
    /// One state per block, TBN blocks first.
    pub adam: Vec<AdamState>,
    pub adam_config: AdamConfig,
    pub elbo_trace: Vec<f64>,
    pub iterations_run: u64,
    pub master_seed: u64,
    pub data_fingerprint: String,
    pub diagnostics: FitDiagnostics,
}

/// Mean and standard deviation of the finite values among the last `window`
/// entries of `trace`.
pub fn windowed_mean_sd(trace: &[f64], window: usize) -> (f64, f64) {
    let start = trace.len().saturating_sub(window);
    let vals: Vec<f64> = trace[start..].iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// One joint draw of all variational blocks.
struct Draw {
    theta: ThetaReal,
    x: LatentStates,
    tbn: Vec<TbnSample>,
    srn: Vec<SrnSample>,
    /// Log-density of everything drawn from a non-variational proposal
    /// (the auxiliary mixing-weight proposal under Q3-t).
    log_aux: f64,
    /// `log h` minus any exactly-integrated or conditioned-out terms.
    log_target: f64,
    clamped: usize,
}

impl FittedModel {
    /// Fresh initialisation for the given model and family.
    pub fn initialise(model: ModelSpec, vspec: VariationalSpec, seed: u64, init: &InitConfig, adam: AdamConfig) -> Self {
        let t = model.t;
        let mut tbn = Vec::new();
        if vspec.has_tbn() {
            for i in 0..model.s + model.k {
                let g = if i < model.s { G_IDIO } else { G_FACTOR };
                let mut b = TbnBlock::zeros(g, t);
                let mut r = stream(seed, stream_id(Domain::Init, i as u64), 0);
                b.mu_g = normals(&mut r, g).iter().map(|z| z * init.mean_sd).collect();
                tbn.push(b);
            }
        }
        let srn: Vec<SrnBlock> = srn_layout(&vspec, &model)
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let mut b = SrnBlock::new(l.r, l.p, l.pinned_gamma, init.d_xi);
                let mut r = stream(seed, stream_id(Domain::Init, (1 << 30) + j as u64), 0);
                b.mu = normals(&mut r, l.r).iter().map(|z| z * init.mean_sd).collect();
                b
            })
            .collect();
        let adam_states = tbn
            .iter()
            .map(|b| AdamState::new(b.n_params()))
            .chain(srn.iter().map(|b| AdamState::new(b.n_params())))
            .collect();
        Self {
            model,
            vspec,
            tbn,
            srn,
            adam: adam_states,
            adam_config: adam,
            elbo_trace: Vec::new(),
            iterations_run: 0,
            master_seed: seed,
            data_fingerprint: String::new(),
            diagnostics: FitDiagnostics::default(),
        }
    }

    pub fn layout(&self) -> Vec<SrnLayout> {
        srn_layout(&self.vspec, &self.model)
    }

    pub fn n_variational_params(&self) -> usize {
        self.tbn.iter().map(TbnBlock::n_params).sum::<usize>() + self.srn.iter().map(SrnBlock::n_params).sum::<usize>()
    }

    /// More than 1% of the steps were rejected.
    pub fn is_unstable(&self) -> bool {
        self.iterations_run > 0 && self.diagnostics.rejected_steps as f64 > 0.01 * self.iterations_run as f64
    }

    pub fn windowed_elbo(&self, window: usize) -> (f64, f64) {
        windowed_mean_sd(&self.elbo_trace, window)
    }

    fn check_panel(&self, y: &ReturnsPanel) -> Result<()> {
        if y.s != self.model.s || y.t != self.model.t {
            return Err(Error::input(format!(
                "panel is {} x {} but the model is fitted to {} x {}",
                y.t, y.s, self.model.t, self.model.s
            )));
        }
        Ok(())
    }

    /// Draws `(θ, x)` from `q` (plus exact conditionals) using the streams
    /// of `(seed, counter)`, and evaluates the target and `log q` pieces.
    fn draw(&self, y: &ReturnsPanel, seed: u64, counter: u64, exec: Execution, want_target_grad: bool) -> Result<(Draw, Option<GradientBundle>)> {
        let model = &self.model;
        let t_n = model.t;
        let tbn_draws: Vec<Result<TbnSample>> = map_indexed(exec, self.tbn.len(), |i| {
            let b = &self.tbn[i];
            let (dom, idx) = if i < model.s { (Domain::IdioBlock, i) } else { (Domain::FactorBlock, i - model.s) };
            let mut r = stream(seed, stream_id(dom, idx as u64), counter);
            let eg = normals(&mut r, b.g);
            let el = normals(&mut r, b.t);
            b.sample(&eg, &el)
        });
        let tbn = tbn_draws.into_iter().collect::<Result<Vec<_>>>()?;
        let srn_draws: Vec<Result<SrnSample>> = map_indexed(exec, self.srn.len(), |j| {
            let b = &self.srn[j];
            let mut r = stream(seed, stream_id(Domain::SrnBlock, j as u64), counter);
            let z = normals(&mut r, b.p);
            let e = normals(&mut r, b.r);
            b.sample(&z, &e)
        });
        let srn = srn_draws.into_iter().collect::<Result<Vec<_>>>()?;

        let mut theta = ThetaReal::zeros(model);
        let mut x = LatentStates::zeros(model);
        for (i, s) in tbn.iter().enumerate() {
            if i < model.s {
                theta.kappa_eps[i] = s.xi[0];
                theta.alpha_eps[i] = s.xi[1];
                theta.psi_eps[i] = s.xi[2];
                x.h_eps[i * t_n..(i + 1) * t_n].copy_from_slice(&s.zeta);
            } else {
                let k = i - model.s;
                theta.alpha_f[k] = s.xi[0];
                theta.psi_f[k] = s.xi[1];
                x.h_f[k * t_n..(k + 1) * t_n].copy_from_slice(&s.zeta);
            }
        }
        for (l, s) in self.layout().iter().zip(&srn) {
            scatter_srn(l.role, model, &s.values, &mut theta, &mut x);
        }

        let mix_rng = |offset: u64| stream(seed, stream_id(Domain::MixingWeights, offset), counter);
        let factor_draw = |theta: &ThetaReal, x: &LatentStates, offset: usize| -> Result<(Vec<f64>, f64)> {
            let conds = conditionals(theta, x, y, model, exec)?;
            let k_n = model.k;
            let mut f = vec![0.0; k_n * t_n];
            let draws = map_indexed(exec, t_n, |t| {
                let mut r = stream(seed, stream_id(Domain::FactorConditional, (offset + t) as u64), counter);
                conds[t].0.sample(&normals(&mut r, k_n))
            });
            for (t, ft) in draws.iter().enumerate() {
                for k in 0..k_n {
                    f[k * t_n + t] = ft[k];
                }
            }
            Ok((f, conds.iter().map(|c| c.1).sum()))
        };

        let mut log_aux = 0.0;
        let mut marginal = None;
        let mut log_w_cond = 0.0;
        if self.vspec.exact_factors() {
            if model.is_student_t() {
                // Auxiliary draw under unit weights, weights from their
                // conditional given it, then factors given the weights.
                let (fa, _) = factor_draw(&theta, &x, t_n)?;
                x.f = fa;
                let (we, wf) = sample_mixing_weights(&theta, &x, y, model, &mut mix_rng(0))?;
                x.w_eps = Some(we);
                x.w_f = Some(wf);
                log_aux = log_mixing_conditional(&theta, &x, y, model)?;
            }
            let (f, ll) = factor_draw(&theta, &x, 0)?;
            x.f = f;
            marginal = Some(ll);
        } else if model.is_student_t() {
            let (we, wf) = sample_mixing_weights(&theta, &x, y, model, &mut mix_rng(0))?;
            x.w_eps = Some(we);
            x.w_f = Some(wf);
            log_w_cond = log_mixing_conditional(&theta, &x, y, model)?;
        }

        let (terms, grad) = if want_target_grad {
            let (t, g) = value_and_grad(&theta, &x, y, model, !self.vspec.exact_factors(), exec)?;
            (t, Some(g))
        } else {
            (crate::joint::log_joint_terms(&theta, &x, y, model)?, None)
        };
        let log_target = match marginal {
            Some(ll) => ll + terms.states_and_priors() + terms.mixing,
            None => terms.total() - log_w_cond,
        };
        Ok((
            Draw {
                theta,
                x,
                tbn,
                srn,
                log_aux,
                log_target,
                clamped: terms.clamped,
            },
            grad,
        ))
    }

    /// `Σ log q` over all variational blocks at the draw.
    fn log_q(&self, d: &Draw, exec: Execution) -> Result<f64> {
        let tb = map_indexed(exec, self.tbn.len(), |i| self.tbn[i].log_density(&d.tbn[i].xi, &d.tbn[i].zeta));
        let sb = map_indexed(exec, self.srn.len(), |j| self.srn[j].log_density(&d.srn[j].values));
        let mut total = 0.0;
        for v in tb.into_iter().chain(sb) {
            total += v?;
        }
        Ok(total)
    }

    /// Single-draw ELBO and per-block parameter gradients for `counter`.
    fn gradient(&self, y: &ReturnsPanel, counter: u64, exec: Execution) -> Result<(f64, Vec<Vec<f64>>, usize)> {
        let (d, g) = self.draw(y, self.master_seed, counter, exec, true)?;
        let g = g.expect("gradient requested");
        let t_n = self.model.t;
        let s_n = self.model.s;
        let layout = self.layout();
        let tb = map_indexed(exec, self.tbn.len(), |i| -> Result<(f64, Vec<f64>)> {
            let b = &self.tbn[i];
            let s = &d.tbn[i];
            let (gh_xi, gh_z): (Vec<f64>, &[f64]) = if i < s_n {
                (
                    vec![g.theta.kappa_eps[i], g.theta.alpha_eps[i], g.theta.psi_eps[i]],
                    &g.h_eps[i * t_n..(i + 1) * t_n],
                )
            } else {
                let k = i - s_n;
                (vec![g.theta.alpha_f[k], g.theta.psi_f[k]], &g.h_f[k * t_n..(k + 1) * t_n])
            };
            let lq = b.log_density(&s.xi, &s.zeta)?;
            let (gq_xi, gq_z) = b.grad_log_density(&s.xi, &s.zeta)?;
            let gx: Vec<f64> = gh_xi.iter().zip(&gq_xi).map(|(a, b)| a - b).collect();
            let gz: Vec<f64> = gh_z.iter().zip(&gq_z).map(|(a, b)| a - b).collect();
            Ok((lq, b.backprop(s, &gx, &gz)))
        });
        let sb = map_indexed(exec, self.srn.len(), |j| -> Result<(f64, Vec<f64>)> {
            let b = &self.srn[j];
            let s = &d.srn[j];
            let gh = gather_srn(layout[j].role, &self.model, &g);
            let lq = b.log_density(&s.values)?;
            let gq = b.grad_log_density(&s.values)?;
            let gv: Vec<f64> = gh.iter().zip(&gq).map(|(a, b)| a - b).collect();
            Ok((lq, b.backprop(s, &gv)))
        });
        let mut log_q = 0.0;
        let mut grads = Vec::with_capacity(tb.len() + sb.len());
        for r in tb.into_iter().chain(sb) {
            let (lq, gr) = r?;
            log_q += lq;
            if let Some(i) = gr.iter().position(|v| !(v.abs() <= GRADIENT_LIMIT)) {
                return Err(Error::Evaluation {
                    block: format!("block {} gradient entry {i} (non-finite or beyond the gradient limit)", grads.len()),
                });
            }
            grads.push(gr);
        }
        let elbo = d.log_target - d.log_aux - log_q;
        if !elbo.is_finite() {
            return Err(Error::Evaluation {
                block: "elbo".to_string(),
            });
        }
        Ok((elbo, grads, d.clamped))
    }

    /// Replaces every block's flat parameters with `new[i]`.
    fn apply(&mut self, deltas: &[Vec<f64>]) {
        let nt = self.tbn.len();
        for (i, b) in self.tbn.iter_mut().enumerate() {
            let mut p = b.to_flat();
            p.iter_mut().zip(&deltas[i]).for_each(|(a, d)| *a += d);
            b.set_flat(&p);
        }
        for (j, b) in self.srn.iter_mut().enumerate() {
            let mut p = b.to_flat();
            p.iter_mut().zip(&deltas[nt + j]).for_each(|(a, d)| *a += d);
            b.set_flat(&p);
        }
    }
}

/// Gradient entries beyond this magnitude come from far-tail draws whose
/// squares would swamp ADAM's second moments for tens of thousands of
/// iterations; such steps are rejected like non-finite ones.
pub const GRADIENT_LIMIT: f64 = 1e10;

/// Outcome of one stochastic-gradient iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub elbo: f64,
    pub accepted: bool,
}

/// One iteration at counter `fitted.iterations_run`: draw, gradient, ADAM.
/// Non-finite or clamped evaluations reject the step and leave parameters
/// and moments untouched.
pub fn sgd_step(fitted: &mut FittedModel, y: &ReturnsPanel, adam: &AdamConfig, exec: Execution) -> Result<StepOutcome> {
    fitted.check_panel(y)?;
    let counter = fitted.iterations_run;
    let outcome = match fitted.gradient(y, counter, exec) {
        Ok((_, _, clamped)) if clamped > 0 => {
            // Saturated exponentials: value and gradient are not the target's.
            fitted.diagnostics.clamped_evaluations += 1;
            fitted.diagnostics.rejected_steps += 1;
            fitted.diagnostics.last_rejection = Some(format!("iteration {counter}: {clamped} clamped exponent(s)"));
            StepOutcome {
                elbo: f64::NAN,
                accepted: false,
            }
        }
        Ok((elbo, grads, _)) => {
            let mut states = std::mem::take(&mut fitted.adam);
            let deltas = map_indexed(exec, states.len(), |i| {
                let mut s = states[i].clone();
                let d = s.step(adam, &grads[i]);
                (d, s)
            });
            let mut ds = Vec::with_capacity(deltas.len());
            for (i, (d, s)) in deltas.into_iter().enumerate() {
                states[i] = s;
                ds.push(d);
            }
            fitted.adam = states;
            fitted.apply(&ds);
            StepOutcome { elbo, accepted: true }
        }
        Err(e @ (Error::Evaluation { .. } | Error::Numerical(_))) => {
            fitted.diagnostics.rejected_steps += 1;
            fitted.diagnostics.last_rejection = Some(format!("iteration {counter}: {e}"));
            StepOutcome {
                elbo: f64::NAN,
                accepted: false,
            }
        }
        Err(e) => return Err(e),
    };
    fitted.elbo_trace.push(outcome.elbo);
    fitted.iterations_run += 1;
    Ok(outcome)
}

/// Runs `iters` further iterations on an existing fit.
pub fn continue_fit(fitted: &mut FittedModel, y: &ReturnsPanel, iters: u64, adam: &AdamConfig, exec: Execution) -> Result<()> {
    fitted.adam_config = *adam;
    for _ in 0..iters {
        sgd_step(fitted, y, adam, exec)?;
    }
    Ok(())
}

/// Fits the family from a fresh initialisation.
pub fn fit(model: &ModelSpec, vspec: &VariationalSpec, y: &ReturnsPanel, run: &RunConfig) -> Result<FittedModel> {
    model.validate()?;
    let mut fitted = FittedModel::initialise(*model, *vspec, run.seed, &run.init, run.adam);
    fitted.check_panel(y)?;
    fitted.data_fingerprint = y.fingerprint();
    continue_fit(&mut fitted, y, run.iters, &run.adam, run.exec)?;
    Ok(fitted)
}

/// Single-draw ELBO and per-block gradients that `sgd_step` would use at
/// iteration `counter` (blocks ordered as `fitted.adam`).
pub fn elbo_gradient(fitted: &FittedModel, y: &ReturnsPanel, counter: u64, exec: Execution) -> Result<(f64, Vec<Vec<f64>>)> {
    fitted.check_panel(y)?;
    fitted.gradient(y, counter, exec).map(|(e, g, _)| (e, g))
}

/// Monte Carlo ELBO estimate from `n_samples` fresh draws.
pub fn estimate_elbo(fitted: &FittedModel, y: &ReturnsPanel, n_samples: usize, seed: u64, exec: Execution) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::input("n_samples must be at least 1"));
    }
    fitted.check_panel(y)?;
    let base = subseed(seed, Domain::ElboEstimate, 0);
    let mut total = 0.0;
    for i in 0..n_samples {
        let (d, _) = fitted.draw(y, base, i as u64, exec, false)?;
        let v = d.log_target - d.log_aux - fitted.log_q(&d, exec)?;
        if !v.is_finite() {
            return Err(Error::Evaluation {
                block: format!("elbo sample {i}"),
            });
        }
        total += v;
    }
    Ok(total / n_samples as f64)
}

/// `m` posterior draws `(θ, x)`; under Q3 the factors come from their exact
/// conditional, and t-family draws include mixing weights.
pub fn posterior_draws(fitted: &FittedModel, y: &ReturnsPanel, m: usize, seed: u64, exec: Execution) -> Result<Vec<(ThetaReal, LatentStates)>> {
    fitted.check_panel(y)?;
    let base = subseed(seed, Domain::Forecast, 0);
    let draws = map_indexed(exec, m, |i| {
        fitted.draw(y, base, i as u64, Execution::Sequential, false).map(|(d, _)| (d.theta, d.x))
    });
    draws.into_iter().collect()
}
