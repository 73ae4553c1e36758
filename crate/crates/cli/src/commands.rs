use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use fsv_vb::engine::{fit, posterior_draws, FittedModel, RunConfig};
use fsv_vb::exec::{with_threads, Execution};
use fsv_vb::family::{count_variational_params, Family, VariationalSpec};
use fsv_vb::forecast::{clapl, correlation_at, forecast_draws, min_variance_weights, predictive_likelihood};
use fsv_vb::io::{check_fingerprint, load_config, load_panel, load_snapshot, save_panel, save_snapshot, write_table, Config};
use fsv_vb::model::{map_to_natural, ErrorFamily, ModelSpec, ReturnsPanel};
use fsv_vb::seq::{sequential_update, UpdateConfig, UpdateMode};
use fsv_vb::sim::{default_params, simulate_fsv};

use crate::{Cli, Command, SeedArg};

/// Machine-readable result printed to stdout by every command but
/// `count-params`.
#[derive(Debug, Serialize)]
struct Summary {
    command: &'static str,
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elbo_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elbo_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds_per_iteration: Option<f64>,
    #[serde(skip_serializing_if = "Value::is_null")]
    result: Value,
}

impl Summary {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            artifacts: Vec::new(),
            elbo_mean: None,
            elbo_sd: None,
            seconds_per_iteration: None,
            result: Value::Null,
        }
    }

    fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.display().to_string());
    }

    fn fit_stats(&mut self, f: &FittedModel, iters: u64, secs: f64) {
        let (m, s) = f.windowed_elbo(REPORT_WINDOW);
        self.elbo_mean = m.is_finite().then_some(m);
        self.elbo_sd = s.is_finite().then_some(s);
        if iters > 0 {
            self.seconds_per_iteration = Some(secs / iters as f64);
        }
    }
}

/// Trace window for the reported averaged ELBO.
const REPORT_WINDOW: usize = 5000;
const SNAPSHOT_FILE: &str = "fit.snapshot";

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => load_config(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    let threads = cli.threads;
    let summary = with_threads(threads, move || dispatch(cli.command, &config))?;
    if let Some(s) = summary {
        let mut out = std::io::stdout().lock();
        if let Err(e) = writeln!(out, "{}", serde_json::to_string_pretty(&s)?) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

fn seed_of(arg: &SeedArg, cfg: &Config) -> Result<u64> {
    arg.seed
        .or(cfg.seed)
        .ok_or_else(|| anyhow!("this command is randomized: pass --seed (or set `seed` in the config)"))
}

fn parse_error_family(s: &str) -> Result<ErrorFamily> {
    match s.to_ascii_lowercase().as_str() {
        "normal" | "gaussian" => Ok(ErrorFamily::Normal),
        "t" | "student_t" | "student-t" => Ok(ErrorFamily::StudentT),
        other => bail!("unknown error family `{other}` (expected normal or student_t)"),
    }
}

fn ensure_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))
}

fn panel(p: &Path) -> Result<ReturnsPanel> {
    load_panel(p).with_context(|| format!("reading panel {}", p.display()))
}

fn snapshot_for(p: &Path, y: &ReturnsPanel, allow: bool) -> Result<FittedModel> {
    let f = load_snapshot(p).with_context(|| format!("reading snapshot {}", p.display()))?;
    check_fingerprint(&f, y, allow)?;
    Ok(f)
}

fn write_fit(dir: &Path, f: &FittedModel, summary: &mut Summary) -> Result<()> {
    ensure_dir(dir)?;
    let snap = dir.join(SNAPSHOT_FILE);
    save_snapshot(f, &snap)?;
    summary.artifact(&snap);
    let trace = dir.join("elbo_trace.csv");
    write_table(
        &trace,
        &["iteration", "elbo"],
        f.elbo_trace.iter().enumerate().map(|(i, v)| vec![i as f64, *v]),
    )?;
    summary.artifact(&trace);
    Ok(())
}

fn update_config(cfg: &Config, iters: Option<u64>, mode: UpdateMode) -> UpdateConfig {
    UpdateConfig {
        iters: iters.unwrap_or(cfg.seq.iters),
        adam: cfg.adam,
        mode,
        ..UpdateConfig::default()
    }
}

fn dispatch(cmd: Command, cfg: &Config) -> Result<Option<Summary>> {
    let exec = Execution::Parallel;
    match cmd {
        Command::Simulate {
            s,
            k,
            t,
            error_family,
            phi_eps,
            tau_eps,
            seed,
            out,
            truth,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let model = ModelSpec::new(s, k, t, parse_error_family(&error_family)?)?;
            let mut p = default_params(&model, seed);
            if let Some(v) = phi_eps {
                p.phi_eps = vec![v; s];
            }
            if let Some(v) = tau_eps {
                p.tau_eps = vec![v; s];
            }
            let (y, tr) = simulate_fsv(&model, &p, seed)?;
            save_panel(&y, &out)?;
            let mut sm = Summary::new("simulate");
            sm.artifact(&out);
            if let Some(tp) = truth {
                fs::write(&tp, serde_json::to_string(&tr)?)?;
                sm.artifact(&tp);
            }
            Ok(Some(sm))
        }
        Command::Fit {
            data,
            family,
            k,
            iters,
            seed,
            out_dir,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let mut vspec = cfg.variational_spec();
            if let Some(f) = family {
                vspec.family = f.parse::<Family>()?;
            }
            let model = ModelSpec::new(y.s, k.unwrap_or(cfg.k), y.t, cfg.error_family)?;
            let iters = iters.unwrap_or(cfg.iters);
            let run = RunConfig {
                iters,
                seed,
                adam: cfg.adam,
                ..RunConfig::new(iters, seed)
            };
            let start = Instant::now();
            let f = fit(&model, &vspec, &y, &run)?;
            let secs = start.elapsed().as_secs_f64();
            let mut sm = Summary::new("fit");
            write_fit(&out_dir, &f, &mut sm)?;
            sm.fit_stats(&f, iters, secs);
            sm.result = json!({
                "family": vspec.family.to_string(),
                "K": model.k,
                "iterations": f.iterations_run,
                "rejected_steps": f.diagnostics.rejected_steps,
                "clamped_evaluations": f.diagnostics.clamped_evaluations,
                "unstable": f.is_unstable(),
            });
            Ok(Some(sm))
        }
        Command::Update {
            snapshot,
            data,
            new,
            iters,
            cold,
            allow_data_mismatch,
            seed,
            out_dir,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let y_new = panel(&new)?;
            if y_new.names != y.names {
                bail!("new rows have a different header from the fitted panel");
            }
            let mut f = snapshot_for(&snapshot, &y, allow_data_mismatch)?;
            if allow_data_mismatch {
                f.data_fingerprint = y.fingerprint();
            }
            f.master_seed = seed;
            let mode = if cold { UpdateMode::Cold } else { UpdateMode::Warm };
            let ucfg = update_config(cfg, iters, mode);
            let start = Instant::now();
            let before = f.iterations_run;
            let g = sequential_update(&f, &y, &y_new, &ucfg)?;
            let secs = start.elapsed().as_secs_f64();
            let mut sm = Summary::new("update");
            write_fit(&out_dir, &g, &mut sm)?;
            let all = out_dir.join("data.csv");
            save_panel(&y.concat(&y_new)?, &all)?;
            sm.artifact(&all);
            let ran = if mode == UpdateMode::Cold { g.iterations_run } else { g.iterations_run - before };
            sm.fit_stats(&g, ran, secs);
            sm.result = json!({ "T": g.model.t, "iterations": g.iterations_run });
            Ok(Some(sm))
        }
        Command::Forecast {
            snapshot,
            data,
            h,
            m,
            bins,
            allow_data_mismatch,
            seed,
            out_dir,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let f = snapshot_for(&snapshot, &y, allow_data_mismatch)?;
            let (hz, m) = (h.unwrap_or(cfg.forecast.h), m.unwrap_or(cfg.forecast.m));
            let fd = forecast_draws(&f, &y, hz, m, seed, exec)?;
            ensure_dir(&out_dir)?;
            let mut sm = Summary::new("forecast");
            let (s_n, k_n) = (fd.s, fd.k);

            let mut header = vec!["draw".to_string(), "horizon".to_string()];
            header.extend(y.names.iter().map(|n| format!("y_{n}")));
            header.extend(y.names.iter().map(|n| format!("h_eps_{n}")));
            header.extend((1..=k_n).map(|k| format!("h_f{k}")));
            header.extend((1..=k_n).map(|k| format!("f{k}")));
            let rows = (0..m).flat_map(|i| (0..hz).map(move |j| (i, j))).map(|(i, j)| {
                let mut r = vec![i as f64, (j + 1) as f64];
                r.extend_from_slice(fd.y_at(i, j));
                r.extend_from_slice(fd.h_eps_at(i, j));
                r.extend_from_slice(fd.h_f_at(i, j));
                r.extend_from_slice(fd.f_at(i, j));
                r
            });
            let p = out_dir.join("forecast_draws.csv");
            write_table(&p, &header.iter().map(String::as_str).collect::<Vec<_>>(), rows)?;
            sm.artifact(&p);

            // Mean covariance, its correlation and min-variance weights per horizon.
            let mut cov_rows = Vec::new();
            let mut corr_rows = Vec::new();
            let mut w_rows = Vec::new();
            for j in 0..hz {
                let mut mean = vec![0.0; s_n * s_n];
                for i in 0..m {
                    for (a, b) in mean.iter_mut().zip(fd.sigma(i, j)) {
                        *a += b / m as f64;
                    }
                }
                let corr = correlation_at(&mean, s_n)?;
                let w = min_variance_weights(&mean, s_n)?;
                for a in 0..s_n {
                    for b in 0..s_n {
                        cov_rows.push(vec![(j + 1) as f64, a as f64, b as f64, mean[a * s_n + b]]);
                        corr_rows.push(vec![(j + 1) as f64, a as f64, b as f64, corr[a * s_n + b]]);
                    }
                }
                let mut r = vec![(j + 1) as f64];
                r.extend(w);
                w_rows.push(r);
            }
            let p = out_dir.join("covariance.csv");
            write_table(&p, &["horizon", "row", "col", "value"], cov_rows)?;
            sm.artifact(&p);
            let p = out_dir.join("correlation.csv");
            write_table(&p, &["horizon", "row", "col", "value"], corr_rows)?;
            sm.artifact(&p);
            let mut wh = vec!["horizon".to_string()];
            wh.extend(y.names.iter().cloned());
            let p = out_dir.join("weights.csv");
            write_table(&p, &wh.iter().map(String::as_str).collect::<Vec<_>>(), w_rows)?;
            sm.artifact(&p);

            let p = out_dir.join("histogram.csv");
            write_table(&p, &["horizon", "series", "bin_lo", "bin_hi", "count", "density"], histogram(&fd, bins))?;
            sm.artifact(&p);
            sm.result = json!({ "H": hz, "M": m });
            Ok(Some(sm))
        }
        Command::Apl {
            snapshot,
            data,
            observed,
            m,
            allow_data_mismatch,
            seed,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let f = snapshot_for(&snapshot, &y, allow_data_mismatch)?;
            let obs = panel(&observed)?;
            let lp = predictive_likelihood(&f, &y, obs.row(0), m.unwrap_or(cfg.forecast.m), seed, exec)?;
            let mut sm = Summary::new("apl");
            sm.result = json!({ "log_apl": lp });
            Ok(Some(sm))
        }
        Command::Clapl {
            snapshot,
            data,
            holdout,
            m,
            update_frequency,
            allow_data_mismatch,
            seed,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let mut f = snapshot_for(&snapshot, &y, allow_data_mismatch)?;
            if allow_data_mismatch {
                f.data_fingerprint = y.fingerprint();
            }
            let hold = panel(&holdout)?;
            let ucfg = update_config(cfg, None, UpdateMode::Warm);
            let v = clapl(
                &f,
                &y,
                &hold,
                m.unwrap_or(cfg.forecast.m),
                update_frequency.unwrap_or(cfg.seq.update_frequency),
                &ucfg,
                seed,
            )?;
            let mut sm = Summary::new("clapl");
            sm.result = json!({ "clapl": v, "rows": hold.t });
            Ok(Some(sm))
        }
        Command::SelectK {
            data,
            holdout,
            kmax,
            family,
            iters,
            m,
            update_frequency,
            seed,
            out_dir,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let hold = panel(&holdout)?;
            let mut vspec: VariationalSpec = cfg.variational_spec();
            if let Some(f) = family {
                vspec.family = f.parse()?;
            }
            let iters = iters.unwrap_or(cfg.iters);
            let ucfg = update_config(cfg, None, UpdateMode::Warm);
            let mut rows = Vec::new();
            let mut per_k = Vec::new();
            for k in 1..=kmax.min(y.s) {
                let model = ModelSpec::new(y.s, k, y.t, cfg.error_family)?;
                let run = RunConfig {
                    adam: cfg.adam,
                    ..RunConfig::new(iters, seed)
                };
                let f = fit(&model, &vspec, &y, &run)?;
                let (em, es) = f.windowed_elbo(REPORT_WINDOW);
                let c = clapl(
                    &f,
                    &y,
                    &hold,
                    m.unwrap_or(cfg.forecast.m),
                    update_frequency.unwrap_or(cfg.seq.update_frequency),
                    &ucfg,
                    seed,
                )?;
                rows.push(vec![k as f64, em, es, c]);
                per_k.push(json!({ "K": k, "elbo_mean": em, "elbo_sd": es, "clapl": c }));
            }
            ensure_dir(&out_dir)?;
            let p = out_dir.join("select_k.csv");
            write_table(&p, &["K", "elbo_mean", "elbo_sd", "clapl"], rows)?;
            let mut sm = Summary::new("select-k");
            sm.artifact(&p);
            sm.result = Value::Array(per_k);
            Ok(Some(sm))
        }
        Command::CountParams {
            s,
            k,
            t,
            family,
            error_family,
        } => {
            let model = ModelSpec::new(s, k, t, parse_error_family(&error_family)?)?;
            let vspec = VariationalSpec {
                family: family.parse()?,
                ..cfg.variational_spec()
            };
            println!("{}", count_variational_params(&vspec, &model));
            Ok(None)
        }
        Command::Summary {
            snapshot,
            data,
            m,
            allow_data_mismatch,
            seed,
            out_dir,
        } => {
            let seed = seed_of(&seed, cfg)?;
            let y = panel(&data)?;
            let f = snapshot_for(&snapshot, &y, allow_data_mismatch)?;
            if m < 2 {
                bail!("summary needs at least 2 draws");
            }
            ensure_dir(&out_dir)?;
            let mut sm = Summary::new("summary");
            for p in posterior_summary(&f, &y, m, seed, exec, &out_dir)? {
                sm.artifact(&p);
            }
            sm.fit_stats(&f, 0, 0.0);
            Ok(Some(sm))
        }
    }
}

/// Per-(horizon, series) equal-width histogram of the `y` draws.
fn histogram(fd: &fsv_vb::forecast::ForecastDraws, bins: usize) -> Vec<Vec<f64>> {
    let bins = bins.max(1);
    let mut out = Vec::new();
    for j in 0..fd.horizon {
        for s in 0..fd.s {
            let vals: Vec<f64> = (0..fd.m).map(|i| fd.y_at(i, j)[s]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
            let mut counts = vec![0usize; bins];
            for v in &vals {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                out.push(vec![
                    (j + 1) as f64,
                    s as f64,
                    a,
                    a + width,
                    *c as f64,
                    *c as f64 / (fd.m as f64 * width),
                ]);
            }
        }
    }
    out
}

#[derive(Default, Clone)]
struct Moments {
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn finish(&self, n: usize) -> (f64, f64) {
        let n = n as f64;
        let mean = self.sum / n;
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, var.sqrt())
    }
}

/// Writes posterior mean/sd tables and returns their paths.
fn posterior_summary(
    f: &FittedModel,
    y: &ReturnsPanel,
    m: usize,
    seed: u64,
    exec: Execution,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = &f.model;
    let (s_n, k_n, t_n) = (model.s, model.k, model.t);
    let draws = posterior_draws(f, y, m, seed, exec)?;
    let mut names: Vec<String> = Vec::new();
    for s in 0..s_n {
        names.push(format!("kappa_eps[{s}]"));
        names.push(format!("tau_eps[{s}]"));
        names.push(format!("phi_eps[{s}]"));
    }
    for k in 0..k_n {
        names.push(format!("tau_f[{k}]"));
        names.push(format!("phi_f[{k}]"));
    }
    for s in 0..s_n {
        for k in 0..k_n.min(s + 1) {
            names.push(format!("beta[{s},{k}]"));
        }
    }
    if model.is_student_t() {
        names.extend((0..s_n).map(|s| format!("v_eps[{s}]")));
        names.extend((0..k_n).map(|k| format!("v_f[{k}]")));
    }
    let mut pm = vec![Moments::default(); names.len()];
    let mut he = vec![Moments::default(); s_n * t_n];
    let mut hf = vec![Moments::default(); k_n * t_n];
    let mut ff = vec![Moments::default(); k_n * t_n];
    let mut corr = vec![Moments::default(); s_n * s_n];
    for (theta, x) in &draws {
        let nat = map_to_natural(model, theta);
        let mut vals = Vec::with_capacity(names.len());
        for s in 0..s_n {
            vals.extend([nat.kappa_eps[s], nat.tau_eps[s], nat.phi_eps[s]]);
        }
        for k in 0..k_n {
            vals.extend([nat.tau_f[k], nat.phi_f[k]]);
        }
        for s in 0..s_n {
            for k in 0..k_n.min(s + 1) {
                vals.push(nat.beta[s * k_n + k]);
            }
        }
        vals.extend(&nat.v_eps);
        vals.extend(&nat.v_f);
        pm.iter_mut().zip(&vals).for_each(|(a, v)| a.add(*v));
        he.iter_mut().zip(&x.h_eps).for_each(|(a, v)| a.add(*v));
        hf.iter_mut().zip(&x.h_f).for_each(|(a, v)| a.add(*v));
        ff.iter_mut().zip(&x.f).for_each(|(a, v)| a.add(*v));
        // Γ at the last time point.
        let t = t_n - 1;
        let d: Vec<f64> = (0..k_n)
            .map(|k| x.w_f.as_ref().map_or(1.0, |w| w[k * t_n + t]) * (nat.tau_f[k] * x.h_f[k * t_n + t]).exp())
            .collect();
        let mut sigma = vec![0.0; s_n * s_n];
        for a in 0..s_n {
            for b in 0..s_n {
                let mut acc: f64 = (0..k_n).map(|k| nat.beta[a * k_n + k] * d[k] * nat.beta[b * k_n + k]).sum();
                if a == b {
                    let w = x.w_eps.as_ref().map_or(1.0, |w| w[a * t_n + t]);
                    acc += w * (nat.tau_eps[a] * x.h_eps[a * t_n + t] + nat.kappa_eps[a]).exp();
                }
                sigma[a * s_n + b] = acc;
            }
        }
        let g = correlation_at(&sigma, s_n)?;
        corr.iter_mut().zip(&g).for_each(|(a, v)| a.add(*v));
    }
    let mut out = Vec::new();
    let p = dir.join("posterior_params.csv");
    {
        let mut w = csv_writer(&p)?;
        w.write_record(["parameter", "mean", "sd"])?;
        for (n, mo) in names.iter().zip(&pm) {
            let (a, b) = mo.finish(m);
            w.write_record([n.clone(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
    }
    out.push(p);
    let path_table = |file: &str, acc: &[Moments], label: &str| -> Result<PathBuf> {
        let p = dir.join(file);
        let n = acc.len() / t_n;
        write_table(
            &p,
            &[label, "t", "mean", "sd"],
            (0..n).flat_map(|i| {
                (0..t_n).map(move |t| {
                    let (a, b) = acc[i * t_n + t].finish(m);
                    vec![i as f64, t as f64, a, b]
                })
            }),
        )?;
        Ok(p)
    };
    out.push(path_table("posterior_h_eps.csv", &he, "series")?);
    out.push(path_table("posterior_h_f.csv", &hf, "factor")?);
    out.push(path_table("posterior_f.csv", &ff, "factor")?);
    let p = dir.join("posterior_correlation.csv");
    write_table(
        &p,
        &["row", "col", "mean", "sd"],
        (0..s_n * s_n).map(|i| {
            let (a, b) = corr[i].finish(m);
            vec![(i / s_n) as f64, (i % s_n) as f64, a, b]
        }),
    )?;
    out.push(p);
    Ok(out)
}

fn csv_writer(p: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))
}
