//! Files: return panels (CSV), run configuration (TOML) and fitted-model
//! snapshots.
//!
//! A snapshot is a self-describing container:
//!
//! ```text
//! FSVVB-SNAPSHOT 1\n
//! {manifest JSON on one line}\n
//! <payload: little-endian f64 values, concatenated in manifest order>
//! ```
//!
//! The manifest records the model and family specs, every block's shape,
//! the payload length and its SHA-256 digest. Loading checks all of them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AdamConfig, AdamState, FitDiagnostics, FittedModel};
use crate::error::{Error, Result};
use crate::family::{srn_layout, Family, VariationalSpec};
use crate::model::{ErrorFamily, ModelSpec, ReturnsPanel};
use crate::seq::moments_consistent;
use crate::srn::SrnBlock;
use crate::tbn::TbnBlock;

// ---------------------------------------------------------------- panels

/// Reads a CSV panel: one header row of series names, then one row per
/// time point.
pub fn load_panel(path: impl AsRef<Path>) -> Result<ReturnsPanel> {
    parse_panel(&fs::read_to_string(path)?)
}

pub fn parse_panel(text: &str) -> Result<ReturnsPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let loc = |e: csv::Error| {
        let row = e.position().map_or(0, |p| p.line() as usize);
        Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        }
    };
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: "empty file".to_string(),
            })
        }
        Some(r) => r.map_err(loc)?,
    };
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    if let Some(c) = names.iter().position(String::is_empty) {
        return Err(Error::Parse {
            row: 1,
            column: c + 1,
            message: "empty series name".to_string(),
        });
    }
    let s = names.len();
    let mut data = Vec::new();
    let mut t = 0;
    for rec in records {
        let rec = rec.map_err(loc)?;
        let row = rec.position().map_or(t + 2, |p| p.line() as usize);
        if rec.len() != s {
            return Err(Error::Parse {
                row,
                column: rec.len().min(s) + 1,
                message: format!("expected {s} fields, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("`{cell}` is not finite"),
                });
            }
            data.push(v);
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no data rows".to_string(),
        });
    }
    ReturnsPanel::new(names, t, data)
}

/// Writes values in shortest round-trip form.
pub fn save_panel(panel: &ReturnsPanel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_panel(panel)?)?;
    Ok(())
}

pub fn format_panel(panel: &ReturnsPanel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::input(e.to_string());
    w.write_record(&panel.names).map_err(err)?;
    for t in 0..panel.t {
        w.write_record(panel.row(t).iter().map(|v| v.to_string())).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::input(e.to_string()))
}

/// Writes a headered numeric table.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(e.to_string()))?;
    let err = |e: csv::Error| Error::input(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSection {
    pub update_frequency: usize,
    pub iters: u64,
}

impl Default for SeqSection {
    fn default() -> Self {
        Self {
            update_frequency: 1,
            iters: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "M")]
    pub m: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self { h: 1, m: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrnSection {
    pub p_beta: usize,
    pub p_fpath: usize,
}

impl Default for SrnSection {
    fn default() -> Self {
        Self { p_beta: 4, p_fpath: 0 }
    }
}

/// Run configuration as read from TOML. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub family: Family,
    pub error_family: ErrorFamily,
    #[serde(rename = "K")]
    pub k: usize,
    pub iters: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub adam: AdamConfig,
    pub seq: SeqSection,
    pub forecast: ForecastSection,
    pub srn: SrnSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            family: Family::Q3,
            error_family: ErrorFamily::Normal,
            k: 1,
            iters: 50_000,
            seed: None,
            adam: AdamConfig::default(),
            seq: SeqSection::default(),
            forecast: ForecastSection::default(),
            srn: SrnSection::default(),
        }
    }
}

impl Config {
    pub fn variational_spec(&self) -> VariationalSpec {
        VariationalSpec {
            family: self.family,
            p_beta: self.srn.p_beta,
            p_fpath: self.srn.p_fpath,
        }
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        let key = if path.is_empty() || path == "." {
            unknown_field(&msg).unwrap_or_default()
        } else {
            path
        };
        Error::Config { key, message: msg }
    })
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn serialize_config(cfg: &Config) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config {
        key: String::new(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------- snapshots

pub const SNAPSHOT_MAGIC: &str = "FSVVB-SNAPSHOT";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TbnShape {
    g: usize,
    t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SrnShape {
    r: usize,
    p: usize,
    pinned_gamma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model: ModelSpec,
    vspec: VariationalSpec,
    adam_config: AdamConfig,
    tbn: Vec<TbnShape>,
    srn: Vec<SrnShape>,
    adam_steps: Vec<u64>,
    trace_len: usize,
    iterations_run: u64,
    master_seed: u64,
    data_fingerprint: String,
    diagnostics: FitDiagnostics,
    payload_values: usize,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises a fit into the snapshot container.
pub fn snapshot_bytes(fitted: &FittedModel) -> Result<Vec<u8>> {
    let mut vals: Vec<f64> = Vec::new();
    for b in &fitted.tbn {
        vals.extend(b.to_flat());
    }
    for b in &fitted.srn {
        vals.extend(b.to_flat());
    }
    for a in &fitted.adam {
        vals.extend_from_slice(&a.m);
        vals.extend_from_slice(&a.v);
    }
    vals.extend_from_slice(&fitted.elbo_trace);
    let mut payload = Vec::with_capacity(vals.len() * 8);
    for v in &vals {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = Manifest {
        version: SNAPSHOT_VERSION,
        model: fitted.model,
        vspec: fitted.vspec,
        adam_config: fitted.adam_config,
        tbn: fitted.tbn.iter().map(|b| TbnShape { g: b.g, t: b.t }).collect(),
        srn: fitted
            .srn
            .iter()
            .map(|b| SrnShape {
                r: b.r,
                p: b.p,
                pinned_gamma: b.pinned_gamma,
            })
            .collect(),
        adam_steps: fitted.adam.iter().map(|a| a.t).collect(),
        trace_len: fitted.elbo_trace.len(),
        iterations_run: fitted.iterations_run,
        master_seed: fitted.master_seed,
        data_fingerprint: fitted.data_fingerprint.clone(),
        diagnostics: fitted.diagnostics.clone(),
        payload_values: vals.len(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::Snapshot(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + json.len() + 32);
    writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_snapshot(fitted: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, snapshot_bytes(fitted)?)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Snapshot(format!("corrupt snapshot: {}", msg.into()))
}

/// Parses a snapshot container.
pub fn snapshot_from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header line"))?;
    let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not text"))?;
    let version = head
        .strip_prefix(SNAPSHOT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt("not a snapshot file"))?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "snapshot format version {version} is not supported (expected {SNAPSHOT_VERSION})"
        )));
    }
    let rest = &bytes[nl + 1..];
    let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..nl2]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.version != version {
        return Err(corrupt("manifest version disagrees with header"));
    }
    let payload = &rest[nl2 + 1..];
    if payload.len() != manifest.payload_values * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest promises {}",
            payload.len(),
            manifest.payload_values * 8
        )));
    }
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    manifest.model.validate()?;
    let layout = srn_layout(&manifest.vspec, &manifest.model);
    let shapes_ok = layout.len() == manifest.srn.len()
        && layout
            .iter()
            .zip(&manifest.srn)
            .all(|(l, s)| l.r == s.r && l.p == s.p && l.pinned_gamma == s.pinned_gamma)
        && manifest.tbn.iter().all(|b| b.t == manifest.model.t)
        && manifest.adam_steps.len() == manifest.tbn.len() + manifest.srn.len();
    if !shapes_ok {
        return Err(corrupt("block shapes do not match the recorded model"));
    }

    let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = vals.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(corrupt("payload shorter than the recorded shapes"))
        }
    };
    let mut tbn = Vec::with_capacity(manifest.tbn.len());
    for s in &manifest.tbn {
        let n = TbnBlock::param_count(s.g, s.t);
        tbn.push(TbnBlock::from_flat(s.g, s.t, &take(n)?));
    }
    let mut srn = Vec::with_capacity(manifest.srn.len());
    for s in &manifest.srn {
        let mut b = SrnBlock::new(s.r, s.p, s.pinned_gamma, 0.0);
        b.set_flat(&take(b.n_params())?);
        srn.push(b);
    }
    let sizes: Vec<usize> = tbn.iter().map(TbnBlock::n_params).chain(srn.iter().map(SrnBlock::n_params)).collect();
    let mut adam = Vec::with_capacity(sizes.len());
    for (n, t) in sizes.iter().zip(&manifest.adam_steps) {
        let m = take(*n)?;
        let v = take(*n)?;
        adam.push(AdamState { m, v, t: *t });
    }
    let elbo_trace = take(manifest.trace_len)?;
    if vals.next().is_some() {
        return Err(corrupt("payload longer than the recorded shapes"));
    }
    let fitted = FittedModel {
        model: manifest.model,
        vspec: manifest.vspec,
        tbn,
        srn,
        adam,
        adam_config: manifest.adam_config,
        elbo_trace,
        iterations_run: manifest.iterations_run,
        master_seed: manifest.master_seed,
        data_fingerprint: manifest.data_fingerprint,
        diagnostics: manifest.diagnostics,
    };
    if !moments_consistent(&fitted) {
        return Err(corrupt("optimiser state does not match the blocks"));
    }
    Ok(fitted)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<FittedModel> {
    snapshot_from_bytes(&fs::read(path)?)
}

/// Loads a snapshot for use with `panel`, refusing a fit of different data
/// unless `allow_mismatch` is set.
pub fn load_snapshot_for(path: impl AsRef<Path>, panel: &ReturnsPanel, allow_mismatch: bool) -> Result<FittedModel> {
    let fitted = load_snapshot(path)?;
    check_fingerprint(&fitted, panel, allow_mismatch)?;
    Ok(fitted)
}

pub fn check_fingerprint(fitted: &FittedModel, panel: &ReturnsPanel, allow_mismatch: bool) -> Result<()> {
    if !allow_mismatch && !fitted.data_fingerprint.is_empty() && fitted.data_fingerprint != panel.fingerprint() {
        return Err(Error::Snapshot(
            "snapshot was fitted to different data (pass the override flag to use it anyway)".to_string(),
        ));
    }
    Ok(())
}
