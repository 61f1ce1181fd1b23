//! Configuration files and run outputs.
//!
//! A config is a strict JSON object; unknown keys are rejected and every
//! error names the offending JSON pointer. Fields and defaults:
//!
//! | key | default | |
//! |---|---|---|
//! | `theta` | required | contact angle in `(0, π/2)` |
//! | `n` | required | surface dimension, 1 or 2 |
//! | `grid.n_rho` | required | radial nodes, at least 8 |
//! | `grid.n_phi` | `2·n_rho` (`n = 2`), 1 (`n = 1`) | azimuthal nodes, even, at least 8 |
//! | `phi` | required | `{"kind":"power","p":…}` or `{"kind":"expr","src":…}` |
//! | `f` | required | expression in `x1 … x{n+1}`, `theta` |
//! | `h0.scale`, `h0.amplitude`, `h0.mode` | 1, 0, none | `h0 = scale·ℓ·(1 + amplitude·mode)` |
//! | `t_max` | 10 | horizon |
//! | `tol_residual` | 1e-6 | stationary stopping tolerance |
//! | `dt_init`, `dt_min`, `dt_max` | 1e-3, 1e-10, 0.5 | |
//! | `safety`, `step_tol` | 0.9, 1e-6 | step acceptance: error ≤ safety·step_tol |
//! | `max_steps` | none | accepted-step cap (status horizon) |
//! | `monitors` | true | a priori bound monitors |
//! | `seed` | 0 | seed for `h0.mode = "random"` |
//! | `barrier.s_lo`, `barrier.s_hi`, `barrier.samples` | 1e-3, 1e3, 16 | barrier check bands |
//! | `output.dir` | `out` | overridden by `--out` |
//! | `output.cadence` | 1 | a `timeseries.csv` row every this many steps |
//! | `output.snapshot_every` | 0 | field snapshot cadence in steps (0: final only) |
//! | `output.mesh` | true | `mesh_<k>.obj` next to each snapshot (`n = 2`) |

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::curvature;
use crate::diagnostics::{DiagnosticsRow, MonitorBaseline, MonitorRecord};
use crate::expr::{self, ParseError};
use crate::flow::{
    BarrierSpec, FlowConfig, FlowError, InitialSpec, PhiSpec, RejectReason, RunReport, Snapshot,
};
use crate::grid::{CapGrid, MIN_AZIMUTHAL_NODES, MIN_RADIAL_NODES};
use crate::orlicz::ConditionReport;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("config {pointer}: {message}")]
    Invalid { pointer: String, message: String },
    #[error("config {pointer}: {source}")]
    Expression {
        pointer: String,
        #[source]
        source: ParseError,
    },
}

impl ConfigError {
    pub fn pointer(&self) -> Option<&str> {
        match self {
            ConfigError::Read { .. } => None,
            ConfigError::Schema { pointer, .. }
            | ConfigError::Invalid { pointer, .. }
            | ConfigError::Expression { pointer, .. } => Some(pointer),
        }
    }
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_rho: usize,
    #[serde(default)]
    pub n_phi: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub cadence: usize,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "yes")]
    pub mesh: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            cadence: 1,
            snapshot_every: 0,
            mesh: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    theta: f64,
    n: usize,
    grid: GridSpec,
    phi: PhiSpec,
    f: String,
    #[serde(default)]
    h0: InitialSpec,
    t_max: Option<f64>,
    tol_residual: Option<f64>,
    dt_init: Option<f64>,
    dt_min: Option<f64>,
    dt_max: Option<f64>,
    safety: Option<f64>,
    step_tol: Option<f64>,
    max_steps: Option<usize>,
    monitors: Option<bool>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    barrier: BarrierSpec,
    #[serde(default)]
    output: OutputSpec,
}

/// A validated configuration together with its source text.
#[derive(Debug, Clone)]
pub struct Config {
    pub flow: FlowConfig,
    pub output: OutputSpec,
    source: String,
}

impl Config {
    /// The input text exactly as read (surrounding whitespace removed).
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.flow.seed = seed;
        self
    }
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn invalid(pointer: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

/// Parses and validates config text; no numerics run here beyond parsing
/// the expressions.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Schema {
            pointer: to_pointer(&path),
            message: e.into_inner().to_string(),
        }
    })?;
    de.end().map_err(|e| ConfigError::Schema {
        pointer: String::new(),
        message: e.to_string(),
    })?;

    if !(raw.theta > 0.0 && raw.theta < FRAC_PI_2) {
        return Err(invalid(
            "/theta",
            format!("must lie in (0, π/2), got {}", raw.theta),
        ));
    }
    if raw.n != 1 && raw.n != 2 {
        return Err(invalid("/n", format!("must be 1 or 2, got {}", raw.n)));
    }
    if raw.grid.n_rho < MIN_RADIAL_NODES {
        return Err(invalid(
            "/grid/n_rho",
            format!(
                "must be at least {MIN_RADIAL_NODES}, got {}",
                raw.grid.n_rho
            ),
        ));
    }
    let n_phi = match (raw.n, raw.grid.n_phi) {
        (1, None | Some(1)) => 1,
        (1, Some(k)) => {
            return Err(invalid(
                "/grid/n_phi",
                format!("must be 1 when n = 1, got {k}"),
            ))
        }
        (_, None) => 2 * raw.grid.n_rho,
        (_, Some(k)) if k < MIN_AZIMUTHAL_NODES || k % 2 == 1 => {
            return Err(invalid(
                "/grid/n_phi",
                format!("must be even and at least {MIN_AZIMUTHAL_NODES}, got {k}"),
            ))
        }
        (_, Some(k)) => k,
    };

    let coords: Vec<String> = (1..=raw.n + 1).map(|m| format!("x{m}")).collect();
    let check_vars = |pointer: &str, src: &str, extra: &[&str]| -> Result<(), ConfigError> {
        let e = expr::parse(src).map_err(|source| ConfigError::Expression {
            pointer: pointer.to_string(),
            source,
        })?;
        for v in e.variables() {
            if !(coords.contains(&v) || v == "theta" || extra.contains(&v.as_str())) {
                return Err(invalid(pointer, format!("unknown variable `{v}`")));
            }
        }
        Ok(())
    };
    check_vars("/f", &raw.f, &[])?;
    match &raw.phi {
        PhiSpec::Power { p } => {
            if !p.is_finite() || *p == 0.0 {
                return Err(invalid(
                    "/phi/p",
                    format!("must be finite and non-zero, got {p}"),
                ));
            }
        }
        PhiSpec::Expr { src } => check_vars("/phi/src", src, &["s"])?,
    }
    if let Some(mode) = raw.h0.mode.as_deref().filter(|m| *m != "random") {
        check_vars("/h0/mode", mode, &[])?;
    }
    if raw.output.cadence == 0 {
        return Err(invalid("/output/cadence", "must be at least 1"));
    }

    let mut flow = FlowConfig::new(raw.theta, raw.n, raw.grid.n_rho, n_phi, raw.phi, &raw.f);
    flow.h0 = raw.h0;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut flow.t_max, raw.t_max);
    set(&mut flow.tol_residual, raw.tol_residual);
    set(&mut flow.dt_init, raw.dt_init);
    set(&mut flow.dt_min, raw.dt_min);
    set(&mut flow.dt_max, raw.dt_max);
    set(&mut flow.safety, raw.safety);
    set(&mut flow.step_tol, raw.step_tol);
    flow.max_steps = raw.max_steps;
    if let Some(m) = raw.monitors {
        flow.monitors = m;
    }
    flow.seed = raw.seed;
    flow.barrier = raw.barrier;
    flow.cadence = raw.output.cadence;
    flow.snapshot_every = raw.output.snapshot_every;
    flow.validate().map_err(|e| match e {
        FlowError::InvalidField { field, message } => {
            invalid(&format!("/{}", field.replace('.', "/")), message)
        }
        other => invalid("", other.to_string()),
    })?;

    Ok(Config {
        flow,
        output: raw.output,
        source: text.trim().to_string(),
    })
}

/// `a.b[2].c` to `/a/b/2/c`.
fn to_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        for (m, piece) in part.split('[').enumerate() {
            let piece = piece.trim_end_matches(']');
            if m == 0 && piece.is_empty() {
                continue;
            }
            out.push('/');
            out.push_str(piece);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub rho: f64,
    pub phi_angle: f64,
    pub h: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub residual: f64,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_timeseries(path: &Path, rows: &[DiagnosticsRow]) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_timeseries(path: &Path) -> Result<Vec<DiagnosticsRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .map(|row| row.map_err(csv_err(path)))
        .collect()
}

pub fn write_snapshot(path: &Path, grid: &CapGrid, snap: &Snapshot) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (i, node) in grid.nodes().iter().enumerate() {
        w.serialize(SnapshotRow {
            rho: node.rho,
            phi_angle: node.phi,
            h: snap.h.values()[i],
            k: snap.gauss_k.values()[i],
            residual: snap.residual.values()[i],
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_snapshot(path: &Path) -> Result<Vec<SnapshotRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .map(|row| row.map_err(csv_err(path)))
        .collect()
}

/// `h` from snapshot rows, after checking they sit on the nodes of `grid`.
pub fn snapshot_field(
    path: &Path,
    rows: &[SnapshotRow],
    grid: &CapGrid,
) -> Result<Vec<f64>, OutputError> {
    let fail = |message: String| OutputError::Format {
        path: path.to_path_buf(),
        message,
    };
    if rows.len() != grid.len() {
        return Err(fail(format!(
            "{} rows, grid has {} nodes",
            rows.len(),
            grid.len()
        )));
    }
    for (i, (row, node)) in rows.iter().zip(grid.nodes()).enumerate() {
        if (row.rho - node.rho).abs() > 1e-9 || (row.phi_angle - node.phi).abs() > 1e-9 {
            return Err(fail(format!(
                "row {i} at ({}, {}) does not match node ({}, {})",
                row.rho, row.phi_angle, node.rho, node.phi
            )));
        }
    }
    Ok(rows.iter().map(|r| r.h).collect())
}

/// Componentwise minimum over the recorded monitor slacks.
fn worst_monitor(records: &[MonitorRecord]) -> Option<MonitorRecord> {
    records.iter().copied().reduce(|a, b| MonitorRecord {
        lower_u_slack: a.lower_u_slack.min(b.lower_u_slack),
        upper_u_slack: a.upper_u_slack.min(b.upper_u_slack),
        grad_slack: a.grad_slack.min(b.grad_slack),
        band_slack: a.band_slack.min(b.band_slack),
        min_radius: a.min_radius.min(b.min_radius),
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    status: &'a str,
    t_final: f64,
    steps: usize,
    rejects: usize,
    reject_reasons: &'a BTreeMap<RejectReason, usize>,
    small_j_increases: usize,
    residual_inf: f64,
    residual_l2: f64,
    tol_residual: f64,
    wall_time: f64,
    breakdown: Option<&'a str>,
    warnings: &'a [String],
    condition: &'a ConditionReport,
    monitor_baseline: &'a MonitorBaseline,
    monitors_hold: bool,
    worst_monitor: Option<MonitorRecord>,
    files: Vec<String>,
    config: &'a RawValue,
}

/// Writes `timeseries.csv`, `snap_<k>.csv` (and `mesh_<k>.obj` for `n = 2`
/// when enabled) and `report.json` into `dir`. Returns the files written.
pub fn emit_outputs(
    report: &RunReport,
    cfg: &Config,
    grid: &CapGrid,
    dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();

    let ts = dir.join("timeseries.csv");
    write_timeseries(&ts, &report.rows)?;
    files.push(ts);

    for (k, snap) in report.snapshots.iter().enumerate() {
        let path = dir.join(format!("snap_{k}.csv"));
        write_snapshot(&path, grid, snap)?;
        files.push(path);
        if cfg.output.mesh && grid.dim() == 2 {
            let path = dir.join(format!("mesh_{k}.obj"));
            let mesh = curvature::embed(grid, &snap.h).map_err(|e| OutputError::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let file = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            mesh.write_obj(&mut w).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
            files.push(path);
        }
    }

    let path = dir.join("report.json");
    let config =
        RawValue::from_string(cfg.source().to_string()).map_err(|source| OutputError::Json {
            path: path.clone(),
            source,
        })?;
    let mut names: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.push("report.json".into());
    let body = ReportFile {
        status: report.status.as_str(),
        t_final: report.t_final,
        steps: report.steps,
        rejects: report.rejects,
        reject_reasons: &report.reject_reasons,
        small_j_increases: report.small_j_increases,
        residual_inf: report.residual_inf,
        residual_l2: report.residual_l2,
        tol_residual: cfg.flow.tol_residual,
        wall_time: report.wall_time,
        breakdown: report.breakdown.as_deref(),
        warnings: &report.warnings,
        condition: &report.condition,
        monitor_baseline: &report.baseline,
        monitors_hold: report.monitors.iter().all(MonitorRecord::all_hold),
        worst_monitor: worst_monitor(&report.monitors),
        files: names,
        config: &config,
    };
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &body).map_err(|source| OutputError::Json {
        path: path.clone(),
        source,
    })?;
    writeln!(w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    files.push(path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "theta": 1.0471975511965976, "n": 2, "grid": {"n_rho": 16, "n_phi": 32},
        "phi": {"kind": "power", "p": 3.0}, "f": "1", "h0": {"scale": 1.0}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.flow.t_max, 10.0);
        assert_eq!(c.flow.tol_residual, 1e-6);
        assert_eq!(c.flow.cadence, 1);
        assert!(c.output.mesh);
        assert_eq!(c.source(), MINIMAL.trim());
    }

    #[test]
    fn theta_out_of_range() {
        let e = parse_config(&MINIMAL.replace("1.0471975511965976", "2.0")).unwrap_err();
        assert_eq!(e.pointer(), Some("/theta"));
        assert!(e.to_string().contains("(0, π/2)"), "{e}");
    }

    #[test]
    fn bad_expression_carries_offset() {
        let e = parse_config(&MINIMAL.replace(r#""f": "1""#, r#""f": "1+*2""#)).unwrap_err();
        match e {
            ConfigError::Expression { pointer, source } => {
                assert_eq!(pointer, "/f");
                assert_eq!(source.offset, 2);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_keys_and_types_name_the_path() {
        let e = parse_config(&MINIMAL.replace(r#""n_phi": 32"#, r#""n_phi": 32, "extra": 1"#))
            .unwrap_err();
        assert!(matches!(e, ConfigError::Schema { .. }));
        assert_eq!(e.pointer(), Some("/grid/extra"));
        let e = parse_config(&MINIMAL.replace(r#""p": 3.0"#, r#""p": "three""#)).unwrap_err();
        // internally tagged enums are buffered, so the path stops at the enum
        assert_eq!(e.pointer(), Some("/phi"));
        let e = parse_config(&MINIMAL.replace(r#""f": "1""#, r#""f": "x4""#)).unwrap_err();
        assert_eq!(e.pointer(), Some("/f"));
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(to_pointer("grid.n_rho"), "/grid/n_rho");
        assert_eq!(to_pointer("a[2].b"), "/a/2/b");
        assert_eq!(to_pointer("."), "");
    }
}
