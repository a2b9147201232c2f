//! Run reports and file output.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vortwave::evolution::{Diagnostics, SurfaceState};

use crate::config::RunConfig;
use crate::CliError;

/// One asserted invariant with its measured value.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self { name: name.into(), measured, threshold, relation: "<=", pass: measured <= threshold }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self { name: name.into(), measured, threshold, relation: ">=", pass: measured >= threshold }
    }
}

/// Row of the conserved-quantity series.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct SeriesRow {
    pub t: f64,
    pub mass: f64,
    /// `None` (JSON null) when undefined.
    pub hamiltonian: Option<f64>,
    pub margin_min: f64,
    pub eta_l2: f64,
    pub psi_l2: f64,
    pub psi_mean: f64,
}

impl From<&Diagnostics> for SeriesRow {
    fn from(d: &Diagnostics) -> Self {
        Self {
            t: d.t,
            mass: d.mass,
            hamiltonian: d.hamiltonian.is_finite().then_some(d.hamiltonian),
            margin_min: d.margin_min,
            eta_l2: d.eta_l2,
            psi_l2: d.psi_l2,
            psi_mean: d.psi_mean,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: &'static str,
    pub config: RunConfig,
    pub seed: u64,
    pub wall_time_s: f64,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<SeriesRow>,
    /// Free-form notes (e.g. why a run was truncated).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub outputs: Vec<String>,
    pub pass: bool,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            seed: config.seed,
            wall_time_s: 0.0,
            checks: Vec::new(),
            series: Vec::new(),
            notes: Vec::new(),
            outputs: Vec::new(),
            pass: true,
        }
    }

    pub fn push(&mut self, check: Check) {
        if !check.pass {
            log::warn!("check {} failed: {} {} {}", check.name, check.measured, check.relation, check.threshold);
        }
        self.checks.push(check);
    }

    pub fn finalize(&mut self) {
        self.pass = self.checks.iter().all(|c| c.pass);
    }

    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }
}

/// Output directory that records what it writes.
pub struct OutDir {
    root: PathBuf,
    pub written: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(format!("{other:?}")) },
    }
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    /// CSV with a header row; numbers use the shortest round-trip format.
    pub fn write_table(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(io_err(&path))
    }

    /// `t,mass,hamiltonian_or_nan,margin_min,eta_l2,psi_l2`.
    pub fn write_series(&mut self, name: &str, series: &[Diagnostics]) -> Result<(), CliError> {
        let rows: Vec<Vec<f64>> =
            series.iter().map(|d| vec![d.t, d.mass, d.hamiltonian, d.margin_min, d.eta_l2, d.psi_l2]).collect();
        self.write_table(name, &["t", "mass", "hamiltonian_or_nan", "margin_min", "eta_l2", "psi_l2"], &rows)
    }

    /// `x,eta,psi`.
    pub fn write_snapshot(&mut self, name: &str, state: &SurfaceState) -> Result<(), CliError> {
        let grid = state.eta.grid();
        let rows: Vec<Vec<f64>> =
            (0..grid.n()).map(|j| vec![grid.x(j), state.eta.values()[j], state.psi.values()[j]]).collect();
        self.write_table(name, &["x", "eta", "psi"], &rows)
    }

    /// Little-endian dump: `n: u64`, `t: f64`, then `x`, `eta`, `psi` as `f64`.
    pub fn write_snapshot_binary(&mut self, name: &str, state: &SurfaceState) -> Result<(), CliError> {
        let path = self.path(name);
        let grid = state.eta.grid();
        let n = grid.n();
        let mut buf = Vec::with_capacity(16 + 24 * n);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&state.t.to_le_bytes());
        for v in (0..n).map(|j| grid.x(j)).chain(state.eta.values().iter().copied()).chain(state.psi.values().iter().copied()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, buf).map_err(io_err(&path))
    }

    pub fn write_report(&mut self, report: &mut RunReport) -> Result<(), CliError> {
        let path = self.path("report.json");
        report.outputs = self.written.clone();
        let text = serde_json::to_string_pretty(report)
            .map_err(|e| CliError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        f.write_all(b"\n").map_err(io_err(&path))
    }
}
