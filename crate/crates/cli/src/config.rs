//! JSON run configuration. Unknown fields are rejected everywhere.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vortwave::dno_family::{DiffeoChoice, PhysicalParams, SolverSettings};
use vortwave::elliptic_bvp::BvpConfig;
use vortwave::straightening::BathymetryProfile;
use vortwave::{PeriodicGrid, SpectralField};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub params: ParamsConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub diffeo: DiffeoConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub parity: ParityConfig,
    #[serde(default)]
    pub dispersion: DispersionConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub paralin: ParalinConfig,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub m: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub g: f64,
    pub h: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub h0: f64,
}

impl From<ParamsConfig> for PhysicalParams {
    fn from(p: ParamsConfig) -> Self {
        PhysicalParams { g: p.g, h: p.h, kappa: p.kappa, gamma: p.gamma, h0: p.h0 }
    }
}

/// `amplitude · cos(k x + phase)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub k: i64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Seeded random modes `1..=max_mode` added to `η` (zero mean) and `ψ`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub amplitude: f64,
    pub max_mode: i64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub eta: Vec<Mode>,
    #[serde(default)]
    pub psi: Vec<Mode>,
    #[serde(default)]
    pub beta: Vec<Mode>,
    /// CSV files with a column named `eta`, `psi` or `beta` and `n` rows;
    /// relative paths are resolved against the config file.
    #[serde(default)]
    pub eta_file: Option<PathBuf>,
    #[serde(default)]
    pub psi_file: Option<PathBuf>,
    #[serde(default)]
    pub beta_file: Option<PathBuf>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    pub dealias: bool,
    pub cfl_safety: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 1.0, sample_every: 100, dealias: true, cfl_safety: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Absolute mass drift.
    pub mass: f64,
    /// Relative Hamiltonian drift (flat bottom only).
    pub hamiltonian: f64,
    /// Adjoint defects relative to the input scale.
    pub adjoint: f64,
    /// Relative error of the flat closed-form multipliers.
    pub multiplier: f64,
    /// Relative frequency error.
    pub dispersion: f64,
    /// Relative forward-reflect-forward error.
    pub reversibility: f64,
    /// Minimum error reduction per refinement level.
    pub convergence_factor: f64,
    /// Differences below this are at round-off and not used for factors.
    pub convergence_floor: f64,
    /// Allowed growth of the remainder ratio across the probes.
    pub paralin_factor: f64,
    /// Required fraction of the `(N_last/N_first)^{3/2}` growth of the `G` ratio.
    pub paralin_growth_fraction: f64,
    pub bvp_tol: f64,
    pub cond_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mass: 1e-12,
            hamiltonian: 1e-8,
            adjoint: 1e-12,
            multiplier: 1e-10,
            dispersion: 1e-6,
            reversibility: 1e-6,
            convergence_factor: 5.0,
            convergence_floor: 1e-12,
            paralin_factor: 3.0,
            paralin_growth_fraction: 0.9,
            bvp_tol: 1e-9,
            cond_max: 1e12,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum DiffeoConfig {
    #[default]
    Trivial,
    Regularizing { delta: f64 },
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ParityConfig {
    /// Run the forward-reflect-forward check in `simulate` (needs even `β`).
    pub reversibility_check: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DispersionConfig {
    pub k: Vec<i64>,
    /// Vorticities to tabulate; empty means `params.gamma` only.
    pub gammas: Vec<f64>,
    /// Also measure frequencies from small-amplitude runs.
    pub measure: bool,
    pub amplitude: f64,
    pub steps_per_period: usize,
    pub periods: f64,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        Self { k: (1..=8).collect(), gammas: Vec::new(), measure: false, amplitude: 1e-8, steps_per_period: 200, periods: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    /// `[n, m]` pairs, coarse to fine; the last one is the reference.
    pub levels: Vec<[usize; 2]>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { levels: vec![[8, 8], [16, 12], [32, 16], [64, 24]] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ParalinConfig {
    pub probes: Vec<usize>,
    pub s: f64,
    /// Smoothing depth of λ; `None` uses the default.
    pub delta: Option<f64>,
    pub eps1: f64,
    pub eps2: f64,
}

impl Default for ParalinConfig {
    fn default() -> Self {
        Self { probes: vec![8, 16, 24, 32, 40], s: 3.0, delta: None, eps1: 0.2, eps2: 0.5 }
    }
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Invalid { message: message.into() }
}

/// Parse a config from JSON text.
pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config { path: origin.to_path_buf(), message: e.to_string() })
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text, path)
}

/// Fields built from a validated config.
#[derive(Clone, Debug)]
pub struct Setup {
    pub grid: PeriodicGrid,
    pub params: PhysicalParams,
    pub settings: SolverSettings,
    pub bath: BathymetryProfile,
    pub eta: SpectralField,
    pub psi: SpectralField,
}

impl RunConfig {
    pub fn physical(&self) -> PhysicalParams {
        self.params.into()
    }

    pub fn solver_settings(&self, m: usize) -> SolverSettings {
        let mut s = SolverSettings::new(m);
        s.bvp = BvpConfig { tol: self.tolerances.bvp_tol, cond_max: self.tolerances.cond_max };
        s.diffeo = match self.diffeo {
            DiffeoConfig::Trivial => DiffeoChoice::Trivial,
            DiffeoConfig::Regularizing { delta } => DiffeoChoice::Regularizing { delta },
        };
        s
    }

    /// Checks that do not need the initial data.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.physical();
        p.validate().map_err(|e| invalid(e.to_string()))?;
        PeriodicGrid::new(self.grid.n).map_err(|e| invalid(e.to_string()))?;
        if self.grid.m < 4 {
            return Err(invalid(format!("grid.m = {} is below 4", self.grid.m)));
        }
        let i = &self.integrator;
        if !(i.dt > 0.0 && i.dt.is_finite() && i.t_end >= 0.0 && i.t_end.is_finite() && i.cfl_safety > 0.0) {
            return Err(invalid("integrator needs dt > 0, t_end ≥ 0 and cfl_safety > 0"));
        }
        if let DiffeoConfig::Regularizing { delta } = self.diffeo {
            if !(delta > 0.0) {
                return Err(invalid(format!("diffeo.delta = {delta} must be positive")));
            }
        }
        if let Some(noise) = self.initial.noise {
            if !(noise.amplitude >= 0.0) || noise.max_mode < 1 || noise.max_mode >= (self.grid.n / 2) as i64 {
                return Err(invalid("noise needs amplitude ≥ 0 and 1 ≤ max_mode < n/2"));
            }
        }
        for m in self.initial.eta.iter().chain(&self.initial.psi).chain(&self.initial.beta) {
            if m.k.unsigned_abs() as usize >= self.grid.n / 2 || !m.amplitude.is_finite() || !m.phase.is_finite() {
                return Err(invalid(format!("mode k={} must satisfy |k| < n/2 with finite amplitude", m.k)));
            }
        }
        Ok(())
    }

    /// Whether every initial field is given by modes (usable on any grid).
    pub fn modes_only(&self) -> bool {
        let i = &self.initial;
        i.eta_file.is_none() && i.psi_file.is_none() && i.beta_file.is_none()
    }

    /// Build the grid, bottom and initial fields on an `n`-point grid.
    /// `base_dir` resolves relative file paths.
    pub fn setup_on(&self, n: usize, m: usize, base_dir: &Path) -> Result<Setup, CliError> {
        let grid = PeriodicGrid::new(n).map_err(|e| invalid(e.to_string()))?;
        let params = self.physical();
        let field = |modes: &[Mode], file: &Option<PathBuf>, column: &str| -> Result<SpectralField, CliError> {
            let mut f = modes_field(&grid, modes);
            if let Some(path) = file {
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                f = &f + &read_column(&grid, &path, column)?;
            }
            Ok(f)
        };
        let mut eta = field(&self.initial.eta, &self.initial.eta_file, "eta")?;
        let mut psi = field(&self.initial.psi, &self.initial.psi_file, "psi")?;
        let beta = field(&self.initial.beta, &self.initial.beta_file, "beta")?;
        if let Some(noise) = self.initial.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Mode> {
                (1..=noise.max_mode)
                    .map(|k| Mode {
                        k,
                        amplitude: noise.amplitude * rng.gen_range(-1.0..1.0),
                        phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                    })
                    .collect()
            };
            eta = &eta + &modes_field(&grid, &draw(&mut rng));
            psi = &psi + &modes_field(&grid, &draw(&mut rng));
        }
        let bath = BathymetryProfile::new(beta, params.h, params.h0).map_err(|e| invalid(e.to_string()))?;
        Ok(Setup { grid, params, settings: self.solver_settings(m), bath, eta, psi })
    }

    pub fn setup(&self, base_dir: &Path) -> Result<Setup, CliError> {
        self.setup_on(self.grid.n, self.grid.m, base_dir)
    }
}

fn modes_field(grid: &PeriodicGrid, modes: &[Mode]) -> SpectralField {
    let modes = modes.to_vec();
    SpectralField::from_fn(grid, move |x| modes.iter().map(|m| m.amplitude * (m.k as f64 * x + m.phase).cos()).sum())
}

fn read_column(grid: &PeriodicGrid, path: &Path, column: &str) -> Result<SpectralField, CliError> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => invalid(format!("{}: {other:?}", path.display())),
    };
    let mut reader = csv::Reader::from_path(path).map_err(io)?;
    let headers = reader.headers().map_err(io)?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| invalid(format!("{}: no column named {column}", path.display())))?;
    let mut values = Vec::with_capacity(grid.n());
    for record in reader.records() {
        let record = record.map_err(io)?;
        let cell = record.get(idx).unwrap_or("").trim();
        let v: f64 = cell.parse().map_err(|_| invalid(format!("{}: bad number {cell:?}", path.display())))?;
        values.push(v);
    }
    SpectralField::from_values(grid, values).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"grid": {"n": 16, "m": 12}, "params": {"g": 1, "h": 1, "kappa": 0.1, "gamma": 1, "h0": 0.5}}"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let c = parse_config(MINIMAL, Path::new("x.json")).unwrap();
        assert_eq!(c.integrator, IntegratorConfig::default());
        assert_eq!(c.diffeo, DiffeoConfig::Trivial);
        assert_eq!(c.seed, 0);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace("\"seed\"", "").replace("}}", "}, \"tolerance\": {}}");
        assert!(matches!(parse_config(&text, Path::new("x.json")), Err(CliError::Config { .. })));
        let text = MINIMAL.replace("\"g\": 1", "\"g\": 1, \"gee\": 2");
        assert!(parse_config(&text, Path::new("x.json")).is_err());
    }

    #[test]
    fn diffeo_is_tagged() {
        let text = MINIMAL.replace("}}", "}, \"diffeo\": {\"kind\": \"regularizing\", \"delta\": 0.3}}");
        let c = parse_config(&text, Path::new("x.json")).unwrap();
        assert_eq!(c.diffeo, DiffeoConfig::Regularizing { delta: 0.3 });
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = parse_config(MINIMAL, Path::new("x.json")).unwrap();
        c.grid.n = 15;
        assert!(c.validate().is_err());
        let mut c = parse_config(MINIMAL, Path::new("x.json")).unwrap();
        c.initial.eta.push(Mode { k: 8, amplitude: 0.1, phase: 0.0 });
        assert!(c.validate().is_err());
        let mut c = parse_config(MINIMAL, Path::new("x.json")).unwrap();
        c.params.h = -1.0;
        assert!(matches!(c.validate(), Err(CliError::Invalid { .. })));
    }

    #[test]
    fn noise_is_seeded() {
        let mut c = parse_config(MINIMAL, Path::new("x.json")).unwrap();
        c.initial.noise = Some(NoiseConfig { amplitude: 1e-3, max_mode: 3 });
        let a = c.setup(Path::new(".")).unwrap();
        let b = c.setup(Path::new(".")).unwrap();
        assert_eq!(a.eta.values(), b.eta.values());
        c.seed = 7;
        let d = c.setup(Path::new(".")).unwrap();
        assert_ne!(a.eta.values(), d.eta.values());
    }
}
