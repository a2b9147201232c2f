//! The five subcommands. Each writes its tables and a `report.json` into the
//! output directory and returns the report; failures of asserted checks are
//! reported through [`RunReport::pass`].

use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortwave::dno_family::{adjoint_defect, flat_multipliers, DnoError, DnoFamily, Which};
use vortwave::evolution::{
    linear_dispersion, linearized_mode_jacobian, measure_mode_frequency, EvolutionError, Evolver, RunStatus,
    SurfaceState, PROJECTION_TOL,
};
use vortwave::paradiff::{
    default_delta, h_symbol, lambda_symbol, operator_matrix, paralin_system_residuals, paralinearize_g, symmetrizer,
    symmetrizer_defects, CutoffParams, ParadiffError,
};
use vortwave::{PeriodicGrid, SpectralField};

use crate::config::{RunConfig, Setup};
use crate::report::{Check, OutDir, RunReport, SeriesRow};
use crate::CliError;

/// Options shared by all subcommands.
pub struct Context<'a> {
    pub config: RunConfig,
    /// Directory against which relative input paths resolve.
    pub base_dir: &'a Path,
    pub out: &'a Path,
    pub binary: bool,
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Invalid { message: message.into() }
}

fn dno_err(e: DnoError) -> CliError {
    match e {
        DnoError::BadParam { .. } | DnoError::Straightening(_) | DnoError::Grid(_) => invalid(e.to_string()),
        DnoError::Bvp(_) => CliError::Solver { message: e.to_string() },
    }
}

fn evo_err(e: EvolutionError) -> CliError {
    match e {
        EvolutionError::Dno(d) => dno_err(d),
        EvolutionError::CflViolation { .. }
        | EvolutionError::BadStep { .. }
        | EvolutionError::NoSurfaceTension { .. }
        | EvolutionError::ZeroWavenumber
        | EvolutionError::NonZeroMean { .. }
        | EvolutionError::NotConnected { .. }
        | EvolutionError::HamiltonianUndefined => invalid(e.to_string()),
        EvolutionError::NonFinite { .. } => CliError::Solver { message: e.to_string() },
        EvolutionError::Paradiff(p) => para_err(*p),
    }
}

fn para_err(e: ParadiffError) -> CliError {
    match e {
        ParadiffError::Dno(d) => dno_err(d),
        ParadiffError::Evolution(ev) => evo_err(*ev),
        other => invalid(other.to_string()),
    }
}

fn evolver(setup: &Setup, cfg: &RunConfig) -> Result<Evolver, CliError> {
    let mut ev = Evolver::new(setup.bath.clone(), setup.params, setup.settings).map_err(evo_err)?;
    ev.dealias = cfg.integrator.dealias.then_some(2.0 / 3.0);
    ev.cfl_safety = cfg.integrator.cfl_safety;
    Ok(ev)
}

fn finish(ctx: &Context, out: &mut OutDir, mut report: RunReport, start: Instant) -> Result<RunReport, CliError> {
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.finalize();
    out.write_report(&mut report)?;
    Ok(report).map(|r| {
        log::info!("{}: {} checks, {} failed, outputs in {}", r.command, r.checks.len(), r.failed(), ctx.out.display());
        r
    })
}

/// Integrate, write the time series and snapshots, check conservation.
pub fn simulate(ctx: &Context) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let setup = cfg.setup(ctx.base_dir)?;
    let ev = evolver(&setup, cfg)?;
    let s0 = SurfaceState::new(0.0, setup.eta.clone(), setup.psi.clone());
    let i = cfg.integrator;
    let traj = ev.run(&s0, i.dt, i.t_end, i.sample_every).map_err(evo_err)?;
    let mut out = OutDir::create(ctx.out)?;
    let mut report = RunReport::new("simulate", cfg);
    out.write_series("timeseries.csv", &traj.series)?;
    for (idx, state) in traj.samples.iter().enumerate() {
        out.write_snapshot(&format!("snapshot_{idx:05}.csv"), state)?;
        if ctx.binary {
            out.write_snapshot_binary(&format!("snapshot_{idx:05}.bin"), state)?;
        }
    }
    report.series = traj.series.iter().map(SeriesRow::from).collect();
    report.push(Check::at_most("mass_drift", traj.mass_drift(), cfg.tolerances.mass));
    report.push(Check::at_most("mean_projection", traj.max_projection, PROJECTION_TOL));
    if setup.bath.is_flat() {
        report.push(Check::at_most("hamiltonian_relative_drift", traj.hamiltonian_drift(), cfg.tolerances.hamiltonian));
    } else {
        report.notes.push("Hamiltonian not defined for a non-flat bottom; column is NaN".into());
    }
    let truncation = match &traj.status {
        RunStatus::Completed => None,
        RunStatus::Truncated { error } => {
            report.notes.push(format!("run truncated: {error}"));
            report.push(Check::at_least("final_time", traj.last().t, i.t_end));
            Some(error.clone())
        }
    };
    if cfg.parity.reversibility_check && truncation.is_none() {
        let beta = setup.bath.beta();
        let asym = (&beta.reflect() - beta).max_abs();
        if asym > 1e-14 * beta.max_abs().max(1.0) {
            return Err(invalid(format!("reversibility check needs an even bottom (asymmetry {asym:e})")));
        }
        let mut back = traj.last().reverse();
        back.t = 0.0;
        let again = ev.run(&back, i.dt, i.t_end, usize::MAX).map_err(evo_err)?;
        let target = s0.reverse();
        let scale = target.eta.max_abs().max(target.psi.max_abs()).max(f64::MIN_POSITIVE);
        let err = if again.completed() { again.last().distance(&target) / scale } else { f64::INFINITY };
        report.push(Check::at_most("reversibility_error", err, cfg.tolerances.reversibility));
    }
    let report = finish(ctx, &mut out, report, start)?;
    match truncation {
        Some(EvolutionError::NonFinite { t }) => Err(CliError::Solver { message: format!("non-finite state at t={t}") }),
        Some(EvolutionError::Dno(DnoError::Bvp(e))) => Err(CliError::Solver { message: e.to_string() }),
        _ => Ok(report),
    }
}

fn random_field(grid: &PeriodicGrid, rng: &mut ChaCha8Rng, kmax: usize) -> SpectralField {
    let modes: Vec<(f64, f64, f64)> =
        (0..=kmax).map(|k| (k as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * std::f64::consts::PI))).collect();
    SpectralField::from_fn(grid, move |x| modes.iter().map(|(k, a, p)| a * (k * x + p).cos()).sum())
}

/// Adjoint identities at the configured geometry (and closed forms on the
/// flat state).
pub fn dno_check(ctx: &Context) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let setup = cfg.setup(ctx.base_dir)?;
    let fam = DnoFamily::new(&setup.eta, &setup.bath, setup.settings).map_err(dno_err)?;
    let mut report = RunReport::new("dno-check", cfg);
    let tol = cfg.tolerances;
    report.push(Check::at_most("condition_estimate", fam.system().condition_estimate(), tol.cond_max));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kmax = (setup.grid.n() / 4).max(1);
    let fields: Vec<SpectralField> = (0..4).map(|_| random_field(&setup.grid, &mut rng, kmax)).collect();
    let d = adjoint_defect(&fam, (&fields[0], &fields[1]), (&fields[2], &fields[3])).map_err(dno_err)?;
    let scale = d.scale.max(f64::MIN_POSITIVE);
    report.push(Check::at_most("adjoint_dn", d.dn / scale, tol.adjoint));
    report.push(Check::at_most("adjoint_nd", d.nd / scale, tol.adjoint));
    report.push(Check::at_most("adjoint_nn_dd", d.nn_dd / scale, tol.adjoint));
    let mut rows = Vec::new();
    if setup.eta.max_abs() == 0.0 && setup.bath.is_flat() {
        let mult = flat_multipliers(setup.params.h);
        let mut worst: f64 = 0.0;
        for k in 0..=(setup.grid.n() / 3) as i64 {
            let input = SpectralField::from_fn(&setup.grid, |x| (k as f64 * x).cos());
            let mut row = vec![k as f64];
            for (which, sym) in [
                (Which::DN, mult.dn(k as f64)),
                (Which::NN, mult.nn(k as f64)),
                (Which::DD, mult.dd(k as f64)),
                (Which::ND, mult.nd(k as f64)),
            ] {
                let out = fam.probe(which, &input).map_err(dno_err)?.output;
                let err = (&out - &input.scale(sym)).max_abs() / sym.abs().max(f64::MIN_POSITIVE);
                let err = if sym == 0.0 { out.max_abs() } else { err };
                // cos(kx) amplitude from the e^{ikx} coefficient
                row.push(out.coeff(k).re * if k == 0 { 1.0 } else { 2.0 });
                row.push(sym);
                worst = worst.max(err);
            }
            rows.push(row);
        }
        report.push(Check::at_most("flat_multiplier_relative_error", worst, tol.multiplier));
    }
    let mut out = OutDir::create(ctx.out)?;
    if !rows.is_empty() {
        out.write_table(
            "flat_multipliers.csv",
            &["k", "dn", "dn_exact", "nn", "nn_exact", "dd", "dd_exact", "nd", "nd_exact"],
            &rows,
        )?;
    }
    finish(ctx, &mut out, report, start)
}

/// Remainder smoothing of the paralinearization, symmetrizer defects and
/// residuals of the paralinearized system.
pub fn paralin_check(ctx: &Context) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let pc = &cfg.paralin;
    let setup = cfg.setup(ctx.base_dir)?;
    let n = setup.grid.n();
    if pc.probes.len() < 2 || pc.probes.windows(2).any(|w| w[1] <= w[0]) || pc.probes.iter().any(|&k| k == 0 || k > n / 3) {
        return Err(invalid(format!("paralin.probes must be ≥ 2 increasing values in 1..={}", n / 3)));
    }
    let cutoff = CutoffParams::new(pc.eps1, pc.eps2).map_err(para_err)?;
    let delta = pc.delta.unwrap_or_else(|| default_delta(&setup.params));
    let fam = DnoFamily::new(&setup.eta, &setup.bath, setup.settings).map_err(dno_err)?;
    let sym_parts = if setup.params.kappa > 0.0 {
        let sym = symmetrizer(&setup.eta, delta, &setup.params).map_err(para_err)?;
        let lambda = lambda_symbol(&setup.eta, delta, &setup.params).map_err(para_err)?;
        let theta_matrix = operator_matrix(&sym.theta, &cutoff);
        Some((sym, lambda, h_symbol(&setup.eta), theta_matrix))
    } else {
        None
    };
    let mut rows = Vec::new();
    for &k in &pc.probes {
        let psi = SpectralField::from_fn(&setup.grid, |x| (k as f64 * x).cos());
        let pl = paralinearize_g(&fam, &setup.params, &psi, delta, &cutoff).map_err(para_err)?;
        let base = psi.sobolev_norm(pc.s);
        let mut row = vec![k as f64, pl.remainder.sobolev_norm(pc.s + 0.5) / base, pl.g.sobolev_norm(pc.s + 0.5) / base];
        match &sym_parts {
            Some((sym, lambda, h, tm)) => {
                row.extend(symmetrizer_defects(sym, lambda, h, setup.params.kappa, tm, &psi, &cutoff));
            }
            None => row.extend([f64::NAN; 3]),
        }
        rows.push(row);
    }
    let mut report = RunReport::new("paralin-check", cfg);
    let r0 = rows[0][1];
    let r_growth = rows.iter().map(|r| r[1] / r0).fold(0.0, f64::max);
    report.push(Check::at_most("remainder_ratio_growth", r_growth, cfg.tolerances.paralin_factor));
    let (first, last) = (&rows[0], rows.last().expect("≥ 2 probes"));
    let expected = (last[0] / first[0]).powf(1.5);
    report.push(Check::at_least("g_ratio_growth", last[2] / first[2], cfg.tolerances.paralin_growth_fraction * expected));
    if sym_parts.is_some() {
        for (i, name) in ["p_lambda_vs_theta_q", "q_h_vs_theta_p", "theta_selfadjoint"].iter().enumerate() {
            report.push(Check::at_most(format!("symmetrizer_{name}_decay"), last[3 + i] / first[3 + i], 1.0));
        }
        let ev = evolver(&setup, cfg)?;
        let state = SurfaceState::new(0.0, setup.eta.clone(), setup.psi.clone());
        let res = paralin_system_residuals(&ev, &state, delta, &cutoff, 1e-4).map_err(para_err)?;
        report.notes.push(format!(
            "system residual L2 norms: f {:.3e}, g {:.3e}, f_sym {:.3e}, g_sym {:.3e}",
            res.f.l2_norm(),
            res.g.l2_norm(),
            res.f_sym.l2_norm(),
            res.g_sym.l2_norm()
        ));
    } else {
        report.notes.push("kappa = 0: symmetrizer not defined, defects skipped".into());
    }
    let mut out = OutDir::create(ctx.out)?;
    out.write_table(
        "paralin.csv",
        &["N", "remainder_ratio", "g_ratio", "defect_p_lambda", "defect_q_h", "defect_theta_adjoint"],
        &rows,
    )?;
    finish(ctx, &mut out, report, start)
}

/// Eigenvalue magnitudes of the per-mode linearization, sorted.
fn oracle_frequencies(ev: &Evolver, grid: &PeriodicGrid, k: i64) -> Result<[f64; 2], CliError> {
    let j = linearized_mode_jacobian(ev, grid, k).map_err(evo_err)?;
    let eig = Matrix4::from_fn(|r, c| j[r][c]).complex_eigenvalues();
    let mut mags: Vec<f64> = eig.iter().map(|z| z.im.abs()).collect();
    mags.sort_by(f64::total_cmp);
    // conjugate pairs: average the two copies of each magnitude
    Ok([0.5 * (mags[0] + mags[1]), 0.5 * (mags[2] + mags[3])])
}

/// Table of `ω±(k)` against the eigen-oracle and, optionally, measurements.
pub fn dispersion(ctx: &Context) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let dc = &cfg.dispersion;
    let setup = cfg.setup(ctx.base_dir)?;
    let n = setup.grid.n() as i64;
    if dc.k.is_empty() || dc.k.iter().any(|&k| k == 0 || k.abs() >= n / 2) {
        return Err(invalid(format!("dispersion.k must be nonzero with |k| < {}", n / 2)));
    }
    if !setup.bath.is_flat() {
        return Err(invalid("dispersion needs a flat bottom"));
    }
    let gammas = if dc.gammas.is_empty() { vec![setup.params.gamma] } else { dc.gammas.clone() };
    let mut rows = Vec::new();
    let (mut worst_oracle, mut worst_measured): (f64, f64) = (0.0, 0.0);
    for &gamma in &gammas {
        let mut s = setup.clone();
        s.params.gamma = gamma;
        let ev = evolver(&s, cfg)?;
        for &k in &dc.k {
            let (wp, wm) = linear_dispersion(k, &s.params).map_err(evo_err)?;
            let oracle = oracle_frequencies(&ev, &s.grid, k)?;
            let mut formula = [wp.abs(), wm.abs()];
            formula.sort_by(f64::total_cmp);
            let err = (0..2).map(|i| (oracle[i] - formula[i]).abs() / formula[i]).fold(0.0, f64::max);
            worst_oracle = worst_oracle.max(err);
            let (measured, merr) = if dc.measure {
                let w = measure_mode_frequency(&ev, &s.grid, k, dc.amplitude, dc.steps_per_period, dc.periods)
                    .map_err(evo_err)?;
                let e = (w - wp).abs() / wp.abs();
                worst_measured = worst_measured.max(e);
                (w, e)
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(vec![k as f64, gamma, wp, wm, oracle[0], oracle[1], err, measured, merr]);
        }
    }
    let mut report = RunReport::new("dispersion", cfg);
    report.push(Check::at_most("formula_vs_eigen_oracle", worst_oracle, cfg.tolerances.dispersion));
    if dc.measure {
        report.push(Check::at_most("measured_vs_formula", worst_measured, cfg.tolerances.dispersion));
    }
    let mut out = OutDir::create(ctx.out)?;
    out.write_table(
        "dispersion.csv",
        &["k", "gamma", "omega_plus", "omega_minus", "oracle_low", "oracle_high", "oracle_rel_err", "measured", "measured_rel_err"],
        &rows,
    )?;
    finish(ctx, &mut out, report, start)
}

/// Self-convergence of `G(η,β,γ)ψ` under grid refinement.
pub fn convergence(ctx: &Context) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let levels = &cfg.convergence.levels;
    if !cfg.modes_only() {
        return Err(invalid("convergence needs mode-list initial data (files fix the grid)"));
    }
    if levels.len() < 2 || levels.windows(2).any(|w| w[1][0] <= w[0][0] || w[1][1] < w[0][1]) {
        return Err(invalid("convergence.levels must hold ≥ 2 levels increasing in n and non-decreasing in m"));
    }
    let gamma = cfg.params.gamma;
    let mut outputs = Vec::new();
    for &[n, m] in levels {
        let setup = cfg.setup_on(n, m, ctx.base_dir)?;
        let fam = DnoFamily::new(&setup.eta, &setup.bath, setup.settings).map_err(dno_err)?;
        outputs.push(fam.g_full(gamma, &setup.psi).map_err(dno_err)?);
    }
    let fine = outputs.last().expect("≥ 2 levels").clone();
    let fine_grid = fine.grid().clone();
    let diffs: Vec<f64> = outputs[..outputs.len() - 1].iter().map(|g| (&g.resample(&fine_grid) - &fine).max_abs()).collect();
    let floor = cfg.tolerances.convergence_floor;
    let mut rows = Vec::new();
    let mut min_factor = f64::INFINITY;
    for (i, d) in diffs.iter().enumerate() {
        let factor = if i == 0 { f64::NAN } else { diffs[i - 1] / d };
        if i > 0 && *d > floor {
            min_factor = min_factor.min(factor);
        }
        rows.push(vec![levels[i][0] as f64, levels[i][1] as f64, *d, factor]);
    }
    let mut report = RunReport::new("convergence", cfg);
    if min_factor.is_infinite() {
        report.notes.push("all differences at round-off; no refinement factor asserted".into());
    }
    report.push(Check::at_least("min_refinement_factor", min_factor, cfg.tolerances.convergence_factor));
    let mut out = OutDir::create(ctx.out)?;
    out.write_table("convergence.csv", &["n", "m", "diff_to_finest", "factor"], &rows)?;
    finish(ctx, &mut out, report, start)
}
