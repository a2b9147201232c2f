//! Time evolution of the surface variables `(η, ψ)`:
//!
//! ```text
//! η_t = G(η,β,γ)ψ + γηη_x
//! ψ_t = −½ψ_x² + (G + η_xψ_x)²/(2(1+η_x²)) + γ(ηψ_x + ∂_x^{−1}G) − gη + κ(η_x/√(1+η_x²))_x
//! ```
//!
//! with `G = G(η,β,γ)ψ`, explicit RK4 stepping, conserved-quantity
//! diagnostics, the reversal `S(η,ψ)(x) = (η(−x), −ψ(−x))`, the linear
//! dispersion relation and a mollified right-hand side assembled from the
//! paradifferential factorization.

use num_complex::Complex64;
use thiserror::Error;

use crate::dno_family::{DnoError, DnoFamily, PhysicalParams, SolverSettings};
use crate::grid_spectral::SpectralField;
use crate::paradiff::{
    h_symbol, lambda_symbol, mollifier_apply, paradiff_apply, paraproduct, symmetrizer, CutoffParams, ParadiffError,
    SymbolGrid,
};
use crate::straightening::{BathymetryProfile, StraighteningError};

/// Largest tolerated mean correction of `η` per step.
pub const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("strict connectedness lost at t={t}: gap {gap:e} below {threshold:e} (x={x:.4})")]
    NotConnected { t: f64, x: f64, gap: f64, threshold: f64 },
    #[error("non-finite state at t={t}")]
    NonFinite { t: f64 },
    #[error("time step {dt:e} exceeds the stability limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("invalid time step or horizon (dt={dt}, t_end={t_end})")]
    BadStep { dt: f64, t_end: f64 },
    #[error("evolution needs positive surface tension (kappa={kappa})")]
    NoSurfaceTension { kappa: f64 },
    #[error("the Hamiltonian is only defined for a flat bottom")]
    HamiltonianUndefined,
    #[error("wavenumber must be nonzero")]
    ZeroWavenumber,
    #[error("initial surface has nonzero mean {mean:e}")]
    NonZeroMean { mean: f64 },
    #[error(transparent)]
    Dno(#[from] DnoError),
    #[error(transparent)]
    Paradiff(Box<ParadiffError>),
}

impl From<ParadiffError> for EvolutionError {
    fn from(e: ParadiffError) -> Self {
        EvolutionError::Paradiff(Box::new(e))
    }
}

/// `(η, ψ)` at time `t`.
#[derive(Clone, Debug)]
pub struct SurfaceState {
    pub t: f64,
    pub eta: SpectralField,
    pub psi: SpectralField,
}

impl SurfaceState {
    pub fn new(t: f64, eta: SpectralField, psi: SpectralField) -> Self {
        Self { t, eta, psi }
    }

    pub fn zero(grid: &crate::PeriodicGrid) -> Self {
        Self::new(0.0, SpectralField::zeros(grid), SpectralField::zeros(grid))
    }

    /// `S(η,ψ)(x) = (η(−x), −ψ(−x))`.
    pub fn reverse(&self) -> Self {
        Self::new(self.t, self.eta.reflect(), self.psi.reflect().scale(-1.0))
    }

    /// `∫η dx` by the discrete pairing.
    pub fn mass(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.eta.mean()
    }

    fn axpy(&self, dt: f64, k: &(SpectralField, SpectralField)) -> Self {
        Self::new(self.t + dt, self.eta.axpy(dt, &k.0), self.psi.axpy(dt, &k.1))
    }

    /// `max(‖η − η'‖_∞, ‖ψ − ψ'‖_∞)`.
    pub fn distance(&self, other: &Self) -> f64 {
        (&self.eta - &other.eta).max_abs().max((&self.psi - &other.psi).max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.eta.is_finite() && self.psi.is_finite()
    }
}

pub fn reverse(state: &SurfaceState) -> SurfaceState {
    state.reverse()
}

pub fn mass(state: &SurfaceState) -> f64 {
    state.mass()
}

/// Right-hand side evaluator for fixed bathymetry and parameters.
#[derive(Clone, Debug)]
pub struct Evolver {
    bath: BathymetryProfile,
    /// Same bottom with the margin halved: the flow is accepted while
    /// `h − β + η ≥ h₀/2`.
    run_bath: BathymetryProfile,
    params: PhysicalParams,
    settings: SolverSettings,
    /// 2/3-type dealiasing rule applied after nonlinear products.
    pub dealias: Option<f64>,
    /// Safety factor of the explicit stability bound.
    pub cfl_safety: f64,
}

impl Evolver {
    pub fn new(bath: BathymetryProfile, params: PhysicalParams, settings: SolverSettings) -> Result<Self, EvolutionError> {
        params.validate()?;
        if !(params.kappa > 0.0) {
            return Err(EvolutionError::NoSurfaceTension { kappa: params.kappa });
        }
        let run_bath = BathymetryProfile::new(bath.beta().clone(), bath.depth(), 0.5 * bath.margin())
            .map_err(DnoError::from)?;
        Ok(Self { bath, run_bath, params, settings, dealias: Some(2.0 / 3.0), cfl_safety: 2.0 })
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn bath(&self) -> &BathymetryProfile {
        &self.bath
    }

    pub fn settings(&self) -> SolverSettings {
        self.settings
    }

    /// Operator family at surface `η` (connectedness checked against `h₀/2`).
    pub fn family_at(&self, eta: &SpectralField) -> Result<DnoFamily, DnoError> {
        DnoFamily::new(eta, &self.run_bath, self.settings)
    }

    fn family_checked(&self, state: &SurfaceState) -> Result<DnoFamily, EvolutionError> {
        match self.family_at(&state.eta) {
            Err(DnoError::Straightening(StraighteningError::NotConnected { x, gap, h0, .. })) => {
                Err(EvolutionError::NotConnected { t: state.t, x, gap, threshold: h0 })
            }
            other => Ok(other?),
        }
    }

    fn da(&self, f: SpectralField) -> SpectralField {
        match self.dealias {
            Some(rule) => f.dealias(rule).expect("rule validated at construction"),
            None => f,
        }
    }

    /// `ψ_t` given `G`.
    fn psi_t_from(&self, eta: &SpectralField, psi: &SpectralField, g: &SpectralField) -> SpectralField {
        let (gam, grav, kappa) = (self.params.gamma, self.params.g, self.params.kappa);
        let ex = eta.dx();
        let px = psi.dx();
        let quad = SpectralField::from_values(
            eta.grid(),
            (0..eta.n())
                .map(|j| {
                    let (e, p, gg) = (ex.values()[j], px.values()[j], g.values()[j]);
                    -0.5 * p * p + (gg + e * p).powi(2) / (2.0 * (1.0 + e * e))
                })
                .collect(),
        )
        .expect("grid-sized");
        // only the nonlinear part of the slope is dealiased; its linear part η_x is kept whole
        let slope_nl = ex.map(|e| e / (1.0 + e * e).sqrt() - e);
        let vort = &self.da(eta.mul(&px)) + &g.dx_inv_projected();
        let mut out = self.da(quad);
        out = out.axpy(gam, &vort);
        out = out.axpy(-grav, eta);
        out.axpy(kappa, &(&ex + &self.da(slope_nl)).dx())
    }

    fn eta_t_from(&self, eta: &SpectralField, g: &SpectralField) -> SpectralField {
        // γηη_x = γ(η²/2)_x keeps the mean exactly zero
        g.axpy(0.5 * self.params.gamma, &self.da(eta.mul(eta)).dx())
    }

    /// `(η_t, ψ_t)`.
    pub fn rhs(&self, state: &SurfaceState) -> Result<(SpectralField, SpectralField), EvolutionError> {
        let fam = self.family_checked(state)?;
        let g = fam.g_full(self.params.gamma, &state.psi)?;
        Ok((self.eta_t_from(&state.eta, &g), self.psi_t_from(&state.eta, &state.psi, &g)))
    }

    /// Same right-hand side for a flat bottom, written with `G^{DN}` only.
    pub fn rhs_flat_classical(&self, state: &SurfaceState) -> Result<(SpectralField, SpectralField), EvolutionError> {
        let fam = self.family_checked(state)?;
        let g = fam.g_dn(&state.psi)?;
        Ok((self.eta_t_from(&state.eta, &g), self.psi_t_from(&state.eta, &state.psi, &g)))
    }

    /// Explicit stability limit `safety / max(√κ k³ᐟ², √g k¹ᐟ², |γ|)` at `k = n/2`.
    pub fn stable_dt(&self, n: usize) -> f64 {
        let k = (n / 2) as f64;
        let rate = (self.params.kappa.sqrt() * k.powf(1.5))
            .max(self.params.g.sqrt() * k.sqrt())
            .max(self.params.gamma.abs());
        self.cfl_safety / rate
    }

    /// One classical fourth-order Runge–Kutta step; the mean of `η` is reset
    /// to `mean0` afterwards and the size of the correction returned.
    pub fn step_rk4_projected(&self, s: &SurfaceState, dt: f64, mean0: f64) -> Result<(SurfaceState, f64), EvolutionError> {
        let k1 = self.rhs(s)?;
        let k2 = self.rhs(&s.axpy(0.5 * dt, &k1))?;
        let k3 = self.rhs(&s.axpy(0.5 * dt, &k2))?;
        let k4 = self.rhs(&s.axpy(dt, &k3))?;
        let comb = |a: &SpectralField, b: &SpectralField, c: &SpectralField, d: &SpectralField| {
            let sum = &(a + d) + &(b + c).scale(2.0);
            sum.scale(dt / 6.0)
        };
        let eta = &s.eta + &comb(&k1.0, &k2.0, &k3.0, &k4.0);
        let psi = &s.psi + &comb(&k1.1, &k2.1, &k3.1, &k4.1);
        let drift = eta.mean() - mean0;
        let eta = eta.map(|v| v - drift);
        let next = SurfaceState::new(s.t + dt, eta, psi);
        if !next.is_finite() {
            return Err(EvolutionError::NonFinite { t: next.t });
        }
        Ok((next, drift.abs()))
    }

    pub fn step_rk4(&self, s: &SurfaceState, dt: f64) -> Result<SurfaceState, EvolutionError> {
        Ok(self.step_rk4_projected(s, dt, s.eta.mean())?.0)
    }

    /// `H = ½∫[ψG^{DN}ψ + gη² + γ(−ψ_xη² + (γ/3)η³)] + κ∫√(1+η_x²)` (flat bottom).
    pub fn hamiltonian(&self, state: &SurfaceState) -> Result<f64, EvolutionError> {
        if !self.bath.is_flat() {
            return Err(EvolutionError::HamiltonianUndefined);
        }
        let fam = self.family_checked(state)?;
        let g = fam.g_dn(&state.psi)?;
        Ok(hamiltonian_from(state, &g, &self.params))
    }

    pub fn margin_min(&self, state: &SurfaceState) -> f64 {
        self.bath.min_gap(&state.eta).0
    }

    /// Diagnostics row for a state.
    pub fn diagnostics(&self, state: &SurfaceState) -> Result<Diagnostics, EvolutionError> {
        let hamiltonian = if self.bath.is_flat() { self.hamiltonian(state)? } else { f64::NAN };
        Ok(Diagnostics {
            t: state.t,
            mass: state.mass(),
            hamiltonian,
            margin_min: self.margin_min(state),
            eta_l2: state.eta.l2_norm(),
            psi_l2: state.psi.l2_norm(),
            psi_mean: state.psi.mean(),
        })
    }

    /// Integrate to `t_end` with fixed `dt`, recording diagnostics every
    /// `sample_every` steps (and at the end). Failures during stepping
    /// truncate the trajectory instead of discarding it.
    pub fn run(&self, initial: &SurfaceState, dt: f64, t_end: f64, sample_every: usize) -> Result<Trajectory, EvolutionError> {
        if !(dt > 0.0 && t_end >= initial.t && dt.is_finite() && t_end.is_finite()) {
            return Err(EvolutionError::BadStep { dt, t_end });
        }
        let limit = self.stable_dt(initial.eta.n());
        if dt > limit {
            return Err(EvolutionError::CflViolation { dt, limit });
        }
        self.bath.check_connected(&initial.eta).map_err(|e| match e {
            StraighteningError::NotConnected { x, gap, h0, .. } => {
                EvolutionError::NotConnected { t: initial.t, x, gap, threshold: h0 }
            }
            other => EvolutionError::Dno(other.into()),
        })?;
        let steps = ((t_end - initial.t) / dt).round() as usize;
        let every = sample_every.max(1);
        let mean0 = initial.eta.mean();
        let mut traj = Trajectory {
            dt,
            steps_taken: 0,
            cfl_limit: limit,
            max_projection: 0.0,
            samples: vec![initial.clone()],
            series: vec![self.diagnostics(initial)?],
            status: RunStatus::Completed,
        };
        let mut state = initial.clone();
        for step in 1..=steps {
            let result = self
                .step_rk4_projected(&state, dt, mean0)
                .and_then(|(next, proj)| Ok((self.diagnostics(&next)?, next, proj)));
            match result {
                Ok((diag, next, proj)) => {
                    traj.max_projection = traj.max_projection.max(proj);
                    if proj > PROJECTION_TOL {
                        log::warn!("mean correction {proj:e} at t={:.6}", next.t);
                    }
                    state = next;
                    traj.steps_taken = step;
                    if step % every == 0 || step == steps {
                        traj.samples.push(state.clone());
                        traj.series.push(diag);
                    }
                }
                Err(e) => {
                    log::warn!("run truncated at t={:.6}: {e}", state.t);
                    if traj.samples.last().map(|s| s.t) != Some(state.t) {
                        traj.series.push(self.diagnostics(&state)?);
                        traj.samples.push(state.clone());
                    }
                    traj.status = RunStatus::Truncated { error: e };
                    break;
                }
            }
        }
        Ok(traj)
    }

    /// Mollified right-hand side `−T_{V−γη}∂_xJ_εU − L_εU + f(J_εU)`, where
    /// `L = [[1,0],[T_B,1]]·[[0,−T_λ],[κT_h,0]]·[[1,0],[−T_B,1]]` and `L_ε`
    /// inserts `diag(T_P J_ε T_p, T_{1/q} J_ε T_q)` before the last factor.
    /// With `ε = 0` and no insertion this reproduces [`Evolver::rhs`] exactly
    /// (see [`Evolver::factored_rhs`]).
    pub fn mollified_rhs(
        &self,
        eps: f64,
        state: &SurfaceState,
        delta: f64,
        cutoff: &CutoffParams,
    ) -> Result<(SpectralField, SpectralField), EvolutionError> {
        let j = |f: &SpectralField| mollifier_apply(eps, f);
        let mstate = SurfaceState::new(state.t, j(&state.eta)?, j(&state.psi)?);
        let ops = self.paradiff_ops(state, delta, cutoff)?;
        let f = self.nonlinear_part(&mstate, delta, cutoff)?;
        let t = |a: &SymbolGrid, u: &SpectralField| paradiff_apply(a, u, cutoff);
        // L_ε U
        let omega = &state.psi - &paraproduct(&ops.b, &state.eta, cutoff);
        let c1 = t(&ops.p_inv, &j(&t(&ops.p, &state.eta))?);
        let c2 = t(&ops.q_inv, &j(&t(&ops.q, &omega))?);
        let l1 = t(&ops.lambda, &c2).scale(-1.0);
        let l2 = t(&ops.h, &c1).scale(self.params.kappa);
        let lu = (l1.clone(), &l2 + &paraproduct(&ops.b, &l1, cutoff));
        let adv = |f: &SpectralField| -> Result<SpectralField, EvolutionError> {
            Ok(paraproduct(&ops.transport, &j(f)?.dx(), cutoff))
        };
        let eta_t = &(&f.0 - &adv(&state.eta)?) - &lu.0;
        let psi_t = &(&f.1 - &adv(&state.psi)?) - &lu.1;
        Ok((eta_t, psi_t))
    }

    /// Right-hand side assembled as `−T_{V−γη}∂_xU − LU + f(U)`; equals
    /// [`Evolver::rhs`] up to round-off for any admissible state.
    pub fn factored_rhs(
        &self,
        state: &SurfaceState,
        delta: f64,
        cutoff: &CutoffParams,
    ) -> Result<(SpectralField, SpectralField), EvolutionError> {
        let ops = self.paradiff_ops(state, delta, cutoff)?;
        let f = self.nonlinear_part(state, delta, cutoff)?;
        let t = |a: &SymbolGrid, u: &SpectralField| paradiff_apply(a, u, cutoff);
        let omega = &state.psi - &paraproduct(&ops.b, &state.eta, cutoff);
        let l1 = t(&ops.lambda, &omega).scale(-1.0);
        let l2 = &t(&ops.h, &state.eta).scale(self.params.kappa) + &paraproduct(&ops.b, &l1, cutoff);
        let adv = |f: &SpectralField| paraproduct(&ops.transport, &f.dx(), cutoff);
        let eta_t = &(&f.0 - &adv(&state.eta)) - &l1;
        let psi_t = &(&f.1 - &adv(&state.psi)) - &l2;
        Ok((eta_t, psi_t))
    }

    fn paradiff_ops(&self, state: &SurfaceState, delta: f64, cutoff: &CutoffParams) -> Result<ParadiffOps, EvolutionError> {
        let _ = cutoff;
        let fam = self.family_checked(state)?;
        let g = fam.g_full(self.params.gamma, &state.psi)?;
        let (b, v) = fam.b_v_from(&g, &state.psi);
        let eta = &state.eta;
        let sym = symmetrizer(eta, delta, &self.params)?;
        let p_inv = parametrix(&sym.p, eta, self.params.kappa);
        let q_inv = SymbolGrid::function(&sym_function_inverse(&sym.q, eta));
        Ok(ParadiffOps {
            b,
            transport: &v - &eta.scale(self.params.gamma),
            lambda: lambda_symbol(eta, delta, &self.params)?,
            h: h_symbol(eta),
            p: sym.p,
            q: sym.q,
            p_inv,
            q_inv,
        })
    }

    /// `f(U) = [[1,0],[T_B,1]](f₁, f₂)` with
    /// `f₁ = G − [T_λ(ψ − T_Bη) − T_Vη_x] + γηη_x − T_{γη}η_x` and
    /// `f₂ = ψ_t + T_{V−γη}ψ_x − T_BT_{V−γη}η_x − T_B[G + γηη_x] + κT_hη`.
    fn nonlinear_part(&self, state: &SurfaceState, delta: f64, cutoff: &CutoffParams) -> Result<(SpectralField, SpectralField), EvolutionError> {
        let (eta, psi) = (&state.eta, &state.psi);
        let gam = self.params.gamma;
        let fam = self.family_checked(state)?;
        let g = fam.g_full(gam, psi)?;
        let (b, v) = fam.b_v_from(&g, psi);
        let lambda = lambda_symbol(eta, delta, &self.params)?;
        let h = h_symbol(eta);
        let ex = eta.dx();
        let tp = |a: &SpectralField, u: &SpectralField| paraproduct(a, u, cutoff);
        let omega = psi - &tp(&b, eta);
        let eta_t = self.eta_t_from(eta, &g);
        let psi_t = self.psi_t_from(eta, psi, &g);
        let f1 = &(&eta_t - &paradiff_apply(&lambda, &omega, cutoff)) + &(&tp(&v, &ex) - &tp(&eta.scale(gam), &ex));
        let transport = &v - &eta.scale(gam);
        let f2 = &(&(&psi_t + &tp(&transport, &psi.dx())) - &tp(&b, &tp(&transport, &ex))) - &tp(&b, &eta_t);
        let f2 = &f2 + &paradiff_apply(&h, eta, cutoff).scale(self.params.kappa);
        Ok((f1.clone(), &f2 + &tp(&b, &f1)))
    }
}

struct ParadiffOps {
    b: SpectralField,
    transport: SpectralField,
    lambda: SymbolGrid,
    h: SymbolGrid,
    p: SymbolGrid,
    q: SymbolGrid,
    p_inv: SymbolGrid,
    q_inv: SymbolGrid,
}

/// `1/q(x)` for an `x`-only symbol.
fn sym_function_inverse(q: &SymbolGrid, eta: &SpectralField) -> SpectralField {
    SpectralField::from_values(eta.grid(), (0..eta.n()).map(|j| 1.0 / q.value(j, 0).re).collect()).expect("grid-sized")
}

/// Parametrix `P = P^{(−1/2)} + P^{(−3/2)}` of `p` with
/// `P^{(−1/2)} = 1/p^{(1/2)}` and
/// `P^{(−3/2)} = −(P^{(−1/2)}p^{(−1/2)} − i∂_ξP^{(−1/2)}∂_xp^{(1/2)})/p^{(1/2)}`; zero at `ξ = 0`.
fn parametrix(p: &SymbolGrid, eta: &SpectralField, kappa: f64) -> SymbolGrid {
    let ex = eta.dx().into_values();
    let exx = eta.dxx().into_values();
    let sk = kappa.sqrt();
    let pm = p.part(-0.5).expect("p carries two homogeneous parts");
    SymbolGrid::from_fn(eta.grid(), -0.5, move |j, xi| {
        if xi == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let u = 1.0 + ex[j] * ex[j];
        let up = 2.0 * ex[j] * exx[j];
        let k = xi.abs();
        let p12 = sk * u.powf(-0.5) * k.sqrt();
        let big = 1.0 / p12;
        let dxi_big = -0.5 * u.sqrt() * k.powf(-1.5) * xi.signum() / sk;
        let dx_p12 = sk * (-0.5) * u.powf(-1.5) * up * k.sqrt();
        let pmv = pm.value(j, xi as i64);
        let corr = -(pmv * big - Complex64::new(0.0, 1.0) * dxi_big * dx_p12) / p12;
        corr + big
    })
}

/// Hamiltonian from a precomputed `G^{DN}(η)ψ`.
pub fn hamiltonian_from(state: &SurfaceState, g_dn_psi: &SpectralField, params: &PhysicalParams) -> f64 {
    let (eta, psi) = (&state.eta, &state.psi);
    let eta2 = eta.mul(eta);
    let kinetic = psi.inner(g_dn_psi);
    let potential = params.g * eta.inner(eta);
    let vort = params.gamma * (-psi.dx().inner(&eta2) + params.gamma / 3.0 * eta2.inner(eta));
    let ones = SpectralField::constant(eta.grid(), 1.0);
    let arc = eta.dx().map(|e| (1.0 + e * e).sqrt()).inner(&ones);
    0.5 * (kinetic + potential + vort) + params.kappa * arc
}

/// Hamiltonian of a state on a flat bottom of depth `params.h`.
pub fn hamiltonian(state: &SurfaceState, params: &PhysicalParams, settings: SolverSettings) -> Result<f64, EvolutionError> {
    let bath = BathymetryProfile::flat(state.eta.grid(), params.h, params.h0).map_err(DnoError::from)?;
    let fam = DnoFamily::new(&state.eta, &bath, settings)?;
    Ok(hamiltonian_from(state, &fam.g_dn(&state.psi)?, params))
}

/// One row of the conserved-quantity time series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub t: f64,
    pub mass: f64,
    /// NaN when the bottom is not flat.
    pub hamiltonian: f64,
    pub margin_min: f64,
    pub eta_l2: f64,
    pub psi_l2: f64,
    pub psi_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Truncated { error: EvolutionError },
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub steps_taken: usize,
    pub cfl_limit: f64,
    /// Largest per-step mean correction applied to `η`.
    pub max_projection: f64,
    pub samples: Vec<SurfaceState>,
    pub series: Vec<Diagnostics>,
    pub status: RunStatus,
}

impl Trajectory {
    pub fn last(&self) -> &SurfaceState {
        self.samples.last().expect("trajectory holds the initial state")
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// `max_t |mass(t) − mass(0)|`.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.series[0].mass;
        self.series.iter().map(|d| (d.mass - m0).abs()).fold(0.0, f64::max)
    }

    /// `max_t |H(t) − H(0)|/|H(0)|` (NaN for a non-flat bottom).
    pub fn hamiltonian_drift(&self) -> f64 {
        let h0 = self.series[0].hamiltonian;
        self.series.iter().map(|d| (d.hamiltonian - h0).abs() / h0.abs()).fold(0.0, f64::max)
    }
}

/// `τ_k = |k| tanh(h|k|)`.
fn tau(k: f64, h: f64) -> f64 {
    k.abs() * (h * k.abs()).tanh()
}

/// Roots `(ω₊, ω₋)` of `ω² − (γτ_k/k)ω − τ_k(g+κk²) = 0`, `ω₊ ≥ ω₋`.
pub fn linear_dispersion(k: i64, params: &PhysicalParams) -> Result<(f64, f64), EvolutionError> {
    if k == 0 {
        return Err(EvolutionError::ZeroWavenumber);
    }
    let kf = k as f64;
    let t = tau(kf, params.h);
    let b = params.gamma * t / kf;
    let disc = (b * b + 4.0 * t * (params.g + params.kappa * kf * kf)).sqrt();
    Ok((0.5 * (b + disc), 0.5 * (b - disc)))
}

/// Linearized evolution of the `e^{ikx}` coefficients `(η̂_k, ψ̂_k)`:
/// `[[0, τ], [−(g+κk²), −iγτ/k]]`.
pub fn linear_mode_matrix(k: i64, params: &PhysicalParams) -> Result<[[Complex64; 2]; 2], EvolutionError> {
    if k == 0 {
        return Err(EvolutionError::ZeroWavenumber);
    }
    let kf = k as f64;
    let t = tau(kf, params.h);
    let z = Complex64::new(0.0, 0.0);
    Ok([
        [z, Complex64::new(t, 0.0)],
        [Complex64::new(-(params.g + params.kappa * kf * kf), 0.0), Complex64::new(0.0, -params.gamma * t / kf)],
    ])
}

/// Linear travelling mode `η = a cos kx`, `ψ = (ωa/τ_k) sin kx` whose `e^{ikx}`
/// coefficient evolves as `e^{−iωt}` for `ω = ω₊(k)`.
pub fn linear_mode_state(grid: &crate::PeriodicGrid, k: i64, amplitude: f64, params: &PhysicalParams) -> Result<SurfaceState, EvolutionError> {
    let (w, _) = linear_dispersion(k, params)?;
    let kf = k as f64;
    let t = tau(kf, params.h);
    let eta = SpectralField::from_fn(grid, |x| amplitude * (kf * x).cos());
    let psi = SpectralField::from_fn(grid, |x| w * amplitude / t * (kf * x).sin());
    Ok(SurfaceState::new(0.0, eta, psi))
}

/// Frequency of mode `k` measured from the unwrapped phase of `η̂_k` over
/// `periods` linear periods, starting from [`linear_mode_state`].
pub fn measure_mode_frequency(
    evolver: &Evolver,
    grid: &crate::PeriodicGrid,
    k: i64,
    amplitude: f64,
    steps_per_period: usize,
    periods: f64,
) -> Result<f64, EvolutionError> {
    let (w, _) = linear_dispersion(k, evolver.params())?;
    let t_end = periods * 2.0 * std::f64::consts::PI / w.abs();
    let steps = (steps_per_period as f64 * periods).ceil() as usize;
    let dt = t_end / steps as f64;
    let mut state = linear_mode_state(grid, k, amplitude, evolver.params())?;
    let mut phase = state.eta.coeff(k).arg();
    let phase0 = phase;
    let mut last = phase;
    for _ in 0..steps {
        state = evolver.step_rk4(&state, dt)?;
        let p = state.eta.coeff(k).arg();
        let mut d = p - last;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        phase += d;
        last = p;
    }
    Ok(-(phase - phase0) / state.t)
}

/// Linearization at rest restricted to mode `k`, by central differences of
/// the right-hand side on the basis `(η, ψ) ∈ {(cos kx, 0), (sin kx, 0),
/// (0, cos kx), (0, sin kx)}`; its eigenvalues are `±iω₊, ±iω₋`.
pub fn linearized_mode_jacobian(evolver: &Evolver, grid: &crate::PeriodicGrid, k: i64) -> Result<[[f64; 4]; 4], EvolutionError> {
    if k == 0 {
        return Err(EvolutionError::ZeroWavenumber);
    }
    let eps = 1e-7;
    let kf = k as f64;
    let basis = |i: usize, s: f64| {
        let f = SpectralField::from_fn(grid, move |x| s * if i % 2 == 0 { (kf * x).cos() } else { (kf * x).sin() });
        let z = SpectralField::zeros(grid);
        if i < 2 {
            SurfaceState::new(0.0, f, z)
        } else {
            SurfaceState::new(0.0, z, f)
        }
    };
    // a cos kx + b sin kx has e^{ikx} coefficient (a − ib)/2
    let project = |f: &SpectralField| {
        let c = f.coeff(k);
        [2.0 * c.re, -2.0 * c.im]
    };
    let mut jac = [[0.0; 4]; 4];
    for i in 0..4 {
        let (ep, pp) = evolver.rhs(&basis(i, eps))?;
        let (em, pm) = evolver.rhs(&basis(i, -eps))?;
        let de = project(&(&ep - &em).scale(0.5 / eps));
        let dp = project(&(&pp - &pm).scale(0.5 / eps));
        for (r, v) in de.iter().chain(dp.iter()).enumerate() {
            jac[r][i] = *v;
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_spectral::PeriodicGrid;

    fn params(g: f64, kappa: f64, gamma: f64) -> PhysicalParams {
        PhysicalParams { g, h: 1.0, kappa, gamma, h0: 0.5 }
    }

    fn flat_evolver(n: usize, m: usize, p: PhysicalParams) -> (PeriodicGrid, Evolver) {
        let g = PeriodicGrid::new(n).unwrap();
        let bath = BathymetryProfile::flat(&g, p.h, p.h0).unwrap();
        (g, Evolver::new(bath, p, SolverSettings::new(m)).unwrap())
    }

    #[test]
    fn zero_state_is_at_rest() {
        let (g, ev) = flat_evolver(16, 12, params(1.0, 0.1, 1.0));
        let s = SurfaceState::zero(&g);
        let (a, b) = ev.rhs(&s).unwrap();
        assert_eq!(a.max_abs(), 0.0);
        assert_eq!(b.max_abs(), 0.0);
        let traj = ev.run(&s, 0.01, 0.05, 1).unwrap();
        assert!(traj.samples.iter().all(|s| s.eta.max_abs() == 0.0 && s.psi.max_abs() == 0.0));
        let h = ev.hamiltonian(&s).unwrap();
        assert!((h - 0.1 * 2.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn linearization_of_gravity_capillary_term() {
        let (g, ev) = flat_evolver(16, 12, params(1.0, 0.1, 0.0));
        let a = 1e-8;
        let s = SurfaceState::new(0.0, SpectralField::from_fn(&g, |x| a * x.cos()), SpectralField::zeros(&g));
        let (et, pt) = ev.rhs(&s).unwrap();
        assert!(et.max_abs() < 1e-20);
        let expect = SpectralField::from_fn(&g, |x| -(1.0 + 0.1) * a * x.cos());
        assert!((&pt - &expect).max_abs() < 1e-15);
    }

    #[test]
    fn vorticity_term_per_mode() {
        let (g, ev) = flat_evolver(16, 16, params(1.0, 0.1, 1.0));
        let a = 1e-8;
        let s = SurfaceState::new(0.0, SpectralField::zeros(&g), SpectralField::from_fn(&g, |x| a * x.sin()));
        let (et, pt) = ev.rhs(&s).unwrap();
        let t = 1f64.tanh();
        assert!((&et - &SpectralField::from_fn(&g, |x| a * t * x.sin())).max_abs() < 1e-18);
        // γ∂_x^{−1}(a tanh(1) sin x) = −γ a tanh(1) cos x, up to O(a²)
        assert!((&pt - &SpectralField::from_fn(&g, |x| -a * t * x.cos())).max_abs() < 10.0 * a * a);
    }

    #[test]
    fn hamiltonian_single_mode() {
        let (g, ev) = flat_evolver(16, 16, params(1.0, 0.3, 2.0));
        let s = SurfaceState::new(0.0, SpectralField::zeros(&g), SpectralField::from_fn(&g, |x| x.cos()));
        let h = ev.hamiltonian(&s).unwrap();
        let expect = 0.5 * std::f64::consts::PI * 1f64.tanh() + 2.0 * std::f64::consts::PI * 0.3;
        assert!((h - expect).abs() < 1e-10);
    }

    #[test]
    fn hamiltonian_rejects_bathymetry() {
        let g = PeriodicGrid::new(16).unwrap();
        let bath = BathymetryProfile::new(SpectralField::from_fn(&g, |x| 0.1 * x.cos()), 1.0, 0.5).unwrap();
        let ev = Evolver::new(bath, params(1.0, 0.1, 0.0), SolverSettings::new(12)).unwrap();
        assert_eq!(ev.hamiltonian(&SurfaceState::zero(&g)), Err(EvolutionError::HamiltonianUndefined));
    }

    #[test]
    fn reverse_is_an_involution() {
        let g = PeriodicGrid::new(16).unwrap();
        let s = SurfaceState::new(
            0.0,
            SpectralField::from_fn(&g, |x| (x + 0.3).cos()),
            SpectralField::from_fn(&g, |x| (2.0 * x).sin() + 0.2),
        );
        let r = s.reverse().reverse();
        assert_eq!(r.eta.values(), s.eta.values());
        assert_eq!(r.psi.values(), s.psi.values());
        let c = SurfaceState::new(0.0, SpectralField::from_fn(&g, |x| x.cos()), SpectralField::from_fn(&g, |x| x.sin()));
        assert!(c.reverse().distance(&c) < 1e-15);
    }

    #[test]
    fn dealiasing_keeps_linear_terms_of_high_modes() {
        // mode 7 lies above the 2/3 cutoff of n = 16 but its linear dynamics must survive
        let p = params(1.0, 0.1, 1.0);
        let (g, ev) = flat_evolver(16, 16, p);
        let (wp, wm) = linear_dispersion(7, &p).unwrap();
        let jac = linearized_mode_jacobian(&ev, &g, 7).unwrap();
        // the ψ-row of ∂/∂η is −(g + κk²)
        assert!((jac[2][0] + (1.0 + 0.1 * 49.0)).abs() < 1e-6, "{}", jac[2][0]);
        assert!(wp > 0.0 && wm < 0.0);
    }

    #[test]
    fn dispersion_closed_forms() {
        let (w, m) = linear_dispersion(1, &params(1.0, 0.0, 0.0)).unwrap();
        assert!((w - 1f64.tanh().sqrt()).abs() < 1e-15 && (m + w).abs() < 1e-15);
        let deep = PhysicalParams { h: 20.0, ..params(9.81, 0.0, 0.0) };
        let (w, _) = linear_dispersion(1, &deep).unwrap();
        assert!((w - 9.81f64.sqrt()).abs() < 1e-12);
        assert!(linear_dispersion(0, &deep).is_err());
    }

    #[test]
    fn dispersion_roots_are_matrix_eigenvalues() {
        for &gamma in &[0.0, 1.0, -2.0] {
            for k in [1i64, 2, 4, -3] {
                let p = params(1.0, 0.1, gamma);
                let (wp, wm) = linear_dispersion(k, &p).unwrap();
                let m = linear_mode_matrix(k, &p).unwrap();
                for w in [wp, wm] {
                    // det(M − μI) with μ = −iω
                    let mu = Complex64::new(0.0, -w);
                    let det = (m[0][0] - mu) * (m[1][1] - mu) - m[0][1] * m[1][0];
                    assert!(det.norm() < 1e-12, "k={k} γ={gamma}");
                }
            }
        }
    }

    #[test]
    fn mass_is_conserved_and_flat_paths_agree() {
        let (g, ev) = flat_evolver(16, 14, params(1.0, 0.1, 1.0));
        let s = SurfaceState::new(
            0.0,
            SpectralField::from_fn(&g, |x| 0.02 * x.cos() + 0.01 * (2.0 * x).sin()),
            SpectralField::from_fn(&g, |x| 0.02 * x.sin()),
        );
        let (a1, b1) = ev.rhs(&s).unwrap();
        let (a2, b2) = ev.rhs_flat_classical(&s).unwrap();
        assert!((&a1 - &a2).max_abs() < 1e-12 && (&b1 - &b2).max_abs() < 1e-12);
        assert!(a1.mean().abs() < 1e-13);
        let traj = ev.run(&s, 0.01, 0.2, 5).unwrap();
        assert!(traj.completed());
        assert!(traj.mass_drift() <= 1e-12);
        assert!(traj.max_projection <= PROJECTION_TOL);
        assert_eq!(traj.samples.len(), 5);
    }

    #[test]
    fn cfl_and_connectedness_guards() {
        let (g, ev) = flat_evolver(16, 12, params(1.0, 0.1, 0.0));
        let s = SurfaceState::zero(&g);
        assert!(matches!(ev.run(&s, 1.0, 1.0, 1), Err(EvolutionError::CflViolation { .. })));
        let deep = SurfaceState::new(0.0, SpectralField::from_fn(&g, |x| 0.8 * x.cos()), SpectralField::zeros(&g));
        assert!(matches!(ev.rhs(&deep), Err(EvolutionError::NotConnected { .. })));
    }

    #[test]
    fn factored_rhs_reproduces_rhs() {
        let g = PeriodicGrid::new(32).unwrap();
        let bath = BathymetryProfile::new(SpectralField::from_fn(&g, |x| 0.1 * (2.0 * x).cos()), 1.0, 0.5).unwrap();
        let mut ev = Evolver::new(bath, params(1.0, 0.2, 1.0), SolverSettings::new(16)).unwrap();
        ev.dealias = None;
        let s = SurfaceState::new(
            0.0,
            SpectralField::from_fn(&g, |x| 0.05 * x.cos() + 0.02 * (3.0 * x).sin()),
            SpectralField::from_fn(&g, |x| 0.1 * x.sin() + 0.03 * (2.0 * x).cos()),
        );
        let c = CutoffParams::default();
        let (a1, b1) = ev.rhs(&s).unwrap();
        let (a2, b2) = ev.factored_rhs(&s, 0.25, &c).unwrap();
        assert!((&a1 - &a2).max_abs() < 1e-12, "{}", (&a1 - &a2).max_abs());
        assert!((&b1 - &b2).max_abs() < 1e-12, "{}", (&b1 - &b2).max_abs());
    }

    #[test]
    fn mollified_rhs_limits() {
        let (g, ev) = flat_evolver(32, 16, params(1.0, 0.2, 1.0));
        let c = CutoffParams::default();
        let z = SurfaceState::zero(&g);
        let (a, b) = ev.mollified_rhs(0.0, &z, 0.25, &c).unwrap();
        assert_eq!(a.max_abs() + b.max_abs(), 0.0);
        let s = SurfaceState::new(
            0.0,
            SpectralField::from_fn(&g, |x| 0.02 * x.cos() + 0.01 * (6.0 * x).cos()),
            SpectralField::from_fn(&g, |x| 0.02 * x.sin()),
        );
        let (e0, p0) = ev.mollified_rhs(0.0, &s, 0.25, &c).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let (e, p) = ev.mollified_rhs(eps, &s, 0.25, &c).unwrap();
            let d = (&e - &e0).max_abs() + (&p - &p0).max_abs();
            assert!(d < last);
            last = d;
        }
        // ε = 1 damps mode 6 by e^{−6^{3/2}}
        let (e1, p1) = ev.mollified_rhs(1.0, &s, 0.25, &c).unwrap();
        let scale = 0.01 * (1.0 + 0.2 * 36.0) * 36.0;
        let bound = (-(6f64.powf(1.5))).exp() * scale;
        assert!(e1.coeff(6).norm() <= bound && p1.coeff(6).norm() <= bound);
    }
}
