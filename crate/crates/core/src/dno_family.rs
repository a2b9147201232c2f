//! Dirichlet–Neumann type operators of the fluid domain
//! `{−h + β(x) < y < η(x)}` and the generalized operator with vorticity
//!
//! ```text
//! G(η,β,γ)ψ = G^{DN}(η,β)ψ + γ G^{NN}(η,β)((−h+β)β_x)
//! ```
//!
//! together with the derived quantities `B`, `V`, `ω`, closed forms on the
//! flat strip, shape derivatives and the homogeneous expansion in `η`.
//!
//! Every operator is evaluated through the collocation oracle in
//! [`crate::elliptic_bvp`]; a [`DnoFamily`] factors the system once per
//! geometry and reuses it.

use thiserror::Error;

use crate::elliptic_bvp::{BvpConfig, BvpError, BvpSystem, FlattenedPotential};
use crate::grid_spectral::{GridError, SpectralField, VerticalGrid};
use crate::paradiff::{paraproduct, CutoffParams};
use crate::straightening::{build_regularizing, build_trivial, BathymetryProfile, Bump, StraighteningError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DnoError {
    #[error("invalid physical parameter {name} = {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Straightening(#[from] StraighteningError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Gravity, depth, surface tension, vorticity and connectedness margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalParams {
    pub g: f64,
    pub h: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub h0: f64,
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), DnoError> {
        let checks = [
            ("g", self.g, self.g > 0.0),
            ("h", self.h, self.h > 0.0),
            ("kappa", self.kappa, self.kappa >= 0.0),
            ("gamma", self.gamma, true),
            ("h0", self.h0, self.h0 > 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(DnoError::BadParam { name, value });
            }
        }
        Ok(())
    }
}

/// Which straightening map the oracle uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiffeoChoice {
    Trivial,
    Regularizing { delta: f64 },
}

/// Discretization settings of the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    /// Chebyshev node count in the vertical.
    pub m: usize,
    pub diffeo: DiffeoChoice,
    pub bvp: BvpConfig,
    /// Sobolev index used to pre-validate the regularizing map.
    pub s_reg: f64,
}

impl SolverSettings {
    pub fn new(m: usize) -> Self {
        Self { m, diffeo: DiffeoChoice::Trivial, bvp: BvpConfig::default(), s_reg: 3.0 }
    }
}

/// Closed-form operators on the flat strip of depth `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatMultipliers {
    pub h: f64,
}

impl FlatMultipliers {
    /// `|ξ| tanh(h|ξ|)`
    pub fn dn(&self, xi: f64) -> f64 {
        xi.abs() * (self.h * xi.abs()).tanh()
    }

    /// `−sech(h|ξ|)`
    pub fn nn(&self, xi: f64) -> f64 {
        -1.0 / (self.h * xi).cosh()
    }

    /// `sech(h|ξ|)`
    pub fn dd(&self, xi: f64) -> f64 {
        1.0 / (self.h * xi).cosh()
    }

    /// `tanh(h|ξ|)/|ξ|`, equal to `h` at `ξ = 0`.
    pub fn nd(&self, xi: f64) -> f64 {
        let k = xi.abs();
        if k == 0.0 {
            self.h
        } else {
            (self.h * k).tanh() / k
        }
    }
}

pub fn flat_multipliers(h: f64) -> FlatMultipliers {
    FlatMultipliers { h }
}

/// Which operator of the family an [`OperatorProbe`] exercised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    DN,
    NN,
    DD,
    ND,
}

/// One application of an operator of the family.
#[derive(Clone, Debug)]
pub struct OperatorProbe {
    pub which: Which,
    pub input: SpectralField,
    pub output: SpectralField,
}

/// The four operators at a fixed geometry, backed by one factored oracle.
#[derive(Debug)]
pub struct DnoFamily {
    eta: SpectralField,
    bath: BathymetryProfile,
    system: BvpSystem,
    settings: SolverSettings,
}

impl DnoFamily {
    pub fn new(eta: &SpectralField, bath: &BathymetryProfile, settings: SolverSettings) -> Result<Self, DnoError> {
        let vgrid = VerticalGrid::new(settings.m, bath.depth())?;
        let diffeo = match settings.diffeo {
            DiffeoChoice::Trivial => build_trivial(eta, bath, &vgrid)?,
            DiffeoChoice::Regularizing { delta } => {
                build_regularizing(eta, bath, &vgrid, delta, Bump::Standard, settings.s_reg)?
            }
        };
        let system = BvpSystem::new(diffeo, settings.bvp)?;
        Ok(Self { eta: eta.clone(), bath: bath.clone(), system, settings })
    }

    pub fn eta(&self) -> &SpectralField {
        &self.eta
    }

    pub fn bath(&self) -> &BathymetryProfile {
        &self.bath
    }

    pub fn settings(&self) -> SolverSettings {
        self.settings
    }

    pub fn system(&self) -> &BvpSystem {
        &self.system
    }

    /// Same bathymetry and settings, new surface.
    pub fn at_surface(&self, eta: &SpectralField) -> Result<Self, DnoError> {
        Self::new(eta, &self.bath, self.settings)
    }

    pub fn potential(&self, psi: &SpectralField, theta: &SpectralField) -> Result<FlattenedPotential, DnoError> {
        Ok(self.system.solve(psi, theta)?)
    }

    fn zero(&self) -> SpectralField {
        SpectralField::zeros(self.eta.grid())
    }

    pub fn g_dn(&self, psi: &SpectralField) -> Result<SpectralField, DnoError> {
        Ok(self.potential(psi, &self.zero())?.top_neumann())
    }

    pub fn g_nn(&self, theta: &SpectralField) -> Result<SpectralField, DnoError> {
        Ok(self.potential(&self.zero(), theta)?.top_neumann())
    }

    pub fn g_dd(&self, psi: &SpectralField) -> Result<SpectralField, DnoError> {
        Ok(self.potential(psi, &self.zero())?.bottom_dirichlet())
    }

    pub fn g_nd(&self, theta: &SpectralField) -> Result<SpectralField, DnoError> {
        Ok(self.potential(&self.zero(), theta)?.bottom_dirichlet())
    }

    pub fn probe(&self, which: Which, input: &SpectralField) -> Result<OperatorProbe, DnoError> {
        let output = match which {
            Which::DN => self.g_dn(input)?,
            Which::NN => self.g_nn(input)?,
            Which::DD => self.g_dd(input)?,
            Which::ND => self.g_nd(input)?,
        };
        Ok(OperatorProbe { which, input: input.clone(), output })
    }

    /// Bottom datum `γ(−h+β)β_x` carried by the vorticity.
    pub fn vorticity_flux(&self, gamma: f64) -> SpectralField {
        let b = self.bath.beta();
        let depth = b.map(|v| v - self.bath.depth());
        depth.mul(self.bath.beta_x()).scale(gamma)
    }

    /// Potential of `G(η,β,γ)`: top datum `ψ`, bottom datum `γ(−h+β)β_x`.
    pub fn full_potential(&self, gamma: f64, psi: &SpectralField) -> Result<FlattenedPotential, DnoError> {
        self.potential(psi, &self.vorticity_flux(gamma))
    }

    pub fn g_full(&self, gamma: f64, psi: &SpectralField) -> Result<SpectralField, DnoError> {
        if self.bath.is_flat() {
            return self.g_dn(psi);
        }
        Ok(self.full_potential(gamma, psi)?.top_neumann())
    }

    /// `(B, V)` from a precomputed `G`: `B = (G + η_xψ_x)/(1+η_x²)`, `V = ψ_x − Bη_x`.
    pub fn b_v_from(&self, g: &SpectralField, psi: &SpectralField) -> (SpectralField, SpectralField) {
        b_v_from(&self.eta, g, psi)
    }

    pub fn b_v(&self, gamma: f64, psi: &SpectralField) -> Result<(SpectralField, SpectralField), DnoError> {
        let g = self.g_full(gamma, psi)?;
        Ok(self.b_v_from(&g, psi))
    }

    /// `(B, V, ω)` with the good unknown `ω = ψ − T_Bη`.
    pub fn b_v_omega(
        &self,
        gamma: f64,
        psi: &SpectralField,
        cutoff: &CutoffParams,
    ) -> Result<(SpectralField, SpectralField, SpectralField), DnoError> {
        let (b, v) = self.b_v(gamma, psi)?;
        let omega = psi - &paraproduct(&b, &self.eta, cutoff);
        Ok((b, v, omega))
    }

    /// `∂_η G(δη)ψ = −G^{DN}(δη·B) − ∂_x(δη·V)` at fixed bottom datum.
    pub fn shape_derivative_eta(
        &self,
        gamma: f64,
        psi: &SpectralField,
        d_eta: &SpectralField,
    ) -> Result<SpectralField, DnoError> {
        let (b, v) = self.b_v(gamma, psi)?;
        let first = self.g_dn(&d_eta.mul(&b))?;
        Ok(-&(&first + &d_eta.mul(&v).dx()))
    }

    /// Derivative of `β ↦ G(η,β,γ)ψ` in direction `δβ`, including the
    /// dependence of the bottom datum on `β`:
    /// `G^{NN}[γ(δβ β_x + (−h+β)δβ_x) − ∂_x(δβ · φ_x|_{bottom})]`.
    pub fn shape_derivative_beta(
        &self,
        gamma: f64,
        psi: &SpectralField,
        d_beta: &SpectralField,
    ) -> Result<SpectralField, DnoError> {
        let phi = self.full_potential(gamma, psi)?;
        let u_bottom = bottom_horizontal_velocity(&phi);
        let beta = self.bath.beta();
        let d_theta = &d_beta.mul(self.bath.beta_x()) + &beta.map(|v| v - self.bath.depth()).mul(&d_beta.dx());
        let datum = &d_theta.scale(gamma) - &d_beta.mul(&u_bottom).dx();
        self.g_nn(&datum)
    }
}

/// `(B, V)` for surface `η`, operator value `g` and trace `ψ`.
pub fn b_v_from(eta: &SpectralField, g: &SpectralField, psi: &SpectralField) -> (SpectralField, SpectralField) {
    let ex = eta.dx();
    let px = psi.dx();
    let b_vals: Vec<f64> = (0..eta.n())
        .map(|j| {
            let e = ex.values()[j];
            (g.values()[j] + e * px.values()[j]) / (1.0 + e * e)
        })
        .collect();
    let b = SpectralField::from_values(eta.grid(), b_vals).expect("grid-sized");
    let v = px.zip_with(&b.mul(&ex), |p, q| p - q);
    (b, v)
}

/// Physical `∂_xφ` along the bottom.
fn bottom_horizontal_velocity(phi: &FlattenedPotential) -> SpectralField {
    let d = phi.diffeo();
    let (n, m) = (phi.n(), phi.m());
    let i = m - 1;
    let [fx, fw, ..] = crate::straightening::tensor_derivatives(d.grid(), d.vgrid(), phi.values());
    let vals = (0..n)
        .map(|j| {
            let k = j * m + i;
            fx[k] - d.sigma_x()[k] * fw[k] / (1.0 + d.sigma_w()[k])
        })
        .collect();
    SpectralField::from_values(d.grid(), vals).expect("grid-sized")
}

/// Free-function forms of the family (one factorization per call).
pub fn g_dn(eta: &SpectralField, bath: &BathymetryProfile, psi: &SpectralField, s: SolverSettings) -> Result<SpectralField, DnoError> {
    DnoFamily::new(eta, bath, s)?.g_dn(psi)
}

pub fn g_nn(eta: &SpectralField, bath: &BathymetryProfile, theta: &SpectralField, s: SolverSettings) -> Result<SpectralField, DnoError> {
    DnoFamily::new(eta, bath, s)?.g_nn(theta)
}

pub fn g_dd(eta: &SpectralField, bath: &BathymetryProfile, psi: &SpectralField, s: SolverSettings) -> Result<SpectralField, DnoError> {
    DnoFamily::new(eta, bath, s)?.g_dd(psi)
}

pub fn g_nd(eta: &SpectralField, bath: &BathymetryProfile, theta: &SpectralField, s: SolverSettings) -> Result<SpectralField, DnoError> {
    DnoFamily::new(eta, bath, s)?.g_nd(theta)
}

pub fn g_full(
    eta: &SpectralField,
    bath: &BathymetryProfile,
    params: &PhysicalParams,
    psi: &SpectralField,
    s: SolverSettings,
) -> Result<SpectralField, DnoError> {
    DnoFamily::new(eta, bath, s)?.g_full(params.gamma, psi)
}

/// Pairing defects of the three adjoint identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointDefects {
    /// `|⟨G^{DN}ψ₁,ψ₂⟩ − ⟨ψ₁,G^{DN}ψ₂⟩|`
    pub dn: f64,
    /// `|⟨G^{ND}θ₁,θ₂⟩ − ⟨θ₁,G^{ND}θ₂⟩|`
    pub nd: f64,
    /// `|⟨G^{NN}θ₁,ψ₁⟩ + ⟨θ₁,G^{DD}ψ₁⟩|`
    pub nn_dd: f64,
    /// `‖ψ₁‖‖ψ₂‖ + ‖θ₁‖‖θ₂‖ + ‖θ₁‖‖ψ₁‖`, the natural size of the pairings.
    pub scale: f64,
}

impl AdjointDefects {
    pub fn max_relative(&self) -> f64 {
        self.dn.max(self.nd).max(self.nn_dd) / self.scale.max(f64::MIN_POSITIVE)
    }
}

pub fn adjoint_defect(
    fam: &DnoFamily,
    psi: (&SpectralField, &SpectralField),
    theta: (&SpectralField, &SpectralField),
) -> Result<AdjointDefects, DnoError> {
    let (p1, p2) = psi;
    let (t1, t2) = theta;
    let z = SpectralField::zeros(p1.grid());
    let sols = fam.system.solve_many(&[(p1, &z), (p2, &z), (&z, t1), (&z, t2)])?;
    let (dn1, dn2) = (sols[0].top_neumann(), sols[1].top_neumann());
    let dd1 = sols[0].bottom_dirichlet();
    let (nn1, nd1, nd2) = (sols[2].top_neumann(), sols[2].bottom_dirichlet(), sols[3].bottom_dirichlet());
    Ok(AdjointDefects {
        dn: (dn1.inner(p2) - p1.inner(&dn2)).abs(),
        nd: (nd1.inner(t2) - t1.inner(&nd2)).abs(),
        nn_dd: (nn1.inner(p1) + t1.inner(&dd1)).abs(),
        scale: p1.l2_norm() * p2.l2_norm() + t1.l2_norm() * t2.l2_norm() + t1.l2_norm() * p1.l2_norm(),
    })
}

/// Homogeneous expansion `G(εη,β,γ)ψ = Σ_j ε^j G_j ψ`, evaluated at `ε = 1`.
#[derive(Clone, Debug)]
pub struct TaylorExpansion {
    /// `G_0ψ, …, G_Jψ`.
    pub terms: Vec<SpectralField>,
    /// `‖G_J ψ‖ / ‖G_{J−1} ψ‖` (NaN for `J = 0`).
    pub tail_ratio: f64,
}

impl TaylorExpansion {
    pub fn partial_sum(&self, upto: usize) -> SpectralField {
        let mut acc = SpectralField::zeros(self.terms[0].grid());
        for t in &self.terms[..=upto.min(self.terms.len() - 1)] {
            acc = &acc + t;
        }
        acc
    }

    pub fn sum(&self) -> SpectralField {
        self.partial_sum(self.terms.len() - 1)
    }

    /// True when the partial sums plausibly converge (tail ratio below 1/2).
    pub fn converging(&self) -> bool {
        !(self.tail_ratio >= 0.5)
    }
}

/// Degree-by-degree terms of `ε ↦ G^{DN}(εη,β)u + G^{NN}(εη,β)θ` from the
/// amplitude equation `F′(ε) = −G^{DN}(εη,β)(η·B(ε)) − ∂_x(η·V(ε))`.
fn expand_terms(base: &DnoFamily, eta: &SpectralField, order: usize, u: &SpectralField, theta: &SpectralField) -> Result<Vec<SpectralField>, DnoError> {
    let ex = eta.dx();
    let ux = u.dx();
    let q = ex.mul(&ex);
    let mut f = vec![base.potential(u, theta)?.top_neumann()];
    let mut b: Vec<SpectralField> = Vec::new();
    for j in 0..order {
        // B_j = Σ_k (−q)^k N_{j−2k}, N_1 = F_1 + η_x u_x, otherwise N_i = F_i
        let numer = |i: usize| if i == 1 { &f[1] + &ex.mul(&ux) } else { f[i].clone() };
        let mut bj = numer(j);
        let mut qk = SpectralField::constant(eta.grid(), 1.0);
        let mut k = 1;
        while 2 * k <= j {
            qk = qk.mul(&q).scale(-1.0);
            bj = &bj + &qk.mul(&numer(j - 2 * k));
            k += 1;
        }
        b.push(bj);
        let vj = if j == 0 { ux.clone() } else { ex.mul(&b[j - 1]).scale(-1.0) };
        let zero = SpectralField::zeros(eta.grid());
        let mut s = eta.mul(&vj).dx();
        for a in 0..=j {
            let arg = eta.mul(&b[j - a]);
            let dn_a = if a == 0 {
                base.potential(&arg, &zero)?.top_neumann()
            } else {
                expand_terms(base, eta, a, &arg, &zero)?.pop().expect("nonempty")
            };
            s = &s + &dn_a;
        }
        f.push(s.scale(-1.0 / (j as f64 + 1.0)));
    }
    Ok(f)
}

/// Terms `G_0ψ … G_Jψ` of the expansion of `G(η,β,γ)ψ` in powers of `η`;
/// `base` must be the family at `η = 0` for the same bathymetry.
pub fn taylor_expand_g(
    base: &DnoFamily,
    eta: &SpectralField,
    gamma: f64,
    psi: &SpectralField,
    order: usize,
) -> Result<TaylorExpansion, DnoError> {
    let theta = if base.bath.is_flat() {
        SpectralField::zeros(eta.grid())
    } else {
        base.vorticity_flux(gamma)
    };
    let terms = expand_terms(base, eta, order, psi, &theta)?;
    let tail_ratio = if order == 0 {
        f64::NAN
    } else {
        terms[order].l2_norm() / terms[order - 1].l2_norm()
    };
    let out = TaylorExpansion { terms, tail_ratio };
    if !out.converging() {
        log::warn!("homogeneous expansion may diverge: tail ratio {tail_ratio:.3}");
    }
    Ok(out)
}

/// Classical flat-bottom terms (`β = 0`, `γ = 0`) of orders 0, 1, 2:
/// `G_0 = D tanh(hD)`, `G_1 = DηD − G_0ηG_0`,
/// `G_2 = −½(D²η²G_0 + G_0η²D² − 2G_0ηG_0ηG_0)` with `D = −i∂_x`.
pub fn classical_flat_terms(eta: &SpectralField, psi: &SpectralField, h: f64) -> [SpectralField; 3] {
    let g0 = |f: &SpectralField| f.apply_radial(|k| k * (h * k).tanh());
    let d2 = |f: &SpectralField| f.dxx().scale(-1.0);
    let dd = |f: &SpectralField| eta.mul(&f.dx()).dx().scale(-1.0);
    let t0 = g0(psi);
    let t1 = &dd(psi) - &g0(&eta.mul(&t0));
    let eta2 = eta.mul(eta);
    let a = d2(&eta2.mul(&t0));
    let b = g0(&eta2.mul(&d2(psi)));
    let c = g0(&eta.mul(&g0(&eta.mul(&t0))));
    let t2 = (&(&a + &b) - &c.scale(2.0)).scale(-0.5);
    [t0, t1, t2]
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::grid_spectral::PeriodicGrid;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn gauge_invariance_and_gamma_affinity(
            ea in -0.08f64..0.08, ba in -0.12f64..0.12, c in -5.0f64..5.0, gamma in -2.0f64..2.0,
        ) {
            let g = PeriodicGrid::new(16).unwrap();
            let beta = SpectralField::from_fn(&g, |x| ba * (2.0 * x).cos() + 0.5 * ba * x.sin());
            let bath = BathymetryProfile::new(beta, 1.0, 0.5).unwrap();
            let eta = SpectralField::from_fn(&g, |x| ea * x.cos());
            let fam = DnoFamily::new(&eta, &bath, SolverSettings::new(16)).unwrap();
            let psi = SpectralField::from_fn(&g, |x| x.sin() + 0.2 * (3.0 * x).cos());
            let a = fam.g_dn(&psi).unwrap();
            let b = fam.g_dn(&psi.map(|v| v + c)).unwrap();
            prop_assert!((&a - &b).max_abs() <= 1e-10 * (1.0 + c.abs()));
            let g0 = fam.g_full(0.0, &psi).unwrap();
            let g1 = fam.g_full(1.0, &psi).unwrap();
            let gg = fam.g_full(gamma, &psi).unwrap();
            let lin = &g0 + &(&g1 - &g0).scale(gamma);
            prop_assert!((&gg - &lin).max_abs() <= 1e-11);
            prop_assert!(gg.mean().abs() <= 1e-10 * gg.l2_norm());
        }
    }
}
