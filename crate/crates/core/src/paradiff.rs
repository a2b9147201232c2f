//! Paradifferential quantization on the periodic grid and the symbols of the
//! water-wave system: `λ` (Dirichlet–Neumann), `h` (curvature), the
//! symmetrizer `(p, q, ϑ)` and the mollifier `J_ε`.
//!
//! Quantization follows
//!
//! ```text
//! F(T_a u)(ξ) = Σ_η χ(ξ−η, η) â(ξ−η, η) û(η)
//! ```
//!
//! where `â(k, η)` is the discrete Fourier coefficient in `x` of the symbol
//! column `a(·, η)`. Symbol columns are tabulated for `ξ = −n/2 … n/2`; the
//! Nyquist coefficient of the input is split evenly between `±n/2` and the
//! output at `−n/2` is folded onto `n/2`, which keeps `T_1 = Id` exact and the
//! output of real-quantizing symbols exactly conjugate-symmetric.

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::dno_family::{DnoError, DnoFamily, PhysicalParams};
use crate::grid_spectral::{PeriodicGrid, SpectralField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParadiffError {
    #[error("cutoff parameters must satisfy 0 < eps1 < eps2 < 1 (got {eps1}, {eps2})")]
    BadCutoff { eps1: f64, eps2: f64 },
    #[error("smoothing depth delta={delta} must lie in (0, {bound})")]
    BadDelta { delta: f64, bound: f64 },
    #[error("surface tension must be positive for the symmetrizer (kappa={kappa})")]
    NoSurfaceTension { kappa: f64 },
    #[error("mollifier parameter eps={eps} outside [0, 1]")]
    BadMollifier { eps: f64 },
    #[error("symbol grid has {got} nodes, field has {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Dno(#[from] DnoError),
    #[error(transparent)]
    Evolution(Box<crate::evolution::EvolutionError>),
}

/// Frequency cutoff `χ(k, η)`: 1 for `|k| ≤ eps1|η|`, 0 for `|k| ≥ eps2|η|`,
/// smooth monotone transition in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffParams {
    pub eps1: f64,
    pub eps2: f64,
}

impl Default for CutoffParams {
    fn default() -> Self {
        Self { eps1: 0.2, eps2: 0.5 }
    }
}

impl CutoffParams {
    pub fn new(eps1: f64, eps2: f64) -> Result<Self, ParadiffError> {
        if !(0.0 < eps1 && eps1 < eps2 && eps2 < 1.0) {
            return Err(ParadiffError::BadCutoff { eps1, eps2 });
        }
        Ok(Self { eps1, eps2 })
    }

    /// `χ(k, η)`, with `χ(0,0) = 1` and `χ(k,0) = 0` for `k ≠ 0`.
    pub fn chi(&self, k: f64, eta: f64) -> f64 {
        let (k, eta) = (k.abs(), eta.abs());
        if eta == 0.0 {
            return if k == 0.0 { 1.0 } else { 0.0 };
        }
        let r = k / eta;
        if r <= self.eps1 {
            1.0
        } else if r >= self.eps2 {
            0.0
        } else {
            let t = (r - self.eps1) / (self.eps2 - self.eps1);
            // seventh-order smoothstep: three vanishing derivatives at both ends
            1.0 - t.powi(4) * (35.0 - 84.0 * t + 70.0 * t * t - 20.0 * t.powi(3))
        }
    }
}

/// A symbol `a(x_j, ξ)` tabulated at grid nodes and `ξ = −n/2 … n/2`.
#[derive(Clone, Debug)]
pub struct SymbolGrid {
    grid: PeriodicGrid,
    order: f64,
    /// Row-major `[j][ξ + n/2]`.
    table: Vec<Complex64>,
    /// Discrete Fourier coefficients in `x` per column: `[ξ + n/2][k index]`.
    spec: Vec<Complex64>,
    parts: Vec<(f64, Vec<Complex64>)>,
}

impl SymbolGrid {
    fn cols(grid: &PeriodicGrid) -> usize {
        grid.n() + 1
    }

    fn from_table(grid: &PeriodicGrid, order: f64, table: Vec<Complex64>, parts: Vec<(f64, Vec<Complex64>)>) -> Self {
        let (n, cols) = (grid.n(), Self::cols(grid));
        let mut spec = vec![Complex64::new(0.0, 0.0); cols * n];
        for c in 0..cols {
            let col: Vec<Complex64> = (0..n).map(|j| table[j * cols + c]).collect();
            spec[c * n..(c + 1) * n].copy_from_slice(&grid.forward_complex(&col));
        }
        Self { grid: grid.clone(), order, table, spec, parts }
    }

    /// Tabulate `f(j, ξ)` at node `j` and frequency `ξ`.
    pub fn from_fn(grid: &PeriodicGrid, order: f64, f: impl Fn(usize, f64) -> Complex64) -> Self {
        Self::from_parts(grid, vec![(order, f)])
    }

    /// Sum of homogeneous parts `(degree, f)`; the order is the largest degree.
    pub fn from_parts<F: Fn(usize, f64) -> Complex64>(grid: &PeriodicGrid, parts: Vec<(f64, F)>) -> Self {
        let (n, cols) = (grid.n(), Self::cols(grid));
        let half = (n / 2) as f64;
        let tabulated: Vec<(f64, Vec<Complex64>)> = parts
            .into_iter()
            .map(|(deg, f)| {
                let mut t = vec![Complex64::new(0.0, 0.0); n * cols];
                for j in 0..n {
                    for c in 0..cols {
                        t[j * cols + c] = f(j, c as f64 - half);
                    }
                }
                (deg, t)
            })
            .collect();
        let order = tabulated.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut table = vec![Complex64::new(0.0, 0.0); n * cols];
        for (_, t) in &tabulated {
            for (a, b) in table.iter_mut().zip(t) {
                *a += b;
            }
        }
        let parts = if tabulated.len() > 1 { tabulated } else { Vec::new() };
        Self::from_table(grid, order, table, parts)
    }

    /// Order-0 symbol `a(x)` independent of `ξ`.
    pub fn function(a: &SpectralField) -> Self {
        let vals = a.values().to_vec();
        Self::from_fn(a.grid(), 0.0, move |j, _| Complex64::new(vals[j], 0.0))
    }

    /// `ξ`-only symbol `m(ξ)` (a Fourier multiplier).
    pub fn multiplier(grid: &PeriodicGrid, order: f64, m: impl Fn(f64) -> Complex64) -> Self {
        Self::from_fn(grid, order, move |_, xi| m(xi))
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn order(&self) -> f64 {
        self.order
    }

    pub fn value(&self, j: usize, xi: i64) -> Complex64 {
        let cols = Self::cols(&self.grid);
        let c = (xi + self.grid.nyquist()) as usize;
        self.table[j * cols + c]
    }

    /// Homogeneous part of the given degree, if the symbol was built from parts.
    pub fn part(&self, degree: f64) -> Option<SymbolGrid> {
        self.parts
            .iter()
            .find(|(d, _)| *d == degree)
            .map(|(d, t)| Self::from_table(&self.grid, *d, t.clone(), Vec::new()))
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.parts.iter().map(|p| p.0).collect()
    }

    /// `max |a(x,−ξ) − conj a(x,ξ)|` over the table.
    pub fn reality_defect(&self) -> f64 {
        let n = self.grid.n() as i64;
        let mut worst = 0.0f64;
        for j in 0..self.grid.n() {
            for xi in -n / 2..=n / 2 {
                worst = worst.max((self.value(j, -xi) - self.value(j, xi).conj()).norm());
            }
        }
        worst
    }

    /// `max |a|` over the table.
    pub fn max_abs(&self) -> f64 {
        self.table.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    fn coeff(&self, k: i64, xi: i64) -> Complex64 {
        let n = self.grid.n();
        let c = (xi + self.grid.nyquist()) as usize;
        match self.grid.index(k) {
            Some(idx) => self.spec[c * n + idx],
            None => Complex64::new(0.0, 0.0),
        }
    }
}

/// Output coefficients of `T_a u` on the grid (before symmetrization).
fn quantize_coeffs(a: &SymbolGrid, u_coeffs: &[Complex64], grid: &PeriodicGrid, cutoff: &CutoffParams) -> Vec<Complex64> {
    let n = grid.n() as i64;
    let half = n / 2;
    let input = |xi: i64| -> Complex64 {
        if xi.abs() == half {
            u_coeffs[grid.index(half).expect("nyquist")] * 0.5
        } else {
            u_coeffs[grid.index(xi).expect("retained")]
        }
    };
    // accumulate on −n/2 … n/2, then fold −n/2 onto n/2
    let out: Vec<Complex64> = (-half..=half)
        .into_par_iter()
        .map(|o| {
            let mut acc = Complex64::new(0.0, 0.0);
            // k = o − η with χ(k, η) ≠ 0 needs |k| < eps2 |η|
            for xi in -half..=half {
                let k = o - xi;
                if k.abs() >= half {
                    continue;
                }
                let c = cutoff.chi(k as f64, xi as f64);
                if c == 0.0 {
                    continue;
                }
                acc += a.coeff(k, xi) * input(xi) * c;
            }
            acc
        })
        .collect();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.n()];
    for (idx, o) in (-half..=half).enumerate() {
        let target = if o == -half { half } else { o };
        coeffs[grid.index(target).expect("retained")] += out[idx];
    }
    coeffs
}

/// `T_a u` as complex nodal values (imaginary part is round-off for
/// real-quantizing symbols).
pub fn paradiff_apply_complex(a: &SymbolGrid, u: &SpectralField, cutoff: &CutoffParams) -> Vec<Complex64> {
    let grid = u.grid();
    grid.inverse_complex(&quantize_coeffs(a, u.coeffs(), grid, cutoff))
}

/// `T_a u` for a real-quantizing symbol.
pub fn paradiff_apply(a: &SymbolGrid, u: &SpectralField, cutoff: &CutoffParams) -> SpectralField {
    assert_eq!(a.grid().n(), u.n(), "symbol and field grids differ");
    let grid = u.grid();
    SpectralField::from_coeffs(grid, quantize_coeffs(a, u.coeffs(), grid, cutoff)).expect("grid-sized")
}

/// Paraproduct `T_a u` for a function `a(x)`.
pub fn paraproduct(a: &SpectralField, u: &SpectralField, cutoff: &CutoffParams) -> SpectralField {
    let grid = u.grid();
    let n = grid.n() as i64;
    let half = n / 2;
    let ac = a.coeffs();
    let uc = u.coeffs();
    let input = |xi: i64| {
        if xi.abs() == half {
            uc[grid.index(half).expect("nyquist")] * 0.5
        } else {
            uc[grid.index(xi).expect("retained")]
        }
    };
    let mut out = vec![Complex64::new(0.0, 0.0); grid.n()];
    for xi in -half..=half {
        let ui = input(xi);
        if ui == Complex64::new(0.0, 0.0) {
            continue;
        }
        for k in (-half + 1)..half {
            let c = cutoff.chi(k as f64, xi as f64);
            if c == 0.0 {
                continue;
            }
            let o = xi + k;
            if o.abs() > half {
                continue;
            }
            let target = if o == -half { half } else { o };
            out[grid.index(target).expect("retained")] += ac[grid.index(k).expect("retained")] * ui * c;
        }
    }
    SpectralField::from_coeffs(grid, out).expect("grid-sized")
}

/// Bony remainder `ab − T_a b − T_b a`.
pub fn bony_remainder(a: &SpectralField, b: &SpectralField, cutoff: &CutoffParams) -> SpectralField {
    &(&a.mul(b) - &paraproduct(a, b, cutoff)) - &paraproduct(b, a, cutoff)
}

/// `(u, u′)` with `u = 1 + η_x²`, `u′ = 2η_xη_xx`, and `η_x`, `η_xx`.
struct SlopeData {
    ex: Vec<f64>,
    exx: Vec<f64>,
    u: Vec<f64>,
    up: Vec<f64>,
}

impl SlopeData {
    fn new(eta: &SpectralField) -> Self {
        let ex = eta.dx().into_values();
        let exx = eta.dxx().into_values();
        let u = ex.iter().map(|e| 1.0 + e * e).collect();
        let up = ex.iter().zip(&exx).map(|(a, b)| 2.0 * a * b).collect();
        Self { ex, exx, u, up }
    }
}

/// Default smoothing depth `δ = min(h₀/(2h), 0.4)` for the factorization of
/// the flattened Laplacian.
pub fn default_delta(params: &PhysicalParams) -> f64 {
    (params.h0 / (2.0 * params.h)).min(0.4)
}

fn i() -> Complex64 {
    Complex64::new(0.0, 1.0)
}

/// Sub-principal part `λ^{(0)}` at one node from the factorization
/// `M = M^{(1)} + M^{(0)}` of the vertical symbol.
fn lambda0_at(ex: f64, exx: f64, delta: f64, xi: f64) -> Complex64 {
    if xi == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let u = 1.0 + ex * ex;
    let (ax, sg) = (xi.abs(), xi.signum());
    let m1 = (i() * xi * ex + ax) * (delta / u);
    let dx_m1 = (i() * xi * exx * u - (i() * xi * ex + ax) * (2.0 * ex * exx)) * (delta / (u * u));
    let dxi_m1 = (i() * ex + sg) * (delta / u);
    let bc = -2.0 * delta * ex / u;
    let cc = delta * exx / u;
    let m0 = (i() * dxi_m1 * dx_m1 - bc * dx_m1 + cc * m1) / (i() * bc * xi + m1 * 2.0);
    m0 * (u / delta)
}

/// Symbol `λ = λ^{(1)} + λ^{(0)}` of the Dirichlet–Neumann operator,
/// `λ = (1+η_x²)M/δ − iη_xξ`. The principal part is assembled from
/// `M^{(1)} = δ(iξη_x + |ξ|)/(1+η_x²)` and reduces to `|ξ|`.
pub fn lambda_symbol(eta: &SpectralField, delta: f64, params: &PhysicalParams) -> Result<SymbolGrid, ParadiffError> {
    let bound = params.h0 / params.h;
    if !(delta > 0.0 && delta < bound) {
        return Err(ParadiffError::BadDelta { delta, bound });
    }
    let s = SlopeData::new(eta);
    let principal = |j: usize, xi: f64| {
        let (ex, u) = (s.ex[j], s.u[j]);
        let m1 = (i() * xi * ex + xi.abs()) * (delta / u);
        m1 * (u / delta) - i() * ex * xi
    };
    let sub = |j: usize, xi: f64| lambda0_at(s.ex[j], s.exx[j], delta, xi);
    Ok(SymbolGrid::from_parts(
        eta.grid(),
        vec![(1.0, Box::new(principal) as Box<dyn Fn(usize, f64) -> Complex64>), (0.0, Box::new(sub))],
    ))
}

/// Curvature symbol `h = ξ²(1+η_x²)^{−3/2} − (i/2)∂_x∂_ξ(·)`, i.e.
/// `h^{(1)} = (3/2) i ξ (1+η_x²)^{−5/2} 2η_xη_xx`.
pub fn h_symbol(eta: &SpectralField) -> SymbolGrid {
    let s = SlopeData::new(eta);
    let h2 = |j: usize, xi: f64| Complex64::new(xi * xi * s.u[j].powf(-1.5), 0.0);
    let h1 = |j: usize, xi: f64| i() * (1.5 * xi * s.u[j].powf(-2.5) * s.up[j]);
    SymbolGrid::from_parts(
        eta.grid(),
        vec![(2.0, Box::new(h2) as Box<dyn Fn(usize, f64) -> Complex64>), (1.0, Box::new(h1))],
    )
}

/// Symmetrizer symbols.
#[derive(Clone, Debug)]
pub struct Symmetrizer {
    pub p: SymbolGrid,
    pub q: SymbolGrid,
    pub theta: SymbolGrid,
}

/// Symbols `(p, q, ϑ)` with `T_pT_λ ∼ T_ϑT_q`, `T_q κT_h ∼ T_ϑT_p`,
/// `T_ϑ ∼ T_ϑ^*`:
///
/// ```text
/// q = u^{1/4},  p = √κ u^{−1/2}|ξ|^{1/2} + p^{(−1/2)},
/// ϑ = √κ u^{−3/4}|ξ|^{3/2} + √κ u^{−3/4}|ξ|^{1/2} Re λ^{(0)}/2 − (i/2)∂_ξ∂_x ϑ^{(3/2)}
/// ```
///
/// with `u = 1 + η_x²` and
/// `p^{(−1/2)} = [ϑ^{(1/2)} q + (1/i)∂_ξϑ^{(3/2)}∂_x q − p^{(1/2)}λ^{(0)}] / |ξ|`.
pub fn symmetrizer(eta: &SpectralField, delta: f64, params: &PhysicalParams) -> Result<Symmetrizer, ParadiffError> {
    let kappa = params.kappa;
    if !(kappa > 0.0) {
        return Err(ParadiffError::NoSurfaceTension { kappa });
    }
    let bound = params.h0 / params.h;
    if !(delta > 0.0 && delta < bound) {
        return Err(ParadiffError::BadDelta { delta, bound });
    }
    let s = SlopeData::new(eta);
    let sk = kappa.sqrt();
    let lam0 = |j: usize, xi: f64| lambda0_at(s.ex[j], s.exx[j], delta, xi);
    let q = |j: usize, _: f64| Complex64::new(s.u[j].powf(0.25), 0.0);
    let dxq = |j: usize| 0.25 * s.u[j].powf(-0.75) * s.up[j];
    let th32 = |j: usize, xi: f64| Complex64::new(sk * s.u[j].powf(-0.75) * xi.abs().powf(1.5), 0.0);
    let dxi_th32 = |j: usize, xi: f64| sk * s.u[j].powf(-0.75) * 1.5 * xi.abs().sqrt() * xi.signum();
    let th12 = |j: usize, xi: f64| {
        let u = s.u[j];
        let re = sk * u.powf(-0.75) * xi.abs().sqrt() * lam0(j, xi).re / 2.0;
        // ∂_ξ∂_x ϑ^{(3/2)} = √κ (3/2)|ξ|^{1/2} sgn ξ · (−3/4) u^{−7/4} u′
        let mixed = sk * 1.5 * xi.abs().sqrt() * xi.signum() * (-0.75) * u.powf(-1.75) * s.up[j];
        Complex64::new(re, 0.0) - i() * (0.5 * mixed)
    };
    let p12 = |j: usize, xi: f64| Complex64::new(sk * s.u[j].powf(-0.5) * xi.abs().sqrt(), 0.0);
    let pm12 = |j: usize, xi: f64| {
        if xi == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let num = th12(j, xi) * q(j, xi).re - i() * (dxi_th32(j, xi) * dxq(j)) - p12(j, xi) * lam0(j, xi);
        num / xi.abs()
    };
    type Part<'a> = Box<dyn Fn(usize, f64) -> Complex64 + 'a>;
    let grid = eta.grid();
    let p = SymbolGrid::from_parts(grid, vec![(0.5, Box::new(p12) as Part), (-0.5, Box::new(pm12))]);
    let qs = SymbolGrid::from_fn(grid, 0.0, q);
    let theta = SymbolGrid::from_parts(grid, vec![(1.5, Box::new(th32) as Part), (0.5, Box::new(th12))]);
    Ok(Symmetrizer { p, q: qs, theta })
}

/// Dense real matrix of `u ↦ T_a u` on nodal values (column `c` is `T_a e_c`).
pub fn operator_matrix(a: &SymbolGrid, cutoff: &CutoffParams) -> Vec<Vec<f64>> {
    let grid = a.grid();
    (0..grid.n())
        .map(|c| {
            let mut e = vec![0.0; grid.n()];
            e[c] = 1.0;
            let f = SpectralField::from_values(grid, e).expect("grid-sized");
            paradiff_apply(a, &f, cutoff).into_values()
        })
        .collect()
}

/// `T_a^* u` under the pairing `(2π/n)Σ f g`, from the operator matrix.
pub fn adjoint_apply(columns: &[Vec<f64>], u: &SpectralField) -> SpectralField {
    let vals = columns
        .iter()
        .map(|col| col.iter().zip(u.values()).map(|(a, b)| a * b).sum())
        .collect();
    SpectralField::from_values(u.grid(), vals).expect("grid-sized")
}

/// Relative defects of the three symmetrizer relations on a probe `v`:
/// `‖T_pT_λv − T_ϑT_qv‖/‖T_pT_λv‖`, `‖T_qκT_hv − T_ϑT_pv‖/‖T_qκT_hv‖`,
/// `‖(T_ϑ − T_ϑ^*)v‖/‖T_ϑv‖`.
pub fn symmetrizer_defects(
    sym: &Symmetrizer,
    lambda: &SymbolGrid,
    h: &SymbolGrid,
    kappa: f64,
    theta_matrix: &[Vec<f64>],
    v: &SpectralField,
    cutoff: &CutoffParams,
) -> [f64; 3] {
    let t = |a: &SymbolGrid, f: &SpectralField| paradiff_apply(a, f, cutoff);
    let lhs1 = t(&sym.p, &t(lambda, v));
    let rhs1 = t(&sym.theta, &t(&sym.q, v));
    let lhs2 = t(&sym.q, &t(h, v)).scale(kappa);
    let rhs2 = t(&sym.theta, &t(&sym.p, v));
    let tv = t(&sym.theta, v);
    let adj = adjoint_apply(theta_matrix, v);
    [
        (&lhs1 - &rhs1).l2_norm() / lhs1.l2_norm(),
        (&lhs2 - &rhs2).l2_norm() / lhs2.l2_norm(),
        (&tv - &adj).l2_norm() / tv.l2_norm(),
    ]
}

/// Mollifier `J_ε`: the symbol `exp(−ε|ξ|^{3/2})` has no `x`-dependence, so its
/// correction term vanishes and `J_ε` is the Fourier multiplier itself.
pub fn mollifier_apply(eps: f64, u: &SpectralField) -> Result<SpectralField, ParadiffError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(ParadiffError::BadMollifier { eps });
    }
    if eps == 0.0 {
        return Ok(u.clone());
    }
    Ok(u.apply_radial(|k| (-eps * k.powf(1.5)).exp()))
}

/// Principal part `T_λω − T_Vη_x` of `G(η,β,γ)ψ` and the remainder.
#[derive(Clone, Debug)]
pub struct Paralinearization {
    pub g: SpectralField,
    pub principal: SpectralField,
    pub remainder: SpectralField,
}

pub fn paralinearize_g(
    fam: &DnoFamily,
    params: &PhysicalParams,
    psi: &SpectralField,
    delta: f64,
    cutoff: &CutoffParams,
) -> Result<Paralinearization, ParadiffError> {
    let eta = fam.eta();
    let g = fam.g_full(params.gamma, psi)?;
    let (b, v) = fam.b_v_from(&g, psi);
    let omega = psi - &paraproduct(&b, eta, cutoff);
    let lambda = lambda_symbol(eta, delta, params)?;
    let principal = &paradiff_apply(&lambda, &omega, cutoff) - &paraproduct(&v, &eta.dx(), cutoff);
    let remainder = &g - &principal;
    Ok(Paralinearization { g, principal, remainder })
}

/// Residuals of the paralinearized and symmetrized systems at one state.
#[derive(Clone, Debug)]
pub struct ParalinResiduals {
    /// `η_t + T_{V−γη}η_x − T_λω`
    pub f: SpectralField,
    /// `ω_t + T_{V−γη}ω_x + κT_hη`
    pub g: SpectralField,
    /// `∂_tΦ₁ + T_{V−γη}∂_xΦ₁ − T_ϑΦ₂` with `Φ₁ = T_pη`
    pub f_sym: SpectralField,
    /// `∂_tΦ₂ + T_{V−γη}∂_xΦ₂ + T_ϑΦ₁` with `Φ₂ = T_qω`
    pub g_sym: SpectralField,
}

/// Evaluate the residuals using the evolution right-hand side for the time
/// derivatives. `ω_t`, `∂_tΦ₁`, `∂_tΦ₂` are central differences of the maps
/// `s ↦ ω(s), Φ(s)` along the flow direction with step `fd_step` (time units).
pub fn paralin_system_residuals(
    evolver: &crate::evolution::Evolver,
    state: &crate::evolution::SurfaceState,
    delta: f64,
    cutoff: &CutoffParams,
    fd_step: f64,
) -> Result<ParalinResiduals, ParadiffError> {
    let params = evolver.params();
    let gamma = params.gamma;
    let (eta, psi) = (&state.eta, &state.psi);
    let (eta_t, psi_t) = evolver.rhs(state).map_err(|e| ParadiffError::Evolution(Box::new(e)))?;
    // quantities depending on the state
    let pieces = |e: &SpectralField, p: &SpectralField| -> Result<(SpectralField, SpectralField, SpectralField, SpectralField), ParadiffError> {
        let fam = evolver.family_at(e)?;
        let g = fam.g_full(gamma, p)?;
        let (b, v) = fam.b_v_from(&g, p);
        let omega = p - &paraproduct(&b, e, cutoff);
        let sym = symmetrizer(e, delta, params)?;
        let phi1 = paradiff_apply(&sym.p, e, cutoff);
        let phi2 = paradiff_apply(&sym.q, &omega, cutoff);
        Ok((v, omega, phi1, phi2))
    };
    let (v, omega, phi1, phi2) = pieces(eta, psi)?;
    let (_, om_p, p1_p, p2_p) = pieces(&eta.axpy(fd_step, &eta_t), &psi.axpy(fd_step, &psi_t))?;
    let (_, om_m, p1_m, p2_m) = pieces(&eta.axpy(-fd_step, &eta_t), &psi.axpy(-fd_step, &psi_t))?;
    let ddt = |p: &SpectralField, m: &SpectralField| (p - m).scale(0.5 / fd_step);
    let omega_t = ddt(&om_p, &om_m);
    let transport = &v - &eta.scale(gamma);
    let lambda = lambda_symbol(eta, delta, params)?;
    let h = h_symbol(eta);
    let sym = symmetrizer(eta, delta, params)?;
    let tv = |f: &SpectralField| paraproduct(&transport, &f.dx(), cutoff);
    let f = &(&eta_t + &tv(eta)) - &paradiff_apply(&lambda, &omega, cutoff);
    let g = &(&omega_t + &tv(&omega)) + &paradiff_apply(&h, eta, cutoff).scale(params.kappa);
    let f_sym = &(&ddt(&p1_p, &p1_m) + &tv(&phi1)) - &paradiff_apply(&sym.theta, &phi2, cutoff);
    let g_sym = &(&ddt(&p2_p, &p2_m) + &tv(&phi2)) + &paradiff_apply(&sym.theta, &phi1, cutoff);
    Ok(ParalinResiduals { f, g, f_sym, g_sym })
}

/// Linear-in-state parts carried by the residuals `(f, g)`:
/// `((G₀ − |D|)ψ, −gη + γ∂_x^{−1}G₀ψ)` where `G₀` is the operator at `η = 0`.
/// These are smoothing (resp. lower order) and are not absorbed by the
/// paralinearization.
pub fn paralin_linear_parts(
    base: &DnoFamily,
    params: &PhysicalParams,
    eta: &SpectralField,
    psi: &SpectralField,
) -> Result<(SpectralField, SpectralField), ParadiffError> {
    let g0 = base.g_dn(psi)?;
    let f_lin = &g0 - &psi.apply_radial(|k| k);
    let g_lin = &eta.scale(-params.g) + &g0.dx_inv_projected().scale(params.gamma);
    Ok((f_lin, g_lin))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    fn params() -> PhysicalParams {
        PhysicalParams { g: 1.0, h: 1.0, kappa: 1.0, gamma: 0.0, h0: 0.5 }
    }

    #[test]
    fn cutoff_shape_and_symmetry() {
        let c = CutoffParams::default();
        assert_eq!(c.chi(0.0, 0.0), 1.0);
        assert_eq!(c.chi(1.0, 0.0), 0.0);
        assert_eq!(c.chi(2.0, 10.0), 1.0);
        assert_eq!(c.chi(5.0, 10.0), 0.0);
        let mut last = 1.0;
        for t in 0..=30 {
            let v = c.chi(2.0 + 0.1 * t as f64, 10.0);
            assert!(v <= last + 1e-15);
            last = v;
        }
        for &(a, b) in &[(1.0, 4.0), (3.0, 9.0), (2.0, 7.0)] {
            assert_eq!(c.chi(a, b), c.chi(-a, -b));
            assert_eq!(c.chi(a, b), c.chi(-a, b));
        }
        assert!(CutoffParams::new(0.5, 0.2).is_err());
    }

    #[test]
    fn identity_symbol() {
        let g = grid(32);
        let one = SymbolGrid::multiplier(&g, 0.0, |_| Complex64::new(1.0, 0.0));
        let u = SpectralField::from_fn(&g, |x| 1.0 + x.cos() + (16.0 * x).cos() + (5.0 * x).sin());
        let out = paradiff_apply(&one, &u, &CutoffParams::default());
        assert!((&out - &u).max_abs() < 1e-13);
        let z = paradiff_apply(&one, &SpectralField::zeros(&g), &CutoffParams::default());
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn low_high_product_is_exact() {
        let g = grid(64);
        let a = SpectralField::from_fn(&g, |x| x.cos());
        let u = SpectralField::from_fn(&g, |x| (10.0 * x).cos());
        let c = CutoffParams::default();
        let out = paradiff_apply(&SymbolGrid::function(&a), &u, &c);
        assert!((&out - &a.mul(&u)).max_abs() < 1e-13);
        assert!((&paraproduct(&a, &u, &c) - &out).max_abs() < 1e-13);
        let out = paradiff_apply(&SymbolGrid::function(&a), &a, &c);
        assert!(out.max_abs() < 1e-15);
    }

    #[test]
    fn lambda_principal_is_abs_xi_and_subprincipal_vanishes() {
        let g = grid(32);
        let eta = SpectralField::from_fn(&g, |x| 0.2 * x.cos() + 0.05 * (3.0 * x).sin());
        for &delta in &[0.1, 0.25, 0.4] {
            let lam = lambda_symbol(&eta, delta, &params()).unwrap();
            let p1 = lam.part(1.0).unwrap();
            let p0 = lam.part(0.0).unwrap();
            for j in 0..32 {
                for xi in -16..=16 {
                    let v = p1.value(j, xi);
                    assert!((v.re - xi.abs() as f64).abs() < 1e-13 * (1.0 + xi.abs() as f64));
                    assert!(v.im.abs() < 1e-13 * (1.0 + xi.abs() as f64));
                    assert!(p0.value(j, xi).norm() < 1e-13);
                }
            }
        }
        assert!(lambda_symbol(&eta, 0.6, &params()).is_err());
    }

    #[test]
    fn lambda_at_rest_matches_deep_multiplier() {
        let g = grid(64);
        let lam = lambda_symbol(&SpectralField::zeros(&g), 0.25, &params()).unwrap();
        let u = SpectralField::from_fn(&g, |x| (12.0 * x).cos() + (9.0 * x).sin());
        let a = paradiff_apply(&lam, &u, &CutoffParams::default());
        let b = u.apply_radial(|k| k * k.tanh());
        assert!((&a - &b).max_abs() < 1e-6);
    }

    #[test]
    fn h_symbol_values() {
        let g = grid(32);
        let h0 = h_symbol(&SpectralField::zeros(&g));
        assert_eq!(h0.value(3, 5), Complex64::new(25.0, 0.0));
        assert_eq!(h0.part(1.0).unwrap().max_abs(), 0.0);
        let a = 0.3;
        let h = h_symbol(&SpectralField::from_fn(&g, |x| a * x.cos()));
        let j = 8; // x = π/2, η_x = −a, η_xx = 0
        let v = h.part(2.0).unwrap().value(j, 4);
        assert!((v.re - 16.0 / (1.0 + a * a).powf(1.5)).abs() < 1e-12);
        assert!(h.part(1.0).unwrap().value(j, 4).norm() < 1e-12);
        assert!(h.reality_defect() < 1e-14);
    }

    #[test]
    fn curvature_paralinearization_is_quadratic() {
        let g = grid(64);
        let shape = SpectralField::from_fn(&g, |x| x.cos() + 0.3 * (2.0 * x).sin());
        let c = CutoffParams::default();
        let rem = |a: f64| {
            let eta = shape.scale(a);
            let ex = eta.dx();
            let curv = ex.map(|e| e / (1.0 + e * e).sqrt()).dx();
            (&curv + &paradiff_apply(&h_symbol(&eta), &eta, &c)).l2_norm()
        };
        let (r1, r2) = (rem(1e-2), rem(5e-3));
        let slope = (r1 / r2).log2();
        assert!(slope > 1.8, "slope {slope}");
    }

    #[test]
    fn symmetrizer_at_rest() {
        let g = grid(32);
        let p = PhysicalParams { kappa: 1.0, ..params() };
        let s = symmetrizer(&SpectralField::zeros(&g), 0.25, &p).unwrap();
        for j in [0, 7, 19] {
            for xi in [-16i64, -3, 0, 2, 11] {
                let k = xi.abs() as f64;
                assert!((s.q.value(j, xi) - 1.0).norm() < 1e-15);
                assert!((s.theta.value(j, xi).re - k.powf(1.5)).abs() < 1e-12);
                assert!((s.p.value(j, xi).re - k.sqrt()).abs() < 1e-12);
            }
        }
        let pk = PhysicalParams { kappa: 0.0, ..params() };
        assert!(symmetrizer(&SpectralField::zeros(&g), 0.25, &pk).is_err());
    }

    #[test]
    fn symmetrizer_principal_relations_hold_exactly() {
        // principal symbols: p^{(1/2)}|ξ| = ϑ^{(3/2)}q and qκh^{(2)} = ϑ^{(3/2)}p^{(1/2)}
        let g = grid(32);
        let eta = SpectralField::from_fn(&g, |x| 0.2 * x.cos());
        let p = PhysicalParams { kappa: 0.7, ..params() };
        let s = symmetrizer(&eta, 0.25, &p).unwrap();
        let (p12, th32) = (s.p.part(0.5).unwrap(), s.theta.part(1.5).unwrap());
        let h2 = h_symbol(&eta).part(2.0).unwrap();
        for j in 0..32 {
            for xi in -16i64..=16 {
                let k = xi.abs() as f64;
                let r1 = p12.value(j, xi) * k - th32.value(j, xi) * s.q.value(j, xi);
                let r2 = s.q.value(j, xi) * h2.value(j, xi) * 0.7 - th32.value(j, xi) * p12.value(j, xi);
                assert!(r1.norm() < 1e-12 * (1.0 + k * k) && r2.norm() < 1e-12 * (1.0 + k * k));
            }
        }
        assert!(s.p.reality_defect() < 1e-13 && s.theta.reality_defect() < 1e-13);
    }

    #[test]
    fn mollifier_examples() {
        let g = grid(32);
        let u = SpectralField::from_fn(&g, |x| (3.0 * x).cos() + 0.5);
        assert_eq!(mollifier_apply(0.0, &u).unwrap().values(), u.values());
        let out = mollifier_apply(1.0, &u).unwrap();
        let expect = SpectralField::from_fn(&g, |x| (-(3f64.powf(1.5))).exp() * (3.0 * x).cos() + 0.5);
        assert!((&out - &expect).max_abs() < 1e-14);
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let d = (&mollifier_apply(eps, &u).unwrap() - &u).l2_norm();
            assert!(d < last);
            last = d;
        }
        assert!(mollifier_apply(1.5, &u).is_err());
    }

    #[test]
    fn adjoint_of_real_multiplier_is_itself() {
        let g = grid(16);
        let c = CutoffParams::default();
        let sym = SymbolGrid::multiplier(&g, 1.0, |xi| Complex64::new(xi.abs(), 0.0));
        let mat = operator_matrix(&sym, &c);
        let u = SpectralField::from_fn(&g, |x| x.sin() + (3.0 * x).cos());
        assert!((&adjoint_apply(&mat, &u) - &paradiff_apply(&sym, &u, &c)).max_abs() < 1e-13);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn band_limited(g: &PeriodicGrid, c: &[f64]) -> SpectralField {
        SpectralField::from_fn(g, |x| {
            c.iter().enumerate().map(|(k, a)| a * ((k as f64 + 1.0) * x + k as f64).cos()).sum()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn quantization_of_real_symbols_is_real(
            ea in -0.3f64..0.3, coeffs in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let g = PeriodicGrid::new(32).unwrap();
            let eta = SpectralField::from_fn(&g, |x| ea * x.cos() + 0.5 * ea * (2.0 * x).sin());
            let u = band_limited(&g, &coeffs);
            let c = CutoffParams::default();
            let p = PhysicalParams { g: 1.0, h: 1.0, kappa: 0.5, gamma: 0.0, h0: 0.5 };
            let sym = symmetrizer(&eta, 0.2, &p).unwrap();
            for a in [&h_symbol(&eta), &lambda_symbol(&eta, 0.2, &p).unwrap(), &sym.p, &sym.theta] {
                let out = paradiff_apply_complex(a, &u, &c);
                let im = out.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
                let re = out.iter().map(|v| v.re.abs()).fold(1.0, f64::max);
                prop_assert!(im <= 1e-13 * re);
            }
        }

        #[test]
        fn bony_remainder_decays_with_separation(a0 in 0.5f64..1.5, a1 in -0.5f64..0.5) {
            // smooth low-frequency a against probes e^{iNx} at N = 8, 16, 32
            let g = PeriodicGrid::new(128).unwrap();
            let a = SpectralField::from_fn(&g, |x| a0 * (x.cos()).exp() + a1 * (2.0 * x).sin());
            let c = CutoffParams::default();
            let norms: Vec<f64> = [8.0, 16.0, 32.0]
                .iter()
                .map(|&n| {
                    let u = SpectralField::from_fn(&g, |x| (n * x).cos());
                    bony_remainder(&a, &u, &c).l2_norm()
                })
                .collect();
            prop_assert!(norms[1] < norms[0] && norms[2] < norms[1], "{norms:?}");
        }
    }
}
