//! Collocation solver for the straightened Laplace problem
//!
//! ```text
//! Δ^Σ φ̃ = 0                                   in T × (−h, 0)
//! φ̃ = ψ                                       at w = 0
//! β_x ∂_x φ̃ − (1+β_x²)/(1+σ_w) ∂_w φ̃ = θ      at w = −h
//! ```
//!
//! Fourier collocation in `x`, Chebyshev–Gauss–Lobatto in `w`, one dense
//! `(n·m) × (n·m)` system factored once per geometry and reused for every
//! right-hand side. Unknown `(x_j, w_i)` sits at index `j·m + i`.

use std::sync::Arc;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use thiserror::Error;

use crate::grid_spectral::{GridError, PeriodicGrid, SpectralField, VerticalGrid};
use crate::straightening::{flatten_coeffs, tensor_derivatives, Diffeomorphism, FlatteningCoeffs};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error("collocation matrix is ill-conditioned: estimated condition {cond:e} exceeds {cond_max:e}")]
    IllConditioned { cond: f64, cond_max: f64 },
    #[error("collocation matrix is singular or produced non-finite values")]
    Singular,
    #[error("{equation} residual {residual:e} exceeds tolerance {tol:e}")]
    ResidualTooLarge { equation: &'static str, residual: f64, tol: f64 },
    #[error("datum lives on a grid of size {got}, solver expects {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Solver thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvpConfig {
    /// Largest accepted relative residual of any of the three equations.
    pub tol: f64,
    /// Largest accepted (row-equilibrated) 1-norm condition estimate.
    pub cond_max: f64,
}

impl Default for BvpConfig {
    fn default() -> Self {
        Self { tol: 1e-9, cond_max: 1e12 }
    }
}

/// Bottom flux datum `θ` of the Neumann condition.
#[derive(Clone, Debug)]
pub struct NeumannData {
    pub theta: SpectralField,
}

impl NeumannData {
    pub fn new(theta: SpectralField) -> Self {
        Self { theta }
    }

    pub fn zero(grid: &PeriodicGrid) -> Self {
        Self { theta: SpectralField::zeros(grid) }
    }
}

#[derive(Debug)]
struct Geometry {
    diffeo: Diffeomorphism,
    coeffs: FlatteningCoeffs,
}

/// Circulant spectral differentiation stencil: row `j`, column `j'` of the
/// matrix is `stencil[(j − j') mod n]`.
fn circulant_stencil(grid: &PeriodicGrid, second: bool) -> Vec<f64> {
    let mut e0 = vec![0.0; grid.n()];
    e0[0] = 1.0;
    let f = SpectralField::from_values(grid, e0).expect("grid-sized vector");
    if second { f.dxx() } else { f.dx() }.into_values()
}

/// Factored collocation system for one geometry `(η, β)`.
pub struct BvpSystem {
    geom: Arc<Geometry>,
    lu: PartialPivLu<f64>,
    row_scale: Vec<f64>,
    cond: f64,
    config: BvpConfig,
}

impl std::fmt::Debug for BvpSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BvpSystem")
            .field("n", &self.geom.diffeo.n())
            .field("m", &self.geom.diffeo.m())
            .field("cond", &self.cond)
            .finish()
    }
}

impl BvpSystem {
    pub fn new(diffeo: Diffeomorphism, config: BvpConfig) -> Result<Self, BvpError> {
        let coeffs = flatten_coeffs(&diffeo);
        let grid = diffeo.grid().clone();
        let vgrid = diffeo.vgrid().clone();
        let (n, m) = (grid.n(), vgrid.m());
        let size = n * m;
        let dx = circulant_stencil(&grid, false);
        let dxx = circulant_stencil(&grid, true);
        let dw = vgrid.d();
        let dww = vgrid.d2();
        let sx = diffeo.sigma_x();
        let sw = diffeo.sigma_w();
        let (a, b, c) = (&coeffs.a, &coeffs.b, &coeffs.c);
        let entry = |r: usize, col: usize| -> f64 {
            let (j, i) = (r / m, r % m);
            let (jp, ip) = (col / m, col % m);
            let circ = (j + n - jp) % n;
            if i == 0 {
                return if r == col { 1.0 } else { 0.0 };
            }
            if i == m - 1 {
                // σ_x at the bottom row is β_x
                let bx = sx[r];
                let mut v = 0.0;
                if ip == i {
                    v += bx * dx[circ];
                }
                if jp == j {
                    v -= (1.0 + bx * bx) / (1.0 + sw[r]) * dw[i * m + ip];
                }
                return v;
            }
            let mut v = b[r] * dx[circ] * dw[i * m + ip];
            if jp == j {
                v += a[r] * dww[i * m + ip] - c[r] * dw[i * m + ip];
            }
            if ip == i {
                v += dxx[circ];
            }
            v
        };
        // equilibrate rows so that boundary and interior equations are comparable
        let row_scale: Vec<f64> = (0..size)
            .map(|r| {
                let mx = (0..size).map(|col| entry(r, col).abs()).fold(0.0, f64::max);
                if mx > 0.0 { 1.0 / mx } else { 1.0 }
            })
            .collect();
        let mat = Mat::<f64>::from_fn(size, size, |r, col| row_scale[r] * entry(r, col));
        let norm1 = (0..size)
            .map(|col| mat.col(col).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let lu = mat.partial_piv_lu();
        let inv_norm = hager_inverse_norm1(&lu, size);
        let cond = norm1 * inv_norm;
        if !cond.is_finite() {
            return Err(BvpError::Singular);
        }
        if cond > config.cond_max {
            return Err(BvpError::IllConditioned { cond, cond_max: config.cond_max });
        }
        log::debug!("bvp system n={n} m={m}: condition estimate {cond:.3e}");
        Ok(Self { geom: Arc::new(Geometry { diffeo, coeffs }), lu, row_scale, cond, config })
    }

    pub fn with_defaults(diffeo: Diffeomorphism) -> Result<Self, BvpError> {
        Self::new(diffeo, BvpConfig::default())
    }

    pub fn diffeo(&self) -> &Diffeomorphism {
        &self.geom.diffeo
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.geom.diffeo.grid()
    }

    pub fn vgrid(&self) -> &VerticalGrid {
        self.geom.diffeo.vgrid()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.cond
    }

    pub fn config(&self) -> BvpConfig {
        self.config
    }

    /// Solve for several `(ψ, θ)` pairs with one multi-column back-substitution.
    pub fn solve_many(&self, data: &[(&SpectralField, &SpectralField)]) -> Result<Vec<FlattenedPotential>, BvpError> {
        let (n, m) = (self.grid().n(), self.vgrid().m());
        for (psi, theta) in data {
            for f in [psi, theta] {
                if f.n() != n {
                    return Err(BvpError::GridMismatch { expected: n, got: f.n() });
                }
            }
        }
        let rhs = Mat::<f64>::from_fn(n * m, data.len(), |r, k| {
            let (j, i) = (r / m, r % m);
            let v = if i == 0 {
                data[k].0.values()[j]
            } else if i == m - 1 {
                data[k].1.values()[j]
            } else {
                0.0
            };
            v * self.row_scale[r]
        });
        let sol = self.lu.solve(&rhs);
        let mut out = Vec::with_capacity(data.len());
        for (k, (psi, theta)) in data.iter().enumerate() {
            let values: Vec<f64> = sol.col(k).iter().copied().collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(BvpError::Singular);
            }
            let phi = FlattenedPotential::new(self.geom.clone(), values, psi, theta);
            for (equation, residual) in [
                ("interior", phi.residual_norm),
                ("top Dirichlet", phi.top_residual),
                ("bottom Neumann", phi.bottom_residual),
            ] {
                if residual > self.config.tol {
                    return Err(BvpError::ResidualTooLarge { equation, residual, tol: self.config.tol });
                }
            }
            out.push(phi);
        }
        Ok(out)
    }

    pub fn solve(&self, psi: &SpectralField, theta: &SpectralField) -> Result<FlattenedPotential, BvpError> {
        Ok(self.solve_many(&[(psi, theta)])?.pop().expect("one solution"))
    }
}

/// Hager's estimate of `‖A⁻¹‖₁` from an LU factorization.
fn hager_inverse_norm1(lu: &PartialPivLu<f64>, size: usize) -> f64 {
    let mut x = Mat::<f64>::from_fn(size, 1, |_, _| 1.0 / size as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = lu.solve(&x);
        est = y.col(0).iter().map(|v| v.abs()).sum::<f64>();
        let sgn = Mat::<f64>::from_fn(size, 1, |r, _| if y[(r, 0)] >= 0.0 { 1.0 } else { -1.0 });
        let z = lu.solve_transpose(&sgn);
        let (jmax, zmax) = z
            .col(0)
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (r, v)| if v.abs() > acc.1 { (r, v.abs()) } else { acc });
        let ztx: f64 = (0..size).map(|r| z[(r, 0)] * x[(r, 0)]).sum();
        if zmax <= ztx {
            break;
        }
        x = Mat::<f64>::from_fn(size, 1, |r, _| if r == jmax { 1.0 } else { 0.0 });
    }
    est
}

/// Straightened potential `φ̃` on the tensor grid with its residual diagnostics.
#[derive(Clone, Debug)]
pub struct FlattenedPotential {
    geom: Arc<Geometry>,
    values: Vec<f64>,
    /// Relative max-norm of `Δ^Σ φ̃` over interior nodes.
    pub residual_norm: f64,
    /// Absolute max-norm of `Δ^Σ φ̃` over interior nodes.
    pub residual_abs: f64,
    pub top_residual: f64,
    pub bottom_residual: f64,
}

impl FlattenedPotential {
    fn new(geom: Arc<Geometry>, values: Vec<f64>, psi: &SpectralField, theta: &SpectralField) -> Self {
        let mut phi = Self {
            geom,
            values,
            residual_norm: 0.0,
            residual_abs: 0.0,
            top_residual: 0.0,
            bottom_residual: 0.0,
        };
        let (rel, abs) = phi.interior_residual();
        phi.residual_norm = rel;
        phi.residual_abs = abs;
        let top = phi.level(0);
        let vmax = phi.values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let scale = psi.max_abs().max(vmax).max(f64::MIN_POSITIVE);
        phi.top_residual = (&top - psi).max_abs() / scale;
        let (flux, mag) = phi.bottom_flux_with_scale();
        let h = phi.geom.diffeo.vgrid().depth();
        let scale = mag.max(theta.max_abs()).max(vmax / h).max(f64::MIN_POSITIVE);
        phi.bottom_residual = (&flux - theta).max_abs() / scale;
        phi
    }

    /// Build from explicit nodal values (e.g. an exact solution) on a geometry.
    pub fn from_values(system: &BvpSystem, values: Vec<f64>) -> Self {
        let grid = system.grid();
        let zero = SpectralField::zeros(grid);
        let mut phi = Self::new(system.geom.clone(), values, &zero, &zero);
        phi.top_residual = f64::NAN;
        phi.bottom_residual = f64::NAN;
        phi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diffeo(&self) -> &Diffeomorphism {
        &self.geom.diffeo
    }

    pub fn n(&self) -> usize {
        self.geom.diffeo.n()
    }

    pub fn m(&self) -> usize {
        self.geom.diffeo.m()
    }

    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.m() + i]
    }

    /// Values at vertical level `i` as a periodic field.
    pub fn level(&self, i: usize) -> SpectralField {
        self.geom.diffeo.level(&self.values, i)
    }

    fn derivatives(&self) -> [Vec<f64>; 5] {
        let d = &self.geom.diffeo;
        tensor_derivatives(d.grid(), d.vgrid(), &self.values)
    }

    /// `(relative, absolute)` max-norm of `Δ^Σ φ̃` over interior nodes. The
    /// relative value is a normwise backward error: the residual divided by
    /// `max (|A||φ̃|)` where `|A|` is the entrywise modulus of the collocated
    /// operator, so round-off in the differentiation matrices is not mistaken
    /// for a solver defect.
    pub fn interior_residual(&self) -> (f64, f64) {
        let [_, fw, fxx, fxw, fww] = self.derivatives();
        let c = &self.geom.coeffs;
        let m = self.m();
        let mut res = 0.0f64;
        for k in 0..self.values.len() {
            let i = k % m;
            if i == 0 || i == m - 1 {
                continue;
            }
            res = res.max((c.a[k] * fww[k] + fxx[k] + c.b[k] * fxw[k] - c.c[k] * fw[k]).abs());
        }
        let scale = self.abs_operator_scale();
        let rel = if scale > 0.0 { res / scale } else { res };
        (rel, res)
    }

    /// `max_k (|A||φ̃|)_k` over interior rows.
    fn abs_operator_scale(&self) -> f64 {
        let d = &self.geom.diffeo;
        let c = &self.geom.coeffs;
        let (n, m) = (self.n(), self.m());
        let vg = d.vgrid();
        let dx: Vec<f64> = circulant_stencil(d.grid(), false).iter().map(|v| v.abs()).collect();
        let dxx: Vec<f64> = circulant_stencil(d.grid(), true).iter().map(|v| v.abs()).collect();
        let dw: Vec<f64> = vg.d().iter().map(|v| v.abs()).collect();
        let dww: Vec<f64> = vg.d2().iter().map(|v| v.abs()).collect();
        let abs: Vec<f64> = self.values.iter().map(|v| v.abs()).collect();
        let along_w = |op: &[f64], data: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * m];
            for j in 0..n {
                for i in 0..m {
                    out[j * m + i] = (0..m).map(|ip| op[i * m + ip] * data[j * m + ip]).sum();
                }
            }
            out
        };
        let along_x = |op: &[f64], data: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * m];
            for j in 0..n {
                for jp in 0..n {
                    let w = op[(j + n - jp) % n];
                    for i in 0..m {
                        out[j * m + i] += w * data[jp * m + i];
                    }
                }
            }
            out
        };
        let aw = along_w(&dw, &abs);
        let aww = along_w(&dww, &abs);
        let axx = along_x(&dxx, &abs);
        let axw = along_x(&dx, &aw);
        let mut scale = 0.0f64;
        for k in 0..n * m {
            let i = k % m;
            if i == 0 || i == m - 1 {
                continue;
            }
            let s = c.a[k].abs() * aww[k] + axx[k] + c.b[k].abs() * axw[k] + c.c[k].abs() * aw[k];
            scale = scale.max(s);
        }
        scale
    }

    /// `∂_w^Σ φ̃ = ∂_wφ̃/(1+σ_w)` and `∂_x^Σ φ̃ = ∂_xφ̃ − σ_x ∂_w^Σ φ̃` at level `i`.
    fn physical_gradient(&self, i: usize, fx: &[f64], fw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = &self.geom.diffeo;
        let m = self.m();
        (0..self.n())
            .map(|j| {
                let k = j * m + i;
                let py = fw[k] / (1.0 + d.sigma_w()[k]);
                (fx[k] - d.sigma_x()[k] * py, py)
            })
            .unzip()
    }

    /// Bottom flux and the scale used to judge it: the largest gradient
    /// component anywhere in the strip.
    fn bottom_flux_with_scale(&self) -> (SpectralField, f64) {
        let [fx, fw, ..] = self.derivatives();
        let i = self.m() - 1;
        let (px, py) = self.physical_gradient(i, &fx, &fw);
        let d = &self.geom.diffeo;
        let m = self.m();
        let mut mag = fx.iter().chain(&fw).fold(0.0f64, |s, v| s.max(v.abs()));
        let vals = (0..self.n())
            .map(|j| {
                let bx = d.sigma_x()[j * m + i];
                mag = mag.max((bx * px[j]).abs()).max(py[j].abs());
                bx * px[j] - py[j]
            })
            .collect();
        (SpectralField::from_values(d.grid(), vals).expect("grid-sized"), mag)
    }

    /// `∇φ·(−η_x, 1)` at the free surface.
    pub fn top_neumann(&self) -> SpectralField {
        let [fx, fw, ..] = self.derivatives();
        let (px, py) = self.physical_gradient(0, &fx, &fw);
        let d = &self.geom.diffeo;
        let m = self.m();
        let vals = (0..self.n()).map(|j| -d.sigma_x()[j * m] * px[j] + py[j]).collect();
        SpectralField::from_values(d.grid(), vals).expect("grid-sized")
    }

    /// `∇φ·(β_x, −1)` at the bottom (reproduces `θ`).
    pub fn bottom_neumann(&self) -> SpectralField {
        self.bottom_flux_with_scale().0
    }

    /// Trace of `φ̃` at `w = −h`.
    pub fn bottom_dirichlet(&self) -> SpectralField {
        self.level(self.m() - 1)
    }
}

/// Factor the system for `d` and solve once.
pub fn solve_bvp(psi: &SpectralField, theta: &NeumannData, d: &Diffeomorphism) -> Result<FlattenedPotential, BvpError> {
    BvpSystem::with_defaults(d.clone())?.solve(psi, &theta.theta)
}

/// `∇φ·N` at the free surface with `N = (−η_x, 1)`.
pub fn trace_top_neumann(phi: &FlattenedPotential, eta: &SpectralField) -> SpectralField {
    let d = phi.diffeo();
    let m = phi.m();
    let ex = eta.dx();
    let [fx, fw, ..] = phi.derivatives();
    let vals = (0..phi.n())
        .map(|j| {
            let k = j * m;
            let e = ex.values()[j];
            -e * fx[k] + (1.0 + e * e) / (1.0 + d.sigma_w()[k]) * fw[k]
        })
        .collect();
    SpectralField::from_values(d.grid(), vals).expect("grid-sized")
}

pub fn trace_bottom_dirichlet(phi: &FlattenedPotential) -> SpectralField {
    phi.bottom_dirichlet()
}

/// Relative interior residual (see [`FlattenedPotential::interior_residual`]).
pub fn residual_interior(phi: &FlattenedPotential) -> f64 {
    phi.interior_residual().0
}

/// Closed-form flat-strip potential for `η = β = 0`:
/// `φ̃ = cosh(|k|(w+h))/cosh(|k|h)·ψ̂_k − sinh(|k|w)/(|k|cosh(|k|h))·θ̂_k`, with the
/// `k = 0` mode `ψ̂_0 − w θ̂_0`.
pub fn flat_potential(psi: &SpectralField, theta: &SpectralField, vgrid: &VerticalGrid) -> Vec<f64> {
    let h = vgrid.depth();
    let (n, m) = (psi.n(), vgrid.m());
    let mut out = vec![0.0; n * m];
    for (i, &w) in vgrid.nodes().iter().enumerate() {
        let a = psi.apply_radial(|k| if k == 0.0 { 1.0 } else { (k * (w + h)).cosh() / (k * h).cosh() });
        let b = theta.apply_radial(|k| if k == 0.0 { -w } else { -(k * w).sinh() / (k * (k * h).cosh()) });
        for j in 0..n {
            out[j * m + i] = a.values()[j] + b.values()[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::straightening::{build_trivial, BathymetryProfile};

    fn flat_system(n: usize, m: usize, h: f64) -> BvpSystem {
        let g = PeriodicGrid::new(n).unwrap();
        let v = VerticalGrid::new(m, h).unwrap();
        let bath = BathymetryProfile::flat(&g, h, 0.5 * h).unwrap();
        let d = build_trivial(&SpectralField::zeros(&g), &bath, &v).unwrap();
        BvpSystem::with_defaults(d).unwrap()
    }

    #[test]
    fn separable_dirichlet_mode() {
        let (k, h) = (2.0, 1.0);
        let sys = flat_system(16, 24, h);
        let g = sys.grid().clone();
        let psi = SpectralField::from_fn(&g, |x| (k * h).cosh() * (k * x).cos());
        let phi = sys.solve(&psi, &SpectralField::zeros(&g)).unwrap();
        let m = sys.vgrid().m();
        for j in 0..16 {
            for (i, w) in sys.vgrid().nodes().iter().enumerate() {
                let exact = (k * (w + h)).cosh() * (k * g.x(j)).cos();
                assert!((phi.values()[j * m + i] - exact).abs() < 1e-11);
            }
        }
        let gn = phi.top_neumann();
        let expect = SpectralField::from_fn(&g, |x| k * (k * h).sinh() * (k * x).cos());
        assert!((&gn - &expect).max_abs() < 1e-10);
        let bottom = phi.bottom_dirichlet();
        assert!((&bottom - &SpectralField::from_fn(&g, |x| (k * x).cos())).max_abs() < 1e-11);
    }

    #[test]
    fn separable_neumann_mode() {
        let (k, h) = (3.0, 1.0);
        let sys = flat_system(16, 24, h);
        let g = sys.grid().clone();
        let theta = SpectralField::from_fn(&g, |x| (k * x).cos());
        let phi = sys.solve(&SpectralField::zeros(&g), &theta).unwrap();
        let exact = flat_potential(&SpectralField::zeros(&g), &theta, sys.vgrid());
        let err = phi.values().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-11, "err={err}");
        let bottom = phi.bottom_dirichlet();
        let expect = theta.scale((k * h).tanh() / k);
        assert!((&bottom - &expect).max_abs() < 1e-11);
    }

    #[test]
    fn constant_potential() {
        let sys = flat_system(16, 12, 1.0);
        let g = sys.grid().clone();
        let phi = sys.solve(&SpectralField::constant(&g, 2.5), &SpectralField::zeros(&g)).unwrap();
        assert!(phi.top_neumann().max_abs() < 1e-11);
        assert!(phi.bottom_dirichlet().values().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn exact_solution_has_tiny_residual_and_perturbation_grows_linearly() {
        let sys = flat_system(16, 20, 1.0);
        let g = sys.grid().clone();
        let psi = SpectralField::from_fn(&g, |x| x.cos() + 0.3 * (2.0 * x).sin());
        let exact = flat_potential(&psi, &SpectralField::zeros(&g), sys.vgrid());
        let phi = FlattenedPotential::from_values(&sys, exact.clone());
        assert!(phi.residual_abs < 1e-11, "{}", phi.residual_abs);
        let bump: Vec<f64> = (0..exact.len()).map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let res = |eps: f64| {
            let v = exact.iter().zip(&bump).map(|(a, b)| a + eps * b).collect();
            FlattenedPotential::from_values(&sys, v).residual_abs
        };
        let (r1, r2) = (res(1e-6), res(2e-6));
        assert!((r2 / r1 - 2.0).abs() < 0.05, "{r1} {r2}");
    }

    #[test]
    fn homogeneous_problem_has_zero_solution() {
        let g = PeriodicGrid::new(16).unwrap();
        let v = VerticalGrid::new(12, 1.0).unwrap();
        let beta = SpectralField::from_fn(&g, |x| 0.1 * (2.0 * x).cos());
        let bath = BathymetryProfile::new(beta, 1.0, 0.5).unwrap();
        let eta = SpectralField::from_fn(&g, |x| 0.05 * x.cos());
        let sys = BvpSystem::with_defaults(build_trivial(&eta, &bath, &v).unwrap()).unwrap();
        let z = SpectralField::zeros(&g);
        let phi = sys.solve(&z, &z).unwrap();
        assert!(phi.values().iter().all(|v| *v == 0.0));
        assert!(sys.condition_estimate() > 1.0 && sys.condition_estimate() < 1e12);
    }

    #[test]
    fn curved_geometry_flux_has_zero_mean() {
        let g = PeriodicGrid::new(32).unwrap();
        let v = VerticalGrid::new(20, 1.0).unwrap();
        let beta = SpectralField::from_fn(&g, |x| 0.1 * (2.0 * x).cos());
        let bath = BathymetryProfile::new(beta, 1.0, 0.5).unwrap();
        let eta = SpectralField::from_fn(&g, |x| 0.05 * x.cos());
        let d = build_trivial(&eta, &bath, &v).unwrap();
        let sys = BvpSystem::with_defaults(d).unwrap();
        let psi = SpectralField::from_fn(&g, |x| x.sin() + 0.2 * (3.0 * x).cos());
        let phi = sys.solve(&psi, &SpectralField::zeros(&g)).unwrap();
        let gn = phi.top_neumann();
        assert!(gn.mean().abs() <= 1e-11 * gn.max_abs(), "mean {}", gn.mean());
        assert!((&trace_top_neumann(&phi, &eta) - &gn).max_abs() < 1e-13);
        assert!(phi.residual_norm < 1e-10, "{}", phi.residual_norm);
        assert!(phi.bottom_residual < 1e-9 && phi.top_residual < 1e-12);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::straightening::{build_trivial, BathymetryProfile};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn solve_is_linear(
            ea in -0.1f64..0.1, ba in -0.1f64..0.1,
            p in proptest::collection::vec(-1.0f64..1.0, 4),
            t in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let g = PeriodicGrid::new(16).unwrap();
            let v = VerticalGrid::new(12, 1.0).unwrap();
            let beta = SpectralField::from_fn(&g, |x| ba * (2.0 * x).cos());
            let bath = BathymetryProfile::new(beta, 1.0, 0.5).unwrap();
            let eta = SpectralField::from_fn(&g, |x| ea * x.sin());
            let sys = BvpSystem::with_defaults(build_trivial(&eta, &bath, &v).unwrap()).unwrap();
            let f = |c: &[f64], x: f64| c[0] * x.cos() + c[1] * (2.0 * x).sin() + c[2] + c[3] * (3.0 * x).cos();
            let psi1 = SpectralField::from_fn(&g, |x| f(&p, x));
            let psi2 = SpectralField::from_fn(&g, |x| f(&t, x + 1.0));
            let th1 = SpectralField::from_fn(&g, |x| f(&t, x));
            let th2 = SpectralField::from_fn(&g, |x| f(&p, 2.0 * x));
            let sols = sys.solve_many(&[(&psi1, &th1), (&psi2, &th2), (&(&psi1 + &psi2), &(&th1 + &th2))]).unwrap();
            let scale = sols[2].values().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for k in 0..sols[0].values().len() {
                let d = sols[0].values()[k] + sols[1].values()[k] - sols[2].values()[k];
                prop_assert!(d.abs() <= 1e-10 * scale);
            }
        }
    }
}
