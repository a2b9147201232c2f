//! Straightening diffeomorphisms `Σ(x,w) = (x, w + σ(x,w))` from the flat
//! strip `T × (−h, 0)` onto the fluid domain, and the coefficients of the
//! flattened Laplacian.
//!
//! Tensor fields on the strip are stored row-major by periodic node, i.e. the
//! value at `(x_j, w_i)` lives at index `j·m + i`.

use thiserror::Error;

use crate::grid_spectral::{GridError, PeriodicGrid, SpectralField, VerticalGrid};

/// Largest admissible share of `β` energy above `n/3`.
const BATHYMETRY_TAIL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StraighteningError {
    #[error("depth and margin must be positive (h={h}, h0={h0})")]
    BadDepth { h: f64, h0: f64 },
    #[error("bathymetry is under-resolved: {fraction:e} of its energy sits above n/3")]
    UnresolvedBathymetry { fraction: f64 },
    #[error("strict connectedness violated at x={x:.6}: h - beta + eta = {gap:.6e} < h0 = {h0:e}")]
    NotConnected { node: usize, x: f64, gap: f64, h0: f64 },
    #[error("vertical grid depth {grid} differs from bathymetry depth {bath}")]
    DepthMismatch { grid: f64, bath: f64 },
    #[error("smoothing scale delta={delta:e} is inadmissible (bound {bound:e}); measured c0={c0:e}")]
    DeltaTooLarge { delta: f64, bound: f64, c0: f64 },
    #[error("degenerate map: min(1 + sigma_w) = {c0:e} <= 0")]
    Degenerate { c0: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Bottom profile `y = −h + β(x)` together with the connectedness margin `h₀`.
#[derive(Clone, Debug)]
pub struct BathymetryProfile {
    beta: SpectralField,
    beta_x: SpectralField,
    h: f64,
    h0: f64,
}

impl BathymetryProfile {
    pub fn new(beta: SpectralField, h: f64, h0: f64) -> Result<Self, StraighteningError> {
        if !(h > 0.0 && h0 > 0.0 && h.is_finite() && h0.is_finite()) {
            return Err(StraighteningError::BadDepth { h, h0 });
        }
        let fraction = beta.tail_energy_fraction();
        if fraction > BATHYMETRY_TAIL_TOL {
            return Err(StraighteningError::UnresolvedBathymetry { fraction });
        }
        let beta_x = beta.dx();
        Ok(Self { beta, beta_x, h, h0 })
    }

    pub fn flat(grid: &PeriodicGrid, h: f64, h0: f64) -> Result<Self, StraighteningError> {
        Self::new(SpectralField::zeros(grid), h, h0)
    }

    pub fn beta(&self) -> &SpectralField {
        &self.beta
    }

    pub fn beta_x(&self) -> &SpectralField {
        &self.beta_x
    }

    pub fn depth(&self) -> f64 {
        self.h
    }

    pub fn margin(&self) -> f64 {
        self.h0
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.beta.grid()
    }

    pub fn is_flat(&self) -> bool {
        self.beta.max_abs() == 0.0
    }

    /// Smallest gap `h − β + η` over the nodes, with its node index.
    pub fn min_gap(&self, eta: &SpectralField) -> (f64, usize) {
        eta.values()
            .iter()
            .zip(self.beta.values())
            .enumerate()
            .map(|(j, (e, b))| (self.h - b + e, j))
            .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc })
    }

    /// Check `h − β + η ≥ threshold` at every node.
    pub fn check_connected_with(&self, eta: &SpectralField, threshold: f64) -> Result<(), StraighteningError> {
        let (gap, node) = self.min_gap(eta);
        if gap < threshold {
            return Err(StraighteningError::NotConnected {
                node,
                x: eta.grid().x(node),
                gap,
                h0: threshold,
            });
        }
        Ok(())
    }

    pub fn check_connected(&self, eta: &SpectralField) -> Result<(), StraighteningError> {
        self.check_connected_with(eta, self.h0)
    }
}

/// Built-in compactly supported bump `χ(r) = exp(1 − 1/(1 − r²))`, `|r| < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bump {
    Standard,
}

impl Bump {
    /// `(χ, χ', χ'')` at `r`.
    pub fn eval(self, r: f64) -> (f64, f64, f64) {
        let u = 1.0 - r * r;
        if u <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let chi = (1.0 - 1.0 / u).exp();
        let d1 = chi * (-2.0 * r / (u * u));
        let d2 = chi * (4.0 * r * r / u.powi(4) - 2.0 / (u * u) - 8.0 * r * r / u.powi(3));
        (chi, d1, d2)
    }

    /// `sup |χ'|`, sampled finely on `[0, 1)`.
    pub fn max_slope(self) -> f64 {
        (1..20_000).map(|i| self.eval(i as f64 / 20_000.0).1.abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiffeoKind {
    Trivial,
    Regularizing { delta: f64, bump: Bump },
}

/// `σ` and its derivatives on the `n × m` tensor grid.
#[derive(Clone, Debug)]
pub struct Diffeomorphism {
    kind: DiffeoKind,
    grid: PeriodicGrid,
    vgrid: VerticalGrid,
    sigma: Vec<f64>,
    sx: Vec<f64>,
    sw: Vec<f64>,
    sxx: Vec<f64>,
    sxw: Vec<f64>,
    sww: Vec<f64>,
    c0: f64,
    jacobian_max: f64,
}

/// A field given per vertical level through a Fourier multiplier family:
/// returns the level values and the first two `w`-derivatives.
fn smoothed_levels(
    f: &SpectralField,
    vgrid: &VerticalGrid,
    mult: impl Fn(f64, f64) -> (f64, f64, f64),
) -> Vec<[SpectralField; 6]> {
    // For each level returns [F, F_x, F_xx, F_w, F_xw, F_ww].
    vgrid
        .nodes()
        .iter()
        .map(|&w| {
            let level = |sel: usize| {
                f.apply_radial(|k| {
                    let (a, b, c) = mult(w, k);
                    [a, b, c][sel]
                })
            };
            let v = level(0);
            let vw = level(1);
            let vww = level(2);
            [v.clone(), v.dx(), v.dxx(), vw.clone(), vw.dx(), vww]
        })
        .collect()
}

impl Diffeomorphism {
    fn assemble(
        kind: DiffeoKind,
        eta: &SpectralField,
        bath: &BathymetryProfile,
        vgrid: &VerticalGrid,
    ) -> Result<Self, StraighteningError> {
        let h = bath.depth();
        if (vgrid.depth() - h).abs() > 1e-14 * h {
            return Err(StraighteningError::DepthMismatch { grid: vgrid.depth(), bath: h });
        }
        let grid = eta.grid().clone();
        let (n, m) = (grid.n(), vgrid.m());
        // multiplier families for η (scale δ|w|) and β (scale δ(w+h))
        let (eta_levels, beta_levels) = match kind {
            DiffeoKind::Trivial => {
                let id = |_: f64, _: f64| (1.0, 0.0, 0.0);
                (smoothed_levels(eta, vgrid, id), smoothed_levels(bath.beta(), vgrid, id))
            }
            DiffeoKind::Regularizing { delta, bump } => {
                let fe = move |w: f64, k: f64| {
                    let (c, d1, d2) = bump.eval(delta * w * k);
                    (c, delta * k * d1, (delta * k).powi(2) * d2)
                };
                let fb = move |w: f64, k: f64| {
                    let (c, d1, d2) = bump.eval(delta * (w + h) * k);
                    (c, delta * k * d1, (delta * k).powi(2) * d2)
                };
                (smoothed_levels(eta, vgrid, fe), smoothed_levels(bath.beta(), vgrid, fb))
            }
        };
        let size = n * m;
        let mut d = Self {
            kind,
            grid,
            vgrid: vgrid.clone(),
            sigma: vec![0.0; size],
            sx: vec![0.0; size],
            sw: vec![0.0; size],
            sxx: vec![0.0; size],
            sxw: vec![0.0; size],
            sww: vec![0.0; size],
            c0: 0.0,
            jacobian_max: 0.0,
        };
        for (i, &w) in vgrid.nodes().iter().enumerate() {
            // σ = A(w) E − B(w) Β with A = 1 + w/h, B = w/h
            let a = 1.0 + w / h;
            let b = w / h;
            let e = &eta_levels[i];
            let bb = &beta_levels[i];
            for j in 0..n {
                let idx = j * m + i;
                let ev = |k: usize| e[k].values()[j];
                let bv = |k: usize| bb[k].values()[j];
                d.sigma[idx] = a * ev(0) - b * bv(0);
                d.sx[idx] = a * ev(1) - b * bv(1);
                d.sxx[idx] = a * ev(2) - b * bv(2);
                d.sw[idx] = (ev(0) - bv(0)) / h + a * ev(3) - b * bv(3);
                d.sxw[idx] = (ev(1) - bv(1)) / h + a * ev(4) - b * bv(4);
                d.sww[idx] = 2.0 * (ev(3) - bv(3)) / h + a * ev(5) - b * bv(5);
            }
        }
        d.c0 = d.sw.iter().map(|s| 1.0 + s).fold(f64::INFINITY, f64::min);
        d.jacobian_max = d
            .sx
            .iter()
            .zip(&d.sw)
            .map(|(x, w)| x.abs().max((1.0 + w).abs()))
            .fold(1.0, f64::max);
        Ok(d)
    }

    pub fn kind(&self) -> DiffeoKind {
        self.kind
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn vgrid(&self) -> &VerticalGrid {
        &self.vgrid
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn m(&self) -> usize {
        self.vgrid.m()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_x(&self) -> &[f64] {
        &self.sx
    }

    pub fn sigma_w(&self) -> &[f64] {
        &self.sw
    }

    pub fn sigma_xx(&self) -> &[f64] {
        &self.sxx
    }

    pub fn sigma_xw(&self) -> &[f64] {
        &self.sxw
    }

    pub fn sigma_ww(&self) -> &[f64] {
        &self.sww
    }

    /// Measured `min (1 + ∂_wσ)`.
    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Largest entry of `J_Σ = [[1, 0], [σ_x, 1 + σ_w]]` in absolute value.
    pub fn jacobian_max(&self) -> f64 {
        self.jacobian_max
    }

    /// Smallest admissible bound `M₀` with `|J_Σ| ≤ M₀` and `M₀ ≥ 1/c₀`.
    pub fn m0(&self) -> f64 {
        self.jacobian_max.max(1.0 / self.c0)
    }

    /// Values at one vertical level as a periodic field.
    pub fn level(&self, data: &[f64], i: usize) -> SpectralField {
        let m = self.m();
        let vals = (0..self.n()).map(|j| data[j * m + i]).collect();
        SpectralField::from_values(&self.grid, vals).expect("grid-sized level")
    }

    /// `max|σ(·,0) − η|` and `max|σ(·,−h) − β|`.
    pub fn trace_errors(&self, eta: &SpectralField, bath: &BathymetryProfile) -> (f64, f64) {
        let top = (&self.level(&self.sigma, 0) - eta).max_abs();
        let bot = (&self.level(&self.sigma, self.m() - 1) - bath.beta()).max_abs();
        (top, bot)
    }
}

/// `σ = (1 + w/h)η − (w/h)β`.
pub fn build_trivial(
    eta: &SpectralField,
    bath: &BathymetryProfile,
    vgrid: &VerticalGrid,
) -> Result<Diffeomorphism, StraighteningError> {
    bath.check_connected(eta)?;
    let d = Diffeomorphism::assemble(DiffeoKind::Trivial, eta, bath, vgrid)?;
    if d.c0 <= 0.0 {
        return Err(StraighteningError::Degenerate { c0: d.c0 });
    }
    Ok(d)
}

/// Admissible bound on `δ` for the regularizing map at regularity `s > 2`:
/// `h₀ / (C(χ)(‖η‖_{H^s} + ‖β‖_{H^s}))` with
/// `C(χ) = ‖χ'‖_∞ (∫_{R²} (1+|ξ|²)^{−(s−1)} dξ)^{1/2} = ‖χ'‖_∞ (π/(s−2))^{1/2}`.
pub fn admissible_delta(eta: &SpectralField, bath: &BathymetryProfile, bump: Bump, s: f64) -> f64 {
    assert!(s > 2.0, "the admissibility constant needs s > 2");
    let c_chi = bump.max_slope() * (std::f64::consts::PI / (s - 2.0)).sqrt();
    let size = eta.sobolev_norm(s) + bath.beta().sobolev_norm(s);
    if size == 0.0 {
        f64::INFINITY
    } else {
        bath.margin() / (c_chi * size)
    }
}

/// `σ = (1 + w/h)χ(δw|D|)η − (w/h)χ(δ(w+h)|D|)β`.
pub fn build_regularizing(
    eta: &SpectralField,
    bath: &BathymetryProfile,
    vgrid: &VerticalGrid,
    delta: f64,
    bump: Bump,
    s: f64,
) -> Result<Diffeomorphism, StraighteningError> {
    bath.check_connected(eta)?;
    let bound = admissible_delta(eta, bath, bump, s);
    let d = Diffeomorphism::assemble(DiffeoKind::Regularizing { delta, bump }, eta, bath, vgrid)?;
    if !(delta > 0.0) || delta >= bound || d.c0 <= 0.0 {
        return Err(StraighteningError::DeltaTooLarge { delta, bound, c0: d.c0 });
    }
    Ok(d)
}

/// Coefficients of `Δ^Σ = a∂_w² + ∂_x² + b∂_x∂_w − c∂_w` and entries of the
/// symmetric matrix `P(Σ)` with `Δ^Σ = (1+σ_w)^{−1} ∇·P∇`.
#[derive(Clone, Debug)]
pub struct FlatteningCoeffs {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub p11: Vec<f64>,
    pub p12: Vec<f64>,
    pub p22: Vec<f64>,
}

pub fn flatten_coeffs(d: &Diffeomorphism) -> FlatteningCoeffs {
    let size = d.sigma.len();
    let mut out = FlatteningCoeffs {
        a: vec![0.0; size],
        b: vec![0.0; size],
        c: vec![0.0; size],
        p11: vec![0.0; size],
        p12: vec![0.0; size],
        p22: vec![0.0; size],
    };
    for k in 0..size {
        let jw = 1.0 + d.sw[k];
        let sx = d.sx[k];
        let a = (1.0 + sx * sx) / (jw * jw);
        let b = -2.0 * sx / jw;
        out.a[k] = a;
        out.b[k] = b;
        out.c[k] = (d.sxx[k] + b * d.sxw[k] + a * d.sww[k]) / jw;
        out.p11[k] = jw;
        out.p12[k] = -sx;
        out.p22[k] = (1.0 + sx * sx) / jw;
    }
    out
}

/// Derivatives of a tensor field: `(f_x, f_w, f_xx, f_xw, f_ww)`, spectral in
/// `x`, Chebyshev in `w`.
pub(crate) fn tensor_derivatives(
    grid: &PeriodicGrid,
    vgrid: &VerticalGrid,
    f: &[f64],
) -> [Vec<f64>; 5] {
    let (n, m) = (grid.n(), vgrid.m());
    let along_x = |data: &[f64], second: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..m {
            let vals = (0..n).map(|j| data[j * m + i]).collect();
            let lvl = SpectralField::from_values(grid, vals).expect("grid-sized level");
            let d = if second { lvl.dxx() } else { lvl.dx() };
            for (j, v) in d.values().iter().enumerate() {
                out[j * m + i] = *v;
            }
        }
        out
    };
    let along_w = |data: &[f64], second: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for j in 0..n {
            let col = &data[j * m..(j + 1) * m];
            let d = if second { vgrid.apply2(col) } else { vgrid.apply(col) };
            out[j * m..(j + 1) * m].copy_from_slice(&d);
        }
        out
    };
    let fx = along_x(f, false);
    let fw = along_w(f, false);
    let fxx = along_x(f, true);
    let fxw = along_w(&fx, false);
    let fww = along_w(f, true);
    [fx, fw, fxx, fxw, fww]
}

/// `Δ^Σ f` from the `(a,b,c)` form.
pub fn flattened_laplacian(d: &Diffeomorphism, coeffs: &FlatteningCoeffs, f: &[f64]) -> Vec<f64> {
    let [_, fw, fxx, fxw, fww] = tensor_derivatives(&d.grid, &d.vgrid, f);
    (0..f.len())
        .map(|k| coeffs.a[k] * fww[k] + fxx[k] + coeffs.b[k] * fxw[k] - coeffs.c[k] * fw[k])
        .collect()
}

/// `(1+σ_w)^{−1} ∇·(P∇f)` assembled from `P(Σ)` by differentiating fluxes.
pub fn divergence_form(d: &Diffeomorphism, coeffs: &FlatteningCoeffs, f: &[f64]) -> Vec<f64> {
    let [fx, fw, ..] = tensor_derivatives(&d.grid, &d.vgrid, f);
    let size = f.len();
    let q1: Vec<f64> = (0..size).map(|k| coeffs.p11[k] * fx[k] + coeffs.p12[k] * fw[k]).collect();
    let q2: Vec<f64> = (0..size).map(|k| coeffs.p12[k] * fx[k] + coeffs.p22[k] * fw[k]).collect();
    let [q1x, ..] = tensor_derivatives(&d.grid, &d.vgrid, &q1);
    let [_, q2w, ..] = tensor_derivatives(&d.grid, &d.vgrid, &q2);
    (0..size).map(|k| (q1x[k] + q2w[k]) / (1.0 + d.sw[k])).collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn divergence_form_matches_coefficients(
            ea in -0.15f64..0.15, eb in -0.05f64..0.05, ba in -0.15f64..0.15,
            f1 in -1.0f64..1.0, f2 in -1.0f64..1.0,
        ) {
            let g = PeriodicGrid::new(32).unwrap();
            let v = VerticalGrid::new(16, 1.0).unwrap();
            let beta = SpectralField::from_fn(&g, |x| ba * (2.0 * x).sin());
            let bath = BathymetryProfile::new(beta, 1.0, 0.4).unwrap();
            let eta = SpectralField::from_fn(&g, |x| ea * x.cos() + eb * (3.0 * x).sin());
            let d = build_trivial(&eta, &bath, &v).unwrap();
            let c = flatten_coeffs(&d);
            let m = v.m();
            let mut f = vec![0.0; 32 * m];
            for j in 0..32 {
                for (i, w) in v.nodes().iter().enumerate() {
                    let x = g.x(j);
                    f[j * m + i] = f1 * (x + w).sin() * (0.5 * w).exp() + f2 * (2.0 * x).cos() * w * w;
                }
            }
            let lhs = flattened_laplacian(&d, &c, &f);
            let rhs = divergence_form(&d, &c, &f);
            let scale = lhs.iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn positivity_and_symmetry(ea in -0.3f64..0.3, ba in -0.3f64..0.3) {
            let g = PeriodicGrid::new(16).unwrap();
            let v = VerticalGrid::new(9, 1.0).unwrap();
            let beta = SpectralField::from_fn(&g, |x| ba * x.sin());
            let bath = BathymetryProfile::new(beta, 1.0, 0.3).unwrap();
            let eta = SpectralField::from_fn(&g, |x| ea * x.cos());
            let d = build_trivial(&eta, &bath, &v).unwrap();
            let c = flatten_coeffs(&d);
            for k in 0..c.a.len() {
                prop_assert!(c.a[k] > 0.0);
                let det = c.p11[k] * c.p22[k] - c.p12[k] * c.p12[k];
                prop_assert!(c.p11[k] > 0.0 && det > 0.0);
            }
            prop_assert!(d.c0() >= bath.margin() / bath.depth() - 1e-14);
        }
    }
}
