//! Periodic Fourier grid, Chebyshev–Gauss–Lobatto vertical grid, Fourier
//! multipliers, Sobolev norms and dealiasing.
//!
//! Conventions used throughout the crate:
//!
//! * nodes `x_j = 2πj/n`, `n` even and at least 8;
//! * retained frequencies `ξ ∈ {−n/2+1, …, n/2}`;
//! * coefficients are normalized so that `f(x) = Σ f̂_ξ e^{iξx}`;
//! * the discrete pairing is `⟨f,g⟩ = (2π/n) Σ f_j g_j`;
//! * `‖f‖²_{H^s} = 2π Σ |f̂_ξ|² ⟨ξ⟩^{2s}`, so `‖cos x‖_{L²} = √π`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Relative tolerance used when checking conjugate symmetry of multipliers.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("periodic grid needs an even node count n >= 8, got {n}")]
    BadSize { n: usize },
    #[error("vertical grid needs m >= 3 nodes and depth h > 0, got m={m}, h={h}")]
    BadVertical { m: usize, h: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("multiplier is not conjugate-symmetric at frequency {freq}; the output would be complex")]
    NotConjugateSymmetric { freq: i64 },
    #[error("antiderivative needs zero-mean input: measured mean {mean:e} exceeds tolerance {tol:e}")]
    NonZeroMean { mean: f64, tol: f64 },
    #[error("dealiasing fraction must lie in (0, 1], got {rule}")]
    BadDealiasRule { rule: f64 },
    #[error("fields live on different grids (n={left} vs n={right})")]
    GridMismatch { left: usize, right: usize },
}

/// Uniform periodic grid on `[0, 2π)` with cached FFT plans.
#[derive(Clone)]
pub struct PeriodicGrid {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicGrid").field("n", &self.n).finish()
    }
}

impl PartialEq for PeriodicGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl PeriodicGrid {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < 8 || n % 2 != 0 {
            return Err(GridError::BadSize { n });
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest retained frequency `n/2`.
    pub fn nyquist(&self) -> i64 {
        (self.n / 2) as i64
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.spacing() * j as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Frequency stored at FFT slot `idx`.
    pub fn freq(&self, idx: usize) -> i64 {
        let n = self.n as i64;
        let i = idx as i64;
        if i <= n / 2 {
            i
        } else {
            i - n
        }
    }

    /// FFT slot holding frequency `k`, if `k` is retained.
    pub fn index(&self, k: i64) -> Option<usize> {
        let half = self.nyquist();
        if k > half || k <= -half {
            return None;
        }
        Some(k.rem_euclid(self.n as i64) as usize)
    }

    pub fn freqs(&self) -> Vec<i64> {
        (0..self.n).map(|i| self.freq(i)).collect()
    }

    /// Normalized forward transform: `f̂_ξ = (1/n) Σ_j f_j e^{−iξx_j}`.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    /// Forward transform of complex nodal data.
    pub fn forward_complex(&self, values: &[Complex64]) -> Vec<Complex64> {
        let mut buf = values.to_vec();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    /// Inverse transform returning complex nodal values.
    pub fn inverse_complex(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut buf = coeffs.to_vec();
        self.inv.process(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<f64> {
        self.inverse_complex(coeffs).iter().map(|c| c.re).collect()
    }

    /// `⟨j⟩ = (1+j²)^{1/2}`.
    pub fn japanese(k: i64) -> f64 {
        (1.0 + (k * k) as f64).sqrt()
    }
}

/// Force the coefficient table of a real field: pair `(ξ, −ξ)` averaged into
/// conjugates, mean and Nyquist made real.
fn symmetrize(grid: &PeriodicGrid, coeffs: &mut [Complex64]) {
    let n = grid.n();
    coeffs[0].im = 0.0;
    coeffs[n / 2].im = 0.0;
    for i in 1..n / 2 {
        let a = coeffs[i];
        let b = coeffs[n - i].conj();
        let avg = (a + b) * 0.5;
        coeffs[i] = avg;
        coeffs[n - i] = avg.conj();
    }
}

/// A real periodic field holding nodal values and Fourier coefficients.
#[derive(Clone, Debug)]
pub struct SpectralField {
    grid: PeriodicGrid,
    values: Vec<f64>,
    coeffs: Vec<Complex64>,
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl SpectralField {
    pub fn from_values(grid: &PeriodicGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.n() {
            return Err(GridError::LengthMismatch { expected: grid.n(), got: values.len() });
        }
        let coeffs = grid.forward(&values);
        Ok(Self { grid: grid.clone(), values, coeffs })
    }

    /// Build from a coefficient table; conjugate symmetry is enforced.
    pub fn from_coeffs(grid: &PeriodicGrid, mut coeffs: Vec<Complex64>) -> Result<Self, GridError> {
        if coeffs.len() != grid.n() {
            return Err(GridError::LengthMismatch { expected: grid.n(), got: coeffs.len() });
        }
        symmetrize(grid, &mut coeffs);
        let values = grid.inverse(&coeffs);
        Ok(Self { grid: grid.clone(), values, coeffs })
    }

    pub fn from_fn(grid: &PeriodicGrid, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = grid.nodes().into_iter().map(f).collect();
        let coeffs = grid.forward(&values);
        Self { grid: grid.clone(), values, coeffs }
    }

    pub fn zeros(grid: &PeriodicGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &PeriodicGrid, c: f64) -> Self {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.n()];
        coeffs[0] = Complex64::new(c, 0.0);
        Self { grid: grid.clone(), values: vec![c; grid.n()], coeffs }
    }

    /// `Σ amp·cos(kx + phase)` over the given modes.
    pub fn from_modes(grid: &PeriodicGrid, modes: &[(i64, f64, f64)]) -> Self {
        Self::from_fn(grid, |x| {
            modes.iter().map(|&(k, a, ph)| a * (k as f64 * x + ph).cos()).sum()
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Coefficient of frequency `k` (zero if `k` is not retained).
    pub fn coeff(&self, k: i64) -> Complex64 {
        self.grid.index(k).map_or(Complex64::new(0.0, 0.0), |i| self.coeffs[i])
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn same_grid(&self, other: &Self) {
        assert_eq!(self.n(), other.n(), "fields live on different grids");
    }

    /// Nodal map followed by a fresh transform.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        Self::from_values(&self.grid, values).expect("length preserved")
    }

    /// Nodal combination of two fields.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        self.same_grid(other);
        let values: Vec<f64> =
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::from_values(&self.grid, values).expect("length preserved")
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// `self + s·other`, linear in both representations (no re-transform).
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        self.same_grid(other);
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b * s).collect(),
        }
    }

    /// Nodal (pseudo-spectral) product.
    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    fn with_coeffs(&self, coeffs: Vec<Complex64>) -> Self {
        let values = self.grid.inverse(&coeffs);
        Self { grid: self.grid.clone(), values, coeffs }
    }

    /// Apply a Fourier multiplier; rejects symbols that would produce a
    /// complex output.
    pub fn apply_multiplier(&self, m: impl Fn(i64) -> Complex64) -> Result<Self, GridError> {
        let n = self.n();
        let table: Vec<Complex64> = (0..n).map(|i| m(self.grid.freq(i))).collect();
        let scale = table.iter().fold(0.0f64, |s, c| s.max(c.norm())).max(1.0);
        let tol = SYMMETRY_TOL * scale;
        if table[0].im.abs() > tol {
            return Err(GridError::NotConjugateSymmetric { freq: 0 });
        }
        if table[n / 2].im.abs() > tol {
            return Err(GridError::NotConjugateSymmetric { freq: self.grid.nyquist() });
        }
        for i in 1..n / 2 {
            if (table[i] - table[n - i].conj()).norm() > tol {
                return Err(GridError::NotConjugateSymmetric { freq: self.grid.freq(i) });
            }
        }
        let coeffs = self.coeffs.iter().zip(&table).map(|(c, t)| c * t).collect();
        let mut out = self.with_coeffs(coeffs);
        symmetrize(&self.grid, &mut out.coeffs);
        Ok(out)
    }

    /// Apply a real multiplier depending on `|ξ|` only (always admissible).
    pub fn apply_radial(&self, m: impl Fn(f64) -> f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * m(self.grid.freq(i).unsigned_abs() as f64))
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Apply an odd multiplier `i·s(ξ)` with real odd `s`; the Nyquist mode
    /// is zeroed.
    pub fn apply_odd(&self, s: impl Fn(f64) -> f64) -> Self {
        let nyq = self.grid.nyquist();
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = self.grid.freq(i);
                if k == nyq {
                    Complex64::new(0.0, 0.0)
                } else {
                    c * Complex64::new(0.0, s(k as f64))
                }
            })
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Spectral derivative; Nyquist mode zeroed.
    pub fn dx(&self) -> Self {
        self.apply_odd(|k| k)
    }

    /// Second spectral derivative (Nyquist kept: `−ξ²` is even).
    pub fn dxx(&self) -> Self {
        self.apply_radial(|k| -k * k)
    }

    /// Zero-mean antiderivative. Fails when `|mean| > tol`.
    pub fn dx_inv(&self, tol: f64) -> Result<Self, GridError> {
        let mean = self.mean();
        if mean.abs() > tol {
            return Err(GridError::NonZeroMean { mean, tol });
        }
        Ok(self.dx_inv_projected())
    }

    /// Antiderivative with the default tolerance `1e−10·‖f‖_{L²}`.
    pub fn dx_inv_default(&self) -> Result<Self, GridError> {
        let tol = 1e-10 * self.l2_norm().max(f64::MIN_POSITIVE);
        self.dx_inv(tol)
    }

    /// Antiderivative of `f − mean(f)`.
    pub fn dx_inv_projected(&self) -> Self {
        let nyq = self.grid.nyquist();
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = self.grid.freq(i);
                if k == 0 || k == nyq {
                    Complex64::new(0.0, 0.0)
                } else {
                    c / Complex64::new(0.0, k as f64)
                }
            })
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Remove the mean mode.
    pub fn zero_mean(&self) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs[0] = Complex64::new(0.0, 0.0);
        self.with_coeffs(coeffs)
    }

    /// Discrete `H^s` norm (`×√(2π)` convention).
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c.norm_sqr() * PeriodicGrid::japanese(self.grid.freq(i)).powf(2.0 * s))
            .sum();
        (2.0 * PI * sum).sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sobolev_norm(0.0)
    }

    /// Nodal quadrature pairing `(2π/n) Σ f_j g_j`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.same_grid(other);
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        s * self.grid.spacing()
    }

    /// Zero every mode with `|ξ| > rule·n/2`.
    pub fn dealias(&self, rule: f64) -> Result<Self, GridError> {
        if !(rule > 0.0 && rule <= 1.0) {
            return Err(GridError::BadDealiasRule { rule });
        }
        Ok(self.truncate(rule * self.grid.nyquist() as f64))
    }

    /// Keep modes with `|ξ| ≤ kmax`.
    pub fn truncate(&self, kmax: f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if (self.grid.freq(i).abs() as f64) > kmax {
                    Complex64::new(0.0, 0.0)
                } else {
                    *c
                }
            })
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Reflection `x ↦ −x` on the grid.
    pub fn reflect(&self) -> Self {
        let n = self.n();
        let values = (0..n).map(|j| self.values[(n - j) % n]).collect();
        Self::from_values(&self.grid, values).expect("length preserved")
    }

    /// Band-limited resampling onto another grid (zero padding or truncation).
    pub fn resample(&self, grid: &PeriodicGrid) -> Self {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.n()];
        let nyq = self.grid.nyquist().min(grid.nyquist());
        for k in -nyq + 1..=nyq {
            let mut c = self.coeff(k);
            if k == nyq && self.grid.nyquist() != grid.nyquist() {
                // a Nyquist mode of the coarser grid splits into ±nyq on the finer one
                c *= 0.5;
                if let Some(i) = grid.index(-k) {
                    coeffs[i] += c;
                }
            }
            if let Some(i) = grid.index(k) {
                coeffs[i] += c;
            }
        }
        Self::from_coeffs(grid, coeffs).expect("length matches grid")
    }

    /// Fraction of `L²` energy carried by modes with `|ξ| > n/3`.
    pub fn tail_energy_fraction(&self) -> f64 {
        let total: f64 = self.coeffs.iter().map(|c| c.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let cut = self.n() as i64 / 3;
        let tail: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.freq(*i).abs() > cut)
            .map(|(_, c)| c.norm_sqr())
            .sum();
        tail / total
    }
}

impl Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: Self) -> SpectralField {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: Self) -> SpectralField {
        self.axpy(-1.0, rhs)
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, rhs: f64) -> SpectralField {
        self.scale(rhs)
    }
}

impl Neg for &SpectralField {
    type Output = SpectralField;
    fn neg(self) -> SpectralField {
        self.scale(-1.0)
    }
}

/// Chebyshev–Gauss–Lobatto grid on `[−h, 0]` with its differentiation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalGrid {
    m: usize,
    h: f64,
    nodes: Vec<f64>,
    d: Vec<f64>,
    d2: Vec<f64>,
}

impl VerticalGrid {
    /// Nodes `w_i = (h/2)(cos(πi/(m−1)) − 1)`, so `w_0 = 0` and `w_{m−1} = −h`.
    pub fn new(m: usize, h: f64) -> Result<Self, GridError> {
        if m < 3 || !(h > 0.0) || !h.is_finite() {
            return Err(GridError::BadVertical { m, h });
        }
        let nn = m - 1;
        let t: Vec<f64> = (0..m).map(|i| (PI * i as f64 / nn as f64).cos()).collect();
        let c = |i: usize| -> f64 {
            let e = if i == 0 || i == nn { 2.0 } else { 1.0 };
            if i % 2 == 0 {
                e
            } else {
                -e
            }
        };
        // Chebyshev matrix on t ∈ [−1, 1]; diagonal by negative row sums.
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                if i != j {
                    let v = c(i) / c(j) / (t[i] - t[j]);
                    d[i * m + j] = v;
                    row += v;
                }
            }
            d[i * m + i] = -row;
        }
        // w = (h/2)(t − 1) ⇒ d/dw = (2/h) d/dt
        let s = 2.0 / h;
        d.iter_mut().for_each(|v| *v *= s);
        let mut d2 = vec![0.0; m * m];
        for i in 0..m {
            for k in 0..m {
                let dik = d[i * m + k];
                if dik == 0.0 {
                    continue;
                }
                for j in 0..m {
                    d2[i * m + j] += dik * d[k * m + j];
                }
            }
        }
        let nodes = t.iter().map(|&ti| 0.5 * h * (ti - 1.0)).collect();
        Ok(Self { m, h, nodes, d, d2 })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn depth(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Row-major `m×m` first-derivative matrix.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Row-major `m×m` second-derivative matrix (`D_w²`).
    pub fn d2(&self) -> &[f64] {
        &self.d2
    }

    /// `D_w g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        matvec(&self.d, g, self.m)
    }

    /// `D_w² g`.
    pub fn apply2(&self, g: &[f64]) -> Vec<f64> {
        matvec(&self.d2, g, self.m)
    }
}

fn matvec(a: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    assert_eq!(x.len(), m, "vector length must equal the vertical node count");
    (0..m).map(|i| (0..m).map(|j| a[i * m + j] * x[j]).sum()).collect()
}

/// Free-function form of [`VerticalGrid::apply`].
pub fn cheb_apply(grid: &VerticalGrid, g: &[f64]) -> Vec<f64> {
    grid.apply(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    fn max_diff(a: &SpectralField, b: &SpectralField) -> f64 {
        (a - b).max_abs()
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(PeriodicGrid::new(6).unwrap_err(), GridError::BadSize { n: 6 });
        assert!(PeriodicGrid::new(9).is_err());
        assert!(VerticalGrid::new(2, 1.0).is_err());
        assert!(VerticalGrid::new(8, -1.0).is_err());
    }

    #[test]
    fn frequency_layout() {
        let g = grid(8);
        assert_eq!(g.freqs(), vec![0, 1, 2, 3, 4, -3, -2, -1]);
        assert_eq!(g.index(-3), Some(5));
        assert_eq!(g.index(-4), None);
        assert_eq!(g.index(4), Some(4));
    }

    #[test]
    fn identity_multiplier() {
        let g = grid(16);
        let f = SpectralField::from_fn(&g, |x| (2.0 * x).sin() + 0.3 * x.cos());
        let out = f.apply_multiplier(|_| Complex64::new(1.0, 0.0)).unwrap();
        assert!(max_diff(&out, &f) < 1e-15);
    }

    #[test]
    fn flat_dn_multiplier_on_cos() {
        let g = grid(16);
        let f = SpectralField::from_fn(&g, f64::cos);
        let out = f
            .apply_multiplier(|k| {
                let a = k.unsigned_abs() as f64;
                Complex64::new(a * a.tanh(), 0.0)
            })
            .unwrap();
        let expect = f.scale(1f64.tanh());
        assert!(max_diff(&out, &expect) < 1e-14);
        assert_abs_diff_eq!(1f64.tanh(), 0.761594, epsilon = 1e-6);
    }

    #[test]
    fn derivative_multiplier_on_sin3() {
        let g = grid(16);
        let f = SpectralField::from_fn(&g, |x| (3.0 * x).sin());
        let out = f.apply_odd(|k| k);
        let expect = SpectralField::from_fn(&g, |x| 3.0 * (3.0 * x).cos());
        assert!(max_diff(&out, &expect) < 1e-13);
    }

    #[test]
    fn asymmetric_multiplier_rejected() {
        let g = grid(16);
        let f = SpectralField::from_fn(&g, f64::cos);
        let err = f.apply_multiplier(|k| Complex64::new(k as f64, 0.0)).unwrap_err();
        assert!(matches!(err, GridError::NotConjugateSymmetric { .. }));
        // iξ is odd but imaginary at Nyquist, so it is rejected too
        assert!(f.apply_multiplier(|k| Complex64::new(0.0, k as f64)).is_err());
    }

    #[test]
    fn antiderivative_cases() {
        let g = grid(16);
        let c = SpectralField::from_fn(&g, f64::cos);
        let s = c.dx_inv_default().unwrap();
        assert!(max_diff(&s, &SpectralField::from_fn(&g, f64::sin)) < 1e-14);
        let k = SpectralField::constant(&g, 2.5);
        assert!(k.dx().max_abs() < 1e-15);
        let s2 = SpectralField::from_fn(&g, |x| (2.0 * x).sin());
        assert!(max_diff(&s2.dx().dx_inv_default().unwrap(), &s2) < 1e-14);
        let shifted = SpectralField::from_fn(&g, |x| 1.0 + x.cos());
        match shifted.dx_inv_default() {
            Err(GridError::NonZeroMean { mean, .. }) => assert!((mean - 1.0).abs() < 1e-14),
            other => panic!("expected a mean error, got {other:?}"),
        }
    }

    #[test]
    fn sobolev_examples() {
        let g = grid(16);
        let c1 = SpectralField::from_fn(&g, f64::cos);
        assert_abs_diff_eq!(c1.sobolev_norm(0.0), PI.sqrt(), epsilon = 1e-13);
        let c2 = SpectralField::from_fn(&g, |x| (2.0 * x).cos());
        assert_abs_diff_eq!(c2.sobolev_norm(1.0), (5.0 * PI).sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn dealias_cases() {
        let g = grid(24);
        let low = SpectralField::from_fn(&g, |x| (3.0 * x).cos() + (5.0 * x).sin());
        assert!(max_diff(&low.dealias(2.0 / 3.0).unwrap(), &low) < 1e-14);
        let nyq = SpectralField::from_fn(&g, |x| (12.0 * x).cos());
        assert!(nyq.dealias(2.0 / 3.0).unwrap().max_abs() < 1e-14);
        assert!(low.dealias(0.0).is_err());
        assert!(low.dealias(1.5).is_err());
    }

    #[test]
    fn chebyshev_examples() {
        let v = VerticalGrid::new(17, 1.3).unwrap();
        assert_eq!(v.nodes()[0], 0.0);
        assert_abs_diff_eq!(v.nodes()[16], -1.3, epsilon = 1e-15);
        let w = v.nodes().to_vec();
        let d1 = v.apply(&w);
        assert!(d1.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
        let d2 = v.apply(&w2);
        for (a, b) in d2.iter().zip(&w) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        let ones = vec![1.0; 17];
        assert!(v.apply(&ones).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn chebyshev_cosh_profile() {
        // analytic derivative of cosh(k(w+h)) at the nodes
        let (h, k) = (1.0, 2.0);
        let v = VerticalGrid::new(24, h).unwrap();
        let g: Vec<f64> = v.nodes().iter().map(|w| (k * (w + h)).cosh()).collect();
        let dg = v.apply(&g);
        let d2g = v.apply2(&g);
        for (i, w) in v.nodes().iter().enumerate() {
            assert!((dg[i] - k * (k * (w + h)).sinh()).abs() < 1e-11);
            assert!((d2g[i] - k * k * (k * (w + h)).cosh()).abs() < 1e-9);
        }
    }

    #[test]
    fn reflect_and_resample() {
        let g = grid(16);
        let f = SpectralField::from_fn(&g, |x| x.sin() + (2.0 * x).cos());
        let r = f.reflect();
        let expect = SpectralField::from_fn(&g, |x| -x.sin() + (2.0 * x).cos());
        assert!(max_diff(&r, &expect) < 1e-14);
        let fine = f.resample(&grid(32));
        let direct = SpectralField::from_fn(&grid(32), |x| x.sin() + (2.0 * x).cos());
        assert!(max_diff(&fine, &direct) < 1e-14);
        assert!(max_diff(&fine.resample(&g), &f) < 1e-14);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn band_limited(n: usize, kmax: usize) -> impl Strategy<Value = SpectralField> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), kmax + 1).prop_map(move |ab| {
            let g = PeriodicGrid::new(n).unwrap();
            SpectralField::from_fn(&g, |x| {
                ab.iter()
                    .enumerate()
                    .map(|(k, (a, b))| a * (k as f64 * x).cos() + b * (k as f64 * x).sin())
                    .sum()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip(f in band_limited(32, 15)) {
            let back = f.grid().inverse(f.coeffs());
            let scale = f.max_abs().max(1e-300);
            for (a, b) in back.iter().zip(f.values()) {
                prop_assert!((a - b).abs() <= 1e-13 * scale);
            }
        }

        #[test]
        fn parseval(f in band_limited(32, 15), g in band_limited(32, 15)) {
            let nodal = f.inner(&g);
            let spectral: f64 = f.coeffs().iter().zip(g.coeffs())
                .map(|(a, b)| (a * b.conj()).re).sum::<f64>() * 2.0 * PI;
            let scale = f.l2_norm() * g.l2_norm();
            prop_assert!((nodal - spectral).abs() <= 1e-12 * scale.max(1e-300));
        }

        #[test]
        fn dx_matches_multiplier(f in band_limited(32, 15)) {
            let a = f.dx();
            let b = f.apply_odd(|k| k);
            prop_assert!((&a - &b).max_abs() <= 1e-14 * a.max_abs().max(1.0));
        }

        #[test]
        fn sobolev_monotone(f in band_limited(32, 10), s in 0.0f64..3.0) {
            prop_assume!(f.coeffs().iter().enumerate().skip(2).take(8).any(|(_, c)| c.norm() > 1e-3));
            prop_assert!(f.sobolev_norm(s + 0.5) > f.sobolev_norm(s));
        }

        #[test]
        fn sobolev_matches_brute_force(f in band_limited(32, 15)) {
            // direct sum over |ξ| ≤ 15 using coefficient pairs
            let mut sum = 0.0;
            for k in -15i64..=15 {
                let c = f.coeff(k);
                sum += c.norm_sqr() * (1.0 + (k * k) as f64).powi(2);
            }
            let expect = (2.0 * PI * sum).sqrt();
            prop_assert!((f.sobolev_norm(2.0) - expect).abs() <= 1e-12 * expect.max(1e-300));
        }

        #[test]
        fn dealias_idempotent(f in band_limited(24, 11)) {
            let once = f.dealias(2.0 / 3.0).unwrap();
            let twice = once.dealias(2.0 / 3.0).unwrap();
            prop_assert!((&once - &twice).max_abs() <= 1e-15);
        }

        #[test]
        fn antiderivative_round_trip(f in band_limited(32, 15)) {
            let z = f.zero_mean();
            let back = z.dx_inv_projected().dx();
            // the Nyquist mode is not recoverable through dx
            let z = z.truncate(15.0);
            prop_assert!((&back - &z).max_abs() <= 1e-13 * z.max_abs().max(1.0));
        }
    }
}
