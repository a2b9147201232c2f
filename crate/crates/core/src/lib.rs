//! Numerical toolkit for two-dimensional gravity–capillary water waves with
//! constant vorticity over a variable bottom.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid_spectral`] — periodic Fourier grid, Chebyshev vertical grid, norms;
//! * [`straightening`] — maps from the flat strip onto the fluid domain;
//! * [`elliptic_bvp`] — collocation solver for the straightened Laplace problem;
//! * [`dno_family`] — Dirichlet–Neumann type operators, shape derivatives and
//!   the homogeneous expansion;
//! * [`paradiff`] — paradifferential quantization and the water-wave symbols;
//! * [`evolution`] — right-hand side, RK4 integration and diagnostics.
//!
//! All arithmetic is in `f64`; see [`Real`] and [`Cplx`].

pub mod grid_spectral;
pub mod straightening;
pub mod elliptic_bvp;
pub mod dno_family;
pub mod paradiff;
pub mod evolution;

/// Scalar type used by every module.
pub type Real = f64;
/// Complex scalar used for Fourier coefficients and symbols.
pub type Cplx = num_complex::Complex64;

pub use grid_spectral::{GridError, PeriodicGrid, SpectralField, VerticalGrid};

/// Cap the worker threads used by rayon and by the dense factorizations.
/// Returns `false` when the global pool was already initialised.
pub fn set_thread_cap(threads: usize) -> bool {
    let threads = threads.max(1);
    faer::set_global_parallelism(if threads == 1 { faer::Par::Seq } else { faer::Par::rayon(threads) });
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
}
