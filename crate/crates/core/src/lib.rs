//! Waveform-based earthquake location in 2-D acoustic media.
//!
//! The crate simulates pressure waves with an explicit finite-difference
//! solver, back-propagates receiver residuals as adjoint fields, assembles an
//! auxiliary misfit surface over a search grid, and locates the source either
//! by direct search over that surface, by gradient descent, or by the
//! combination of the two (direct search as a preprocessor, descent as the
//! refiner). A batch harness reproduces the synthetic studies at desk scale.
//!
//! Module layout mirrors the pipeline:
//!
//! * [`media`] — domains, wave-speed models, rasterization.
//! * [`source`] — Ricker wavelet and the regularized point-source stencil.
//! * [`propagator`] — forward/adjoint FDTD solves, CPML boundaries, energy.
//! * [`trace`] — misfit, noise injection, time-window selection.
//! * [`afm`] — auxiliary-surface construction, direct search, verification.
//! * [`refine`] — source-parameter gradients, descent, the preprocessed pipeline.
//! * [`harness`] — experiment plans, batch runner, statistics, file emission.

pub mod afm;
pub mod config;
pub mod error;
pub mod harness;
pub mod media;
pub mod presets;
pub mod propagator;
pub mod refine;
pub mod seeds;
pub mod source;
pub mod trace;

pub use error::{Error, Result};
pub use media::{Domain2D, VelocityModel};
pub use propagator::{AdjointSamples, ReceiverArray, Seismogram, SimConfig};
pub use trace::{MisfitVector, NoiseSpec, TimeWindow};
