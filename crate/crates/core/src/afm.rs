//! Auxiliary-surface construction and direct-search location.
//!
//! For an initial guess `(xi, tau)` the per-receiver auxiliary functions are
//!
//! ```text
//! Xi_r(zeta, nu) = 2 chi_r(xi, tau) - [ C_r(zeta, nu) - K_r ]
//! C_r(zeta, nu)  = int f(t - nu) w_r(zeta, t) dt
//! K_r            = int f(t - tau) w_r(xi, t) dt
//! ```
//!
//! where `w_r` is the adjoint field of receiver `r`'s normalized residual.
//! The true source parameters are a root of every `Xi_r`, for any initial
//! guess, so the minimizer of `Gamma = sum_r Xi_r^2` over a search grid
//! estimates the hypocenter and origin time. One extra forward solve checks
//! the estimate against a misfit tolerance; a failed check signals that the
//! search grid did not cover the truth and the caller should restart with a
//! larger one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::propagator::{AdjointSamples, Propagator, ReceiverArray, Seismogram};
use crate::refine::{CostReport, LocationResult, Stage, TrajectoryPoint, VerifyStatus};
use crate::source::{ricker, RickerSource};
use crate::trace::{misfit, MisfitVector, TimeWindow};

/// Uniform search grid: spatial nodes over `[x_min,x_max] x [z_min,z_max]`
/// with spacings `(hx, hz)`, and origin-time nodes over `[t_min,t_max]` with
/// step `sigma`. All ranges include both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub hx: f64,
    pub hz: f64,
    pub sigma: f64,
    nx: usize,
    nz: usize,
    n_nu: usize,
}

impl SearchGrid {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: f64,
        x_max: f64,
        z_min: f64,
        z_max: f64,
        t_min: f64,
        t_max: f64,
        hx: f64,
        hz: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(hx > 0.0 && hz > 0.0 && sigma > 0.0) {
            return Err(Error::Argument("search grid steps must be positive".into()));
        }
        if !(x_max > x_min && z_max > z_min && t_max > t_min) {
            return Err(Error::Argument("empty search ranges".into()));
        }
        let count = |lo: f64, hi: f64, h: f64, name: &str| -> Result<usize> {
            let c = (hi - lo) / h;
            if (c - c.round()).abs() > 1e-6 * c.max(1.0) {
                return Err(Error::Argument(format!(
                    "{name} extent {lo}..{hi} is not a whole number of steps of {h}"
                )));
            }
            Ok(c.round() as usize + 1)
        };
        let nx = count(x_min, x_max, hx, "x")?;
        let nz = count(z_min, z_max, hz, "z")?;
        let n_nu = count(t_min, t_max, sigma, "time")?;
        Ok(Self { x_min, x_max, z_min, z_max, t_min, t_max, hx, hz, sigma, nx, nz, n_nu })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn n_nu(&self) -> usize {
        self.n_nu
    }

    pub fn n_spatial(&self) -> usize {
        self.nx * self.nz
    }

    /// Spatial node positions in scan order (z-major, x fastest).
    pub fn spatial_nodes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_spatial());
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                out.push((self.x_min + ix as f64 * self.hx, self.z_min + iz as f64 * self.hz));
            }
        }
        out
    }

    pub fn spatial_at(&self, isp: usize) -> (f64, f64) {
        let (iz, ix) = (isp / self.nx, isp % self.nx);
        (self.x_min + ix as f64 * self.hx, self.z_min + iz as f64 * self.hz)
    }

    pub fn nu_at(&self, inu: usize) -> f64 {
        self.t_min + inu as f64 * self.sigma
    }

    pub fn nu_nodes(&self) -> Vec<f64> {
        (0..self.n_nu).map(|k| self.nu_at(k)).collect()
    }

    pub fn contains(&self, xi: (f64, f64), tau: f64) -> bool {
        xi.0 >= self.x_min
            && xi.0 <= self.x_max
            && xi.1 >= self.z_min
            && xi.1 <= self.z_max
            && tau >= self.t_min
            && tau <= self.t_max
    }

    /// Indices of the grid node nearest to `(xi, tau)`.
    pub fn nearest(&self, xi: (f64, f64), tau: f64) -> (usize, usize) {
        let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        let ix = clampi((xi.0 - self.x_min) / self.hx, self.nx);
        let iz = clampi((xi.1 - self.z_min) / self.hz, self.nz);
        let inu = clampi((tau - self.t_min) / self.sigma, self.n_nu);
        (iz * self.nx + ix, inu)
    }
}

/// Where an estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Initial,
    Truth,
    Afm,
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceEstimate {
    pub xi: (f64, f64),
    pub tau: f64,
    pub provenance: Provenance,
}

impl SourceEstimate {
    pub fn new(xi: (f64, f64), tau: f64, provenance: Provenance) -> Self {
        Self { xi, tau, provenance }
    }

    pub fn position_error(&self, other: (f64, f64)) -> f64 {
        ((self.xi.0 - other.0).powi(2) + (self.xi.1 - other.1).powi(2)).sqrt()
    }
}

/// The per-receiver auxiliary functions and their squared sum over the grid.
///
/// Values are node-major: entry `isp * n_nu + inu`.
#[derive(Debug, Clone)]
pub struct AuxiliarySurface {
    pub grid: SearchGrid,
    /// Active receiver indices, aligned with `xi_r`.
    pub receivers: Vec<usize>,
    pub xi_r: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// `2 chi_r(xi, tau)` per receiver.
    pub two_chi: Vec<f64>,
    /// `K_r = int f(t - tau) w_r(xi, t) dt` per receiver.
    pub k_r: Vec<f64>,
}

/// Summary numbers the location result carries instead of the full surface.
#[derive(Debug, Clone, Copy)]
pub struct GammaStats {
    pub min: f64,
    pub median: f64,
    /// Value of the runner-up local minimum, when one exists; the gap to the
    /// global minimum is a uniqueness diagnostic, not a guarantee.
    pub second_local_min: Option<f64>,
}

impl AuxiliarySurface {
    #[inline]
    pub fn index(&self, isp: usize, inu: usize) -> usize {
        isp * self.grid.n_nu + inu
    }

    pub fn gamma_at(&self, isp: usize, inu: usize) -> f64 {
        self.gamma[self.index(isp, inu)]
    }

    /// Grid argmin of Gamma; ties resolve to the smallest nu, then smallest
    /// zeta_z, then smallest zeta_x.
    pub fn argmin_indices(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_v = f64::INFINITY;
        for inu in 0..self.grid.n_nu {
            for isp in 0..self.grid.n_spatial() {
                let v = self.gamma[isp * self.grid.n_nu + inu];
                if v < best_v {
                    best_v = v;
                    best = (isp, inu);
                }
            }
        }
        best
    }

    pub fn stats(&self) -> GammaStats {
        let mut sorted: Vec<f64> = self.gamma.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite gamma"));
        let median = sorted[sorted.len() / 2];
        let min = sorted[0];
        GammaStats { min, median, second_local_min: self.second_local_min() }
    }

    /// Smallest local minimum of Gamma other than the global one, scanning
    /// the 6-neighborhood in (x, z, nu).
    fn second_local_min(&self) -> Option<f64> {
        let g = &self.gamma;
        let (nx, nz, nn) = (self.grid.nx, self.grid.nz, self.grid.n_nu);
        let global = self.argmin_indices();
        let mut second = f64::INFINITY;
        for iz in 0..nz {
            for ix in 0..nx {
                let isp = iz * nx + ix;
                for inu in 0..nn {
                    if (isp, inu) == global {
                        continue;
                    }
                    let v = g[isp * nn + inu];
                    let mut is_min = true;
                    let mut check = |isp2: usize, inu2: usize| {
                        if g[isp2 * nn + inu2] < v {
                            is_min = false;
                        }
                    };
                    if ix > 0 {
                        check(isp - 1, inu);
                    }
                    if ix + 1 < nx {
                        check(isp + 1, inu);
                    }
                    if iz > 0 {
                        check(isp - nx, inu);
                    }
                    if iz + 1 < nz {
                        check(isp + nx, inu);
                    }
                    if inu > 0 {
                        check(isp, inu - 1);
                    }
                    if inu + 1 < nn {
                        check(isp, inu + 1);
                    }
                    if is_min && v < second {
                        second = v;
                    }
                }
            }
        }
        second.is_finite().then_some(second)
    }
}

/// Values of `int f(t - nu) w(t) dt` for every `nu`, by rectangle-rule
/// summation over the wavelet's effective support `|t - nu| <= 3/f0`
/// intersected with the record. The support restriction changes the result
/// by less than 1e-30 relative (the wavelet tail) while keeping the cost
/// proportional to the support, not the record.
pub fn correlate_with_ricker(
    w: &[f64],
    sample_dt: f64,
    src: &RickerSource,
    nu_values: &[f64],
) -> Vec<f64> {
    let half = src.support_halfwidth();
    let n = w.len();
    nu_values
        .iter()
        .map(|&nu| {
            let lo = (((nu - half) / sample_dt).ceil().max(0.0)) as usize;
            let hi = ((((nu + half) / sample_dt).floor()).max(0.0) as usize).min(n - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                if k >= n {
                    break;
                }
                acc += ricker(src, k as f64 * sample_dt - nu + src.origin_time) * w[k];
            }
            acc * sample_dt
        })
        .collect()
}

/// Subsample a full-resolution series at the stride used for node samples,
/// so every correlation in a surface shares one quadrature.
fn strided(series: &[f64], stride: usize) -> Vec<f64> {
    series.iter().step_by(stride).cloned().collect()
}

/// Assemble the auxiliary surface from stored adjoint samples.
///
/// `src` provides the wavelet shape; `initial` is the `(xi_x, xi_z, tau)`
/// the misfit and adjoint fields were computed at.
pub fn build_surface(
    chi: &MisfitVector,
    adjoints: &[AdjointSamples],
    src: &RickerSource,
    initial: (f64, f64, f64),
    grid: &SearchGrid,
) -> Result<AuxiliarySurface> {
    if adjoints.len() != chi.active.len() {
        return Err(Error::Mismatch(format!(
            "{} adjoint fields for {} active receivers",
            adjoints.len(),
            chi.active.len()
        )));
    }
    for adj in adjoints {
        if adj.n_nodes != grid.n_spatial() {
            return Err(Error::Mismatch(format!(
                "adjoint sampled at {} nodes but the grid has {}",
                adj.n_nodes,
                grid.n_spatial()
            )));
        }
    }
    let (_, _, tau) = initial;
    let n_sp = grid.n_spatial();
    let n_nu = grid.n_nu();
    let nu_values = grid.nu_nodes();

    let mut xi_r: Vec<Vec<f64>> = Vec::with_capacity(adjoints.len());
    let mut two_chi = Vec::with_capacity(adjoints.len());
    let mut k_r = Vec::with_capacity(adjoints.len());
    for (a, adj) in adjoints.iter().enumerate() {
        let des = adj
            .designated
            .as_ref()
            .ok_or_else(|| Error::Mismatch("adjoint lacks designated-point samples".into()))?;
        let dt_s = adj.sample_dt();
        let k = correlate_with_ricker(&strided(&des.w, adj.stride), dt_s, src, &[tau])[0];
        let tc = 2.0 * chi.chi[a];
        two_chi.push(tc);
        k_r.push(k);

        let mut values = vec![0.0; n_sp * n_nu];
        values.par_chunks_mut(n_nu).enumerate().for_each(|(isp, out)| {
            let corr = correlate_with_ricker(adj.node_series(isp), dt_s, src, &nu_values);
            for (inu, c) in corr.into_iter().enumerate() {
                out[inu] = tc - (c - k);
            }
        });
        xi_r.push(values);
    }

    let mut gamma = vec![0.0; n_sp * n_nu];
    for (idx, g) in gamma.iter_mut().enumerate() {
        let mut acc = 0.0;
        for values in &xi_r {
            acc += values[idx] * values[idx];
        }
        *g = acc;
    }
    Ok(AuxiliarySurface {
        grid: grid.clone(),
        receivers: chi.active.clone(),
        xi_r,
        gamma,
        two_chi,
        k_r,
    })
}

/// Grid argmin of Gamma as a source estimate.
pub fn argmin_surface(surface: &AuxiliarySurface) -> SourceEstimate {
    let (isp, inu) = surface.argmin_indices();
    SourceEstimate::new(surface.grid.spatial_at(isp), surface.grid.nu_at(inu), Provenance::Afm)
}

/// One forward solve at the candidate; passes iff `sum_r |chi_r| < epsilon1`.
pub fn verify(
    prop: &Propagator,
    src: &RickerSource,
    recv: &ReceiverArray,
    observed: &Seismogram,
    window: Option<&TimeWindow>,
    candidate: &SourceEstimate,
    epsilon1: f64,
) -> Result<(bool, MisfitVector)> {
    let synth = prop.forward(&src.at_origin(candidate.tau), candidate.xi, recv)?;
    let m = misfit(observed, &synth, window, &recv.active)?;
    Ok((m.sum_abs() < epsilon1, m))
}

/// How the surface is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Store adjoint node samples, then correlate (the reference path).
    Stored,
    /// Fold the correlation into the adjoint time loop; memory scales with
    /// the surface, not with (nodes x time).
    Streaming,
    /// Streaming when the stored samples would exceed ~256 MiB per receiver.
    Auto,
}

/// Full direct-search location run: the output plus the surface it searched.
pub struct AfmRun {
    pub result: LocationResult,
    pub surface: AuxiliarySurface,
}

/// Solver-side context shared by the locators: a prepared propagator, the
/// wavelet template, the receivers, the observed data, and the misfit window.
pub struct LocateContext<'a> {
    pub prop: &'a Propagator,
    pub src: RickerSource,
    pub recv: &'a ReceiverArray,
    pub observed: &'a Seismogram,
    pub window: Option<TimeWindow>,
}

impl LocateContext<'_> {
    /// Forward solve at `(xi, tau)` and misfit against the observed data.
    pub fn evaluate(&self, xi: (f64, f64), tau: f64) -> Result<MisfitVector> {
        let synth = self.prop.forward(&self.src.at_origin(tau), xi, self.recv)?;
        misfit(self.observed, &synth, self.window.as_ref(), &self.recv.active)
    }
}

/// Direct search over the auxiliary surface, then verification.
///
/// Exactly `#R + 2` PDE solves: one forward at the initial guess, one
/// adjoint per active receiver, one verification forward. A failed
/// verification is reported through `VerifyStatus::RestartNeeded`, not an
/// error.
pub fn locate_afm(
    ctx: &LocateContext,
    grid: &SearchGrid,
    initial: SourceEstimate,
    epsilon1: f64,
    mode: BuildMode,
) -> Result<AfmRun> {
    let t0 = std::time::Instant::now();
    let chi0 = ctx.evaluate(initial.xi, initial.tau)?;
    let misfit0 = chi0.sum_abs();

    let surface = match resolve_mode(mode, grid, ctx.prop.cfg.nt, ctx.prop.cfg.sample_stride) {
        BuildMode::Streaming => build_surface_streaming(ctx, &chi0, initial, grid)?,
        _ => {
            let nodes = grid.spatial_nodes();
            let adjoints: Vec<AdjointSamples> = chi0
                .active
                .par_iter()
                .zip(chi0.adjoint_forcing.par_iter())
                .map(|(&r, forcing)| {
                    ctx.prop.adjoint(r, forcing, ctx.recv.positions[r], &nodes, Some(initial.xi))
                })
                .collect::<Result<_>>()?;
            build_surface(
                &chi0,
                &adjoints,
                &ctx.src,
                (initial.xi.0, initial.xi.1, initial.tau),
                grid,
            )?
        }
    };

    let estimate = argmin_surface(&surface);
    let (pass, chi_star) = verify(
        ctx.prop,
        &ctx.src,
        ctx.recv,
        ctx.observed,
        ctx.window.as_ref(),
        &estimate,
        epsilon1,
    )?;
    let n_r = ctx.recv.active.len() as u64;
    let solves = n_r + 2;
    let result = LocationResult {
        estimate,
        verified: if pass { VerifyStatus::Pass } else { VerifyStatus::RestartNeeded },
        trajectory: vec![
            TrajectoryPoint {
                stage: Stage::Afm,
                iter: 0,
                xi: initial.xi,
                tau: initial.tau,
                misfit_sum: misfit0,
            },
            TrajectoryPoint {
                stage: Stage::Afm,
                iter: 1,
                xi: estimate.xi,
                tau: estimate.tau,
                misfit_sum: chi_star.sum_abs(),
            },
        ],
        cost: CostReport {
            pde_solves: solves,
            iterations: 0,
            wall_seconds: t0.elapsed().as_secs_f64(),
            stages: vec![("afm".into(), solves)],
        },
        gamma: Some(surface.stats()),
        final_misfit: chi_star.sum_abs(),
    };
    Ok(AfmRun { result, surface })
}

fn resolve_mode(mode: BuildMode, grid: &SearchGrid, nt: usize, stride: usize) -> BuildMode {
    match mode {
        BuildMode::Auto => {
            let ns = (nt + stride - 1) / stride;
            let bytes = grid.n_spatial() as u64 * ns as u64 * 8;
            if bytes > 256 * 1024 * 1024 {
                BuildMode::Streaming
            } else {
                BuildMode::Stored
            }
        }
        m => m,
    }
}

/// Streaming surface assembly: one adjoint run per receiver, correlations
/// accumulated on the fly at the strided quadrature, so nothing of size
/// (nodes x time) is ever stored. Matches the stored path up to
/// floating-point summation order.
fn build_surface_streaming(
    ctx: &LocateContext,
    chi0: &MisfitVector,
    initial: SourceEstimate,
    grid: &SearchGrid,
) -> Result<AuxiliarySurface> {
    let prop = ctx.prop;
    let stride = prop.cfg.sample_stride;
    let dt_s = prop.cfg.dt * stride as f64;
    let nt = prop.cfg.nt;
    let n_sp = grid.n_spatial();
    let n_nu = grid.n_nu();
    let nu_values = grid.nu_nodes();
    let half = ctx.src.support_halfwidth();
    let nx = prop.domain().nx;

    let node_stencils: Vec<crate::source::Stencil2D> =
        grid.spatial_nodes().iter().map(|p| prop.stencil(*p)).collect::<Result<_>>()?;
    let xi_stencil = prop.stencil(initial.xi)?;

    let mut xi_r: Vec<Vec<f64>> = Vec::with_capacity(chi0.active.len());
    let mut two_chi = Vec::with_capacity(chi0.active.len());
    let mut k_r = Vec::with_capacity(chi0.active.len());

    for (a, &r) in chi0.active.iter().enumerate() {
        let mut corr = vec![0.0; n_sp * n_nu];
        let mut w_xi: Vec<f64> = Vec::with_capacity(nt / stride + 1);
        let mut gathered = vec![0.0; n_sp];
        prop.adjoint_raw(&chi0.adjoint_forcing[a], ctx.recv.positions[r], |p, u| {
            if p % stride != 0 {
                return;
            }
            let t = p as f64 * prop.cfg.dt;
            w_xi.push(xi_stencil.gather_weighted(u, nx));
            gathered
                .par_iter_mut()
                .enumerate()
                .for_each(|(isp, g)| *g = node_stencils[isp].gather_weighted(u, nx));
            // nu values whose wavelet support reaches this sample time.
            let lo = nu_values.partition_point(|&nu| nu < t - half);
            let hi = nu_values.partition_point(|&nu| nu <= t + half);
            if lo >= hi {
                return;
            }
            let f: Vec<f64> = nu_values[lo..hi]
                .iter()
                .map(|&nu| ricker(&ctx.src, t - nu + ctx.src.origin_time) * dt_s)
                .collect();
            corr.par_chunks_mut(n_nu).enumerate().for_each(|(isp, row)| {
                let g = gathered[isp];
                for (k, fv) in f.iter().enumerate() {
                    row[lo + k] += fv * g;
                }
            });
        })?;

        // The raw driver emits states from nt-2 down to 0; restore time order.
        w_xi.reverse();
        let k = correlate_with_ricker(&w_xi, dt_s, &ctx.src, &[initial.tau])[0];
        let tc = 2.0 * chi0.chi[a];
        let values: Vec<f64> = corr.into_iter().map(|c| tc - (c - k)).collect();
        two_chi.push(tc);
        k_r.push(k);
        xi_r.push(values);
    }

    let mut gamma = vec![0.0; n_sp * n_nu];
    for (idx, g) in gamma.iter_mut().enumerate() {
        let mut acc = 0.0;
        for values in &xi_r {
            acc += values[idx] * values[idx];
        }
        *g = acc;
    }
    Ok(AuxiliarySurface {
        grid: grid.clone(),
        receivers: chi0.active.clone(),
        xi_r,
        gamma,
        two_chi,
        k_r,
    })
}

/// Default verification tolerance: `0.1 #R` for noise-free data, `0.5 #R`
/// when the observed traces carry noise.
pub fn default_epsilon1(n_active: usize, noisy: bool) -> f64 {
    (if noisy { 0.5 } else { 0.1 }) * n_active as f64
}
