//! Gradient-based iterative location and the preprocessed pipeline: direct
//! search on a coarse auxiliary surface, verification, then steepest-descent
//! refinement from the direct-search estimate.

use rayon::prelude::*;

use crate::afm::{
    locate_afm, AfmRun, BuildMode, LocateContext, Provenance, SearchGrid, SourceEstimate,
};
use crate::error::{Error, Result};
use crate::harness::CostReport;
use crate::source::{ricker, ricker_deriv};
use crate::trace::MisfitVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Afm,
    Iterate,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Afm => "afm",
            Stage::Iterate => "iterate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStatus {
    Pass,
    RestartNeeded,
    /// No grid-search verification applies (plain iterative runs).
    NotChecked,
}

/// Why an iterative run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Update fell below the position and time tolerances.
    ToleranceReached,
    /// The misfit sum dropped below its target.
    MisfitTarget,
    MaxIterations,
    /// Line search failed to find decrease within its backtrack budget.
    Stalled,
}

impl StopReason {
    /// Whether the run terminated by a convergence tolerance rather than by
    /// giving up.
    pub fn by_tolerance(&self) -> bool {
        matches!(self, StopReason::ToleranceReached | StopReason::MisfitTarget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub stage: Stage,
    pub iter: usize,
    pub xi: (f64, f64),
    pub tau: f64,
    pub misfit_sum: f64,
}

/// Outcome of any locator run.
#[derive(Debug, Clone)]
pub struct LocationResult {
    pub estimate: SourceEstimate,
    pub verified: VerifyStatus,
    pub trajectory: Vec<TrajectoryPoint>,
    pub cost: CostReport,
    pub gamma: Option<crate::afm::GammaStats>,
    pub final_misfit: f64,
    /// Set for runs with an iterative stage.
    pub stop: Option<StopReason>,
}

/// Step-control and convergence parameters of the descent engine.
#[derive(Debug, Clone, Copy)]
pub struct IterateConfig {
    pub max_iterations: usize,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    /// Stop when an accepted update moves less than this in position (km)...
    pub tol_position: f64,
    /// ...and less than this in origin time (s).
    pub tol_time: f64,
    pub misfit_target: f64,
    /// Per-variable scales (km, km, s); the descent direction is the
    /// gradient preconditioned by their squares.
    pub scale_x: f64,
    pub scale_z: f64,
    pub scale_tau: f64,
}

impl IterateConfig {
    pub fn validate(&self) -> Result<()> {
        let all_pos = self.max_iterations > 0
            && self.initial_step > 0.0
            && self.sufficient_decrease > 0.0
            && self.max_backtracks > 0
            && self.tol_position > 0.0
            && self.tol_time > 0.0
            && self.misfit_target >= 0.0
            && self.scale_x > 0.0
            && self.scale_z > 0.0
            && self.scale_tau > 0.0;
        if !all_pos {
            return Err(Error::Argument("iterate config fields must be positive".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Argument("backtrack factor must be in (0,1)".into()));
        }
        Ok(())
    }

    /// Defaults with the per-variable scales taken from the search-grid cell.
    pub fn from_grid(grid: &SearchGrid) -> Self {
        Self {
            max_iterations: 30,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 20,
            tol_position: 0.02,
            tol_time: 0.005,
            misfit_target: 1e-8,
            scale_x: grid.hx,
            scale_z: grid.hz,
            scale_tau: grid.sigma,
        }
    }
}

/// Misfit gradient with respect to the source parameters:
/// `g_tau = sum_r int f'(t - tau) w_r(xi, t) dt` and
/// `g_xi = -sum_r int f(t - tau) grad w_r(xi, t) dt`,
/// with `grad w_r` taken by fourth-order centered differences of
/// delta-gathered values. Signs are pinned by the finite-difference checks
/// in the acceptance suite.
///
/// Costs `#R` adjoint solves, plus one forward solve when `chi` is not
/// supplied. Returns `(g_x, g_z, g_tau)` and the misfit it differentiated.
pub fn location_gradient(
    ctx: &LocateContext,
    xi: (f64, f64),
    tau: f64,
    chi: Option<MisfitVector>,
) -> Result<((f64, f64, f64), MisfitVector)> {
    let chi = match chi {
        Some(c) => c,
        None => ctx.evaluate(xi, tau)?,
    };
    let dt = ctx.prop.cfg.dt;
    let src_at_tau = ctx.src.at_origin(tau);
    let terms: Vec<(f64, f64, f64)> = chi
        .active
        .par_iter()
        .zip(chi.adjoint_forcing.par_iter())
        .map(|(&r, forcing)| {
            let adj = ctx.prop.adjoint(r, forcing, ctx.recv.positions[r], &[], Some(xi))?;
            let des = adj.designated.expect("designated point requested");
            let mut gx = 0.0;
            let mut gz = 0.0;
            let mut gtau = 0.0;
            for n in 0..adj.nt {
                let t = n as f64 * dt;
                let f = ricker(&src_at_tau, t);
                let fp = ricker_deriv(&src_at_tau, t);
                gx -= f * des.grad_x[n];
                gz -= f * des.grad_z[n];
                gtau += fp * des.w[n];
            }
            Ok((gx * dt, gz * dt, gtau * dt))
        })
        .collect::<Result<_>>()?;
    let mut total = (0.0, 0.0, 0.0);
    for (gx, gz, gtau) in terms {
        total.0 += gx;
        total.1 += gz;
        total.2 += gtau;
    }
    Ok((total, chi))
}

/// Box the iterates must stay inside: far enough from absorbing edges that
/// source stencils and gradient probes fit, and inside the record in time.
fn clamp_legal(ctx: &LocateContext, xi: (f64, f64), tau: f64) -> ((f64, f64), f64) {
    let d = ctx.prop.domain();
    let mx = 5.5 * d.dx;
    let mz = 5.5 * d.dz;
    let z_lo = if ctx.prop.free_top() { d.z_min } else { d.z_min + mz };
    let x = xi.0.clamp(d.x_min + mx, d.x_max - mx);
    let z = xi.1.clamp(z_lo, d.z_max - mz);
    let t = tau.clamp(0.0, ctx.prop.cfg.t_end());
    ((x, z), t)
}

/// Steepest descent with backtracking line search on the source parameters
/// jointly. Each iteration costs `#R` adjoint solves for the gradient plus
/// one forward solve per line-search trial; a warm-start misfit (when the
/// caller just evaluated the initial point) saves the first forward solve.
pub fn locate_iterative(
    ctx: &LocateContext,
    initial: SourceEstimate,
    cfg: &IterateConfig,
    warm: Option<MisfitVector>,
) -> Result<LocationResult> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let mut solves: u64 = 0;
    let (mut xi, mut tau) = clamp_legal(ctx, initial.xi, initial.tau);
    let mut chi = match warm {
        Some(c) => c,
        None => {
            solves += 1;
            ctx.evaluate(xi, tau)?
        }
    };
    let mut trajectory = vec![TrajectoryPoint {
        stage: Stage::Iterate,
        iter: 0,
        xi,
        tau,
        misfit_sum: chi.sum_abs(),
    }];
    let mut alpha = cfg.initial_step;
    let mut iterations = 0usize;
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=cfg.max_iterations {
        if chi.sum_abs() < cfg.misfit_target {
            stop = StopReason::MisfitTarget;
            break;
        }
        let ((gx, gz, gtau), chi_back) = location_gradient(ctx, xi, tau, Some(chi))?;
        solves += ctx.recv.active.len() as u64;
        chi = chi_back;

        let dir = (
            -cfg.scale_x * cfg.scale_x * gx,
            -cfg.scale_z * cfg.scale_z * gz,
            -cfg.scale_tau * cfg.scale_tau * gtau,
        );
        let slope = gx * dir.0 + gz * dir.1 + gtau * dir.2;
        if !slope.is_finite() || slope >= 0.0 {
            stop = if slope == 0.0 { StopReason::ToleranceReached } else { StopReason::Stalled };
            break;
        }
        // Keep the first trial within a few cells so far-off gradients do
        // not fling the iterate across the domain.
        let step_norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        let cap = 3.0 * cfg.scale_x.max(cfg.scale_z);
        let mut t = if step_norm > 0.0 { alpha.min(cap / step_norm) } else { alpha };

        let current = chi.sum_abs();
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let cand = clamp_legal(ctx, (xi.0 + t * dir.0, xi.1 + t * dir.1), tau + t * dir.2);
            let trial = ctx.evaluate(cand.0, cand.1)?;
            solves += 1;
            if trial.sum_abs() <= current + cfg.sufficient_decrease * t * slope {
                accepted = Some((cand, trial, t));
                break;
            }
            t *= cfg.backtrack_factor;
        }
        let Some(((new_xi, new_tau), new_chi, used)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };
        let moved = ((new_xi.0 - xi.0).powi(2) + (new_xi.1 - xi.1).powi(2)).sqrt();
        let dtau = (new_tau - tau).abs();
        xi = new_xi;
        tau = new_tau;
        chi = new_chi;
        alpha = (used * 2.0).min(cfg.initial_step.max(1.0));
        iterations = iter;
        trajectory.push(TrajectoryPoint {
            stage: Stage::Iterate,
            iter,
            xi,
            tau,
            misfit_sum: chi.sum_abs(),
        });
        if moved < cfg.tol_position && dtau < cfg.tol_time {
            stop = StopReason::ToleranceReached;
            break;
        }
    }

    Ok(LocationResult {
        estimate: SourceEstimate::new(xi, tau, Provenance::Iterate),
        verified: VerifyStatus::NotChecked,
        trajectory,
        cost: CostReport {
            pde_solves: solves,
            iterations,
            wall_seconds: t0.elapsed().as_secs_f64(),
            stages: vec![("iterate".into(), solves)],
        },
        gamma: None,
        final_misfit: chi.sum_abs(),
        stop: Some(stop),
    })
}

/// Direct search as a preprocessor, then descent from the verified estimate.
///
/// On verification failure the search is restarted once per unit of
/// `restart_budget` with the grid enlarged to the whole legal domain and the
/// whole record; if every attempt fails the result carries
/// `VerifyStatus::RestartNeeded` and no refinement stage.
pub fn locate_afpm(
    ctx: &LocateContext,
    grid: &SearchGrid,
    initial: SourceEstimate,
    epsilon1: f64,
    mode: BuildMode,
    icfg: &IterateConfig,
    restart_budget: usize,
) -> Result<LocationResult> {
    let t0 = std::time::Instant::now();
    let mut grid = grid.clone();
    let mut afm_stage: Option<AfmRun> = None;
    let mut afm_solves = 0u64;
    for attempt in 0..=restart_budget {
        let run = locate_afm(ctx, &grid, initial, epsilon1, mode)?;
        afm_solves += run.result.cost.pde_solves;
        let pass = run.result.verified == VerifyStatus::Pass;
        afm_stage = Some(run);
        if pass {
            break;
        }
        if attempt < restart_budget {
            grid = enlarged_grid(ctx, &grid)?;
        }
    }
    let afm_run = afm_stage.expect("at least one attempt");

    if afm_run.result.verified != VerifyStatus::Pass {
        let mut result = afm_run.result;
        result.cost.pde_solves = afm_solves;
        result.cost.stages = vec![("afm".into(), afm_solves)];
        result.cost.wall_seconds = t0.elapsed().as_secs_f64();
        return Ok(result);
    }

    let refined = locate_iterative(ctx, afm_run.result.estimate, icfg, None)?;

    let mut trajectory = afm_run.result.trajectory.clone();
    trajectory.extend(refined.trajectory.iter().cloned());
    let total = afm_solves + refined.cost.pde_solves;
    Ok(LocationResult {
        estimate: refined.estimate,
        verified: VerifyStatus::Pass,
        trajectory,
        cost: CostReport {
            pde_solves: total,
            iterations: refined.cost.iterations,
            wall_seconds: t0.elapsed().as_secs_f64(),
            stages: vec![("afm".into(), afm_solves), ("iterate".into(), refined.cost.pde_solves)],
        },
        gamma: afm_run.result.gamma,
        final_misfit: refined.final_misfit,
        stop: refined.stop,
    })
}

/// Search grid covering the whole legal source region and record, keeping
/// the original steps.
fn enlarged_grid(ctx: &LocateContext, grid: &SearchGrid) -> Result<SearchGrid> {
    let d = ctx.prop.domain();
    let mx = 4.0 * d.dx;
    let mz = 4.0 * d.dz;
    let snap = |v: f64, h: f64, up: bool| {
        if up {
            (v / h).ceil() * h
        } else {
            (v / h).floor() * h
        }
    };
    let x0 = snap(d.x_min + mx, grid.hx, true);
    let x1 = snap(d.x_max - mx, grid.hx, false);
    let z0 = if ctx.prop.free_top() {
        snap(d.z_min, grid.hz, true)
    } else {
        snap(d.z_min + mz, grid.hz, true)
    };
    let z1 = snap(d.z_max - mz, grid.hz, false);
    let t1 = snap(ctx.prop.cfg.t_end(), grid.sigma, false);
    SearchGrid::new(x0, x1, z0, z1, 0.0, t1, grid.hx, grid.hz, grid.sigma)
}
