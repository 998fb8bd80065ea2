//! Explicit finite-difference time-domain solver for the 2-D acoustic wave
//! equation `u_tt = div(c^2 grad u) + f(t - tau) delta(x - xi)`, with a
//! homogeneous-Neumann free surface / reflecting edges and convolutional PML
//! on absorbing edges. Runs forward simulations, per-receiver adjoint
//! (terminal-value) simulations, and samples fields at arbitrary points
//! through the regularized delta stencil.
//!
//! Discretization: leapfrog in time; in space, fourth-order staggered
//! first-derivative operators applied in flux form, with `c^2` averaged onto
//! half nodes. Reflecting edges mirror the field about the edge node, which
//! makes the flux antisymmetric there; the resulting operator `L` satisfies
//! `W L = -G^T C G` with `W` the trapezoid cell weights, i.e. it is exactly
//! self-adjoint under the `W`-weighted inner product. The adjoint solve is
//! implemented as the exact transpose of the forward recursion (a forward run
//! on the time-reversed forcing, with a one-sample index shift), so discrete
//! dot-product identities hold to rounding, not discretization, accuracy.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::media::{rasterize, Domain2D, RasterizedModel, VelocityModel};
use crate::source::{delta_weights_2d, ricker, RickerSource, Stencil2D};

/// Largest stable Courant number of the fourth-order staggered stencil under
/// leapfrog: the spatial symbol peaks at (9/8 + 1/24)*2 per axis, giving
/// `c dt sqrt(1/dx^2 + 1/dz^2) <= 6/7`.
pub const C_SCHEME: f64 = 6.0 / 7.0;

static SOLVE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Number of PDE solves (forward + adjoint) since the last reset. Monotone
/// non-decreasing between resets; safe to read from concurrent workers.
pub fn solve_counter() -> u64 {
    SOLVE_COUNTER.load(Ordering::SeqCst)
}

pub fn reset_solve_counter() {
    SOLVE_COUNTER.store(0, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Homogeneous Neumann at z = 0; physically the free surface.
    FreeSurface,
    /// Same mirror condition on any other edge (total reflection).
    Reflecting,
    /// Convolutional PML absorbing strip.
    Pml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundaries {
    pub top: EdgeKind,
    pub bottom: EdgeKind,
    pub left: EdgeKind,
    pub right: EdgeKind,
}

impl Boundaries {
    /// Free surface on top, PML elsewhere: the production configuration.
    pub fn surface_with_pml() -> Self {
        Self {
            top: EdgeKind::FreeSurface,
            bottom: EdgeKind::Pml,
            left: EdgeKind::Pml,
            right: EdgeKind::Pml,
        }
    }

    /// Mirror condition on all four edges; the discrete operator is exactly
    /// self-adjoint in this mode.
    pub fn all_reflecting() -> Self {
        Self {
            top: EdgeKind::Reflecting,
            bottom: EdgeKind::Reflecting,
            left: EdgeKind::Reflecting,
            right: EdgeKind::Reflecting,
        }
    }

    pub fn all_pml() -> Self {
        Self { top: EdgeKind::Pml, bottom: EdgeKind::Pml, left: EdgeKind::Pml, right: EdgeKind::Pml }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub domain: Domain2D,
    pub dt: f64,
    /// Step count; the record length is T = (nt - 1) dt.
    pub nt: usize,
    pub boundaries: Boundaries,
    /// PML strip width in cells.
    pub pml_width: usize,
    /// Theoretical normal-incidence reflection coefficient of the strip.
    pub pml_reflection_target: f64,
    /// Reference frequency for the complex-frequency-shift profile.
    pub pml_alpha_hz: f64,
    /// Fraction of the stability limit the time step may use.
    pub cfl_safety: f64,
    /// Time stride for adjoint field sampling at search nodes.
    pub sample_stride: usize,
}

impl SimConfig {
    pub fn new(domain: Domain2D, dt: f64, nt: usize) -> Self {
        Self {
            domain,
            dt,
            nt,
            boundaries: Boundaries::surface_with_pml(),
            pml_width: 20,
            pml_reflection_target: 1e-4,
            pml_alpha_hz: 2.0,
            cfl_safety: 0.8,
            sample_stride: 1,
        }
    }

    /// Configuration with dt derived from the CFL bound for `c_max`, adjusted
    /// so the record length `t_end` is an exact number of steps.
    pub fn with_auto_dt(domain: Domain2D, c_max: f64, t_end: f64, cfl_safety: f64) -> Result<Self> {
        if !(cfl_safety > 0.0 && cfl_safety < 1.0) {
            return Err(Error::SolverConfig(format!("cfl_safety must be in (0,1), got {cfl_safety}")));
        }
        if !(t_end > 0.0 && c_max > 0.0) {
            return Err(Error::SolverConfig("t_end and c_max must be positive".into()));
        }
        let grid = (1.0 / (domain.dx * domain.dx) + 1.0 / (domain.dz * domain.dz)).sqrt();
        let dt_max = cfl_safety * C_SCHEME / (c_max * grid);
        let steps = (t_end / dt_max).ceil().max(1.0) as usize;
        let dt = t_end / steps as f64;
        let mut cfg = Self::new(domain, dt, steps + 1);
        cfg.cfl_safety = cfl_safety;
        Ok(cfg)
    }

    pub fn t_end(&self) -> f64 {
        (self.nt - 1) as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nt).map(move |n| n as f64 * self.dt)
    }

    pub fn validate(&self, c_max: f64) -> Result<()> {
        if self.nt < 2 {
            return Err(Error::SolverConfig(format!("nt = {} too small", self.nt)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::SolverConfig(format!("dt = {} invalid", self.dt)));
        }
        if self.domain.nx < 8 || self.domain.nz < 8 {
            return Err(Error::SolverConfig(format!(
                "simulation grid {}x{} too small (need >= 8 nodes per axis)",
                self.domain.nx, self.domain.nz
            )));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(Error::SolverConfig(format!("cfl_safety = {} not in (0,1)", self.cfl_safety)));
        }
        if self.sample_stride == 0 {
            return Err(Error::SolverConfig("sample_stride must be >= 1".into()));
        }
        let b = self.boundaries;
        let uses_pml = [b.top, b.bottom, b.left, b.right].contains(&EdgeKind::Pml);
        if uses_pml {
            if self.pml_width < 4 {
                return Err(Error::SolverConfig(format!("pml_width = {} too thin", self.pml_width)));
            }
            if 2 * self.pml_width + 4 > self.domain.nx.min(self.domain.nz) {
                return Err(Error::SolverConfig(format!(
                    "pml_width = {} does not fit a {}x{} grid",
                    self.pml_width, self.domain.nx, self.domain.nz
                )));
            }
            if !(self.pml_reflection_target > 0.0 && self.pml_reflection_target < 1.0) {
                return Err(Error::SolverConfig("pml_reflection_target must be in (0,1)".into()));
            }
        }
        let grid = (1.0 / (self.domain.dx * self.domain.dx)
            + 1.0 / (self.domain.dz * self.domain.dz))
            .sqrt();
        let number = c_max * self.dt * grid;
        let limit = self.cfl_safety * C_SCHEME;
        if number > limit {
            return Err(Error::CflViolation { number, limit });
        }
        Ok(())
    }
}

/// Receiver positions plus the subset actually used for inversion
/// (0-based indices into `positions`).
#[derive(Debug, Clone)]
pub struct ReceiverArray {
    pub positions: Vec<(f64, f64)>,
    pub active: Vec<usize>,
}

impl ReceiverArray {
    pub fn new(positions: Vec<(f64, f64)>, active: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Argument("no receivers".into()));
        }
        for &idx in &active {
            if idx >= positions.len() {
                return Err(Error::Argument(format!(
                    "active receiver index {idx} out of range ({} receivers)",
                    positions.len()
                )));
            }
        }
        Ok(Self { positions, active })
    }

    pub fn all_active(positions: Vec<(f64, f64)>) -> Result<Self> {
        let active = (0..positions.len()).collect();
        Self::new(positions, active)
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }
}

/// Per-receiver time series, either synthetic or observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Seismogram {
    pub dt: f64,
    pub nt: usize,
    pub traces: Vec<Vec<f64>>,
}

impl Seismogram {
    pub fn zeros(dt: f64, nt: usize, n_receivers: usize) -> Self {
        Self { dt, nt, traces: vec![vec![0.0; nt]; n_receivers] }
    }

    pub fn n_receivers(&self) -> usize {
        self.traces.len()
    }

    pub fn max_abs(&self, receiver: usize) -> f64 {
        self.traces[receiver].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Traces with the time axis flipped; applying it twice is the identity.
    pub fn reversed_time(&self) -> Self {
        let traces = self
            .traces
            .iter()
            .map(|t| t.iter().rev().cloned().collect())
            .collect();
        Self { dt: self.dt, nt: self.nt, traces }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (r, t) in self.traces.iter().enumerate() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Mismatch(format!("non-finite sample in trace {r}")));
            }
        }
        Ok(())
    }

    /// CSV with header `t,r1,r2,...` and 17 significant digits per field; the
    /// same format serves as synthetic output and observed input.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::with_capacity(self.nt * (self.n_receivers() + 1) * 26);
        out.push('t');
        for r in 1..=self.n_receivers() {
            out.push_str(&format!(",r{r}"));
        }
        out.push('\n');
        for n in 0..self.nt {
            write!(out, "{:.16e}", n as f64 * self.dt).expect("string write");
            for tr in &self.traces {
                write!(out, ",{:.16e}", tr[n]).expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty seismogram file".into() })?;
        let cols = header.split(',').count();
        if cols < 2 || !header.starts_with('t') {
            return Err(Error::Parse { line: 1, msg: "expected header `t,r1,...`".into() });
        }
        let n_recv = cols - 1;
        let mut times = Vec::new();
        let mut traces = vec![Vec::new(); n_recv];
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let t: f64 = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::Parse { line: idx + 1, msg: "bad time value".into() })?;
            times.push(t);
            let mut count = 0;
            for (r, tok) in fields.enumerate() {
                if r >= n_recv {
                    break;
                }
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse { line: idx + 1, msg: format!("bad sample `{tok}`") })?;
                traces[r].push(v);
                count += 1;
            }
            if count != n_recv {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {n_recv} samples, got {count}"),
                });
            }
        }
        if times.len() < 2 {
            return Err(Error::Parse { line: 1, msg: "need at least two samples".into() });
        }
        let dt = times[1] - times[0];
        for (k, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1e-12) {
                return Err(Error::Parse { line: k + 3, msg: "non-uniform time axis".into() });
            }
        }
        Ok(Self { dt, nt: times.len(), traces })
    }
}

/// Adjoint field sampled at the search nodes (strided in time) and, in full
/// time resolution, at one designated point together with its gradient there.
#[derive(Debug, Clone)]
pub struct AdjointSamples {
    pub receiver: usize,
    pub dt: f64,
    pub nt: usize,
    pub stride: usize,
    pub n_nodes: usize,
    /// Node-major samples: entry `node * n_samples + k` holds the field at
    /// time index `k * stride`.
    pub node_values: Vec<f64>,
    pub designated: Option<DesignatedSamples>,
}

/// Full-resolution adjoint samples at the designated point.
#[derive(Debug, Clone)]
pub struct DesignatedSamples {
    pub at: (f64, f64),
    pub w: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_z: Vec<f64>,
}

impl AdjointSamples {
    pub fn n_samples(&self) -> usize {
        (self.nt + self.stride - 1) / self.stride
    }

    pub fn sample_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }

    pub fn node_series(&self, node: usize) -> &[f64] {
        let ns = self.n_samples();
        &self.node_values[node * ns..(node + 1) * ns]
    }
}

/// Reusable solver for one (model, config) pair: rasterized squared speeds,
/// half-node averages, and PML profiles. Each solve owns its field buffers,
/// so a shared `Propagator` may serve concurrent solves.
pub struct Propagator {
    pub cfg: SimConfig,
    raster: RasterizedModel,
    c2hx: Vec<f64>,
    c2hz: Vec<f64>,
    pml_x: Option<PmlAxis>,
    pml_z: Option<PmlAxis>,
    free_top: bool,
}

struct PmlAxis {
    /// (b, a) update coefficients at half nodes (gradient memory).
    bh: Vec<f64>,
    ah: Vec<f64>,
    /// (b, a) at full nodes (divergence memory).
    bf: Vec<f64>,
    af: Vec<f64>,
    /// Index ranges with nonzero damping.
    half_lo: std::ops::Range<usize>,
    half_hi: std::ops::Range<usize>,
    full_lo: std::ops::Range<usize>,
    full_hi: std::ops::Range<usize>,
}

impl PmlAxis {
    fn build(
        n: usize,
        h: f64,
        width: usize,
        lo_on: bool,
        hi_on: bool,
        c_max: f64,
        target: f64,
        alpha_hz: f64,
        dt: f64,
    ) -> Self {
        let sigma_max = -3.0 * c_max * target.ln() / (2.0 * width as f64 * h);
        let alpha_max = std::f64::consts::PI * alpha_hz;
        let coeff = |d: f64| -> (f64, f64) {
            // d in (0,1]: relative depth into the strip.
            let sigma = sigma_max * d * d;
            let alpha = alpha_max * (1.0 - d);
            let b = (-(sigma + alpha) * dt).exp();
            let a = if sigma + alpha > 0.0 { sigma * (b - 1.0) / (sigma + alpha) } else { 0.0 };
            (b, a)
        };
        let w = width as f64;
        let mut bh = vec![1.0; n - 1];
        let mut ah = vec![0.0; n - 1];
        let mut bf = vec![1.0; n];
        let mut af = vec![0.0; n];
        if lo_on {
            for i in 0..width {
                let (b, a) = coeff((w - i as f64 - 0.5) / w);
                bh[i] = b;
                ah[i] = a;
                let (b, a) = coeff((w - i as f64) / w);
                bf[i] = b;
                af[i] = a;
            }
        }
        if hi_on {
            for k in 0..width {
                let ih = n - 2 - k;
                let (b, a) = coeff((w - k as f64 - 0.5) / w);
                bh[ih] = b;
                ah[ih] = a;
                let ifl = n - 1 - k;
                let (b, a) = coeff((w - k as f64) / w);
                bf[ifl] = b;
                af[ifl] = a;
            }
        }
        Self {
            bh,
            ah,
            bf,
            af,
            half_lo: if lo_on { 0..width } else { 0..0 },
            half_hi: if hi_on { n - 1 - width..n - 1 } else { 0..0 },
            full_lo: if lo_on { 0..width } else { 0..0 },
            full_hi: if hi_on { n - width..n } else { 0..0 },
        }
    }
}

impl Propagator {
    pub fn new(model: &VelocityModel, cfg: &SimConfig) -> Result<Self> {
        let raster = rasterize(model, &cfg.domain)?;
        cfg.validate(raster.max)?;
        Self::build(raster, cfg)
    }

    /// Skips CFL validation so tests can drive the blow-up detector.
    #[cfg(test)]
    fn new_unvalidated(model: &VelocityModel, cfg: &SimConfig) -> Result<Self> {
        Self::build(rasterize(model, &cfg.domain)?, cfg)
    }

    fn build(raster: RasterizedModel, cfg: &SimConfig) -> Result<Self> {
        let (nx, nz) = (cfg.domain.nx, cfg.domain.nz);
        let c2: Vec<f64> = raster.values.iter().map(|c| c * c).collect();
        let mut c2hx = vec![0.0; (nx - 1) * nz];
        for j in 0..nz {
            for i in 0..nx - 1 {
                c2hx[j * (nx - 1) + i] = 0.5 * (c2[j * nx + i] + c2[j * nx + i + 1]);
            }
        }
        let mut c2hz = vec![0.0; nx * (nz - 1)];
        for j in 0..nz - 1 {
            for i in 0..nx {
                c2hz[j * nx + i] = 0.5 * (c2[j * nx + i] + c2[(j + 1) * nx + i]);
            }
        }
        let b = cfg.boundaries;
        let pml_x = if b.left == EdgeKind::Pml || b.right == EdgeKind::Pml {
            Some(PmlAxis::build(
                nx,
                cfg.domain.dx,
                cfg.pml_width,
                b.left == EdgeKind::Pml,
                b.right == EdgeKind::Pml,
                raster.max,
                cfg.pml_reflection_target,
                cfg.pml_alpha_hz,
                cfg.dt,
            ))
        } else {
            None
        };
        let pml_z = if b.top == EdgeKind::Pml || b.bottom == EdgeKind::Pml {
            Some(PmlAxis::build(
                nz,
                cfg.domain.dz,
                cfg.pml_width,
                b.top == EdgeKind::Pml,
                b.bottom == EdgeKind::Pml,
                raster.max,
                cfg.pml_reflection_target,
                cfg.pml_alpha_hz,
                cfg.dt,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg: *cfg,
            raster,
            c2hx,
            c2hz,
            pml_x,
            pml_z,
            free_top: matches!(b.top, EdgeKind::FreeSurface | EdgeKind::Reflecting),
        })
    }

    pub fn raster(&self) -> &RasterizedModel {
        &self.raster
    }

    pub fn domain(&self) -> &Domain2D {
        &self.cfg.domain
    }

    /// Whether point stencils may truncate across the top edge.
    pub fn free_top(&self) -> bool {
        self.free_top
    }

    pub fn stencil(&self, at: (f64, f64)) -> Result<Stencil2D> {
        delta_weights_2d(at, &self.cfg.domain, self.free_top)
    }

    /// Forward simulation from rest with a Ricker point source at `xi`;
    /// returns the gathered trace at every receiver position (active or not).
    pub fn forward(&self, src: &RickerSource, xi: (f64, f64), recv: &ReceiverArray) -> Result<Seismogram> {
        let stencil = self.stencil(xi)?;
        let recv_stencils: Vec<Stencil2D> =
            recv.positions.iter().map(|p| self.stencil(*p)).collect::<Result<_>>()?;
        let nt = self.cfg.nt;
        let amps: Vec<f64> = (0..nt - 1).map(|n| ricker(src, n as f64 * self.cfg.dt)).collect();
        SOLVE_COUNTER.fetch_add(1, Ordering::SeqCst);

        let nx = self.cfg.domain.nx;
        let mut seis = Seismogram::zeros(self.cfg.dt, nt, recv.positions.len());
        self.run(&amps, &stencil, false, nt, |n, u, _| {
            for (r, st) in recv_stencils.iter().enumerate() {
                seis.traces[r][n] = st.gather(u, nx);
            }
        })?;
        Ok(seis)
    }

    /// Forward simulation that also hands each state to `monitor(step,
    /// u_cur, u_prev)`, for energy bookkeeping and field probes.
    pub fn forward_monitored(
        &self,
        src: &RickerSource,
        xi: (f64, f64),
        recv: &ReceiverArray,
        mut monitor: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<Seismogram> {
        let stencil = self.stencil(xi)?;
        let recv_stencils: Vec<Stencil2D> =
            recv.positions.iter().map(|p| self.stencil(*p)).collect::<Result<_>>()?;
        let nt = self.cfg.nt;
        let amps: Vec<f64> = (0..nt - 1).map(|n| ricker(src, n as f64 * self.cfg.dt)).collect();
        SOLVE_COUNTER.fetch_add(1, Ordering::SeqCst);
        let nx = self.cfg.domain.nx;
        let mut seis = Seismogram::zeros(self.cfg.dt, nt, recv.positions.len());
        self.run(&amps, &stencil, false, nt, |n, u, u_prev| {
            for (r, st) in recv_stencils.iter().enumerate() {
                seis.traces[r][n] = st.gather(u, nx);
            }
            monitor(n, u, u_prev);
        })?;
        Ok(seis)
    }

    /// Terminal-value adjoint driver: runs the exact transpose of the
    /// forward recursion (a forward run on the index-reversed forcing) and
    /// hands each state to `on_state(time_index, field)` in reverse physical
    /// time order, from `nt - 2` down to `0`. The state at `nt - 1` is
    /// identically zero and not emitted.
    pub fn adjoint_raw(
        &self,
        forcing: &[f64],
        eta_r: (f64, f64),
        mut on_state: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let nt = self.cfg.nt;
        if forcing.len() != nt {
            return Err(Error::Mismatch(format!(
                "adjoint forcing has {} samples, expected nt = {nt}",
                forcing.len()
            )));
        }
        let stencil = self.stencil(eta_r)?;
        let amps: Vec<f64> = (0..nt.saturating_sub(2)).map(|m| forcing[nt - 2 - m]).collect();
        SOLVE_COUNTER.fetch_add(1, Ordering::SeqCst);
        self.run(&amps, &stencil, true, nt - 1, |m, u, _| {
            on_state(nt - 2 - m, u);
        })
    }

    /// Terminal-value adjoint solve driven by `forcing(t) delta(x - eta_r)`.
    ///
    /// Samples the field at every search node (strided in time by
    /// `cfg.sample_stride`) and, at full resolution, at the designated point
    /// and its fourth-order difference probes.
    pub fn adjoint(
        &self,
        receiver: usize,
        forcing: &[f64],
        eta_r: (f64, f64),
        search_nodes: &[(f64, f64)],
        designated: Option<(f64, f64)>,
    ) -> Result<AdjointSamples> {
        let nt = self.cfg.nt;
        let node_stencils: Vec<Stencil2D> =
            search_nodes.iter().map(|p| self.stencil(*p)).collect::<Result<_>>()?;

        // Designated-point probes at +-dx and +-2dx per axis for the
        // fourth-order gradient.
        let (dx, dz) = (self.cfg.domain.dx, self.cfg.domain.dz);
        let probe_offsets = [
            (0.0, 0.0),
            (dx, 0.0),
            (-dx, 0.0),
            (2.0 * dx, 0.0),
            (-2.0 * dx, 0.0),
            (0.0, dz),
            (0.0, -dz),
            (0.0, 2.0 * dz),
            (0.0, -2.0 * dz),
        ];
        let probe_stencils: Option<Vec<Stencil2D>> = match designated {
            Some(xi) => Some(
                probe_offsets
                    .iter()
                    .map(|(ox, oz)| self.stencil((xi.0 + ox, xi.1 + oz)))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };

        let stride = self.cfg.sample_stride;
        let ns = (nt + stride - 1) / stride;
        let mut node_values = vec![0.0; search_nodes.len() * ns];
        let mut probes = vec![vec![0.0; nt]; probe_offsets.len()];

        let nx = self.cfg.domain.nx;
        let has_probes = probe_stencils.is_some();
        self.adjoint_raw(forcing, eta_r, |p, u| {
            if p % stride == 0 {
                let k = p / stride;
                for (node, st) in node_stencils.iter().enumerate() {
                    node_values[node * ns + k] = st.gather_weighted(u, nx);
                }
            }
            if has_probes {
                for (q, st) in probe_stencils.as_ref().unwrap().iter().enumerate() {
                    probes[q][p] = st.gather_weighted(u, nx);
                }
            }
        })?;

        let designated = designated.map(|at| {
            let d4 = |p1: &[f64], m1: &[f64], p2: &[f64], m2: &[f64], h: f64, n: usize| {
                (8.0 * (p1[n] - m1[n]) - (p2[n] - m2[n])) / (12.0 * h)
            };
            let grad_x: Vec<f64> =
                (0..nt).map(|n| d4(&probes[1], &probes[2], &probes[3], &probes[4], dx, n)).collect();
            let grad_z: Vec<f64> =
                (0..nt).map(|n| d4(&probes[5], &probes[6], &probes[7], &probes[8], dz, n)).collect();
            DesignatedSamples { at, w: std::mem::take(&mut probes[0]), grad_x, grad_z }
        });

        Ok(AdjointSamples {
            receiver,
            dt: self.cfg.dt,
            nt,
            stride,
            n_nodes: search_nodes.len(),
            node_values,
            designated,
        })
    }

    /// Discrete energy of two consecutive states at the half step between
    /// them: kinetic term from the time difference, potential term from the
    /// product of consecutive spatial gradients. For the all-reflecting
    /// operator this quantity is conserved exactly by the unforced scheme.
    pub fn energy(&self, u_prev: &[f64], u_cur: &[f64]) -> f64 {
        let d = &self.cfg.domain;
        let (nx, nz) = (d.nx, d.nz);
        let dt = self.cfg.dt;
        let area = d.dx * d.dz;
        let mut kin = 0.0;
        for j in 0..nz {
            let wz = if j == 0 || j == nz - 1 { 0.5 } else { 1.0 };
            for i in 0..nx {
                let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                let v = (u_cur[j * nx + i] - u_prev[j * nx + i]) / dt;
                kin += wx * wz * v * v;
            }
        }
        // Each potential term keeps the cell weight of its perpendicular
        // axis; that makes this the exactly conserved functional of the
        // mirror-boundary scheme.
        let mut pot = 0.0;
        let mut gx_cur = vec![0.0; nx - 1];
        let mut gx_prev = vec![0.0; nx - 1];
        for j in 0..nz {
            let wz = if j == 0 || j == nz - 1 { 0.5 } else { 1.0 };
            gradient_x(&u_cur[j * nx..(j + 1) * nx], &mut gx_cur, d.dx);
            gradient_x(&u_prev[j * nx..(j + 1) * nx], &mut gx_prev, d.dx);
            let c2 = &self.c2hx[j * (nx - 1)..(j + 1) * (nx - 1)];
            for i in 0..nx - 1 {
                pot += wz * c2[i] * gx_cur[i] * gx_prev[i];
            }
        }
        let mut gz_cur = vec![0.0; nx];
        let mut gz_prev = vec![0.0; nx];
        for jh in 0..nz - 1 {
            gradient_z_row(u_cur, nx, nz, jh, &mut gz_cur, d.dz);
            gradient_z_row(u_prev, nx, nz, jh, &mut gz_prev, d.dz);
            let c2 = &self.c2hz[jh * nx..(jh + 1) * nx];
            for i in 0..nx {
                let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                pot += wx * c2[i] * gz_cur[i] * gz_prev[i];
            }
        }
        0.5 * (kin + pot) * area
    }

    /// Leapfrog driver: records states `0..n_states`, advancing with
    /// `u_next = 2 u - u_prev + dt^2 (L u + amps[m] * stencil)`.
    fn run(
        &self,
        amps: &[f64],
        stencil: &Stencil2D,
        adjoint_scatter: bool,
        n_states: usize,
        mut on_state: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<()> {
        let d = &self.cfg.domain;
        let (nx, nz) = (d.nx, d.nz);
        let dt2 = self.cfg.dt * self.cfg.dt;

        let mut u_prev = vec![0.0; nx * nz];
        let mut u_cur = vec![0.0; nx * nz];
        let mut u_next = vec![0.0; nx * nz];
        let mut lap = vec![0.0; nx * nz];
        let mut fx = vec![0.0; (nx - 1) * nz];
        let mut fz = vec![0.0; nx * (nz - 1)];
        let mut psi = PmlMemory::new(self.pml_x.is_some(), self.pml_z.is_some(), nx, nz);

        on_state(0, &u_cur, &u_prev);
        for m in 0..n_states.saturating_sub(1) {
            self.apply_operator(&u_cur, &mut lap, &mut fx, &mut fz, &mut psi);
            for k in 0..u_next.len() {
                u_next[k] = 2.0 * u_cur[k] - u_prev[k] + dt2 * lap[k];
            }
            let amp = amps.get(m).copied().unwrap_or(0.0);
            if amp != 0.0 {
                if adjoint_scatter {
                    stencil.scatter_add_adjoint(&mut u_next, nx, dt2 * amp);
                } else {
                    stencil.scatter_add(&mut u_next, nx, dt2 * amp);
                }
            }
            if m % 64 == 63 || m + 2 == n_states {
                if u_next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalBlowup { step: m + 1 });
                }
            }
            std::mem::swap(&mut u_prev, &mut u_cur);
            std::mem::swap(&mut u_cur, &mut u_next);
            on_state(m + 1, &u_cur, &u_prev);
        }
        Ok(())
    }

    /// `lap <- div(c^2 grad u)` with CPML memory updates where configured.
    fn apply_operator(
        &self,
        u: &[f64],
        lap: &mut [f64],
        fx: &mut [f64],
        fz: &mut [f64],
        psi: &mut PmlMemory,
    ) {
        let d = &self.cfg.domain;
        let (nx, nz) = (d.nx, d.nz);

        // x fluxes row by row.
        let mut g = vec![0.0; nx - 1];
        for j in 0..nz {
            let row = &u[j * nx..(j + 1) * nx];
            gradient_x(row, &mut g, d.dx);
            if let (Some(px), Some(mem)) = (&self.pml_x, psi.gx.as_mut()) {
                let mrow = &mut mem[j * (nx - 1)..(j + 1) * (nx - 1)];
                for i in px.half_lo.clone().chain(px.half_hi.clone()) {
                    mrow[i] = px.bh[i] * mrow[i] + px.ah[i] * g[i];
                    g[i] += mrow[i];
                }
            }
            let c2 = &self.c2hx[j * (nx - 1)..(j + 1) * (nx - 1)];
            let frow = &mut fx[j * (nx - 1)..(j + 1) * (nx - 1)];
            for i in 0..nx - 1 {
                frow[i] = c2[i] * g[i];
            }
        }

        // x divergence into lap.
        let mut dv = vec![0.0; nx];
        for j in 0..nz {
            divergence_x(&fx[j * (nx - 1)..(j + 1) * (nx - 1)], &mut dv, d.dx);
            if let (Some(px), Some(mem)) = (&self.pml_x, psi.dx.as_mut()) {
                let mrow = &mut mem[j * nx..(j + 1) * nx];
                for i in px.full_lo.clone().chain(px.full_hi.clone()) {
                    mrow[i] = px.bf[i] * mrow[i] + px.af[i] * dv[i];
                    dv[i] += mrow[i];
                }
            }
            lap[j * nx..(j + 1) * nx].copy_from_slice(&dv);
        }

        // z fluxes row by row (each half row uses four u rows).
        let mut gz = vec![0.0; nx];
        for jh in 0..nz - 1 {
            gradient_z_row(u, nx, nz, jh, &mut gz, d.dz);
            if let (Some(pz), Some(mem)) = (&self.pml_z, psi.gz.as_mut()) {
                if pz.half_lo.contains(&jh) || pz.half_hi.contains(&jh) {
                    let (b, a) = (pz.bh[jh], pz.ah[jh]);
                    let mrow = &mut mem[jh * nx..(jh + 1) * nx];
                    for i in 0..nx {
                        mrow[i] = b * mrow[i] + a * gz[i];
                        gz[i] += mrow[i];
                    }
                }
            }
            let c2 = &self.c2hz[jh * nx..(jh + 1) * nx];
            let frow = &mut fz[jh * nx..(jh + 1) * nx];
            for i in 0..nx {
                frow[i] = c2[i] * gz[i];
            }
        }

        // z divergence accumulated into lap.
        let mut dvz = vec![0.0; nx];
        for j in 0..nz {
            divergence_z_row(fz, nx, nz, j, &mut dvz, d.dz);
            if let (Some(pz), Some(mem)) = (&self.pml_z, psi.dz.as_mut()) {
                if pz.full_lo.contains(&j) || pz.full_hi.contains(&j) {
                    let (b, a) = (pz.bf[j], pz.af[j]);
                    let mrow = &mut mem[j * nx..(j + 1) * nx];
                    for i in 0..nx {
                        mrow[i] = b * mrow[i] + a * dvz[i];
                        dvz[i] += mrow[i];
                    }
                }
            }
            let lrow = &mut lap[j * nx..(j + 1) * nx];
            for i in 0..nx {
                lrow[i] += dvz[i];
            }
        }
    }
}

struct PmlMemory {
    gx: Option<Vec<f64>>,
    dx: Option<Vec<f64>>,
    gz: Option<Vec<f64>>,
    dz: Option<Vec<f64>>,
}

impl PmlMemory {
    fn new(x_on: bool, z_on: bool, nx: usize, nz: usize) -> Self {
        Self {
            gx: x_on.then(|| vec![0.0; (nx - 1) * nz]),
            dx: x_on.then(|| vec![0.0; nx * nz]),
            gz: z_on.then(|| vec![0.0; nx * (nz - 1)]),
            dz: z_on.then(|| vec![0.0; nx * nz]),
        }
    }
}

const C9: f64 = 27.0 / 24.0;
const C1: f64 = 1.0 / 24.0;

/// Fourth-order staggered d/dx of a row of node values onto its half nodes,
/// with mirror closure at both ends.
#[inline]
fn gradient_x(u: &[f64], g: &mut [f64], dx: f64) {
    let n = u.len();
    let inv = 1.0 / dx;
    g[0] = (-27.0 * u[0] + 28.0 * u[1] - u[2]) / 24.0 * inv;
    for i in 1..n - 2 {
        g[i] = (C9 * (u[i + 1] - u[i]) - C1 * (u[i + 2] - u[i - 1])) * inv;
    }
    g[n - 2] = (u[n - 3] - 28.0 * u[n - 2] + 27.0 * u[n - 1]) / 24.0 * inv;
}

/// Fourth-order staggered divergence of half-node fluxes back onto nodes,
/// with the antisymmetric flux extension the mirror closure implies.
#[inline]
fn divergence_x(f: &[f64], out: &mut [f64], dx: f64) {
    let nh = f.len(); // nx - 1
    let n = nh + 1;
    let inv = 1.0 / dx;
    out[0] = (54.0 * f[0] - 2.0 * f[1]) / 24.0 * inv;
    out[1] = (-28.0 * f[0] + 27.0 * f[1] - f[2]) / 24.0 * inv;
    for i in 2..n - 2 {
        out[i] = (C9 * (f[i] - f[i - 1]) - C1 * (f[i + 1] - f[i - 2])) * inv;
    }
    out[n - 2] = (f[nh - 3] - 27.0 * f[nh - 2] + 28.0 * f[nh - 1]) / 24.0 * inv;
    out[n - 1] = (2.0 * f[nh - 2] - 54.0 * f[nh - 1]) / 24.0 * inv;
}

/// z-gradient at half row `jh` (between node rows jh and jh+1).
#[inline]
fn gradient_z_row(u: &[f64], nx: usize, nz: usize, jh: usize, g: &mut [f64], dz: f64) {
    let inv = 1.0 / dz;
    let row = |j: usize| &u[j * nx..(j + 1) * nx];
    if jh == 0 {
        let (r0, r1, r2) = (row(0), row(1), row(2));
        for i in 0..nx {
            g[i] = (-27.0 * r0[i] + 28.0 * r1[i] - r2[i]) / 24.0 * inv;
        }
    } else if jh == nz - 2 {
        let (ra, rb, rc) = (row(nz - 3), row(nz - 2), row(nz - 1));
        for i in 0..nx {
            g[i] = (ra[i] - 28.0 * rb[i] + 27.0 * rc[i]) / 24.0 * inv;
        }
    } else {
        let (rm, r0, r1, r2) = (row(jh - 1), row(jh), row(jh + 1), row(jh + 2));
        for i in 0..nx {
            g[i] = (C9 * (r1[i] - r0[i]) - C1 * (r2[i] - rm[i])) * inv;
        }
    }
}

/// z-divergence of half-row fluxes at node row `j`.
#[inline]
fn divergence_z_row(f: &[f64], nx: usize, nz: usize, j: usize, out: &mut [f64], dz: f64) {
    let inv = 1.0 / dz;
    let nh = nz - 1;
    let row = |jh: usize| &f[jh * nx..(jh + 1) * nx];
    if j == 0 {
        let (f0, f1) = (row(0), row(1));
        for i in 0..nx {
            out[i] = (54.0 * f0[i] - 2.0 * f1[i]) / 24.0 * inv;
        }
    } else if j == 1 {
        let (f0, f1, f2) = (row(0), row(1), row(2));
        for i in 0..nx {
            out[i] = (-28.0 * f0[i] + 27.0 * f1[i] - f2[i]) / 24.0 * inv;
        }
    } else if j == nz - 2 {
        let (fa, fb, fc) = (row(nh - 3), row(nh - 2), row(nh - 1));
        for i in 0..nx {
            out[i] = (fa[i] - 27.0 * fb[i] + 28.0 * fc[i]) / 24.0 * inv;
        }
    } else if j == nz - 1 {
        let (fb, fc) = (row(nh - 2), row(nh - 1));
        for i in 0..nx {
            out[i] = (2.0 * fb[i] - 54.0 * fc[i]) / 24.0 * inv;
        }
    } else {
        let (fm2, fm1, f0, f1) = (row(j - 2), row(j - 1), row(j), row(j + 1));
        for i in 0..nx {
            out[i] = (C9 * (f0[i] - fm1[i]) - C1 * (f1[i] - fm2[i])) * inv;
        }
    }
}

/// One-shot forward solve (see [`Propagator::forward`]).
pub fn forward_solve(
    model: &VelocityModel,
    src: &RickerSource,
    xi: (f64, f64),
    cfg: &SimConfig,
    recv: &ReceiverArray,
) -> Result<Seismogram> {
    Propagator::new(model, cfg)?.forward(src, xi, recv)
}

/// One-shot adjoint solve (see [`Propagator::adjoint`]).
pub fn adjoint_solve(
    model: &VelocityModel,
    residual_trace: &[f64],
    eta_r: (f64, f64),
    cfg: &SimConfig,
    search_nodes: &[(f64, f64)],
    designated: Option<(f64, f64)>,
) -> Result<AdjointSamples> {
    Propagator::new(model, cfg)?.adjoint(0, residual_trace, eta_r, search_nodes, designated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::VelocityModel;

    fn small_domain() -> Domain2D {
        Domain2D::new(0.0, 6.0, 0.0, 4.0, 31, 21).unwrap()
    }

    fn homogeneous(c: f64) -> VelocityModel {
        VelocityModel::constant(c, small_domain()).unwrap()
    }

    fn reflecting_cfg(nt: usize) -> SimConfig {
        let d = small_domain();
        let mut cfg = SimConfig::with_auto_dt(d, 5.0, 1.0, 0.8).unwrap();
        cfg.boundaries = Boundaries::all_reflecting();
        cfg.nt = nt;
        cfg
    }

    #[test]
    fn counter_counts_solves() {
        reset_solve_counter();
        assert_eq!(solve_counter(), 0);
        let model = homogeneous(5.0);
        let cfg = reflecting_cfg(40);
        let src = RickerSource::new(1.0, 4.0, 0.2).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.0, 2.0)]).unwrap();
        forward_solve(&model, &src, (2.0, 2.0), &cfg, &recv).unwrap();
        assert_eq!(solve_counter(), 1);
    }

    #[test]
    fn zero_amplitude_source_gives_zero_traces() {
        let model = homogeneous(5.0);
        let cfg = reflecting_cfg(60);
        // Amplitude must be positive by construction; emulate a silent source
        // with an origin time far outside the record instead.
        let src = RickerSource::new(1.0, 4.0, -1e6).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.0, 2.0)]).unwrap();
        let s = forward_solve(&model, &src, (2.0, 2.0), &cfg, &recv).unwrap();
        assert!(s.traces[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let model = homogeneous(5.0);
        let cfg = reflecting_cfg(80);
        let src = RickerSource::new(1.0, 4.0, 0.2).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.3, 1.7)]).unwrap();
        let a = forward_solve(&model, &src, (2.1, 2.3), &cfg, &recv).unwrap();
        let b = forward_solve(&model, &src, (2.1, 2.3), &cfg, &recv).unwrap();
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn cfl_violation_rejected_before_stepping() {
        let model = homogeneous(5.0);
        let d = small_domain();
        let mut cfg = SimConfig::new(d, 1.0, 100); // grossly unstable dt
        cfg.boundaries = Boundaries::all_reflecting();
        let src = RickerSource::new(1.0, 4.0, 0.2).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.0, 2.0)]).unwrap();
        reset_solve_counter();
        let e = forward_solve(&model, &src, (2.0, 2.0), &cfg, &recv);
        assert!(matches!(e, Err(Error::CflViolation { .. })));
        assert_eq!(solve_counter(), 0, "failed validation must not count as a solve");
    }

    #[test]
    fn blowup_detected_with_step_index() {
        let model = homogeneous(5.0);
        let d = small_domain();
        // dt 10% above the stability limit: validation would reject this, so
        // bypass it to reach the in-stepping NaN detector.
        let grid = (1.0 / (d.dx * d.dx) + 1.0 / (d.dz * d.dz)).sqrt();
        let dt = 1.1 * C_SCHEME / (5.0 * grid);
        let mut cfg = SimConfig::new(d, dt, 2000);
        cfg.boundaries = Boundaries::all_reflecting();
        let prop = Propagator::new_unvalidated(&model, &cfg).unwrap();
        let src = RickerSource::new(1.0, 6.0, 0.15).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.0, 2.0)]).unwrap();
        match prop.forward(&src, (2.0, 2.0), &recv) {
            Err(Error::NumericalBlowup { step }) => assert!(step > 0),
            Ok(_) => panic!("expected blow-up"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn adjoint_of_zero_residual_is_zero() {
        let model = homogeneous(5.0);
        let cfg = reflecting_cfg(50);
        let forcing = vec![0.0; cfg.nt];
        let nodes = vec![(2.0, 2.0), (3.0, 1.0)];
        let s = adjoint_solve(&model, &forcing, (4.0, 0.0), &cfg, &nodes, Some((2.5, 2.5))).unwrap();
        assert!(s.node_values.iter().all(|v| *v == 0.0));
        assert!(s.designated.unwrap().w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reversing_twice_is_identity() {
        let s = Seismogram { dt: 0.1, nt: 4, traces: vec![vec![1.0, 2.0, 3.0, 4.0]] };
        assert_eq!(s.reversed_time().reversed_time(), s);
    }

    #[test]
    fn seismogram_csv_round_trip_exact() {
        let model = homogeneous(5.0);
        let cfg = reflecting_cfg(70);
        let src = RickerSource::new(1.0, 4.0, 0.2).unwrap();
        let recv = ReceiverArray::all_active(vec![(4.0, 0.0), (1.5, 2.5)]).unwrap();
        let s = forward_solve(&model, &src, (2.5, 2.0), &cfg, &recv).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seis.csv");
        s.write_csv(&path).unwrap();
        let r = Seismogram::read_csv(&path).unwrap();
        assert_eq!(s.traces, r.traces);
        assert_eq!(s.nt, r.nt);
        assert!((s.dt - r.dt).abs() < 1e-15);
    }

    /// The discrete operator, assembled column by column, is self-adjoint
    /// under the trapezoid cell weights. This is the property the adjoint
    /// solve relies on.
    #[test]
    fn operator_is_self_adjoint_under_cell_weights() {
        let d = Domain2D::new(0.0, 2.0, 0.0, 1.6, 11, 9).unwrap();
        // Varying speed so the test exercises variable coefficients.
        let vals: Vec<f64> =
            (0..d.n_nodes()).map(|k| 1.0 + 0.3 * ((k * 7919 % 13) as f64 / 13.0)).collect();
        let model = VelocityModel::gridded(d, vals).unwrap();
        let mut cfg = SimConfig::with_auto_dt(d, 1.4, 0.5, 0.5).unwrap();
        cfg.boundaries = Boundaries::all_reflecting();
        let prop = Propagator::new(&model, &cfg).unwrap();

        let n = d.n_nodes();
        let mut mat = vec![0.0; n * n];
        let mut lap = vec![0.0; n];
        let mut fx = vec![0.0; (d.nx - 1) * d.nz];
        let mut fz = vec![0.0; d.nx * (d.nz - 1)];
        let mut psi = PmlMemory::new(false, false, d.nx, d.nz);
        for col in 0..n {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            prop.apply_operator(&e, &mut lap, &mut fx, &mut fz, &mut psi);
            for row in 0..n {
                mat[row * n + col] = lap[row];
            }
        }
        let w = |k: usize| {
            let (i, j) = (k % d.nx, k / d.nx);
            let wx: f64 = if i == 0 || i == d.nx - 1 { 0.5 } else { 1.0 };
            let wz: f64 = if j == 0 || j == d.nz - 1 { 0.5 } else { 1.0 };
            wx * wz
        };
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..r {
                let a = w(r) * mat[r * n + c];
                let b = w(c) * mat[c * n + r];
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-10, "weighted symmetry defect {worst}");
    }
}
