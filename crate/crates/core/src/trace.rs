//! Misfit computation, noise injection, and time-window selection on
//! seismograms.
//!
//! The misfit is the normalized L2 trace difference
//! `chi_r = int |d_r - s_r|^2 dt / (2 int |d_r|^2 dt)`, integrated by the
//! trapezoid rule over the selected window. The returned adjoint forcing
//! folds the same window mask and trapezoid weights into the residual, so
//! misfit values, gradients, and auxiliary surfaces stay quadrature-
//! consistent with each other.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::propagator::Seismogram;
use crate::seeds;

/// Per-receiver integration window in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    pub spans: Vec<(f64, f64)>,
    /// Set where the envelope picker fell back to the whole record.
    pub whole_record: Vec<bool>,
}

impl TimeWindow {
    pub fn new(spans: Vec<(f64, f64)>, t_end: f64) -> Result<Self> {
        for (k, (a, b)) in spans.iter().enumerate() {
            if !(*a >= 0.0 && a < b && *b <= t_end + 1e-9) {
                return Err(Error::Argument(format!(
                    "window {k} = [{a},{b}] outside [0,{t_end}]"
                )));
            }
        }
        let n = spans.len();
        Ok(Self { spans, whole_record: vec![false; n] })
    }

    /// Whole-record window for every receiver.
    pub fn full(s: &Seismogram) -> Self {
        let t_end = (s.nt - 1) as f64 * s.dt;
        Self {
            spans: vec![(0.0, t_end); s.n_receivers()],
            whole_record: vec![false; s.n_receivers()],
        }
    }

    /// Sample index bounds [lo, hi] (inclusive) of receiver `r`'s span.
    pub fn sample_bounds(&self, r: usize, dt: f64, nt: usize) -> (usize, usize) {
        let (a, b) = self.spans[r];
        let lo = ((a / dt) - 1e-9).ceil().max(0.0) as usize;
        let hi = (((b / dt) + 1e-9).floor() as usize).min(nt - 1);
        (lo.min(nt - 2), hi.max(lo + 1))
    }
}

/// Per-receiver misfit values plus everything the adjoint stage needs.
#[derive(Debug, Clone)]
pub struct MisfitVector {
    /// Active receiver indices (0-based into the seismogram), in order.
    pub active: Vec<usize>,
    /// chi_r per active receiver.
    pub chi: Vec<f64>,
    /// Windowed `int |d_r|^2 dt` per active receiver.
    pub normalizers: Vec<f64>,
    /// Adjoint forcing `(d_r - s_r) * w_trap / N_r` per active receiver,
    /// zero outside the window; length matches the solver time axis.
    pub adjoint_forcing: Vec<Vec<f64>>,
}

impl MisfitVector {
    pub fn sum_abs(&self) -> f64 {
        self.chi.iter().map(|c| c.abs()).sum()
    }
}

/// Sum over active receivers of |chi_r|.
pub fn sum_abs_misfit(m: &MisfitVector) -> f64 {
    m.sum_abs()
}

/// Trapezoid weight of sample `k` inside the inclusive window [lo, hi].
#[inline]
fn trap_weight(k: usize, lo: usize, hi: usize) -> f64 {
    if k < lo || k > hi {
        0.0
    } else if k == lo || k == hi {
        0.5
    } else {
        1.0
    }
}

/// Windowed misfit of synthetic `s` against observed `d` over the active
/// receivers. `window = None` integrates the whole record.
pub fn misfit(
    d: &Seismogram,
    s: &Seismogram,
    window: Option<&TimeWindow>,
    active: &[usize],
) -> Result<MisfitVector> {
    if d.nt != s.nt || (d.dt - s.dt).abs() > 1e-12 * d.dt.max(1e-12) {
        return Err(Error::Mismatch(format!(
            "time axes differ: {}x{} vs {}x{}",
            d.nt, d.dt, s.nt, s.dt
        )));
    }
    if active.is_empty() {
        return Err(Error::Argument("active receiver set is empty".into()));
    }
    let dt = d.dt;
    let mut chi = Vec::with_capacity(active.len());
    let mut normalizers = Vec::with_capacity(active.len());
    let mut forcing = Vec::with_capacity(active.len());
    for &r in active {
        if r >= d.n_receivers() || r >= s.n_receivers() {
            return Err(Error::Argument(format!("receiver index {r} out of range")));
        }
        let (lo, hi) = match window {
            Some(w) => w.sample_bounds(r, dt, d.nt),
            None => (0, d.nt - 1),
        };
        let dr = &d.traces[r];
        let sr = &s.traces[r];
        let mut num = 0.0;
        let mut den = 0.0;
        for k in lo..=hi {
            let w = trap_weight(k, lo, hi);
            let diff = dr[k] - sr[k];
            num += w * diff * diff;
            den += w * dr[k] * dr[k];
        }
        let n_r = den * dt;
        if !(n_r > 0.0) {
            return Err(Error::DegenerateTrace { receiver: r });
        }
        chi.push(num * dt / (2.0 * n_r));
        normalizers.push(n_r);
        let mut f = vec![0.0; d.nt];
        for k in lo..=hi {
            f[k] = (dr[k] - sr[k]) * trap_weight(k, lo, hi) / n_r;
        }
        forcing.push(f);
    }
    Ok(MisfitVector { active: active.to_vec(), chi, normalizers, adjoint_forcing: forcing })
}

/// Additive Gaussian noise: per receiver, sigma = ratio * max_t |s_r(t)|,
/// sampled from a per-receiver substream of `seed` so the output does not
/// depend on evaluation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio >= 0.0 && ratio.is_finite()) {
            return Err(Error::Argument(format!("noise ratio must be >= 0, got {ratio}")));
        }
        Ok(Self { ratio, seed })
    }
}

pub fn add_noise(s: &Seismogram, spec: &NoiseSpec) -> Seismogram {
    if spec.ratio == 0.0 {
        return s.clone();
    }
    let mut out = s.clone();
    for (r, tr) in out.traces.iter_mut().enumerate() {
        let sigma = spec.ratio * s.max_abs(r);
        if sigma == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma > 0");
        let mut rng = seeds::rng(spec.seed, "noise", r as u64);
        for v in tr.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// Pick per-receiver windows from a moving-RMS envelope (width one dominant
/// period): the window spans the first through last samples where the
/// envelope exceeds `threshold_fraction` of its maximum, expanded by `pad`
/// seconds and clamped to the record. Receivers whose envelope never exceeds
/// the threshold get the whole record and a warning flag.
pub fn select_window(
    d: &Seismogram,
    f0: f64,
    threshold_fraction: f64,
    pad: f64,
) -> Result<TimeWindow> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "threshold fraction must be in (0,1), got {threshold_fraction}"
        )));
    }
    if !(f0 > 0.0) {
        return Err(Error::Argument("dominant frequency must be positive".into()));
    }
    if !(pad >= 0.0) {
        return Err(Error::Argument("pad must be >= 0".into()));
    }
    let t_end = (d.nt - 1) as f64 * d.dt;
    let hw = ((0.5 / (f0 * d.dt)).round() as usize).max(1);
    let mut spans = Vec::with_capacity(d.n_receivers());
    let mut whole = Vec::with_capacity(d.n_receivers());
    for tr in &d.traces {
        let nt = tr.len();
        let mut env = vec![0.0; nt];
        for k in 0..nt {
            let lo = k.saturating_sub(hw);
            let hi = (k + hw).min(nt - 1);
            let mut acc = 0.0;
            for v in &tr[lo..=hi] {
                acc += v * v;
            }
            env[k] = (acc / (hi - lo + 1) as f64).sqrt();
        }
        let max_env = env.iter().cloned().fold(0.0f64, f64::max);
        let thr = threshold_fraction * max_env;
        let first = env.iter().position(|e| *e > thr);
        match (first, env.iter().rposition(|e| *e > thr)) {
            (Some(a), Some(b)) if max_env > 0.0 => {
                let t_a = (a as f64 * d.dt - pad).max(0.0);
                let t_b = (b as f64 * d.dt + pad).min(t_end);
                spans.push((t_a, t_b.max(t_a + d.dt)));
                whole.push(false);
            }
            _ => {
                spans.push((0.0, t_end));
                whole.push(true);
            }
        }
    }
    Ok(TimeWindow { spans, whole_record: whole })
}
