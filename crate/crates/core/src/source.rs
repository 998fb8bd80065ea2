//! Ricker source time function and the regularized discrete delta used to
//! inject and sample point sources on the grid.
//!
//! The same stencil drives four operations that must stay mutually adjoint
//! for the residual back-propagation identities to hold at machine precision:
//!
//! * `scatter_add`        — physical delta injection (forward source term),
//! * `gather`             — unit-mass trace sampling (seismograms),
//! * `scatter_add_adjoint`— transpose of `gather` under the solver's
//!                          boundary-weighted inner product (adjoint forcing),
//! * `gather_weighted`    — transpose of `scatter_add` (adjoint-field reads).
//!
//! At interior points the weighted and plain variants coincide; they differ
//! only where a stencil touches a domain edge.

use crate::error::{Error, Result};
use crate::media::Domain2D;

/// Ricker wavelet `f(t) = A (1 - 2 pi^2 f0^2 (t-tau)^2) exp(-pi^2 f0^2 (t-tau)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RickerSource {
    /// Normalization factor; `max_t |f| = A`, attained at `t = tau`.
    pub amplitude: f64,
    /// Dominant frequency in Hz.
    pub f0: f64,
    /// Origin time in seconds.
    pub origin_time: f64,
}

impl RickerSource {
    pub fn new(amplitude: f64, f0: f64, origin_time: f64) -> Result<Self> {
        if !(f0 > 0.0 && f0.is_finite()) {
            return Err(Error::Argument(format!("dominant frequency must be positive, got {f0}")));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::Argument(format!("amplitude must be positive, got {amplitude}")));
        }
        Ok(Self { amplitude, f0, origin_time })
    }

    /// Same wavelet re-anchored at a different origin time.
    pub fn at_origin(&self, origin_time: f64) -> Self {
        Self { origin_time, ..*self }
    }

    /// Effective one-sided support: |f| is below 1e-30 * A beyond 3/f0.
    pub fn support_halfwidth(&self) -> f64 {
        3.0 / self.f0
    }
}

pub fn ricker(src: &RickerSource, t: f64) -> f64 {
    let u = t - src.origin_time;
    let b = std::f64::consts::PI.powi(2) * src.f0 * src.f0;
    src.amplitude * (1.0 - 2.0 * b * u * u) * (-b * u * u).exp()
}

/// Time derivative of the Ricker wavelet.
pub fn ricker_deriv(src: &RickerSource, t: f64) -> f64 {
    let u = t - src.origin_time;
    let b = std::f64::consts::PI.powi(2) * src.f0 * src.f0;
    -2.0 * src.amplitude * b * u * (3.0 - 2.0 * b * u * u) * (-b * u * u).exp()
}

/// Piecewise-quintic regularized delta, support |x| <= 3h, unit zeroth moment.
pub fn delta_kernel(x: f64, h: f64) -> f64 {
    let r = (x / h).abs();
    let p = if r <= 1.0 {
        1.0 + r * r * (-5.0 / 4.0 + r * (-35.0 / 12.0 + r * (21.0 / 4.0 + r * (-25.0 / 12.0))))
    } else if r <= 2.0 {
        -4.0 + r * (75.0 / 4.0 + r * (-245.0 / 8.0 + r * (545.0 / 24.0 + r * (-63.0 / 8.0 + r * (25.0 / 24.0)))))
    } else if r <= 3.0 {
        18.0 + r * (-153.0 / 4.0 + r * (255.0 / 8.0 + r * (-313.0 / 24.0 + r * (21.0 / 8.0 + r * (-5.0 / 24.0)))))
    } else {
        0.0
    };
    p / h
}

/// 1-D delta weights on the grid `x_i = origin + i*h` for nodes with
/// `|x_i - center| <= 3h`. Indices may be negative near an edge; the 2-D
/// constructor decides whether that is legal.
pub fn delta_weights_1d(center: f64, origin: f64, h: f64) -> Result<Vec<(isize, f64)>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("grid spacing must be positive, got {h}")));
    }
    if !center.is_finite() {
        return Err(Error::Argument("non-finite stencil center".into()));
    }
    let s = (center - origin) / h;
    let lo = (s - 3.0).ceil() as isize;
    let hi = (s + 3.0).floor() as isize;
    Ok((lo..=hi)
        .map(|i| (i, delta_kernel(origin + i as f64 * h - center, h)))
        .collect())
}

/// Separable 2-D point stencil anchored at grid indices `(ix0, iz0)`.
#[derive(Debug, Clone)]
pub struct Stencil2D {
    pub ix0: usize,
    pub iz0: usize,
    /// Per-axis unit-mass gather weights (the delta weights times dx resp. dz).
    pub wx: Vec<f64>,
    pub wz: Vec<f64>,
    /// Trapezoid cell weights of the covered nodes (1/2 on edge rows/columns).
    cwx: Vec<f64>,
    cwz: Vec<f64>,
    inv_area: f64,
}

/// Tensor-product delta stencil at `xi`, with the weights normalized so the
/// gather of a constant field is that constant (`sum w = 1` per axis).
///
/// A stencil whose support crosses a domain edge is a placement error, except
/// across the top edge when `free_top` is set: there the z weights are
/// truncated and renormalized to unit mass, which is how receivers sitting
/// exactly on the free surface are handled.
pub fn delta_weights_2d(xi: (f64, f64), domain: &Domain2D, free_top: bool) -> Result<Stencil2D> {
    let (x, z) = xi;
    if !(x.is_finite() && z.is_finite()) {
        return Err(Error::Argument(format!("non-finite stencil center ({x},{z})")));
    }
    let raw_x = delta_weights_1d(x, domain.x_min, domain.dx)?;
    let raw_z = delta_weights_1d(z, domain.z_min, domain.dz)?;

    let x_lo = raw_x.first().expect("nonempty").0;
    let x_hi = raw_x.last().expect("nonempty").0;
    if x_lo < 0 || x_hi > domain.nx as isize - 1 {
        return Err(Error::SourcePlacement(format!(
            "stencil at x = {x} km crosses an absorbing edge (needs 3dx = {} km of clearance)",
            3.0 * domain.dx
        )));
    }
    let z_hi = raw_z.last().expect("nonempty").0;
    if z_hi > domain.nz as isize - 1 {
        return Err(Error::SourcePlacement(format!(
            "stencil at z = {z} km crosses the bottom edge (needs 3dz = {} km of clearance)",
            3.0 * domain.dz
        )));
    }
    let crosses_top = raw_z.first().expect("nonempty").0 < 0;
    if crosses_top && !free_top {
        return Err(Error::SourcePlacement(format!(
            "stencil at z = {z} km crosses the top edge, which is not a free surface here"
        )));
    }

    let mut wx: Vec<f64> = raw_x.iter().map(|(_, w)| w * domain.dx).collect();
    let ix0 = x_lo as usize;

    let kept: Vec<(isize, f64)> = raw_z.into_iter().filter(|(j, _)| *j >= 0).collect();
    let iz0 = kept.first().expect("support overlaps grid").0 as usize;
    let mut wz: Vec<f64> = kept.iter().map(|(_, w)| w * domain.dz).collect();
    if crosses_top {
        let mass: f64 = wz.iter().sum();
        if mass.abs() < 1e-12 {
            return Err(Error::SourcePlacement(format!(
                "truncated stencil at z = {z} km has no mass left on the grid"
            )));
        }
        for w in &mut wz {
            *w /= mass;
        }
    }

    // Drop exact zeros at the support ends so the stencil stays as small as
    // its nonzero footprint.
    let ix0 = ix0 + trim_zeros(&mut wx);
    let iz0 = iz0 + trim_zeros(&mut wz);

    let cell = |idx: usize, n: usize| if idx == 0 || idx == n - 1 { 0.5 } else { 1.0 };
    let cwx: Vec<f64> = (0..wx.len()).map(|k| cell(ix0 + k, domain.nx)).collect();
    let cwz: Vec<f64> = (0..wz.len()).map(|k| cell(iz0 + k, domain.nz)).collect();

    Ok(Stencil2D { ix0, iz0, wx, wz, cwx, cwz, inv_area: 1.0 / (domain.dx * domain.dz) })
}

/// Removes zero weights from both ends; returns how many leading entries were
/// dropped so the caller can shift the anchor index.
fn trim_zeros(w: &mut Vec<f64>) -> usize {
    while w.last() == Some(&0.0) && w.len() > 1 {
        w.pop();
    }
    let lead = w.iter().take_while(|v| **v == 0.0).count().min(w.len() - 1);
    w.drain(..lead);
    lead
}

impl Stencil2D {
    /// Unit-mass sample of `field` (row-major, nx columns) at the stencil point.
    #[inline]
    pub fn gather(&self, field: &[f64], nx: usize) -> f64 {
        let mut acc = 0.0;
        for (kz, wz) in self.wz.iter().enumerate() {
            let row = &field[(self.iz0 + kz) * nx + self.ix0..];
            let mut r = 0.0;
            for (kx, wx) in self.wx.iter().enumerate() {
                r += wx * row[kx];
            }
            acc += wz * r;
        }
        acc
    }

    /// Sample weighted by the trapezoid cell weights; the exact transpose of
    /// `scatter_add` under the solver's boundary-weighted inner product.
    #[inline]
    pub fn gather_weighted(&self, field: &[f64], nx: usize) -> f64 {
        let mut acc = 0.0;
        for (kz, wz) in self.wz.iter().enumerate() {
            let row = &field[(self.iz0 + kz) * nx + self.ix0..];
            let mut r = 0.0;
            for (kx, wx) in self.wx.iter().enumerate() {
                r += wx * self.cwx[kx] * row[kx];
            }
            acc += wz * self.cwz[kz] * r;
        }
        acc
    }

    /// Inject `amp * delta(x - xi)`: adds `amp * w / (dx dz)` at each node.
    #[inline]
    pub fn scatter_add(&self, field: &mut [f64], nx: usize, amp: f64) {
        let a = amp * self.inv_area;
        for (kz, wz) in self.wz.iter().enumerate() {
            let row = &mut field[(self.iz0 + kz) * nx + self.ix0..];
            for (kx, wx) in self.wx.iter().enumerate() {
                row[kx] += a * wz * wx;
            }
        }
    }

    /// Transpose of `gather`: injection divided by the cell weights, used for
    /// adjoint forcing so that trace gathers pair exactly with it.
    #[inline]
    pub fn scatter_add_adjoint(&self, field: &mut [f64], nx: usize, amp: f64) {
        let a = amp * self.inv_area;
        for (kz, wz) in self.wz.iter().enumerate() {
            let row = &mut field[(self.iz0 + kz) * nx + self.ix0..];
            for (kx, wx) in self.wx.iter().enumerate() {
                row[kx] += a * wz * wx / (self.cwx[kx] * self.cwz[kz]);
            }
        }
    }

    /// Total gather mass (1 away from edges; 1 for truncated-renormalized
    /// surface stencils by construction).
    pub fn mass(&self) -> f64 {
        self.wx.iter().sum::<f64>() * self.wz.iter().sum::<f64>()
    }

    /// Peak node weight in delta units (1/km^2).
    pub fn peak_density(&self) -> f64 {
        let mx = self.wx.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mz = self.wz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx * mz * self.inv_area
    }
}
