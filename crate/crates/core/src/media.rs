//! Simulation domains and wave-speed models.
//!
//! Two analytic models ship with fixed formulas (a layered crust profile and
//! a subduction-zone profile), plus a gridded model loaded from a plain-text
//! file and sampled by bilinear interpolation. The z axis points downward
//! with z = 0 the free surface.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Rectangular simulation domain with a uniform node-centered grid.
///
/// `nx`/`nz` count grid points (not cells); spacings satisfy
/// `dx = (x_max - x_min)/(nx - 1)` and likewise for `dz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain2D {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
}

impl Domain2D {
    pub fn new(
        x_min: f64,
        x_max: f64,
        z_min: f64,
        z_max: f64,
        nx: usize,
        nz: usize,
    ) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && z_min.is_finite() && z_max.is_finite()) {
            return Err(Error::Argument("domain bounds must be finite".into()));
        }
        if x_max <= x_min || z_max <= z_min {
            return Err(Error::Argument(format!(
                "empty domain [{x_min},{x_max}]x[{z_min},{z_max}]"
            )));
        }
        if z_min < 0.0 {
            return Err(Error::Argument("z_min must be >= 0 (z=0 is the free surface)".into()));
        }
        // Gridded model files may be coarse (a 3x2 file is legal); simulation
        // configs enforce their own >= 8 floor in `SimConfig::validate`.
        if nx < 2 || nz < 2 {
            return Err(Error::Argument(format!("grid too small: {nx}x{nz} (need >= 2)")));
        }
        Ok(Self {
            x_min,
            x_max,
            z_min,
            z_max,
            nx,
            nz,
            dx: (x_max - x_min) / (nx - 1) as f64,
            dz: (z_max - z_min) / (nz - 1) as f64,
        })
    }

    /// Build a domain from target spacings; the bounds must be an integer
    /// number of cells apart (to 1e-9 relative).
    pub fn with_spacing(
        x_min: f64,
        x_max: f64,
        z_min: f64,
        z_max: f64,
        dx: f64,
        dz: f64,
    ) -> Result<Self> {
        if dx <= 0.0 || dz <= 0.0 {
            return Err(Error::Argument("spacings must be positive".into()));
        }
        let cells_x = (x_max - x_min) / dx;
        let cells_z = (z_max - z_min) / dz;
        for (c, name) in [(cells_x, "x"), (cells_z, "z")] {
            if (c - c.round()).abs() > 1e-9 * c.max(1.0) {
                return Err(Error::Argument(format!(
                    "{name} extent is not a whole number of cells ({c})"
                )));
            }
        }
        Self::new(
            x_min,
            x_max,
            z_min,
            z_max,
            cells_x.round() as usize + 1,
            cells_z.round() as usize + 1,
        )
    }

    #[inline]
    pub fn x_at(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    #[inline]
    pub fn z_at(&self, j: usize) -> f64 {
        self.z_min + j as f64 * self.dz
    }

    #[inline]
    pub fn contains(&self, x: f64, z: f64) -> bool {
        let ex = 1e-9 * (self.x_max - self.x_min);
        let ez = 1e-9 * (self.z_max - self.z_min);
        x >= self.x_min - ex && x <= self.x_max + ex && z >= self.z_min - ez && z <= self.z_max + ez
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.nz
    }
}

/// The bounded two-layer crust domain used by the layered-model studies.
pub fn two_layer_domain(dx: f64, dz: f64) -> Result<Domain2D> {
    Domain2D::with_spacing(-10.0, 110.0, 0.0, 50.0, dx, dz)
}

/// The 200 km x 200 km subduction-zone domain.
pub fn subduction_domain(dx: f64, dz: f64) -> Result<Domain2D> {
    Domain2D::with_spacing(0.0, 200.0, 0.0, 200.0, dx, dz)
}

/// Wave-speed model in km/s. Values are immutable after construction, so a
/// model can be shared freely across concurrent solver workers.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityModel {
    /// Sinusoidally perturbed two-layer profile with an interface at z = 20 km.
    TwoLayer,
    /// Crust / undulating Moho / subducting slab with a low-velocity channel.
    Subduction,
    /// Node values on a uniform grid, sampled by bilinear interpolation.
    Gridded { domain: Domain2D, values: Vec<f64> },
}

impl VelocityModel {
    /// Gridded model from explicit node values (row-major, z varying by row).
    pub fn gridded(domain: Domain2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.n_nodes() {
            return Err(Error::Mismatch(format!(
                "gridded model needs {} values, got {}",
                domain.n_nodes(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Argument(format!("non-positive or non-finite speed {bad}")));
        }
        Ok(Self::Gridded { domain, values })
    }

    /// Homogeneous model over `domain` (a 2x2-node gridded model reproduces a
    /// constant exactly under bilinear interpolation, but keeping the full
    /// grid makes `contains` checks uniform).
    pub fn constant(c: f64, domain: Domain2D) -> Result<Self> {
        Self::gridded(domain, vec![c; domain.n_nodes()])
    }
}

/// Wave speed at a point, in km/s.
///
/// Analytic variants evaluate their closed-form profile (any finite x,
/// z >= 0); gridded models interpolate bilinearly and reject out-of-domain
/// queries.
pub fn sample_velocity(model: &VelocityModel, x: f64, z: f64) -> Result<f64> {
    if !(x.is_finite() && z.is_finite()) {
        return Err(Error::Argument(format!("non-finite query ({x},{z})")));
    }
    match model {
        VelocityModel::TwoLayer => {
            if z < 0.0 {
                return Err(Error::Argument(format!("z = {z} above the free surface")));
            }
            let s = 0.2 * (std::f64::consts::PI * x / 25.0).sin();
            Ok(if z <= 20.0 { 5.2 + 0.05 * z + s } else { 6.8 + s })
        }
        VelocityModel::Subduction => {
            if z < 0.0 {
                return Err(Error::Argument(format!("z = {z} above the free surface")));
            }
            let moho = 33.0 + 2.5 * (std::f64::consts::PI * x / 40.0).sin();
            Ok(if z <= moho {
                5.5
            } else if z <= 45.0 + 0.4 * x {
                7.8
            } else if z <= 60.0 + 0.4 * x {
                7.488
            } else if z <= 100.0 + 0.4 * x {
                8.268
            } else {
                7.8
            })
        }
        VelocityModel::Gridded { domain, values } => {
            if !domain.contains(x, z) {
                return Err(Error::OutOfDomain(format!(
                    "({x},{z}) outside [{},{}]x[{},{}]",
                    domain.x_min, domain.x_max, domain.z_min, domain.z_max
                )));
            }
            let fx = ((x - domain.x_min) / domain.dx).clamp(0.0, (domain.nx - 1) as f64);
            let fz = ((z - domain.z_min) / domain.dz).clamp(0.0, (domain.nz - 1) as f64);
            let i = (fx as usize).min(domain.nx - 2);
            let j = (fz as usize).min(domain.nz - 2);
            let tx = fx - i as f64;
            let tz = fz - j as f64;
            let at = |i: usize, j: usize| values[j * domain.nx + i];
            let top = at(i, j) * (1.0 - tx) + at(i + 1, j) * tx;
            let bot = at(i, j + 1) * (1.0 - tx) + at(i + 1, j + 1) * tx;
            Ok(top * (1.0 - tz) + bot * tz)
        }
    }
}

/// Wave-speed matrix sampled at every node of `domain`, with the extrema
/// reported for CFL checking. Row-major, z varying by row.
#[derive(Debug, Clone)]
pub struct RasterizedModel {
    pub domain: Domain2D,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn rasterize(model: &VelocityModel, domain: &Domain2D) -> Result<RasterizedModel> {
    let mut values = Vec::with_capacity(domain.n_nodes());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for j in 0..domain.nz {
        let z = domain.z_at(j);
        for i in 0..domain.nx {
            let c = sample_velocity(model, domain.x_at(i), z)?;
            min = min.min(c);
            max = max.max(c);
            values.push(c);
        }
    }
    Ok(RasterizedModel { domain: *domain, values, min, max })
}

/// Parse a gridded velocity file.
///
/// Line 1: `nx nz x_min x_max z_min z_max`; then nz lines of nx speeds in
/// km/s, z varying per line from z_min to z_max.
pub fn load_gridded(path: &Path) -> Result<VelocityModel> {
    let text = std::fs::read_to_string(path)?;
    parse_gridded(&text)
}

pub fn parse_gridded(text: &str) -> Result<VelocityModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::Parse {
            line: line_no + 1,
            msg: format!("header needs 6 fields `nx nz x_min x_max z_min z_max`, got {}", fields.len()),
        });
    }
    let parse_usize = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse { line: line_no + 1, msg: format!("bad count `{s}`") })
    };
    let parse_f64 = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse { line: line_no + 1, msg: format!("bad number `{s}`") })
    };
    let nx = parse_usize(fields[0])?;
    let nz = parse_usize(fields[1])?;
    let domain = Domain2D::new(
        parse_f64(fields[2])?,
        parse_f64(fields[3])?,
        parse_f64(fields[4])?,
        parse_f64(fields[5])?,
        nx,
        nz,
    )?;

    let mut values = Vec::with_capacity(nx * nz);
    let mut rows = 0usize;
    for (idx, line) in lines {
        if rows == nz {
            return Err(Error::Parse { line: idx + 1, msg: format!("more than {nz} value rows") });
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("bad speed `{tok}`"),
            })?;
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parse { line: idx + 1, msg: format!("non-positive speed {v}") });
            }
            values.push(v);
            count += 1;
        }
        if count != nx {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {nx} speeds on this row, got {count}"),
            });
        }
        rows += 1;
    }
    if rows != nz {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: format!("expected {nz} value rows, got {rows}"),
        });
    }
    VelocityModel::gridded(domain, values)
}

/// Write a rasterized model in the gridded file format. Values are printed
/// with 17 significant digits so a load round-trips bit-exactly.
pub fn save_gridded(raster: &RasterizedModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    let d = &raster.domain;
    writeln!(out, "{} {} {} {} {} {}", d.nx, d.nz, d.x_min, d.x_max, d.z_min, d.z_max)
        .expect("string write");
    for j in 0..d.nz {
        let row = &raster.values[j * d.nx..(j + 1) * d.nx];
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            write!(out, "{v:.16e}").expect("string write");
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_layer_surface_origin() {
        let c = sample_velocity(&VelocityModel::TwoLayer, 0.0, 0.0).unwrap();
        assert_relative_eq!(c, 5.2, max_relative = 1e-15);
    }

    #[test]
    fn two_layer_quarter_period() {
        // 5.2 + 0.05*10 + 0.2*sin(pi/2) = 5.9
        let c = sample_velocity(&VelocityModel::TwoLayer, 12.5, 10.0).unwrap();
        assert_relative_eq!(c, 5.9, max_relative = 1e-15);
    }

    #[test]
    fn two_layer_interface_jump_is_0p6() {
        // The profile is continuous in x everywhere; the only z discontinuity
        // is across z = 20 km, with jump 1.6 - 0.05*20 = 0.6 km/s.
        for &x in &[-10.0, 0.0, 13.7, 55.0, 110.0] {
            let eps = 1e-9;
            let above = sample_velocity(&VelocityModel::TwoLayer, x, 20.0 - eps).unwrap();
            let below = sample_velocity(&VelocityModel::TwoLayer, x, 20.0 + eps).unwrap();
            assert_relative_eq!((above - below).abs(), 0.6, epsilon = 1e-6);
        }
    }

    #[test]
    fn subduction_branch_values() {
        let m = VelocityModel::Subduction;
        assert_relative_eq!(sample_velocity(&m, 0.0, 50.0).unwrap(), 7.488);
        assert_relative_eq!(sample_velocity(&m, 0.0, 10.0).unwrap(), 5.5);
        assert_relative_eq!(sample_velocity(&m, 0.0, 40.0).unwrap(), 7.8);
        assert_relative_eq!(sample_velocity(&m, 0.0, 80.0).unwrap(), 8.268);
        assert_relative_eq!(sample_velocity(&m, 0.0, 150.0).unwrap(), 7.8);
    }

    #[test]
    fn subduction_raster_extrema() {
        let domain = subduction_domain(2.0, 2.0).unwrap();
        let r = rasterize(&VelocityModel::Subduction, &domain).unwrap();
        assert!(r.min >= 5.5);
        assert!(r.max <= 8.268);
    }

    #[test]
    fn non_finite_query_is_argument_error() {
        let e = sample_velocity(&VelocityModel::TwoLayer, f64::NAN, 1.0);
        assert!(matches!(e, Err(Error::Argument(_))));
    }

    #[test]
    fn rasterize_matches_formula_pointwise() {
        let domain = Domain2D::new(0.0, 50.0, 0.0, 40.0, 11, 9).unwrap();
        let r = rasterize(&VelocityModel::TwoLayer, &domain).unwrap();
        for j in 0..domain.nz {
            for i in 0..domain.nx {
                let direct =
                    sample_velocity(&VelocityModel::TwoLayer, domain.x_at(i), domain.z_at(j))
                        .unwrap();
                assert_eq!(r.values[j * domain.nx + i], direct);
            }
        }
    }

    #[test]
    fn constant_gridded_rasterizes_flat() {
        let coarse = Domain2D::new(0.0, 10.0, 0.0, 5.0, 9, 8).unwrap();
        let model = VelocityModel::constant(5.0, coarse).unwrap();
        let sub = Domain2D::new(1.0, 9.0, 0.5, 4.5, 17, 9).unwrap();
        let r = rasterize(&model, &sub).unwrap();
        for v in &r.values {
            assert_relative_eq!(*v, 5.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn gridded_out_of_domain_is_error() {
        let d = Domain2D::new(0.0, 10.0, 0.0, 5.0, 9, 8).unwrap();
        let m = VelocityModel::constant(5.0, d).unwrap();
        assert!(matches!(sample_velocity(&m, 10.5, 1.0), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn parse_header_and_values() {
        let m = parse_gridded("3 2 0 10 0 5\n1 2 3\n4 5 6\n").unwrap();
        match &m {
            VelocityModel::Gridded { domain, values } => {
                assert_eq!((domain.nx, domain.nz), (3, 2));
                assert_eq!(values, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
            }
            _ => panic!("expected gridded"),
        }
    }

    #[test]
    fn parse_wrong_count_reports_line() {
        let e = parse_gridded("3 2 0 10 0 5\n1 2 3\n4 5\n");
        match e {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_non_positive_speed_reports_line() {
        let e = parse_gridded("3 2 0 10 0 5\n1 2 3\n4 -5 6\n");
        match e {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_preserves_node_samples() {
        let domain = Domain2D::new(0.0, 12.0, 0.0, 8.0, 13, 9).unwrap();
        let r = rasterize(&VelocityModel::TwoLayer, &domain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vel");
        save_gridded(&r, &path).unwrap();
        let loaded = load_gridded(&path).unwrap();
        for j in 0..domain.nz {
            for i in 0..domain.nx {
                let a = sample_velocity(&loaded, domain.x_at(i), domain.z_at(j)).unwrap();
                assert_eq!(a, r.values[j * domain.nx + i]);
            }
        }
    }

    proptest! {
        #[test]
        fn interpolation_bounded_by_cell_corners(x in 0.0f64..10.0, z in 0.0f64..5.0) {
            let d = Domain2D::new(0.0, 10.0, 0.0, 5.0, 11, 11).unwrap();
            let vals: Vec<f64> = (0..d.n_nodes())
                .map(|k| 4.0 + ((k * 2654435761) % 1000) as f64 / 500.0)
                .collect();
            let m = VelocityModel::gridded(d, vals.clone()).unwrap();
            let c = sample_velocity(&m, x, z).unwrap();
            let i = ((x / d.dx) as usize).min(d.nx - 2);
            let j = ((z / d.dz) as usize).min(d.nz - 2);
            let corners = [
                vals[j * d.nx + i],
                vals[j * d.nx + i + 1],
                vals[(j + 1) * d.nx + i],
                vals[(j + 1) * d.nx + i + 1],
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
        }

        #[test]
        fn gridded_reproduces_node_values(i in 0usize..11, j in 0usize..11) {
            let d = Domain2D::new(0.0, 10.0, 0.0, 5.0, 11, 11).unwrap();
            let vals: Vec<f64> = (0..d.n_nodes()).map(|k| 3.0 + (k % 17) as f64 * 0.25).collect();
            let m = VelocityModel::gridded(d, vals.clone()).unwrap();
            let c = sample_velocity(&m, d.x_at(i), d.z_at(j)).unwrap();
            prop_assert!((c - vals[j * d.nx + i]).abs() < 1e-12);
        }
    }
}
