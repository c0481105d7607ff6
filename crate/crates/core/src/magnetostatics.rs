//! Static field of uniformly magnetised cuboid permanent magnets.
//!
//! Units: positions and lengths in mm, flux density in mT, remanence in T.
//!
//! The field outside a cuboid is computed from its equivalent magnetic surface
//! charge: every face carries a uniform charge density `Br (m . n)` and the
//! flux density is the closed-form integral of the Coulomb kernel over each
//! rectangular face. The logarithmic terms are evaluated as ratios so that
//! observation points on the extension of an edge line stay finite.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Points closer than this to the magnet surface are pushed outward by the same
/// distance before evaluation; the closed form is singular on edges and corners.
pub const SURFACE_TOLERANCE_MM: f64 = 1e-6;

const TESLA_TO_MILLITESLA: f64 = 1000.0;

/// A uniformly magnetised, axis-aligned rectangular prism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Magnet {
    center: Vec3,
    dims: Vec3,
    magnetization_dir: Vec3,
    remanence_t: f64,
}

impl Magnet {
    pub fn new(center: Vec3, dims: Vec3, magnetization_dir: Vec3, remanence_t: f64) -> Result<Self> {
        if !(center.iter().all(|c| c.is_finite())) {
            return Err(Error::Argument("magnet center must be finite".into()));
        }
        if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::Argument(format!(
                "magnet dimensions must be positive, got {:?}",
                dims.as_slice()
            )));
        }
        if (magnetization_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "magnetization direction must be a unit vector (|m| = {})",
                magnetization_dir.norm()
            )));
        }
        if !(remanence_t.is_finite() && remanence_t >= 0.0) {
            return Err(Error::Argument(format!("remanence must be >= 0, got {remanence_t}")));
        }
        Ok(Self {
            center,
            dims,
            magnetization_dir,
            remanence_t,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn dims(&self) -> Vec3 {
        self.dims
    }

    pub fn magnetization_dir(&self) -> Vec3 {
        self.magnetization_dir
    }

    pub fn remanence_t(&self) -> f64 {
        self.remanence_t
    }

    pub fn volume_mm3(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    pub fn with_center(&self, center: Vec3) -> Self {
        Self { center, ..self.clone() }
    }

    pub fn with_remanence(&self, remanence_t: f64) -> Result<Self> {
        Self::new(self.center, self.dims, self.magnetization_dir, remanence_t)
    }

    /// Same magnet with the magnetization direction flipped.
    pub fn reversed(&self) -> Self {
        Self {
            magnetization_dir: -self.magnetization_dir,
            ..self.clone()
        }
    }

    fn half_dims(&self) -> Vec3 {
        self.dims * 0.5
    }

    /// True when `point` lies inside the magnet by more than the surface tolerance.
    pub fn contains(&self, point: &Vec3) -> bool {
        let q = point - self.center;
        let h = self.half_dims();
        (0..3).all(|i| q[i].abs() < h[i] - SURFACE_TOLERANCE_MM)
    }

    /// True when the axis-aligned boxes of the two magnets share interior volume.
    pub fn overlaps(&self, other: &Magnet) -> bool {
        let d = other.center - self.center;
        let reach = self.half_dims() + other.half_dims();
        (0..3).all(|i| d[i].abs() < reach[i] - SURFACE_TOLERANCE_MM)
    }
}

/// Flux density at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    /// Flux density, mT.
    pub b_mt: Vec3,
    /// Observation point, mm.
    pub at: Vec3,
}

impl FieldVector {
    pub fn zero(at: Vec3) -> Self {
        Self {
            b_mt: Vec3::zeros(),
            at,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.b_mt.norm()
    }
}

/// Signed axial projection of the field sampled along a straight line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialProfile {
    /// Distance from the line start, cm.
    pub positions_cm: Vec<f64>,
    /// Field projected onto the line direction, mT.
    pub b_axial_mt: Vec<f64>,
}

/// Field of a single cuboid magnet at `point`.
///
/// Points on (or within [`SURFACE_TOLERANCE_MM`] of) the surface are nudged
/// outward along the local surface normal; points strictly inside are rejected.
pub fn field_at(magnet: &Magnet, point: &Vec3) -> Result<FieldVector> {
    if magnet.contains(point) {
        return Err(Error::Domain(format!(
            "point ({:.6}, {:.6}, {:.6}) mm lies inside a magnet",
            point.x, point.y, point.z
        )));
    }
    if magnet.remanence_t == 0.0 {
        return Ok(FieldVector::zero(*point));
    }
    let half = magnet.half_dims();
    let local = nudge_off_surface(point - magnet.center, &half);

    let mut b = Vec3::zeros();
    for axis in 0..3 {
        let m = magnet.magnetization_dir[axis];
        if m == 0.0 {
            continue;
        }
        // +face carries density +m, -face carries -m.
        for (sign, plane) in [(1.0, half[axis]), (-1.0, -half[axis])] {
            b += sign * m * sheet_integral(&local, axis, &half, plane);
        }
    }
    let scale = TESLA_TO_MILLITESLA * magnet.remanence_t / (4.0 * PI);
    Ok(FieldVector {
        b_mt: b * scale,
        at: *point,
    })
}

/// Component-wise sum of [`field_at`] over all magnets.
pub fn superpose(magnets: &[Magnet], point: &Vec3) -> Result<FieldVector> {
    let mut total = FieldVector::zero(*point);
    for magnet in magnets {
        total.b_mt += field_at(magnet, point)?.b_mt;
    }
    Ok(total)
}

/// Samples the superposed field at `n_samples` equispaced points from `line_start`
/// to `line_end` and projects it onto the line direction.
pub fn axial_profile(magnets: &[Magnet], line_start: &Vec3, line_end: &Vec3, n_samples: usize) -> Result<AxialProfile> {
    if n_samples < 2 {
        return Err(Error::Argument(format!(
            "axial profile needs at least 2 samples, got {n_samples}"
        )));
    }
    let span = line_end - line_start;
    let length = span.norm();
    if !(length > 0.0) {
        return Err(Error::Argument("degenerate profile line: start == end".into()));
    }
    let dir = span / length;
    let mut positions_cm = Vec::with_capacity(n_samples);
    let mut b_axial_mt = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let s = length * i as f64 / (n_samples - 1) as f64;
        let p = line_start + dir * s;
        positions_cm.push(s / 10.0);
        b_axial_mt.push(superpose(magnets, &p)?.b_mt.dot(&dir));
    }
    Ok(AxialProfile {
        positions_cm,
        b_axial_mt,
    })
}

/// Central-difference estimate of div B (mT/mm) at `point` with step `h` (mm).
///
/// A physics check only; the simulator itself never calls it.
pub fn divergence_check(magnets: &[Magnet], point: &Vec3, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {h}")));
    }
    if let Some(m) = magnets.iter().find(|m| m.contains(point)) {
        return Err(Error::Domain(format!(
            "stencil center inside magnet at {:?}",
            m.center.as_slice()
        )));
    }
    let mut div = 0.0;
    for axis in 0..3 {
        let mut step = Vec3::zeros();
        step[axis] = h;
        let fwd = superpose(magnets, &(point + step))?;
        let bwd = superpose(magnets, &(point - step))?;
        div += (fwd.b_mt[axis] - bwd.b_mt[axis]) / (2.0 * h);
    }
    Ok(div)
}

fn nudge_off_surface(mut q: Vec3, half: &Vec3) -> Vec3 {
    let gap = |q: &Vec3, i: usize| q[i].abs() - half[i];
    let max_gap = (0..3).map(|i| gap(&q, i)).fold(f64::NEG_INFINITY, f64::max);
    if max_gap > SURFACE_TOLERANCE_MM {
        return q;
    }
    for i in 0..3 {
        if gap(&q, i) >= -SURFACE_TOLERANCE_MM {
            q[i] = q[i].signum() * (half[i] + SURFACE_TOLERANCE_MM);
        }
    }
    q
}

/// Integral of `(r - r') / |r - r'|^3` over a rectangular sheet normal to `axis`
/// located at `plane` (local magnet coordinates, sheet spanning the face).
fn sheet_integral(q: &Vec3, axis: usize, half: &Vec3, plane: f64) -> Vec3 {
    let iu = (axis + 1) % 3;
    let iv = (axis + 2) % 3;
    let (ua, ub) = (q[iu] - half[iu], q[iu] + half[iu]);
    let (va, vb) = (q[iv] - half[iv], q[iv] + half[iv]);
    let w = q[axis] - plane;

    let normal = if w == 0.0 {
        // In the sheet's plane but outside the sheet: the contributions cancel.
        0.0
    } else {
        let corner = |u: f64, v: f64| {
            let r = (u * u + v * v + w * w).sqrt();
            (u * v / (w * r)).atan()
        };
        corner(ub, vb) - corner(ub, va) - corner(ua, vb) + corner(ua, va)
    };
    let along_u = log_ratio(ua, va, vb, w) - log_ratio(ub, va, vb, w);
    let along_v = log_ratio(va, ua, ub, w) - log_ratio(vb, ua, ub, w);

    let mut out = Vec3::zeros();
    out[axis] = normal;
    out[iu] = along_u;
    out[iv] = along_v;
    out
}

/// `ln((hi + R(hi)) / (lo + R(lo)))` with `R(x) = sqrt(a^2 + x^2 + w^2)`, arranged
/// so no term cancels catastrophically when `x` is large and negative.
fn log_ratio(a: f64, lo: f64, hi: f64, w: f64) -> f64 {
    let rho2 = a * a + w * w;
    let r_lo = (rho2 + lo * lo).sqrt();
    let r_hi = (rho2 + hi * hi).sqrt();
    if lo >= 0.0 {
        ((hi + r_hi) / (lo + r_lo)).ln()
    } else if hi <= 0.0 {
        // x + R = rho^2 / (R - x); the rho^2 factors cancel.
        ((r_lo - lo) / (r_hi - hi)).ln()
    } else {
        ((hi + r_hi) * (r_lo - lo) / rho2).ln()
    }
}

/// Writes a field dump with header `x_mm,y_mm,z_mm,Bx_mT,By_mT,Bz_mT`.
pub fn write_field_grid<W: Write>(out: W, samples: &[FieldVector]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["x_mm", "y_mm", "z_mm", "Bx_mT", "By_mT", "Bz_mT"])?;
    for s in samples {
        wtr.write_record(
            [s.at.x, s.at.y, s.at.z, s.b_mt.x, s.b_mt.y, s.b_mt.z]
                .iter()
                .map(|v| v.to_string()),
        )?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes an axial profile with header `l_cm,B_axial_mT`.
pub fn write_axial_profile<W: Write>(out: W, profile: &AxialProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["l_cm", "B_axial_mT"])?;
    for (l, b) in profile.positions_cm.iter().zip(&profile.b_axial_mt) {
        wtr.write_record([l.to_string(), b.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a field dump written by [`write_field_grid`].
pub fn read_field_grid(path: &Path) -> Result<Vec<FieldVector>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let expected = ["x_mm", "y_mm", "z_mm", "Bx_mT", "By_mT", "Bz_mT"];
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let vals = parse_row(&record, 6, line)?;
        out.push(FieldVector {
            at: Vec3::new(vals[0], vals[1], vals[2]),
            b_mt: Vec3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(out)
}

pub(crate) fn parse_row(record: &csv::StringRecord, width: usize, line: u64) -> Result<Vec<f64>> {
    if record.len() != width {
        return Err(Error::Parse {
            line,
            message: format!("expected {width} fields, found {}", record.len()),
        });
    }
    record
        .iter()
        .map(|field| {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line,
                    message: format!("non-finite value {field:?}"),
                })
            }
        })
        .collect()
}
