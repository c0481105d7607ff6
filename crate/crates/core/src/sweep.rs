//! Rotor assembly geometry and synthetic attenuation traces.
//!
//! The optical axis is `z` with the circulator spanning `z = 0..50 mm`; the
//! rotor angle is measured about that axis from `+x`. Both magnets rotate
//! rigidly at the same azimuth.

use std::io::Write;
use std::path::Path;

use nalgebra::Rotation3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circulator::{CirculatorModel, DEVICE_LENGTH_CM};
use crate::error::{Error, Result};
use crate::magnetostatics::parse_row;
use crate::magnetostatics::{superpose, Magnet, Vec3};

pub const MAX_DELTA_D_MM: f64 = 10.0;

/// Which magnet face points at the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnetOrientation {
    /// Largest face toward the axis: the thinnest edge is radial.
    #[default]
    FaceOn,
    /// Longest edge radial.
    EdgeOn,
}

/// Geometric parameters from which a [`RotorAssembly`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorParams {
    pub remanence_t: f64,
    /// Edge lengths as (long, middle, short); the orientation picks which one is radial.
    pub magnet_dims_mm: [f64; 3],
    /// Axis to magnet-face distance.
    pub radial_standoff_mm: f64,
    pub delta_d_mm: f64,
    pub phase_deg: f64,
    /// Axial centers of the two magnets before the offset is applied.
    pub nominal_axial_mm: [f64; 2],
    pub orientation: MagnetOrientation,
}

impl Default for RotorParams {
    fn default() -> Self {
        Self {
            remanence_t: 1.0,
            magnet_dims_mm: [17.0, 9.0, 4.5],
            radial_standoff_mm: 16.0,
            delta_d_mm: 3.0,
            phase_deg: 0.0,
            nominal_axial_mm: [20.0, 30.0],
            orientation: MagnetOrientation::FaceOn,
        }
    }
}

/// Two axially magnetised magnets beside the circulator, drawn at rotor angle 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotorAssembly {
    pub magnet_a: Magnet,
    pub magnet_b: Magnet,
    pub radial_standoff_mm: f64,
    pub delta_d_mm: f64,
    pub phase_deg: f64,
}

impl RotorAssembly {
    /// Builds the pair so that each magnet opposes the bias field at its rotator.
    /// The whole offset goes to magnet `b`; magnet `a` stays at its nominal position.
    pub fn new(params: &RotorParams, model: &CirculatorModel) -> Result<Self> {
        let [long, mid, short] = params.magnet_dims_mm;
        let (radial, tangential) = match params.orientation {
            MagnetOrientation::FaceOn => (short, long),
            MagnetOrientation::EdgeOn => (long, short),
        };
        let dims = Vec3::new(radial, tangential, mid);
        let radius = model.device_diameter_mm / 2.0;
        if !(params.radial_standoff_mm > radius) {
            return Err(Error::Geometry(format!(
                "radial standoff {} mm must exceed the device radius {radius} mm",
                params.radial_standoff_mm
            )));
        }
        if !(0.0..=MAX_DELTA_D_MM).contains(&params.delta_d_mm) {
            return Err(Error::Geometry(format!(
                "delta_d {} mm outside [0, {MAX_DELTA_D_MM}] mm",
                params.delta_d_mm
            )));
        }
        let x = params.radial_standoff_mm + radial / 2.0;
        let b_s = model.internal_field_at_sites();
        // A magnet magnetised along +z pushes the axis field beside it toward -z.
        let dir = |i: usize| if b_s[i] < 0.0 { -Vec3::z() } else { Vec3::z() };
        let magnet_a = Magnet::new(
            Vec3::new(x, 0.0, params.nominal_axial_mm[0]),
            dims,
            dir(0),
            params.remanence_t,
        )?;
        let magnet_b = Magnet::new(
            Vec3::new(x, 0.0, params.nominal_axial_mm[1] + params.delta_d_mm),
            dims,
            dir(1),
            params.remanence_t,
        )?;
        let assembly = Self {
            magnet_a,
            magnet_b,
            radial_standoff_mm: params.radial_standoff_mm,
            delta_d_mm: params.delta_d_mm,
            phase_deg: params.phase_deg,
        };
        assembly.validate(model)?;
        Ok(assembly)
    }

    pub fn validate(&self, model: &CirculatorModel) -> Result<()> {
        if self.magnet_a.overlaps(&self.magnet_b) {
            return Err(Error::Geometry("rotor magnets overlap each other".into()));
        }
        let radius = model.device_diameter_mm / 2.0;
        let length = DEVICE_LENGTH_CM * 10.0;
        for m in [&self.magnet_a, &self.magnet_b] {
            // Nearest approach of the box to the axis in the rotor plane.
            let c = m.center();
            let h = m.dims() / 2.0;
            let dx = (c.x.abs() - h.x).max(0.0);
            let dy = (c.y.abs() - h.y).max(0.0);
            let radial_gap = dx.hypot(dy);
            let axial_overlap = c.z + h.z > 0.0 && c.z - h.z < length;
            if axial_overlap && radial_gap < radius {
                return Err(Error::Geometry(format!(
                    "magnet at {c:?} intersects the circulator body"
                )));
            }
        }
        Ok(())
    }

    pub fn magnets_at(&self, theta_deg: f64) -> [Magnet; 2] {
        let rot = rotation(theta_deg);
        [&self.magnet_a, &self.magnet_b].map(|m| {
            let rotated = Magnet::new(rot * m.center(), m.dims(), rot * m.magnetization_dir(), m.remanence_t());
            rotated.expect("rotation preserves magnet invariants")
        })
    }
}

fn rotation(theta_deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vec3::z_axis(), theta_deg.to_radians())
}

/// Added axial field at each rotator for rotor angle `theta_deg`, signed as the
/// attenuation model expects: a rotor field that exactly cancels the bias reads as `B_s`.
///
/// The boxes stay axis-aligned, so the evaluation point is rotated into the rotor
/// frame instead and the field is rotated back.
pub fn rotor_field_at_sites(assembly: &RotorAssembly, model: &CirculatorModel, theta_deg: f64) -> Result<[f64; 2]> {
    let magnets = [assembly.magnet_a.clone(), assembly.magnet_b.clone()];
    let rot = rotation(theta_deg);
    let mut out = [0.0; 2];
    for (slot, &site_cm) in out.iter_mut().zip(&model.yig_sites_cm) {
        let site = Vec3::new(0.0, 0.0, site_cm * 10.0);
        let local = rot.inverse() * site;
        let b = rot * superpose(&magnets, &local)?.b_mt;
        *slot = -b.z;
    }
    Ok(out)
}

/// Noiseless attenuation as a function of rotor angle, referenced to its
/// minimum over a revolution.
#[derive(Debug, Clone)]
pub struct ResponseCurve {
    model: CirculatorModel,
    assembly: RotorAssembly,
    reference_db: f64,
}

const REFERENCE_SCAN_STEP_DEG: f64 = 0.1;

impl ResponseCurve {
    pub fn new(model: &CirculatorModel, assembly: &RotorAssembly) -> Result<Self> {
        model.validate()?;
        assembly.validate(model)?;
        let mut curve = Self {
            model: model.clone(),
            assembly: assembly.clone(),
            reference_db: 0.0,
        };
        curve.reference_db = curve.continuous_minimum()?;
        Ok(curve)
    }

    pub fn reference_db(&self) -> f64 {
        self.reference_db
    }

    pub fn model(&self) -> &CirculatorModel {
        &self.model
    }

    pub fn assembly(&self) -> &RotorAssembly {
        &self.assembly
    }

    /// Double-pass shielded attenuation before re-referencing.
    pub fn raw_db(&self, theta_deg: f64) -> Result<f64> {
        let b_add = rotor_field_at_sites(&self.assembly, &self.model, theta_deg)?;
        Ok(self.model.shielded_attenuation(b_add, theta_deg).alpha_db)
    }

    pub fn alpha_db(&self, theta_deg: f64) -> Result<f64> {
        Ok(self.raw_db(theta_deg)? - self.reference_db)
    }

    /// Global minimum located by a coarse scan refined with golden-section search,
    /// so that it does not depend on any particular sampling of the revolution.
    fn continuous_minimum(&self) -> Result<f64> {
        let n = (360.0 / REFERENCE_SCAN_STEP_DEG).round() as usize;
        let scan = (0..n)
            .map(|i| {
                let theta = i as f64 * REFERENCE_SCAN_STEP_DEG;
                self.raw_db(theta).map(|a| (theta, a))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut best = f64::INFINITY;
        let lowest = scan.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        // Refine every scan point tied with the lowest one: plateaus and repeated minima.
        for (i, &(theta, a)) in scan.iter().enumerate() {
            let left = scan[(i + n - 1) % n].1;
            let right = scan[(i + 1) % n].1;
            if a > lowest + 1e-9 || a > left || a > right {
                continue;
            }
            let refined = golden_min(
                |t| self.raw_db(t),
                theta - REFERENCE_SCAN_STEP_DEG,
                theta + REFERENCE_SCAN_STEP_DEG,
            )?;
            best = best.min(refined).min(a);
        }
        Ok(best)
    }
}

fn golden_min(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > 1e-10 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(f1.min(f2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub velocity_deg_per_s: f64,
    pub dt_s: f64,
    pub revolutions: u32,
    pub noise_sigma_db: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            velocity_deg_per_s: 250.0,
            dt_s: 0.005,
            revolutions: 1,
            noise_sigma_db: 0.017,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.velocity_deg_per_s > 0.0 && self.velocity_deg_per_s.is_finite()) {
            return Err(Error::Argument("sweep velocity must be > 0".into()));
        }
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(Error::Argument("sampling interval must be > 0".into()));
        }
        if self.revolutions < 1 {
            return Err(Error::Argument("at least one revolution is required".into()));
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return Err(Error::Argument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Samples covering the revolutions including both end points.
    pub fn sample_count(&self) -> usize {
        let span = self.revolutions as f64 * 360.0 / (self.velocity_deg_per_s * self.dt_s);
        (span + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttenuationTrace {
    pub t_s: Vec<f64>,
    pub alpha_db: Vec<f64>,
    /// Unwrapped rotor angle, present only for simulated traces.
    pub theta_true_deg: Option<Vec<f64>>,
}

impl AttenuationTrace {
    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    /// Sampling interval, if the trace has at least two samples.
    pub fn dt_s(&self) -> Option<f64> {
        (self.t_s.len() >= 2).then(|| self.t_s[1] - self.t_s[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_db.len() != self.t_s.len() {
            return Err(Error::Argument("time and attenuation columns differ in length".into()));
        }
        if let Some(theta) = &self.theta_true_deg {
            if theta.len() != self.t_s.len() {
                return Err(Error::Argument("ground-truth column differs in length".into()));
            }
        }
        check_timestamps(&self.t_s, |i| {
            Error::Argument(format!("timestamps not uniform at sample {i}"))
        })
    }

    /// Contiguous sub-trace `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            t_s: self.t_s[start..end].to_vec(),
            alpha_db: self.alpha_db[start..end].to_vec(),
            theta_true_deg: self.theta_true_deg.as_ref().map(|t| t[start..end].to_vec()),
        }
    }
}

/// Relative tolerance on the spacing between consecutive timestamps.
const DT_TOLERANCE: f64 = 1e-6;

fn check_timestamps(t: &[f64], err: impl Fn(usize) -> Error) -> Result<()> {
    if t.len() < 2 {
        return Ok(());
    }
    let dt = t[1] - t[0];
    for i in 1..t.len() {
        let step = t[i] - t[i - 1];
        if !(step > 0.0) || (step - dt).abs() > DT_TOLERANCE * dt {
            return Err(err(i));
        }
    }
    Ok(())
}

/// Zero-mean Gaussian noise for sample `index`, independent of evaluation order.
pub fn noise_sample(seed: u64, index: u64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let z: f64 = StandardNormal.sample(&mut rng);
    sigma * z
}

/// Attenuation trace for an arbitrary angle path sampled at the given times.
pub fn synthesize_path(
    curve: &ResponseCurve,
    t_s: Vec<f64>,
    theta_deg: Vec<f64>,
    noise_sigma_db: f64,
    seed: u64,
) -> Result<AttenuationTrace> {
    let alpha_db = theta_deg
        .par_iter()
        .enumerate()
        .map(|(k, &theta)| Ok(curve.alpha_db(theta)? + noise_sample(seed, k as u64, noise_sigma_db)))
        .collect::<Result<Vec<_>>>()?;
    let trace = AttenuationTrace {
        t_s,
        alpha_db,
        theta_true_deg: Some(theta_deg),
    };
    trace.validate()?;
    Ok(trace)
}

/// Constant-velocity rotation starting at the assembly's phase.
pub fn synthesize_sweep(
    assembly: &RotorAssembly,
    model: &CirculatorModel,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<AttenuationTrace> {
    cfg.validate()?;
    let curve = ResponseCurve::new(model, assembly)?;
    sweep_with_curve(&curve, cfg, seed)
}

/// As [`synthesize_sweep`] with a precomputed response curve.
pub fn sweep_with_curve(curve: &ResponseCurve, cfg: &SweepConfig, seed: u64) -> Result<AttenuationTrace> {
    cfg.validate()?;
    let n = cfg.sample_count();
    let t_s: Vec<f64> = (0..n).map(|k| k as f64 * cfg.dt_s).collect();
    let phase = curve.assembly().phase_deg;
    let theta: Vec<f64> = t_s.iter().map(|t| phase + cfg.velocity_deg_per_s * t).collect();
    synthesize_path(curve, t_s, theta, cfg.noise_sigma_db, seed)
}

pub fn write_trace<W: Write>(out: W, trace: &AttenuationTrace) -> Result<()> {
    trace.validate()?;
    let mut wtr = csv::Writer::from_writer(out);
    match &trace.theta_true_deg {
        Some(theta) => {
            wtr.write_record(["t_s", "alpha_dB", "theta_true_deg"])?;
            for ((t, a), th) in trace.t_s.iter().zip(&trace.alpha_db).zip(theta) {
                wtr.write_record([t.to_string(), a.to_string(), th.to_string()])?;
            }
        }
        None => {
            wtr.write_record(["t_s", "alpha_dB"])?;
            for (t, a) in trace.t_s.iter().zip(&trace.alpha_db) {
                wtr.write_record([t.to_string(), a.to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace_file(path: &Path, trace: &AttenuationTrace) -> Result<()> {
    write_trace(std::fs::File::create(path)?, trace)
}

pub fn read_trace(path: &Path) -> Result<AttenuationTrace> {
    read_trace_from(std::fs::File::open(path)?)
}

pub fn read_trace_from<R: std::io::Read>(input: R) -> Result<AttenuationTrace> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let with_truth = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["t_s", "alpha_dB"] => false,
        ["t_s", "alpha_dB", "theta_true_deg"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header t_s,alpha_dB[,theta_true_deg]".into(),
            })
        }
    };
    let width = if with_truth { 3 } else { 2 };
    let mut trace = AttenuationTrace {
        theta_true_deg: with_truth.then(Vec::new),
        ..Default::default()
    };
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let vals = parse_row(&record, width, line)?;
        trace.t_s.push(vals[0]);
        trace.alpha_db.push(vals[1]);
        if let Some(theta) = trace.theta_true_deg.as_mut() {
            theta.push(vals[2]);
        }
        lines.push(line);
    }
    check_timestamps(&trace.t_s, |i| Error::Parse {
        line: lines[i],
        message: "timestamps must increase with a constant step".into(),
    })?;
    Ok(trace)
}
