//! Calibration table and tracking decoder.
//!
//! Attenuation is not an injective function of angle over a revolution, so the
//! decoder never inverts a single sample in isolation. It acquires the start
//! angle by correlating a window against the table and then follows the rotor
//! sample by sample, searching for table crossings near the predicted angle.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circulator::{wrap_deg, CirculatorModel};
use crate::error::{Error, Result};
use crate::magnetostatics::parse_row;
use crate::sweep::{rotor_field_at_sites, AttenuationTrace, ResponseCurve, RotorAssembly};

/// Fraction of grid points, by ascending |slope|, treated as flat.
pub const FLAT_PERCENTILE: f64 = 0.10;

/// Peaks of the acquisition correlation closer than this to the best one are the same peak.
const PEAK_SEPARATION_DEG: f64 = 2.0;
const AMBIGUITY_RATIO: f64 = 0.95;
const MIN_INIT_SPAN_DEG: f64 = 90.0;
/// A sample this many noise sigmas outside the reachable attenuation is a loss of track.
const HOLD_NOISE_MULTIPLE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    grid_step_deg: f64,
    alpha_db: Vec<f64>,
    slope_db_per_deg: Vec<f64>,
    flat_mask: Vec<bool>,
    /// Hermite node derivatives of the monotone interpolant.
    knot_slopes: Vec<f64>,
    flat_threshold: f64,
}

impl CalibrationTable {
    /// Table from values on `[0, 360)` at `grid_step_deg` spacing. Constant inputs are
    /// accepted here; [`build_calibration`] is the place that rejects them.
    pub fn from_samples(grid_step_deg: f64, alpha_db: Vec<f64>) -> Result<Self> {
        let n = grid_points(grid_step_deg)?;
        if alpha_db.len() != n {
            return Err(Error::Argument(format!(
                "expected {n} table values, got {}",
                alpha_db.len()
            )));
        }
        if alpha_db.iter().any(|a| !a.is_finite()) {
            return Err(Error::Calibration("table contains non-finite values".into()));
        }
        let h = grid_step_deg;
        let slope: Vec<f64> = (0..n)
            .map(|i| (alpha_db[(i + 1) % n] - alpha_db[(i + n - 1) % n]) / (2.0 * h))
            .collect();
        let mut magnitudes: Vec<f64> = slope.iter().map(|s| s.abs()).collect();
        magnitudes.sort_by(f64::total_cmp);
        let flat_threshold = magnitudes[((n as f64 * FLAT_PERCENTILE) as usize).min(n - 1)];
        let flat_mask = slope.iter().map(|s| s.abs() < flat_threshold).collect();
        let secant: Vec<f64> = (0..n).map(|i| (alpha_db[(i + 1) % n] - alpha_db[i]) / h).collect();
        let knot_slopes = (0..n)
            .map(|i| {
                let (left, right) = (secant[(i + n - 1) % n], secant[i]);
                if left * right <= 0.0 {
                    0.0
                } else {
                    2.0 / (1.0 / left + 1.0 / right)
                }
            })
            .collect();
        Ok(Self {
            grid_step_deg,
            alpha_db,
            slope_db_per_deg: slope,
            flat_mask,
            knot_slopes,
            flat_threshold,
        })
    }

    pub fn grid_step_deg(&self) -> f64 {
        self.grid_step_deg
    }

    pub fn len(&self) -> usize {
        self.alpha_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_db.is_empty()
    }

    pub fn theta_grid_deg(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.grid_step_deg).collect()
    }

    pub fn alpha_db(&self) -> &[f64] {
        &self.alpha_db
    }

    pub fn slope_db_per_deg(&self) -> &[f64] {
        &self.slope_db_per_deg
    }

    pub fn flat_mask(&self) -> &[bool] {
        &self.flat_mask
    }

    /// |slope| below which a grid point is flagged flat.
    pub fn flat_threshold(&self) -> f64 {
        self.flat_threshold
    }

    pub fn is_degenerate(&self) -> bool {
        let (lo, hi) = self.range();
        hi - lo <= 1e-12 * hi.abs().max(1.0)
    }

    pub fn range(&self) -> (f64, f64) {
        self.alpha_db
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
                (lo.min(a), hi.max(a))
            })
    }

    fn cell(&self, theta_deg: f64) -> (usize, f64) {
        let x = wrap_deg(theta_deg) / self.grid_step_deg;
        let i = (x.floor() as usize).min(self.len() - 1);
        (i, (x - i as f64).clamp(0.0, 1.0))
    }

    fn hermite(&self, i: usize, s: f64) -> f64 {
        let n = self.len();
        let (y0, y1) = (self.alpha_db[i], self.alpha_db[(i + 1) % n]);
        let (d0, d1) = (
            self.knot_slopes[i] * self.grid_step_deg,
            self.knot_slopes[(i + 1) % n] * self.grid_step_deg,
        );
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * d1
    }

    /// Monotone piecewise-cubic interpolant, periodic in 360 degrees.
    pub fn interpolate(&self, theta_deg: f64) -> f64 {
        let (i, s) = self.cell(theta_deg);
        self.hermite(i, s)
    }

    /// Centered-difference slope, linearly interpolated between grid points.
    pub fn slope_at(&self, theta_deg: f64) -> f64 {
        let (i, s) = self.cell(theta_deg);
        let n = self.len();
        (1.0 - s) * self.slope_db_per_deg[i] + s * self.slope_db_per_deg[(i + 1) % n]
    }

    pub fn is_flat_at(&self, theta_deg: f64) -> bool {
        let (i, s) = self.cell(theta_deg);
        let nearest = if s < 0.5 { i } else { (i + 1) % self.len() };
        self.flat_mask[nearest]
    }

    /// Whether the table has a local extremum in `[lo, hi]` (degrees, unwrapped).
    fn has_extremum_within(&self, lo: f64, hi: f64) -> bool {
        let n = self.len() as i64;
        let first = (lo / self.grid_step_deg).floor() as i64;
        let last = (hi / self.grid_step_deg).ceil() as i64;
        (first..=last).any(|j| self.knot_slopes[j.rem_euclid(n) as usize] == 0.0)
    }

    /// How far `alpha` lies outside the interpolant's range over `[lo, hi]`.
    fn distance_to_range(&self, alpha: f64, lo: f64, hi: f64) -> f64 {
        let n = self.len() as i64;
        let h = self.grid_step_deg;
        let inner = ((lo / h).ceil() as i64..=(hi / h).floor() as i64).map(|j| self.alpha_db[j.rem_euclid(n) as usize]);
        let (min, max) = inner
            .chain([self.interpolate(lo), self.interpolate(hi)])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        (min - alpha).max(alpha - max).max(0.0)
    }

    /// All angles in `[lo, hi]` where the interpolant equals `alpha`, ascending.
    fn crossings(&self, alpha: f64, lo: f64, hi: f64) -> Vec<f64> {
        let n = self.len() as i64;
        let h = self.grid_step_deg;
        let first = (lo / h).floor() as i64;
        let last = (hi / h).floor() as i64;
        let mut out: Vec<f64> = Vec::new();
        for j in first..=last {
            let i = j.rem_euclid(n) as usize;
            let (y0, y1) = (self.alpha_db[i], self.alpha_db[(i + 1) % n as usize]);
            if y0 == y1 || alpha < y0.min(y1) || alpha > y0.max(y1) {
                continue;
            }
            let s = self.solve_cell(i, alpha, y1 > y0);
            let theta = (j as f64 + s) * h;
            if theta < lo || theta > hi {
                continue;
            }
            if out.last().is_none_or(|&prev| theta - prev > 1e-9) {
                out.push(theta);
            }
        }
        out
    }

    /// Bisection on a cell whose interpolant is monotone.
    fn solve_cell(&self, i: usize, alpha: f64, rising: bool) -> f64 {
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            let below = self.hermite(i, mid) < alpha;
            if below == rising {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }
}

fn grid_points(step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(Error::Argument("grid step must be > 0".into()));
    }
    let n = (360.0 / step).round();
    if n < 4.0 || ((n * step) - 360.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("grid step {step} deg does not divide 360")));
    }
    Ok(n as usize)
}

/// Noiseless calibration table of the assembly on `[0, 360)`.
pub fn build_calibration(
    model: &CirculatorModel,
    assembly: &RotorAssembly,
    grid_step_deg: f64,
) -> Result<CalibrationTable> {
    let curve = ResponseCurve::new(model, assembly)?;
    calibration_from_curve(&curve, grid_step_deg)
}

pub fn calibration_from_curve(curve: &ResponseCurve, grid_step_deg: f64) -> Result<CalibrationTable> {
    let n = grid_points(grid_step_deg)?;
    let alpha = (0..n)
        .map(|i| curve.alpha_db(i as f64 * grid_step_deg))
        .collect::<Result<Vec<_>>>()?;
    let table = CalibrationTable::from_samples(grid_step_deg, alpha)?;
    if table.is_degenerate() {
        return Err(Error::Calibration(
            "no angular information: attenuation is constant".into(),
        ));
    }
    Ok(table)
}

/// Mean of `noise / |slope|` over grid points that are not flat.
pub fn resolution_metric(table: &CalibrationTable, noise_sigma_db: f64) -> Result<f64> {
    let (sum, count) = table
        .slope_db_per_deg
        .iter()
        .zip(&table.flat_mask)
        .filter(|(s, flat)| !**flat && s.abs() > 0.0)
        .fold((0.0, 0usize), |(sum, count), (s, _)| (sum + 1.0 / s.abs(), count + 1));
    if count == 0 {
        return Err(Error::Calibration("every calibration point is flat".into()));
    }
    Ok(noise_sigma_db * sum / count as f64)
}

const K_MIN: f64 = 1e-6;
const K_MAX: f64 = 1e3;

/// Chooses the lumped sensitivity so that the resolution metric of the assembly
/// equals `target_resolution_deg`. The search always starts from the same
/// bracket, so the result does not depend on the model's current K.
pub fn calibrate_lumped_k(
    model: &CirculatorModel,
    assembly: &RotorAssembly,
    noise_sigma_db: f64,
    target_resolution_deg: f64,
    grid_step_deg: f64,
) -> Result<CirculatorModel> {
    if !(noise_sigma_db > 0.0) || !(target_resolution_deg > 0.0) {
        return Err(Error::Argument("noise and target resolution must be > 0".into()));
    }
    model.validate()?;
    assembly.validate(model)?;
    let n = grid_points(grid_step_deg)?;
    let thetas: Vec<f64> = (0..n).map(|i| i as f64 * grid_step_deg).collect();
    let fields = thetas
        .iter()
        .map(|&t| rotor_field_at_sites(assembly, model, t))
        .collect::<Result<Vec<_>>>()?;
    let metric = |k: f64| -> f64 {
        let m = model.with_lumped_k(k);
        let alpha: Vec<f64> = fields
            .iter()
            .zip(&thetas)
            .map(|(b, &t)| m.shielded_attenuation(*b, t).alpha_db)
            .collect();
        match CalibrationTable::from_samples(grid_step_deg, alpha) {
            Ok(table) if !table.is_degenerate() => resolution_metric(&table, noise_sigma_db).unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        }
    };
    // Walk up from K_MIN until the target is met; the metric falls with K until the clamp flattens the response.
    let mut lo = K_MIN;
    if metric(lo) <= target_resolution_deg {
        return Err(Error::Calibration(format!(
            "target {target_resolution_deg} deg met already at K = {K_MIN}"
        )));
    }
    let mut hi = lo;
    loop {
        let next = (hi * 2.0).min(K_MAX);
        if metric(next) <= target_resolution_deg {
            lo = hi;
            hi = next;
            break;
        }
        if next >= K_MAX {
            return Err(Error::Calibration(format!(
                "target {target_resolution_deg} deg unreachable for K in [{K_MIN}, {K_MAX}] dB/mT"
            )));
        }
        hi = next;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if metric(mid) > target_resolution_deg {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    Ok(model.with_lumped_k(hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    pub theta_deg: f64,
    pub sigma_deg: f64,
    pub flat_flag: bool,
}

/// Decoder settings that do not live in the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Largest expected rotor speed, used for the acquisition window and step bound.
    pub velocity_deg_per_s: f64,
    pub noise_sigma_db: f64,
    /// +1 or -1 when the rotation direction is known, 0 otherwise.
    pub direction_hint: i8,
    pub max_step_margin: f64,
    pub max_accel_deg_per_s2: f64,
    /// Combine a time-reversed pass with the forward one. Needs the whole trace.
    pub smoothing: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            velocity_deg_per_s: 250.0,
            noise_sigma_db: 0.017,
            direction_hint: 1,
            max_step_margin: 2.0,
            max_accel_deg_per_s2: 20_000.0,
            smoothing: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.velocity_deg_per_s) || !positive(self.max_step_margin) || !positive(self.max_accel_deg_per_s2)
        {
            return Err(Error::Argument(
                "decoder velocity, step margin and acceleration must be > 0".into(),
            ));
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return Err(Error::Argument("decoder noise must be >= 0".into()));
        }
        if !(-1..=1).contains(&self.direction_hint) {
            return Err(Error::Argument("direction hint must be -1, 0 or 1".into()));
        }
        Ok(())
    }

    /// Half-width of the crossing search around the predicted angle.
    pub fn max_step_deg(&self, table: &CalibrationTable, dt_s: f64) -> f64 {
        let floor = table.flat_threshold().max(f64::MIN_POSITIVE);
        self.max_step_margin * self.velocity_deg_per_s * dt_s + 4.0 * self.noise_sigma_db / floor
    }
}

fn local_sigma(table: &CalibrationTable, theta_deg: f64, noise_sigma_db: f64) -> f64 {
    let slope = table.slope_at(theta_deg).abs();
    let sigma = if slope > 0.0 { noise_sigma_db / slope } else { 360.0 };
    sigma.clamp(table.grid_step_deg, 360.0)
}

/// Start angle of a window by normalised cross-correlation over all grid shifts.
pub fn decode_init(table: &CalibrationTable, window: &AttenuationTrace, cfg: &DecodeConfig) -> Result<AngleEstimate> {
    let dt = window
        .dt_s()
        .ok_or_else(|| Error::Argument("acquisition window needs at least two samples".into()))?;
    let span = cfg.velocity_deg_per_s * dt * (window.len() - 1) as f64;
    if span + 1e-9 < MIN_INIT_SPAN_DEG {
        return Err(Error::Argument(format!(
            "acquisition window spans {span:.1} deg, at least {MIN_INIT_SPAN_DEG} deg required"
        )));
    }
    let directions: Vec<f64> = match cfg.direction_hint.signum() {
        -1 => vec![-1.0],
        1 => vec![1.0],
        _ => vec![1.0, -1.0],
    };
    let observed = normalise(&window.alpha_db);
    let n = table.len();
    let h = table.grid_step_deg;
    let offsets: Vec<f64> = window
        .t_s
        .iter()
        .map(|t| cfg.velocity_deg_per_s * (t - window.t_s[0]))
        .collect();
    let score = |start: f64, dir: f64| -> f64 {
        let Some(obs) = &observed else { return 0.0 };
        let predicted: Vec<f64> = offsets.iter().map(|o| table.interpolate(start + dir * o)).collect();
        match normalise(&predicted) {
            Some(p) => p.iter().zip(obs).map(|(a, b)| a * b).sum::<f64>() / p.len() as f64,
            None => 0.0,
        }
    };
    // (score, grid index, direction) of every local maximum.
    let mut peaks: Vec<(f64, usize, f64)> = Vec::new();
    let mut all: Vec<Vec<f64>> = Vec::new();
    for &dir in &directions {
        let scores: Vec<f64> = (0..n).map(|i| score(i as f64 * h, dir)).collect();
        for i in 0..n {
            let (l, r) = (scores[(i + n - 1) % n], scores[(i + 1) % n]);
            if scores[i] >= l && scores[i] >= r {
                peaks.push((scores[i], i, dir));
            }
        }
        all.push(scores);
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let &(best, idx, dir) = peaks.first().ok_or(Error::Ambiguous {
        first_deg: 0.0,
        second_deg: h,
    })?;
    let rival = peaks.iter().skip(1).find(|p| {
        let sep = ((p.1 as f64 - idx as f64) * h).rem_euclid(360.0);
        p.2 != dir || sep.min(360.0 - sep) > PEAK_SEPARATION_DEG
    });
    if let Some(&(second, j, _)) = rival {
        if best <= 0.0 || second >= AMBIGUITY_RATIO * best {
            return Err(Error::Ambiguous {
                first_deg: idx as f64 * h,
                second_deg: j as f64 * h,
            });
        }
    }
    let scores = &all[directions.iter().position(|&d| d == dir).unwrap_or(0)];
    let (l, c, r) = (scores[(idx + n - 1) % n], scores[idx], scores[(idx + 1) % n]);
    let curvature = (l - 2.0 * c + r) / (h * h);
    let offset = if curvature < 0.0 {
        (0.5 * (l - r) / (l - 2.0 * c + r)).clamp(-0.5, 0.5) * h
    } else {
        0.0
    };
    // The peak falls short of 1 by the noise; that deficit fixes the width.
    let sigma = if curvature < 0.0 {
        (2.0 * (1.0 - c).max(0.0) / -curvature).sqrt()
    } else {
        360.0
    };
    let theta = wrap_deg(idx as f64 * h + offset);
    Ok(AngleEstimate {
        theta_deg: theta,
        sigma_deg: sigma.clamp(h, 360.0),
        flat_flag: table.is_flat_at(theta),
    })
}

fn normalise(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return None;
    }
    let sd = var.sqrt();
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

/// One tracking update from `prev`, searching `max_step_deg` either side of it.
pub fn decode_step(
    table: &CalibrationTable,
    prev: &AngleEstimate,
    alpha_sample: f64,
    max_step_deg: f64,
    noise_sigma_db: f64,
) -> Result<AngleEstimate> {
    if !(max_step_deg > 0.0) {
        return Err(Error::Argument("max step must be > 0".into()));
    }
    step_within(
        table,
        prev,
        alpha_sample,
        prev.theta_deg - max_step_deg,
        prev.theta_deg + max_step_deg,
        noise_sigma_db,
    )
    .map(|(est, _)| est)
}

/// Nearest crossing to `prev` inside `[lo, hi]`. Without one, the estimate is held
/// when the window is flat, straddles an extremum, or the sample misses the
/// window's attainable values by no more than the noise allows.
fn step_within(
    table: &CalibrationTable,
    prev: &AngleEstimate,
    alpha_sample: f64,
    lo: f64,
    hi: f64,
    noise_sigma_db: f64,
) -> Result<(AngleEstimate, bool)> {
    let center = prev.theta_deg;
    let best = table.crossings(alpha_sample, lo, hi).into_iter().min_by(|a, b| {
        let (da, db) = (a - center, b - center);
        da.abs().total_cmp(&db.abs()).then(db.total_cmp(&da))
    });
    match best {
        Some(theta) => Ok((
            AngleEstimate {
                theta_deg: wrap_deg(theta),
                sigma_deg: local_sigma(table, theta, noise_sigma_db),
                flat_flag: table.is_flat_at(theta),
            },
            false,
        )),
        None if table.is_flat_at(center)
            || table.has_extremum_within(lo, hi)
            || table.distance_to_range(alpha_sample, lo, hi) <= HOLD_NOISE_MULTIPLE * noise_sigma_db =>
        {
            let held = AngleEstimate {
                theta_deg: wrap_deg(center),
                sigma_deg: local_sigma(table, center, noise_sigma_db).max(prev.sigma_deg),
                flat_flag: true,
            };
            Ok((held, true))
        }
        None => Err(Error::TrackingLoss {
            sample: 0,
            reason: format!("no table crossing of {alpha_sample:.4} dB in [{lo:.2}, {hi:.2}] deg"),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodedTrace {
    pub t_s: Vec<f64>,
    pub estimates: Vec<AngleEstimate>,
    /// Estimates unwrapped across the 0/360 seam, continuing from the start angle.
    pub unwrapped_deg: Vec<f64>,
}

/// Filter bins per calibration grid cell.
const BINS_PER_CELL: usize = 2;
/// Probability that the velocity carries over unchanged to the next sample.
const KEEP_VELOCITY: f64 = 0.5;
/// Per-sample weight of velocity levels against the hinted direction.
const AGAINST_HINT_WEIGHT: f64 = 0.5;
/// Cells below this fraction of the peak are dropped.
const PRUNE_FRACTION: f64 = 1e-7;
/// Angle bins above this fraction of the peak form the reported mode.
const MODE_FRACTION: f64 = 1e-3;
/// A sample further than this many noise sigmas from every reachable table value loses track.
const LOSS_SIGMAS: f64 = 8.0;
/// Likelihood width floor, covering interpolation error on noiseless traces.
const MIN_NOISE_DB: f64 = 1e-3;

/// Sequential state of [`decode_trace`]: a joint posterior over angle and
/// angular velocity on a grid, kept on a window of angle bins.
///
/// A single sample cannot tell the two flanks of a smooth extremum apart. The
/// velocity state settles it: a rotor at rest stays at rest, and one in motion
/// carries on through a flat stretch until the waveform resumes.
///
/// One velocity level moves the angle by exactly one bin per sample.
struct Tracker {
    alpha_at_bin: Vec<f64>,
    noise_sigma_db: f64,
    /// Velocity levels run from `-max_level` to `max_level`.
    max_level: i64,
    /// Sign of the hinted direction, 0 without a hint.
    hint: i64,
    /// Half-width of the velocity change per sample, in levels.
    accel_levels: i64,
    /// First angle bin of the window.
    start: usize,
    width: usize,
    /// Lowest active velocity level; `rows[r]` holds level `low_level + r`.
    low_level: i64,
    rows: Vec<Vec<f64>>,
}

impl Tracker {
    fn new(table: &CalibrationTable, cfg: &DecodeConfig, dt: f64, start: &AngleEstimate) -> Self {
        let n = table.len() * BINS_PER_CELL;
        let bin_deg = 360.0 / n as f64;
        let level_speed = bin_deg / dt;
        let max_level = ((cfg.max_step_margin * cfg.velocity_deg_per_s / level_speed).ceil() as i64).max(1);
        let accel_levels = ((cfg.max_accel_deg_per_s2 * dt / level_speed).ceil() as i64).max(1);
        let hint = cfg.direction_hint.signum() as i64;
        let (low, high) = match hint {
            -1 => (-max_level, 0),
            1 => (0, max_level),
            _ => (-max_level, max_level),
        };
        let sigma = start.sigma_deg.max(bin_deg);
        let half = ((4.0 * sigma / bin_deg).ceil() as usize).min(n / 2 - 1);
        let centre = (start.theta_deg / bin_deg).round() as i64;
        let profile: Vec<f64> = (0..=2 * half)
            .map(|j| (-0.5 * ((j as f64 - half as f64) * bin_deg / sigma).powi(2)).exp())
            .collect();
        Self {
            alpha_at_bin: (0..n).map(|i| table.interpolate(i as f64 * bin_deg)).collect(),
            noise_sigma_db: cfg.noise_sigma_db.max(MIN_NOISE_DB),
            max_level,
            hint,
            accel_levels,
            start: (centre - half as i64).rem_euclid(n as i64) as usize,
            width: profile.len(),
            low_level: low,
            rows: vec![profile; (high - low + 1) as usize],
        }
    }

    fn bins(&self) -> usize {
        self.alpha_at_bin.len()
    }

    fn is_full(&self) -> bool {
        self.width >= self.bins()
    }

    /// Velocity change followed by one sample of motion.
    fn predict(&mut self) {
        let n = self.bins();
        let a = self.accel_levels;
        let low = (self.low_level - a).max(-self.max_level);
        let high = (self.low_level + self.rows.len() as i64 - 1 + a).min(self.max_level);
        let count = (high - low + 1) as usize;
        let spread = (1.0 - KEEP_VELOCITY) / (2 * a + 1) as f64;
        let old_low = self.low_level;
        let old = std::mem::take(&mut self.rows);
        let level_row = |level: i64| -> Option<&Vec<f64>> {
            let r = level - old_low;
            (0..old.len() as i64).contains(&r).then(|| &old[r as usize])
        };
        // Velocity mixing, column by column through running sums over levels.
        let mut mixed = vec![vec![0.0; self.width]; count];
        for col in 0..self.width {
            let value = |level: i64| level_row(level).map_or(0.0, |row| row[col]);
            let mut window: f64 = (low - a..=low + a).map(value).sum();
            for (r, out) in mixed.iter_mut().enumerate() {
                let level = low + r as i64;
                let weight = if level * self.hint < 0 {
                    AGAINST_HINT_WEIGHT
                } else {
                    1.0
                };
                out[col] = weight * (KEEP_VELOCITY * value(level) + spread * window);
                window += value(level + a + 1) - value(level - a);
            }
        }
        // Each level shifts its row by its own number of bins.
        let (new_start, new_width) = if self.is_full() {
            (self.start, n)
        } else {
            let width = self.width + (high.max(0) - low.min(0)) as usize;
            if width >= n {
                (0, n)
            } else {
                ((self.start as i64 + low.min(0)).rem_euclid(n as i64) as usize, width)
            }
        };
        let mut rows = vec![vec![0.0; new_width]; count];
        let offset = (self.start as i64 - new_start as i64).rem_euclid(n as i64);
        for (r, row) in mixed.iter().enumerate() {
            let level = low + r as i64;
            for (col, v) in row.iter().enumerate() {
                if *v == 0.0 {
                    continue;
                }
                let j = offset + col as i64 + level;
                let j = if new_width == n { j.rem_euclid(n as i64) } else { j };
                rows[r][j as usize] += v;
            }
        }
        self.start = new_start;
        self.width = new_width;
        self.low_level = low;
        self.rows = rows;
    }

    fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for row in &self.rows {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    fn update(&mut self, alpha: f64) -> Result<()> {
        let n = self.bins();
        let inv = 1.0 / self.noise_sigma_db;
        let prior = self.marginal();
        let prior_peak = prior.iter().copied().fold(0.0, f64::max);
        let mut closest = f64::INFINITY;
        let likelihood: Vec<f64> = (0..self.width)
            .map(|j| {
                let z = (alpha - self.alpha_at_bin[(self.start + j) % n]) * inv;
                if prior[j] > PRUNE_FRACTION * prior_peak {
                    closest = closest.min(z.abs());
                }
                (-0.5 * z * z).exp()
            })
            .collect();
        if closest > LOSS_SIGMAS {
            return Err(Error::TrackingLoss {
                sample: 0,
                reason: format!("sample {alpha:.4} dB is {closest:.1} sigma from every reachable angle"),
            });
        }
        let mut peak = 0.0f64;
        for row in &mut self.rows {
            for (v, l) in row.iter_mut().zip(&likelihood) {
                *v *= l;
                peak = peak.max(*v);
            }
        }
        if !(peak > 0.0) {
            return Err(Error::TrackingLoss {
                sample: 0,
                reason: "posterior underflow".into(),
            });
        }
        self.prune(peak);
        Ok(())
    }

    /// Normalises by `peak` and trims negligible velocity levels and angle bins.
    fn prune(&mut self, peak: f64) {
        let keep = PRUNE_FRACTION * peak;
        let live = |row: &Vec<f64>| row.iter().any(|v| *v > keep);
        let first_row = self.rows.iter().position(live).unwrap_or(0);
        let last_row = self.rows.iter().rposition(live).unwrap_or(0);
        self.rows.truncate(last_row + 1);
        self.rows.drain(..first_row);
        self.low_level += first_row as i64;
        let marginal = self.marginal();
        let mut first = marginal.iter().position(|v| *v > keep).unwrap_or(0);
        let mut last = marginal.iter().rposition(|v| *v > keep).unwrap_or(0);
        if self.is_full() {
            // Keep the whole circle unless the live bins fit in a plain arc.
            if first == 0 && last + 1 == self.width {
                first = 0;
                last = self.width - 1;
            }
        }
        let scale = 1.0 / peak;
        for row in &mut self.rows {
            *row = row[first..=last].iter().map(|v| v * scale).collect();
        }
        self.start = (self.start + first) % self.bins();
        self.width = last - first + 1;
    }

    /// Angle marginal over the current window.
    fn arc(&self) -> Arc {
        Arc {
            start: self.start,
            values: self.marginal(),
        }
    }

    fn advance(&mut self, alpha: f64, first: bool) -> Result<()> {
        // The start estimate refers to the first sample itself.
        if !first {
            self.predict();
        }
        self.update(alpha)
    }
}

/// Angle weights on consecutive filter bins from `start`, wrapping at 360 degrees.
struct Arc {
    start: usize,
    values: Vec<f64>,
}

impl Arc {
    /// Pointwise product with `other`, or `None` when the two do not overlap.
    fn product(&self, other: &Arc, bins: usize) -> Option<Arc> {
        let values: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let k = (self.start + j + bins - other.start % bins) % bins;
                v * other.values.get(k).copied().unwrap_or(0.0)
            })
            .collect();
        values.iter().any(|v| *v > 0.0).then_some(Arc {
            start: self.start,
            values,
        })
    }

    /// Mean and spread over the contiguous mode around the peak.
    fn estimate(&self, bins: usize, table: &CalibrationTable) -> AngleEstimate {
        let bin_deg = 360.0 / bins as f64;
        let len = self.values.len() as i64;
        let full = self.values.len() >= bins;
        let at = |j: i64| -> f64 {
            if full {
                self.values[j.rem_euclid(len) as usize]
            } else if (0..len).contains(&j) {
                self.values[j as usize]
            } else {
                0.0
            }
        };
        let top = (0..self.values.len())
            .max_by(|&a, &b| self.values[a].total_cmp(&self.values[b]))
            .unwrap_or(0) as i64;
        let floor = MODE_FRACTION * self.values[top as usize];
        let limit = len / 2;
        let mut lo = top;
        while top - lo < limit && at(lo - 1) > floor {
            lo -= 1;
        }
        let mut hi = top;
        while hi - top < limit && at(hi + 1) > floor {
            hi += 1;
        }
        let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for j in lo..=hi {
            let x = (j - top) as f64 * bin_deg;
            let p = at(j);
            w += p;
            m1 += p * x;
            m2 += p * x * x;
        }
        let mean = m1 / w;
        let var = (m2 / w - mean * mean).max(0.0);
        let theta = wrap_deg((self.start as f64 + top as f64) * bin_deg + mean);
        AngleEstimate {
            theta_deg: theta,
            sigma_deg: var.sqrt().max(table.grid_step_deg),
            flat_flag: table.is_flat_at(theta),
        }
    }
}

/// On sloped parts of the table the sample is inverted locally, taking the
/// crossing nearest the posterior estimate. In flat regions, or when the sample
/// lies outside the attainable range, the posterior estimate stands.
fn refine(table: &CalibrationTable, posterior: AngleEstimate, alpha: f64, noise_sigma_db: f64) -> AngleEstimate {
    if posterior.flat_flag {
        return posterior;
    }
    let centre = posterior.theta_deg;
    let reach = 4.0 * (local_sigma(table, centre, noise_sigma_db) + posterior.sigma_deg);
    let nearest = table
        .crossings(alpha, centre - reach, centre + reach)
        .into_iter()
        .min_by(|a, b| {
            let (da, db) = (a - centre, b - centre);
            da.abs().total_cmp(&db.abs()).then(db.total_cmp(&da))
        });
    match nearest {
        Some(theta) => AngleEstimate {
            theta_deg: wrap_deg(theta),
            sigma_deg: local_sigma(table, theta, noise_sigma_db),
            flat_flag: table.is_flat_at(theta),
        },
        None => posterior,
    }
}

/// Runs the filter over `alpha`, returning one angle marginal per sample and
/// the tracking loss, if any, that cut the run short.
fn filter_pass(
    table: &CalibrationTable,
    alpha: &[f64],
    start: &AngleEstimate,
    cfg: &DecodeConfig,
    dt: f64,
) -> (Vec<Arc>, Option<Error>) {
    let mut tracker = Tracker::new(table, cfg, dt, start);
    let mut arcs = Vec::with_capacity(alpha.len());
    for (k, &a) in alpha.iter().enumerate() {
        match tracker.advance(a, k == 0) {
            Ok(()) => arcs.push(tracker.arc()),
            Err(Error::TrackingLoss { reason, .. }) => return (arcs, Some(Error::TrackingLoss { sample: k, reason })),
            Err(other) => return (arcs, Some(other)),
        }
    }
    (arcs, None)
}

/// Tracks a whole trace. Without `init`, the start angle is acquired from the
/// first 90 degrees of motion at the configured velocity.
pub fn decode_trace(
    table: &CalibrationTable,
    trace: &AttenuationTrace,
    init: Option<AngleEstimate>,
    cfg: &DecodeConfig,
) -> Result<DecodedTrace> {
    trace.validate()?;
    if trace.is_empty() {
        return Ok(DecodedTrace::default());
    }
    let start = match init {
        Some(e) => e,
        None => {
            let dt = trace.dt_s().unwrap_or(0.0);
            if dt <= 0.0 {
                return Err(Error::Argument("cannot acquire a start angle from one sample".into()));
            }
            let needed = (MIN_INIT_SPAN_DEG / (cfg.velocity_deg_per_s * dt)).ceil() as usize + 1;
            if trace.len() < needed {
                return Err(Error::Argument(format!(
                    "trace has {} samples, acquisition needs {needed}",
                    trace.len()
                )));
            }
            decode_init(table, &trace.slice(0, needed), cfg)?
        }
    };
    match track_trace(table, trace, start, cfg) {
        (decoded, None) => Ok(decoded),
        (_, Some(err)) => Err(err),
    }
}

/// Tracks from a known start angle. On loss of track the samples decoded so far
/// are returned together with the error.
pub fn track_trace(
    table: &CalibrationTable,
    trace: &AttenuationTrace,
    start: AngleEstimate,
    cfg: &DecodeConfig,
) -> (DecodedTrace, Option<Error>) {
    let dt = trace.dt_s().unwrap_or(0.0);
    let bins = table.len() * BINS_PER_CELL;
    let (forward, failure) = filter_pass(table, &trace.alpha_db, &start, cfg, dt);
    let mut posterior: Vec<AngleEstimate> = forward.iter().map(|a| a.estimate(bins, table)).collect();
    if cfg.smoothing && failure.is_none() {
        if let Some(&end) = posterior.last() {
            // Time reversal turns the hinted direction around.
            let reversed_cfg = DecodeConfig {
                direction_hint: -cfg.direction_hint.signum(),
                ..cfg.clone()
            };
            let reversed: Vec<f64> = trace.alpha_db.iter().rev().copied().collect();
            let (backward, _) = filter_pass(table, &reversed, &end, &reversed_cfg, dt);
            let n = forward.len();
            for (i, b) in backward.iter().enumerate() {
                let k = n - 1 - i;
                if let Some(joint) = forward[k].product(b, bins) {
                    posterior[k] = joint.estimate(bins, table);
                }
            }
        }
    }
    let estimates: Vec<AngleEstimate> = posterior
        .into_iter()
        .zip(&trace.alpha_db)
        .map(|(p, &a)| refine(table, p, a, cfg.noise_sigma_db))
        .collect();
    let mut unwrapped = Vec::with_capacity(estimates.len());
    let mut base = start.theta_deg;
    for e in &estimates {
        base += signed_delta(base, e.theta_deg);
        unwrapped.push(base);
    }
    let n = estimates.len();
    (
        DecodedTrace {
            t_s: trace.t_s[..n].to_vec(),
            estimates,
            unwrapped_deg: unwrapped,
        },
        failure,
    )
}

/// Shortest signed rotation from `from` to `to`, in (-180, 180].
pub fn signed_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

pub fn write_calibration<W: Write>(out: W, table: &CalibrationTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["theta_deg", "alpha_dB", "slope_dB_per_deg", "flat"])?;
    for (i, theta) in table.theta_grid_deg().iter().enumerate() {
        wtr.write_record([
            theta.to_string(),
            table.alpha_db[i].to_string(),
            table.slope_db_per_deg[i].to_string(),
            u8::from(table.flat_mask[i]).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_calibration_file(path: &Path, table: &CalibrationTable) -> Result<()> {
    write_calibration(std::fs::File::create(path)?, table)
}

/// Reads a calibration CSV. Slopes and flags are recomputed from the values and
/// must agree with the stored columns.
pub fn read_calibration(path: &Path) -> Result<CalibrationTable> {
    read_calibration_from(std::fs::File::open(path)?)
}

pub fn read_calibration_from<R: std::io::Read>(input: R) -> Result<CalibrationTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let expected = ["theta_deg", "alpha_dB", "slope_dB_per_deg", "flat"];
    if rdr.headers()?.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut theta = Vec::new();
    let mut alpha = Vec::new();
    let mut last_line = 1;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let vals = parse_row(&record, 4, line)?;
        if let Some(&t) = theta.last() {
            if vals[0] <= t {
                return Err(Error::Parse {
                    line,
                    message: "angles must increase".into(),
                });
            }
        }
        theta.push(vals[0]);
        alpha.push(vals[1]);
        last_line = line;
    }
    if theta.len() < 4 {
        return Err(Error::Parse {
            line: last_line,
            message: "calibration needs at least four rows".into(),
        });
    }
    let step = theta[1] - theta[0];
    for (i, w) in theta.windows(2).enumerate() {
        if ((w[1] - w[0]) - step).abs() > 1e-6 * step {
            return Err(Error::Parse {
                line: i as u64 + 3,
                message: "angle grid is not uniform".into(),
            });
        }
    }
    let table = CalibrationTable::from_samples(step, alpha).map_err(|e| Error::Parse {
        line: last_line,
        message: e.to_string(),
    })?;
    if table.is_degenerate() {
        return Err(Error::Calibration(
            "no angular information: attenuation is constant".into(),
        ));
    }
    Ok(table)
}

pub fn write_decoded<W: Write>(out: W, decoded: &DecodedTrace) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["t_s", "theta_deg", "sigma_deg", "flat"])?;
    for ((t, e), u) in decoded.t_s.iter().zip(&decoded.estimates).zip(&decoded.unwrapped_deg) {
        wtr.write_record([
            t.to_string(),
            u.to_string(),
            e.sigma_deg.to_string(),
            u8::from(e.flat_flag).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_decoded_file(path: &Path, decoded: &DecodedTrace) -> Result<()> {
    write_decoded(std::fs::File::create(path)?, decoded)
}
