//! Robot-joint experiment: commanded increments, encoder readout, error statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{track_trace, AngleEstimate, CalibrationTable, DecodeConfig, DecodedTrace};
use crate::error::{Error, Result};
use crate::sweep::{synthesize_path, AttenuationTrace, ResponseCurve};

/// Speeds over which the encoder response has been characterised, deg/s.
pub const VALIDATED_VELOCITY_DEG_PER_S: (f64, f64) = (135.0, 370.0);

/// Fraction of each dwell discarded before averaging.
pub const SETTLING_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointProfile {
    /// Signed commanded steps, degrees.
    pub increments_deg: Vec<f64>,
    pub dwell_s: f64,
    pub move_velocity_deg_per_s: f64,
    pub accel_deg_per_s2: f64,
}

impl Default for JointProfile {
    fn default() -> Self {
        Self {
            increments_deg: vec![10.0; 36],
            dwell_s: 0.5,
            move_velocity_deg_per_s: 250.0,
            accel_deg_per_s2: 10_000.0,
        }
    }
}

impl JointProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell_s > 0.0) || !(self.move_velocity_deg_per_s > 0.0) || !(self.accel_deg_per_s2 > 0.0) {
            return Err(Error::Argument("dwell, velocity and acceleration must be > 0".into()));
        }
        if self.increments_deg.iter().any(|d| !d.is_finite()) {
            return Err(Error::Argument("increments must be finite".into()));
        }
        let (lo, hi) = VALIDATED_VELOCITY_DEG_PER_S;
        if !(lo..=hi).contains(&self.move_velocity_deg_per_s) {
            log::warn!(
                "move velocity {} deg/s is outside the validated band [{lo}, {hi}] deg/s",
                self.move_velocity_deg_per_s
            );
        }
        Ok(())
    }

    /// Sign shared by every nonzero increment, or 0 when the profile reverses.
    pub fn direction(&self) -> i8 {
        let forward = self.increments_deg.iter().any(|&d| d > 0.0);
        let backward = self.increments_deg.iter().any(|&d| d < 0.0);
        match (forward, backward) {
            (true, false) => 1,
            (false, true) => -1,
            _ => 0,
        }
    }

    /// Commanded cumulative angle after each increment.
    pub fn targets_deg(&self) -> Vec<f64> {
        self.increments_deg
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }

    /// Duration of a trapezoidal (or triangular) move of `distance` degrees.
    fn move_time(&self, distance: f64) -> f64 {
        let (v, a) = (self.move_velocity_deg_per_s, self.accel_deg_per_s2);
        if distance >= v * v / a {
            distance / v + v / a
        } else {
            2.0 * (distance / a).sqrt()
        }
    }

    /// Distance covered `t` seconds into a move of `distance` degrees.
    fn move_position(&self, distance: f64, t: f64) -> f64 {
        let (v, a) = (self.move_velocity_deg_per_s, self.accel_deg_per_s2);
        let total = self.move_time(distance);
        let t = t.clamp(0.0, total);
        let (t_acc, peak) = if distance >= v * v / a {
            (v / a, v)
        } else {
            let t_acc = (distance / a).sqrt();
            (t_acc, a * t_acc)
        };
        if t < t_acc {
            0.5 * a * t * t
        } else if t <= total - t_acc {
            0.5 * a * t_acc * t_acc + peak * (t - t_acc)
        } else {
            let rem = total - t;
            distance - 0.5 * a * rem * rem
        }
    }
}

/// Sampled joint trajectory with the dwell windows used for averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t_s: Vec<f64>,
    pub theta_deg: Vec<f64>,
    /// Sample ranges `[start, end)` averaged for each increment.
    pub dwell_windows: Vec<(usize, usize)>,
}

/// Home dwell, then for each increment a move followed by a dwell.
pub fn trajectory(profile: &JointProfile, dt_s: f64) -> Result<Trajectory> {
    profile.validate()?;
    if !(dt_s > 0.0) {
        return Err(Error::Argument("sampling interval must be > 0".into()));
    }
    // (start time, start angle, signed distance, move duration)
    let mut segments = Vec::new();
    let mut t = profile.dwell_s;
    let mut theta = 0.0;
    let mut settled = Vec::new();
    for &step in &profile.increments_deg {
        let duration = profile.move_time(step.abs());
        segments.push((t, theta, step, duration));
        t += duration;
        theta += step;
        settled.push((t + SETTLING_FRACTION * profile.dwell_s, t + profile.dwell_s));
        t += profile.dwell_s;
    }
    let n = (t / dt_s + 1e-9).floor() as usize + 1;
    let t_s: Vec<f64> = (0..n).map(|k| k as f64 * dt_s).collect();
    let mut seg = 0;
    let theta_deg = t_s
        .iter()
        .map(|&time| {
            while seg + 1 < segments.len() && time >= segments[seg + 1].0 {
                seg += 1;
            }
            match segments.get(seg) {
                Some(&(start, from, step, _)) if time >= start => {
                    from + step.signum() * profile.move_position(step.abs(), time - start)
                }
                _ => 0.0,
            }
        })
        .collect();
    let index = |time: f64| ((time / dt_s) - 1e-9).ceil().max(0.0) as usize;
    let dwell_windows = settled
        .iter()
        .map(|&(from, to)| (index(from), (index(to) + 1).min(n)))
        .collect();
    Ok(Trajectory {
        t_s,
        theta_deg,
        dwell_windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    /// Dwell-averaged decoded angle minus commanded angle, per completed increment.
    pub per_increment_error_deg: Vec<f64>,
    pub mean_abs_error_deg: f64,
    pub std_error_deg: f64,
    pub flat_fraction: f64,
    /// Set when tracking was lost; the lists above stop at that point.
    pub diagnostic: Option<String>,
}

impl JointReport {
    fn from_errors(errors: Vec<f64>, flat_fraction: f64, diagnostic: Option<String>) -> Self {
        let n = errors.len();
        let (mean_abs, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = errors.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            (errors.iter().map(|e| e.abs()).sum::<f64>() / n as f64, var.sqrt())
        };
        Self {
            per_increment_error_deg: errors,
            mean_abs_error_deg: mean_abs,
            std_error_deg: std,
            flat_fraction,
            diagnostic,
        }
    }
}

/// Everything one simulated run produces.
#[derive(Debug, Clone)]
pub struct JointRun {
    pub report: JointReport,
    pub trace: AttenuationTrace,
    pub decoded: DecodedTrace,
}

/// Runs the profile once: synthesises the trace, decodes it from the home
/// position and compares dwell averages with the commanded angles.
pub fn simulate_joint(
    curve: &ResponseCurve,
    table: &CalibrationTable,
    profile: &JointProfile,
    dt_s: f64,
    noise_sigma_db: f64,
    seed: u64,
) -> Result<JointRun> {
    let path = trajectory(profile, dt_s)?;
    let trace = synthesize_path(curve, path.t_s.clone(), path.theta_deg.clone(), noise_sigma_db, seed)?;
    let cfg = DecodeConfig {
        velocity_deg_per_s: profile.move_velocity_deg_per_s,
        noise_sigma_db: noise_sigma_db.max(f64::EPSILON),
        direction_hint: profile.direction(),
        smoothing: true,
        ..Default::default()
    };
    let home = AngleEstimate {
        theta_deg: 0.0,
        sigma_deg: table.grid_step_deg(),
        flat_flag: table.is_flat_at(0.0),
    };
    let (decoded, failure) = track_trace(table, &trace, home, &cfg);
    let decoded_len = decoded.unwrapped_deg.len();
    let targets = profile.targets_deg();
    let errors: Vec<f64> = path
        .dwell_windows
        .iter()
        .zip(&targets)
        .take_while(|((_, end), _)| *end <= decoded_len)
        .map(|(&(start, end), target)| {
            let window = &decoded.unwrapped_deg[start..end];
            window.iter().sum::<f64>() / window.len() as f64 - target
        })
        .collect();
    let flagged = decoded.estimates.iter().filter(|e| e.flat_flag).count();
    let flat_fraction = if decoded_len == 0 {
        0.0
    } else {
        flagged as f64 / decoded_len as f64
    };
    let report = JointReport::from_errors(errors, flat_fraction, failure.map(|e| e.to_string()));
    Ok(JointRun { report, trace, decoded })
}

/// Independent seeded runs; run `i` uses seed `seed + i`.
pub fn monte_carlo(
    curve: &ResponseCurve,
    table: &CalibrationTable,
    profile: &JointProfile,
    dt_s: f64,
    noise_sigma_db: f64,
    seed: u64,
    runs: usize,
) -> Result<Vec<JointReport>> {
    (0..runs)
        .into_par_iter()
        .map(|i| {
            simulate_joint(curve, table, profile, dt_s, noise_sigma_db, seed.wrapping_add(i as u64)).map(|r| r.report)
        })
        .collect()
}

/// Simulated protractor readings of the commanded angles: quantised to
/// `quantization_deg` with a uniform error of up to one count either way.
pub fn protractor_reference(profile: &JointProfile, quantization_deg: f64, seed: u64) -> Vec<f64> {
    let truth = profile.targets_deg();
    if quantization_deg <= 0.0 {
        return truth;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth
        .iter()
        .map(|t| {
            let counts = (t / quantization_deg).round() + rng.random_range(-1i32..=1) as f64;
            counts * quantization_deg
        })
        .collect()
}
