//! Axial-offset sweep for the rotor magnet pair.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circulator::CirculatorModel;
use crate::encoder::{build_calibration, resolution_metric};
use crate::error::{Error, Result};
use crate::sweep::{RotorAssembly, RotorParams, MAX_DELTA_D_MM};

pub const OBJECTIVE: &str = "mean_sigma_over_slope";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementConfig {
    pub d_min_mm: f64,
    pub d_max_mm: f64,
    pub step_mm: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            d_min_mm: 0.0,
            d_max_mm: 5.0,
            step_mm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSweepResult {
    pub delta_d_grid_mm: Vec<f64>,
    /// Infinite where the calibration carries no angular information.
    pub resolution_deg: Vec<f64>,
    pub best_delta_d_mm: f64,
    pub best_resolution_deg: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    best_delta_d_mm: f64,
    best_resolution_deg: f64,
    objective: &'a str,
}

/// Offsets `d_min, d_min + step, ...` up to `d_max` inclusive.
pub fn delta_d_grid(d_min: f64, d_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(d_min <= d_max) {
        return Err(Error::Argument(format!("invalid grid [{d_min}, {d_max}] step {step}")));
    }
    if d_min < 0.0 || d_max > MAX_DELTA_D_MM {
        return Err(Error::Argument(format!("offsets must lie in [0, {MAX_DELTA_D_MM}] mm")));
    }
    let count = ((d_max - d_min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| d_min + i as f64 * step).collect())
}

/// Resolution metric for one offset; degenerate or invalid geometry scores infinity.
pub fn resolution_at(
    model: &CirculatorModel,
    template: &RotorParams,
    delta_d_mm: f64,
    noise_sigma_db: f64,
    grid_step_deg: f64,
) -> f64 {
    let params = RotorParams {
        delta_d_mm,
        ..template.clone()
    };
    RotorAssembly::new(&params, model)
        .and_then(|a| build_calibration(model, &a, grid_step_deg))
        .and_then(|t| resolution_metric(&t, noise_sigma_db))
        .unwrap_or(f64::INFINITY)
}

/// Evaluates every offset of the grid against one fixed model and picks the
/// smallest resolution, preferring the smaller offset on ties.
pub fn sweep_delta_d(
    model: &CirculatorModel,
    template: &RotorParams,
    grid_mm: &[f64],
    noise_sigma_db: f64,
    grid_step_deg: f64,
) -> Result<PlacementSweepResult> {
    if grid_mm.is_empty() {
        return Err(Error::Argument("empty offset grid".into()));
    }
    let resolution: Vec<f64> = grid_mm
        .par_iter()
        .map(|&d| resolution_at(model, template, d, noise_sigma_db, grid_step_deg))
        .collect();
    let (best_idx, best) = argmin_smallest_offset(grid_mm, &resolution);
    if !best.is_finite() {
        return Err(Error::Calibration(
            "every offset yields a degenerate calibration".into(),
        ));
    }
    Ok(PlacementSweepResult {
        delta_d_grid_mm: grid_mm.to_vec(),
        resolution_deg: resolution,
        best_delta_d_mm: grid_mm[best_idx],
        best_resolution_deg: best,
    })
}

fn argmin_smallest_offset(grid: &[f64], values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for i in 1..values.len() {
        let better = values[i] < values[best] || (values[i] == values[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    (best, values[best])
}

pub fn write_sweep_csv<W: Write>(out: W, result: &PlacementSweepResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["delta_d_mm", "resolution_deg"])?;
    for (d, r) in result.delta_d_grid_mm.iter().zip(&result.resolution_deg) {
        wtr.write_record([d.to_string(), r.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn summary_json(result: &PlacementSweepResult) -> Result<String> {
    serde_json::to_string_pretty(&Summary {
        best_delta_d_mm: result.best_delta_d_mm,
        best_resolution_deg: result.best_resolution_deg,
        objective: OBJECTIVE,
    })
    .map_err(|e| Error::Argument(e.to_string()))
}
