//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Every section is optional and falls back to the module defaults. Unknown
//! keys are rejected so that a misspelt parameter cannot silently fall back to
//! its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circulator::{CirculatorModel, InternalFieldProfile, ResponseMode, ShieldModel};
use crate::encoder::{calibrate_lumped_k, DecodeConfig};
use crate::error::{Error, Result};
use crate::jointsim::JointProfile;
use crate::placement::PlacementConfig;
use crate::sweep::{RotorAssembly, RotorParams, SweepConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub circulator: CirculatorSection,
    pub rotor: RotorParams,
    pub sweep: SweepConfig,
    pub encoder: EncoderSection,
    pub placement: PlacementConfig,
    pub joint: JointSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CirculatorSection {
    pub yig_sites_cm: [f64; 2],
    /// When absent, K is fitted so the resolution metric at the configured
    /// rotor meets `encoder.target_resolution_deg`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lumped_k_db_per_mt: Option<f64>,
    pub saturation_alpha_max_db: f64,
    pub device_diameter_mm: f64,
    pub response: ResponseMode,
    pub shield: ShieldModel,
    pub internal_field: InternalFieldProfile,
}

impl Default for CirculatorSection {
    fn default() -> Self {
        let m = CirculatorModel::default();
        Self {
            yig_sites_cm: m.yig_sites_cm,
            lumped_k_db_per_mt: None,
            saturation_alpha_max_db: m.saturation_alpha_max_db,
            device_diameter_mm: m.device_diameter_mm,
            response: m.response,
            shield: m.shield,
            internal_field: m.internal_field,
        }
    }
}

impl CirculatorSection {
    /// The model with K as configured, or the placeholder default K when unset.
    pub fn model(&self) -> CirculatorModel {
        let base = CirculatorModel::default();
        CirculatorModel {
            internal_field: self.internal_field.clone(),
            yig_sites_cm: self.yig_sites_cm,
            shield: self.shield,
            lumped_k_db_per_mt: self.lumped_k_db_per_mt.unwrap_or(base.lumped_k_db_per_mt),
            saturation_alpha_max_db: self.saturation_alpha_max_db,
            device_diameter_mm: self.device_diameter_mm,
            response: self.response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub grid_step_deg: f64,
    pub target_resolution_deg: f64,
    pub decode: DecodeConfig,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            grid_step_deg: 0.1,
            target_resolution_deg: 0.3,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSection {
    pub increments_deg: Vec<f64>,
    pub dwell_s: f64,
    pub move_velocity_deg_per_s: f64,
    pub accel_deg_per_s2: f64,
    pub dt_s: f64,
    pub noise_sigma_db: f64,
    pub runs: usize,
    /// Protractor count for the reference readings; 0 disables quantisation.
    pub protractor_step_deg: f64,
}

impl Default for JointSection {
    fn default() -> Self {
        let p = JointProfile::default();
        Self {
            increments_deg: p.increments_deg,
            dwell_s: p.dwell_s,
            move_velocity_deg_per_s: p.move_velocity_deg_per_s,
            accel_deg_per_s2: p.accel_deg_per_s2,
            dt_s: 0.005,
            noise_sigma_db: 0.017,
            runs: 30,
            protractor_step_deg: 1.0,
        }
    }
}

impl JointSection {
    pub fn profile(&self) -> JointProfile {
        JointProfile {
            increments_deg: self.increments_deg.clone(),
            dwell_s: self.dwell_s,
            move_velocity_deg_per_s: self.move_velocity_deg_per_s,
            accel_deg_per_s2: self.accel_deg_per_s2,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap("circulator", self.circulator.model().validate())?;
        if let Some(k) = self.circulator.lumped_k_db_per_mt {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Config("[circulator] lumped_k_db_per_mt must be > 0".into()));
            }
        }
        wrap("sweep", self.sweep.validate())?;
        wrap("encoder", self.encoder.decode.validate())?;
        if !(self.encoder.grid_step_deg > 0.0) || !(self.encoder.target_resolution_deg > 0.0) {
            return Err(Error::Config(
                "[encoder] grid step and target resolution must be > 0".into(),
            ));
        }
        wrap("joint", self.joint.profile().validate())?;
        if !(self.joint.dt_s > 0.0) || !(self.joint.noise_sigma_db >= 0.0) || self.joint.runs == 0 {
            return Err(Error::Config("[joint] dt_s and runs must be > 0, noise >= 0".into()));
        }
        let p = &self.placement;
        if !(p.step_mm > 0.0) || !(p.d_min_mm <= p.d_max_mm) {
            return Err(Error::Config(
                "[placement] needs step_mm > 0 and d_min_mm <= d_max_mm".into(),
            ));
        }
        Ok(())
    }

    /// The configured circulator, with K fitted when the config leaves it out.
    pub fn resolve_model(&self) -> Result<CirculatorModel> {
        let model = self.circulator.model();
        if self.circulator.lumped_k_db_per_mt.is_some() {
            return Ok(model);
        }
        let assembly = RotorAssembly::new(&self.rotor, &model)?;
        calibrate_lumped_k(
            &model,
            &assembly,
            self.encoder.decode.noise_sigma_db,
            self.encoder.target_resolution_deg,
            self.encoder.grid_step_deg,
        )
    }

    /// Copy of the config with K pinned to the value a run actually used.
    pub fn effective(&self, model: &CirculatorModel) -> Self {
        let mut cfg = self.clone();
        cfg.circulator.lumped_k_db_per_mt = Some(model.lumped_k_db_per_mt);
        cfg
    }
}
