//! Optical response of the modified circulator.
//!
//! Each Faraday rotator converts the residual axial field `B_s - B_add` into
//! polarisation rotation, and the displacement prisms turn that rotation into
//! loss. With a reflector on port 2 the light crosses both rotators twice, which
//! doubles the loss. The Kovar half-shell scales the added field seen by the
//! rotators by `1 - sigma(theta)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the circulator body along the optical axis, cm.
pub const DEVICE_LENGTH_CM: f64 = 5.0;

/// One Gaussian lobe of the internal bias-field profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldLobe {
    pub center_cm: f64,
    /// Kernel amplitude, mT (signed). Neighbouring lobes overlap, so this is not
    /// the profile value at `center_cm`.
    pub peak_mt: f64,
    /// Gaussian standard deviation, cm.
    pub width_cm: f64,
}

/// Parametric model of the embedded magnets' axial field `B_s(l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FieldLobe>", into = "Vec<FieldLobe>")]
pub struct InternalFieldProfile {
    lobes: Vec<FieldLobe>,
}

impl TryFrom<Vec<FieldLobe>> for InternalFieldProfile {
    type Error = Error;

    fn try_from(lobes: Vec<FieldLobe>) -> Result<Self> {
        Self::new(lobes)
    }
}

impl From<InternalFieldProfile> for Vec<FieldLobe> {
    fn from(p: InternalFieldProfile) -> Self {
        p.lobes
    }
}

impl InternalFieldProfile {
    pub fn new(lobes: Vec<FieldLobe>) -> Result<Self> {
        for lobe in &lobes {
            if !(0.0..=DEVICE_LENGTH_CM).contains(&lobe.center_cm) {
                return Err(Error::Argument(format!(
                    "lobe center {} cm outside the device [0, {DEVICE_LENGTH_CM}] cm",
                    lobe.center_cm
                )));
            }
            if !(lobe.width_cm > 0.0) || !lobe.peak_mt.is_finite() {
                return Err(Error::Argument(format!("invalid lobe {lobe:?}")));
            }
        }
        if lobes.windows(2).any(|w| w[1].center_cm <= w[0].center_cm) {
            return Err(Error::Argument("lobe centers must be strictly increasing".into()));
        }
        Ok(Self { lobes })
    }

    /// Lobes of common `width_cm` whose summed profile passes exactly through
    /// each `(center_cm, value_mt)` target.
    pub fn fitted(targets: &[(f64, f64)], width_cm: f64) -> Result<Self> {
        let n = targets.len();
        let kernel = |l: f64, c: f64| (-(l - c).powi(2) / (2.0 * width_cm * width_cm)).exp();
        let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| kernel(targets[i].0, targets[j].0));
        let rhs = nalgebra::DVector::from_iterator(n, targets.iter().map(|t| t.1));
        let amps = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Argument("lobe targets are not independent".into()))?;
        Self::new(
            targets
                .iter()
                .zip(amps.iter())
                .map(|(&(center_cm, _), &peak_mt)| FieldLobe {
                    center_cm,
                    peak_mt,
                    width_cm,
                })
                .collect(),
        )
    }

    pub fn lobes(&self) -> &[FieldLobe] {
        &self.lobes
    }

    /// Sum of the lobe kernels at `l_cm`.
    pub fn field_at(&self, l_cm: f64) -> Result<f64> {
        if !(0.0..=DEVICE_LENGTH_CM).contains(&l_cm) {
            return Err(Error::Argument(format!("l = {l_cm} cm is outside the device")));
        }
        Ok(self
            .lobes
            .iter()
            .map(|lobe| lobe.peak_mt * (-(l_cm - lobe.center_cm).powi(2) / (2.0 * lobe.width_cm.powi(2))).exp())
            .sum())
    }
}

impl Default for InternalFieldProfile {
    /// Lobes pinned to the surface scan: +4.8 mT at 2 cm and -3.4 mT at 3 cm.
    fn default() -> Self {
        Self::fitted(&[(2.0, 4.8), (3.0, -3.4)], 0.4).expect("default lobes are well conditioned")
    }
}

pub fn internal_field_at(profile: &InternalFieldProfile, l_cm: f64) -> Result<f64> {
    profile.field_at(l_cm)
}

/// Kovar half-shell shielding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldModel {
    /// Fraction of the field removed when the source faces the shell's center.
    pub sigma0: f64,
    /// Azimuth interval `[start, end)` in degrees covered by the shell.
    pub shielded_azimuth_deg: [f64; 2],
}

impl Default for ShieldModel {
    fn default() -> Self {
        Self {
            sigma0: 0.42,
            shielded_azimuth_deg: [40.0, 220.0],
        }
    }
}

impl ShieldModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma0) {
            return Err(Error::Argument(format!(
                "sigma0 must lie in [0, 1], got {}",
                self.sigma0
            )));
        }
        let width = self.azimuth_width_deg();
        if !(width > 0.0 && width < 360.0) {
            return Err(Error::Argument(format!(
                "shielded azimuth width must be in (0, 360) deg, got {width}"
            )));
        }
        Ok(())
    }

    fn azimuth_width_deg(&self) -> f64 {
        let [start, end] = self.shielded_azimuth_deg;
        if end > start {
            end - start
        } else {
            end + 360.0 - start
        }
    }

    /// Center of the shielded interval, degrees in [0, 360).
    pub fn shielded_center_deg(&self) -> f64 {
        wrap_deg(self.shielded_azimuth_deg[0] + 0.5 * self.azimuth_width_deg())
    }

    /// Center of the open side, opposite the shielded center.
    pub fn unshielded_center_deg(&self) -> f64 {
        wrap_deg(self.shielded_center_deg() + 180.0)
    }

    /// Raised-cosine taper: `sigma0` at the shielded center, zero opposite it.
    pub fn ratio(&self, theta_deg: f64) -> f64 {
        let phase = (wrap_deg(theta_deg) - self.shielded_center_deg()).to_radians();
        0.5 * self.sigma0 * (1.0 + phase.cos())
    }
}

pub fn shielding_ratio(shield: &ShieldModel, theta_deg: f64) -> f64 {
    shield.ratio(theta_deg)
}

/// Wraps an angle into [0, 360).
pub fn wrap_deg(theta: f64) -> f64 {
    let w = theta.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs.
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// How per-rotator polarisation rotation is turned into loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseMode {
    /// Loss proportional to rotation.
    #[default]
    Linear,
    /// Malus-law loss `-10 log10(cos^2 phi)`, where the rotation `phi` reaches
    /// 90 degrees at the field offset that would saturate the linear response.
    Malus,
}

/// Attenuation in dB relative to the sweep's reference state.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AttenuationSample {
    pub alpha_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirculatorModel {
    pub internal_field: InternalFieldProfile,
    /// Axial positions of the two YIG rotators, cm.
    pub yig_sites_cm: [f64; 2],
    pub shield: ShieldModel,
    /// Loss per mT of residual field, per rotator, per pass (dB/mT).
    pub lumped_k_db_per_mt: f64,
    pub saturation_alpha_max_db: f64,
    pub device_diameter_mm: f64,
    pub response: ResponseMode,
}

/// Maximum distance between a rotator and the nearest internal-field lobe, cm.
const SITE_LOBE_TOLERANCE_CM: f64 = 0.3;

impl Default for CirculatorModel {
    fn default() -> Self {
        Self {
            internal_field: InternalFieldProfile::default(),
            yig_sites_cm: [2.0, 3.0],
            shield: ShieldModel::default(),
            lumped_k_db_per_mt: 1.0,
            saturation_alpha_max_db: 30.0,
            device_diameter_mm: 4.5,
            response: ResponseMode::Linear,
        }
    }
}

impl CirculatorModel {
    pub fn validate(&self) -> Result<()> {
        self.shield.validate()?;
        if !self.lumped_k_db_per_mt.is_finite() {
            return Err(Error::Argument("lumped K must be finite".into()));
        }
        if !(self.saturation_alpha_max_db > 0.0) {
            return Err(Error::Argument("saturation attenuation must be > 0 dB".into()));
        }
        if !(self.device_diameter_mm > 0.0) {
            return Err(Error::Argument("device diameter must be > 0".into()));
        }
        for &site in &self.yig_sites_cm {
            if !(0.0..=DEVICE_LENGTH_CM).contains(&site) {
                return Err(Error::Argument(format!("YIG site {site} cm outside the device")));
            }
            let near_lobe = self
                .internal_field
                .lobes()
                .iter()
                .any(|lobe| (lobe.center_cm - site).abs() <= SITE_LOBE_TOLERANCE_CM);
            if !near_lobe {
                return Err(Error::Argument(format!(
                    "YIG site {site} cm is not within {SITE_LOBE_TOLERANCE_CM} cm of an internal-field lobe"
                )));
            }
        }
        Ok(())
    }

    pub fn with_lumped_k(&self, k: f64) -> Self {
        Self {
            lumped_k_db_per_mt: k,
            ..self.clone()
        }
    }

    /// Internal field at each rotator, mT.
    pub fn internal_field_at_sites(&self) -> [f64; 2] {
        self.yig_sites_cm.map(|l| {
            self.internal_field
                .field_at(l)
                .expect("sites validated inside the device")
        })
    }

    /// Unclamped single-pass loss of each rotator for the given added axial field.
    pub fn rotator_losses(&self, b_add_axial_mt: [f64; 2]) -> [f64; 2] {
        let b_s = self.internal_field_at_sites();
        [0, 1].map(|i| self.rotator_loss(b_s[i] - b_add_axial_mt[i]))
    }

    fn rotator_loss(&self, residual_mt: f64) -> f64 {
        let linear = (self.lumped_k_db_per_mt * residual_mt).abs();
        match self.response {
            ResponseMode::Linear => linear,
            ResponseMode::Malus => {
                let phi = 0.5 * PI * (linear / self.saturation_alpha_max_db).min(1.0);
                let transmission = phi.cos().powi(2);
                if transmission <= 0.0 {
                    self.saturation_alpha_max_db
                } else {
                    (-10.0 * transmission.log10()).min(self.saturation_alpha_max_db)
                }
            }
        }
    }

    fn clamp(&self, alpha_db: f64) -> AttenuationSample {
        AttenuationSample {
            alpha_db: alpha_db.min(self.saturation_alpha_max_db),
        }
    }

    /// One pass through both rotators.
    pub fn single_pass_attenuation(&self, b_add_axial_mt: [f64; 2]) -> AttenuationSample {
        let [a, b] = self.rotator_losses(b_add_axial_mt);
        self.clamp(a + b)
    }

    /// Reflected (double-pass) configuration: twice the single-pass loss.
    pub fn double_pass_attenuation(&self, b_add_axial_mt: [f64; 2]) -> AttenuationSample {
        let [a, b] = self.rotator_losses(b_add_axial_mt);
        self.clamp(2.0 * (a + b))
    }

    /// Double-pass loss with the added field reduced by the Kovar shielding at rotor angle `theta_deg`.
    pub fn shielded_attenuation(&self, b_add_axial_mt: [f64; 2], theta_deg: f64) -> AttenuationSample {
        let keep = 1.0 - self.shield.ratio(theta_deg);
        self.double_pass_attenuation(b_add_axial_mt.map(|b| keep * b))
    }

    /// Field a surface magnetometer would read at `l_cm` with the probe at azimuth `theta_deg`.
    pub fn surface_field_at(&self, l_cm: f64, theta_deg: f64) -> Result<f64> {
        Ok((1.0 - self.shield.ratio(theta_deg)) * self.internal_field.field_at(l_cm)?)
    }
}
