//! Printing materials and their NIR absorption.
//!
//! Absorption scales linearly with infill: a part printed at `infill` percent
//! absorbs like `mu_solid * infill / 100`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GREEN_PLA: &str = "green-pla";
pub const GREY_PLA: &str = "grey-pla";

/// Absorption of solid green PLA, 1/mm.
pub const GREEN_MU_SOLID: f64 = 0.35;
/// Absorption of solid grey PLA, 1/mm.
pub const GREY_MU_SOLID: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    /// Percent, 0 = hollow, 100 = solid.
    pub infill: f64,
    /// Absorption coefficient at 100% infill, 1/mm.
    pub mu_solid: f64,
}

impl MaterialSpec {
    pub fn new(name: impl Into<String>, infill: f64, mu_solid: f64) -> Result<Self> {
        let m = Self {
            name: name.into(),
            infill,
            mu_solid,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.infill) {
            return Err(Error::Config(format!(
                "{}: infill {} outside [0, 100]",
                self.name, self.infill
            )));
        }
        if !(self.mu_solid >= 0.0 && self.mu_solid.is_finite()) {
            return Err(Error::Config(format!(
                "{}: mu_solid {} must be non-negative",
                self.name, self.mu_solid
            )));
        }
        Ok(())
    }
}

/// Effective absorption coefficient of a printed part, 1/mm.
pub fn effective_mu(m: &MaterialSpec) -> f64 {
    m.mu_solid * m.infill / 100.0
}

/// Material assignment for the three tissue classes of a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub bone: MaterialSpec,
    pub tissue: MaterialSpec,
    pub vein: MaterialSpec,
}

/// Green PLA for bone (sparse) and soft tissue (dense), solid grey PLA for
/// veins.
pub fn default_palette() -> Palette {
    Palette {
        bone: MaterialSpec {
            name: GREEN_PLA.into(),
            infill: 20.0,
            mu_solid: GREEN_MU_SOLID,
        },
        tissue: MaterialSpec {
            name: GREEN_PLA.into(),
            infill: 60.0,
            mu_solid: GREEN_MU_SOLID,
        },
        vein: MaterialSpec {
            name: GREY_PLA.into(),
            infill: 100.0,
            mu_solid: GREY_MU_SOLID,
        },
    }
}

impl Default for Palette {
    fn default() -> Self {
        default_palette()
    }
}

impl Palette {
    pub fn validate(&self) -> Result<()> {
        self.bone.validate()?;
        self.tissue.validate()?;
        self.vein.validate()
    }
}

/// Mean transmitted intensity of a step-density cylinder, per density.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    samples: Vec<(f64, f64)>,
}

impl CalibrationCurve {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        for pair in samples.windows(2) {
            if !(pair[1].0 > pair[0].0) {
                return Err(Error::Format(format!(
                    "densities must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(d, i) in &samples {
            if !(0.0..=100.0).contains(&d) {
                return Err(Error::Format(format!("density {d} outside [0, 100]")));
            }
            if !(0.0..=1.0).contains(&i) {
                return Err(Error::Format(format!("intensity {i} outside [0, 1]")));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Parses `density_percent,intensity` lines; a non-numeric first line is
    /// taken as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(d, i)| Some((d.trim().parse::<f64>().ok()?, i.trim().parse::<f64>().ok()?)));
            match parsed {
                Some(s) => samples.push(s),
                None if n == 0 => continue,
                None => return Err(Error::Format(format!("line {}: expected density,intensity", n + 1))),
            }
        }
        Self::new(samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit {
    /// Fitted solid-material absorption, 1/mm.
    pub mu_solid: f64,
    /// Intercept of the regression in optical-depth units.
    pub intercept: f64,
    /// RMS residual in optical-depth units.
    pub residual: f64,
    /// The raw slope was negative and has been clamped to zero.
    pub clamped: bool,
}

/// Least-squares slope of optical depth `-ln(I / I0)` against effective
/// path length `density * path_length / 100`.
pub fn fit_mu_solid(curve: &CalibrationCurve, path_length: f64, source_intensity: f64) -> Result<CalibrationFit> {
    if curve.samples.len() < 2 {
        return Err(Error::Format("at least two calibration samples are required".into()));
    }
    if !(path_length > 0.0 && source_intensity > 0.0) {
        return Err(Error::Config("path length and source intensity must be positive".into()));
    }
    if let Some(&(d, _)) = curve.samples.iter().find(|(_, i)| *i <= 0.0) {
        return Err(Error::Saturation(format!("zero intensity at density {d}%")));
    }
    let pts: Vec<(f64, f64)> = curve
        .samples
        .iter()
        .map(|&(d, i)| (d * path_length / 100.0, -(i / source_intensity).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let raw = sxy / sxx;
    let clamped = raw < 0.0;
    let slope = raw.max(0.0);
    let intercept = my - slope * mx;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(CalibrationFit {
        mu_solid: slope,
        intercept,
        residual,
        clamped,
    })
}
