//! Pipeline configuration in a flat sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [render]
//! pixel_pitch = 0.1
//! ```
//!
//! Every key is optional and falls back to its default; unknown sections or
//! keys are rejected so typos do not pass silently.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLD;
use crate::extract::ExtractionConfig;
use crate::geometry::{build_bone_layout, BoneSegment, PrinterConstraints, DEFAULT_ANGULAR_STEPS};
use crate::materials::Palette;
use crate::matching::MatchConfig;
use crate::render::RenderConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub radius: f64,
    pub length: f64,
    pub bones: usize,
    pub shaft_radius: f64,
    pub joint_radius: f64,
    pub joint_length: f64,
    pub gap: f64,
    pub vein_depth: f64,
    pub min_feature: f64,
    pub angular_steps: usize,
    /// Lateral image coordinate of the finger axis, mm; `None` centres on
    /// the skeleton.
    pub image_center_y: Option<f64>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            radius: 9.0,
            length: 90.0,
            bones: 3,
            shaft_radius: 3.0,
            joint_radius: 4.5,
            joint_length: 6.0,
            gap: 3.0,
            vein_depth: 1.5,
            min_feature: 0.4,
            angular_steps: DEFAULT_ANGULAR_STEPS,
            image_center_y: None,
        }
    }
}

impl PhantomConfig {
    pub fn bone_layout(&self) -> Result<Vec<BoneSegment>> {
        if self.bones == 0 {
            return Ok(Vec::new());
        }
        build_bone_layout(self.length, self.bones, self.shaft_radius, self.joint_radius, self.joint_length, self.gap)
    }

    pub fn printer(&self) -> PrinterConstraints {
        PrinterConstraints {
            min_feature: self.min_feature,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Per-sample pose bounds, degrees and px.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub seed: u64,
    pub fingers: usize,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_rotation: 5.0,
            max_translation: 10.0,
            seed: 42,
            fingers: 6,
            samples: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub extraction: ExtractionConfig,
    pub phantom: PhantomConfig,
    pub materials: Palette,
    pub render: RenderConfig,
    pub matching: MatchConfig,
    pub eval: EvalConfig,
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["extraction", "phantom", "materials", "render", "match", "eval"].contains(&section.as_str()) {
                    return Err(Error::Config(format!("line {}: unknown section [{section}]", n + 1)));
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            c.set(&section, k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        macro_rules! num {
            () => {
                parse_num(s, key, v)?
            };
        }
        match (section, key) {
            ("extraction", "sigma") => self.extraction.sigma = num!(),
            ("extraction", "width_fraction") => self.extraction.width_fraction = num!(),
            ("extraction", "max_width") => self.extraction.max_width = num!(),
            ("phantom", "radius") => self.phantom.radius = num!(),
            ("phantom", "length") => self.phantom.length = num!(),
            ("phantom", "bones") => self.phantom.bones = num!(),
            ("phantom", "shaft_radius") => self.phantom.shaft_radius = num!(),
            ("phantom", "joint_radius") => self.phantom.joint_radius = num!(),
            ("phantom", "joint_length") => self.phantom.joint_length = num!(),
            ("phantom", "gap") => self.phantom.gap = num!(),
            ("phantom", "vein_depth") => self.phantom.vein_depth = num!(),
            ("phantom", "min_feature") => self.phantom.min_feature = num!(),
            ("phantom", "angular_steps") => self.phantom.angular_steps = num!(),
            ("phantom", "image_center_y") => self.phantom.image_center_y = Some(num!()),
            ("materials", k) => {
                let (part, field) = k
                    .split_once('_')
                    .ok_or_else(|| Error::Config(format!("[materials] unknown key {k}")))?;
                let m = match part {
                    "bone" => &mut self.materials.bone,
                    "tissue" => &mut self.materials.tissue,
                    "vein" => &mut self.materials.vein,
                    _ => return Err(Error::Config(format!("[materials] unknown key {k}"))),
                };
                match field {
                    "name" => m.name = v.to_string(),
                    "infill" => m.infill = num!(),
                    "mu_solid" => m.mu_solid = num!(),
                    _ => return Err(Error::Config(format!("[materials] unknown key {k}"))),
                }
            }
            ("render", "pixel_pitch") => self.render.pixel_pitch = num!(),
            ("render", "source_intensity" | "i0") => self.render.source_intensity = num!(),
            ("render", "ray_step") => self.render.ray_step = num!(),
            ("render", "scatter_sigma0") => self.render.scatter_sigma0 = num!(),
            ("render", "scatter_k") => self.render.scatter_k = num!(),
            ("render", "noise_sigma") => self.render.noise_sigma = num!(),
            ("match", "cw") => self.matching.cw = num!(),
            ("match", "ch") => self.matching.ch = num!(),
            ("match", "icp_max_iter") => self.matching.icp_max_iter = num!(),
            ("match", "icp_tol") => self.matching.icp_tol = num!(),
            ("match", "icp_trim") => self.matching.icp_trim = num!(),
            ("eval", "threshold") => self.eval.threshold = num!(),
            ("eval", "max_rotation") => self.eval.max_rotation = num!(),
            ("eval", "max_translation") => self.eval.max_translation = num!(),
            ("eval", "seed") => self.eval.seed = num!(),
            ("eval", "fingers") => self.eval.fingers = num!(),
            ("eval", "samples") => self.eval.samples = num!(),
            ("", _) => return Err(Error::Config(format!("key {key} outside any section"))),
            _ => return Err(Error::Config(format!("[{section}] unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        self.materials.validate()?;
        self.render.validate()?;
        self.matching.validate()?;
        let p = &self.phantom;
        if !(p.radius > 0.0 && p.length > 0.0 && p.vein_depth >= 0.0 && p.vein_depth < p.radius) {
            return Err(Error::Config("phantom: need radius, length > 0 and 0 <= vein_depth < radius".into()));
        }
        if !(p.min_feature > 0.0) {
            return Err(Error::Config("phantom: min_feature must be positive".into()));
        }
        p.bone_layout().map_err(|e| Error::Config(format!("phantom: {e}")))?;
        let e = &self.eval;
        if !(0.0..=100.0).contains(&e.threshold) {
            return Err(Error::Config(format!("eval: threshold {} outside [0, 100]", e.threshold)));
        }
        if !(e.max_rotation >= 0.0 && e.max_translation >= 0.0) {
            return Err(Error::Config("eval: perturbation bounds must be non-negative".into()));
        }
        if e.fingers == 0 || e.samples == 0 {
            return Err(Error::Config("eval: fingers and samples must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let (x, p, r, m, e) = (&self.extraction, &self.phantom, &self.render, &self.matching, &self.eval);
        let _ = writeln!(o, "[extraction]\nsigma = {}\nwidth_fraction = {}\nmax_width = {}\n", x.sigma, x.width_fraction, x.max_width);
        let _ = writeln!(
            o,
            "[phantom]\nradius = {}\nlength = {}\nbones = {}\nshaft_radius = {}\njoint_radius = {}\njoint_length = {}\ngap = {}\nvein_depth = {}\nmin_feature = {}\nangular_steps = {}",
            p.radius, p.length, p.bones, p.shaft_radius, p.joint_radius, p.joint_length, p.gap, p.vein_depth, p.min_feature, p.angular_steps
        );
        if let Some(cy) = p.image_center_y {
            let _ = writeln!(o, "image_center_y = {cy}");
        }
        let _ = writeln!(o, "\n[materials]");
        for (name, spec) in [("bone", &self.materials.bone), ("tissue", &self.materials.tissue), ("vein", &self.materials.vein)] {
            let _ = writeln!(o, "{name}_name = {}\n{name}_infill = {}\n{name}_mu_solid = {}", spec.name, spec.infill, spec.mu_solid);
        }
        let _ = writeln!(
            o,
            "\n[render]\npixel_pitch = {}\nsource_intensity = {}\nray_step = {}\nscatter_sigma0 = {}\nscatter_k = {}\nnoise_sigma = {}\n",
            r.pixel_pitch, r.source_intensity, r.ray_step, r.scatter_sigma0, r.scatter_k, r.noise_sigma
        );
        let _ = writeln!(o, "[match]\ncw = {}\nch = {}\nicp_max_iter = {}\nicp_tol = {}\nicp_trim = {}\n", m.cw, m.ch, m.icp_max_iter, m.icp_tol, m.icp_trim);
        let _ = writeln!(
            o,
            "[eval]\nthreshold = {}\nmax_rotation = {}\nmax_translation = {}\nseed = {}\nfingers = {}\nsamples = {}",
            e.threshold, e.max_rotation, e.max_translation, e.seed, e.fingers, e.samples
        );
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(PipelineConfig::parse("").unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = PipelineConfig::parse("# hi\n[render]\nnoise_sigma = 0 # off\n[materials]\nbone_infill=30\n[phantom]\nimage_center_y = 4.5\n").unwrap();
        assert_eq!(c.render.noise_sigma, 0.0);
        assert_eq!(c.materials.bone.infill, 30.0);
        assert_eq!(c.phantom.image_center_y, Some(4.5));
        let mut d = c.clone();
        d.phantom.image_center_y = Some(4.5);
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), d);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "[nope]\n",
            "[render]\nfoo = 1\n",
            "sigma = 3\n",
            "[render]\npixel_pitch = abc\n",
            "[render]\npixel_pitch = -1\n",
            "[materials]\nbone_infill = 120\n",
            "[phantom]\njoint_radius = 1\n",
            "[render]\njust text\n",
        ] {
            assert!(matches!(PipelineConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
