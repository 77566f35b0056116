//! Simulated NIR transillumination of a phantom.
//!
//! Light enters from above and travels along -y; the camera sees the finger
//! from below. Image columns run along the finger axis (`z`), rows across it
//! (`x`). Attenuation follows Beer-Lambert along each vertical ray. Scatter
//! is a Gaussian blur that widens with depth below the camera-side skin:
//! bone and tissue are blurred at the depth of the bone, each vein at its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_blur;
use crate::geometry::{FingerPhantomModel, MaterialId, Point3, VeinTube};
use crate::image::NirImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// mm per pixel.
    pub pixel_pitch: f64,
    /// Illumination gain; the sensor saturates at 1.
    pub source_intensity: f64,
    /// Ray marching step, mm.
    pub ray_step: f64,
    /// Scatter blur at zero depth, mm.
    pub scatter_sigma0: f64,
    /// Blur growth per mm of vein depth.
    pub scatter_k: f64,
    /// Additive Gaussian sensor noise, intensity units.
    pub noise_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            pixel_pitch: 0.1,
            source_intensity: 8.0,
            ray_step: 0.05,
            scatter_sigma0: 0.15,
            scatter_k: 0.25,
            noise_sigma: 0.005,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(pos(self.pixel_pitch) && pos(self.ray_step)) {
            return Err(Error::Config("render: pixel_pitch and ray_step must be positive".into()));
        }
        if !(nonneg(self.source_intensity)
            && nonneg(self.scatter_sigma0)
            && nonneg(self.scatter_k)
            && nonneg(self.noise_sigma))
        {
            return Err(Error::Config(
                "render: source_intensity, scatter_sigma0, scatter_k and noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Blur-free, noise-free variant used for exact checks.
    pub fn sharp(self) -> Self {
        Self {
            scatter_sigma0: 0.0,
            scatter_k: 0.0,
            noise_sigma: 0.0,
            ..self
        }
    }
}

/// Boundaries are located by bisection down to this length, mm.
const BOUNDARY_EPS: f64 = 1e-10;

/// Image size `(width, height)` covering the cylinder footprint.
pub fn image_size(model: &FingerPhantomModel, pitch: f64) -> (usize, usize) {
    (
        (model.length / pitch).ceil().max(1.0) as usize,
        (2.0 * model.outer_radius / pitch).ceil().max(1.0) as usize,
    )
}

/// Model coordinates `(x, z)` of a pixel centre.
pub fn pixel_to_model(row: usize, col: usize, pitch: f64, outer_radius: f64) -> (f64, f64) {
    (-outer_radius + (row as f64 + 0.5) * pitch, (col as f64 + 0.5) * pitch)
}

/// Integral of `mu(label(y))` over `[a, b]` given the labels at both ends;
/// any change of label is bisected down to `BOUNDARY_EPS`.
fn integrate<L: Copy + PartialEq>(
    label: &impl Fn(f64) -> L,
    mu: &impl Fn(L) -> f64,
    a: f64,
    b: f64,
    la: L,
    lb: L,
) -> f64 {
    if la == lb {
        return mu(la) * (b - a);
    }
    if b - a < BOUNDARY_EPS {
        return 0.5 * (mu(la) + mu(lb)) * (b - a);
    }
    let m = 0.5 * (a + b);
    let lm = label(m);
    integrate(label, mu, a, m, la, lm) + integrate(label, mu, m, b, lm, lb)
}

/// Marches `[y0, y1]` in steps no longer than `step`.
fn march<L: Copy + PartialEq>(label: impl Fn(f64) -> L, mu: impl Fn(L) -> f64, y0: f64, y1: f64, step: f64) -> f64 {
    if !(y1 > y0) {
        return 0.0;
    }
    let n = ((y1 - y0) / step).ceil().max(1.0) as usize;
    let at = |i: usize| if i == n { y1 } else { y0 + (y1 - y0) * i as f64 / n as f64 };
    let mut prev = label(y0);
    let mut total = 0.0;
    for i in 1..=n {
        let (a, b) = (at(i - 1), at(i));
        let cur = label(b);
        total += integrate(&label, &mu, a, b, prev, cur);
        prev = cur;
    }
    total
}

/// Segments of one tube bucketed by axial position.
struct TubeIndex<'a> {
    tube: &'a VeinTube,
    z0: f64,
    bin: f64,
    bins: Vec<Vec<usize>>,
}

impl<'a> TubeIndex<'a> {
    fn new(tube: &'a VeinTube) -> Self {
        let r = tube.max_radius();
        let zs = tube.path.iter().map(|p| p[2]);
        let z0 = zs.clone().fold(f64::INFINITY, f64::min) - r;
        let z1 = zs.fold(f64::NEG_INFINITY, f64::max) + r;
        let bin = 0.5;
        let nb = ((z1 - z0) / bin).ceil().max(1.0) as usize;
        let mut bins = vec![Vec::new(); nb];
        for i in 0..tube.path.len() - 1 {
            let (a, b) = (tube.path[i][2], tube.path[i + 1][2]);
            let lo = (((a.min(b) - r - z0) / bin).floor().max(0.0)) as usize;
            let hi = ((((a.max(b) + r - z0) / bin).floor()) as usize).min(nb - 1);
            for slot in &mut bins[lo..=hi] {
                slot.push(i);
            }
        }
        Self { tube, z0, bin, bins }
    }

    fn contains(&self, p: Point3) -> bool {
        let k = ((p[2] - self.z0) / self.bin).floor();
        if k < 0.0 || k as usize >= self.bins.len() {
            return false;
        }
        self.bins[k as usize].iter().any(|&i| self.tube.segment_contains(i, p))
    }

    /// `(x_min, x_max, y_min, y_max, z_min, z_max)` including the radius.
    fn bounds(&self) -> [f64; 6] {
        let r = self.tube.max_radius();
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for p in &self.tube.path {
            for axis in 0..3 {
                b[2 * axis] = b[2 * axis].min(p[axis] - r);
                b[2 * axis + 1] = b[2 * axis + 1].max(p[axis] + r);
            }
        }
        b
    }

    /// Mean distance of the centreline below the skin.
    fn depth(&self, outer_radius: f64) -> f64 {
        let n = self.tube.path.len() as f64;
        self.tube.path.iter().map(|p| outer_radius - p[0].hypot(p[1])).sum::<f64>() / n
    }
}

fn pixel_span(lo: f64, hi: f64, origin: f64, pitch: f64, n: usize) -> Option<(usize, usize)> {
    let a = ((lo - origin) / pitch - 0.5).floor().max(0.0);
    let b = ((hi - origin) / pitch - 0.5).ceil();
    if b < 0.0 || a >= n as f64 {
        return None;
    }
    Some((a as usize, (b as usize).min(n - 1)))
}

/// Transmission through bone and tissue only, before gain and blur.
fn base_transmission(model: &FingerPhantomModel, cfg: &RenderConfig, w: usize, h: usize) -> Vec<f64> {
    let r_out = model.outer_radius;
    let mut t = vec![1.0; w * h];
    t.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
        for (col, px) in line.iter_mut().enumerate() {
            let (x, z) = pixel_to_model(row, col, cfg.pixel_pitch, r_out);
            if x.abs() >= r_out || z > model.length {
                continue;
            }
            let half = (r_out * r_out - x * x).sqrt();
            let od = march(
                |y| model.base_material_at([x, y, z]),
                |m| model.mu(m),
                -half,
                half,
                cfg.ray_step,
            );
            *px = (-od).exp();
        }
    });
    t
}

/// Multiplies the blurred occlusion of every vein into `image`. A point
/// shared by several tubes is charged to the first one only.
fn apply_veins(model: &FingerPhantomModel, cfg: &RenderConfig, image: &mut [f64], w: usize, h: usize) {
    let indexes: Vec<TubeIndex> = model.veins.iter().map(TubeIndex::new).collect();
    let mu_vein = model.mu(MaterialId::Vein);
    let r_out = model.outer_radius;
    let pitch = cfg.pixel_pitch;
    for (k, idx) in indexes.iter().enumerate() {
        let [x0, x1, y0, y1, z0, z1] = idx.bounds();
        let (Some((r0, r1)), Some((c0, c1))) = (
            pixel_span(x0, x1, -r_out, pitch, h),
            pixel_span(z0, z1, 0.0, pitch, w),
        ) else {
            continue;
        };
        let sigma_px = (cfg.scatter_sigma0 + cfg.scatter_k * idx.depth(r_out)) / pitch;
        let margin = if sigma_px > 0.0 { (4.0 * sigma_px).ceil() as usize + 1 } else { 0 };
        let (r0, r1) = (r0.saturating_sub(margin), (r1 + margin).min(h - 1));
        let (c0, c1) = (c0.saturating_sub(margin), (c1 + margin).min(w - 1));
        let (cw, ch) = (c1 - c0 + 1, r1 - r0 + 1);
        let mut absorbed = vec![0.0; cw * ch];
        absorbed.par_chunks_mut(cw).enumerate().for_each(|(i, line)| {
            for (j, a) in line.iter_mut().enumerate() {
                let (x, z) = pixel_to_model(r0 + i, c0 + j, pitch, r_out);
                if x.abs() >= r_out {
                    continue;
                }
                let half = (r_out * r_out - x * x).sqrt();
                let label = |y: f64| {
                    let p = [x, y, z];
                    if idx.contains(p) && !indexes[..k].iter().any(|o| o.contains(p)) {
                        Some(model.base_material_at(p))
                    } else {
                        None
                    }
                };
                let od = march(
                    label,
                    |m: Option<MaterialId>| m.map_or(0.0, |base| mu_vein - model.mu(base)),
                    y0.max(-half),
                    y1.min(half),
                    cfg.ray_step,
                );
                *a = 1.0 - (-od).exp();
            }
        });
        let absorbed = gaussian_blur(&absorbed, cw, ch, sigma_px);
        for i in 0..ch {
            let row = &mut image[(r0 + i) * w + c0..(r0 + i) * w + c0 + cw];
            for (px, a) in row.iter_mut().zip(&absorbed[i * cw..(i + 1) * cw]) {
                *px *= 1.0 - a;
            }
        }
    }
}

/// Bone and tissue blur, mm. The same depth law as the veins, with the depth
/// taken from the camera-side skin to the nearest bone shaft.
pub fn base_sigma(model: &FingerPhantomModel, cfg: &RenderConfig) -> f64 {
    let shaft = model.bones.iter().map(|b| b.shaft_radius).fold(f64::NAN, f64::max);
    if shaft.is_nan() {
        cfg.scatter_sigma0
    } else {
        cfg.scatter_sigma0 + cfg.scatter_k * (model.outer_radius - shaft)
    }
}

/// Renders the phantom. Output is `clamp(I0 * T + noise, 0, 1)`.
pub fn render_nir(model: &FingerPhantomModel, cfg: &RenderConfig, seed: u64) -> Result<NirImage> {
    cfg.validate()?;
    model.validate()?;
    if cfg.ray_step >= model.outer_radius {
        return Err(Error::Config(format!(
            "ray_step {} must be smaller than the radius {}",
            cfg.ray_step, model.outer_radius
        )));
    }
    let (w, h) = image_size(model, cfg.pixel_pitch);
    let base = base_transmission(model, cfg, w, h);
    let mut t = gaussian_blur(&base, w, h, base_sigma(model, cfg) / cfg.pixel_pitch);
    apply_veins(model, cfg, &mut t, w, h);
    let i0 = cfg.source_intensity;
    let mut out: Vec<f64> = t.iter().map(|v| i0 * v).collect();
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in &mut out {
            *v += noise.sample(&mut rng);
        }
    }
    NirImage::from_clamped(w, h, out, cfg.pixel_pitch)
}

/// Mean intensity of each column, i.e. along the finger axis.
pub fn axial_profile(img: &NirImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    (0..w)
        .map(|c| (0..h).map(|r| img.get(c, r)).sum::<f64>() / h as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointProfile {
    pub profile: Vec<f64>,
    /// Mean over columns inside any joint span.
    pub joint_mean: f64,
    /// Mean over columns inside any shaft span.
    pub shaft_mean: f64,
}

/// Renders the model and compares joint bands with shaft bands.
pub fn render_joint_profile_check(model: &FingerPhantomModel, cfg: &RenderConfig, seed: u64) -> Result<JointProfile> {
    if model.bones.is_empty() {
        return Err(Error::Config("joint profile needs at least one bone".into()));
    }
    let img = render_nir(model, cfg, seed)?;
    let profile = axial_profile(&img);
    let (mut joint, mut shaft) = ((0.0, 0usize), (0.0, 0usize));
    for (c, v) in profile.iter().enumerate() {
        let z = (c as f64 + 0.5) * cfg.pixel_pitch;
        for b in &model.bones {
            let (s0, s1) = b.shaft_span();
            if b.joint_spans().iter().any(|&(a, e)| z > a && z < e) {
                joint = (joint.0 + v, joint.1 + 1);
            } else if z > s0 && z < s1 {
                shaft = (shaft.0 + v, shaft.1 + 1);
            }
        }
    }
    Ok(JointProfile {
        joint_mean: joint.0 / joint.1.max(1) as f64,
        shaft_mean: shaft.0 / shaft.1.max(1) as f64,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_phantom, build_bone_layout, project_to_cylinder};
    use crate::materials::{MaterialSpec, Palette};
    use crate::{SkeletonPoint, VeinSkeleton};

    fn uniform_palette(mu: f64) -> Palette {
        let m = MaterialSpec::new("m", 100.0, mu).unwrap();
        Palette {
            bone: m.clone(),
            tissue: m.clone(),
            vein: m,
        }
    }

    fn sharp(step: f64) -> RenderConfig {
        RenderConfig {
            source_intensity: 1.0,
            ray_step: step,
            ..RenderConfig::default()
        }
        .sharp()
    }

    #[test]
    fn solid_cylinder_matches_chord_attenuation() {
        let mu = 0.2;
        let m = assemble_phantom(vec![], vec![], 4.0, 3.0, 1.0, uniform_palette(mu)).unwrap();
        let cfg = sharp(0.01);
        let img = render_nir(&m, &cfg, 0).unwrap();
        for row in 0..img.height() {
            let (x, _) = pixel_to_model(row, 0, cfg.pixel_pitch, 4.0);
            let chord = 2.0 * (16.0 - x * x).max(0.0).sqrt();
            let want = (-mu * chord).exp();
            let got = img.get(10, row);
            assert!((got - want).abs() / want < 1e-6, "row {row}: {got} vs {want}");
        }
    }

    #[test]
    fn transparent_model_is_uniform() {
        let m = assemble_phantom(vec![], vec![], 3.0, 2.0, 1.0, uniform_palette(0.0)).unwrap();
        let cfg = RenderConfig {
            source_intensity: 0.7,
            ..sharp(0.05)
        };
        let img = render_nir(&m, &cfg, 0).unwrap();
        assert!(img.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn ray_step_must_be_below_radius() {
        let m = assemble_phantom(vec![], vec![], 3.0, 2.0, 1.0, Palette::default()).unwrap();
        assert!(matches!(render_nir(&m, &sharp(3.0), 0), Err(Error::Config(_))));
    }

    fn vein_model(depth: f64) -> FingerPhantomModel {
        let skel = VeinSkeleton::new(vec![vec![SkeletonPoint::new(1.0, 0.0, 0.8, 0.0), SkeletonPoint::new(9.0, 0.0, 0.8, 0.0)]]).unwrap();
        let veins = project_to_cylinder(&skel, 6.0, depth, 0.0).unwrap();
        assemble_phantom(vec![], veins, 6.0, 10.0, depth, Palette::default()).unwrap()
    }

    /// Closed form for a vertical ray through a horizontal vein parallel to
    /// z directly below the axis.
    #[test]
    fn vein_attenuation_is_exact_without_blur() {
        let m = vein_model(1.5);
        let cfg = sharp(0.05);
        let img = render_nir(&m, &cfg, 0).unwrap();
        let (mu_t, mu_v) = (m.mu(MaterialId::Tissue), m.mu(MaterialId::Vein));
        for row in 0..img.height() {
            let (x, _) = pixel_to_model(row, 50, cfg.pixel_pitch, 6.0);
            let chord = 2.0 * (36.0 - x * x).max(0.0).sqrt();
            let vein_chord = 2.0 * (0.16 - x * x).max(0.0).sqrt();
            let want = (-(mu_t * (chord - vein_chord) + mu_v * vein_chord)).exp();
            assert!((img.get(50, row) - want).abs() <= 1e-6 * want, "row {row}");
        }
    }

    fn edge_gradient(depth: f64) -> f64 {
        let cfg = RenderConfig {
            noise_sigma: 0.0,
            source_intensity: 1.0,
            ..RenderConfig::default()
        };
        let img = render_nir(&vein_model(depth), &cfg, 0).unwrap();
        // rows within 2 mm of the vein; the silhouette is steeper still
        (41..80)
            .map(|r| (img.get(50, r) - img.get(50, r - 1)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deeper_veins_are_blurrier() {
        let g: Vec<f64> = [1.0, 1.5, 2.0, 3.0].iter().map(|&d| edge_gradient(d)).collect();
        assert!(g.windows(2).all(|p| p[1] < p[0]), "{g:?}");
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let m = vein_model(1.5);
        let cfg = RenderConfig::default();
        assert_eq!(render_nir(&m, &cfg, 9).unwrap(), render_nir(&m, &cfg, 9).unwrap());
        assert_ne!(render_nir(&m, &cfg, 9).unwrap(), render_nir(&m, &cfg, 10).unwrap());
    }

    #[test]
    fn joints_are_brighter_with_default_palette() {
        let bones = build_bone_layout(90.0, 3, 3.0, 4.5, 6.0, 3.0).unwrap();
        let m = assemble_phantom(bones.clone(), vec![], 9.0, 90.0, 1.5, Palette::default()).unwrap();
        let p = render_joint_profile_check(&m, &RenderConfig::default(), 1).unwrap();
        assert!(p.joint_mean > p.shaft_mean, "{} vs {}", p.joint_mean, p.shaft_mean);

        let mut swapped = Palette::default();
        std::mem::swap(&mut swapped.bone, &mut swapped.tissue);
        let m = assemble_phantom(bones, vec![], 9.0, 90.0, 1.5, swapped).unwrap();
        let p = render_joint_profile_check(&m, &RenderConfig::default(), 1).unwrap();
        assert!(p.joint_mean < p.shaft_mean);
    }
}
