//! Seeded synthetic finger vein patterns and test images.
//!
//! Patterns live in image millimetres: `x` along the finger from 0 to the
//! length, `y` across it with the finger axis at `y = radius`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::extract::{SkeletonPoint, VeinSkeleton};
use crate::image::NirImage;

/// Sampling step along generated centrelines, mm.
const STEP: f64 = 0.2;
/// Generated veins stay within this lateral distance of the axis, mm.
const MAX_OFFSET: f64 = 5.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPattern {
    /// Main veins and their branches; what a printer can reproduce.
    pub main: Vec<Vec<SkeletonPoint>>,
    /// Thin capillary-like segments seen on a real finger only.
    pub small: Vec<Vec<SkeletonPoint>>,
}

impl SyntheticPattern {
    pub fn printable(&self) -> VeinSkeleton {
        VeinSkeleton::new(self.main.clone()).expect("generated polylines are valid")
    }

    pub fn full(&self) -> VeinSkeleton {
        let mut all = self.main.clone();
        all.extend(self.small.iter().cloned());
        VeinSkeleton::new(all).expect("generated polylines are valid")
    }
}

fn point(x: f64, y: f64, w: f64) -> SkeletonPoint {
    SkeletonPoint::new(x, y, w, 0.0)
}

/// A curved segment starting at `(x, y)` with heading `angle` (radians from
/// +x) that bends by `bend` over its length; stops at the lateral limit.
fn curved_segment(x: f64, y: f64, angle: f64, bend: f64, len: f64, w0: f64, w1: f64, axis: f64, length: f64) -> Vec<SkeletonPoint> {
    let n = (len / STEP).ceil() as usize;
    let mut pts = vec![point(x, y, w0)];
    let (mut px, mut py) = (x, y);
    for i in 1..=n {
        let t = i as f64 / n as f64;
        let a = angle + bend * t;
        px += STEP * a.cos();
        py += STEP * a.sin();
        if (py - axis).abs() > MAX_OFFSET || px < 0.5 || px > length - 0.5 {
            break;
        }
        pts.push(point(px, py, w0 + (w1 - w0) * t));
    }
    pts
}

/// One finger's vein pattern for a finger of the given length and radius.
pub fn vein_pattern(seed: u64, length: f64, radius: f64) -> SyntheticPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = radius;
    let n_main = rng.random_range(2..=3);
    let mut main = Vec::new();
    for k in 0..n_main {
        let slot = -4.0 + 8.0 * (k as f64 + 0.5) / n_main as f64;
        let y0 = slot + rng.random_range(-0.8..0.8);
        let (a1, l1, p1) = (rng.random_range(0.6..1.8), rng.random_range(20.0..45.0), rng.random_range(0.0..2.0 * PI));
        let (a2, l2, p2) = (rng.random_range(0.2..0.6), rng.random_range(7.0..14.0), rng.random_range(0.0..2.0 * PI));
        let drift = rng.random_range(-0.04..0.04);
        let (w0, wp) = (rng.random_range(0.55..0.9), rng.random_range(0.0..2.0 * PI));
        let x0 = rng.random_range(1.5..8.0);
        let x1 = length - rng.random_range(1.5..8.0);
        let n = ((x1 - x0) / STEP).ceil() as usize;
        let line: Vec<SkeletonPoint> = (0..=n)
            .map(|i| {
                let x = x0 + (x1 - x0) * i as f64 / n as f64;
                let y = y0
                    + a1 * (2.0 * PI * x / l1 + p1).sin()
                    + a2 * (2.0 * PI * x / l2 + p2).sin()
                    + drift * (x - length / 2.0);
                let w = w0 + 0.1 * (2.0 * PI * x / 30.0 + wp).sin();
                point(x, axis + y.clamp(-MAX_OFFSET, MAX_OFFSET), w)
            })
            .collect();
        main.push(line);
    }
    let n_branch = rng.random_range(3..=5);
    for _ in 0..n_branch {
        let parent = &main[rng.random_range(0..main.len())];
        let from = &parent[rng.random_range(parent.len() / 10..parent.len() * 3 / 4)];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let angle = side * rng.random_range(15.0f64..40.0).to_radians();
        let bend = -side * rng.random_range(0.0f64..15.0).to_radians();
        let len = rng.random_range(8.0..20.0);
        let w0 = rng.random_range(0.4..0.6);
        let seg = curved_segment(from.x, from.y, angle, bend, len, w0, 0.35, axis, length);
        if seg.len() >= 10 {
            main.push(seg);
        }
    }
    let n_small = rng.random_range(5..=8);
    let mut small = Vec::new();
    for _ in 0..n_small {
        let x = rng.random_range(5.0..length - 10.0);
        let y = axis + rng.random_range(-5.0..5.0);
        let angle = rng.random_range(-60.0f64..60.0).to_radians();
        let bend = rng.random_range(-20.0f64..20.0).to_radians();
        let len = rng.random_range(3.0..8.0);
        let w = rng.random_range(0.18..0.28);
        let seg = curved_segment(x, y, angle, bend, len, w, w, axis, length);
        if seg.len() >= 5 {
            small.push(seg);
        }
    }
    SyntheticPattern { main, small }
}

/// Bright background with a dark Gaussian valley of the given width (px)
/// centred on row `centre`.
pub fn gaussian_valley(width: usize, height: usize, centre: f64, sigma_px: f64, depth: f64, pitch: f64) -> Result<NirImage> {
    let px = (0..height)
        .flat_map(|y| {
            let d = y as f64 - centre;
            let v = 0.8 - depth * (-(d * d) / (2.0 * sigma_px * sigma_px)).exp();
            std::iter::repeat_n(v, width)
        })
        .collect();
    NirImage::new(width, height, px, pitch)
}

/// Bright background with a dark flat band of `band` rows starting at `top`.
pub fn rectangular_band(width: usize, height: usize, top: usize, band: usize, pitch: f64) -> Result<NirImage> {
    let px = (0..height)
        .flat_map(|y| {
            let v = if y >= top && y < top + band { 0.3 } else { 0.8 };
            std::iter::repeat_n(v, width)
        })
        .collect();
    NirImage::new(width, height, px, pitch)
}
