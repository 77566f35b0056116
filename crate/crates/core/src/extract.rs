//! Maximum-curvature vein extraction.
//!
//! The pipeline is `max_curvature_scores -> connect_scores -> binarize_median`
//! for the binary pattern used in matching, followed by `trace_skeleton` and
//! `estimate_widths` for the width-annotated centrelines used to build
//! phantoms.
//!
//! Skeleton coordinates are in mm with pixel `(col, row)` centred at
//! `((col + 0.5) * pitch, (row + 0.5) * pitch)`.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_derivatives;
use crate::image::{normalize_contrast, NirImage};

/// Curvatures with magnitude below this are treated as zero.
const CURVATURE_FLOOR: f64 = 1e-12;

/// Step along the perpendicular when sampling width profiles, in px.
const PROFILE_STEP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Gaussian scale of the profile derivatives, px.
    pub sigma: f64,
    /// Fraction of the centre-to-background contrast at which a vein edge
    /// is placed; 0.5 gives full width at half contrast.
    pub width_fraction: f64,
    /// Half-length of the width profile and upper bound on widths, px.
    pub max_width: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            width_fraction: 0.5,
            max_width: 15.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.width_fraction > 0.0 && self.width_fraction < 1.0) {
            return Err(Error::Config(format!(
                "width_fraction {} must lie in (0, 1)",
                self.width_fraction
            )));
        }
        if !(self.max_width > 0.0 && self.max_width.is_finite()) {
            return Err(Error::Config(format!("max_width {} must be positive", self.max_width)));
        }
        Ok(())
    }
}

/// The four profile directions, as `(dx, dy)` pixel steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::Diagonal,
        Direction::AntiDiagonal,
    ];

    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Horizontal => (1, 0),
            Direction::Vertical => (0, 1),
            Direction::Diagonal => (1, 1),
            Direction::AntiDiagonal => (1, -1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
}

impl CurvatureScoreMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scores: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    fn get_signed(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.scores[y as usize * self.width + x as usize]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryVeinMap {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl BinaryVeinMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.mask[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    /// Renders the mask as an image: vein pixels white.
    pub fn to_image(&self, pixel_pitch: f64) -> Result<NirImage> {
        let px = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        NirImage::new(self.width, self.height, px, pixel_pitch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPoint {
    /// mm
    pub x: f64,
    /// mm
    pub y: f64,
    /// mm
    pub width: f64,
    /// mm below the skin
    pub depth: f64,
}

impl SkeletonPoint {
    pub fn new(x: f64, y: f64, width: f64, depth: f64) -> Self {
        Self { x, y, width, depth }
    }
}

/// Vein centrelines as simple polylines; junctions split paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VeinSkeleton {
    pub polylines: Vec<Vec<SkeletonPoint>>,
}

impl VeinSkeleton {
    pub fn new(polylines: Vec<Vec<SkeletonPoint>>) -> Result<Self> {
        let s = Self { polylines };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, line) in self.polylines.iter().enumerate() {
            if line.len() < 2 {
                return Err(Error::Format(format!("polyline {i} has fewer than 2 points")));
            }
            for p in line {
                if !(p.width >= 0.0 && p.depth >= 0.0 && p.x.is_finite() && p.y.is_finite()) {
                    return Err(Error::Format(format!("polyline {i} has an invalid point {p:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &SkeletonPoint> {
        self.polylines.iter().flatten()
    }

    pub fn point_count(&self) -> usize {
        self.polylines.iter().map(Vec::len).sum()
    }

    /// `VEINSKEL 1` text: one `P x y width depth` line per point, polylines
    /// separated by blank lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("VEINSKEL 1\n");
        for (i, line) in self.polylines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for p in line {
                let _ = writeln!(out, "P {} {} {} {}", p.x, p.y, p.width, p.depth);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("VEINSKEL 1") => {}
            other => return Err(Error::Format(format!("expected header VEINSKEL 1, found {other:?}"))),
        }
        let mut polylines = Vec::new();
        let mut current = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    polylines.push(std::mem::take(&mut current));
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 || fields[0] != "P" {
                return Err(Error::Format(format!("line {}: expected `P x y width depth`", n + 2)));
            }
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", n + 2)))?;
            }
            current.push(SkeletonPoint::new(v[0], v[1], v[2], v[3]));
        }
        if !current.is_empty() {
            polylines.push(current);
        }
        Self::new(polylines)
    }
}

/// Directional first and second derivative of the profile through a pixel.
fn profile_derivatives(d: &crate::filter::Derivatives, i: usize, dir: Direction) -> (f64, f64) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match dir {
        Direction::Horizontal => (d.fx[i], d.fxx[i]),
        Direction::Vertical => (d.fy[i], d.fyy[i]),
        Direction::Diagonal => ((d.fx[i] + d.fy[i]) * h, 0.5 * (d.fxx[i] + 2.0 * d.fxy[i] + d.fyy[i])),
        Direction::AntiDiagonal => ((d.fx[i] - d.fy[i]) * h, 0.5 * (d.fxx[i] - 2.0 * d.fxy[i] + d.fyy[i])),
    }
}

/// Pixel sequences of every profile line in a direction.
fn profile_lines(width: usize, height: usize, dir: Direction) -> Vec<Vec<usize>> {
    let (dx, dy) = dir.step();
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < width as isize && y < height as isize;
    let mut lines = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            if inside(x - dx, y - dy) {
                continue;
            }
            let mut line = Vec::new();
            let (mut cx, mut cy) = (x, y);
            while inside(cx, cy) {
                line.push(cy as usize * width + cx as usize);
                cx += dx;
                cy += dy;
            }
            lines.push(line);
        }
    }
    lines
}

/// Curvature of each profile through each pixel in one direction.
fn direction_curvature(d: &crate::filter::Derivatives, n: usize, dir: Direction) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let (p1, p2) = profile_derivatives(d, i, dir);
            let k = p2 / (1.0 + p1 * p1).powf(1.5);
            if k.abs() < CURVATURE_FLOOR {
                0.0
            } else {
                k
            }
        })
        .collect()
}

/// Scores dark valleys: along every profile in every direction, each run of
/// positive curvature contributes `max curvature * run length` at the
/// position of its maximum.
pub fn max_curvature_scores(img: &NirImage, cfg: &ExtractionConfig) -> Result<CurvatureScoreMap> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if cfg.sigma > w.min(h) as f64 {
        return Err(Error::Config(format!(
            "sigma {} px exceeds the {w}x{h} image extent",
            cfg.sigma
        )));
    }
    let derivs = gaussian_derivatives(img.pixels(), w, h, cfg.sigma);
    let n = w * h;
    let per_direction: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        Direction::ALL
            .par_iter()
            .map(|&dir| {
                let kappa = direction_curvature(&derivs, n, dir);
                let mut score = vec![0.0; n];
                for line in profile_lines(w, h, dir) {
                    score_line(&line, &kappa, &mut score);
                }
                score
            })
            .collect()
    };
    // Fixed summation order keeps the result independent of scheduling.
    let mut scores = vec![0.0; n];
    for s in &per_direction {
        for (acc, v) in scores.iter_mut().zip(s) {
            *acc += v;
        }
    }
    Ok(CurvatureScoreMap {
        width: w,
        height: h,
        scores,
    })
}

fn score_line(line: &[usize], kappa: &[f64], score: &mut [f64]) {
    let mut i = 0;
    while i < line.len() {
        if kappa[line[i]] <= 0.0 {
            i += 1;
            continue;
        }
        let start = i;
        let mut best = start;
        while i < line.len() && kappa[line[i]] > 0.0 {
            if kappa[line[i]] > kappa[line[best]] {
                best = i;
            }
            i += 1;
        }
        let run = (i - start) as f64;
        score[line[best]] += kappa[line[best]] * run;
    }
}

/// Connects line-supported responses: in each direction a pixel receives
/// `min(max of the two neighbours ahead, max of the two behind)`, summed over
/// the four directions.
pub fn connect_scores(scores: &CurvatureScoreMap) -> CurvatureScoreMap {
    let mut out = CurvatureScoreMap::zeros(scores.width, scores.height);
    for y in 0..scores.height as isize {
        for x in 0..scores.width as isize {
            let mut acc = 0.0;
            for dir in Direction::ALL {
                let (dx, dy) = dir.step();
                let ahead = scores.get_signed(x + dx, y + dy).max(scores.get_signed(x + 2 * dx, y + 2 * dy));
                let behind = scores.get_signed(x - dx, y - dy).max(scores.get_signed(x - 2 * dx, y - 2 * dy));
                acc += ahead.min(behind);
            }
            out.scores[y as usize * scores.width + x as usize] = acc;
        }
    }
    out
}

/// Marks pixels whose score exceeds the median of all strictly positive
/// scores.
pub fn binarize_median(scores: &CurvatureScoreMap) -> BinaryVeinMap {
    let mut positives: Vec<f64> = scores.scores.iter().copied().filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        return BinaryVeinMap::empty(scores.width, scores.height);
    }
    positives.sort_by(f64::total_cmp);
    let m = positives.len();
    let median = if m % 2 == 1 {
        positives[m / 2]
    } else {
        0.5 * (positives[m / 2 - 1] + positives[m / 2])
    };
    BinaryVeinMap {
        width: scores.width,
        height: scores.height,
        mask: scores.scores.iter().map(|&v| v > median).collect(),
    }
}

/// Zhang-Suen thinning to one-pixel-wide centrelines.
pub fn thin(mask: &BinaryVeinMap) -> BinaryVeinMap {
    let mut cur = mask.clone();
    let (w, h) = (mask.width as isize, mask.height as isize);
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !cur.get(x as usize, y as usize) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        cur.get_signed(x, y - 1),
                        cur.get_signed(x + 1, y - 1),
                        cur.get_signed(x + 1, y),
                        cur.get_signed(x + 1, y + 1),
                        cur.get_signed(x, y + 1),
                        cur.get_signed(x - 1, y + 1),
                        cur.get_signed(x - 1, y),
                        cur.get_signed(x - 1, y - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if ok {
                        remove.push((x as usize, y as usize));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (x, y) in remove {
                cur.set(x, y, false);
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Neighbours in the skeleton graph: 8-connectivity, minus diagonal links
/// that are already bridged by a shared 4-neighbour.
fn graph_neighbours(skel: &BinaryVeinMap, x: usize, y: usize) -> Vec<(usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    let mut out = Vec::with_capacity(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            if (dx, dy) == (0, 0) || !skel.get_signed(x + dx, y + dy) {
                continue;
            }
            if dx != 0 && dy != 0 && (skel.get_signed(x + dx, y) || skel.get_signed(x, y + dy)) {
                continue;
            }
            out.push(((x + dx) as usize, (y + dy) as usize));
        }
    }
    out
}

/// Thins the mask and splits the centreline graph into polylines at
/// junctions. Width and depth are left at zero.
pub fn trace_skeleton(mask: &BinaryVeinMap, pitch: f64) -> VeinSkeleton {
    let skel = thin(mask);
    let w = skel.width;
    let idx = |(x, y): (usize, usize)| y * w + x;
    let neighbours: Vec<Vec<(usize, usize)>> = (0..skel.mask.len())
        .map(|i| {
            if skel.mask[i] {
                graph_neighbours(&skel, i % w, i / w)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut visited: HashSet<(usize, usize)> = HashSet::new();
    let edge = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut paths: Vec<Vec<usize>> = Vec::new();

    let walk = |start: usize, first: usize, visited: &mut HashSet<(usize, usize)>| -> Vec<usize> {
        let mut path = vec![start, first];
        visited.insert(edge(start, first));
        let mut cur = first;
        while neighbours[cur].len() == 2 {
            let next = neighbours[cur]
                .iter()
                .map(|&p| idx(p))
                .find(|&n| !visited.contains(&edge(cur, n)));
            match next {
                Some(n) => {
                    visited.insert(edge(cur, n));
                    path.push(n);
                    cur = n;
                }
                None => break,
            }
        }
        path
    };

    // Open paths start at endpoints and junctions.
    for i in 0..skel.mask.len() {
        if !skel.mask[i] || neighbours[i].len() == 2 {
            continue;
        }
        for &nb in &neighbours[i] {
            let j = idx(nb);
            if !visited.contains(&edge(i, j)) {
                paths.push(walk(i, j, &mut visited));
            }
        }
    }
    // Whatever remains are closed loops of degree-2 pixels.
    for i in 0..skel.mask.len() {
        if !skel.mask[i] {
            continue;
        }
        for &nb in &neighbours[i] {
            let j = idx(nb);
            if !visited.contains(&edge(i, j)) {
                paths.push(walk(i, j, &mut visited));
            }
        }
    }

    // Thinning eats into the ends of a stroke; free ends are pushed back out
    // along their last direction for as long as the mask continues.
    let h = skel.height;
    for path in &mut paths {
        for _ in 0..2 {
            let n = path.len();
            let end = path[n - 1];
            if n >= 2 && neighbours[end].len() == 1 {
                let back = path[n - 1 - (n - 1).min(3)];
                let (ex, ey) = ((end % w) as f64, (end / w) as f64);
                let (dx, dy) = (ex - (back % w) as f64, ey - (back / w) as f64);
                let len = dx.hypot(dy);
                for t in 1.. {
                    let (x, y) = ((ex + dx / len * t as f64).round(), (ey + dy / len * t as f64).round());
                    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                        break;
                    }
                    let i = idx((x as usize, y as usize));
                    if !mask.mask[i] || skel.mask[i] {
                        break;
                    }
                    path.push(i);
                }
            }
            path.reverse();
        }
    }

    let polylines = paths
        .into_iter()
        .filter(|p| p.len() >= 2)
        .map(|p| {
            p.into_iter()
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    SkeletonPoint::new((x as f64 + 0.5) * pitch, (y as f64 + 0.5) * pitch, 0.0, 0.0)
                })
                .collect()
        })
        .collect();
    VeinSkeleton { polylines }
}

/// Full binarisation chain: contrast normalisation, curvature scores,
/// connection, median threshold.
pub fn extract_mask(img: &NirImage, cfg: &ExtractionConfig) -> Result<BinaryVeinMap> {
    let scores = max_curvature_scores(&normalize_contrast(img), cfg)?;
    Ok(binarize_median(&connect_scores(&scores)))
}

/// Mask plus traced centrelines with measured widths. Points whose width
/// cannot be measured get one pixel so the result can always be projected.
pub fn extract_skeleton(img: &NirImage, cfg: &ExtractionConfig) -> Result<(BinaryVeinMap, VeinSkeleton)> {
    let mask = extract_mask(img, cfg)?;
    let mut skel = estimate_widths(img, &trace_skeleton(&mask, img.pixel_pitch()), cfg)?;
    for p in skel.polylines.iter_mut().flatten() {
        if !(p.width > 0.0) {
            p.width = img.pixel_pitch();
        }
    }
    Ok((mask, skel))
}

/// Measures each centreline point's vein width from the perpendicular
/// intensity profile: the span where intensity stays below
/// `background - width_fraction * (background - centre)`, with background
/// the mean of the samples at `+-max_width`.
pub fn estimate_widths(img: &NirImage, skel: &VeinSkeleton, cfg: &ExtractionConfig) -> Result<VeinSkeleton> {
    cfg.validate()?;
    let pitch = img.pixel_pitch();
    let (w, h) = (img.width() as f64, img.height() as f64);
    let to_px = |p: &SkeletonPoint| (p.x / pitch - 0.5, p.y / pitch - 0.5);
    let mut out = skel.clone();
    for (line, out_line) in skel.polylines.iter().zip(out.polylines.iter_mut()) {
        for (i, p) in line.iter().enumerate() {
            let (px, py) = to_px(p);
            if !(px >= -0.5 && py >= -0.5 && px <= w - 0.5 && py <= h - 0.5) {
                return Err(Error::OutOfBounds {
                    x: px,
                    y: py,
                    width: img.width(),
                    height: img.height(),
                });
            }
            let prev = to_px(&line[i.saturating_sub(1)]);
            let next = to_px(&line[(i + 1).min(line.len() - 1)]);
            let (tx, ty) = (next.0 - prev.0, next.1 - prev.1);
            let norm = (tx * tx + ty * ty).sqrt();
            let (nx, ny) = if norm > 0.0 { (-ty / norm, tx / norm) } else { (0.0, 1.0) };
            let width_px = profile_width(img, (px, py), (nx, ny), cfg);
            out_line[i].width = width_px * pitch;
        }
    }
    Ok(out)
}

fn profile_width(img: &NirImage, (px, py): (f64, f64), (nx, ny): (f64, f64), cfg: &ExtractionConfig) -> f64 {
    let max_x = img.width().saturating_sub(1) as f64;
    let max_y = img.height().saturating_sub(1) as f64;
    let sample = |s: f64| {
        let x = (px + s * nx).clamp(0.0, max_x);
        let y = (py + s * ny).clamp(0.0, max_y);
        img.sample_bilinear(x, y).unwrap_or(0.0)
    };
    let reach = cfg.max_width;
    let background = 0.5 * (sample(reach) + sample(-reach));
    let centre = sample(0.0);
    let contrast = background - centre;
    if !(contrast > 0.0) {
        return 0.0;
    }
    let threshold = background - cfg.width_fraction * contrast;
    let steps = (reach / PROFILE_STEP).round() as usize;
    let edge = |sign: f64| -> f64 {
        let mut prev_s = 0.0;
        let mut prev_v = centre;
        for k in 1..=steps {
            let s = k as f64 * PROFILE_STEP;
            let v = sample(sign * s);
            if v >= threshold {
                let t = if v > prev_v { (threshold - prev_v) / (v - prev_v) } else { 0.0 };
                return prev_s + t * (s - prev_s);
            }
            prev_s = s;
            prev_v = v;
        }
        reach
    };
    (edge(1.0) + edge(-1.0)).clamp(0.0, reach)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> NirImage {
        let px = (0..w * h).map(|i| f(i % w, i / w)).collect();
        NirImage::new(w, h, px, 0.1).unwrap()
    }

    fn valley(w: usize, h: usize, centre: f64, depth: f64, sigma: f64) -> NirImage {
        image_from_fn(w, h, |_, y| {
            let d = y as f64 - centre;
            0.8 - depth * (-d * d / (2.0 * sigma * sigma)).exp()
        })
    }

    /// Curvature of the analytic profile by central differences.
    fn oracle_curvature(f: impl Fn(f64) -> f64, z: f64) -> f64 {
        let e = 1e-3;
        let d1 = (f(z + e) - f(z - e)) / (2.0 * e);
        let d2 = (f(z + e) - 2.0 * f(z) + f(z - e)) / (e * e);
        d2 / (1.0 + d1 * d1).powf(1.5)
    }

    #[test]
    fn analytic_valley_curvature_peaks_at_centre() {
        let prof = |z: f64| 0.8 - 0.5 * (-(z - 50.0).powi(2) / 18.0).exp();
        let k: Vec<f64> = (40..=60).map(|z| oracle_curvature(prof, z as f64)).collect();
        let best = k.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(40 + best, 50);
        assert!(oracle_curvature(|z| -prof(z), 50.0) < 0.0);
    }

    #[test]
    fn constant_image_scores_zero() {
        let im = NirImage::filled(40, 30, 0.5, 0.1).unwrap();
        let s = max_curvature_scores(&im, &ExtractionConfig::default()).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn valley_peak_per_column_is_on_centre_row() {
        let im = valley(60, 100, 50.0, 0.5, 3.0);
        let s = max_curvature_scores(&im, &ExtractionConfig::default()).unwrap();
        for x in 0..im.width() {
            let best = (0..im.height()).max_by(|&a, &b| s.get(x, a).total_cmp(&s.get(x, b))).unwrap();
            assert!((best as i64 - 50).abs() <= 1, "column {x}: peak at {best}");
        }
    }

    #[test]
    fn bright_ridge_is_not_scored_on_its_crest() {
        let im = valley(60, 100, 50.0, 0.5, 3.0);
        let inverted = image_from_fn(60, 100, |x, y| 1.0 - im.get(x, y));
        let s = max_curvature_scores(&inverted, &ExtractionConfig::default()).unwrap();
        assert!((0..60).all(|x| s.get(x, 50) == 0.0));
    }

    #[test]
    fn oversized_sigma_is_rejected() {
        let im = NirImage::filled(5, 5, 0.5, 0.1).unwrap();
        let cfg = ExtractionConfig {
            sigma: 6.0,
            ..Default::default()
        };
        assert!(matches!(max_curvature_scores(&im, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn connection_rules() {
        let zero = CurvatureScoreMap::zeros(10, 10);
        assert_eq!(connect_scores(&zero), zero);

        let mut single = CurvatureScoreMap::zeros(10, 10);
        single.scores[5 * 10 + 5] = 3.0;
        assert_eq!(connect_scores(&single).get(5, 5), 0.0);

        let mut line = CurvatureScoreMap::zeros(10, 10);
        for x in 0..10 {
            line.scores[4 * 10 + x] = 2.0;
        }
        let c = connect_scores(&line);
        for x in 2..8 {
            assert!(c.get(x, 4) >= 2.0);
        }
    }

    #[test]
    fn median_threshold_is_strict() {
        let mut m = CurvatureScoreMap::zeros(5, 2);
        m.scores[..5].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = binarize_median(&m);
        assert_eq!(&b.mask[..5], &[false, false, false, true, true]);
        assert_eq!(b.count(), 2);
        assert_eq!(binarize_median(&CurvatureScoreMap::zeros(3, 3)).count(), 0);
    }

    #[test]
    fn empty_mask_gives_empty_skeleton() {
        assert!(trace_skeleton(&BinaryVeinMap::empty(20, 20), 0.1).is_empty());
    }

    #[test]
    fn bar_thins_to_its_centre_row() {
        let mut m = BinaryVeinMap::empty(60, 20);
        for y in 9..12 {
            for x in 10..50 {
                m.set(x, y, true);
            }
        }
        let s = trace_skeleton(&m, 1.0);
        assert_eq!(s.polylines.len(), 1);
        let line = &s.polylines[0];
        assert!(line.len() >= 38, "{} points", line.len());
        for p in line {
            assert!((p.y - 10.5).abs() <= 1.0);
        }
    }

    #[test]
    fn plus_shape_splits_at_the_crossing() {
        let mut m = BinaryVeinMap::empty(41, 41);
        for i in 5..36 {
            for d in 19..22 {
                m.set(i, d, true);
                m.set(d, i, true);
            }
        }
        let s = trace_skeleton(&m, 1.0);
        assert!(s.polylines.len() >= 2);
        let centre = (20.5, 20.5);
        let near = s
            .polylines
            .iter()
            .filter(|l| {
                [l[0], *l.last().unwrap()]
                    .iter()
                    .any(|p| (p.x - centre.0).abs() <= 1.0 && (p.y - centre.1).abs() <= 1.0)
            })
            .count();
        assert!(near >= 2);
    }

    #[test]
    fn skeleton_text_roundtrip_and_errors() {
        let s = VeinSkeleton::new(vec![
            vec![SkeletonPoint::new(0.1, 0.2, 0.3, 0.0), SkeletonPoint::new(1.0 / 3.0, 2.5, 0.4, 1.5)],
            vec![SkeletonPoint::new(5.0, 6.0, 0.0, 0.0), SkeletonPoint::new(7.0, 8.0, 0.1, 0.0)],
        ])
        .unwrap();
        let text = s.to_text();
        assert!(text.starts_with("VEINSKEL 1\nP 0.1 0.2 0.3 0\n"));
        assert_eq!(VeinSkeleton::from_text(&text).unwrap(), s);
        assert!(VeinSkeleton::from_text("VEINSKEL 2\n").is_err());
        assert!(VeinSkeleton::from_text("VEINSKEL 1\nP 1 2 3\nP 1 2 3 4\n").is_err());
        assert!(VeinSkeleton::from_text("VEINSKEL 1\nP 1 2 3 4\n").is_err());
    }

    fn band_image(band: usize) -> NirImage {
        let top = 30 - band / 2;
        image_from_fn(80, 60, |_, y| if (top..top + band).contains(&y) { 0.2 } else { 0.8 })
    }

    fn band_width(band: usize) -> f64 {
        let im = band_image(band);
        let top = 30 - band / 2;
        let cy = top as f64 + band as f64 / 2.0; // centre in px edge coordinates
        let line = (20..60).map(|x| SkeletonPoint::new((x as f64 + 0.5) * 0.1, cy * 0.1, 0.0, 0.0)).collect();
        let skel = VeinSkeleton::new(vec![line]).unwrap();
        let out = estimate_widths(&im, &skel, &ExtractionConfig::default()).unwrap();
        let ws: Vec<f64> = out.points().map(|p| p.width).collect();
        ws.iter().sum::<f64>() / ws.len() as f64
    }

    #[test]
    fn rectangular_band_width() {
        let w = band_width(6);
        assert!((w - 0.6).abs() <= 0.1 + 1e-9, "width {w} mm");
    }

    #[test]
    fn width_is_monotone_in_band_width() {
        let ws: Vec<f64> = (3..=12).map(band_width).collect();
        for pair in ws.windows(2) {
            assert!(pair[1] > pair[0], "{ws:?}");
        }
        assert!(band_width(10) > band_width(6));
    }

    #[test]
    fn constant_image_has_zero_width_and_bounds_are_checked() {
        let im = NirImage::filled(30, 30, 0.5, 0.1).unwrap();
        let skel = VeinSkeleton::new(vec![vec![
            SkeletonPoint::new(0.5, 1.5, 0.0, 0.0),
            SkeletonPoint::new(2.5, 1.5, 0.0, 0.0),
        ]])
        .unwrap();
        let out = estimate_widths(&im, &skel, &ExtractionConfig::default()).unwrap();
        assert!(out.points().all(|p| p.width == 0.0));
        let outside = VeinSkeleton::new(vec![vec![
            SkeletonPoint::new(0.5, 1.5, 0.0, 0.0),
            SkeletonPoint::new(9.5, 1.5, 0.0, 0.0),
        ]])
        .unwrap();
        assert!(matches!(
            estimate_widths(&im, &outside, &ExtractionConfig::default()),
            Err(Error::OutOfBounds { .. })
        ));
    }

    fn score_map() -> impl Strategy<Value = CurvatureScoreMap> {
        (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], w * h).prop_map(move |scores| {
                CurvatureScoreMap {
                    width: w,
                    height: h,
                    scores,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn binarization_ignores_positive_scaling(m in score_map(), k in 0.1f64..100.0) {
            let scaled = CurvatureScoreMap {
                scores: m.scores.iter().map(|v| v * k).collect(),
                ..m.clone()
            };
            prop_assert_eq!(binarize_median(&scaled), binarize_median(&m));
        }

        #[test]
        fn curvature_ignores_intensity_offset(
            px in proptest::collection::vec(0.0f64..0.5, 24 * 16),
            offset in 0.0f64..0.5,
        ) {
            let a = NirImage::new(24, 16, px.clone(), 0.1).unwrap();
            let b = NirImage::new(24, 16, px.iter().map(|v| v + offset).collect(), 0.1).unwrap();
            let cfg = ExtractionConfig { sigma: 2.0, ..Default::default() };
            let sa = max_curvature_scores(&a, &cfg).unwrap();
            let sb = max_curvature_scores(&b, &cfg).unwrap();
            for (x, y) in sa.scores.iter().zip(&sb.scores) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
