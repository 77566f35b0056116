//! Vein pattern comparison: ICP alignment of centreline points followed by
//! the maximum overlap ratio of the binary patterns over a displacement
//! window.
//!
//! Point coordinates are pixels relative to the image centre
//! `((w - 1) / 2, (h - 1) / 2)`, so a rotation turns the pattern about the
//! middle of the frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{extract_mask, thin, BinaryVeinMap, ExtractionConfig};
use crate::image::NirImage;

pub type Point2 = [f64; 2];

/// Rotation about the origin followed by a translation:
/// `x' = cos(a) x - sin(a) y + dx`, `y' = sin(a) x + cos(a) y + dy`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform2D {
    /// Degrees.
    pub rotation: f64,
    /// Pixels.
    pub dx: f64,
    pub dy: f64,
}

impl RigidTransform2D {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn new(rotation: f64, dx: f64, dy: f64) -> Self {
        Self { rotation, dx, dy }
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.rotation.to_radians().sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy]
    }

    pub fn inverse(&self) -> Self {
        let back = Self::new(-self.rotation, 0.0, 0.0).apply([self.dx, self.dy]);
        Self::new(-self.rotation, -back[0], -back[1])
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &Self) -> Self {
        let t = self.apply([first.dx, first.dy]);
        Self::new(self.rotation + first.rotation, t[0], t[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Horizontal search half-width, px.
    pub cw: usize,
    /// Vertical search half-width, px.
    pub ch: usize,
    pub icp_max_iter: usize,
    /// Stop once the mean distance improves by less than this, px.
    pub icp_tol: f64,
    /// Fraction of correspondences, closest first, used by each ICP fit and
    /// in the reported distance. 1 is plain ICP.
    pub icp_trim: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            cw: 30,
            ch: 30,
            icp_max_iter: 50,
            icp_tol: 0.01,
            icp_trim: 0.7,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.icp_max_iter < 1 {
            return Err(Error::Config("icp_max_iter must be at least 1".into()));
        }
        if !(self.icp_tol > 0.0 && self.icp_tol.is_finite()) {
            return Err(Error::Config(format!("icp_tol {} must be positive", self.icp_tol)));
        }
        if !(self.icp_trim > 0.0 && self.icp_trim <= 1.0) {
            return Err(Error::Config(format!("icp_trim {} outside (0, 1]", self.icp_trim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MatchScore(f64);

impl MatchScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::Config(format!("score {value} outside [0, 100]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Maps an overlap ratio in `[0, 0.5]` linearly onto `[0, 100]`.
pub fn score_to_100(ratio: f64) -> Result<MatchScore> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::RatioRange(ratio));
    }
    Ok(MatchScore((200.0 * ratio).min(100.0)))
}

/// Uniform bucket grid for nearest-neighbour queries.
struct Grid<'a> {
    pts: &'a [Point2],
    origin: Point2,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
    /// Other points within `LINK_RADIUS` of each point.
    links: Vec<Vec<u32>>,
}

/// Gallery points closer than this are treated as joined by a straight
/// piece of vein, px.
const LINK_RADIUS: f64 = 3.0;

impl<'a> Grid<'a> {
    fn new(pts: &'a [Point2], cell: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let nx = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
        let ny = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        for (i, p) in pts.iter().enumerate() {
            let cx = ((p[0] - lo[0]) / cell) as usize;
            let cy = ((p[1] - lo[1]) / cell) as usize;
            cells[cy.min(ny - 1) * nx + cx.min(nx - 1)].push(i as u32);
        }
        let mut grid = Self {
            pts,
            origin: lo,
            cell,
            nx,
            ny,
            cells,
            links: Vec::new(),
        };
        let reach = (LINK_RADIUS / cell).ceil() as isize;
        grid.links = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cx = grid.cell_of(p[0], lo[0], nx);
                let cy = grid.cell_of(p[1], lo[1], ny);
                let mut near = Vec::new();
                for y in (cy - reach).max(0)..=(cy + reach).min(ny as isize - 1) {
                    for x in (cx - reach).max(0)..=(cx + reach).min(nx as isize - 1) {
                        for &j in &grid.cells[y as usize * nx + x as usize] {
                            let q = pts[j as usize];
                            if j as usize != i && (q[0] - p[0]).hypot(q[1] - p[1]) <= LINK_RADIUS {
                                near.push(j);
                            }
                        }
                    }
                }
                near
            })
            .collect();
        grid
    }

    /// Closest point to `p` on the pieces joining its nearest gallery point
    /// to that point's links, and its distance. Matching against the pieces
    /// rather than the samples keeps a probe from locking onto the next
    /// sample along a vein.
    fn closest(&self, p: Point2) -> (Point2, f64) {
        let (i, d) = self.nearest(p);
        let a = self.pts[i];
        let mut best = (a, d);
        for &j in &self.links[i] {
            let b = self.pts[j as usize];
            let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
            let t = (((p[0] - a[0]) * ux + (p[1] - a[1]) * uy) / (ux * ux + uy * uy)).clamp(0.0, 1.0);
            let q = [a[0] + t * ux, a[1] + t * uy];
            let dq = (q[0] - p[0]).hypot(q[1] - p[1]);
            if dq < best.1 {
                best = (q, dq);
            }
        }
        best
    }

    fn cell_of(&self, v: f64, origin: f64, n: usize) -> isize {
        (((v - origin) / self.cell).floor() as isize).clamp(0, n as isize - 1)
    }

    /// Index and distance of the closest point. Rings of cells are scanned
    /// outward until no unscanned cell can hold anything closer.
    fn nearest(&self, p: Point2) -> (usize, f64) {
        let cx = self.cell_of(p[0], self.origin[0], self.nx);
        let cy = self.cell_of(p[1], self.origin[1], self.ny);
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut best = (usize::MAX, f64::INFINITY);
        let scan = |x: isize, y: isize, best: &mut (usize, f64)| {
            for &i in &self.cells[y as usize * self.nx + x as usize] {
                let q = self.pts[i as usize];
                let d = (q[0] - p[0]).hypot(q[1] - p[1]);
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d);
                }
            }
        };
        for r in 0..=nx.max(ny) {
            for y in (cy - r).max(0)..=(cy + r).min(ny - 1) {
                if y == cy - r || y == cy + r {
                    for x in (cx - r).max(0)..=(cx + r).min(nx - 1) {
                        scan(x, y, &mut best);
                    }
                } else {
                    if cx - r >= 0 {
                        scan(cx - r, y, &mut best);
                    }
                    if r > 0 && cx + r < nx {
                        scan(cx + r, y, &mut best);
                    }
                }
            }
            if best.1 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Least-squares rotation and translation taking `src[i]` onto `dst[i]`.
pub fn fit_rigid(src: &[Point2], dst: &[Point2]) -> RigidTransform2D {
    let n = src.len() as f64;
    let mean = |v: &[Point2]| {
        let s = v.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (ps, qs) = (mean(src), mean(dst));
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let a = [p[0] - ps[0], p[1] - ps[1]];
        let b = [q[0] - qs[0], q[1] - qs[1]];
        cross += a[0] * b[1] - a[1] * b[0];
        dot += a[0] * b[0] + a[1] * b[1];
    }
    let rot = RigidTransform2D::new(cross.atan2(dot).to_degrees(), 0.0, 0.0);
    let r = rot.apply(ps);
    RigidTransform2D::new(rot.rotation, qs[0] - r[0], qs[1] - r[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform2D,
    /// Fewer than two points on one side; the transform is the identity.
    pub degenerate: bool,
    pub iterations: usize,
    /// Mean trimmed correspondence distance before the first and after
    /// every accepted iteration; never increases.
    pub history: Vec<f64>,
}

/// Correspondences of the moved probe, trimmed to the closest `trim`
/// fraction; `snap` pairs with gallery samples instead of the pieces
/// between them. Returns the mean kept distance and the kept (moved, target)
/// pairs.
fn correspond(
    grid: &Grid,
    probe: &[Point2],
    t: &RigidTransform2D,
    trim: f64,
    snap: bool,
    src: &mut Vec<Point2>,
    dst: &mut Vec<Point2>,
) -> f64 {
    let mut all: Vec<(f64, Point2, Point2)> = probe
        .iter()
        .map(|p| {
            let q = t.apply(*p);
            let (g, d) = if snap {
                let (i, d) = grid.nearest(q);
                (grid.pts[i], d)
            } else {
                grid.closest(q)
            };
            (d, q, g)
        })
        .collect();
    let keep = ((trim * all.len() as f64).ceil() as usize).clamp(1, all.len());
    if keep < all.len() {
        all.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0));
        all.truncate(keep);
    }
    src.clear();
    dst.clear();
    let mut sum = 0.0;
    for (d, q, g) in all {
        sum += d;
        src.push(q);
        dst.push(g);
    }
    sum / keep as f64
}

fn icp_from(grid: &Grid, probe: &[Point2], start: RigidTransform2D, cfg: &MatchConfig) -> IcpResult {
    let mut current = start;
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    let mut err = correspond(grid, probe, &current, cfg.icp_trim, false, &mut src, &mut dst);
    let mut history = vec![err];
    let mut iterations = 0;
    let (mut next_src, mut next_dst) = (Vec::new(), Vec::new());
    let (mut trial_src, mut trial_dst) = (Vec::new(), Vec::new());
    while iterations < cfg.icp_max_iter {
        iterations += 1;
        let mut candidate = fit_rigid(&src, &dst).then_after(&current);
        let mut next = correspond(grid, probe, &candidate, cfg.icp_trim, false, &mut next_src, &mut next_dst);
        if next > err {
            break;
        }
        // along a vein the fit only creeps forward; keep doubling the step
        // while that still lowers the distance
        let step = [candidate.rotation - current.rotation, candidate.dx - current.dx, candidate.dy - current.dy];
        for k in [2.0, 4.0, 8.0, 16.0] {
            let far = RigidTransform2D::new(current.rotation + k * step[0], current.dx + k * step[1], current.dy + k * step[2]);
            let e = correspond(grid, probe, &far, cfg.icp_trim, false, &mut trial_src, &mut trial_dst);
            if e >= next {
                break;
            }
            candidate = far;
            next = e;
            std::mem::swap(&mut next_src, &mut trial_src);
            std::mem::swap(&mut next_dst, &mut trial_dst);
        }
        current = candidate;
        std::mem::swap(&mut src, &mut next_src);
        std::mem::swap(&mut dst, &mut next_dst);
        history.push(next);
        let improvement = err - next;
        err = next;
        if improvement < cfg.icp_tol {
            break;
        }
    }
    // near the optimum, sample-to-sample pairs are the right ones and pin
    // the pose down exactly; a step is kept only if the distance to the
    // pieces does not grow
    while iterations < cfg.icp_max_iter {
        correspond(grid, probe, &current, cfg.icp_trim, true, &mut src, &mut dst);
        let candidate = fit_rigid(&src, &dst).then_after(&current);
        let next = correspond(grid, probe, &candidate, cfg.icp_trim, false, &mut next_src, &mut next_dst);
        if next > err || candidate == current {
            break;
        }
        iterations += 1;
        current = candidate;
        history.push(next);
        let improvement = err - next;
        err = next;
        if improvement < cfg.icp_tol {
            break;
        }
    }
    IcpResult {
        transform: current,
        degenerate: false,
        iterations,
        history,
    }
}

/// Larger probe sets are thinned to about this many points by a fixed
/// stride before alignment.
const ICP_MAX_POINTS: usize = 800;

/// Coarse pose search: rotations up to this many degrees in steps of
/// `COARSE_ROT_STEP`, shifts up to `COARSE_SHIFT` px in steps of
/// `COARSE_SHIFT_STEP`.
const COARSE_ROT: f64 = 10.0;
const COARSE_ROT_STEP: f64 = 2.0;
const COARSE_SHIFT: f64 = 24.0;
const COARSE_SHIFT_STEP: f64 = 4.0;
/// Chamfer distances are truncated here, px.
const CHAMFER_CAP: f32 = 10.0;
/// Points used per coarse candidate.
const COARSE_POINTS: usize = 300;
/// Coarse candidates refined by ICP.
const COARSE_KEEP: usize = 3;

/// Truncated 8-neighbour chamfer distance to the nearest gallery point on a
/// 1 px lattice covering the gallery with a margin.
struct Chamfer {
    origin: Point2,
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Chamfer {
    fn new(pts: &[Point2]) -> Self {
        let m = CHAMFER_CAP as f64 + 1.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let origin = [(lo[0] - m).floor(), (lo[1] - m).floor()];
        let w = (hi[0] + m - origin[0]).ceil() as usize + 1;
        let h = (hi[1] + m - origin[1]).ceil() as usize + 1;
        let mut d = vec![CHAMFER_CAP; w * h];
        for p in pts {
            let (x, y) = ((p[0] - origin[0]).round() as usize, (p[1] - origin[1]).round() as usize);
            d[y * w + x] = 0.0;
        }
        let diag = std::f32::consts::SQRT_2;
        for y in 0..h {
            for x in 0..w {
                let mut v = d[y * w + x];
                if x > 0 {
                    v = v.min(d[y * w + x - 1] + 1.0);
                }
                if y > 0 {
                    v = v.min(d[(y - 1) * w + x] + 1.0);
                    if x > 0 {
                        v = v.min(d[(y - 1) * w + x - 1] + diag);
                    }
                    if x + 1 < w {
                        v = v.min(d[(y - 1) * w + x + 1] + diag);
                    }
                }
                d[y * w + x] = v;
            }
        }
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                let mut v = d[y * w + x];
                if x + 1 < w {
                    v = v.min(d[y * w + x + 1] + 1.0);
                }
                if y + 1 < h {
                    v = v.min(d[(y + 1) * w + x] + 1.0);
                    if x + 1 < w {
                        v = v.min(d[(y + 1) * w + x + 1] + diag);
                    }
                    if x > 0 {
                        v = v.min(d[(y + 1) * w + x - 1] + diag);
                    }
                }
                d[y * w + x] = v;
            }
        }
        Self { origin, w, h, d }
    }

    fn at(&self, p: Point2) -> f32 {
        let (x, y) = ((p[0] - self.origin[0]).round(), (p[1] - self.origin[1]).round());
        if x < 0.0 || y < 0.0 || x >= self.w as f64 || y >= self.h as f64 {
            return CHAMFER_CAP;
        }
        self.d[y as usize * self.w + x as usize]
    }
}

/// Best few poses on the coarse lattice by mean truncated chamfer distance,
/// keeping only candidates that are not lattice neighbours of a better one.
fn coarse_starts(probe: &[Point2], gallery: &[Point2]) -> Vec<RigidTransform2D> {
    let chamfer = Chamfer::new(gallery);
    let stride = probe.len().div_ceil(COARSE_POINTS);
    let pts: Vec<Point2> = probe.iter().step_by(stride).copied().collect();
    let steps = |max: f64, step: f64| {
        let n = (max / step).round() as i32;
        (-n..=n).map(move |i| i as f64 * step)
    };
    let mut scored = Vec::new();
    for rot in steps(COARSE_ROT, COARSE_ROT_STEP) {
        let (sin, cos) = rot.to_radians().sin_cos();
        let turned: Vec<Point2> = pts.iter().map(|p| [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]]).collect();
        for dy in steps(COARSE_SHIFT, COARSE_SHIFT_STEP) {
            for dx in steps(COARSE_SHIFT, COARSE_SHIFT_STEP) {
                let cost: f32 = turned.iter().map(|p| chamfer.at([p[0] + dx, p[1] + dy])).sum();
                scored.push((cost, RigidTransform2D::new(rot, dx, dy)));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut picked: Vec<RigidTransform2D> = Vec::new();
    for (_, t) in scored {
        let near = picked.iter().any(|q| {
            (q.rotation - t.rotation).abs() <= COARSE_ROT_STEP + 1e-9
                && (q.dx - t.dx).abs() <= COARSE_SHIFT_STEP + 1e-9
                && (q.dy - t.dy).abs() <= COARSE_SHIFT_STEP + 1e-9
        });
        if !near {
            picked.push(t);
            if picked.len() == COARSE_KEEP {
                break;
            }
        }
    }
    picked
}

/// Rigid ICP taking `probe` onto `gallery`.
///
/// Each iteration pairs the moved probe with the closest points on the
/// short pieces joining nearby gallery samples, fits rotation and shift in
/// closed form, and stretches the step while that keeps helping. A final
/// sample-to-sample pass settles the pose.
///
/// Runs from the best poses of a coarse chamfer search, plus a
/// centroid-aligned start when the centroids lie outside the searched
/// shifts; keeps the run with the lowest final trimmed distance (ties go to
/// the earlier start).
pub fn icp_align(probe: &[Point2], gallery: &[Point2], cfg: &MatchConfig) -> IcpResult {
    if probe.len() < 2 || gallery.len() < 2 {
        return IcpResult {
            transform: RigidTransform2D::IDENTITY,
            degenerate: true,
            iterations: 0,
            history: Vec::new(),
        };
    }
    let grid = Grid::new(gallery, 4.0);
    let stride = probe.len().div_ceil(ICP_MAX_POINTS);
    let sampled: Vec<Point2> = probe.iter().step_by(stride).copied().collect();
    let probe = &sampled[..];
    let centroid = |v: &[Point2]| {
        let s = v.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / v.len() as f64, s[1] / v.len() as f64]
    };
    let (pc, gc) = (centroid(probe), centroid(gallery));
    let mut starts = coarse_starts(probe, gallery);
    let (ox, oy) = (gc[0] - pc[0], gc[1] - pc[1]);
    if ox.abs().max(oy.abs()) > COARSE_SHIFT {
        starts.push(RigidTransform2D::new(0.0, ox, oy));
    }
    let mut best: Option<IcpResult> = None;
    for s in starts {
        let run = icp_from(&grid, probe, s, cfg);
        let better = best
            .as_ref()
            .is_none_or(|b| run.history.last().unwrap() < b.history.last().unwrap());
        if better {
            best = Some(run);
        }
        if best.as_ref().is_some_and(|b| *b.history.last().unwrap() == 0.0) {
            break;
        }
    }
    best.unwrap()
}

/// Nearest-neighbour resampling of a row-major grid under `t` about its
/// centre; samples from outside the frame take `fill`.
pub(crate) fn resample_grid<T: Copy>(src: &[T], w: usize, h: usize, t: &RigidTransform2D, fill: T) -> Vec<T> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let inv = t.inverse();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = inv.apply([x as f64 - cx, y as f64 - cy]);
            let (sx, sy) = ((s[0] + cx).round(), (s[1] + cy).round());
            out.push(if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                src[sy as usize * w + sx as usize]
            } else {
                fill
            });
        }
    }
    out
}

/// Resamples a mask under `t` (about the image centre); pixels mapped from
/// outside the frame are false.
pub fn apply_transform(mask: &BinaryVeinMap, t: &RigidTransform2D) -> BinaryVeinMap {
    BinaryVeinMap {
        width: mask.width,
        height: mask.height,
        mask: resample_grid(&mask.mask, mask.width, mask.height, t, false),
    }
}

struct Bits {
    words: usize,
    rows: Vec<Vec<u64>>,
}

impl Bits {
    fn from_mask(m: &BinaryVeinMap) -> Self {
        let words = m.width.div_ceil(64);
        let rows = (0..m.height)
            .map(|y| {
                let mut row = vec![0u64; words];
                for x in 0..m.width {
                    if m.get(x, y) {
                        row[x / 64] |= 1 << (x % 64);
                    }
                }
                row
            })
            .collect();
        Self { words, rows }
    }
}

/// `out` bit `x` = `src` bit `x + u`, zero where that falls outside.
fn shift_row(src: &[u64], u: isize, out: &mut [u64]) {
    let n = src.len() as isize;
    let (ws, bs) = (u.div_euclid(64), u.rem_euclid(64) as u32);
    let word = |i: isize| if i >= 0 && i < n { src[i as usize] } else { 0 };
    for (k, o) in out.iter_mut().enumerate() {
        let i = k as isize + ws;
        *o = if bs == 0 {
            word(i)
        } else {
            (word(i) >> bs) | (word(i + 1) << (64 - bs))
        };
    }
}

/// Maximum over displacements `|u| <= cw`, `|v| <= ch` of
/// `overlap / (probe count + gallery count)`, where the gallery is cropped by
/// the search margins and the probe window is shifted by `(u, v)`.
/// Number of bits set in both slices.
fn and_count(a: &[u64], b: &[u64]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { and_count_popcnt(a, b) };
        }
    }
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn and_count_popcnt(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

pub fn miura_correlation(probe: &BinaryVeinMap, gallery: &BinaryVeinMap, cfg: &MatchConfig) -> Result<f64> {
    if (probe.width, probe.height) != (gallery.width, gallery.height) {
        return Err(Error::DimensionMismatch(probe.width, probe.height, gallery.width, gallery.height));
    }
    let (w, h) = (gallery.width, gallery.height);
    let (cw, ch) = (cfg.cw, cfg.ch);
    if 2 * cw >= w || 2 * ch >= h {
        return Ok(0.0);
    }
    let (x0, x1, y0, y1) = (cw, w - cw, ch, h - ch);

    // summed-area table of the probe for window counts
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut run = 0;
        for x in 0..w {
            run += probe.get(x, y) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + run;
        }
    }
    let window = |xa: usize, xb: usize, ya: usize, yb: usize| {
        sat[yb * (w + 1) + xb] + sat[ya * (w + 1) + xa] - sat[ya * (w + 1) + xb] - sat[yb * (w + 1) + xa]
    };

    let g = Bits::from_mask(gallery);
    let p = Bits::from_mask(probe);
    let mut colmask = vec![0u64; g.words];
    for x in x0..x1 {
        colmask[x / 64] |= 1 << (x % 64);
    }
    let gcrop: Vec<u64> = g.rows[y0..y1]
        .iter()
        .flat_map(|r| r.iter().zip(&colmask).map(|(a, m)| a & m))
        .collect();
    let gcount: u32 = gcrop.iter().map(|v| v.count_ones()).sum();
    if gcount == 0 {
        return Ok(0.0);
    }

    let mut shifted = vec![0u64; p.words * h];
    let mut best = 0.0f64;
    for u in -(cw as isize)..=cw as isize {
        for (row, out) in p.rows.iter().zip(shifted.chunks_mut(p.words)) {
            shift_row(row, u, out);
        }
        let (xa, xb) = ((x0 as isize + u) as usize, (x1 as isize + u) as usize);
        for v in -(ch as isize)..=ch as isize {
            let (ya, yb) = ((y0 as isize + v) as usize, (y1 as isize + v) as usize);
            let pcount = window(xa, xb, ya, yb);
            if pcount == 0 {
                continue;
            }
            let overlap = and_count(&gcrop, &shifted[ya * p.words..yb * p.words]);
            best = best.max(overlap as f64 / (pcount + gcount) as f64);
        }
    }
    Ok(best)
}

/// Binary pattern and centreline points of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VeinFeatures {
    pub mask: BinaryVeinMap,
    /// Thinned mask pixels on fragments of at least `MIN_FRAGMENT` pixels,
    /// centre-relative.
    pub points: Vec<Point2>,
}

/// Skeleton fragments shorter than this many pixels are left out of the
/// alignment points.
const MIN_FRAGMENT: usize = 10;

pub fn extract_features(img: &NirImage, ecfg: &ExtractionConfig) -> Result<VeinFeatures> {
    ecfg.validate()?;
    let mask = extract_mask(img, ecfg)?;
    let skel = thin(&mask);
    let (w, h) = (skel.width, skel.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut seen = vec![false; w * h];
    let mut keep = vec![false; w * h];
    let mut stack = Vec::new();
    let mut fragment = Vec::new();
    for start in 0..w * h {
        if !skel.mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        fragment.clear();
        while let Some(i) = stack.pop() {
            fragment.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if skel.mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if fragment.len() >= MIN_FRAGMENT {
            for &i in &fragment {
                keep[i] = true;
            }
        }
    }
    let points = (0..w * h)
        .filter(|&i| keep[i])
        .map(|i| [(i % w) as f64 - cx, (i / w) as f64 - cy])
        .collect();
    Ok(VeinFeatures { mask, points })
}

/// Aligns the probe onto the gallery, then correlates.
pub fn compare_features(probe: &VeinFeatures, gallery: &VeinFeatures, mcfg: &MatchConfig) -> Result<MatchScore> {
    mcfg.validate()?;
    let icp = icp_align(&probe.points, &gallery.points, mcfg);
    let moved = apply_transform(&probe.mask, &icp.transform);
    score_to_100(miura_correlation(&moved, &gallery.mask, mcfg)?)
}

/// Correlation only, without the ICP step.
pub fn compare_features_unaligned(probe: &VeinFeatures, gallery: &VeinFeatures, mcfg: &MatchConfig) -> Result<MatchScore> {
    mcfg.validate()?;
    score_to_100(miura_correlation(&probe.mask, &gallery.mask, mcfg)?)
}

pub fn compare(probe: &NirImage, gallery: &NirImage, ecfg: &ExtractionConfig, mcfg: &MatchConfig) -> Result<MatchScore> {
    compare_features(&extract_features(probe, ecfg)?, &extract_features(gallery, ecfg)?, mcfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn mask_from(rows: &[&str]) -> BinaryVeinMap {
        let (w, h) = (rows[0].len(), rows.len());
        let mut m = BinaryVeinMap::empty(w, h);
        for (y, r) in rows.iter().enumerate() {
            for (x, c) in r.chars().enumerate() {
                m.set(x, y, c == '#');
            }
        }
        m
    }

    #[test]
    fn transform_inverse_roundtrip() {
        let t = RigidTransform2D::new(17.0, 3.5, -2.0);
        let p = [4.0, -9.0];
        let back = t.inverse().apply(t.apply(p));
        assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
        let c = t.then_after(&t.inverse());
        assert!(c.rotation.abs() < 1e-12 && c.dx.abs() < 1e-9 && c.dy.abs() < 1e-9);
    }

    #[test]
    fn score_mapping() {
        assert_eq!(score_to_100(0.5).unwrap().value(), 100.0);
        assert_eq!(score_to_100(0.0).unwrap().value(), 0.0);
        assert!((score_to_100(0.15).unwrap().value() - 30.0).abs() < 1e-12);
        assert!(matches!(score_to_100(0.6), Err(Error::RatioRange(_))));
        assert!(score_to_100(-0.1).is_err());
    }

    #[test]
    fn nearest_neighbour_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point2> = (0..300).map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-20.0..20.0)]).collect();
        let grid = Grid::new(&pts, 4.0);
        for _ in 0..200 {
            let q = [rng.random_range(-80.0..80.0), rng.random_range(-40.0..40.0)];
            let brute = pts.iter().map(|p| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest(q).1, brute);
        }
    }

    fn curve_points() -> Vec<Point2> {
        let mut pts = Vec::new();
        for i in 0..400 {
            let x = -200.0 + i as f64;
            pts.push([x, 20.0 * (x / 40.0).sin()]);
        }
        for i in 0..120 {
            let s = i as f64;
            pts.push([-50.0 + 0.8 * s, 10.0 + 0.6 * s]);
        }
        for i in 0..150 {
            let s = i as f64;
            pts.push([60.0 - 0.3 * s, -15.0 - 0.2 * s + 0.002 * s * s]);
        }
        pts
    }

    #[test]
    fn identical_sets_give_identity() {
        let p = curve_points();
        let r = icp_align(&p, &p, &MatchConfig::default());
        assert_eq!(r.transform, RigidTransform2D::IDENTITY);
        assert!(!r.degenerate);
    }

    #[test]
    fn known_transform_is_recovered() {
        let p = curve_points();
        let t = RigidTransform2D::new(5.0, 3.0, 2.0);
        let g: Vec<Point2> = p.iter().map(|q| t.apply(*q)).collect();
        let r = icp_align(&p, &g, &MatchConfig::default());
        assert!((r.transform.rotation - 5.0).abs() < 0.1, "{:?}", r.transform);
        assert!((r.transform.dx - 3.0).abs() < 0.1 && (r.transform.dy - 2.0).abs() < 0.1);
        assert!(r.history.windows(2).all(|h| h[1] <= h[0]));
    }

    #[test]
    fn noisy_transform_is_mostly_recovered() {
        let p = curve_points();
        let t = RigidTransform2D::new(5.0, 0.0, 0.0);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut ok = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<Point2> = p
                .iter()
                .map(|q| {
                    let m = t.apply(*q);
                    [m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
                })
                .collect();
            let r = icp_align(&p, &g, &MatchConfig::default()).transform;
            if (r.rotation - 5.0).abs() <= 1.0 && r.dx.abs() <= 1.0 && r.dy.abs() <= 1.0 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}");
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let r = icp_align(&[[0.0, 0.0]], &curve_points(), &MatchConfig::default());
        assert!(r.degenerate);
        assert_eq!(r.transform, RigidTransform2D::IDENTITY);
    }

    #[test]
    fn transform_shifts_and_rotates_masks() {
        let m = mask_from(&[".....", ".#...", ".#...", ".##..", "....."]);
        assert_eq!(apply_transform(&m, &RigidTransform2D::IDENTITY), m);
        let shifted = apply_transform(&m, &RigidTransform2D::new(0.0, 2.0, 0.0));
        assert_eq!(shifted, mask_from(&[".....", "...#.", "...#.", "...##", "....."]));
        // +90 degrees: (x, y) -> (-y, x) about the centre, y pointing down
        let rotated = apply_transform(&m, &RigidTransform2D::new(90.0, 0.0, 0.0));
        assert_eq!(rotated, mask_from(&[".....", ".###.", ".#...", ".....", "....."]));
    }

    #[test]
    fn correlation_endpoints() {
        let a = mask_from(&["......", ".####.", "......", ".#..#.", "......"]);
        let zero = MatchConfig {
            cw: 0,
            ch: 0,
            ..MatchConfig::default()
        };
        assert_eq!(miura_correlation(&a, &a, &zero).unwrap(), 0.5);
        let b = mask_from(&["#.....", "......", "#.....", "......", "#....."]);
        assert_eq!(miura_correlation(&a, &b, &zero).unwrap(), 0.0);
        let half = mask_from(&["......", ".##...", "......", ".#....", "......"]);
        assert!((miura_correlation(&a, &half, &zero).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(miura_correlation(&a, &BinaryVeinMap::empty(5, 5), &zero).is_err());
    }

    #[test]
    fn correlation_finds_displacement() {
        let a = mask_from(&["........", "........", "..###...", "..#.....", "........", "........"]);
        let b = apply_transform(&a, &RigidTransform2D::new(0.0, 1.0, 1.0));
        let cfg = MatchConfig {
            cw: 1,
            ch: 1,
            ..MatchConfig::default()
        };
        assert_eq!(miura_correlation(&b, &a, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn bit_shift_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<u64> = (0..3).map(|_| rng.random()).collect();
        let bit = |v: &[u64], i: isize| (0..192).contains(&i) && v[i as usize / 64] >> (i % 64) & 1 == 1;
        for u in [-130, -64, -5, 0, 1, 63, 64, 100] {
            let mut out = vec![0; 3];
            shift_row(&src, u, &mut out);
            for x in 0..192 {
                assert_eq!(bit(&out, x), bit(&src, x + u), "u={u} x={x}");
            }
        }
    }
}
