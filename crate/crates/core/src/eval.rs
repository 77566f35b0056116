//! Verification experiments: which pairs to compare, how to score them,
//! and how to summarise the scores.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extract::ExtractionConfig;
use crate::image::{read_pgm_file, NirImage};
use crate::matching::{compare_features, extract_features, resample_grid, MatchConfig, RigidTransform2D, VeinFeatures};

pub const DEFAULT_THRESHOLD: f64 = 30.0;
pub const BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Real,
    Phantom,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Real => "real",
            DatasetKind::Phantom => "phantom",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub finger: usize,
    pub sample: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub fingers: usize,
    pub samples: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(kind: DatasetKind, fingers: usize, samples: usize, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            kind,
            fingers,
            samples,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Entries named `<prefix>_f<finger>_s<sample>.pgm` under `dir`.
    pub fn grid(kind: DatasetKind, fingers: usize, samples: usize, dir: &Path, prefix: &str) -> Self {
        let entries = (0..fingers)
            .flat_map(|f| (0..samples).map(move |s| (f, s)))
            .map(|(finger, sample)| ManifestEntry {
                finger,
                sample,
                path: dir.join(format!("{prefix}_f{finger}_s{sample}.pgm")),
            })
            .collect();
        Self {
            kind,
            fingers,
            samples,
            entries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.fingers * self.samples {
            return Err(Error::Manifest(format!(
                "{} entries for {} fingers x {} samples",
                self.entries.len(),
                self.fingers,
                self.samples
            )));
        }
        let mut seen = vec![false; self.fingers * self.samples];
        for e in &self.entries {
            if e.finger >= self.fingers || e.sample >= self.samples {
                return Err(Error::Manifest(format!("ids ({}, {}) out of range", e.finger, e.sample)));
            }
            let slot = &mut seen[e.finger * self.samples + e.sample];
            if *slot {
                return Err(Error::Manifest(format!("duplicate entry ({}, {})", e.finger, e.sample)));
            }
            *slot = true;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("MANIFEST {} {} {}\n", self.kind, self.fingers, self.samples);
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.finger, e.sample, e.path.display());
        }
        out
    }

    /// Parses the text form; relative paths are resolved against `base`.
    pub fn from_text(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let kind = match h.as_slice() {
            ["MANIFEST", "real", _, _] => DatasetKind::Real,
            ["MANIFEST", "phantom", _, _] => DatasetKind::Phantom,
            _ => return Err(Error::Manifest(format!("bad header {header:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Manifest(format!("bad count {s:?}")));
        let (fingers, samples) = (num(h[2])?, num(h[3])?);
        let mut entries = Vec::new();
        for line in lines {
            let mut parts = line.trim().splitn(3, char::is_whitespace);
            let (Some(f), Some(s), Some(p)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Manifest(format!("bad entry {line:?}")));
            };
            let p = PathBuf::from(p.trim());
            entries.push(ManifestEntry {
                finger: num(f)?,
                sample: num(s)?,
                path: match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                },
            });
        }
        Self::new(kind, fingers, samples, entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub kind: DatasetKind,
    pub finger: usize,
    pub sample: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    Single,
    Cross,
}

/// Pairs are index pairs into `images`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    pub mode: PlanMode,
    pub images: Vec<ImageRef>,
    pub mated: Vec<(usize, usize)>,
    pub nonmated: Vec<(usize, usize)>,
}

pub fn n_mated(f: usize, s: usize) -> usize {
    f * s * s.saturating_sub(1) / 2
}

pub fn n_nonmated(f: usize, s: usize) -> usize {
    s * s * f * f.saturating_sub(1) / 2
}

pub fn n_cross_mated(f: usize, s_real: usize, s_phantom: usize) -> usize {
    s_real * s_phantom * f
}

pub fn n_cross_nonmated(f: usize, s_real: usize, s_phantom: usize) -> usize {
    (s_real + s_phantom).pow(2) * f * f.saturating_sub(1) / 2
}

fn refs(m: &DatasetManifest) -> Vec<ImageRef> {
    m.entries
        .iter()
        .map(|e| ImageRef {
            kind: m.kind,
            finger: e.finger,
            sample: e.sample,
            path: e.path.clone(),
        })
        .collect()
}

/// Unordered pairs of one data set: same finger is mated, different
/// fingers non-mated.
pub fn enumerate_pairs(m: &DatasetManifest) -> Result<PairPlan> {
    m.validate()?;
    let images = refs(m);
    let (mut mated, mut nonmated) = (Vec::new(), Vec::new());
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            if images[i].finger == images[j].finger {
                mated.push((i, j));
            } else {
                nonmated.push((i, j));
            }
        }
    }
    Ok(PairPlan {
        mode: PlanMode::Single,
        images,
        mated,
        nonmated,
    })
}

/// Mated pairs are (real, phantom) of the same finger; non-mated pairs are
/// all unordered cross-finger pairs over both sets together.
pub fn enumerate_cross_pairs(real: &DatasetManifest, phantom: &DatasetManifest) -> Result<PairPlan> {
    real.validate()?;
    phantom.validate()?;
    if real.fingers != phantom.fingers {
        return Err(Error::Manifest(format!(
            "{} real fingers but {} phantom fingers",
            real.fingers, phantom.fingers
        )));
    }
    let mut images = refs(real);
    let split = images.len();
    images.extend(refs(phantom));
    let mut mated = Vec::new();
    for i in 0..split {
        for j in split..images.len() {
            if images[i].finger == images[j].finger {
                mated.push((i, j));
            }
        }
    }
    let mut nonmated = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            if images[i].finger != images[j].finger {
                nonmated.push((i, j));
            }
        }
    }
    Ok(PairPlan {
        mode: PlanMode::Cross,
        images,
        mated,
        nonmated,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreHistogram {
    pub bins: Vec<u64>,
    pub n: u64,
}

impl Default for ScoreHistogram {
    fn default() -> Self {
        Self {
            bins: vec![0; BINS],
            n: 0,
        }
    }
}

impl ScoreHistogram {
    /// Bin `k` holds scores in `[k, k + 1)`; 100 goes into the last bin.
    pub fn bin_of(score: f64) -> usize {
        (score.floor().max(0.0) as usize).min(BINS - 1)
    }

    pub fn add(&mut self, score: f64) {
        self.bins[Self::bin_of(score)] += 1;
        self.n += 1;
    }

    pub fn from_scores(scores: &[f64]) -> Self {
        let mut h = Self::default();
        for &s in scores {
            h.add(s);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mated_hist: ScoreHistogram,
    pub nonmated_hist: ScoreHistogram,
    pub max_nonmated: Option<f64>,
    pub min_mated: Option<f64>,
    /// Share of mated scores strictly above `threshold`.
    pub fraction_mated_above_threshold: f64,
    pub threshold: f64,
    /// Pairs dropped because an image could not be loaded or scored.
    pub excluded: usize,
    pub errors: Vec<String>,
    pub mated_scores: Vec<f64>,
    pub nonmated_scores: Vec<f64>,
}

impl EvalReport {
    pub fn from_scores(mated: Vec<f64>, nonmated: Vec<f64>, threshold: f64, excluded: usize, errors: Vec<String>) -> Self {
        let above = mated.iter().filter(|&&s| s > threshold).count();
        Self {
            mated_hist: ScoreHistogram::from_scores(&mated),
            nonmated_hist: ScoreHistogram::from_scores(&nonmated),
            max_nonmated: nonmated.iter().copied().reduce(f64::max),
            min_mated: mated.iter().copied().reduce(f64::min),
            fraction_mated_above_threshold: if mated.is_empty() { 0.0 } else { above as f64 / mated.len() as f64 },
            threshold,
            excluded,
            errors,
            mated_scores: mated,
            nonmated_scores: nonmated,
        }
    }

    pub fn summary(&self, title: &str) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "[{title}]");
        let _ = writeln!(out, "mated_pairs={}", self.mated_hist.n);
        let _ = writeln!(out, "nonmated_pairs={}", self.nonmated_hist.n);
        let _ = writeln!(out, "excluded_pairs={}", self.excluded);
        let _ = writeln!(out, "min_mated={}", opt(self.min_mated));
        let _ = writeln!(out, "max_nonmated={}", opt(self.max_nonmated));
        let _ = writeln!(out, "threshold={:.2}", self.threshold);
        let _ = writeln!(out, "fraction_mated_above_threshold={:.4}", self.fraction_mated_above_threshold);
        for e in &self.errors {
            let _ = writeln!(out, "error={e}");
        }
        out
    }
}

/// Scores every pair of `plan`, loading each image once through `load`.
/// Images that fail to load or extract exclude their pairs.
pub fn run_eval_with<F>(plan: &PairPlan, load: F, ecfg: &ExtractionConfig, mcfg: &MatchConfig, threshold: f64) -> Result<EvalReport>
where
    F: Fn(&ImageRef) -> Result<NirImage> + Sync,
{
    ecfg.validate()?;
    mcfg.validate()?;
    let features: Vec<std::result::Result<VeinFeatures, String>> = plan
        .images
        .par_iter()
        .map(|r| {
            load(r)
                .and_then(|img| extract_features(&img, ecfg))
                .map_err(|e| format!("{}: {e}", r.path.display()))
        })
        .collect();
    let errors: Vec<String> = features.iter().filter_map(|f| f.as_ref().err().cloned()).collect();
    let score = |pairs: &[(usize, usize)]| -> Vec<Option<f64>> {
        pairs
            .par_iter()
            .map(|&(i, j)| match (&features[i], &features[j]) {
                (Ok(a), Ok(b)) => compare_features(a, b, mcfg).ok().map(|s| s.value()),
                _ => None,
            })
            .collect()
    };
    let mated = score(&plan.mated);
    let nonmated = score(&plan.nonmated);
    let excluded = mated.iter().chain(&nonmated).filter(|s| s.is_none()).count();
    Ok(EvalReport::from_scores(
        mated.into_iter().flatten().collect(),
        nonmated.into_iter().flatten().collect(),
        threshold,
        excluded,
        errors,
    ))
}

/// Scores a plan whose images are PGM files on disk.
pub fn run_eval(plan: &PairPlan, ecfg: &ExtractionConfig, mcfg: &MatchConfig, threshold: f64) -> Result<EvalReport> {
    run_eval_with(plan, |r| read_pgm_file(&r.path), ecfg, mcfg, threshold)
}

/// Share of mated scores at or above `threshold`; 0 without mated pairs.
pub fn spoof_report(cross: &EvalReport, threshold: f64) -> f64 {
    if cross.mated_scores.is_empty() {
        return 0.0;
    }
    cross.mated_scores.iter().filter(|&&s| s >= threshold).count() as f64 / cross.mated_scores.len() as f64
}

pub fn export_histograms(report: &EvalReport) -> String {
    let mut out = String::from("bin,mated_count,nonmated_count\n");
    for k in 0..BINS {
        let _ = writeln!(out, "{k},{},{}", report.mated_hist.bins[k], report.nonmated_hist.bins[k]);
    }
    out
}

/// Reads back `(mated, nonmated)` bin counts.
pub fn parse_histograms(text: &str) -> Result<(Vec<u64>, Vec<u64>)> {
    let mut lines = text.lines();
    if lines.next() != Some("bin,mated_count,nonmated_count") {
        return Err(Error::Format("histogram CSV header missing".into()));
    }
    let (mut m, mut n) = (vec![0; BINS], vec![0; BINS]);
    let mut rows = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| Error::Format(format!("bad histogram row {line:?}")));
        if f.len() != 3 {
            return Err(Error::Format(format!("bad histogram row {line:?}")));
        }
        let k = parse(f[0])? as usize;
        if k >= BINS {
            return Err(Error::Format(format!("bin {k} out of range")));
        }
        m[k] = parse(f[1])?;
        n[k] = parse(f[2])?;
        rows += 1;
    }
    if rows != BINS {
        return Err(Error::Format(format!("expected {BINS} histogram rows, got {rows}")));
    }
    Ok((m, n))
}

/// Mean of the outermost ring of pixels.
fn border_mean(img: &NirImage) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                sum += img.get(x, y);
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn draw_pose(max_rotation: f64, max_translation: f64, seed: u64) -> Result<RigidTransform2D> {
    if !(max_rotation >= 0.0 && max_translation >= 0.0) {
        return Err(Error::Config("perturbation bounds must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let rotation = max_rotation * (2.0 * u[0] - 1.0);
    let radius = max_translation * u[1].sqrt();
    let angle = std::f64::consts::TAU * u[2];
    Ok(RigidTransform2D::new(rotation, radius * angle.cos(), radius * angle.sin()))
}

/// Random placement change: rotation uniform in `[-max_rotation,
/// max_rotation]` degrees, translation uniform over the disc of radius
/// `max_translation` px. Nearest-neighbour resampling; uncovered pixels take
/// the mean border intensity.
pub fn perturb_pose(img: &NirImage, max_rotation: f64, max_translation: f64, seed: u64) -> Result<(NirImage, RigidTransform2D)> {
    let t = draw_pose(max_rotation, max_translation, seed)?;
    let pixels = resample_grid(img.pixels(), img.width(), img.height(), &t, border_mean(img));
    Ok((NirImage::new(img.width(), img.height(), pixels, img.pixel_pitch())?, t))
}

/// Same pose draw as [`perturb_pose`] with bilinear resampling. Nearest
/// neighbour turns smooth shading into one-pixel stairs, which the curvature
/// detector reads as short ridges.
pub fn perturb_pose_bilinear(img: &NirImage, max_rotation: f64, max_translation: f64, seed: u64) -> Result<(NirImage, RigidTransform2D)> {
    let t = draw_pose(max_rotation, max_translation, seed)?;
    let (w, h) = (img.width(), img.height());
    let fill = border_mean(img);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let inv = t.inverse();
    let at = |x: isize, y: isize| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            img.get(x as usize, y as usize)
        } else {
            fill
        }
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = inv.apply([x as f64 - cx, y as f64 - cy]);
            let (sx, sy) = (s[0] + cx, s[1] + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok((NirImage::from_clamped(w, h, out, img.pixel_pitch())?, t))
}
