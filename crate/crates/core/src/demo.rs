//! End-to-end digital twin of the presentation-attack experiment: synthetic
//! fingers, phantoms printed from them, both "scanned" several times, and
//! the three score distributions compared.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    enumerate_cross_pairs, enumerate_pairs, export_histograms, perturb_pose_bilinear, run_eval_with, spoof_report, DatasetKind,
    DatasetManifest, EvalReport,
};
use crate::extract::VeinSkeleton;
use crate::geometry::{assemble_phantom, enforce_printability, project_to_cylinder, FingerPhantomModel, PrintabilityReport};
use crate::image::{load_pgm_with_pitch, save_pgm, write_pgm_file, NirImage};
use crate::render::{render_nir, RenderConfig};
use crate::synth::vein_pattern;

/// Lateral centre of a skeleton: midpoint of its y extent.
pub fn skeleton_center_y(skel: &VeinSkeleton) -> f64 {
    let (lo, hi) = skel
        .points()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    if lo.is_finite() {
        0.5 * (lo + hi)
    } else {
        0.0
    }
}

/// Projects a skeleton onto the configured finger and assembles it with the
/// bone layout; `printable` applies the minimum feature size.
pub fn build_phantom(
    skel: &VeinSkeleton,
    cfg: &PipelineConfig,
    center_y: f64,
    printable: bool,
) -> Result<(FingerPhantomModel, PrintabilityReport)> {
    let p = &cfg.phantom;
    let veins = project_to_cylinder(skel, p.radius, p.vein_depth, center_y)?;
    let model = assemble_phantom(p.bone_layout()?, veins, p.radius, p.length, p.vein_depth, cfg.materials.clone())?;
    if printable {
        enforce_printability(&model, &p.printer())
    } else {
        Ok((model, PrintabilityReport::default()))
    }
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub real: EvalReport,
    pub phantom: EvalReport,
    pub cross: EvalReport,
    pub spoof_rate: f64,
    pub report: String,
}

fn add_noise(img: &NirImage, sigma: f64, seed: u64) -> Result<NirImage> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let px = img.pixels().iter().map(|v| v + noise.sample(&mut rng)).collect();
    NirImage::from_clamped(img.width(), img.height(), px, img.pixel_pitch())
}

/// 8-bit round trip so in-memory results equal those on written files.
fn quantize(img: &NirImage) -> Result<NirImage> {
    load_pgm_with_pitch(&save_pgm(img), img.pixel_pitch())
}

struct Seeds {
    pattern: u64,
    real_render: u64,
    phantom_render: u64,
    real_samples: Vec<(u64, u64)>,
    phantom_samples: Vec<(u64, u64)>,
}

/// Runs the whole experiment. With `out_dir`, images, manifests, phantom
/// descriptions, histogram CSVs and the report are written there.
pub fn run_demo(cfg: &PipelineConfig, seed: u64, out_dir: Option<&Path>) -> Result<DemoOutcome> {
    cfg.validate()?;
    let (f, s) = (cfg.eval.fingers, cfg.eval.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| (rng.random(), rng.random())).collect::<Vec<_>>();
    let seeds: Vec<Seeds> = (0..f)
        .map(|_| {
            let pattern = rng.random();
            let real_render = rng.random();
            let phantom_render = rng.random();
            Seeds {
                pattern,
                real_render,
                phantom_render,
                real_samples: pairs(s, &mut rng),
                phantom_samples: pairs(s, &mut rng),
            }
        })
        .collect();

    let render_cfg = RenderConfig {
        noise_sigma: 0.0,
        ..cfg.render
    };
    let pc = &cfg.phantom;
    let center = pc.image_center_y.unwrap_or(pc.radius);
    let sample = |base: &NirImage, (pose, noise): (u64, u64)| -> Result<NirImage> {
        let (moved, _) = perturb_pose_bilinear(base, cfg.eval.max_rotation, cfg.eval.max_translation, pose)?;
        quantize(&add_noise(&moved, cfg.render.noise_sigma, noise)?)
    };

    type Finger = (Vec<NirImage>, Vec<NirImage>, FingerPhantomModel, PrintabilityReport);
    let fingers: Vec<Finger> = seeds
        .par_iter()
        .map(|sd| -> Result<Finger> {
            let pattern = vein_pattern(sd.pattern, pc.length, pc.radius);
            let (real_model, _) = build_phantom(&pattern.full(), cfg, center, false)?;
            let (phantom_model, report) = build_phantom(&pattern.printable(), cfg, center, true)?;
            let real_base = render_nir(&real_model, &render_cfg, sd.real_render)?;
            let phantom_base = render_nir(&phantom_model, &render_cfg, sd.phantom_render)?;
            let real: Vec<NirImage> = sd.real_samples.iter().map(|&k| sample(&real_base, k)).collect::<Result<_>>()?;
            let phantom: Vec<NirImage> = sd.phantom_samples.iter().map(|&k| sample(&phantom_base, k)).collect::<Result<_>>()?;
            Ok((real, phantom, phantom_model, report))
        })
        .collect::<Result<_>>()?;

    let here = Path::new("");
    let real_m = DatasetManifest::grid(DatasetKind::Real, f, s, here, "real");
    let phantom_m = DatasetManifest::grid(DatasetKind::Phantom, f, s, here, "phantom");
    let lookup = |r: &crate::eval::ImageRef| -> Result<NirImage> {
        let (real, phantom, ..) = &fingers[r.finger];
        Ok(match r.kind {
            DatasetKind::Real => real[r.sample].clone(),
            DatasetKind::Phantom => phantom[r.sample].clone(),
        })
    };
    let t = cfg.eval.threshold;
    let (ecfg, mcfg) = (&cfg.extraction, &cfg.matching);
    let real = run_eval_with(&enumerate_pairs(&real_m)?, lookup, ecfg, mcfg, t)?;
    let phantom = run_eval_with(&enumerate_pairs(&phantom_m)?, lookup, ecfg, mcfg, t)?;
    let cross = run_eval_with(&enumerate_cross_pairs(&real_m, &phantom_m)?, lookup, ecfg, mcfg, t)?;
    let spoof_rate = spoof_report(&cross, t);

    let mut report = format!("seed={seed}\nfingers={f}\nsamples={s}\n\n");
    report.push_str(&real.summary("real"));
    report.push('\n');
    report.push_str(&phantom.summary("phantom"));
    report.push('\n');
    report.push_str(&cross.summary("cross"));
    let clamped: usize = fingers.iter().map(|x| x.3.modified_points).sum();
    let total: usize = fingers.iter().map(|x| x.3.total_points).sum();
    let _ = write!(
        report,
        "\n[spoof]\nthreshold={t:.2}\nspoof_success_rate={spoof_rate:.4}\nprintability_clamped_points={clamped}/{total}\n"
    );

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::write(p, e))
        };
        for (k, (real_imgs, phantom_imgs, model, _)) in fingers.iter().enumerate() {
            for (j, img) in real_imgs.iter().enumerate() {
                write_pgm_file(&dir.join(format!("real_f{k}_s{j}.pgm")), img)?;
            }
            for (j, img) in phantom_imgs.iter().enumerate() {
                write_pgm_file(&dir.join(format!("phantom_f{k}_s{j}.pgm")), img)?;
            }
            put(&format!("phantom_f{k}.json"), &model.to_json())?;
        }
        put("real.manifest", &real_m.to_text())?;
        put("phantom.manifest", &phantom_m.to_text())?;
        put("hist_real.csv", &export_histograms(&real))?;
        put("hist_phantom.csv", &export_histograms(&phantom))?;
        put("hist_cross.csv", &export_histograms(&cross))?;
        put("report.txt", &report)?;
    }
    Ok(DemoOutcome {
        real,
        phantom,
        cross,
        spoof_rate,
        report,
    })
}
