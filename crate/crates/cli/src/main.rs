use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use veinforge::config::PipelineConfig;
use veinforge::demo::{build_phantom, run_demo, skeleton_center_y};
use veinforge::eval::{enumerate_cross_pairs, enumerate_pairs, export_histograms, run_eval, spoof_report, DatasetManifest};
use veinforge::extract::extract_skeleton;
use veinforge::geometry::{export_dxf, export_stl, mesh_phantom, skeleton_to_contours};
use veinforge::image::{read_pgm_file, write_pgm_file};
use veinforge::materials::fit_mu_solid;
use veinforge::matching::compare;
use veinforge::render::render_nir;
use veinforge::{CalibrationCurve, Error, FingerPhantomModel, Result, VeinSkeleton};

#[derive(Parser)]
#[command(name = "veinforge", version, about = "Finger vein phantoms: extraction, construction, simulated NIR scans and matching")]
struct Cli {
    /// Pipeline configuration file ([section] key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Decision threshold on the 0-100 score scale.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vein mask and centreline skeleton of a finger image.
    Extract { image: PathBuf },
    /// Phantom description, meshes and vein contours from a skeleton.
    Build { skeleton: PathBuf },
    /// Per-material STL meshes of a phantom description.
    Export { phantom: PathBuf },
    /// Simulated NIR scan of a phantom description.
    Render { phantom: PathBuf },
    /// Comparison score of two finger images.
    Match { a: PathBuf, b: PathBuf },
    /// Score distributions of one dataset, or of real and phantom datasets
    /// and their cross comparison.
    Evaluate { manifest: PathBuf, phantom_manifest: Option<PathBuf> },
    /// Absorption coefficient from a step-density scan (CSV of density, intensity).
    Calibrate {
        csv: PathBuf,
        /// Thickness of the scanned material, mm.
        #[arg(long)]
        path_length: f64,
        /// Intensity of the unobstructed source.
        #[arg(long, default_value_t = 1.0)]
        i0: f64,
    },
    /// Whole presentation-attack experiment on synthetic fingers.
    Demo,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::read(path, e))
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::write(path, e))
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::write(&dir, e))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::parse(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = cli.threshold {
        cfg.eval.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_phantom(path: &Path) -> Result<FingerPhantomModel> {
    FingerPhantomModel::from_json(&read_text(path)?)
}

fn write_meshes(model: &FingerPhantomModel, steps: usize, dir: &Path) -> Result<()> {
    for (id, mesh) in mesh_phantom(model, steps)? {
        let path = dir.join(format!("{}.stl", id.as_str()));
        write_file(&path, export_stl(&mesh))?;
        println!("wrote {} ({} triangles)", path.display(), mesh.len());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Extract { image } => {
            let img = read_pgm_file(image)?;
            let (mask, skel) = extract_skeleton(&img, &cfg.extraction)?;
            let dir = out_dir(cli)?;
            let name = stem(image);
            let mask_path = dir.join(format!("{name}_mask.pgm"));
            write_pgm_file(&mask_path, &mask.to_image(img.pixel_pitch())?)?;
            let skel_path = dir.join(format!("{name}.veinskel"));
            write_file(&skel_path, skel.to_text())?;
            println!(
                "wrote {} and {} ({} polylines, {} points)",
                mask_path.display(),
                skel_path.display(),
                skel.polylines.len(),
                skel.point_count()
            );
        }
        Command::Build { skeleton } => {
            let skel = VeinSkeleton::from_text(&read_text(skeleton)?)?;
            let center = cfg.phantom.image_center_y.unwrap_or_else(|| skeleton_center_y(&skel));
            let (model, report) = build_phantom(&skel, &cfg, center, true)?;
            let dir = out_dir(cli)?;
            write_file(&dir.join("phantom.json"), model.to_json())?;
            write_meshes(&model, cfg.phantom.angular_steps, &dir)?;
            // contours at the printed widths
            let mut printed = skel.clone();
            for p in printed.polylines.iter_mut().flatten() {
                p.width = p.width.max(cfg.phantom.min_feature);
            }
            write_file(&dir.join("veins.dxf"), export_dxf(&skeleton_to_contours(&printed)?)?)?;
            println!("wrote {}", dir.join("phantom.json").display());
            println!("wrote {}", dir.join("veins.dxf").display());
            println!(
                "printability: {} of {} vein points raised to {} mm",
                report.modified_points, report.total_points, cfg.phantom.min_feature
            );
        }
        Command::Export { phantom } => {
            let model = load_phantom(phantom)?;
            write_meshes(&model, cfg.phantom.angular_steps, &out_dir(cli)?)?;
        }
        Command::Render { phantom } => {
            let model = load_phantom(phantom)?;
            let img = render_nir(&model, &cfg.render, cli.seed)?;
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.pgm", stem(phantom))));
            write_pgm_file(&path, &img)?;
            println!("wrote {} ({}x{})", path.display(), img.width(), img.height());
        }
        Command::Match { a, b } => {
            let score = compare(&read_pgm_file(a)?, &read_pgm_file(b)?, &cfg.extraction, &cfg.matching)?;
            println!("score={:.2}", score.value());
        }
        Command::Evaluate { manifest, phantom_manifest } => {
            let load = |p: &Path| DatasetManifest::from_text(&read_text(p)?, p.parent());
            let t = cfg.eval.threshold;
            let (ecfg, mcfg) = (&cfg.extraction, &cfg.matching);
            let dir = out_dir(cli)?;
            let first = load(manifest)?;
            let first_report = run_eval(&enumerate_pairs(&first)?, ecfg, mcfg, t)?;
            let mut summary = first_report.summary(first.kind.as_str());
            write_file(&dir.join(format!("hist_{}.csv", first.kind.as_str())), export_histograms(&first_report))?;
            if let Some(second) = phantom_manifest {
                let second = load(second)?;
                let second_report = run_eval(&enumerate_pairs(&second)?, ecfg, mcfg, t)?;
                let cross = run_eval(&enumerate_cross_pairs(&first, &second)?, ecfg, mcfg, t)?;
                write_file(&dir.join(format!("hist_{}.csv", second.kind.as_str())), export_histograms(&second_report))?;
                write_file(&dir.join("hist_cross.csv"), export_histograms(&cross))?;
                summary.push('\n');
                summary.push_str(&second_report.summary(second.kind.as_str()));
                summary.push('\n');
                summary.push_str(&cross.summary("cross"));
                summary.push_str(&format!("\n[spoof]\nthreshold={t:.2}\nspoof_success_rate={:.4}\n", spoof_report(&cross, t)));
            }
            write_file(&dir.join("report.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Calibrate { csv, path_length, i0 } => {
            let curve = CalibrationCurve::from_csv(&read_text(csv)?)?;
            let fit = fit_mu_solid(&curve, *path_length, *i0)?;
            println!("mu_solid={:.6}", fit.mu_solid);
            println!("intercept={:.6}", fit.intercept);
            println!("rms_residual={:.6}", fit.residual);
            if fit.clamped {
                println!("warning: intensity rises with density; slope clamped to zero");
            }
        }
        Command::Demo => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("demo_out"));
            let outcome = run_demo(&cfg, cli.seed, Some(&dir))?;
            print!("{}", outcome.report);
            println!("outputs in {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("veinforge: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
