use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use veinforge::config::PipelineConfig;
use veinforge::demo::build_phantom;
use veinforge::eval::{
    enumerate_cross_pairs, enumerate_pairs, n_cross_mated, n_cross_nonmated, n_mated, n_nonmated, perturb_pose_bilinear,
    run_eval_with, DatasetKind, DatasetManifest, ImageRef,
};
use veinforge::geometry::{assemble_phantom, enforce_printability, project_to_cylinder, sweep_tube, MaterialId};
use veinforge::materials::{effective_mu, fit_mu_solid};
use veinforge::matching::{compare_features, compare_features_unaligned, extract_features, icp_align, miura_correlation, score_to_100, Point2};
use veinforge::render::render_nir;
use veinforge::synth::{gaussian_valley, vein_pattern};
use veinforge::{
    BinaryVeinMap, BoneSegment, CalibrationCurve, Error, MatchConfig, MaterialSpec, Palette, PrinterConstraints, RenderConfig,
    SkeletonPoint, VeinSkeleton, VeinTube,
};

fn mask(w: usize, h: usize) -> impl Strategy<Value = BinaryVeinMap> {
    proptest::collection::vec(prop::bool::weighted(0.3), w * h).prop_map(move |mask| BinaryVeinMap { width: w, height: h, mask })
}

fn zero_search() -> MatchConfig {
    MatchConfig {
        cw: 0,
        ch: 0,
        ..MatchConfig::default()
    }
}

fn bone() -> BoneSegment {
    BoneSegment {
        z_start: 2.0,
        z_end: 18.0,
        shaft_radius: 3.0,
        joint_radius: 4.0,
        joint_length: 3.0,
    }
}

/// Smooth random polyline: bounded turning, steps of 0.3 to 1 mm.
fn tube_path() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<f64>)> {
    proptest::collection::vec((0.3f64..1.0, -0.4f64..0.4, -0.4f64..0.4, 0.15f64..0.6), 2..25).prop_map(|steps| {
        let (mut p, mut dir) = ([0.0, 0.0, 0.0], [0.0f64, 0.0, 1.0]);
        let (mut path, mut radius) = (vec![p], vec![steps[0].3]);
        for (len, a, b, r) in steps {
            dir = [dir[0] + a, dir[1] + b, dir[2]];
            let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            dir = [dir[0] / n, dir[1] / n, dir[2] / n];
            p = [p[0] + len * dir[0], p[1] + len * dir[1], p[2] + len * dir[2]];
            path.push(p);
            radius.push(r);
        }
        (path, radius)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_keeps_arc_length_and_axial_position(
        pts in proptest::collection::vec((0.0f64..60.0, -0.99f64..0.99, 0.1f64..2.0), 2..20),
        r in 5.0f64..12.0,
        depth_frac in 0.0f64..0.5,
        centre in -5.0f64..5.0,
    ) {
        let depth = r * depth_frac;
        let rc = r - depth;
        let line: Vec<SkeletonPoint> = pts
            .iter()
            .map(|&(x, s, w)| SkeletonPoint::new(x, centre + s * std::f64::consts::PI * rc, w, 0.0))
            .collect();
        let tubes = project_to_cylinder(&VeinSkeleton::new(vec![line.clone()]).unwrap(), r, depth, centre).unwrap();
        for (p, q) in line.iter().zip(&tubes[0].path) {
            prop_assert!((q[0].hypot(q[1]) - rc).abs() < 1e-9);
            prop_assert_eq!(q[2], p.x);
            // arc length from the camera-facing meridian
            let arc = q[0].atan2(-q[1]) * rc;
            prop_assert!((arc - (p.y - centre)).abs() < 1e-9);
        }
        for (p, rad) in line.iter().zip(&tubes[0].radius) {
            prop_assert!((2.0 * rad - p.width).abs() < 1e-12);
        }
    }

    #[test]
    fn material_lookup_matches_primitives(
        x in -10.0f64..10.0, y in -10.0f64..10.0, z in -1.0f64..21.0,
        vr in 0.3f64..1.0, vy in -6.8f64..-5.8,
    ) {
        let vein = VeinTube::new(vec![[0.0, vy, 1.0], [0.0, vy, 19.0]], vec![vr, vr]).unwrap();
        let model = assemble_phantom(vec![bone()], vec![vein], 8.0, 20.0, 8.0 + vy, Palette::default()).unwrap();
        let rho = x.hypot(y);
        let seg_d = {
            let t = z.clamp(1.0, 19.0);
            (x * x + (y - vy).powi(2) + (z - t).powi(2)).sqrt()
        };
        let b = bone();
        let bone_r = if z < b.z_start || z > b.z_end {
            None
        } else if z < b.z_start + b.joint_length || z > b.z_end - b.joint_length {
            Some(b.joint_radius)
        } else {
            Some(b.shaft_radius)
        };
        let want = if rho > 8.0 || !(0.0..=20.0).contains(&z) {
            MaterialId::Air
        } else if seg_d < vr {
            MaterialId::Vein
        } else if bone_r.is_some_and(|br| rho < br) {
            MaterialId::Bone
        } else {
            MaterialId::Tissue
        };
        // stay clear of the boundaries, where rounding decides
        let near = (rho - 8.0).abs() < 1e-9 || (seg_d - vr).abs() < 1e-9 || bone_r.is_some_and(|br| (rho - br).abs() < 1e-9);
        if !near {
            prop_assert_eq!(model.material_at([x, y, z]), want);
        }
    }

    #[test]
    fn swept_tubes_are_closed((path, radius) in tube_path(), steps in 8usize..32) {
        let mesh = sweep_tube(&path, &radius, steps).unwrap();
        prop_assert!(mesh.is_watertight());
        prop_assert!(!mesh.has_degenerate());
        prop_assert!(mesh.volume() > 0.0);
    }

    #[test]
    fn printability_only_raises_and_is_idempotent(
        radii in proptest::collection::vec(0.01f64..0.6, 2..30),
        min_feature in 0.1f64..0.8,
    ) {
        let path: Vec<[f64; 3]> = (0..radii.len()).map(|i| [0.0, -5.0, 1.0 + 0.5 * i as f64]).collect();
        let model = assemble_phantom(vec![], vec![VeinTube::new(path, radii.clone()).unwrap()], 8.0, 20.0, 3.0, Palette::default()).unwrap();
        let pc = PrinterConstraints { min_feature };
        let (once, report) = enforce_printability(&model, &pc).unwrap();
        let (twice, again) = enforce_printability(&once, &pc).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(again.modified_points, 0);
        prop_assert_eq!(report.modified_points, radii.iter().filter(|&&r| r < min_feature / 2.0).count());
        for (new, old) in once.veins[0].radius.iter().zip(&radii) {
            prop_assert!(*new >= *old && *new >= min_feature / 2.0);
        }
    }

    #[test]
    fn effective_mu_is_linear_and_monotone(a in 0.0f64..=100.0, b in 0.0f64..=100.0, mu in 0.0f64..3.0) {
        let (ma, mb) = (MaterialSpec::new("m", a, mu).unwrap(), MaterialSpec::new("m", b, mu).unwrap());
        prop_assert!((effective_mu(&ma) - mu * a / 100.0).abs() <= 1e-12);
        if a <= b {
            prop_assert!(effective_mu(&ma) <= effective_mu(&mb));
        }
    }

    #[test]
    fn exact_curves_give_the_coefficient_back(
        mu in 0.01f64..1.5,
        path in 1.0f64..20.0,
        i0 in 0.5f64..=1.0,
        mut densities in proptest::collection::btree_set(0u32..=100, 2..8),
    ) {
        densities.insert(0);
        let samples = densities.iter().map(|&d| {
            let d = d as f64;
            (d, i0 * (-mu * d / 100.0 * path).exp())
        }).collect();
        let fit = fit_mu_solid(&CalibrationCurve::new(samples).unwrap(), path, i0).unwrap();
        prop_assert!((fit.mu_solid - mu).abs() <= 1e-9 * (1.0 + mu));
    }

    #[test]
    fn zero_search_correlation_is_symmetric((a, b) in (2usize..20, 2usize..20).prop_flat_map(|(w, h)| (mask(w, h), mask(w, h)))) {
        let cfg = zero_search();
        prop_assert_eq!(miura_correlation(&a, &b, &cfg).unwrap(), miura_correlation(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn a_pattern_matches_itself_fully(m in (2usize..24, 2usize..24).prop_flat_map(|(w, h)| mask(w, h))) {
        prop_assume!(m.count() > 0);
        let s = score_to_100(miura_correlation(&m, &m, &zero_search()).unwrap()).unwrap();
        prop_assert_eq!(s.value(), 100.0);
    }

    #[test]
    fn icp_distance_never_grows(
        probe in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..200),
        gallery in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..200),
    ) {
        let p: Vec<Point2> = probe.iter().map(|&(x, y)| [x, y]).collect();
        let g: Vec<Point2> = gallery.iter().map(|&(x, y)| [x, y]).collect();
        let r = icp_align(&p, &g, &MatchConfig::default());
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn pair_counts_partition_all_pairs(f in 1usize..12, sr in 1usize..8, sp in 1usize..8) {
        let images = f * (sr + sp);
        prop_assert_eq!(
            n_mated(f, sr) + n_mated(f, sp) + n_cross_mated(f, sr, sp) + n_cross_nonmated(f, sr, sp),
            images * (images - 1) / 2
        );
        let single = f * sr;
        prop_assert_eq!(n_mated(f, sr) + n_nonmated(f, sr), single * single.saturating_sub(1) / 2);
    }

    #[test]
    fn enumeration_matches_brute_force(f in 1usize..=4, s in 1usize..=4, sp in 1usize..=4) {
        let dir = Path::new(".");
        let real = DatasetManifest::grid(DatasetKind::Real, f, s, dir, "r");
        let phantom = DatasetManifest::grid(DatasetKind::Phantom, f, sp, dir, "p");
        type Id = (&'static str, usize, usize);
        let ids = |plan: &veinforge::eval::PairPlan, pairs: &[(usize, usize)]| -> BTreeSet<(Id, Id)> {
            pairs.iter().map(|&(i, j)| {
                let (a, b) = (&plan.images[i], &plan.images[j]);
                let (a, b) = ((a.kind.as_str(), a.finger, a.sample), (b.kind.as_str(), b.finger, b.sample));
                (a.min(b), a.max(b))
            }).collect()
        };
        let all = |kind: DatasetKind, samples| (0..f).flat_map(move |fi| (0..samples).map(move |si| (kind.as_str(), fi, si))).collect::<Vec<Id>>();
        let real_ids = all(DatasetKind::Real, s);
        let both: Vec<Id> = real_ids.iter().copied().chain(all(DatasetKind::Phantom, sp)).collect();
        let brute = |set: &[Id], keep: &dyn Fn(&Id, &Id) -> bool| -> BTreeSet<(Id, Id)> {
            let mut out = BTreeSet::new();
            for a in set {
                for b in set {
                    if a < b && keep(a, b) {
                        out.insert((*a, *b));
                    }
                }
            }
            out
        };

        let plan = enumerate_pairs(&real).unwrap();
        prop_assert_eq!(ids(&plan, &plan.mated), brute(&real_ids, &|a, b| a.1 == b.1));
        prop_assert_eq!(ids(&plan, &plan.nonmated), brute(&real_ids, &|a, b| a.1 != b.1));
        prop_assert_eq!(plan.mated.len(), n_mated(f, s));

        let cross = enumerate_cross_pairs(&real, &phantom).unwrap();
        prop_assert_eq!(ids(&cross, &cross.mated), brute(&both, &|a, b| a.0 != b.0 && a.1 == b.1));
        prop_assert_eq!(ids(&cross, &cross.nonmated), brute(&both, &|a, b| a.1 != b.1));
        prop_assert_eq!(cross.nonmated.len(), n_cross_nonmated(f, s, sp));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rendering_stays_in_range_and_darkens_with_absorption(
        tissue_mu in 0.01f64..0.5, extra in 0.0f64..0.5, seed in 0u64..1000,
    ) {
        let vein = VeinTube::new(vec![[0.0, -4.0, 1.0], [1.0, -4.0, 9.0]], vec![0.5, 0.5]).unwrap();
        let palette = |mu| Palette { tissue: MaterialSpec::new("t", 100.0, mu).unwrap(), ..Palette::default() };
        let bones = vec![BoneSegment { z_start: 1.0, z_end: 9.0, shaft_radius: 2.0, joint_radius: 2.5, joint_length: 2.0 }];
        let light = assemble_phantom(bones.clone(), vec![vein.clone()], 5.0, 10.0, 1.0, palette(tissue_mu)).unwrap();
        let dark = assemble_phantom(bones, vec![vein], 5.0, 10.0, 1.0, palette(tissue_mu + extra)).unwrap();

        let noisy = render_nir(&light, &RenderConfig::default(), seed).unwrap();
        prop_assert!(noisy.pixels().iter().all(|v| (0.0..=1.0).contains(v)));

        let cfg = RenderConfig { source_intensity: 1.0, ..RenderConfig::default() }.sharp();
        let (a, b) = (render_nir(&light, &cfg, seed).unwrap(), render_nir(&dark, &cfg, seed).unwrap());
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn histograms_count_scored_pairs_only(
        f in 2usize..=3, s in 2usize..=3, broken in proptest::collection::vec(any::<bool>(), 9),
    ) {
        let m = DatasetManifest::grid(DatasetKind::Real, f, s, Path::new("."), "r");
        let plan = enumerate_pairs(&m).unwrap();
        let is_broken = |r: &ImageRef| broken[r.finger * 3 + r.sample];
        let load = |r: &ImageRef| {
            if is_broken(r) {
                Err(Error::Format("unreadable".into()))
            } else {
                gaussian_valley(48, 32, 10.0 + 3.0 * r.finger as f64 + 0.5 * r.sample as f64, 1.5, 0.4, 0.1)
            }
        };
        let cfg = PipelineConfig::default();
        let report = run_eval_with(&plan, load, &cfg.extraction, &cfg.matching, 30.0).unwrap();
        let lost = plan.mated.iter().chain(&plan.nonmated)
            .filter(|&&(i, j)| is_broken(&plan.images[i]) || is_broken(&plan.images[j]))
            .count();
        prop_assert_eq!(report.excluded, lost);
        prop_assert_eq!(
            (report.mated_hist.n + report.nonmated_hist.n) as usize,
            plan.mated.len() + plan.nonmated.len() - lost
        );
    }
}

#[test]
fn alignment_helps_on_posed_fingers() {
    let cfg = PipelineConfig::default();
    let pattern = vein_pattern(3, cfg.phantom.length, cfg.phantom.radius);
    let (model, _) = build_phantom(&pattern.full(), &cfg, cfg.phantom.radius, false).unwrap();
    let img = render_nir(&model, &cfg.render, 0).unwrap();
    let gallery = extract_features(&img, &cfg.extraction).unwrap();
    let trials = 20;
    let mut wins = 0;
    for seed in 0..trials {
        let (posed, _) = perturb_pose_bilinear(&img, 10.0, 0.0, seed).unwrap();
        let probe = extract_features(&posed, &cfg.extraction).unwrap();
        let aligned = compare_features(&probe, &gallery, &cfg.matching).unwrap().value();
        let raw = compare_features_unaligned(&probe, &gallery, &cfg.matching).unwrap().value();
        if aligned > raw {
            wins += 1;
        }
    }
    assert!(wins * 10 >= trials * 9, "alignment helped in {wins} of {trials} trials");
}

#[test]
fn noisy_icp_stays_close() {
    // the same check as the acceptance target at a smaller scale, with
    // a different pattern
    let pts: Vec<Point2> = vein_pattern(29, 90.0, 9.0).full().points().map(|q| [q.x / 0.1 - 450.0, q.y / 0.1 - 90.0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut ok = 0;
    for k in 0..20 {
        let truth = veinforge::RigidTransform2D::new(-9.5 + k as f64, 7.0 - 0.6 * k as f64, -4.0 + 0.4 * k as f64);
        let gallery: Vec<Point2> = pts.iter().map(|p| {
            let q = truth.apply(*p);
            [q[0] + noise.sample(&mut rng), q[1] + noise.sample(&mut rng)]
        }).collect();
        let got = icp_align(&pts, &gallery, &MatchConfig::default()).transform;
        if (got.rotation - truth.rotation).abs() <= 1.0 && (got.dx - truth.dx).hypot(got.dy - truth.dy) <= 1.0 {
            ok += 1;
        }
    }
    assert!(ok >= 19, "{ok} of 20");
}
