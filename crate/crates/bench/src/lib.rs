//! Criterion benchmarks for the veinforge pipeline live in `benches/`.
//! This crate only provides the shared fixtures they use.

use veinforge::config::PipelineConfig;
use veinforge::demo::build_phantom;
use veinforge::render::render_nir;
use veinforge::synth::vein_pattern;
use veinforge::{FingerPhantomModel, NirImage};

/// Default-sized phantom built from a seeded synthetic pattern.
pub fn fixture_phantom(seed: u64) -> FingerPhantomModel {
    let cfg = PipelineConfig::default();
    let pattern = vein_pattern(seed, cfg.phantom.length, cfg.phantom.radius);
    build_phantom(&pattern.printable(), &cfg, cfg.phantom.radius, true)
        .expect("default phantom builds")
        .0
}

/// Rendered NIR image of [`fixture_phantom`].
pub fn fixture_image(seed: u64) -> NirImage {
    render_nir(&fixture_phantom(seed), &PipelineConfig::default().render, seed).expect("default render succeeds")
}
