#![allow(dead_code)]

pub mod gradcheck;

use viact_core::phantom::{generate_cohort, Cohort, CohortSpec, PhantomSpec};
use viact_core::{rng, DecoderConfig, ModelConfig, PosEmbedVariant, Viact};

/// 128x128 phantoms with one 21-point contour row; small enough to train
/// the acceptance runs on one CPU core.
pub fn desk_phantom(frames: usize) -> PhantomSpec {
    PhantomSpec {
        height: 128,
        width: 128,
        frames,
        rows: 1,
        contour_points: 21,
        semi_axes: (0.25, 0.45),
        band_half_width: 8.0,
        amplitude: 0.1,
        grain: 2.5,
        ..PhantomSpec::default()
    }
}

pub fn desk_cohort(n: usize, seed: u64, frames: usize) -> Cohort {
    let ranges = CohortSpec {
        base: desk_phantom(frames),
        center_jitter: 6.0,
        ..CohortSpec::default()
    };
    generate_cohort(n, &ranges, seed).unwrap()
}

/// Tiny tokenization (18 frames) at 32 channels, 2 heads, depth 2.
pub fn desk_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny().with_dims(32, 2, 2);
    cfg.patch_size = 8;
    cfg.points = 21;
    cfg.coord_scale = 128.0;
    cfg.pos_embed = PosEmbedVariant::ApexSincos;
    cfg
}

pub fn desk_decoder() -> DecoderConfig {
    DecoderConfig { dim: 32, depth: 1, heads: 2 }
}

pub fn desk_model(seed: u64) -> Viact {
    Viact::new(desk_config(), desk_decoder(), &mut rng::stream(seed, rng::STREAM_INIT)).unwrap()
}
