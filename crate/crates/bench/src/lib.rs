//! Fixtures shared by the benchmarks.

use viact_core::phantom::{render_sample, PhantomSample, PhantomSpec};
use viact_core::{rng, DecoderConfig, ModelConfig, PosEmbedVariant, Viact};

/// A 128x128 phantom with 21 centerline points over 20 frames.
pub fn phantom() -> PhantomSample {
    let spec = PhantomSpec {
        height: 128,
        width: 128,
        frames: 20,
        rows: 1,
        contour_points: 21,
        band_half_width: 8.0,
        ..PhantomSpec::default()
    };
    render_sample(&spec).expect("bench phantom renders")
}

/// Encoder of width `dim` over 18 frames of 21 points.
pub fn model(dim: usize, depth: usize) -> Viact {
    let mut cfg = ModelConfig::tiny().with_dims(dim, 2, depth);
    cfg.patch_size = 8;
    cfg.points = 21;
    cfg.coord_scale = 128.0;
    cfg.pos_embed = PosEmbedVariant::ApexSincos;
    let dec = DecoderConfig { dim: 32, depth: 1, heads: 2 };
    Viact::new(cfg, dec, &mut rng::stream(0, rng::STREAM_INIT)).expect("bench model builds")
}
