use crate::error::{usage_err, Result};
use crate::geometry::{extract_patches, Clip, PointTrajectorySet};
use crate::model::Viact;

/// Forward pass of the tracker on exactly one block of frames. Every frame
/// starts at the query points; `refine` extra passes resample patches at
/// the previous prediction.
pub fn predict_track(
    model: &Viact,
    clip: &Clip,
    queries: &[(f32, f32)],
    apex: Option<usize>,
    refine: usize,
) -> Result<PointTrajectorySet> {
    let cfg = model.config();
    if clip.frames() != cfg.frames {
        return usage_err(format!(
            "tracker block is {} frames, clip has {}",
            cfg.frames,
            clip.frames()
        ));
    }
    let mut current = PointTrajectorySet::repeat_frame(queries, cfg.frames, apex)?;
    for _ in 0..=refine {
        current = track_pass(model, clip, &current)?;
    }
    Ok(current)
}

/// One tracker pass initialized at `init`.
pub(crate) fn track_pass(model: &Viact, clip: &Clip, init: &PointTrajectorySet) -> Result<PointTrajectorySet> {
    let patches = extract_patches(clip, init, model.config().patch_size)?;
    let mut s = model.session(false);
    let tokens = s.assemble_tokens(&patches, init)?;
    let out = s.encode(&tokens, false)?;
    let pred = s.predict_points(&out, init)?;
    PointTrajectorySet::new(
        init.frames(),
        init.points(),
        s.tape.value(pred).data().to_vec(),
        init.apex_index(),
    )
}

/// Track through a clip of any length in blocks of the model's frame
/// count. Consecutive blocks share one frame: the next block starts where
/// the previous one ended and takes its final predictions as queries. The
/// last block is padded by repeating the final frame; predictions on
/// padding are dropped.
pub fn track_long(
    model: &Viact,
    clip: &Clip,
    queries: &[(f32, f32)],
    apex: Option<usize>,
    refine: usize,
) -> Result<PointTrajectorySet> {
    let block = model.config().frames;
    let total = clip.frames();
    if total < 2 {
        return usage_err("long-clip tracking needs at least 2 frames");
    }
    if block < 2 {
        return usage_err("long-clip tracking needs blocks of at least 2 frames");
    }
    let n = queries.len();
    let mut coords = vec![0.0f32; total * n * 2];
    let mut q = queries.to_vec();
    let mut start = 0;
    loop {
        let len = block.min(total - start);
        let window = clip.window(start, 1, len)?.pad_to(block);
        let pred = predict_track(model, &window, &q, apex, refine)?;
        let first = usize::from(start > 0);
        for k in first..len {
            let t = start + k;
            coords[t * n * 2..(t + 1) * n * 2].copy_from_slice(&pred.coords()[k * n * 2..(k + 1) * n * 2]);
        }
        if start + len >= total {
            break;
        }
        q = pred.frame(len - 1);
        start += len - 1;
    }
    PointTrajectorySet::new(total, n, coords, apex)
}
