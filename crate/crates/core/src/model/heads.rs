use super::{EncoderOutput, Session, Viact};
use crate::error::{usage_err, Result};
use crate::geometry::{extract_patches, Clip, PointTrajectorySet};
use crate::numerics::{Tape, Tensor, Var};

impl Session<'_> {
    fn class_row(&mut self, out: &EncoderOutput) -> Result<Var> {
        if !out.has_class() {
            return usage_err("this head needs the class token, which is disabled");
        }
        self.tape.gather_rows(out.encodings, &[0])
    }

    fn point_rows(&mut self, out: &EncoderOutput) -> Result<Var> {
        if out.has_class() {
            let rows: Vec<usize> = (1..out.origin.len()).collect();
            self.tape.gather_rows(out.encodings, &rows)
        } else {
            Ok(out.encodings)
        }
    }

    /// Per-token displacement `(dx, dy)`, class token excluded. `(T*N) x 2`.
    pub fn tracking_head(&mut self, out: &EncoderOutput) -> Result<Var> {
        let rows = self.point_rows(out)?;
        let ids = self.model().heads.track;
        self.linear(rows, ids)
    }

    /// Initialized points plus predicted displacements, `(T*N) x 2`.
    pub fn predict_points(&mut self, out: &EncoderOutput, init: &PointTrajectorySet) -> Result<Var> {
        let delta = self.tracking_head(out)?;
        let n = init.frames() * init.points();
        let base = self.tape.constant(Tensor::new(vec![n, 2], init.coords().to_vec())?)?;
        self.tape.add(base, delta)
    }

    /// Sum of absolute coordinate differences against ground truth.
    pub fn tracking_loss(&mut self, predicted: Var, truth: &PointTrajectorySet) -> Result<Var> {
        let n = truth.frames() * truth.points();
        let gt = self.tape.constant(Tensor::new(vec![n, 2], truth.coords().to_vec())?)?;
        self.tape.l1(predicted, gt)
    }

    /// Binary logit from the class encoding.
    pub fn classification_head(&mut self, out: &EncoderOutput) -> Result<Var> {
        let row = self.class_row(out)?;
        let ids = self.model().heads.classify;
        self.linear(row, ids)
    }

    /// Ejection-fraction estimate in `(0, 1)` from the class encoding.
    pub fn ef_head(&mut self, out: &EncoderOutput) -> Result<Var> {
        let row = self.class_row(out)?;
        let ids = self.model().heads.ef;
        let z = self.linear(row, ids)?;
        self.tape.sigmoid(z)
    }

    pub fn ef_loss(&mut self, prediction: Var, target: f32) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return usage_err(format!("EF target {target} outside [0, 1]"));
        }
        let t = self.tape.constant(Tensor::new(vec![1, 1], vec![target])?)?;
        self.tape.mse(prediction, t)
    }
}

/// Min-max normalize to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Class-token attention of one head in one block, as a `frames x points`
/// map normalized over the whole sequence. Also returns the raw query row
/// (class column included) for inspection.
pub fn attention_map(
    tape: &Tape,
    out: &EncoderOutput,
    block: usize,
    head: usize,
    frames: usize,
    points: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if !out.has_class() {
        return usage_err("attention maps need the class token");
    }
    let (heads, probs) = out.attention(tape, block)?;
    if head >= heads {
        return usage_err(format!("head {head} out of {heads}"));
    }
    let m = out.origin.len();
    if m != frames * points + 1 {
        return usage_err(format!(
            "{m} tokens do not form a {frames} x {points} map plus class token"
        ));
    }
    let raw = probs[head * m * m..head * m * m + m].to_vec();
    let map = normalize_min_max(&raw[1..]);
    Ok((map, raw))
}

impl Viact {
    /// [`attention_map`] of one clip tokenized at `points`.
    pub fn class_attention(
        &self,
        clip: &Clip,
        points: &PointTrajectorySet,
        block: usize,
        head: usize,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let cfg = self.config();
        if !cfg.use_class_token {
            return usage_err("attention maps need the class token, which this model lacks");
        }
        if block >= cfg.depth {
            return usage_err(format!("block {block} out of {}", cfg.depth));
        }
        let patches = extract_patches(clip, points, cfg.patch_size)?;
        let mut s = self.session(false);
        let tokens = s.assemble_tokens(&patches, points)?;
        let out = s.encode(&tokens, true)?;
        attention_map(&s.tape, &out, block, head, points.frames(), points.points())
    }
}
