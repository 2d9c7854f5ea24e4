use super::{LinearIds, Session};
use crate::error::{shape_err, usage_err, Result};
use crate::geometry::{PatchSet, PointTrajectorySet};
use crate::model::PosEmbedVariant;
use crate::numerics::{Tensor, Var};

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Class,
    Point { frame: usize, point: usize },
}

/// Token matrix on a tape with per-row provenance. The class token, when
/// present, is row 0.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub origin: Vec<TokenOrigin>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn has_class(&self) -> bool {
        self.origin.first() == Some(&TokenOrigin::Class)
    }

    /// Row indices of the point tokens.
    pub fn point_rows(&self) -> Vec<usize> {
        (usize::from(self.has_class())..self.origin.len()).collect()
    }
}

/// 1D sinusoid of `v` over `dim` channels: `(sin, cos)` pairs at
/// frequencies `10000^(-2i/dim)`.
pub fn sincos_embed(v: f32, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = v as f64 * freq;
        out[2 * i] = a.sin() as f32;
        out[2 * i + 1] = a.cos() as f32;
    }
    out
}

impl Session<'_> {
    /// Shared linear map from flattened patches to the embedding width.
    pub fn embed_patches(&mut self, patches: Var) -> Result<Var> {
        let ids = self.model().enc.patch;
        let (_, width) = self.tape.value(patches).dims2();
        if width != self.config().patch_len() {
            return shape_err(format!(
                "patch length {width} != {}",
                self.config().patch_len()
            ));
        }
        self.linear(patches, ids)
    }

    /// Reference point for apex-relative variants: the apex on frame 0.
    pub(crate) fn apex_reference(&self, points: &PointTrajectorySet, variant: PosEmbedVariant) -> Result<Option<(f32, f32)>> {
        if !variant.is_apex_relative() {
            return Ok(None);
        }
        match points.apex_index() {
            Some(a) => Ok(Some(points.get(0, a))),
            None => usage_err(format!("{variant} needs an apex point index")),
        }
    }

    /// `rho(p - reference)` for every coordinate, with the given variant and width.
    pub(crate) fn positional(
        &mut self,
        coords: &[(f32, f32)],
        reference: Option<(f32, f32)>,
        variant: PosEmbedVariant,
        dim: usize,
        linear: Option<LinearIds>,
    ) -> Result<Var> {
        let (rx, ry) = reference.unwrap_or((0.0, 0.0));
        let rel: Vec<(f32, f32)> = coords.iter().map(|&(x, y)| (x - rx, y - ry)).collect();
        if variant.is_linear() {
            let Some(ids) = linear else {
                return usage_err("linear positional embedding has no parameters");
            };
            let s = self.config().coord_scale;
            let data = rel.iter().flat_map(|&(x, y)| [x / s, y / s]).collect();
            let c = self.tape.constant(Tensor::new(vec![rel.len(), 2], data)?)?;
            self.linear(c, ids)
        } else {
            let mut data = Vec::with_capacity(rel.len() * dim);
            for &(x, y) in &rel {
                let ex = sincos_embed(x, dim);
                let ey = sincos_embed(y, dim);
                data.extend(ex.iter().zip(&ey).map(|(a, b)| a + b));
            }
            self.tape.constant(Tensor::new(vec![rel.len(), dim], data)?)
        }
    }

    /// Positional embedding of every point on every frame, `(T*N) x k`.
    pub fn positional_embed(&mut self, points: &PointTrajectorySet) -> Result<Var> {
        let variant = self.config().pos_embed;
        let reference = self.apex_reference(points, variant)?;
        let coords: Vec<(f32, f32)> = points.coords().chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let dim = self.config().embed_dim;
        let ids = self.model().enc.pos;
        self.positional(&coords, reference, variant, dim, ids)
    }

    /// Learned per-frame embedding rows for the given frame indices.
    pub fn temporal_embed(&mut self, frames: &[usize]) -> Result<Var> {
        let t = self.config().frames;
        if let Some(bad) = frames.iter().find(|&&f| f >= t) {
            return usage_err(format!("frame index {bad} out of {t}"));
        }
        let table = self.p(self.model().enc.temporal)?;
        self.tape.gather_rows(table, frames)
    }

    /// Tokens for every point on every frame, plus the class token if enabled.
    pub fn assemble_tokens(&mut self, patches: &PatchSet, points: &PointTrajectorySet) -> Result<TokenBatch> {
        let all: Vec<usize> = (0..points.frames() * points.points()).collect();
        self.assemble_subset(patches, points, &all)
    }

    /// Tokens for the listed `t * N + i` slots only (in the given order).
    pub fn assemble_subset(
        &mut self,
        patches: &PatchSet,
        points: &PointTrajectorySet,
        slots: &[usize],
    ) -> Result<TokenBatch> {
        let cfg = self.config();
        if patches.frames() != points.frames() || patches.points() != points.points() {
            return usage_err("patches and points disagree on frames/points");
        }
        if points.frames() != cfg.frames {
            return usage_err(format!(
                "model expects {} frames, got {}",
                cfg.frames,
                points.frames()
            ));
        }
        if patches.patch_size() != cfg.patch_size {
            return usage_err(format!(
                "model expects {}px patches, got {}",
                cfg.patch_size,
                patches.patch_size()
            ));
        }
        let n = points.points();
        let total = points.frames() * n;
        if let Some(bad) = slots.iter().find(|&&s| s >= total) {
            return usage_err(format!("token slot {bad} out of {total}"));
        }
        let l = patches.patch_len();
        let mut pdata = Vec::with_capacity(slots.len() * l);
        let mut coords = Vec::with_capacity(slots.len());
        let mut frames = Vec::with_capacity(slots.len());
        let mut origin = Vec::with_capacity(slots.len() + 1);
        for &s in slots {
            let (t, i) = (s / n, s % n);
            pdata.extend_from_slice(patches.patch(t, i));
            coords.push(points.get(t, i));
            frames.push(t);
            origin.push(TokenOrigin::Point { frame: t, point: i });
        }
        let pvar = self.tape.constant(Tensor::new(vec![slots.len(), l], pdata)?)?;
        let emb = self.embed_patches(pvar)?;
        let variant = cfg.pos_embed;
        let reference = self.apex_reference(points, variant)?;
        let pos = self.positional(&coords, reference, variant, cfg.embed_dim, self.model().enc.pos)?;
        let tem = self.temporal_embed(&frames)?;
        let sum = self.tape.add(emb, pos)?;
        let mut tokens = self.tape.add(sum, tem)?;
        if let Some(cls) = self.model().enc.class_token {
            let c = self.p(cls)?;
            tokens = self.tape.concat_rows(&[c, tokens])?;
            origin.insert(0, TokenOrigin::Class);
        }
        Ok(TokenBatch { tokens, origin })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::DecoderConfig;
    use crate::model::{ModelConfig, Viact};
    use crate::rng;

    fn micro(variant: PosEmbedVariant) -> Viact {
        let mut cfg = ModelConfig::tiny().with_dims(8, 2, 1);
        cfg.patch_size = 2;
        cfg.frames = 2;
        cfg.points = 3;
        cfg.pos_embed = variant;
        let dec = DecoderConfig { dim: 4, depth: 1, heads: 1 };
        Viact::new(cfg, dec, &mut rng::stream(1, rng::STREAM_INIT)).unwrap()
    }

    #[test]
    fn sincos_at_zero_alternates() {
        let e = sincos_embed(0.0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn point_sincos_origin_is_doubled_pattern() {
        let m = micro(PosEmbedVariant::PointSincos);
        let pts = PointTrajectorySet::repeat_frame(&[(0.0, 0.0)], 2, None).unwrap();
        let mut s = m.session(false);
        let v = s.positional_embed(&pts).unwrap();
        assert_eq!(s.tape.value(v).row(0), &[0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn apex_linear_at_apex_is_bias() {
        let mut m = micro(PosEmbedVariant::ApexLinear);
        let bias_id = m.enc.pos.unwrap().b;
        *m.store_mut().value_mut(bias_id) = Tensor::from_fn(&[8], |i| i as f32 * 0.1);
        let pts = PointTrajectorySet::repeat_frame(&[(30.0, 40.0); 3], 2, Some(1)).unwrap();
        let mut s = m.session(false);
        let v = s.positional_embed(&pts).unwrap();
        let bias = m.store().value(bias_id).data().to_vec();
        for r in 0..6 {
            assert_eq!(s.tape.value(v).row(r), bias.as_slice());
        }
    }

    #[test]
    fn apex_variants_ignore_global_offsets() {
        for variant in [PosEmbedVariant::ApexSincos, PosEmbedVariant::ApexLinear] {
            let m = micro(variant);
            let pts = PointTrajectorySet::new(
                2,
                3,
                vec![10.0, 12.0, 15.0, 9.0, 20.0, 13.0, 11.0, 12.5, 15.0, 10.0, 19.0, 13.5],
                Some(1),
            )
            .unwrap();
            let moved = pts.translate(7.0, -3.0);
            let mut s = m.session(false);
            let a = s.positional_embed(&pts).unwrap();
            let b = s.positional_embed(&moved).unwrap();
            assert!(s.tape.value(a).max_abs_diff(s.tape.value(b)) < 1e-5, "{variant}");
        }
    }

    #[test]
    fn apex_variant_without_apex_is_usage_error() {
        let m = micro(PosEmbedVariant::ApexSincos);
        let pts = PointTrajectorySet::repeat_frame(&[(1.0, 1.0); 3], 2, None).unwrap();
        let mut s = m.session(false);
        assert!(matches!(s.positional_embed(&pts), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn temporal_lookup_bounds_and_determinism() {
        let m = micro(PosEmbedVariant::PointSincos);
        let mut s = m.session(false);
        let a = s.temporal_embed(&[1, 0]).unwrap();
        let b = s.temporal_embed(&[1, 0]).unwrap();
        assert_eq!(s.tape.value(a), s.tape.value(b));
        assert!(s.temporal_embed(&[2]).is_err());
    }

    #[test]
    fn zeroed_embeddings_give_zero_tokens() {
        let mut m = micro(PosEmbedVariant::PointLinear);
        let ids: Vec<_> = m.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = m.store().value(id).shape().to_vec();
            *m.store_mut().value_mut(id) = Tensor::zeros(&shape);
        }
        let pts = PointTrajectorySet::repeat_frame(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)], 2, None).unwrap();
        let patches = PatchSet::new(2, 3, 2, vec![0.5; 24]).unwrap();
        let mut s = m.session(false);
        let tb = s.assemble_tokens(&patches, &pts).unwrap();
        assert_eq!(tb.len(), 7);
        assert!(s.tape.value(tb.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_token_count() {
        let cfg = ModelConfig::tiny();
        assert_eq!(cfg.total_tokens(), 1513);
    }
}
