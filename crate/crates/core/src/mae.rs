//! Anatomical masked-autoencoder pre-training.
//!
//! A random subset of point tokens is hidden. The encoder sees the rest
//! (plus the class token); a narrower decoder receives the encodings with a
//! shared mask token in every hidden slot, original order restored and
//! point/frame embeddings added, and regresses the hidden pixel patches.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::geometry::{PatchSet, PointTrajectorySet};
use crate::model::{ModelConfig, Session, StackShape};
use crate::numerics::{Tensor, Var};

/// Decoder transformer size. Narrower and shallower than the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            depth: 4,
            heads: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder: &ModelConfig) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(2) {
            return usage_err(format!(
                "decoder dim {} must be even and a multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.dim > encoder.embed_dim {
            return usage_err(format!(
                "decoder dim {} exceeds encoder dim {}",
                self.dim, encoder.embed_dim
            ));
        }
        Ok(())
    }
}

/// Partition of the `T*N` point tokens into hidden and visible slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub total_tokens: usize,
    pub mask_ratio: f64,
    /// Hidden slots, ascending.
    pub masked: Vec<usize>,
    /// Visible slots, ascending.
    pub keep: Vec<usize>,
}

/// `floor(ratio * total)`, robust to the representation error of `ratio`.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64 + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Uniform random subset of `floor(ratio * total)` slots.
    pub fn sample<R: Rng + ?Sized>(total: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return usage_err(format!("mask ratio {ratio} outside (0, 1)"));
        }
        let count = masked_count(total, ratio);
        if count == 0 {
            return usage_err(format!(
                "mask ratio {ratio} hides no token out of {total}; nothing to reconstruct"
            ));
        }
        let mut masked = index::sample(rng, total, count).into_vec();
        masked.sort_unstable();
        Self::from_masked(total, ratio, masked)
    }

    /// Plan with an explicit hidden set.
    pub fn from_masked(total: usize, ratio: f64, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return usage_err("masked slot out of range");
        }
        if masked.is_empty() || masked.len() == total {
            return usage_err("plan must hide at least one and show at least one token");
        }
        let mut hidden = vec![false; total];
        masked.iter().for_each(|&m| hidden[m] = true);
        let keep = (0..total).filter(|&s| !hidden[s]).collect();
        Ok(Self {
            total_tokens: total,
            mask_ratio: ratio,
            masked,
            keep,
        })
    }
}

/// Loss and reconstructions of one masked-autoencoder pass.
#[derive(Clone, Debug)]
pub struct MaeOutput {
    pub loss: Var,
    /// `masked x j^2` predicted patches, in `plan.masked` order.
    pub reconstructions: Var,
    /// Rows fed to the encoder, class token included.
    pub encoder_tokens: usize,
}

impl Session<'_> {
    /// Decoder input in original slot order: visible encodings go back to
    /// their slots and every hidden slot gets the mask token. With a class
    /// token, `visible` row 0 is the class encoding and stays first.
    pub fn restore_order(&mut self, visible: Var, mask_token: Var, plan: &MaskPlan, has_class: bool) -> Result<Var> {
        let offset = usize::from(has_class);
        let rows = self.tape.value(visible).dims2().0;
        if rows != plan.keep.len() + offset {
            return usage_err(format!(
                "{rows} visible encodings for {} kept slots",
                plan.keep.len()
            ));
        }
        let pool = self.tape.concat_rows(&[visible, mask_token])?;
        let mask_row = rows;
        let mut slot_row = vec![mask_row; plan.total_tokens];
        for (k, &s) in plan.keep.iter().enumerate() {
            slot_row[s] = offset + k;
        }
        let mut index = Vec::with_capacity(plan.total_tokens + offset);
        if has_class {
            index.push(0);
        }
        index.extend(slot_row);
        self.tape.gather_rows(pool, &index)
    }

    /// Masked-autoencoder loss with the input patches as targets.
    pub fn mae_forward(&mut self, patches: &PatchSet, points: &PointTrajectorySet, plan: &MaskPlan) -> Result<MaeOutput> {
        let l = patches.patch_len();
        let n = patches.frames() * patches.points();
        let targets = self.tape.constant(Tensor::new(vec![n, l], patches.data().to_vec())?)?;
        self.mae_forward_with_targets(patches, targets, points, plan)
    }

    /// Masked-autoencoder loss against explicit `(T*N) x j^2` targets. Only
    /// rows of hidden slots enter the loss.
    pub fn mae_forward_with_targets(
        &mut self,
        patches: &PatchSet,
        targets: Var,
        points: &PointTrajectorySet,
        plan: &MaskPlan,
    ) -> Result<MaeOutput> {
        let total = points.frames() * points.points();
        if plan.total_tokens != total {
            return usage_err(format!(
                "mask plan sized for {} tokens, clip has {total}",
                plan.total_tokens
            ));
        }
        if self.tape.value(targets).dims2() != (total, patches.patch_len()) {
            return usage_err("target patch matrix has the wrong shape");
        }
        let model = self.model();
        let cfg = model.config();
        let dcfg = *model.decoder_config();
        let ids = &model.dec;

        let tokens = self.assemble_subset(patches, points, &plan.keep)?;
        let has_class = tokens.has_class();
        let encoder_tokens = tokens.len();
        let encoded = self.encode(&tokens, false)?;
        let projected = self.linear(encoded.encodings, ids.embed)?;
        let mask_token = self.p(ids.mask_token)?;
        let restored = self.restore_order(projected, mask_token, plan, has_class)?;

        let coords: Vec<(f32, f32)> = points.coords().chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let reference = self.apex_reference(points, cfg.pos_embed)?;
        let pos = self.positional(&coords, reference, cfg.pos_embed, dcfg.dim, ids.pos)?;
        let frames: Vec<usize> = (0..total).map(|s| s / points.points()).collect();
        let table = self.p(ids.temporal)?;
        let tem = self.tape.gather_rows(table, &frames)?;
        let mut slot_emb = self.tape.add(pos, tem)?;
        if has_class {
            let zero = self.tape.constant(Tensor::zeros(&[1, dcfg.dim]))?;
            slot_emb = self.tape.concat_rows(&[zero, slot_emb])?;
        }
        let x = self.tape.add(restored, slot_emb)?;
        let shape = StackShape {
            dim: dcfg.dim,
            heads: dcfg.heads,
            mlp_hidden: 4 * dcfg.dim,
            eps: cfg.ln_eps,
        };
        let (decoded, _) = self.run_stack(x, &ids.blocks, ids.norm, shape)?;
        let offset = usize::from(has_class);
        let hidden_rows: Vec<usize> = plan.masked.iter().map(|&s| s + offset).collect();
        let hidden = self.tape.gather_rows(decoded, &hidden_rows)?;
        let reconstructions = self.linear(hidden, ids.recon)?;
        let wanted = self.tape.gather_rows(targets, &plan.masked)?;
        let loss = self.tape.mse(reconstructions, wanted)?;
        Ok(MaeOutput {
            loss,
            reconstructions,
            encoder_tokens,
        })
    }
}

/// Token counts and attention cost of one model scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub scale: String,
    pub embed_dim: usize,
    pub depth: usize,
    /// Tokens from tiling every frame into `j x j` patches.
    pub tokens_full: usize,
    /// Tokens at anatomical points, `T * N`.
    pub tokens_anat: usize,
    /// Anatomical tokens the encoder sees at the mask ratio.
    pub tokens_visible: usize,
    /// Full-video tokens the encoder would see at the same ratio.
    pub tokens_visible_full: usize,
    pub mask_ratio: f64,
    /// `depth * M^2 * k` for full-sequence attention over anatomical tokens.
    pub attn_cost_estimate: u64,
    /// Same estimate for full-video tokens.
    pub attn_cost_full: u64,
}

/// Compare anatomical tokenization with tiling whole frames, per scale.
pub fn token_cost_profile(
    scales: &[(String, ModelConfig)],
    height: usize,
    width: usize,
    mask_ratio: f64,
) -> Result<Vec<ProfileRecord>> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return usage_err(format!("mask ratio {mask_ratio} outside (0, 1)"));
    }
    scales
        .iter()
        .map(|(name, cfg)| {
            let j = cfg.patch_size;
            if j == 0 || !height.is_multiple_of(j) || !width.is_multiple_of(j) {
                return usage_err(format!(
                    "{height}x{width} frames do not tile into {j}px patches"
                ));
            }
            let tokens_full = cfg.frames * (height / j) * (width / j);
            let tokens_anat = cfg.point_tokens();
            let cost = |m: usize| (cfg.depth as u64) * (m as u64) * (m as u64) * (cfg.embed_dim as u64);
            Ok(ProfileRecord {
                scale: name.clone(),
                embed_dim: cfg.embed_dim,
                depth: cfg.depth,
                tokens_full,
                tokens_anat,
                tokens_visible: tokens_anat - masked_count(tokens_anat, mask_ratio),
                tokens_visible_full: tokens_full - masked_count(tokens_full, mask_ratio),
                mask_ratio,
                attn_cost_estimate: cost(tokens_anat),
                attn_cost_full: cost(tokens_full),
            })
        })
        .collect()
}

/// Tiny, small and base widths at the default tokenization.
pub fn default_scales() -> Vec<(String, ModelConfig)> {
    vec![
        ("tiny".to_string(), ModelConfig::tiny()),
        ("small".to_string(), ModelConfig::small()),
        ("base".to_string(), ModelConfig::base()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extract_patches;
    use crate::model::{PosEmbedVariant, Viact};
    use crate::phantom::{render_sample, PhantomSpec};
    use crate::rng;

    #[test]
    fn mask_counts() {
        let mut r = rng::stream(1, rng::STREAM_MASK);
        let plan = MaskPlan::sample(1512, 0.9, &mut r).unwrap();
        assert_eq!(plan.masked.len(), 1360);
        assert_eq!(plan.keep.len(), 152);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.keep).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1512).collect::<Vec<_>>());
    }

    #[test]
    fn mask_rejects_bad_ratios() {
        let mut r = rng::stream(1, rng::STREAM_MASK);
        assert!(MaskPlan::sample(10, 0.0, &mut r).is_err());
        assert!(MaskPlan::sample(10, 1.0, &mut r).is_err());
        assert!(MaskPlan::sample(10, 0.05, &mut r).is_err());
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let a = MaskPlan::sample(378, 0.9, &mut rng::stream(9, rng::STREAM_MASK)).unwrap();
        let b = MaskPlan::sample(378, 0.9, &mut rng::stream(9, rng::STREAM_MASK)).unwrap();
        let c = MaskPlan::sample(378, 0.9, &mut rng::stream(10, rng::STREAM_MASK)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn profile_arithmetic() {
        let recs = token_cost_profile(&default_scales(), 224, 224, 0.9).unwrap();
        let tiny = &recs[0];
        assert_eq!(tiny.tokens_full, 3528);
        assert_eq!(tiny.tokens_anat, 1512);
        assert_eq!(tiny.tokens_visible, 152);
        assert_eq!(tiny.tokens_visible_full, 353);
        let ratio = tiny.attn_cost_estimate as f64 / tiny.attn_cost_full as f64;
        assert!((ratio - (1512.0f64 / 3528.0).powi(2)).abs() < 1e-12);
        assert!((1512.0f64 / 3528.0 - 0.4286).abs() < 1e-4);
        assert!(token_cost_profile(&default_scales(), 225, 224, 0.9).is_err());
    }

    #[test]
    fn doubling_tokens_quadruples_cost() {
        let mut c = ModelConfig::tiny();
        let a = token_cost_profile(&[("a".into(), c.clone())], 224, 224, 0.9).unwrap();
        c.points *= 2;
        let b = token_cost_profile(&[("b".into(), c)], 224, 224, 0.9).unwrap();
        assert_eq!(b[0].attn_cost_estimate, 4 * a[0].attn_cost_estimate);
    }

    fn micro_model(variant: PosEmbedVariant) -> Viact {
        let mut cfg = ModelConfig::tiny().with_dims(16, 2, 1);
        cfg.patch_size = 4;
        cfg.frames = 3;
        cfg.points = 5;
        cfg.pos_embed = variant;
        let dec = DecoderConfig { dim: 8, depth: 1, heads: 2 };
        Viact::new(cfg, dec, &mut rng::stream(2, rng::STREAM_INIT)).unwrap()
    }

    #[test]
    fn order_is_restored() {
        let m = micro_model(PosEmbedVariant::PointSincos);
        let plan = MaskPlan::from_masked(6, 0.5, vec![0, 3, 4]).unwrap();
        let mut s = m.session(false);
        // sentinel rows: class = -1, kept slot s = 100 + s
        let mut rows = vec![-1.0, -1.0];
        for &k in &plan.keep {
            rows.extend([100.0 + k as f32; 2]);
        }
        let vis = s.tape.constant(Tensor::new(vec![4, 2], rows).unwrap()).unwrap();
        let mask = s.tape.constant(Tensor::new(vec![1, 2], vec![7.0, 7.0]).unwrap()).unwrap();
        let out = s.restore_order(vis, mask, &plan, true).unwrap();
        let v = s.tape.value(out);
        assert_eq!(v.row(0), &[-1.0, -1.0]);
        for slot in 0..6 {
            let want = if plan.masked.contains(&slot) { 7.0 } else { 100.0 + slot as f32 };
            assert_eq!(v.row(slot + 1), &[want, want]);
        }
    }

    #[test]
    fn unmasked_targets_do_not_matter() {
        let m = micro_model(PosEmbedVariant::ApexLinear);
        let spec = PhantomSpec {
            height: 32,
            width: 32,
            frames: 3,
            ..PhantomSpec::small_test()
        };
        let sample = render_sample(&spec).unwrap();
        let pts = sample.points.clone();
        let sub: Vec<usize> = (0..5).map(|i| i * pts.points() / 5).collect();
        let coords: Vec<f32> = (0..3)
            .flat_map(|t| sub.iter().flat_map(move |&i| [t, i]))
            .collect::<Vec<_>>()
            .chunks(2)
            .flat_map(|c| {
                let (x, y) = pts.get(c[0], c[1]);
                [x, y]
            })
            .collect();
        let pts = PointTrajectorySet::new(3, 5, coords, Some(2)).unwrap();
        let patches = extract_patches(&sample.clip, &pts, 4).unwrap();
        let plan = MaskPlan::sample(15, 0.6, &mut rng::stream(3, rng::STREAM_MASK)).unwrap();

        let loss_with = |targets: Vec<f32>| {
            let mut s = m.session(true);
            let t = s.tape.leaf(Tensor::new(vec![15, 16], targets).unwrap(), true).unwrap();
            let out = s.mae_forward_with_targets(&patches, t, &pts, &plan).unwrap();
            let loss = s.tape.value(out.loss).item().unwrap();
            let grads = s.tape.backward(out.loss).unwrap();
            (loss, grads.wrt(t).unwrap().to_vec())
        };
        let base = patches.data().to_vec();
        let (l0, g0) = loss_with(base.clone());
        let mut perturbed = base.clone();
        for &k in &plan.keep {
            for v in &mut perturbed[k * 16..(k + 1) * 16] {
                *v = 1.0 - *v + 0.3;
            }
        }
        let (l1, _) = loss_with(perturbed);
        assert_eq!(l0, l1);
        for &k in &plan.keep {
            assert!(g0[k * 16..(k + 1) * 16].iter().all(|&g| g == 0.0));
        }
        let mut s = m.session(false);
        let out = s.mae_forward(&patches, &pts, &plan).unwrap();
        assert_eq!(out.encoder_tokens, 1 + plan.keep.len());
        assert_eq!(s.tape.value(out.reconstructions).shape(), &[plan.masked.len(), 16]);
    }
}
