//! Tokenizer, transformer encoder, task heads and attention maps.

mod config;
mod encoder;
mod heads;
mod tokenizer;

use std::collections::HashMap;

use rand::Rng;

pub use config::{ModelConfig, PosEmbedVariant};
pub use encoder::EncoderOutput;
pub use heads::{attention_map, normalize_min_max};
pub use tokenizer::{sincos_embed, TokenBatch, TokenOrigin};

use crate::error::{Error, Result};
use crate::mae::DecoderConfig;
use crate::numerics::{trunc_normal, xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub proj: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Width and depth of one transformer stack.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StackShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub eps: f32,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderIds {
    pub patch: LinearIds,
    pub pos: Option<LinearIds>,
    pub temporal: ParamId,
    pub class_token: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadIds {
    pub track: LinearIds,
    pub classify: LinearIds,
    pub ef: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderIds {
    pub embed: LinearIds,
    pub mask_token: ParamId,
    pub pos: Option<LinearIds>,
    pub temporal: ParamId,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub recon: LinearIds,
}

/// Parameter factory: initializes fresh parameters in a fixed order.
struct Builder<'r, R: Rng> {
    store: ParamStore,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<LinearIds> {
        let w = xavier_uniform(self.rng, inp, out);
        self.linear_with(name, w, out)
    }

    /// Task heads start small so fine-tuning begins near a constant output.
    fn head(&mut self, name: &str, inp: usize, out: usize) -> Result<LinearIds> {
        let w = trunc_normal(self.rng, &[inp, out], INIT_STD);
        self.linear_with(name, w, out)
    }

    fn linear_with(&mut self, name: &str, w: Tensor, out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.store.add(format!("{name}.weight"), w, true)?,
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[out]), false)?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false)?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false)?,
        })
    }

    fn embedding(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = trunc_normal(self.rng, shape, INIT_STD);
        self.store.add(name, t, false)
    }

    fn block(&mut self, name: &str, s: StackShape) -> Result<BlockIds> {
        Ok(BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), s.dim)?,
            q: self.linear(&format!("{name}.attn.q"), s.dim, s.dim)?,
            k: self.linear(&format!("{name}.attn.k"), s.dim, s.dim)?,
            v: self.linear(&format!("{name}.attn.v"), s.dim, s.dim)?,
            proj: self.linear(&format!("{name}.attn.proj"), s.dim, s.dim)?,
            ln2: self.norm(&format!("{name}.ln2"), s.dim)?,
            fc1: self.linear(&format!("{name}.mlp.fc1"), s.dim, s.mlp_hidden)?,
            fc2: self.linear(&format!("{name}.mlp.fc2"), s.mlp_hidden, s.dim)?,
        })
    }
}

/// Full parameter set: encoder, task heads and masked-autoencoder decoder.
#[derive(Clone, Debug)]
pub struct Viact {
    config: ModelConfig,
    decoder_config: DecoderConfig,
    store: ParamStore,
    pub(crate) enc: EncoderIds,
    pub(crate) heads: HeadIds,
    pub(crate) dec: DecoderIds,
}

impl Viact {
    pub fn new<R: Rng>(config: ModelConfig, decoder_config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        decoder_config.validate(&config)?;
        let k = config.embed_dim;
        let d = decoder_config.dim;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let enc_shape = StackShape {
            dim: k,
            heads: config.heads,
            mlp_hidden: config.mlp_hidden,
            eps: config.ln_eps,
        };
        let enc = EncoderIds {
            patch: b.linear("encoder.patch_embed", config.patch_len(), k)?,
            pos: if config.pos_embed.is_linear() {
                Some(b.linear("encoder.pos_embed", 2, k)?)
            } else {
                None
            },
            temporal: b.embedding("encoder.temporal_embed", &[config.frames, k])?,
            class_token: if config.use_class_token {
                Some(b.embedding("encoder.class_token", &[1, k])?)
            } else {
                None
            },
            blocks: (0..config.depth)
                .map(|i| b.block(&format!("encoder.blocks.{i}"), enc_shape))
                .collect::<Result<_>>()?,
            norm: b.norm("encoder.norm", k)?,
        };
        let heads = HeadIds {
            track: b.head("head.track", k, 2)?,
            classify: b.head("head.classify", k, 1)?,
            ef: b.head("head.ef", k, 1)?,
        };
        let dec_shape = StackShape {
            dim: d,
            heads: decoder_config.heads,
            mlp_hidden: 4 * d,
            eps: config.ln_eps,
        };
        let dec = DecoderIds {
            embed: b.linear("decoder.embed", k, d)?,
            mask_token: b.embedding("decoder.mask_token", &[1, d])?,
            pos: if config.pos_embed.is_linear() {
                Some(b.linear("decoder.pos_embed", 2, d)?)
            } else {
                None
            },
            temporal: b.embedding("decoder.temporal_embed", &[config.frames, d])?,
            blocks: (0..decoder_config.depth)
                .map(|i| b.block(&format!("decoder.blocks.{i}"), dec_shape))
                .collect::<Result<_>>()?,
            norm: b.norm("decoder.norm", d)?,
            recon: b.linear("decoder.recon", d, config.patch_len())?,
        };
        Ok(Self {
            config,
            decoder_config,
            store: b.store,
            enc,
            heads,
            dec,
        })
    }

    /// Rebuild a model from saved parameters. Names and shapes must match the
    /// layout implied by the two configs exactly.
    pub fn from_store(config: ModelConfig, decoder_config: DecoderConfig, store: ParamStore) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::STREAM_INIT);
        let mut model = Self::new(config, decoder_config, &mut rng)?;
        if store.len() != model.store.len() {
            return Err(Error::ConfigMismatch {
                field: "parameter count".into(),
                expected: model.store.len().to_string(),
                found: store.len().to_string(),
            });
        }
        for ((_, want), (_, got)) in model.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::ConfigMismatch {
                    field: want.name.clone(),
                    expected: format!("{} {:?}", want.name, want.value.shape()),
                    found: format!("{} {:?}", got.name, got.value.shape()),
                });
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.decoder_config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Copy every `encoder.*` parameter from `other`, leaving heads and decoder alone.
    pub fn load_encoder_from(&mut self, other: &Viact) -> Result<()> {
        for id in self.params_with_prefix("encoder.") {
            let name = self.store.get(id).name.clone();
            let src = other.store.id(&name).ok_or_else(|| Error::ConfigMismatch {
                field: name.clone(),
                expected: "present".into(),
                found: "missing".into(),
            })?;
            let value = other.store.value(src);
            if value.shape() != self.store.value(id).shape() {
                return Err(Error::ConfigMismatch {
                    field: name,
                    expected: format!("{:?}", self.store.value(id).shape()),
                    found: format!("{:?}", value.shape()),
                });
            }
            *self.store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Start a forward pass. `train` decides whether parameters receive gradients.
    pub fn session(&self, train: bool) -> Session<'_> {
        Session {
            tape: Tape::new(),
            model: self,
            train,
            bound: HashMap::new(),
        }
    }
}

/// One forward pass over a [`Viact`]: a tape plus parameter bindings.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Viact,
    train: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Viact {
        self.model
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    /// Tape variable for a parameter, created on first use.
    pub(crate) fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = if self.train {
            self.tape.param(&self.model.store, id)?
        } else {
            self.tape.frozen_param(&self.model.store, id)?
        };
        self.bound.insert(id, v);
        Ok(v)
    }

    pub(crate) fn linear(&mut self, x: Var, ids: LinearIds) -> Result<Var> {
        let w = self.p(ids.w)?;
        let b = self.p(ids.b)?;
        self.tape.linear(x, w, Some(b))
    }

    pub(crate) fn norm(&mut self, x: Var, ids: NormIds, eps: f32) -> Result<Var> {
        let g = self.p(ids.gamma)?;
        let b = self.p(ids.beta)?;
        self.tape.layer_norm(x, g, b, eps)
    }

    /// Back-propagate `loss` and return per-parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<crate::numerics::ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(grads.param_grads(self.model.store.len()))
    }
}
