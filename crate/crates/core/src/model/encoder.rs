use super::{BlockIds, NormIds, Session, StackShape, TokenBatch, TokenOrigin};
use crate::error::{shape_err, usage_err, Result};
use crate::numerics::{Tape, Var};

/// Encoded tokens with the attention nodes of each block.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub encodings: Var,
    pub origin: Vec<TokenOrigin>,
    attention: Option<Vec<Var>>,
}

impl EncoderOutput {
    pub fn has_class(&self) -> bool {
        self.origin.first() == Some(&TokenOrigin::Class)
    }

    /// `(heads, heads x M x M weights)` of `block`, if retained.
    pub fn attention<'t>(&self, tape: &'t Tape, block: usize) -> Result<(usize, &'t [f32])> {
        let Some(nodes) = &self.attention else {
            return usage_err("attention weights were not retained for this pass");
        };
        let Some(&node) = nodes.get(block) else {
            return usage_err(format!("block {block} out of {}", nodes.len()));
        };
        tape.attention_probs(node)
            .ok_or_else(|| crate::Error::Usage("not an attention node".into()))
    }

    pub fn blocks(&self) -> usize {
        self.attention.as_ref().map_or(0, |a| a.len())
    }
}

impl Session<'_> {
    /// Pre-norm transformer stack followed by a final layer norm.
    pub(crate) fn run_stack(
        &mut self,
        mut x: Var,
        blocks: &[BlockIds],
        norm: NormIds,
        shape: StackShape,
    ) -> Result<(Var, Vec<Var>)> {
        let mut attn_nodes = Vec::with_capacity(blocks.len());
        for b in blocks {
            let h = self.norm(x, b.ln1, shape.eps)?;
            let q = self.linear(h, b.q)?;
            let k = self.linear(h, b.k)?;
            let v = self.linear(h, b.v)?;
            let a = self.tape.attention(q, k, v, shape.heads)?;
            attn_nodes.push(a);
            let a = self.linear(a, b.proj)?;
            x = self.tape.add(x, a)?;
            let h = self.norm(x, b.ln2, shape.eps)?;
            let h = self.linear(h, b.fc1)?;
            let h = self.tape.gelu(h)?;
            let h = self.linear(h, b.fc2)?;
            x = self.tape.add(x, h)?;
        }
        let out = self.norm(x, norm, shape.eps)?;
        Ok((out, attn_nodes))
    }

    /// Run the encoder over a token batch with full bidirectional attention.
    pub fn encode(&mut self, batch: &TokenBatch, retain_attention: bool) -> Result<EncoderOutput> {
        let cfg = self.config();
        let (_, width) = self.tape.value(batch.tokens).dims2();
        if width != cfg.embed_dim {
            return shape_err(format!("token width {width} != {}", cfg.embed_dim));
        }
        let shape = StackShape {
            dim: cfg.embed_dim,
            heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            eps: cfg.ln_eps,
        };
        let enc = &self.model().enc;
        let (encodings, attn) = self.run_stack(batch.tokens, &enc.blocks, enc.norm, shape)?;
        Ok(EncoderOutput {
            encodings,
            origin: batch.origin.clone(),
            attention: retain_attention.then_some(attn),
        })
    }
}
