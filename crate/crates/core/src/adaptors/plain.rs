use candle_core::Tensor;

use super::qformer::AdaptorConfig;
use crate::error::{Error, Result};
use crate::nn::{Block, Embedding, LayerNorm, Linear, Mode, Param, ParamSet, INIT_STD};
use crate::rng::Rng;

/// Transformer over `[K learnable slots ; projected feature sequence]`;
/// slot outputs become the soft prompt.
pub struct PlainAdaptor {
    cfg: AdaptorConfig,
    slots: Param,
    input: Linear,
    frame_pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
}

impl PlainAdaptor {
    pub fn new(p: &mut ParamSet, cfg: &AdaptorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            cfg: cfg.clone(),
            slots: p.normal("slots", &[cfg.k, d], INIT_STD, rng)?,
            input: Linear::new(p, rng, "input", cfg.d_feat, d)?,
            frame_pos: Embedding::new(p, rng, "frame_pos", cfg.max_frames, d)?,
            blocks: (0..cfg.layers)
                .map(|i| Block::new(p, rng, &format!("block{i}"), d, cfg.heads, cfg.dropout))
                .collect::<Result<Vec<_>>>()?,
            ln_f: LayerNorm::new(p, "ln_f", d)?,
            proj: Linear::new(p, rng, "proj", d, cfg.d_lm)?,
        })
    }

    pub fn config(&self) -> &AdaptorConfig {
        &self.cfg
    }

    /// `features` `[b, T, d_feat]` → prompts `[b, K, d_lm]`.
    pub fn prompts(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, t, _) = features.dims3()?;
        if t > self.cfg.max_frames {
            return Err(Error::TooLong {
                len: t,
                max: self.cfg.max_frames,
            });
        }
        let x = self
            .input
            .forward(features)?
            .broadcast_add(&self.frame_pos.positions(t)?)?;
        let slots = self.slots.t().unsqueeze(0)?.repeat((b, 1, 1))?;
        let mut h = Tensor::cat(&[&slots, &x], 1)?;
        for block in &self.blocks {
            h = block.forward(&h, None, mode)?;
        }
        let h = self.ln_f.forward(&h.narrow(1, 0, self.cfg.k)?)?;
        self.proj.forward(&h)
    }
}
