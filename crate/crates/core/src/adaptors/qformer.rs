use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    from_f64, ids_tensor, Block, CrossAttention, Embedding, LayerNorm, Linear, Mode, ParamSet,
    NEG_INF,
};
use crate::rng::Rng;
use crate::tinylm::{pad_batch, Tokenizer, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    QformerLite,
    Plain,
}

impl AdaptorKind {
    pub fn name(self) -> &'static str {
        match self {
            AdaptorKind::QformerLite => "qformer_lite",
            AdaptorKind::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptorConfig {
    pub kind: AdaptorKind,
    pub k: usize,
    pub d_model: usize,
    pub d_feat: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Longest text branch input, `[CLS]`/BOS included.
    pub max_text: usize,
    /// Longest frame sequence for the plain adaptor.
    pub max_frames: usize,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            kind: AdaptorKind::QformerLite,
            k: 8,
            d_model: 128,
            d_feat: 128,
            d_lm: 128,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            vocab_size: Tokenizer::grammar().vocab_size(),
            max_text: 32,
            max_frames: 16,
        }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "adaptor d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.k == 0 || self.layers == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("bad adaptor config: {self:?}")));
        }
        Ok(())
    }
}

/// Which attention pattern a Q-Former pass uses over `[queries ; text]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern {
    /// Queries and text attend to each other (matching).
    Joint,
    /// Queries see queries; text sees all queries and earlier text
    /// (generation).
    Grounded,
}

/// Padded text branch input.
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub len: usize,
    pub rows: usize,
}

impl TextBatch {
    pub fn new(seqs: &[&[u32]]) -> Self {
        let (ids, len) = pad_batch(seqs);
        Self {
            ids,
            len,
            rows: seqs.len(),
        }
    }

    fn valid(&self, row: usize, j: usize) -> bool {
        self.ids[row * self.len + j] != PAD
    }
}

/// K learnable queries with a text branch sharing the self-attention
/// stack. Queries cross-attend to the visual features; the features carry
/// no positional encoding here.
pub struct QFormerLite {
    cfg: AdaptorConfig,
    queries: crate::nn::Param,
    text_tok: Embedding,
    text_pos: Embedding,
    blocks: Vec<Block>,
    cross: Vec<CrossAttention>,
    ln_f: LayerNorm,
    itm_head: Linear,
    itg_head: Linear,
    proj: Linear,
}

impl QFormerLite {
    pub fn new(p: &mut ParamSet, cfg: &AdaptorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let queries = p.normal("queries", &[cfg.k, d], crate::nn::INIT_STD, rng)?;
        let text_tok = Embedding::new(p, rng, "text_tok", cfg.vocab_size, d)?;
        let text_pos = Embedding::new(p, rng, "text_pos", cfg.max_text, d)?;
        let mut blocks = Vec::new();
        let mut cross = Vec::new();
        for i in 0..cfg.layers {
            blocks.push(Block::new(
                p,
                rng,
                &format!("block{i}"),
                d,
                cfg.heads,
                cfg.dropout,
            )?);
            cross.push(CrossAttention::new(
                p,
                rng,
                &format!("cross{i}"),
                d,
                cfg.d_feat,
                cfg.heads,
                cfg.dropout,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            queries,
            text_tok,
            text_pos,
            blocks,
            cross,
            ln_f: LayerNorm::new(p, "ln_f", d)?,
            itm_head: Linear::new(p, rng, "itm_head", d, 1)?,
            itg_head: Linear::new(p, rng, "itg_head", d, cfg.vocab_size)?,
            proj: Linear::new(p, rng, "proj", d, cfg.d_lm)?,
        })
    }

    pub fn config(&self) -> &AdaptorConfig {
        &self.cfg
    }

    fn embed_text(&self, text: &TextBatch) -> Result<Tensor> {
        if text.len > self.cfg.max_text {
            return Err(Error::TooLong {
                len: text.len,
                max: self.cfg.max_text,
            });
        }
        let ids = ids_tensor(&text.ids, &[text.rows, text.len])?;
        Ok(self
            .text_tok
            .forward(&ids)?
            .broadcast_add(&self.text_pos.positions(text.len)?)?)
    }

    fn query_batch(&self, b: usize) -> Result<Tensor> {
        Ok(self.queries.t().unsqueeze(0)?.repeat((b, 1, 1))?)
    }

    fn run(
        &self,
        h: Tensor,
        features: Option<&Tensor>,
        bias: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let k = self.cfg.k;
        let mut h = h;
        for (block, cross) in self.blocks.iter().zip(&self.cross) {
            h = block.attend(&h, bias, mode)?;
            if let Some(f) = features {
                let l = h.dim(1)?;
                let q = cross.forward(&h.narrow(1, 0, k)?, f, mode)?;
                h = if l > k {
                    Tensor::cat(&[&q, &h.narrow(1, k, l - k)?], 1)?
                } else {
                    q
                };
            }
            h = block.feed_forward(&h, mode)?;
        }
        self.ln_f.forward(&h)
    }

    fn joint_bias(&self, text: &TextBatch, pattern: Pattern, dtype: DType) -> Result<Tensor> {
        let k = self.cfg.k;
        let l = k + text.len;
        let mut data = vec![0f64; text.rows * l * l];
        for r in 0..text.rows {
            for i in 0..l {
                for j in k..l {
                    let tj = j - k;
                    let allowed = text.valid(r, tj)
                        && match pattern {
                            Pattern::Joint => true,
                            Pattern::Grounded => i >= k && j <= i,
                        };
                    if !allowed {
                        data[(r * l + i) * l + j] = NEG_INF;
                    }
                }
            }
        }
        from_f64(data, &[text.rows, 1, l, l], dtype)
    }

    /// Query outputs `[b, K, d_model]` from visual features alone.
    pub fn query_outputs(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let b = features.dim(0)?;
        self.run(self.query_batch(b)?, Some(features), None, mode)
    }

    /// Soft prompts `[b, K, d_lm]`.
    pub fn prompts(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.proj.forward(&self.query_outputs(features, mode)?)
    }

    /// Projects query outputs into the language model's embedding space.
    pub fn project(&self, query_outs: &Tensor) -> Result<Tensor> {
        self.proj.forward(query_outs)
    }

    /// Text-only pass; returns the first-position (`[CLS]`) output `[b, d]`.
    pub fn text_cls(&self, text: &TextBatch, mode: &mut Mode) -> Result<Tensor> {
        let valid: Vec<Vec<bool>> = (0..text.rows)
            .map(|r| (0..text.len).map(|j| text.valid(r, j)).collect())
            .collect();
        let h = self.embed_text(text)?;
        let bias = crate::nn::key_padding_bias(&valid, h.dtype())?;
        let out = self.run(h, None, Some(&bias), mode)?;
        Ok(out.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Matching logits `[b]` for (features row i, text row i).
    pub fn itm_logits(
        &self,
        features: &Tensor,
        text: &TextBatch,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let b = features.dim(0)?;
        let h = Tensor::cat(&[&self.query_batch(b)?, &self.embed_text(text)?], 1)?;
        let bias = self.joint_bias(text, Pattern::Joint, h.dtype())?;
        let out = self.run(h, Some(features), Some(&bias), mode)?;
        let pooled = out.narrow(1, 0, self.cfg.k)?.mean(1)?;
        Ok(self.itm_head.forward(&pooled)?.squeeze(1)?)
    }

    /// Image-grounded generation logits `[b, T, V]` for the text positions.
    pub fn itg_logits(
        &self,
        features: &Tensor,
        text: &TextBatch,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let b = features.dim(0)?;
        let h = Tensor::cat(&[&self.query_batch(b)?, &self.embed_text(text)?], 1)?;
        let bias = self.joint_bias(text, Pattern::Grounded, h.dtype())?;
        let out = self.run(h, Some(features), Some(&bias), mode)?;
        self.itg_head.forward(&out.narrow(1, self.cfg.k, text.len)?)
    }
}
