use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenSeq, Tokenizer, PAD};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{
    causal_bias, dropout, from_f64, ids_tensor, log_softmax_last, to_f64_vec, Block, Embedding,
    LayerNorm, Linear, Mode, ParamSet,
};
use crate::rng::Rng;

pub const KIND: &str = "tinylm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub d_lm: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Soft-prefix slots plus text tokens.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_lm: 128,
            heads: 4,
            vocab_size: Tokenizer::grammar().vocab_size(),
            max_len: 48,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} must be divisible by heads {}",
                self.d_lm, self.heads
            )));
        }
        if self.vocab_size < 5 || self.max_len == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "bad language model config: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `K x d_lm` continuous prompt in the language model's embedding space.
#[derive(Debug, Clone)]
pub struct SoftPrompt {
    values: Tensor,
}

impl SoftPrompt {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, _) = values.dims2()?;
        if to_f64_vec(&values)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort {
                stage: "soft_prompt".into(),
                step: 0,
                detail: "non-finite prompt entry".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(k: usize, d: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            values: Tensor::zeros((k, d), dtype, &candle_core::Device::Cpu)?,
        })
    }

    pub fn from_vec(data: Vec<f64>, k: usize, d: usize, dtype: DType) -> Result<Self> {
        Self::new(from_f64(data, &[k, d], dtype)?)
    }

    pub fn k(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        to_f64_vec(&self.values)
    }

    pub fn distance(&self, other: &SoftPrompt) -> Result<f64> {
        let a = self.to_vec()?;
        let b = other.to_vec()?;
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// Decoder-only transformer with learned positions. A soft prefix occupies
/// positions `0..K`; text starts at position `K`. Attention is causal over
/// the whole `[prefix ; text]` sequence, so text sees the entire prefix.
pub struct CausalLm {
    cfg: LmConfig,
    params: ParamSet,
    tok: Embedding,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl CausalLm {
    pub fn new(cfg: &LmConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::new(dtype);
        let d = cfg.d_lm;
        let tok = Embedding::new(&mut p, rng, "tok", cfg.vocab_size, d)?;
        let pos = Embedding::new(&mut p, rng, "pos", cfg.max_len, d)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut p, rng, &format!("block{i}"), d, cfg.heads, cfg.dropout))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut p, "ln_f", d)?;
        let head = Linear::new(&mut p, rng, "head", d, cfg.vocab_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            tok,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, dtype: DType) -> Result<Self> {
        ck.expect_kind(&[KIND])?;
        let cfg: LmConfig = ck.config()?;
        let mut rng = crate::rng::SeedStreams::new(0).stream("placeholder");
        let lm = Self::new(&cfg, dtype, &mut rng)?;
        lm.params.import(&ck.blobs)?;
        Ok(lm)
    }

    pub fn checkpoint(&self, tokenizer_hash: &str) -> Result<ModelCheckpoint> {
        ModelCheckpoint::capture(KIND, &self.cfg, &self.params, tokenizer_hash)
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Marks the model frozen; its parameters stop receiving gradients.
    pub fn freeze(&self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    /// Token embedding table `[V, d_lm]`.
    pub fn vocab_embeddings(&self) -> Tensor {
        self.tok.table()
    }

    /// `[b, t]` ids → `[b, t, d_lm]`.
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        self.tok.forward(ids)
    }

    /// Logits `[b, t, V]` for the text positions of `[prefix ; ids]`.
    pub fn forward(
        &self,
        ids: &Tensor,
        prefix: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        let text = self.embed(ids)?;
        let x = match prefix {
            Some(p) if p.dim(1)? > 0 => Tensor::cat(&[&p.to_dtype(text.dtype())?, &text], 1)?,
            _ => text,
        };
        self.forward_embeds(&x, t, mode)
    }

    /// Runs the decoder over `[b, l, d]` input embeddings and returns logits
    /// for the last `text_len` positions.
    pub fn forward_embeds(&self, x: &Tensor, text_len: usize, mode: &mut Mode) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        if l > self.cfg.max_len {
            return Err(Error::TooLong {
                len: l,
                max: self.cfg.max_len,
            });
        }
        let mut h = x.broadcast_add(&self.pos.positions(l)?)?;
        h = dropout(&h, self.cfg.dropout, mode)?;
        let bias = causal_bias(l, h.dtype())?;
        for b in &self.blocks {
            h = b.forward(&h, Some(&bias), mode)?;
        }
        let h = h.narrow(1, l - text_len, text_len)?;
        self.head.forward(&self.ln_f.forward(&h)?)
    }

    /// Single-sequence forward in eval mode: logits `[len, V]`.
    pub fn lm_forward(
        &self,
        tokens: &TokenSeq,
        soft_prefix: Option<&SoftPrompt>,
    ) -> Result<Tensor> {
        let ids = ids_tensor(tokens.as_slice(), &[1, tokens.len()])?;
        let prefix = soft_prefix.map(|p| p.tensor().unsqueeze(0)).transpose()?;
        Ok(self
            .forward(&ids, prefix.as_ref(), &mut Mode::Eval)?
            .squeeze(0)?)
    }
}

/// Mean next-token cross-entropy over positions whose target is not PAD.
/// `logits` is `[n, V]` or `[b, t, V]`; `targets` holds the `n = b*t`
/// already-shifted target ids.
pub fn lm_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let v = logits.dim(D::Minus1)?;
    let n = logits.elem_count() / v;
    if n != targets.len() {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} targets",
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::Shape("no non-PAD targets".into()));
    }
    let mut pick = vec![0f64; n * v];
    for (i, &t) in targets.iter().enumerate() {
        if t != PAD {
            if t as usize >= v {
                return Err(Error::Shape(format!("target id {t} outside vocab {v}")));
            }
            pick[i * v + t as usize] = 1.0;
        }
    }
    let lp = log_softmax_last(&logits.reshape((n, v))?)?;
    let pick = from_f64(pick, &[n, v], lp.dtype())?;
    Ok((lp.mul(&pick)?.sum_all()? * (-1.0 / count as f64))?)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
