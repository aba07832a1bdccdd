use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, ids_tensor, key_padding_bias, Block, Embedding, LayerNorm, Linear, Mode, ParamSet,
};
use crate::rng::{Rng, SeedStreams};
use crate::tinylm::{pad_batch, SoftPrompt, TokenSeq, Tokenizer, BOS, CLS, PAD};

pub const KIND: &str = "pformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PFormerConfig {
    pub layers: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub k: usize,
    pub d_lm: usize,
    pub dropout: f64,
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_v: f64,
    pub vocab_size: usize,
    /// `[CLS]` plus sentence tokens.
    pub max_len: usize,
}

impl Default for PFormerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_enc: 128,
            heads: 4,
            k: 8,
            d_lm: 128,
            dropout: 0.1,
            tau: 0.05,
            lambda_c: 1.0,
            lambda_v: 0.1,
            vocab_size: Tokenizer::grammar().vocab_size(),
            max_len: 32,
        }
    }
}

impl PFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_enc % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_enc {} must be divisible by heads {}",
                self.d_enc, self.heads
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda_c < 0.0 || self.lambda_v < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.k == 0 || self.d_lm == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("bad P-Former config: {self:?}")));
        }
        Ok(())
    }
}

/// Bidirectional sentence encoder whose `[CLS]` state is projected to a
/// `K x d_lm` soft prompt.
pub struct PFormer {
    cfg: PFormerConfig,
    params: ParamSet,
    tok: Embedding,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
}

/// `[CLS]` followed by the sentence tokens after BOS.
pub fn encoder_input(seq: &[u32]) -> Vec<u32> {
    let body = if seq.first() == Some(&BOS) {
        &seq[1..]
    } else {
        seq
    };
    std::iter::once(CLS).chain(body.iter().copied()).collect()
}

impl PFormer {
    pub fn new(cfg: &PFormerConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::new(dtype);
        let d = cfg.d_enc;
        let tok = Embedding::new(&mut p, rng, "tok", cfg.vocab_size, d)?;
        let pos = Embedding::new(&mut p, rng, "pos", cfg.max_len, d)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut p, rng, &format!("block{i}"), d, cfg.heads, cfg.dropout))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut p, "ln_f", d)?;
        let proj = Linear::new(&mut p, rng, "cls_projection", d, cfg.k * cfg.d_lm)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            tok,
            pos,
            blocks,
            ln_f,
            proj,
        })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, dtype: DType) -> Result<Self> {
        ck.expect_kind(&[KIND])?;
        let cfg: PFormerConfig = ck.config()?;
        let pf = Self::new(&cfg, dtype, &mut SeedStreams::new(0).stream("placeholder"))?;
        pf.params.import(&ck.blobs)?;
        Ok(pf)
    }

    pub fn checkpoint(&self, tokenizer_hash: &str) -> Result<ModelCheckpoint> {
        ModelCheckpoint::capture(KIND, &self.cfg, &self.params, tokenizer_hash)
    }

    pub fn config(&self) -> &PFormerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn freeze(&self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    /// `[b, d_enc]` → `[b, K, d_lm]`.
    pub fn project(&self, cls: &Tensor) -> Result<Tensor> {
        let b = cls.dim(0)?;
        Ok(self
            .proj
            .forward(cls)?
            .reshape((b, self.cfg.k, self.cfg.d_lm))?)
    }

    /// Encodes BOS..EOS sequences. Returns `cls` `[b, d_enc]` and prompts
    /// `[b, K, d_lm]`.
    pub fn encode_batch(&self, seqs: &[&[u32]], mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let inputs: Vec<Vec<u32>> = seqs.iter().map(|s| encoder_input(s)).collect();
        let rows: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let (flat, t) = pad_batch(&rows);
        if t > self.cfg.max_len {
            return Err(Error::TooLong {
                len: t,
                max: self.cfg.max_len,
            });
        }
        let valid: Vec<Vec<bool>> = flat
            .chunks(t)
            .map(|r| r.iter().map(|&i| i != PAD).collect())
            .collect();
        let ids = ids_tensor(&flat, &[rows.len(), t])?;
        let mut h = self
            .tok
            .forward(&ids)?
            .broadcast_add(&self.pos.positions(t)?)?;
        h = dropout(&h, self.cfg.dropout, mode)?;
        let bias = key_padding_bias(&valid, h.dtype())?;
        for b in &self.blocks {
            h = b.forward(&h, Some(&bias), mode)?;
        }
        let cls = self.ln_f.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?;
        let prompts = self.project(&cls)?;
        Ok((cls, prompts))
    }

    pub fn encode(&self, tokens: &TokenSeq, mode: &mut Mode) -> Result<(Tensor, SoftPrompt)> {
        let (cls, prompts) = self.encode_batch(&[tokens.as_slice()], mode)?;
        Ok((cls.squeeze(0)?, SoftPrompt::new(prompts.squeeze(0)?)?))
    }

    /// Eval-mode prompts `[b, K, d_lm]`, detached from the graph.
    pub fn reference_prompts(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        let mut out = Vec::new();
        for chunk in seqs.chunks(128) {
            out.push(self.encode_batch(chunk, &mut Mode::Eval)?.1.detach());
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    pub fn reference_prompt(&self, tokens: &TokenSeq) -> Result<SoftPrompt> {
        SoftPrompt::new(self.reference_prompts(&[tokens.as_slice()])?.squeeze(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn small() -> PFormer {
        let cfg = PFormerConfig {
            layers: 1,
            d_enc: 16,
            heads: 2,
            k: 2,
            d_lm: 8,
            ..PFormerConfig::default()
        };
        PFormer::new(&cfg, DType::F64, &mut SeedStreams::new(1).stream("pf")).unwrap()
    }

    fn sentence() -> TokenSeq {
        Tokenizer::grammar()
            .encode("a large red circle at row 1 column 2")
            .unwrap()
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let pf = small();
        let a = pf.reference_prompt(&sentence()).unwrap();
        let b = pf.reference_prompt(&sentence()).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn train_mode_dropout_changes_prompts() {
        let pf = small();
        let mut rng = SeedStreams::new(2).stream("d");
        let (_, a) = pf.encode(&sentence(), &mut Mode::Train(&mut rng)).unwrap();
        let (_, b) = pf.encode(&sentence(), &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn prompt_is_exactly_projected_cls() {
        let pf = small();
        let (cls, prompt) = pf.encode(&sentence(), &mut Mode::Eval).unwrap();
        let w = to_f64_vec(&pf.proj.weight()).unwrap();
        let bias = to_f64_vec(&pf.proj.bias().unwrap()).unwrap();
        let c = to_f64_vec(&cls).unwrap();
        let out = bias.len();
        let manual: Vec<f64> = (0..out)
            .map(|j| {
                bias[j]
                    + c.iter()
                        .enumerate()
                        .map(|(i, x)| x * w[i * out + j])
                        .sum::<f64>()
            })
            .collect();
        let got = prompt.to_vec().unwrap();
        for (a, b) in manual.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_does_not_change_encoding() {
        let pf = small();
        let tok = Tokenizer::grammar();
        let short = sentence();
        let long = tok
            .encode("objects : small blue square row 0 column 3 , large red circle row 1 column 2")
            .unwrap();
        let alone = pf.reference_prompts(&[short.as_slice()]).unwrap();
        let batched = pf
            .reference_prompts(&[short.as_slice(), long.as_slice()])
            .unwrap();
        let a = to_f64_vec(&alone).unwrap();
        let b = to_f64_vec(&batched.narrow(0, 0, 1).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PFormerConfig {
            tau: 0.0,
            ..PFormerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
