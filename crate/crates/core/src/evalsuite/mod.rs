//! Captioning, retrieval and prompted-generation evaluation.

pub mod metrics;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu4_lite, exact_match, recall_at_k, token_f1};

use crate::adaptors::{Adaptor, TextBatch};
use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, Mode};
use crate::pformer::encoder_input;
use crate::tinylm::{generate_batch, CausalLm, Tokenizer, BOS};
use crate::vltrain::{itc_scores, VlData};

/// Decode budget for captions.
pub const MAX_NEW_TOKENS: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub examples: usize,
    pub exact_match: f64,
    pub token_f1: f64,
    pub bleu4_lite: f64,
    pub retrieval: Option<RetrievalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub exact_match: f64,
    pub token_f1: f64,
    pub bleu4_lite: f64,
    pub predictions: Vec<String>,
}

/// Greedy decodes from `[adaptor prompt ; BOS ; template words]` for every
/// example of `data`, returning the decoded continuations.
pub fn decode_captions(
    adaptor: &Adaptor,
    lm: &CausalLm,
    tok: &Tokenizer,
    data: &VlData,
    template: &str,
) -> Result<Vec<String>> {
    let mut start = vec![BOS];
    start.extend(tok.encode_words(template)?);
    let k = adaptor.config().k;
    if k + start.len() >= lm.config().max_len {
        return Err(Error::TooLong {
            len: k + start.len(),
            max: lm.config().max_len,
        });
    }
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let (feats, _, _) = data.batch(chunk)?;
        let prompts = adaptor.prompts(&feats, &mut Mode::Eval)?;
        let decoded = generate_batch(
            lm,
            Some(&prompts),
            &vec![start.clone(); chunk.len()],
            MAX_NEW_TOKENS,
        )?;
        out.extend(decoded.iter().map(|d| tok.decode(d)));
    }
    Ok(out)
}

/// Exact match against any valid caption of each example; token F1 and
/// BLEU against the caption paired in the split.
pub fn caption_eval(
    adaptor: &Adaptor,
    lm: &CausalLm,
    tok: &Tokenizer,
    data: &VlData,
    valid: &[Vec<String>],
    template: &str,
) -> Result<CaptionScores> {
    let predictions = decode_captions(adaptor, lm, tok, data, template)?;
    let references: Vec<String> = data.captions.iter().map(|c| tok.decode(&c.0)).collect();
    Ok(score_captions(predictions, &references, valid))
}

pub fn score_captions(
    predictions: Vec<String>,
    references: &[String],
    valid: &[Vec<String>],
) -> CaptionScores {
    let n = predictions.len().max(1) as f64;
    let em = predictions
        .iter()
        .zip(valid)
        .filter(|(p, v)| exact_match(p, v))
        .count() as f64
        / n;
    let f1 = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| token_f1(p, r))
        .sum::<f64>()
        / n;
    CaptionScores {
        exact_match: em,
        token_f1: f1,
        bleu4_lite: bleu4_lite(&predictions, references),
        predictions,
    }
}

/// R@1 and R@5 in both directions, ranking by the ITC score over the whole
/// split.
pub fn retrieval_eval(adaptor: &Adaptor, data: &VlData, tau: f64) -> Result<RetrievalReport> {
    let qf = adaptor.qformer()?;
    let n = data.len();
    if n < 5 {
        return Err(Error::Config(format!(
            "retrieval needs at least 5 examples, got {n}"
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut queries = Vec::new();
    let mut cls = Vec::new();
    for chunk in idx.chunks(128) {
        let (feats, caps, _) = data.batch(chunk)?;
        queries.push(qf.query_outputs(&feats, &mut Mode::Eval)?);
        let inputs: Vec<Vec<u32>> = caps.iter().map(|c| encoder_input(c)).collect();
        let rows: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        cls.push(qf.text_cls(&TextBatch::new(&rows), &mut Mode::Eval)?);
    }
    let scores = itc_scores(&Tensor::cat(&queries, 0)?, &Tensor::cat(&cls, 0)?, tau)?;
    let flat = to_f64_vec(&scores)?;
    let i2t: Vec<Vec<f64>> = flat.chunks(n).map(<[f64]>::to_vec).collect();
    let t2i: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| flat[i * n + j]).collect())
        .collect();
    Ok(RetrievalReport {
        i2t_r1: recall_at_k(&i2t, 1)?,
        i2t_r5: recall_at_k(&i2t, 5)?,
        t2i_r1: recall_at_k(&t2i, 1)?,
        t2i_r5: recall_at_k(&t2i, 5)?,
    })
}

/// Decodes one example with a text template appended to its visual prompt.
pub fn prompted_generate(
    adaptor: &Adaptor,
    lm: &CausalLm,
    tok: &Tokenizer,
    features: &Tensor,
    template: &str,
) -> Result<String> {
    let data = VlData {
        features: features.unsqueeze(0)?,
        captions: vec![tok.encode("")?],
        references: None,
    };
    Ok(decode_captions(adaptor, lm, tok, &data, template)?.remove(0))
}
