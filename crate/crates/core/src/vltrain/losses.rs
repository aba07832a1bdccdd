use candle_core::Tensor;
use rand::Rng as _;

use crate::adaptors::{alignment_loss, QFormerLite, TextBatch};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, l2_normalize, Mode};
use crate::pformer::{encoder_input, info_nce};
use crate::rng::Rng;
use crate::tinylm::lm_loss;

/// Image-text contrastive loss. The similarity of image `i` and text `j`
/// is the largest cosine over the K query outputs of image `i`, divided by
/// `tau`; positives sit on the diagonal.
pub fn itc_loss(query_outs: &Tensor, text_cls: &Tensor, tau: f64) -> Result<Tensor> {
    itc_scores(query_outs, text_cls, tau).and_then(|s| info_nce(&s))
}

/// `[n_img, n_txt]` matrix of max-over-queries cosine similarity / tau.
pub fn itc_scores(query_outs: &Tensor, text_cls: &Tensor, tau: f64) -> Result<Tensor> {
    let (n, k, d) = query_outs.dims3()?;
    let (m, dt) = text_cls.dims2()?;
    if d != dt {
        return Err(Error::Shape(format!("query width {d} vs text width {dt}")));
    }
    let q = l2_normalize(query_outs)?.reshape((n * k, d))?;
    let t = l2_normalize(text_cls)?;
    let sim = q.matmul(&t.t()?)?.reshape((n, k, m))?.max(1)?;
    Ok((sim / tau)?)
}

/// A uniformly random cyclic permutation (Sattolo), which has no fixed
/// points.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Matching loss: every image is paired with its own caption (label 1) and
/// with the caption at `perm[i]` (label 0).
pub fn itm_loss(
    qf: &QFormerLite,
    features: &Tensor,
    captions: &[&[u32]],
    perm: &[usize],
    mode: &mut Mode,
) -> Result<Tensor> {
    let n = captions.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let inputs: Vec<Vec<u32>> = captions
        .iter()
        .map(|c| encoder_input(c))
        .chain(perm.iter().map(|&j| encoder_input(captions[j])))
        .collect();
    let rows: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let feats = Tensor::cat(&[features, features], 0)?;
    let logits = qf.itm_logits(&feats, &TextBatch::new(&rows), mode)?;
    let labels: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    bce_with_logits(&logits, &labels)
}

/// Image-grounded generation: causal cross-entropy of each BOS..EOS
/// caption through the Q-Former text branch.
pub fn itg_loss(
    qf: &QFormerLite,
    features: &Tensor,
    captions: &[&[u32]],
    mode: &mut Mode,
) -> Result<Tensor> {
    let (inputs, targets, t) = crate::tinylm::shift_batch(captions);
    let text = TextBatch {
        ids: inputs,
        len: t,
        rows: captions.len(),
    };
    let logits = qf.itg_logits(features, &text, mode)?;
    lm_loss(&logits, &targets)
}

/// Loss tensors of one stage-1 step.
pub struct Stage1Terms {
    pub itc: Tensor,
    pub itm: Tensor,
    pub itg: Tensor,
    pub align: Option<Tensor>,
    pub total: Tensor,
}

/// ITC + ITM + ITG, plus `omega * align` when `omega > 0` and references
/// are given. With `omega == 0` the alignment term is computed for logging
/// but kept out of the objective, so the update equals the plain baseline.
#[allow(clippy::too_many_arguments)]
pub fn stage1_terms(
    qf: &QFormerLite,
    features: &Tensor,
    captions: &[&[u32]],
    references: Option<&Tensor>,
    omega: f64,
    tau: f64,
    perm: &[usize],
    mode: &mut Mode,
) -> Result<Stage1Terms> {
    let queries = qf.query_outputs(features, mode)?;
    let cls_inputs: Vec<Vec<u32>> = captions.iter().map(|c| encoder_input(c)).collect();
    let cls_rows: Vec<&[u32]> = cls_inputs.iter().map(Vec::as_slice).collect();
    let cls = qf.text_cls(&TextBatch::new(&cls_rows), mode)?;
    let itc = itc_loss(&queries, &cls, tau)?;
    let itm = itm_loss(qf, features, captions, perm, mode)?;
    let itg = itg_loss(qf, features, captions, mode)?;
    let align = references
        .map(|r| alignment_loss(&qf.project(&queries)?, r))
        .transpose()?;
    let mut total = ((&itc + &itm)? + &itg)?;
    if let Some(a) = &align {
        if omega > 0.0 {
            total = (total + (a * omega)?)?;
        }
    }
    Ok(Stage1Terms {
        itc,
        itm,
        itg,
        align,
        total,
    })
}

/// Generation cross-entropy through the frozen LM plus `omega * align`
/// (same zero-weight convention as stage 1).
pub struct Stage2Terms {
    pub gen_ce: Tensor,
    pub align: Option<Tensor>,
    pub total: Tensor,
}

pub fn stage2_terms(
    lm: &crate::tinylm::CausalLm,
    prompts: &Tensor,
    captions: &[&[u32]],
    references: Option<&Tensor>,
    omega: f64,
) -> Result<Stage2Terms> {
    let gen_ce = crate::pformer::recon_loss(lm, prompts, captions)?;
    let align = references.map(|r| alignment_loss(prompts, r)).transpose()?;
    let mut total = gen_ce.clone();
    if let Some(a) = &align {
        if omega > 0.0 {
            total = (total + (a * omega)?)?;
        }
    }
    Ok(Stage2Terms {
        gen_ce,
        align,
        total,
    })
}
