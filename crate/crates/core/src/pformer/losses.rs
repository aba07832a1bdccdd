use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{ids_tensor, Mode};
use crate::nn::{l2_normalize, log_softmax_last, to_f64_vec};
use crate::tinylm::{lm_loss, shift_batch, CausalLm};

/// Reconstruction loss of `seqs` (BOS..EOS) under the frozen LM conditioned
/// on `prompts` `[b, K, d_lm]`.
pub fn recon_loss(lm: &CausalLm, prompts: &Tensor, seqs: &[&[u32]]) -> Result<Tensor> {
    let (inputs, targets, t) = shift_batch(seqs);
    let ids = ids_tensor(&inputs, &[seqs.len(), t])?;
    let logits = lm.forward(&ids, Some(prompts), &mut Mode::Eval)?;
    lm_loss(&logits, &targets)
}

/// Symmetric InfoNCE over an `[n, n]` logit matrix whose diagonal holds the
/// positives: the mean of the row-wise and column-wise cross-entropies.
pub fn info_nce(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if n != m {
        return Err(Error::Shape(format!(
            "info_nce needs a square matrix, got {n}x{m}"
        )));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let rows = log_softmax_last(logits)?.mul(&eye)?.sum_all()?;
    let cols = log_softmax_last(&logits.t()?)?.mul(&eye)?.sum_all()?;
    Ok(((rows + cols)? * (-0.5 / n as f64))?)
}

/// SimCSE-style contrastive loss between two views `[n, d]` of the same
/// batch, on cosine similarity divided by `tau`.
pub fn contrastive_loss(cls_a: &Tensor, cls_b: &Tensor, tau: f64) -> Result<Tensor> {
    let n = cls_a.dim(0)?;
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if cls_a.dims() != cls_b.dims() {
        return Err(Error::Shape(format!(
            "views {:?} vs {:?}",
            cls_a.dims(),
            cls_b.dims()
        )));
    }
    let sim = l2_normalize(cls_a)?.matmul(&l2_normalize(cls_b)?.t()?)?;
    info_nce(&(sim / tau)?)
}

/// Mean over prompt vectors of the squared distance to the nearest row of
/// `vocab` `[V, d]`. The nearest row is chosen on values (ties to the
/// lowest index) and enters the graph as a constant.
pub fn vocab_loss(prompts: &Tensor, vocab: &Tensor) -> Result<Tensor> {
    let d = prompts.dim(D::Minus1)?;
    let (v, dv) = vocab.dims2()?;
    if d != dv {
        return Err(Error::Shape(format!(
            "prompt width {d} vs vocab width {dv}"
        )));
    }
    let m = prompts.elem_count() / d;
    let flat = prompts.reshape((m, d))?;
    let pv = to_f64_vec(&flat)?;
    let vv = to_f64_vec(vocab)?;
    let nearest: Vec<u32> = (0..m)
        .map(|i| {
            let p = &pv[i * d..(i + 1) * d];
            let mut best = (0usize, f64::INFINITY);
            for j in 0..v {
                let dist: f64 = p
                    .iter()
                    .zip(&vv[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0 as u32
        })
        .collect();
    let idx = ids_tensor(&nearest, &[m])?;
    let targets = vocab
        .detach()
        .index_select(&idx, 0)?
        .to_dtype(flat.dtype())?;
    Ok((flat.sub(&targets)?.sqr()?.sum_all()? / m as f64)?)
}
