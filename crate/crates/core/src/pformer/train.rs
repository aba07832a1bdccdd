use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::losses::{contrastive_loss, recon_loss, vocab_loss};
use super::model::PFormer;
use crate::error::{Error, Result};
use crate::metrics::{IntervalMeter, MetricsRecord};
use crate::nn::{scalar, Mode};
use crate::optim::{batch_schedule, check_finite, OptimConfig, Trainer};
use crate::rng::Rng;
use crate::tinylm::{
    generate_batch, teacher_forced_predictions, CausalLm, TokenSeq, Tokenizer, BOS,
};

/// Builds `recon + lambda_c * contrast + lambda_v * vocab` for one batch.
/// Both dropout views come from a single forward over the doubled batch;
/// reconstruction and the vocabulary term use the first view.
pub fn pformer_objective(
    pf: &PFormer,
    lm: &CausalLm,
    seqs: &[&[u32]],
    mode: &mut Mode,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let n = seqs.len();
    let doubled: Vec<&[u32]> = seqs.iter().chain(seqs.iter()).copied().collect();
    let (cls, prompts) = pf.encode_batch(&doubled, mode)?;
    let prompts = prompts.narrow(0, 0, n)?;
    let recon = recon_loss(lm, &prompts, seqs)?;
    let contrast = contrastive_loss(
        &cls.narrow(0, 0, n)?,
        &cls.narrow(0, n, n)?,
        pf.config().tau,
    )?;
    let vocab = vocab_loss(&prompts, &lm.vocab_embeddings())?;
    let cfg = pf.config();
    let total = ((&recon + (&contrast * cfg.lambda_c)?)? + (&vocab * cfg.lambda_v)?)?;
    Ok((total, recon, contrast, vocab))
}

#[derive(Debug, Clone)]
pub struct PFormerTrainReport {
    pub steps: usize,
    pub records: Vec<MetricsRecord>,
}

/// Trains the P-Former as an autoencoder against the frozen `lm`.
pub fn train_pformer(
    pf: &PFormer,
    lm: &CausalLm,
    tok: &Tokenizer,
    sentences: &[String],
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<PFormerTrainReport> {
    if !lm.is_frozen() {
        return Err(Error::Config(
            "the language model must be frozen before P-Former training".into(),
        ));
    }
    if pf.config().d_lm != lm.config().d_lm {
        return Err(Error::Incompatible(format!(
            "P-Former d_lm {} vs language model d_lm {}",
            pf.config().d_lm,
            lm.config().d_lm
        )));
    }
    if sentences.len() < 2 {
        return Err(Error::BatchTooSmall(sentences.len()));
    }
    let seqs = sentences
        .iter()
        .map(|s| tok.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.total_steps(seqs.len());
    let mut trainer = Trainer::new(pf.params().vars(), cfg, total)?;
    let mut schedule = batch_schedule(seqs.len(), cfg.batch_size, total, rng);
    // a trailing singleton batch has no contrastive negatives
    for b in schedule.iter_mut() {
        if b.len() == 1 {
            b.push((b[0] + 1) % seqs.len());
        }
    }
    let pfc = pf.config();
    let mut meter = IntervalMeter::default();
    let mut records = Vec::new();
    for (step, batch) in schedule.iter().enumerate() {
        let rows: Vec<&[u32]> = batch.iter().map(|&i| seqs[i].as_slice()).collect();
        let (loss, recon, contrast, vocab) =
            pformer_objective(pf, lm, &rows, &mut Mode::Train(rng))?;
        let value = scalar(&loss)?;
        check_finite("pformer", step, "total", value)?;
        trainer.step(&loss)?;
        meter.add("recon", scalar(&recon)?);
        meter.add("contrast", scalar(&contrast)?);
        meter.add("vocab", scalar(&vocab)?);
        meter.tick();
        if (step + 1) % cfg.log_every == 0 || step + 1 == total {
            let m = |k| meter.mean(k).unwrap_or(f64::NAN);
            let (r, c, v) = (m("recon"), m("contrast"), m("vocab"));
            let record = MetricsRecord {
                stage: "pformer".into(),
                step: step + 1,
                recon: Some(r),
                contrast: Some(c),
                vocab: Some(v),
                lambda_c: Some(pfc.lambda_c),
                lambda_v: Some(pfc.lambda_v),
                total: r + pfc.lambda_c * c + pfc.lambda_v * v,
                lr: Some(trainer.current_lr()),
                ..Default::default()
            };
            log::info!(
                "pformer step {} recon {r:.4} contrast {c:.4} vocab {v:.4}",
                step + 1
            );
            records.push(record);
            meter.reset();
        }
    }
    Ok(PFormerTrainReport {
        steps: total,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconEval {
    /// Teacher-forced next-token accuracy under the reference prompt.
    pub token_accuracy: f64,
    /// Greedy decode from the reference prompt reproduces the sentence.
    pub exact_match: f64,
}

/// Reconstruction quality of reference prompts through the frozen LM.
pub fn recon_eval(
    pf: &PFormer,
    lm: &CausalLm,
    tok: &Tokenizer,
    sentences: &[String],
) -> Result<ReconEval> {
    let seqs = sentences
        .iter()
        .map(|s| tok.encode(s))
        .collect::<Result<Vec<TokenSeq>>>()?;
    let (mut hits, mut n, mut exact) = (0usize, 0usize, 0usize);
    for (ci, chunk) in seqs.chunks(64).enumerate() {
        let rows: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let prompts = pf.reference_prompts(&rows)?;
        let preds = teacher_forced_predictions(lm, &rows, Some(&prompts))?;
        for (seq, pred) in rows.iter().zip(&preds) {
            n += pred.len();
            hits += pred.iter().zip(&seq[1..]).filter(|(a, b)| a == b).count();
        }
        let decoded = generate_batch(lm, Some(&prompts), &vec![vec![BOS]; rows.len()], 30)?;
        for (i, out) in decoded.iter().enumerate() {
            if tok.decode(out) == sentences[ci * 64 + i] {
                exact += 1;
            }
        }
    }
    Ok(ReconEval {
        token_accuracy: hits as f64 / n.max(1) as f64,
        exact_match: exact as f64 / seqs.len().max(1) as f64,
    })
}
