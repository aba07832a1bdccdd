use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::model::{argmax, lm_loss, CausalLm};
use super::tokenizer::{shift_batch, TokenSeq, Tokenizer, EOS, PAD};
use crate::corpus::{next_words, parse_caption};
use crate::error::{Error, Result};
use crate::metrics::{IntervalMeter, MetricsRecord};
use crate::nn::{ids_tensor, scalar, to_f64_vec, Mode};
use crate::optim::{batch_schedule, check_finite, OptimConfig, Trainer};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEval {
    pub loss: f64,
    /// Argmax equals the reference next token.
    pub exact_accuracy: f64,
    /// Argmax is a continuation the caption grammar allows.
    pub grammar_accuracy: f64,
    pub positions: usize,
}

#[derive(Debug, Clone)]
pub struct LmTrainReport {
    pub steps: usize,
    pub records: Vec<MetricsRecord>,
}

/// Next-token pretraining on `sentences`. Every sentence is wrapped in
/// BOS/EOS; targets are the shifted sequence with PAD masked.
pub fn pretrain_lm(
    lm: &CausalLm,
    tok: &Tokenizer,
    sentences: &[String],
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<LmTrainReport> {
    let seqs = sentences
        .iter()
        .map(|s| tok.encode(s))
        .collect::<Result<Vec<_>>>()?;
    pretrain_lm_seqs(lm, &seqs, cfg, rng)
}

/// Next-token pretraining on already tokenized documents.
pub fn pretrain_lm_seqs(
    lm: &CausalLm,
    seqs: &[TokenSeq],
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<LmTrainReport> {
    if seqs.is_empty() {
        return Err(Error::MissingInput("empty sentence corpus".into()));
    }
    if lm.is_frozen() {
        return Err(Error::Config(
            "cannot pretrain a frozen language model".into(),
        ));
    }
    let total = cfg.total_steps(seqs.len());
    let mut trainer = Trainer::new(lm.params().vars(), cfg, total)?;
    let schedule = batch_schedule(seqs.len(), cfg.batch_size, total, rng);
    let mut meter = IntervalMeter::default();
    let mut records = Vec::new();
    for (step, batch) in schedule.iter().enumerate() {
        let rows: Vec<&[u32]> = batch.iter().map(|&i| seqs[i].as_slice()).collect();
        let (inputs, targets, t) = shift_batch(&rows);
        let ids = ids_tensor(&inputs, &[rows.len(), t])?;
        let logits = lm.forward(&ids, None, &mut Mode::Train(rng))?;
        let loss = lm_loss(&logits, &targets)?;
        let value = scalar(&loss)?;
        check_finite("lm", step, "lm_ce", value)?;
        trainer.step(&loss)?;
        meter.add("lm_ce", value);
        meter.tick();
        if (step + 1) % cfg.log_every == 0 || step + 1 == total {
            let ce = meter.mean("lm_ce").unwrap_or(f64::NAN);
            log::info!("lm step {} ce {ce:.4}", step + 1);
            records.push(MetricsRecord {
                stage: "lm".into(),
                step: step + 1,
                lm_ce: Some(ce),
                total: ce,
                lr: Some(trainer.current_lr()),
                ..Default::default()
            });
            meter.reset();
        }
    }
    Ok(LmTrainReport {
        steps: total,
        records,
    })
}

/// Teacher-forced argmax predictions. Row `i` holds one prediction per
/// input position of `seqs[i][..len - 1]`. `prefix` is an optional
/// `[b, K, d_lm]` soft prefix shared position-wise with the batch.
pub fn teacher_forced_predictions(
    lm: &CausalLm,
    seqs: &[&[u32]],
    prefix: Option<&Tensor>,
) -> Result<Vec<Vec<u32>>> {
    let (inputs, _, t) = shift_batch(seqs);
    let ids = ids_tensor(&inputs, &[seqs.len(), t])?;
    let logits = lm.forward(&ids, prefix, &mut Mode::Eval)?;
    let v = lm.config().vocab_size;
    let flat = to_f64_vec(&logits)?;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| {
            (0..s.len() - 1)
                .map(|j| {
                    let at = (b * t + j) * v;
                    argmax(&flat[at..at + v]) as u32
                })
                .collect()
        })
        .collect())
}

/// Held-out teacher-forced evaluation. Grammar accuracy is computed over
/// sentences that parse as captions; other sentences count toward exact
/// accuracy and loss only.
pub fn evaluate_lm(
    lm: &CausalLm,
    tok: &Tokenizer,
    sentences: &[String],
    grid_size: usize,
    max_objects: usize,
) -> Result<LmEval> {
    let seqs = sentences
        .iter()
        .map(|s| tok.encode(s))
        .collect::<Result<Vec<TokenSeq>>>()?;
    let (mut hits, mut valid, mut n, mut gn) = (0usize, 0usize, 0usize, 0usize);
    let mut loss_sum = 0.0;
    for (chunk_idx, chunk) in seqs.chunks(64).enumerate() {
        let rows: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let (inputs, targets, t) = shift_batch(&rows);
        let ids = ids_tensor(&inputs, &[rows.len(), t])?;
        let logits = lm.forward(&ids, None, &mut Mode::Eval)?;
        let count = targets.iter().filter(|&&x| x != PAD).count();
        loss_sum += scalar(&lm_loss(&logits, &targets)?)? * count as f64;
        let preds = teacher_forced_predictions(lm, &rows, None)?;
        for (i, (seq, pred)) in rows.iter().zip(&preds).enumerate() {
            let sentence = &sentences[chunk_idx * 64 + i];
            let is_caption = parse_caption(sentence, grid_size).is_ok();
            let words: Vec<&str> = sentence.split_whitespace().collect();
            for (j, &p) in pred.iter().enumerate() {
                n += 1;
                if p == seq[j + 1] {
                    hits += 1;
                }
                if is_caption {
                    gn += 1;
                    if grammar_allows(tok, &words[..j], p, grid_size, max_objects) {
                        valid += 1;
                    }
                }
            }
        }
    }
    Ok(LmEval {
        loss: loss_sum / n.max(1) as f64,
        exact_accuracy: hits as f64 / n.max(1) as f64,
        grammar_accuracy: valid as f64 / gn.max(1) as f64,
        positions: n,
    })
}

fn grammar_allows(
    tok: &Tokenizer,
    prefix: &[&str],
    pred: u32,
    grid: usize,
    max_objects: usize,
) -> bool {
    let next = next_words(prefix, grid, max_objects);
    if pred == EOS {
        return next.end;
    }
    tok.word(pred).is_some_and(|w| next.words.contains(w))
}
