//! Stage trainers: stage 1 (ITC + ITM + ITG on the Q-Former), stage 2
//! (generation through the frozen LM), each with an omega-weighted
//! alignment term, and the two-phase video schedule.

pub mod losses;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use losses::{
    derangement, itc_loss, itc_scores, itg_loss, itm_loss, stage1_terms, stage2_terms, Stage1Terms,
    Stage2Terms,
};

use crate::adaptors::{alignment_loss, Adaptor, SequenceEncoder, VisionEncoder};
use crate::corpus::{DatasetSplit, FeatureGrid, VideoSplit};
use crate::error::{Error, Result};
use crate::metrics::{IntervalMeter, MetricsRecord};
use crate::nn::{ids_tensor, scalar, Mode, ParamSet};
use crate::optim::{batch_schedule, check_finite, OptimConfig, Trainer};
use crate::pformer::PFormer;
use crate::rng::Rng;
use crate::tinylm::{CausalLm, TokenSeq, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub itc_tau: f64,
    pub stage1: OptimConfig,
    pub stage2: OptimConfig,
    pub video: OptimConfig,
    pub video_align_epochs: usize,
    pub video_gen_epochs: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            omega1: 10.0,
            omega2: 100.0,
            itc_tau: 0.07,
            stage1: OptimConfig::default(),
            stage2: OptimConfig::default(),
            video: OptimConfig::default(),
            video_align_epochs: 10,
            video_gen_epochs: 10,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0) {
            return Err(Error::Config(format!(
                "omega values must be non-negative, got {} and {}",
                self.omega1, self.omega2
            )));
        }
        if !(self.itc_tau > 0.0) {
            return Err(Error::Config("itc_tau must be positive".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.video.validate()
    }
}

/// Frozen-encoder features, captions and (optionally) reference prompts
/// for a split. Frozen components are deterministic, so their outputs are
/// computed once.
pub struct VlData {
    /// `[n, M, d_feat]` for images, `[n, T, d_feat]` for clips.
    pub features: Tensor,
    /// BOS..EOS captions.
    pub captions: Vec<TokenSeq>,
    /// `[n, K, d_lm]` reference prompts.
    pub references: Option<Tensor>,
}

impl VlData {
    pub fn from_split(
        split: &DatasetSplit,
        vision: &VisionEncoder,
        tok: &Tokenizer,
    ) -> Result<Self> {
        let grids = split.grids();
        let mut chunks = Vec::new();
        for chunk in grids.chunks(256) {
            let refs: Vec<&FeatureGrid> = chunk.iter().collect();
            chunks.push(vision.encode_images(&refs)?.detach());
        }
        let captions = split
            .pairs
            .iter()
            .map(|p| tok.encode(&p.caption.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: Tensor::cat(&chunks, 0)?,
            captions,
            references: None,
        })
    }

    pub fn from_video(
        split: &VideoSplit,
        encoder: &SequenceEncoder,
        tok: &Tokenizer,
    ) -> Result<Self> {
        let mut chunks = Vec::new();
        for chunk in split.clips.chunks(64) {
            let frames: Vec<Vec<FeatureGrid>> =
                chunk.iter().map(|c| c.frames(split.frames)).collect();
            chunks.push(encoder.encode_clips(&frames)?.detach());
        }
        let captions = split
            .clips
            .iter()
            .map(|c| tok.encode(&c.caption.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: Tensor::cat(&chunks, 0)?,
            captions,
            references: None,
        })
    }

    /// Adds eval-mode reference prompts of the captions.
    pub fn with_references(mut self, pf: &PFormer) -> Result<Self> {
        let rows: Vec<&[u32]> = self.captions.iter().map(|c| c.as_slice()).collect();
        self.references = Some(pf.reference_prompts(&rows)?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<&[u32]>, Option<Tensor>)> {
        let ids = ids_tensor(
            &idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            &[idx.len()],
        )?;
        let feats = self.features.index_select(&ids, 0)?;
        let caps = idx.iter().map(|&i| self.captions[i].as_slice()).collect();
        let refs = self
            .references
            .as_ref()
            .map(|r| r.index_select(&ids, 0))
            .transpose()?;
        Ok((feats, caps, refs))
    }

    pub fn to_dtype(mut self, dtype: DType) -> Result<Self> {
        self.features = self.features.to_dtype(dtype)?;
        self.references = self.references.map(|r| r.to_dtype(dtype)).transpose()?;
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub steps: usize,
    pub records: Vec<MetricsRecord>,
    /// `(component, digest)` of every frozen component, checked unchanged.
    pub frozen_digests: Vec<(String, String)>,
}

/// Records digests of frozen parameter sets and re-checks them afterwards.
struct FreezeCheck<'a> {
    sets: &'a [(&'a str, &'a ParamSet)],
    before: Vec<String>,
}

impl<'a> FreezeCheck<'a> {
    fn new(sets: &'a [(&'a str, &'a ParamSet)]) -> Result<Self> {
        for (name, set) in sets {
            if !set.is_frozen() {
                return Err(Error::Config(format!(
                    "{name} must be frozen for this stage"
                )));
            }
        }
        let before = sets
            .iter()
            .map(|(_, s)| s.digest())
            .collect::<Result<_>>()?;
        Ok(Self { sets, before })
    }

    fn finish(self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for ((name, set), before) in self.sets.iter().zip(self.before) {
            let after = set.digest()?;
            if after != before {
                return Err(Error::Incompatible(format!(
                    "frozen component {name} changed during training"
                )));
            }
            out.push((name.to_string(), after));
        }
        Ok(out)
    }
}

/// Keeps the last batch of an epoch usable by contrastive terms.
fn pad_singletons(schedule: &mut [Vec<usize>], n: usize) {
    for b in schedule.iter_mut() {
        if b.len() == 1 {
            b.push((b[0] + 1) % n);
        }
    }
}

fn interval_due(step: usize, cfg: &OptimConfig, total: usize) -> bool {
    (step + 1) % cfg.log_every == 0 || step + 1 == total
}

/// Stage 1 on the Q-Former: ITC + ITM + ITG + omega1 * alignment.
pub fn train_stage1(
    adaptor: &Adaptor,
    data: &VlData,
    cfg: &StageConfig,
    frozen: &[(&str, &ParamSet)],
    rng: &mut Rng,
) -> Result<StageReport> {
    cfg.validate()?;
    let qf = adaptor.qformer()?;
    if data.len() < 2 {
        return Err(Error::BatchTooSmall(data.len()));
    }
    let guard = FreezeCheck::new(frozen)?;
    let opt = &cfg.stage1;
    let total = opt.total_steps(data.len());
    let mut trainer = Trainer::new(adaptor.params().vars(), opt, total)?;
    let mut schedule = batch_schedule(data.len(), opt.batch_size, total, rng);
    pad_singletons(&mut schedule, data.len());
    let mut meter = IntervalMeter::default();
    let mut records = Vec::new();
    for (step, batch) in schedule.iter().enumerate() {
        let (feats, caps, refs) = data.batch(batch)?;
        let perm = derangement(batch.len(), rng);
        let terms = stage1_terms(
            qf,
            &feats,
            &caps,
            refs.as_ref(),
            cfg.omega1,
            cfg.itc_tau,
            &perm,
            &mut Mode::Train(rng),
        )?;
        let value = scalar(&terms.total)?;
        check_finite("stage1", step, "total", value)?;
        trainer.step(&terms.total)?;
        meter.add("itc", scalar(&terms.itc)?);
        meter.add("itm", scalar(&terms.itm)?);
        meter.add("itg", scalar(&terms.itg)?);
        if let Some(a) = &terms.align {
            meter.add("align", scalar(a)?);
        }
        meter.add("total", value);
        meter.tick();
        if interval_due(step, opt, total) {
            records.push(MetricsRecord {
                stage: "stage1".into(),
                step: step + 1,
                itc: meter.mean("itc"),
                itm: meter.mean("itm"),
                itg: meter.mean("itg"),
                align: meter.mean("align"),
                omega: Some(cfg.omega1),
                total: meter.mean("total").unwrap_or(f64::NAN),
                lr: Some(trainer.current_lr()),
                ..Default::default()
            });
            log::info!(
                "stage1 step {} total {:.4}",
                step + 1,
                records.last().unwrap().total
            );
            meter.reset();
        }
    }
    Ok(StageReport {
        steps: total,
        records,
        frozen_digests: guard.finish()?,
    })
}

/// Stage 2: generation cross-entropy through the frozen LM plus
/// omega2 * alignment; only the adaptor is updated.
pub fn train_stage2(
    adaptor: &Adaptor,
    lm: &CausalLm,
    data: &VlData,
    cfg: &StageConfig,
    frozen: &[(&str, &ParamSet)],
    rng: &mut Rng,
) -> Result<StageReport> {
    cfg.validate()?;
    check_prompt_space(adaptor, lm)?;
    let mut sets: Vec<(&str, &ParamSet)> = frozen.to_vec();
    sets.push(("language_model", lm.params()));
    let guard = FreezeCheck::new(&sets)?;
    let opt = &cfg.stage2;
    let total = opt.total_steps(data.len());
    let mut trainer = Trainer::new(adaptor.params().vars(), opt, total)?;
    let schedule = batch_schedule(data.len(), opt.batch_size, total, rng);
    let mut meter = IntervalMeter::default();
    let mut records = Vec::new();
    for (step, batch) in schedule.iter().enumerate() {
        let (feats, caps, refs) = data.batch(batch)?;
        let prompts = adaptor.prompts(&feats, &mut Mode::Train(rng))?;
        let terms = stage2_terms(lm, &prompts, &caps, refs.as_ref(), cfg.omega2)?;
        let value = scalar(&terms.total)?;
        check_finite("stage2", step, "total", value)?;
        trainer.step(&terms.total)?;
        meter.add("gen_ce", scalar(&terms.gen_ce)?);
        if let Some(a) = &terms.align {
            meter.add("align", scalar(a)?);
        }
        meter.add("total", value);
        meter.tick();
        if interval_due(step, opt, total) {
            records.push(MetricsRecord {
                stage: "stage2".into(),
                step: step + 1,
                gen_ce: meter.mean("gen_ce"),
                align: meter.mean("align"),
                omega: Some(cfg.omega2),
                total: meter.mean("total").unwrap_or(f64::NAN),
                lr: Some(trainer.current_lr()),
                ..Default::default()
            });
            log::info!(
                "stage2 step {} total {:.4}",
                step + 1,
                records.last().unwrap().total
            );
            meter.reset();
        }
    }
    Ok(StageReport {
        steps: total,
        records,
        frozen_digests: guard.finish()?,
    })
}

fn check_prompt_space(adaptor: &Adaptor, lm: &CausalLm) -> Result<()> {
    if adaptor.config().d_lm != lm.config().d_lm {
        return Err(Error::Incompatible(format!(
            "adaptor d_lm {} vs language model d_lm {}",
            adaptor.config().d_lm,
            lm.config().d_lm
        )));
    }
    Ok(())
}

/// Video schedule. With references: alignment only for
/// `video_align_epochs`, then generation only for `video_gen_epochs`.
/// Without references: generation only for the sum of both, so total
/// epochs match.
pub fn train_video(
    adaptor: &Adaptor,
    lm: &CausalLm,
    data: &VlData,
    cfg: &StageConfig,
    frozen: &[(&str, &ParamSet)],
    rng: &mut Rng,
) -> Result<StageReport> {
    cfg.validate()?;
    check_prompt_space(adaptor, lm)?;
    let mut sets: Vec<(&str, &ParamSet)> = frozen.to_vec();
    sets.push(("language_model", lm.params()));
    let guard = FreezeCheck::new(&sets)?;
    let mut records = Vec::new();
    let mut steps = 0;
    let gen_epochs = match data.references {
        Some(_) => {
            steps += video_phase(
                adaptor,
                lm,
                data,
                cfg,
                cfg.video_align_epochs,
                true,
                rng,
                &mut records,
            )?;
            cfg.video_gen_epochs
        }
        None => cfg.video_align_epochs + cfg.video_gen_epochs,
    };
    steps += video_phase(adaptor, lm, data, cfg, gen_epochs, false, rng, &mut records)?;
    Ok(StageReport {
        steps,
        records,
        frozen_digests: guard.finish()?,
    })
}

#[allow(clippy::too_many_arguments)]
fn video_phase(
    adaptor: &Adaptor,
    lm: &CausalLm,
    data: &VlData,
    cfg: &StageConfig,
    epochs: usize,
    align_only: bool,
    rng: &mut Rng,
    records: &mut Vec<MetricsRecord>,
) -> Result<usize> {
    if epochs == 0 {
        return Ok(0);
    }
    let opt = OptimConfig {
        epochs,
        steps: None,
        ..cfg.video.clone()
    };
    let stage = if align_only {
        "video_align"
    } else {
        "video_gen"
    };
    let total = opt.total_steps(data.len());
    let mut trainer = Trainer::new(adaptor.params().vars(), &opt, total)?;
    let schedule = batch_schedule(data.len(), opt.batch_size, total, rng);
    let mut meter = IntervalMeter::default();
    for (step, batch) in schedule.iter().enumerate() {
        let (feats, caps, refs) = data.batch(batch)?;
        let prompts = adaptor.prompts(&feats, &mut Mode::Train(rng))?;
        let (loss, name) = if align_only {
            let r = refs.ok_or_else(|| Error::MissingInput("reference prompts".into()))?;
            (alignment_loss(&prompts, &r)?, "align")
        } else {
            (crate::pformer::recon_loss(lm, &prompts, &caps)?, "gen_ce")
        };
        let value = scalar(&loss)?;
        check_finite(stage, step, name, value)?;
        trainer.step(&loss)?;
        meter.add(name, value);
        meter.tick();
        if interval_due(step, &opt, total) {
            let mean = meter.mean(name);
            records.push(MetricsRecord {
                stage: stage.into(),
                step: step + 1,
                align: if align_only { mean } else { None },
                gen_ce: if align_only { None } else { mean },
                total: mean.unwrap_or(f64::NAN),
                lr: Some(trainer.current_lr()),
                ..Default::default()
            });
            meter.reset();
        }
    }
    Ok(total)
}
