//! AdamW with linear warm-up, cosine decay and global-norm clipping.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            weight_decay: 0.05,
            batch_size: 64,
            epochs: 10,
            steps: None,
            grad_clip: 1.0,
            log_every: 25,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || self.min_lr < 0.0 || self.log_every == 0 {
            return Err(Error::Config(format!("bad optimizer settings: {self:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * examples.div_ceil(self.batch_size))
            .max(1)
    }

    /// Learning rate at `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr
            + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    total: usize,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig, total: usize) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr_at(0, total),
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            cfg: cfg.clone(),
            total,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step, self.total)
    }

    /// One update from `loss`. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericalAbort {
                stage: "optimizer".into(),
                step: self.step,
                detail: "non-finite gradient norm".into(),
            });
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let scale = self.cfg.grad_clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        self.opt.set_learning_rate(self.current_lr());
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }
}

/// Index batches for `total` steps: each epoch is a fresh shuffle of
/// `0..n`, chunked; the final chunk of an epoch may be short.
pub fn batch_schedule(n: usize, batch_size: usize, total: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(total);
    while out.len() < total && n > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if out.len() == total {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

pub fn check_finite(stage: &str, step: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalAbort {
            stage: stage.to_string(),
            step,
            detail: format!("{name} loss is {value}"),
        })
    }
}
