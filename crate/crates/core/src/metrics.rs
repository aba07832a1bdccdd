//! Training log records and the line-delimited metrics file.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logging interval. Component fields are interval means; absent
/// components serialize as `null`. `total` is the weighted sum of the
/// components under the weights recorded alongside them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: usize,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub itg: Option<f64>,
    pub gen_ce: Option<f64>,
    pub align: Option<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl MetricsRecord {
    /// Recombines the components with the recorded weights.
    pub fn recombined_total(&self) -> f64 {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        match self.stage.as_str() {
            "pformer" => {
                z(self.recon)
                    + z(self.lambda_c) * z(self.contrast)
                    + z(self.lambda_v) * z(self.vocab)
            }
            "lm" => z(self.lm_ce),
            _ => {
                // when the weight is zero the alignment term is monitored only
                let weighted_align = match self.omega {
                    Some(w) if w != 0.0 => w * z(self.align),
                    Some(_) => 0.0,
                    None => z(self.align),
                };
                z(self.itc) + z(self.itm) + z(self.itg) + z(self.gen_ce) + weighted_align
            }
        }
    }
}

/// Accumulates per-step values and emits interval means.
#[derive(Debug, Default)]
pub struct IntervalMeter {
    sums: BTreeMap<&'static str, f64>,
    steps: usize,
}

impl IntervalMeter {
    pub fn add(&mut self, name: &'static str, value: f64) {
        *self.sums.entry(name).or_default() += value;
    }

    pub fn tick(&mut self) {
        self.steps += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        (self.steps > 0)
            .then(|| self.sums.get(name).map(|s| s / self.steps as f64))
            .flatten()
    }

    pub fn reset(&mut self) {
        self.sums.clear();
        self.steps = 0;
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| l.contains("\"stage\""))
        .map(|l| serde_json::from_str(l).map_err(|e| Error::malformed(path, e.to_string())))
        .collect()
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}
