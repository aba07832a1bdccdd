//! Small transformer toolkit on top of candle: parameter sets with a shared
//! freeze switch, the usual layers, and the numerically careful ops the
//! losses rely on.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive attention bias for blocked positions.
pub const NEG_INF: f64 = -1e9;

pub const INIT_STD: f64 = 0.02;

/// A trainable tensor whose gradient path is cut while its owning set is
/// frozen.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Ordered, named parameters of one model.
#[derive(Debug)]
pub struct ParamSet {
    params: Vec<(String, Var)>,
    frozen: Arc<AtomicBool>,
    dtype: DType,
}

impl ParamSet {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            frozen: Arc::new(AtomicBool::new(false)),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn add(&mut self, name: &str, t: Tensor) -> Result<Param> {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate {name}"
        );
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.params.push((name.to_string(), var.clone()));
        Ok(Param {
            var,
            frozen: self.frozen.clone(),
        })
    }

    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> Result<Param> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Param> {
        let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?;
        self.add(name, t)
    }

    pub fn freeze(&self) {
        self.frozen.store(true, Ordering::Relaxed);
    }

    pub fn unfreeze(&self) {
        self.frozen.store(false, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<TensorBlob>> {
        self.params
            .iter()
            .map(|(name, v)| {
                Ok(TensorBlob {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v
                        .as_tensor()
                        .to_dtype(DType::F32)?
                        .flatten_all()?
                        .to_vec1()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `blobs`; names and shapes must match
    /// exactly and in order.
    pub fn import(&self, blobs: &[TensorBlob]) -> Result<()> {
        if blobs.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model has {}",
                blobs.len(),
                self.params.len()
            )));
        }
        for ((name, var), blob) in self.params.iter().zip(blobs) {
            if *name != blob.name || var.dims() != blob.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "tensor {name} {:?} does not match checkpoint entry {} {:?}",
                    var.dims(),
                    blob.name,
                    blob.shape
                )));
            }
            let t = Tensor::from_vec(blob.data.clone(), blob.shape.as_slice(), &Device::Cpu)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian parameter bytes in order.
    pub fn digest(&self) -> Result<String> {
        match self.dtype {
            DType::F32 => Ok(digest_blobs(&self.export()?)),
            _ => {
                let mut h = Sha256::new();
                for (name, v) in &self.params {
                    hash_header(&mut h, name, v.dims());
                    for x in v
                        .as_tensor()
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?
                    {
                        h.update(x.to_le_bytes());
                    }
                }
                Ok(hex::encode(h.finalize()))
            }
        }
    }
}

fn hash_header(h: &mut Sha256, name: &str, shape: &[usize]) {
    h.update((name.len() as u32).to_le_bytes());
    h.update(name.as_bytes());
    h.update((shape.len() as u32).to_le_bytes());
    for d in shape {
        h.update((*d as u64).to_le_bytes());
    }
}

pub fn digest_blobs(blobs: &[TensorBlob]) -> String {
    let mut h = Sha256::new();
    for b in blobs {
        hash_header(&mut h, &b.name, &b.shape);
        for x in &b.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let keep = 1.0 / (1.0 - p);
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = from_f64(mask, x.dims(), x.dtype())?;
    Ok(x.mul(&mask)?)
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(match dtype {
        DType::F64 => Tensor::from_vec(data, shape, &Device::Cpu)?,
        _ => Tensor::from_vec(
            data.into_iter().map(|v| v as f32).collect::<Vec<f32>>(),
            shape,
            &Device::Cpu,
        )?
        .to_dtype(dtype)?,
    })
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn ids_tensor(ids: &[u32], shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(ids.to_vec(), shape, &Device::Cpu)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean softmax cross-entropy of `[n, c]` logits against class ids.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if n != targets.len() || targets.iter().any(|&t| t as usize >= c) {
        return Err(Error::Shape(format!(
            "{n}x{c} logits vs {} targets",
            targets.len()
        )));
    }
    let mut pick = vec![0f64; n * c];
    for (i, &t) in targets.iter().enumerate() {
        pick[i * c + t as usize] = 1.0;
    }
    let lp = log_softmax_last(logits)?;
    let pick = from_f64(pick, &[n, c], lp.dtype())?;
    Ok((lp.mul(&pick)?.sum_all()? * (-1.0 / n as f64))?)
}

/// Mean binary cross-entropy on logits, computed as softplus terms.
pub fn bce_with_logits(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let z = logits.flatten_all()?;
    let n = z.elem_count();
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{n} logits vs {} labels",
            labels.len()
        )));
    }
    // y=1: softplus(-z); y=0: softplus(z)
    let sign: Vec<f64> = labels.iter().map(|y| 1.0 - 2.0 * y).collect();
    let s = z.mul(&from_f64(sign, &[n], z.dtype())?)?;
    let softplus = (s.relu()? + ((s.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    Ok(softplus.mean_all()?)
}

/// `[1, 1, t, t]` bias that blocks attention to later positions.
pub fn causal_bias(t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..t * t)
        .map(|i| if i % t > i / t { NEG_INF } else { 0.0 })
        .collect();
    from_f64(data, &[1, 1, t, t], dtype)
}

/// `[b, 1, 1, t]` bias blocking keys where `valid` is false.
pub fn key_padding_bias(valid: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let b = valid.len();
    let t = valid.first().map_or(0, |v| v.len());
    let data: Vec<f64> = valid
        .iter()
        .flat_map(|row| row.iter().map(|ok| if *ok { 0.0 } else { NEG_INF }))
        .collect();
    from_f64(data, &[b, 1, 1, t], dtype)
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: Param,
    b: Option<Param>,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Self::with_std(set, rng, name, d_in, d_out, INIT_STD)
    }

    pub fn with_std(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Result<Self> {
        let w = set.normal(&format!("{name}.weight"), &[d_in, d_out], std, rng)?;
        let b = set.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn weight(&self) -> Tensor {
        self.w.t()
    }

    pub fn bias(&self) -> Option<Tensor> {
        self.b.as_ref().map(Param::t)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let w = self.w.t();
        let mut y = x.reshape((rows, d_in))?.matmul(&w)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.t())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Param,
    bias: Param,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(set: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: set.constant(&format!("{name}.gain"), &[d], 1.0)?,
            bias: set.constant(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gain.t())?
            .broadcast_add(&self.bias.t())?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Param,
    dim: usize,
}

impl Embedding {
    pub fn new(set: &mut ParamSet, rng: &mut Rng, name: &str, n: usize, d: usize) -> Result<Self> {
        Ok(Self {
            table: set.normal(&format!("{name}.table"), &[n, d], INIT_STD, rng)?,
            dim: d,
        })
    }

    pub fn table(&self) -> Tensor {
        self.table.t()
    }

    /// `ids`: `[b, t]` u32 → `[b, t, d]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self
            .table
            .t()
            .index_select(&flat, 0)?
            .reshape((b, t, self.dim))?)
    }

    /// First `t` rows as `[1, t, d]`.
    pub fn positions(&self, t: usize) -> Result<Tensor> {
        Ok(self.table.t().narrow(0, 0, t)?.unsqueeze(0)?)
    }

    pub fn rows(&self) -> usize {
        self.table.var().dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dropout: f64,
}

impl Attention {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(set, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(set, rng, &format!("{name}.k"), d_kv, d)?,
            v: Linear::new(set, rng, &format!("{name}.v"), d_kv, d)?,
            o: Linear::new(set, rng, &format!("{name}.o"), d, d)?,
            heads,
            dropout,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x`: `[b, tq, d]`, `kv`: `[b, tk, d_kv]`, `bias` broadcastable to
    /// `[b, heads, tq, tk]`.
    pub fn forward(
        &self,
        x: &Tensor,
        kv: &Tensor,
        bias: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let (b, tq, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = dropout(&softmax_last(&scores)?, self.dropout, mode)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.o.forward(&ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(set, rng, &format!("{name}.up"), d, hidden)?,
            down: Linear::new(set, rng, &format!("{name}.down"), hidden, d)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.up.forward(x)?.relu()?;
        dropout(&self.down.forward(&h)?, self.dropout, mode)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    dropout: f64,
}

impl Block {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(set, &format!("{name}.ln_attn"), d)?,
            attn: Attention::new(set, rng, &format!("{name}.attn"), d, d, heads, dropout)?,
            ln_ffn: LayerNorm::new(set, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(set, rng, &format!("{name}.ffn"), d, 4 * d, dropout)?,
            dropout,
        })
    }

    pub fn attend(&self, x: &Tensor, bias: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let a = self.attn.forward(&h, &h, bias, mode)?;
        Ok((x + dropout(&a, self.dropout, mode)?)?)
    }

    pub fn feed_forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        Ok((x + self.ffn.forward(&self.ln_ffn.forward(x)?, mode)?)?)
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let x = self.attend(x, bias, mode)?;
        self.feed_forward(&x, mode)
    }
}

/// Pre-norm cross-attention sub-layer.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    ln: LayerNorm,
    attn: Attention,
    dropout: f64,
}

impl CrossAttention {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(set, &format!("{name}.ln"), d)?,
            attn: Attention::new(set, rng, &format!("{name}.attn"), d, d_kv, heads, dropout)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, kv: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let a = self.attn.forward(&self.ln.forward(x)?, kv, None, mode)?;
        Ok((x + dropout(&a, self.dropout, mode)?)?)
    }
}
