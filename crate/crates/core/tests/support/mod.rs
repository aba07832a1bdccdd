//! Brute-force oracles and finite-difference gradient checks shared by the
//! loss tests and the acceptance suite.

#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use promptformer::adaptors::{alignment_loss, Adaptor, AdaptorConfig, AdaptorKind};
use promptformer::corpus::{gen_paired_dataset, CorpusParams};
use promptformer::nn::{bce_with_logits, cross_entropy, from_f64, scalar, to_f64_vec, Mode};
use promptformer::pformer::{
    contrastive_loss, pformer_objective, recon_loss, vocab_loss, PFormer, PFormerConfig,
};
use promptformer::rng::Rng;
use promptformer::tinylm::{lm_loss, CausalLm, LmConfig, TokenSeq, Tokenizer, PAD};
use promptformer::vltrain::{derangement, itc_loss, stage1_terms, stage2_terms};
use promptformer::Result;
use rand::{Rng as _, SeedableRng};

pub const ORACLE_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &str, error: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tol
    }
}

fn t64(data: &[f64], shape: &[usize]) -> Result<Tensor> {
    from_f64(data.to_vec(), shape, DType::F64)
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Mean of `-log p(target)` over rows whose target is not `skip`.
fn ce_oracle(logits: &[f64], classes: usize, targets: &[u32], skip: Option<u32>) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &t) in logits.chunks(classes).zip(targets) {
        if Some(t) == skip {
            continue;
        }
        total -= log_softmax(row)[t as usize];
        n += 1;
    }
    total / n as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Symmetric InfoNCE of an `n x n` score function with positives on the
/// diagonal.
fn info_nce_oracle(n: usize, s: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s(i, j)).collect();
        let col: Vec<f64> = (0..n).map(|j| s(j, i)).collect();
        total -= log_softmax(&row)[i] + log_softmax(&col)[i];
    }
    total / (2.0 * n as f64)
}

fn rows(data: &[f64], width: usize) -> Vec<&[f64]> {
    data.chunks(width).collect()
}

fn contrastive_oracle(a: &[f64], b: &[f64], d: usize, tau: f64) -> f64 {
    let (ra, rb) = (rows(a, d), rows(b, d));
    info_nce_oracle(ra.len(), |i, j| cosine(ra[i], rb[j]) / tau)
}

fn itc_oracle(q: &[f64], k: usize, t: &[f64], d: usize, tau: f64) -> f64 {
    let (rq, rt) = (rows(q, d), rows(t, d));
    let n = rt.len();
    info_nce_oracle(n, |i, j| {
        (0..k)
            .map(|kk| cosine(rq[i * k + kk], rt[j]))
            .fold(f64::NEG_INFINITY, f64::max)
            / tau
    })
}

fn vocab_oracle(p: &[f64], vocab: &[f64], d: usize) -> f64 {
    let vr = rows(vocab, d);
    let pr = rows(p, d);
    let total: f64 = pr
        .iter()
        .map(|x| {
            vr.iter()
                .map(|v| x.iter().zip(*v).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / pr.len() as f64
}

fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn bce_oracle(z: &[f64], y: &[f64]) -> f64 {
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(z, y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / z.len() as f64
}

/// Every loss against its oracle on random micro inputs (N<=3, K<=2,
/// d<=8), plus the closed-form hand cases. Each check's error is the
/// largest absolute deviation seen.
pub fn oracle_checks(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = [0f64; 7];
    for _ in 0..trials {
        let n = rng.random_range(2..=3);
        let k = rng.random_range(1..=2);
        let d = rng.random_range(2..=8);
        let c = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..1.0);

        let logits = uniform(&mut rng, n * c);
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let got = scalar(&cross_entropy(&t64(&logits, &[n, c])?, &targets)?)?;
        worst[0] = worst[0].max((got - ce_oracle(&logits, c, &targets, None)).abs());

        // lm_loss skips PAD (id 0) targets; keep at least one real target.
        let steps = rng.random_range(1..=3);
        let v = c.max(3);
        let lm_logits = uniform(&mut rng, n * steps * v);
        let mut lm_targets: Vec<u32> = (0..n * steps)
            .map(|_| rng.random_range(0..v as u32))
            .collect();
        lm_targets[0] = 1;
        let got = scalar(&lm_loss(&t64(&lm_logits, &[n, steps, v])?, &lm_targets)?)?;
        worst[1] = worst[1].max((got - ce_oracle(&lm_logits, v, &lm_targets, Some(PAD))).abs());

        let a = uniform(&mut rng, n * d);
        let b = uniform(&mut rng, n * d);
        let got = scalar(&contrastive_loss(
            &t64(&a, &[n, d])?,
            &t64(&b, &[n, d])?,
            tau,
        )?)?;
        worst[2] = worst[2].max((got - contrastive_oracle(&a, &b, d, tau)).abs());

        let q = uniform(&mut rng, n * k * d);
        let got = scalar(&itc_loss(&t64(&q, &[n, k, d])?, &t64(&b, &[n, d])?, tau)?)?;
        worst[3] = worst[3].max((got - itc_oracle(&q, k, &b, d, tau)).abs());

        let vocab = uniform(&mut rng, c * d);
        let got = scalar(&vocab_loss(&t64(&q, &[n, k, d])?, &t64(&vocab, &[c, d])?)?)?;
        worst[4] = worst[4].max((got - vocab_oracle(&q, &vocab, d)).abs());

        let r = uniform(&mut rng, n * k * d);
        let got = scalar(&alignment_loss(
            &t64(&q, &[n, k, d])?,
            &t64(&r, &[n, k, d])?,
        )?)?;
        worst[5] = worst[5].max((got - mse_oracle(&q, &r)).abs());

        let z = uniform(&mut rng, n);
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..2u8)))
            .collect();
        let got = scalar(&bce_with_logits(&t64(&z, &[n])?, &y)?)?;
        worst[6] = worst[6].max((got - bce_oracle(&z, &y)).abs());
    }
    let names = [
        "cross_entropy",
        "lm_loss",
        "contrastive",
        "itc",
        "vocab",
        "alignment",
        "bce",
    ];
    let mut out: Vec<Check> = names
        .iter()
        .zip(worst)
        .map(|(n, e)| Check::new(&format!("oracle/{n}"), e, ORACLE_TOL))
        .collect();
    out.extend(hand_cases()?);
    Ok(out)
}

fn hand_cases() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let v = 7;
    let ce = scalar(&cross_entropy(&t64(&vec![0.0; 2 * v], &[2, v])?, &[3, 5])?)?;
    out.push(Check::new(
        "hand/uniform_logits_ln_v",
        (ce - (v as f64).ln()).abs(),
        ORACLE_TOL,
    ));

    let lm = scalar(&lm_loss(
        &t64(&vec![0.0; 3 * v], &[1, 3, v])?,
        &[2, PAD, 6],
    )?)?;
    out.push(Check::new(
        "hand/uniform_lm_logits_ln_v",
        (lm - (v as f64).ln()).abs(),
        ORACLE_TOL,
    ));

    let row = [0.4, -1.2, 0.7];
    let same = t64(&row.repeat(3), &[3, 3])?;
    let c = scalar(&contrastive_loss(&same, &same, 0.05)?)?;
    out.push(Check::new(
        "hand/identical_batch_ln_n",
        (c - 3f64.ln()).abs(),
        ORACLE_TOL,
    ));

    let q = t64(&row.repeat(6), &[3, 2, 3])?;
    let itc = scalar(&itc_loss(&q, &same, 0.07)?)?;
    out.push(Check::new(
        "hand/identical_itc_batch_ln_n",
        (itc - 3f64.ln()).abs(),
        ORACLE_TOL,
    ));

    let vocab = [1.0, 0.0, -2.0, 0.5, 0.3, 0.3, 4.0, -1.0];
    let on_vocab = [0.3, 0.3, 1.0, 0.0, 4.0, -1.0];
    let vl = scalar(&vocab_loss(
        &t64(&on_vocab, &[1, 3, 2])?,
        &t64(&vocab, &[4, 2])?,
    )?)?;
    out.push(Check::new(
        "hand/prompt_on_vocab_zero",
        vl.abs(),
        ORACLE_TOL,
    ));

    let mse = scalar(&alignment_loss(
        &t64(&[1.0, 0.0], &[1, 1, 2])?,
        &t64(&[0.0, 0.0], &[1, 1, 2])?,
    )?)?;
    out.push(Check::new("hand/mse_half", (mse - 0.5).abs(), ORACLE_TOL));
    Ok(out)
}

const EPS: f64 = 1e-6;

/// Relative error `|g - fd| / max(|g|, |fd|)` between the autograd gradient
/// of `f` and central differences, over every coordinate of `vars` (or
/// `sample` random coordinates per var).
pub fn fd_error(
    vars: &[Var],
    sample: Option<(usize, &mut Rng)>,
    f: &dyn Fn() -> Result<Tensor>,
) -> Result<f64> {
    let grads = f()?.backward()?;
    let mut sample = sample;
    let (mut diff, mut an, mut num) = (0.0, 0.0, 0.0);
    for v in vars {
        let base = to_f64_vec(v.as_tensor())?;
        let g = match grads.get(v.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; base.len()],
        };
        let coords: Vec<usize> = match sample.as_mut() {
            None => (0..base.len()).collect(),
            Some((k, rng)) => (0..*k).map(|_| rng.random_range(0..base.len())).collect(),
        };
        let shape = v.dims().to_vec();
        for i in coords {
            let mut x = base.clone();
            x[i] = base[i] + EPS;
            v.set(&t64(&x, &shape)?)?;
            let up = scalar(&f()?)?;
            x[i] = base[i] - EPS;
            v.set(&t64(&x, &shape)?)?;
            let down = scalar(&f()?)?;
            v.set(&t64(&base, &shape)?)?;
            let fd = (up - down) / (2.0 * EPS);
            diff += (g[i] - fd).powi(2);
            an += g[i] * g[i];
            num += fd * fd;
        }
    }
    if an == 0.0 {
        // a vanishing autograd gradient would make the ratio meaningless
        return Ok(f64::INFINITY);
    }
    Ok(diff.sqrt() / an.sqrt().max(num.sqrt()))
}

fn var(rng: &mut Rng, shape: &[usize]) -> Result<Var> {
    let n = shape.iter().product();
    Ok(Var::from_tensor(&t64(&uniform(rng, n), shape)?)?)
}

fn tiny_lm(rng: &mut Rng) -> Result<CausalLm> {
    let cfg = LmConfig {
        layers: 1,
        d_lm: 8,
        heads: 2,
        ..LmConfig::default()
    };
    let lm = CausalLm::new(&cfg, DType::F64, rng)?;
    lm.freeze();
    Ok(lm)
}

fn captions(n: usize) -> Result<Vec<TokenSeq>> {
    let tok = Tokenizer::grammar();
    let split = gen_paired_dataset(n, 5, "grad", &CorpusParams::default())?;
    split
        .pairs
        .iter()
        .map(|p| tok.encode(&p.caption.text))
        .collect()
}

fn tiny_adaptor(kind: AdaptorKind, d_feat: usize, rng: &mut Rng) -> Result<Adaptor> {
    let cfg = AdaptorConfig {
        kind,
        k: 2,
        d_model: 8,
        d_feat,
        d_lm: 8,
        layers: 1,
        heads: 2,
        ..AdaptorConfig::default()
    };
    Adaptor::new(&cfg, DType::F64, rng)
}

/// Gradient of every loss with respect to its trainable inputs, plus the
/// composite stage objectives with respect to sampled adaptor (and
/// P-Former) parameters.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (n, k, d, c) = (3, 2, 5, 6);

    let logits = var(&mut rng, &[n, c])?;
    let e = fd_error(&[logits.clone()], None, &|| {
        cross_entropy(logits.as_tensor(), &[1, 4, 0])
    })?;
    out.push(Check::new("grad/cross_entropy", e, GRAD_TOL));

    let lm_logits = var(&mut rng, &[2, 3, c])?;
    let e = fd_error(&[lm_logits.clone()], None, &|| {
        lm_loss(lm_logits.as_tensor(), &[3, 1, PAD, 5, 2, PAD])
    })?;
    out.push(Check::new("grad/lm_loss", e, GRAD_TOL));

    let (a, b) = (var(&mut rng, &[n, d])?, var(&mut rng, &[n, d])?);
    let e = fd_error(&[a.clone(), b.clone()], None, &|| {
        contrastive_loss(a.as_tensor(), b.as_tensor(), 0.2)
    })?;
    out.push(Check::new("grad/contrastive", e, GRAD_TOL));

    let q = var(&mut rng, &[n, k, d])?;
    let e = fd_error(&[q.clone(), b.clone()], None, &|| {
        itc_loss(q.as_tensor(), b.as_tensor(), 0.3)
    })?;
    out.push(Check::new("grad/itc", e, GRAD_TOL));

    let vocab = t64(&uniform(&mut rng, c * d), &[c, d])?;
    let e = fd_error(&[q.clone()], None, &|| vocab_loss(q.as_tensor(), &vocab))?;
    out.push(Check::new("grad/vocab", e, GRAD_TOL));

    let reference = t64(&uniform(&mut rng, n * k * d), &[n, k, d])?;
    let e = fd_error(&[q.clone()], None, &|| {
        alignment_loss(q.as_tensor(), &reference)
    })?;
    out.push(Check::new("grad/alignment", e, GRAD_TOL));

    let z = var(&mut rng, &[4])?;
    let e = fd_error(&[z.clone()], None, &|| {
        bce_with_logits(z.as_tensor(), &[1.0, 0.0, 0.0, 1.0])
    })?;
    out.push(Check::new("grad/bce", e, GRAD_TOL));

    let lm = tiny_lm(&mut rng)?;
    let caps = captions(n)?;
    let cap_rows: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
    let prompts = var(&mut rng, &[n, 2, 8])?;
    let e = fd_error(&[prompts.clone()], None, &|| {
        recon_loss(&lm, prompts.as_tensor(), &cap_rows)
    })?;
    out.push(Check::new("grad/recon", e, GRAD_TOL));

    let refs = t64(&uniform(&mut rng, n * 2 * 8), &[n, 2, 8])?;
    let m = 4;
    let feats = t64(&uniform(&mut rng, n * m * 6), &[n, m, 6])?;
    let adaptor = tiny_adaptor(AdaptorKind::QformerLite, 6, &mut rng)?;
    let qf = adaptor.qformer()?;
    let perm = derangement(n, &mut rng);
    let vars = adaptor.params().vars();
    let e = fd_error(&vars, Some((4, &mut rng)), &|| {
        Ok(stage1_terms(
            qf,
            &feats,
            &cap_rows,
            Some(&refs),
            10.0,
            0.07,
            &perm,
            &mut Mode::Eval,
        )?
        .total)
    })?;
    out.push(Check::new("grad/stage1_composite", e, COMPOSITE_TOL));

    let e = fd_error(&vars, Some((4, &mut rng)), &|| {
        let p = adaptor.prompts(&feats, &mut Mode::Eval)?;
        Ok(stage2_terms(&lm, &p, &cap_rows, Some(&refs), 100.0)?.total)
    })?;
    out.push(Check::new("grad/stage2_composite", e, COMPOSITE_TOL));

    let frames = t64(&uniform(&mut rng, n * 3 * 10), &[n, 3, 10])?;
    let plain = tiny_adaptor(AdaptorKind::Plain, 10, &mut rng)?;
    let e = fd_error(&plain.params().vars(), Some((4, &mut rng)), &|| {
        let p = plain.prompts(&frames, &mut Mode::Eval)?;
        Ok(stage2_terms(&lm, &p, &cap_rows, Some(&refs), 100.0)?.total)
    })?;
    out.push(Check::new("grad/video_composite", e, COMPOSITE_TOL));

    let pcfg = PFormerConfig {
        layers: 1,
        d_enc: 8,
        heads: 2,
        k: 2,
        d_lm: 8,
        ..PFormerConfig::default()
    };
    let pf = PFormer::new(&pcfg, DType::F64, &mut rng)?;
    let e = fd_error(&pf.params().vars(), Some((4, &mut rng)), &|| {
        Ok(pformer_objective(&pf, &lm, &cap_rows, &mut Mode::Eval)?.0)
    })?;
    out.push(Check::new("grad/pformer_composite", e, COMPOSITE_TOL));
    Ok(out)
}
