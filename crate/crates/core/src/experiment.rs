//! End-to-end pipeline commands over a run directory.
//!
//! Layout under the run root:
//! `data/{train,eval,corpus_extended,corpus_paired,video_train,video_eval}`,
//! `ckpt/{lm,pformer,vision,stage1,stage2,video}.ckpt` and
//! `logs/metrics.jsonl`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adaptors::{
    pretrain_vision, Adaptor, AdaptorConfig, AdaptorKind, SequenceEncoder, VisionConfig,
    VisionEncoder,
};
use crate::checkpoint::ModelCheckpoint;
use crate::corpus::{
    all_captions, color_question, distinct_caption_count, gen_heldout_split, gen_paired_dataset,
    gen_scene, gen_sentence_corpus, gen_video_split, load_corpus, load_split, load_video,
    parse_caption, save_corpus, save_split, save_video, scene_context, CorpusParams, Coverage,
    DatasetSplit, SceneSpec, VideoSplit,
};
use crate::error::{Error, Result};
use crate::evalsuite::{caption_eval, retrieval_eval, EvalReport};
use crate::metrics::{append_jsonl, MetricsRecord};
use crate::nn::ParamSet;
use crate::optim::OptimConfig;
use crate::pformer::{train_pformer, PFormer, PFormerConfig};
use crate::rng::SeedStreams;
use crate::tinylm::{
    evaluate_lm, pretrain_lm_seqs, CausalLm, LmConfig, LmEval, TokenSeq, Tokenizer,
};
use crate::vltrain::{train_stage1, train_stage2, train_video, StageConfig, StageReport, VlData};

pub const ROOT_ENV: &str = "PROMPTFORMER_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub root: PathBuf,
    /// Relative entries resolve against `root`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let root = std::env::var_os(ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs/default"));
        Self {
            root,
            data: "data".into(),
            checkpoints: "ckpt".into(),
            logs: "logs".into(),
        }
    }
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn data_dir(&self, name: &str) -> PathBuf {
        self.resolve(&self.data).join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.resolve(&self.checkpoints).join(format!("{name}.ckpt"))
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.resolve(&self.logs).join("metrics.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Seed of every generated split; separate from the training seed so
    /// several training seeds can share one dataset.
    pub seed: u64,
    pub corpus: CorpusParams,
    pub train: usize,
    pub eval: usize,
    pub corpus_extended: usize,
    pub corpus_paired: usize,
    pub video_train: usize,
    pub video_eval: usize,
    pub video_frames: usize,
    /// Share of LM pretraining captions preceded by a scene context.
    pub context_fraction: f64,
    /// Share of LM pretraining documents that are color questions.
    pub qa_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusParams::default(),
            train: 4000,
            eval: 256,
            corpus_extended: 8000,
            corpus_paired: 4000,
            video_train: 1000,
            video_eval: 128,
            video_frames: 4,
            context_fraction: 0.5,
            qa_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of all training randomness; modules draw named substreams.
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub data: DataConfig,
    pub lm: LmConfig,
    pub lm_optim: OptimConfig,
    pub pformer: PFormerConfig,
    pub pformer_optim: OptimConfig,
    /// Sentence corpus the P-Former trains on.
    pub pformer_corpus: Coverage,
    /// Uses reference prompts in the stages; false is the baseline without
    /// a P-Former.
    pub use_pformer: bool,
    pub vision: VisionConfig,
    pub adaptor: AdaptorConfig,
    pub video_adaptor: AdaptorConfig,
    pub stage: StageConfig,
    /// Text appended after BOS when decoding captions.
    pub eval_template: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = Tokenizer::grammar().vocab_size();
        let vision = VisionConfig::default();
        let frame_dim = vision.grid_size * vision.grid_size * vision.d_feat;
        Self {
            seed: 0,
            precision: Precision::F32,
            paths: Paths::default(),
            data: DataConfig::default(),
            lm: LmConfig::default(),
            lm_optim: OptimConfig {
                epochs: 4,
                ..OptimConfig::default()
            },
            pformer: PFormerConfig::default(),
            pformer_optim: OptimConfig {
                epochs: 4,
                ..OptimConfig::default()
            },
            pformer_corpus: Coverage::Extended,
            use_pformer: true,
            vision,
            adaptor: AdaptorConfig {
                vocab_size: vocab,
                ..AdaptorConfig::default()
            },
            video_adaptor: AdaptorConfig {
                kind: AdaptorKind::Plain,
                vocab_size: vocab,
                d_feat: frame_dim,
                ..AdaptorConfig::default()
            },
            stage: StageConfig::default(),
            eval_template: String::new(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced widths and step budgets that run the whole pipeline on one
    /// CPU core in minutes. Every other setting keeps its default.
    pub fn desk() -> Self {
        let d = 64;
        let base = Self::default();
        let vision = VisionConfig {
            d_feat: d,
            ..base.vision.clone()
        };
        let frame_dim = vision.grid_size * vision.grid_size * d;
        let steps = |n: usize, lr: f64| OptimConfig {
            lr,
            steps: Some(n),
            warmup_steps: 50.min(n / 5),
            log_every: 50,
            ..OptimConfig::default()
        };
        Self {
            data: DataConfig {
                train: 400,
                eval: 200,
                corpus_extended: 2000,
                corpus_paired: 400,
                video_train: 2000,
                video_eval: 100,
                ..base.data.clone()
            },
            lm: LmConfig {
                layers: 2,
                d_lm: d,
                ..base.lm.clone()
            },
            lm_optim: steps(600, 3e-3),
            pformer: PFormerConfig {
                layers: 2,
                d_enc: d,
                d_lm: d,
                ..base.pformer.clone()
            },
            pformer_optim: steps(600, 2e-3),
            adaptor: AdaptorConfig {
                d_model: d,
                d_feat: d,
                d_lm: d,
                ..base.adaptor.clone()
            },
            video_adaptor: AdaptorConfig {
                d_model: d,
                d_feat: frame_dim,
                d_lm: d,
                ..base.video_adaptor.clone()
            },
            vision,
            stage: StageConfig {
                stage1: steps(400, 1e-3),
                stage2: steps(200, 3e-3),
                video: OptimConfig {
                    lr: 5e-4,
                    batch_size: 32,
                    warmup_steps: 30,
                    ..OptimConfig::default()
                },
                ..base.stage.clone()
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.corpus.validate()?;
        if !(0.0..1.0).contains(&self.data.qa_fraction)
            || !(0.0..=1.0).contains(&self.data.context_fraction)
        {
            return Err(Error::Config(
                "qa_fraction must lie in [0, 1) and context_fraction in [0, 1]".into(),
            ));
        }
        if self.data.train < 2 || self.data.eval < 5 {
            return Err(Error::Config(
                "train needs at least 2 and eval at least 5 examples".into(),
            ));
        }
        self.lm.validate()?;
        self.pformer.validate()?;
        self.adaptor.validate()?;
        self.video_adaptor.validate()?;
        self.stage.validate()?;
        self.lm_optim.validate()?;
        self.pformer_optim.validate()?;
        let k = self.pformer.k;
        let d = self.lm.d_lm;
        for (name, a) in [
            ("adaptor", &self.adaptor),
            ("video_adaptor", &self.video_adaptor),
        ] {
            if a.k != k || a.d_lm != d {
                return Err(Error::Incompatible(format!(
                    "{name} has K={} d_lm={} but the P-Former has K={k} and the LM d_lm={d}",
                    a.k, a.d_lm
                )));
            }
        }
        if self.pformer.d_lm != d {
            return Err(Error::Incompatible(format!(
                "P-Former d_lm {} vs LM d_lm {d}",
                self.pformer.d_lm
            )));
        }
        if self.adaptor.kind != AdaptorKind::QformerLite {
            return Err(Error::Config(
                "the image adaptor must be qformer_lite".into(),
            ));
        }
        let v = &self.vision;
        if v.grid_size != self.data.corpus.grid_size
            || v.d_feat != self.adaptor.d_feat
            || v.grid_size * v.grid_size * v.d_feat != self.video_adaptor.d_feat
        {
            return Err(Error::Incompatible(
                "vision encoder does not match corpus grid or adaptor d_feat".into(),
            ));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    fn streams(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    fn save(&self, ck: ModelCheckpoint, name: &str) -> Result<String> {
        let digest = ck.digest.clone();
        ck.with_run_config(self)
            .save(&self.paths.checkpoint(name))?;
        Ok(digest)
    }

    fn load(&self, name: &str) -> Result<ModelCheckpoint> {
        let path = self.paths.checkpoint(name);
        if !path.exists() {
            return Err(Error::MissingInput(format!(
                "{} (run the producing command first)",
                path.display()
            )));
        }
        let ck = ModelCheckpoint::load(&path)?;
        if ck.header.tokenizer_hash != Tokenizer::grammar().hash() {
            return Err(Error::Incompatible(format!(
                "{name} checkpoint was built with another tokenizer"
            )));
        }
        Ok(ck)
    }

    fn log(&self, records: &[MetricsRecord]) -> Result<()> {
        append_jsonl(&self.paths.metrics_log(), records)
    }
}

/// Summary of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandOutput {
    pub command: String,
    /// `(artifact, digest)` of checkpoints written.
    pub digests: Vec<(String, String)>,
    pub eval: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_eval: Option<LmEval>,
}

impl CommandOutput {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            digests: Vec::new(),
            eval: Vec::new(),
            lm_eval: None,
        }
    }
}

fn need_dir(dir: &Path) -> Result<()> {
    if dir.join("split.meta").exists()
        || dir.join("corpus.meta").exists()
        || dir.join("video.meta").exists()
    {
        Ok(())
    } else {
        Err(Error::MissingInput(format!(
            "{} (run gen-data first)",
            dir.display()
        )))
    }
}

fn split(cfg: &ExperimentConfig, name: &str) -> Result<DatasetSplit> {
    let dir = cfg.paths.data_dir(name);
    need_dir(&dir)?;
    load_split(&dir)
}

fn video(cfg: &ExperimentConfig, name: &str) -> Result<VideoSplit> {
    let dir = cfg.paths.data_dir(name);
    need_dir(&dir)?;
    load_video(&dir)
}

fn sentences(cfg: &ExperimentConfig, coverage: Coverage) -> Result<Vec<String>> {
    let name = match coverage {
        Coverage::Extended => "corpus_extended",
        Coverage::PairedOnly => "corpus_paired",
    };
    let dir = cfg.paths.data_dir(name);
    need_dir(&dir)?;
    Ok(load_corpus(&dir)?
        .sentences
        .into_iter()
        .map(|c| c.text)
        .collect())
}

/// Up to `limit` distinct grammar sentences, drawn under a shifted seed, that
/// do not occur in the extended corpus.
pub fn held_out_sentences(cfg: &ExperimentConfig, limit: usize) -> Result<Vec<String>> {
    let seen: HashSet<String> = sentences(cfg, Coverage::Extended)?.into_iter().collect();
    let corpus = &cfg.data.corpus;
    let space = distinct_caption_count(&corpus.scene_params(Vec::new()));
    Ok(gen_sentence_corpus(
        space,
        cfg.data.seed + 7919,
        Coverage::Extended,
        corpus,
        true,
    )?
    .sentences
    .into_iter()
    .map(|c| c.text)
    .filter(|t| !seen.contains(t))
    .take(limit)
    .collect())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let d = &cfg.data;
    let train = gen_paired_dataset(d.train, d.seed, "train", &d.corpus)?;
    let eval = gen_heldout_split(d.eval, d.seed, "eval", &d.corpus, &train)?;
    save_split(&train, &cfg.paths.data_dir("train"))?;
    save_split(&eval, &cfg.paths.data_dir("eval"))?;
    for (n, cov, name) in [
        (d.corpus_extended, Coverage::Extended, "corpus_extended"),
        (d.corpus_paired, Coverage::PairedOnly, "corpus_paired"),
    ] {
        let corpus = gen_sentence_corpus(n, d.seed, cov, &d.corpus, false)?;
        save_corpus(&corpus, &cfg.paths.data_dir(name))?;
    }
    let vt = gen_video_split(
        d.video_train,
        d.seed,
        "video_train",
        &d.corpus,
        d.video_frames,
    )?;
    let ve = gen_video_split(
        d.video_eval,
        d.seed,
        "video_eval",
        &d.corpus,
        d.video_frames,
    )?;
    save_video(&vt, &cfg.paths.data_dir("video_train"))?;
    save_video(&ve, &cfg.paths.data_dir("video_eval"))?;
    Ok(CommandOutput::new("gen-data"))
}

/// The LM's pretraining documents, built from the extended corpus. A
/// `context_fraction` share of captions is preceded (before BOS) by a
/// context made of the caption's first word and the scene's compact
/// attribute listing. A `qa_fraction` share of all documents are color
/// questions answered from such a context.
pub fn lm_documents(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<Vec<TokenSeq>> {
    let text = sentences(cfg, Coverage::Extended)?;
    let grid = cfg.data.corpus.grid_size;
    let mut rng = cfg.streams().stream("lm/docs");
    let with_context = |lead: &str, scene: &SceneSpec, body: TokenSeq| -> Result<TokenSeq> {
        let mut ids = tok.encode_words(&format!("{lead} {}", scene_context(scene)?))?;
        ids.extend(body.0);
        Ok(TokenSeq(ids))
    };
    let mut docs = Vec::with_capacity(text.len());
    for s in &text {
        let body = tok.encode(s)?;
        if rng.random::<f64>() < cfg.data.context_fraction {
            let lead = s.split(' ').next().unwrap_or_default();
            docs.push(with_context(lead, &parse_caption(s, grid)?.0, body)?);
        } else {
            docs.push(body);
        }
    }
    let n_qa = ((text.len() as f64) * cfg.data.qa_fraction / (1.0 - cfg.data.qa_fraction)).round()
        as usize;
    for i in 0..n_qa {
        let (scene, _) = parse_caption(&text[i % text.len()], grid)?;
        let target = &scene.objects[rng.random_range(0..scene.objects.len())];
        let qa = format!("{} {}", color_question(target.shape), target.color.word());
        let lead = text[rng.random_range(0..text.len())]
            .split(' ')
            .next()
            .unwrap_or_default();
        docs.push(with_context(lead, &scene, tok.encode(&qa)?)?);
    }
    Ok(docs)
}

pub fn train_lm(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let tok = Tokenizer::grammar();
    let docs = lm_documents(cfg, &tok)?;
    let s = cfg.streams();
    let lm = CausalLm::new(&cfg.lm, cfg.dtype(), &mut s.stream("lm/init"))?;
    let report = pretrain_lm_seqs(&lm, &docs, &cfg.lm_optim, &mut s.stream("lm/train"))?;
    cfg.log(&report.records)?;
    lm.freeze();
    let held_out = held_out_sentences(cfg, 200)?;
    let eval = evaluate_lm(
        &lm,
        &tok,
        &held_out,
        cfg.data.corpus.grid_size,
        cfg.data.corpus.max_objects,
    )?;
    if eval.grammar_accuracy < 0.90 {
        log::warn!(
            "lm held-out grammar accuracy {:.3} is below 0.90",
            eval.grammar_accuracy
        );
    }
    let mut out = CommandOutput::new("train-lm");
    out.lm_eval = Some(eval);
    out.digests
        .push(("lm".into(), cfg.save(lm.checkpoint(&tok.hash())?, "lm")?));
    Ok(out)
}

fn load_lm(cfg: &ExperimentConfig) -> Result<CausalLm> {
    let lm = CausalLm::from_checkpoint(&cfg.load("lm")?, cfg.dtype())?;
    lm.freeze();
    if lm.config().d_lm != cfg.lm.d_lm {
        return Err(Error::Incompatible(format!(
            "lm checkpoint has d_lm {} but the config asks for {}",
            lm.config().d_lm,
            cfg.lm.d_lm
        )));
    }
    Ok(lm)
}

pub fn train_pformer_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let tok = Tokenizer::grammar();
    let lm = load_lm(cfg)?;
    let text = sentences(cfg, cfg.pformer_corpus)?;
    let s = cfg.streams();
    let pf = PFormer::new(&cfg.pformer, cfg.dtype(), &mut s.stream("pformer/init"))?;
    let report = train_pformer(
        &pf,
        &lm,
        &tok,
        &text,
        &cfg.pformer_optim,
        &mut s.stream("pformer/train"),
    )?;
    cfg.log(&report.records)?;
    pf.freeze();
    let mut out = CommandOutput::new("train-pformer");
    out.digests.push((
        "pformer".into(),
        cfg.save(pf.checkpoint(&tok.hash())?, "pformer")?,
    ));
    Ok(out)
}

fn load_pformer(cfg: &ExperimentConfig) -> Result<Option<PFormer>> {
    if !cfg.use_pformer {
        return Ok(None);
    }
    let pf = PFormer::from_checkpoint(&cfg.load("pformer")?, cfg.dtype())?;
    pf.freeze();
    let pc = pf.config();
    if pc.k != cfg.adaptor.k || pc.d_lm != cfg.lm.d_lm {
        return Err(Error::Incompatible(format!(
            "P-Former checkpoint has K={} d_lm={} but the adaptor expects K={} d_lm={}",
            pc.k, pc.d_lm, cfg.adaptor.k, cfg.lm.d_lm
        )));
    }
    Ok(Some(pf))
}

/// Loads the frozen vision encoder, pretraining and saving it on first use.
fn vision(cfg: &ExperimentConfig, out: &mut CommandOutput) -> Result<VisionEncoder> {
    let path = cfg.paths.checkpoint("vision");
    if path.exists() {
        let enc = VisionEncoder::from_checkpoint(&cfg.load("vision")?, cfg.dtype())?;
        if enc.config() != &cfg.vision {
            return Err(Error::Incompatible(
                "vision checkpoint config differs from the run config".into(),
            ));
        }
        return Ok(enc);
    }
    let s = cfg.streams();
    let enc = VisionEncoder::new(&cfg.vision, cfg.dtype(), &mut s.stream("vision/init"))?;
    let sp = cfg.data.corpus.scene_params(Vec::new());
    let mut scene_rng = s.stream("vision/scenes");
    let scenes: Vec<_> = (0..cfg.vision.pretrain_scenes)
        .map(|_| gen_scene(&mut scene_rng, &sp))
        .collect();
    let records = pretrain_vision(&enc, &scenes, &mut s.stream("vision/train"))?;
    cfg.log(&records)?;
    let tok = Tokenizer::grammar();
    out.digests.push((
        "vision".into(),
        cfg.save(enc.checkpoint(&tok.hash())?, "vision")?,
    ));
    Ok(enc)
}

fn load_adaptor(cfg: &ExperimentConfig, name: &str, expect: &AdaptorConfig) -> Result<Adaptor> {
    let a = Adaptor::from_checkpoint(&cfg.load(name)?, cfg.dtype())?;
    let c = a.config();
    if c.k != expect.k || c.d_lm != expect.d_lm || c.kind != expect.kind {
        return Err(Error::Incompatible(format!(
            "{name} checkpoint has kind={} K={} d_lm={} but the run expects kind={} K={} d_lm={}",
            c.kind.name(),
            c.k,
            c.d_lm,
            expect.kind.name(),
            expect.k,
            expect.d_lm
        )));
    }
    Ok(a)
}

fn image_data(
    cfg: &ExperimentConfig,
    name: &str,
    vision: &VisionEncoder,
    pf: Option<&PFormer>,
) -> Result<VlData> {
    let data = VlData::from_split(&split(cfg, name)?, vision, &Tokenizer::grammar())?;
    match pf {
        Some(pf) => data.with_references(pf),
        None => Ok(data),
    }
}

fn frozen_sets<'a>(
    vision: &'a VisionEncoder,
    pf: Option<&'a PFormer>,
) -> Vec<(&'static str, &'a ParamSet)> {
    let mut sets = vec![("vision", vision.params())];
    if let Some(pf) = pf {
        sets.push(("pformer", pf.params()));
    }
    sets
}

fn stage_digests(out: &mut CommandOutput, report: &StageReport) {
    for (name, digest) in &report.frozen_digests {
        out.digests.push((format!("frozen/{name}"), digest.clone()));
    }
}

pub fn train_stage1_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let mut out = CommandOutput::new("train-stage1");
    let tok = Tokenizer::grammar();
    let vision = vision(cfg, &mut out)?;
    let pf = load_pformer(cfg)?;
    let data = image_data(cfg, "train", &vision, pf.as_ref())?;
    let s = cfg.streams();
    let adaptor = Adaptor::new(&cfg.adaptor, cfg.dtype(), &mut s.stream("stage1/init"))?;
    let report = train_stage1(
        &adaptor,
        &data,
        &cfg.stage,
        &frozen_sets(&vision, pf.as_ref()),
        &mut s.stream("stage1/train"),
    )?;
    stage_digests(&mut out, &report);
    cfg.log(&report.records)?;
    out.digests.push((
        "stage1".into(),
        cfg.save(adaptor.checkpoint(&tok.hash())?, "stage1")?,
    ));
    Ok(out)
}

pub fn train_stage2_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let mut out = CommandOutput::new("train-stage2");
    let tok = Tokenizer::grammar();
    let lm = load_lm(cfg)?;
    let vision = vision(cfg, &mut out)?;
    let pf = load_pformer(cfg)?;
    let adaptor = load_adaptor(cfg, "stage1", &cfg.adaptor)?;
    let data = image_data(cfg, "train", &vision, pf.as_ref())?;
    let report = train_stage2(
        &adaptor,
        &lm,
        &data,
        &cfg.stage,
        &frozen_sets(&vision, pf.as_ref()),
        &mut cfg.streams().stream("stage2/train"),
    )?;
    stage_digests(&mut out, &report);
    cfg.log(&report.records)?;
    out.digests.push((
        "stage2".into(),
        cfg.save(adaptor.checkpoint(&tok.hash())?, "stage2")?,
    ));
    Ok(out)
}

fn video_data(
    cfg: &ExperimentConfig,
    name: &str,
    enc: &SequenceEncoder,
    pf: Option<&PFormer>,
) -> Result<VlData> {
    let data = VlData::from_video(&video(cfg, name)?, enc, &Tokenizer::grammar())?;
    match pf {
        Some(pf) => data.with_references(pf),
        None => Ok(data),
    }
}

pub fn train_video_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let mut out = CommandOutput::new("train-video");
    let tok = Tokenizer::grammar();
    let lm = load_lm(cfg)?;
    let enc = SequenceEncoder::new(vision(cfg, &mut out)?);
    let pf = load_pformer(cfg)?;
    let data = video_data(cfg, "video_train", &enc, pf.as_ref())?;
    let s = cfg.streams();
    let adaptor = Adaptor::new(&cfg.video_adaptor, cfg.dtype(), &mut s.stream("video/init"))?;
    let report = train_video(
        &adaptor,
        &lm,
        &data,
        &cfg.stage,
        &frozen_sets(enc.frame_encoder(), pf.as_ref()),
        &mut s.stream("video/train"),
    )?;
    stage_digests(&mut out, &report);
    cfg.log(&report.records)?;
    out.digests.push((
        "video".into(),
        cfg.save(adaptor.checkpoint(&tok.hash())?, "video")?,
    ));
    Ok(out)
}

/// Which trained adaptor to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    Stage1,
    Stage2,
    Video,
}

impl EvalTarget {
    pub fn name(self) -> &'static str {
        match self {
            EvalTarget::Stage1 => "stage1",
            EvalTarget::Stage2 => "stage2",
            EvalTarget::Video => "video",
        }
    }
}

/// Held-out evaluation. Image targets report captioning on `eval` plus
/// ITC retrieval; the video target reports captioning on `video_eval`.
pub fn evaluate(cfg: &ExperimentConfig, target: EvalTarget) -> Result<EvalReport> {
    cfg.validate()?;
    let tok = Tokenizer::grammar();
    let lm = load_lm(cfg)?;
    let mut scratch = CommandOutput::new("eval");
    let report = match target {
        EvalTarget::Video => {
            let enc = SequenceEncoder::new(vision(cfg, &mut scratch)?);
            let adaptor = load_adaptor(cfg, "video", &cfg.video_adaptor)?;
            let split = video(cfg, "video_eval")?;
            let data = VlData::from_video(&split, &enc, &tok)?;
            let valid: Vec<Vec<String>> =
                split.clips.iter().map(|c| all_captions(&c.scene)).collect();
            let scores = caption_eval(&adaptor, &lm, &tok, &data, &valid, &cfg.eval_template)?;
            EvalReport {
                split: "video_eval".into(),
                examples: data.len(),
                exact_match: scores.exact_match,
                token_f1: scores.token_f1,
                bleu4_lite: scores.bleu4_lite,
                retrieval: None,
            }
        }
        _ => {
            let vision = vision(cfg, &mut scratch)?;
            let adaptor = load_adaptor(cfg, target.name(), &cfg.adaptor)?;
            let split = split(cfg, "eval")?;
            let data = VlData::from_split(&split, &vision, &tok)?;
            let valid: Vec<Vec<String>> =
                split.pairs.iter().map(|p| all_captions(&p.scene)).collect();
            let scores = caption_eval(&adaptor, &lm, &tok, &data, &valid, &cfg.eval_template)?;
            EvalReport {
                split: "eval".into(),
                examples: data.len(),
                exact_match: scores.exact_match,
                token_f1: scores.token_f1,
                bleu4_lite: scores.bleu4_lite,
                retrieval: Some(retrieval_eval(&adaptor, &data, cfg.stage.itc_tau)?),
            }
        }
    };
    append_jsonl(&cfg.paths.metrics_log(), std::slice::from_ref(&report))?;
    Ok(report)
}

/// One cell of an omega grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub omega1: f64,
    pub omega2: f64,
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Directory name of a sweep cell.
pub fn cell_name(omega1: f64, omega2: f64) -> String {
    format!("omega1_{omega1}_omega2_{omega2}")
}

/// Runs stage 1, stage 2 and eval for every `(omega1, omega2)` pair in a
/// subdirectory of the run root. Data and the LM / P-Former / vision
/// checkpoints are reused from the parent run.
pub fn sweep(cfg: &ExperimentConfig, omega1: &[f64], omega2: &[f64]) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if omega1.is_empty() || omega2.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one value per omega".into(),
        ));
    }
    for name in ["lm", "pformer"] {
        if cfg.use_pformer || name == "lm" {
            cfg.load(name)?;
        }
    }
    let parent_ckpt = cfg.paths.resolve(&cfg.paths.checkpoints);
    let mut cells = Vec::new();
    for &w1 in omega1 {
        for &w2 in omega2 {
            let dir = cfg.paths.root.join("sweep").join(cell_name(w1, w2));
            let mut cell = cfg.clone();
            cell.stage.omega1 = w1;
            cell.stage.omega2 = w2;
            cell.paths = Paths {
                root: dir.clone(),
                data: cfg.paths.resolve(&cfg.paths.data),
                checkpoints: "ckpt".into(),
                logs: "logs".into(),
            };
            for name in ["lm", "pformer", "vision"] {
                let src = parent_ckpt.join(format!("{name}.ckpt"));
                if src.exists() {
                    let dst = cell.paths.checkpoint(name);
                    if let Some(p) = dst.parent() {
                        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
                    }
                    std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
                }
            }
            train_stage1_cmd(&cell)?;
            train_stage2_cmd(&cell)?;
            let report = evaluate(&cell, EvalTarget::Stage2)?;
            cells.push(SweepCell {
                omega1: w1,
                omega2: w2,
                dir,
                report,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{BOS, EOS};

    fn tiny(root: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.paths.root = root.to_path_buf();
        cfg.data.train = 16;
        cfg.data.eval = 8;
        cfg.data.corpus_extended = 40;
        cfg.data.corpus_paired = 16;
        cfg.data.video_train = 4;
        cfg.data.video_eval = 4;
        cfg
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn mismatched_prompt_shapes_are_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.adaptor.k = 4;
        assert!(matches!(cfg.validate(), Err(Error::Incompatible(_))));
        let mut cfg = ExperimentConfig::desk();
        cfg.video_adaptor.d_feat = 64;
        assert!(matches!(cfg.validate(), Err(Error::Incompatible(_))));
    }

    #[test]
    fn relative_paths_resolve_against_root() {
        let paths = Paths {
            root: "/tmp/run".into(),
            data: "/shared/data".into(),
            checkpoints: "ckpt".into(),
            logs: "logs".into(),
        };
        assert_eq!(paths.data_dir("train"), PathBuf::from("/shared/data/train"));
        assert_eq!(
            paths.checkpoint("lm"),
            PathBuf::from("/tmp/run/ckpt/lm.ckpt")
        );
        assert_eq!(
            paths.metrics_log(),
            PathBuf::from("/tmp/run/logs/metrics.jsonl")
        );
    }

    #[test]
    fn commands_report_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        assert!(matches!(train_lm(&cfg), Err(Error::MissingInput(_))));
        gen_data(&cfg).unwrap();
        assert!(matches!(
            train_pformer_cmd(&cfg),
            Err(Error::MissingInput(_))
        ));
        assert!(matches!(
            evaluate(&cfg, EvalTarget::Stage2),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn lm_documents_mix_contexts_and_questions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        gen_data(&cfg).unwrap();
        let tok = Tokenizer::grammar();
        let docs = lm_documents(&cfg, &tok).unwrap();
        let plain = docs.iter().filter(|d| d.0[0] == BOS).count();
        let qa = docs.len() - cfg.data.corpus_extended;
        assert_eq!(qa, 10);
        assert!(plain > 0 && plain < cfg.data.corpus_extended);
        for d in &docs {
            assert_eq!(d.0.iter().filter(|&&t| t == BOS).count(), 1);
            assert_eq!(d.0.last(), Some(&EOS));
        }
    }

    #[test]
    fn cell_names_are_stable() {
        assert_eq!(cell_name(10.0, 0.0), "omega1_10_omega2_0");
        assert_eq!(cell_name(0.5, 100.0), "omega1_0.5_omega2_100");
    }
}
