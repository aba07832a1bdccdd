use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::corpus::{render, FeatureGrid, SceneSpec, CELL_CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::nn::{
    cross_entropy, from_f64, scalar, to_f64_vec, Block, Embedding, LayerNorm, Linear, Mode,
    ParamSet,
};
use crate::optim::{batch_schedule, check_finite, OptimConfig, Trainer};
use crate::rng::{Rng, SeedStreams};
use crate::tinylm::argmax;

pub const KIND: &str = "vision";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub grid_size: usize,
    pub d_feat: usize,
    pub layers: usize,
    pub heads: usize,
    /// Train on per-cell attribute classification before freezing; when
    /// false the encoder stays at its random initialization.
    pub pretrain: bool,
    pub pretrain_scenes: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            d_feat: 128,
            layers: 2,
            heads: 4,
            pretrain: true,
            pretrain_scenes: 2000,
            pretrain_steps: 300,
            pretrain_lr: 2e-3,
        }
    }
}

/// Frozen perception encoder: one vector per grid cell.
pub struct VisionEncoder {
    cfg: VisionConfig,
    params: ParamSet,
    cell: Linear,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    shape_head: Linear,
    color_head: Linear,
    size_head: Linear,
    row_head: Linear,
    col_head: Linear,
}

/// Per-cell classification targets: shape (0 = empty), color, size, and
/// the cell's own row and column.
fn cell_labels(scene: &SceneSpec) -> [Vec<u32>; 5] {
    let g = scene.grid_size;
    let m = g * g;
    let mut out = [
        vec![0u32; m],
        vec![0u32; m],
        vec![0u32; m],
        (0..m).map(|c| (c / g) as u32).collect(),
        (0..m).map(|c| (c % g) as u32).collect(),
    ];
    for o in &scene.objects {
        let c = o.row * scene.grid_size + o.col;
        out[0][c] = 1 + o.shape as u32;
        out[1][c] = 1 + o.color as u32;
        out[2][c] = 1 + o.size as u32;
    }
    out
}

impl VisionEncoder {
    pub fn new(cfg: &VisionConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_feat % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "d_feat {} not divisible by heads {}",
                cfg.d_feat, cfg.heads
            )));
        }
        let mut p = ParamSet::new(dtype);
        let d = cfg.d_feat;
        let m = cfg.grid_size * cfg.grid_size;
        let cell = Linear::new(&mut p, rng, "cell", CELL_CHANNELS, d)?;
        let pos = Embedding::new(&mut p, rng, "cell_pos", m, d)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut p, rng, &format!("block{i}"), d, cfg.heads, 0.0))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut p, "ln_f", d)?;
        let shape_head = Linear::new(&mut p, rng, "aux_shape", d, 4)?;
        let color_head = Linear::new(&mut p, rng, "aux_color", d, 5)?;
        let size_head = Linear::new(&mut p, rng, "aux_size", d, 3)?;
        let row_head = Linear::new(&mut p, rng, "aux_row", d, cfg.grid_size)?;
        let col_head = Linear::new(&mut p, rng, "aux_col", d, cfg.grid_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            cell,
            pos,
            blocks,
            ln_f,
            shape_head,
            color_head,
            size_head,
            row_head,
            col_head,
        })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, dtype: DType) -> Result<Self> {
        ck.expect_kind(&[KIND])?;
        let cfg: VisionConfig = ck.config()?;
        let enc = Self::new(&cfg, dtype, &mut SeedStreams::new(0).stream("placeholder"))?;
        enc.params.import(&ck.blobs)?;
        enc.freeze();
        Ok(enc)
    }

    pub fn checkpoint(&self, tokenizer_hash: &str) -> Result<ModelCheckpoint> {
        ModelCheckpoint::capture(KIND, &self.cfg, &self.params, tokenizer_hash)
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn freeze(&self) {
        self.params.freeze();
    }

    pub fn unfreeze(&self) {
        self.params.unfreeze();
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    fn grid_tensor(&self, grids: &[&FeatureGrid]) -> Result<Tensor> {
        let m = self.cfg.grid_size * self.cfg.grid_size;
        let mut data = Vec::with_capacity(grids.len() * m * CELL_CHANNELS);
        for g in grids {
            if g.grid_size != self.cfg.grid_size || g.channels != CELL_CHANNELS {
                return Err(Error::Shape(format!(
                    "grid {}x{} with {} channels, encoder expects {}x{} with {CELL_CHANNELS}",
                    g.grid_size, g.grid_size, g.channels, self.cfg.grid_size, self.cfg.grid_size
                )));
            }
            data.extend(g.data.iter().map(|&v| v as f64));
        }
        from_f64(data, &[grids.len(), m, CELL_CHANNELS], self.params.dtype())
    }

    /// Cell embeddings `[b, M, d]` before any attention layer.
    pub fn embed_cells(&self, grids: &[&FeatureGrid]) -> Result<Tensor> {
        let x = self.grid_tensor(grids)?;
        let m = x.dim(1)?;
        Ok(self
            .cell
            .forward(&x)?
            .broadcast_add(&self.pos.positions(m)?)?)
    }

    /// Feature sequences `[b, M, d_feat]`.
    pub fn encode_images(&self, grids: &[&FeatureGrid]) -> Result<Tensor> {
        let mut h = self.embed_cells(grids)?;
        for b in &self.blocks {
            h = b.forward(&h, None, &mut Mode::Eval)?;
        }
        self.ln_f.forward(&h)
    }

    pub fn encode_image(&self, grid: &FeatureGrid) -> Result<Tensor> {
        Ok(self.encode_images(&[grid])?.squeeze(0)?)
    }

    fn aux_logits(&self, feats: &Tensor) -> Result<[Tensor; 5]> {
        let d = feats.dim(D::Minus1)?;
        let flat = feats.reshape(((), d))?;
        Ok([
            self.shape_head.forward(&flat)?,
            self.color_head.forward(&flat)?,
            self.size_head.forward(&flat)?,
            self.row_head.forward(&flat)?,
            self.col_head.forward(&flat)?,
        ])
    }

    /// Per-cell probe accuracy, pooled over every auxiliary head.
    pub fn probe_accuracy(&self, scenes: &[SceneSpec]) -> Result<f64> {
        let grids: Vec<FeatureGrid> = scenes.iter().map(render).collect();
        let refs: Vec<&FeatureGrid> = grids.iter().collect();
        let logits = self.aux_logits(&self.encode_images(&refs)?)?;
        let (mut hits, mut n) = (0usize, 0usize);
        for (h, head) in logits.iter().enumerate() {
            let c = head.dim(1)?;
            let vals = to_f64_vec(head)?;
            let labels: Vec<u32> = scenes
                .iter()
                .flat_map(|s| cell_labels(s)[h].clone())
                .collect();
            for (i, y) in labels.iter().enumerate() {
                n += 1;
                if argmax(&vals[i * c..(i + 1) * c]) as u32 == *y {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / n.max(1) as f64)
    }
}

/// Brief auxiliary pretraining on per-cell attributes and positions; the
/// encoder is frozen afterwards either way.
pub fn pretrain_vision(
    enc: &VisionEncoder,
    scenes: &[SceneSpec],
    rng: &mut Rng,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    if enc.cfg.pretrain && !scenes.is_empty() {
        let cfg = OptimConfig {
            lr: enc.cfg.pretrain_lr,
            min_lr: enc.cfg.pretrain_lr * 0.1,
            warmup_steps: 20,
            weight_decay: 0.0,
            batch_size: 32,
            steps: Some(enc.cfg.pretrain_steps),
            log_every: 50,
            ..OptimConfig::default()
        };
        let total = enc.cfg.pretrain_steps;
        let grids: Vec<FeatureGrid> = scenes.iter().map(render).collect();
        let labels: Vec<[Vec<u32>; 5]> = scenes.iter().map(cell_labels).collect();
        let mut trainer = Trainer::new(enc.params.vars(), &cfg, total)?;
        let mut running = 0.0;
        for (step, batch) in batch_schedule(scenes.len(), cfg.batch_size, total, rng)
            .iter()
            .enumerate()
        {
            let refs: Vec<&FeatureGrid> = batch.iter().map(|&i| &grids[i]).collect();
            let logits = enc.aux_logits(&enc.encode_images(&refs)?)?;
            let mut loss: Option<Tensor> = None;
            for (h, head) in logits.iter().enumerate() {
                let y: Vec<u32> = batch.iter().flat_map(|&i| labels[i][h].clone()).collect();
                let l = cross_entropy(head, &y)?;
                loss = Some(match loss {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            let loss = (loss.expect("five heads") / logits.len() as f64)?;
            let value = scalar(&loss)?;
            check_finite("vision", step, "aux", value)?;
            trainer.step(&loss)?;
            running += value;
            if (step + 1) % cfg.log_every == 0 || step + 1 == total {
                let n = (step % cfg.log_every) + 1;
                records.push(MetricsRecord {
                    stage: "vision".into(),
                    step: step + 1,
                    total: running / n as f64,
                    ..Default::default()
                });
                running = 0.0;
            }
        }
    }
    enc.freeze();
    Ok(records)
}

/// Frozen per-frame encoder: one vector per frame, the frame's cell
/// features flattened in row-major cell order.
pub struct SequenceEncoder {
    frame: VisionEncoder,
}

impl SequenceEncoder {
    pub fn new(frame: VisionEncoder) -> Self {
        frame.freeze();
        Self { frame }
    }

    pub fn frame_encoder(&self) -> &VisionEncoder {
        &self.frame
    }

    pub fn digest(&self) -> Result<String> {
        self.frame.digest()
    }

    /// Width of one frame vector: `grid_size^2 * d_feat`.
    pub fn frame_dim(&self) -> usize {
        let c = self.frame.config();
        c.grid_size * c.grid_size * c.d_feat
    }

    /// `clips[i]` holds the frames of clip `i`; all clips need the same
    /// frame count. Returns `[b, T, frame_dim]`.
    pub fn encode_clips(&self, clips: &[Vec<FeatureGrid>]) -> Result<Tensor> {
        let b = clips.len();
        let t = clips.first().map_or(0, Vec::len);
        if clips.iter().any(|c| c.len() != t) || t == 0 {
            return Err(Error::Shape(
                "clips need equal, nonzero frame counts".into(),
            ));
        }
        let refs: Vec<&FeatureGrid> = clips.iter().flatten().collect();
        let feats = self.frame.encode_images(&refs)?;
        Ok(feats.reshape((b, t, self.frame_dim()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_scene, Color, ObjectSpec, SceneParams, Shape, Size};

    fn small_cfg() -> VisionConfig {
        VisionConfig {
            d_feat: 16,
            heads: 2,
            pretrain_steps: 60,
            ..VisionConfig::default()
        }
    }

    fn scene(color: Color) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Circle,
                color,
                size: Size::Large,
                row: 1,
                col: 2,
            }],
            grid_size: 4,
        }
    }

    #[test]
    fn cell_embedding_is_local() {
        let enc = VisionEncoder::new(
            &small_cfg(),
            DType::F64,
            &mut SeedStreams::new(0).stream("v"),
        )
        .unwrap();
        let a = render(&scene(Color::Red));
        let b = render(&scene(Color::Blue));
        let ea = to_f64_vec(&enc.embed_cells(&[&a]).unwrap()).unwrap();
        let eb = to_f64_vec(&enc.embed_cells(&[&b]).unwrap()).unwrap();
        let d = 16;
        for cell in 0..16 {
            let same = ea[cell * d..(cell + 1) * d] == eb[cell * d..(cell + 1) * d];
            assert_eq!(same, cell != 6, "cell {cell}");
        }
    }

    #[test]
    fn wrong_grid_shape_rejected() {
        let enc = VisionEncoder::new(
            &small_cfg(),
            DType::F32,
            &mut SeedStreams::new(0).stream("v"),
        )
        .unwrap();
        let mut s = scene(Color::Red);
        s.grid_size = 5;
        assert!(matches!(
            enc.encode_image(&render(&s)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pretraining_beats_chance_then_freezes() {
        let enc = VisionEncoder::new(
            &small_cfg(),
            DType::F32,
            &mut SeedStreams::new(1).stream("v"),
        )
        .unwrap();
        let mut rng = SeedStreams::new(1).stream("scenes");
        let scenes: Vec<SceneSpec> = (0..300)
            .map(|_| gen_scene(&mut rng, &SceneParams::default()))
            .collect();
        let before = enc.probe_accuracy(&scenes[..100]).unwrap();
        pretrain_vision(&enc, &scenes, &mut SeedStreams::new(1).stream("train")).unwrap();
        let after = enc.probe_accuracy(&scenes[..100]).unwrap();
        assert!(after > 0.9 && after > before, "{before} -> {after}");
        assert!(enc.params().is_frozen());
    }

    #[test]
    fn sequence_encoder_flattens_frames() {
        let enc = VisionEncoder::new(
            &small_cfg(),
            DType::F64,
            &mut SeedStreams::new(0).stream("v"),
        )
        .unwrap();
        let grids = vec![render(&scene(Color::Red)), render(&scene(Color::Green))];
        let single = enc.encode_image(&grids[1]).unwrap();
        let seq = SequenceEncoder::new(enc);
        let out = seq.encode_clips(&[grids]).unwrap();
        assert_eq!(out.dims(), &[1, 2, 16 * 16]);
        let a = to_f64_vec(&out.narrow(1, 1, 1).unwrap()).unwrap();
        let b = to_f64_vec(&single).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
