//! Paired splits, the unpaired sentence corpus, toy video clips, and their
//! on-disk layout.
//!
//! A split directory holds `split.meta` (one JSON object), `pairs.jsonl`
//! (one record per example, ordered by id) and `grids.f32` (rendered scenes:
//! magic `PFGR`, then little-endian u32 version, count, grid_size, channels,
//! then `count * grid_size^2 * channels` little-endian f32 values). A corpus
//! directory holds `corpus.meta` and `sentences.jsonl`; a video directory
//! holds `video.meta` and `clips.jsonl`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::grammar::{caption_of, Caption, TEMPLATE_COUNT};
use super::scene::{gen_scene, render, Color, FeatureGrid, SceneParams, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::rng::SeedStreams;

pub const FORMAT_VERSION: u32 = 1;
const GRID_MAGIC: &[u8; 4] = b"PFGR";

/// Generator settings shared by every split derived from one data seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub grid_size: usize,
    pub max_objects: usize,
    /// Fraction of the (shape, color) pairs kept out of paired data.
    pub withheld_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            grid_size: 4,
            max_objects: 1,
            withheld_fraction: 0.2,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.withheld_fraction) {
            return Err(Error::Config(format!(
                "withheld_fraction {} outside [0, 1)",
                self.withheld_fraction
            )));
        }
        self.scene_params(Vec::new()).validate()
    }

    pub fn scene_params(&self, excluded: Vec<(Shape, Color)>) -> SceneParams {
        SceneParams {
            grid_size: self.grid_size,
            max_objects: self.max_objects,
            excluded,
        }
    }
}

/// The (shape, color) pairs absent from paired data for this seed.
pub fn withheld_combos(seed: u64, fraction: f64) -> Vec<(Shape, Color)> {
    let mut all: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|s| Color::ALL.iter().map(move |c| (*s, *c)))
        .collect();
    let count = (all.len() as f64 * fraction + 1e-9).floor() as usize;
    all.shuffle(&mut SeedStreams::new(seed).stream("withheld"));
    let mut out = all[..count].to_vec();
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: usize,
    pub scene: SceneSpec,
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub count: usize,
    pub grid_size: usize,
    pub max_objects: usize,
    pub withheld: Vec<(Shape, Color)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub seed: u64,
    pub grid_size: usize,
    pub max_objects: usize,
    pub withheld: Vec<(Shape, Color)>,
    pub pairs: Vec<Pair>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn grids(&self) -> Vec<FeatureGrid> {
        self.pairs.iter().map(|p| render(&p.scene)).collect()
    }

    pub fn meta(&self) -> SplitMeta {
        SplitMeta {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            count: self.pairs.len(),
            grid_size: self.grid_size,
            max_objects: self.max_objects,
            withheld: self.withheld.clone(),
        }
    }
}

fn draw_pair(seeds: &SeedStreams, stream: &str, id: usize, params: &SceneParams) -> Pair {
    let mut rng = seeds.stream(stream);
    let scene = gen_scene(&mut rng, params);
    let template = rng.random_range(0..TEMPLATE_COUNT);
    let caption = caption_of(&scene, template).expect("template id in range");
    Pair { id, scene, caption }
}

/// Paired scene/caption examples. Every example draws from its own
/// substream, so any sharding of the id range yields the same records.
pub fn gen_paired_dataset(
    n: usize,
    seed: u64,
    name: &str,
    params: &CorpusParams,
) -> Result<DatasetSplit> {
    gen_paired_shards(n, seed, name, params, 1)
}

/// Generates `n` examples in `shards` contiguous id ranges and merges them by
/// id.
pub fn gen_paired_shards(
    n: usize,
    seed: u64,
    name: &str,
    params: &CorpusParams,
    shards: usize,
) -> Result<DatasetSplit> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("split size must be at least 1".into()));
    }
    let withheld = withheld_combos(seed, params.withheld_fraction);
    let sp = params.scene_params(withheld.clone());
    let seeds = SeedStreams::new(seed);
    let shards = shards.clamp(1, n);
    let per = n.div_ceil(shards);
    let mut pairs: Vec<Pair> = (0..shards)
        .rev()
        .flat_map(|s| {
            let lo = s * per;
            let hi = ((s + 1) * per).min(n);
            (lo..hi)
                .map(|id| draw_pair(&seeds, &format!("pair/{name}/{id}"), id, &sp))
                .collect::<Vec<_>>()
        })
        .collect();
    pairs.sort_by_key(|p| p.id);
    Ok(DatasetSplit {
        name: name.to_string(),
        seed,
        grid_size: params.grid_size,
        max_objects: params.max_objects,
        withheld,
        pairs,
    })
}

/// A split whose scenes never occur in `exclude`.
pub fn gen_heldout_split(
    n: usize,
    seed: u64,
    name: &str,
    params: &CorpusParams,
    exclude: &DatasetSplit,
) -> Result<DatasetSplit> {
    params.validate()?;
    let withheld = withheld_combos(seed, params.withheld_fraction);
    let sp = params.scene_params(withheld.clone());
    let seen: HashSet<&SceneSpec> = exclude.pairs.iter().map(|p| &p.scene).collect();
    let seeds = SeedStreams::new(seed);
    let mut pairs = Vec::with_capacity(n);
    let limit = n.saturating_mul(1000).max(10_000);
    for draw in 0..limit {
        if pairs.len() == n {
            break;
        }
        let p = draw_pair(&seeds, &format!("pair/{name}/{draw}"), pairs.len(), &sp);
        if !seen.contains(&p.scene) {
            pairs.push(p);
        }
    }
    if pairs.len() < n {
        return Err(Error::NotEnoughCaptions {
            requested: n,
            available: pairs.len(),
        });
    }
    Ok(DatasetSplit {
        name: name.to_string(),
        seed,
        grid_size: params.grid_size,
        max_objects: params.max_objects,
        withheld,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    PairedOnly,
    Extended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub seed: u64,
    pub coverage: Coverage,
    pub count: usize,
    pub grid_size: usize,
    pub max_objects: usize,
    pub withheld: Vec<(Shape, Color)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceCorpus {
    pub sentences: Vec<Caption>,
    pub seed: u64,
    pub coverage: Coverage,
    pub grid_size: usize,
    pub max_objects: usize,
    pub withheld: Vec<(Shape, Color)>,
}

impl SentenceCorpus {
    pub fn meta(&self) -> CorpusMeta {
        CorpusMeta {
            version: FORMAT_VERSION,
            seed: self.seed,
            coverage: self.coverage,
            count: self.sentences.len(),
            grid_size: self.grid_size,
            max_objects: self.max_objects,
            withheld: self.withheld.clone(),
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of distinct captions the generator can emit under `scene`.
pub fn distinct_caption_count(scene: &SceneParams) -> usize {
    let cells = scene.grid_size * scene.grid_size;
    let per_object = scene.allowed_combos().len() * 2;
    (1..=scene.max_objects)
        .map(|k| binomial(cells, k) * per_object.pow(k as u32))
        .sum::<usize>()
        * TEMPLATE_COUNT
}

/// Unpaired sentences. `PairedOnly` reuses the paired `train` split of the
/// same seed; `Extended` samples scenes over every (shape, color) pair.
pub fn gen_sentence_corpus(
    n: usize,
    seed: u64,
    coverage: Coverage,
    params: &CorpusParams,
    dedup: bool,
) -> Result<SentenceCorpus> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let withheld = withheld_combos(seed, params.withheld_fraction);
    let seeds = SeedStreams::new(seed);
    let (sp, stream) = match coverage {
        Coverage::PairedOnly => (params.scene_params(withheld.clone()), "pair/train"),
        Coverage::Extended => (params.scene_params(Vec::new()), "sentence"),
    };
    let sentences = if dedup {
        let available = distinct_caption_count(&sp);
        if n > available {
            return Err(Error::NotEnoughCaptions {
                requested: n,
                available,
            });
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut id = 0;
        while out.len() < n {
            let p = draw_pair(&seeds, &format!("{stream}/{id}"), id, &sp);
            if seen.insert(p.caption.text.clone()) {
                out.push(p.caption);
            }
            id += 1;
        }
        out
    } else {
        (0..n)
            .map(|id| draw_pair(&seeds, &format!("{stream}/{id}"), id, &sp).caption)
            .collect()
    };
    Ok(SentenceCorpus {
        sentences,
        seed,
        coverage,
        grid_size: params.grid_size,
        max_objects: params.max_objects,
        withheld,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Right,
    Down,
    Left,
    Up,
}

impl Motion {
    const ALL: [Motion; 4] = [Motion::Right, Motion::Down, Motion::Left, Motion::Up];

    fn delta(self) -> (isize, isize) {
        match self {
            Motion::Right => (0, 1),
            Motion::Down => (1, 0),
            Motion::Left => (0, -1),
            Motion::Up => (-1, 0),
        }
    }
}

/// A scene translated one cell per frame (with wrap-around). The caption
/// describes the first frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoClip {
    pub id: usize,
    pub scene: SceneSpec,
    pub motion: Motion,
    pub caption: Caption,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> SceneSpec {
        let g = self.scene.grid_size as isize;
        let (dr, dc) = self.motion.delta();
        let mut s = self.scene.clone();
        for o in &mut s.objects {
            o.row = (o.row as isize + dr * t as isize).rem_euclid(g) as usize;
            o.col = (o.col as isize + dc * t as isize).rem_euclid(g) as usize;
        }
        s.canonicalize();
        s
    }

    pub fn frames(&self, count: usize) -> Vec<FeatureGrid> {
        (0..count).map(|t| render(&self.frame(t))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub count: usize,
    pub frames: usize,
    pub grid_size: usize,
    pub max_objects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSplit {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub grid_size: usize,
    pub max_objects: usize,
    pub clips: Vec<VideoClip>,
}

impl VideoSplit {
    pub fn meta(&self) -> VideoMeta {
        VideoMeta {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            count: self.clips.len(),
            frames: self.frames,
            grid_size: self.grid_size,
            max_objects: self.max_objects,
        }
    }
}

pub fn gen_video_split(
    n: usize,
    seed: u64,
    name: &str,
    params: &CorpusParams,
    frames: usize,
) -> Result<VideoSplit> {
    params.validate()?;
    if frames == 0 {
        return Err(Error::Config("a clip needs at least one frame".into()));
    }
    let sp = params.scene_params(Vec::new());
    let seeds = SeedStreams::new(seed);
    let clips = (0..n)
        .map(|id| {
            let mut rng = seeds.stream(&format!("video/{name}/{id}"));
            let scene = gen_scene(&mut rng, &sp);
            let motion = Motion::ALL[rng.random_range(0..Motion::ALL.len())];
            let template = rng.random_range(0..TEMPLATE_COUNT);
            let caption = caption_of(&scene, template).expect("template id in range");
            VideoClip {
                id,
                scene,
                motion,
                caption,
            }
        })
        .collect();
    Ok(VideoSplit {
        name: name.to_string(),
        seed,
        frames,
        grid_size: params.grid_size,
        max_objects: params.max_objects,
        clips,
    })
}

// ---------------------------------------------------------------------------
// persistence

fn to_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("records serialize");
    s.push('\n');
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    items.iter().map(to_line).collect::<String>().into_bytes()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::io(path, e),
    })
}

fn read_meta<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::malformed(path, "missing version"))? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::malformed(path, e.to_string()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let text = read_text(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::malformed(path, "truncated final record"));
    }
    let items = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<T>>>()?;
    if items.len() != expected {
        return Err(Error::malformed(
            path,
            format!("expected {expected} records, found {}", items.len()),
        ));
    }
    Ok(items)
}

pub fn encode_grids(grids: &[FeatureGrid]) -> Vec<u8> {
    let (g, c) = grids
        .first()
        .map(|x| (x.grid_size, x.channels))
        .unwrap_or((0, 0));
    let mut out = Vec::with_capacity(20 + grids.len() * g * g * c * 4);
    out.extend_from_slice(GRID_MAGIC);
    for v in [FORMAT_VERSION, grids.len() as u32, g as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for grid in grids {
        for v in &grid.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_grids(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    if bytes.len() < 20 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::malformed(path, "missing grid header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, count, g, c) = (
        word(0),
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
    );
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let per = g * g * c;
    if bytes.len() != 20 + count * per * 4 {
        return Err(Error::malformed(
            path,
            format!(
                "expected {} data bytes, found {}",
                count * per * 4,
                bytes.len() - 20
            ),
        ));
    }
    Ok(bytes[20..]
        .chunks_exact(per * 4)
        .map(|chunk| FeatureGrid {
            grid_size: g,
            channels: c,
            data: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect())
}

pub fn save_split(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("pairs.jsonl"), &jsonl(&split.pairs))?;
    atomic_write(&dir.join("grids.f32"), &encode_grids(&split.grids()))?;
    // meta last: a directory without it is not a split
    atomic_write(&dir.join("split.meta"), to_line(&split.meta()).as_bytes())
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let meta: SplitMeta = read_meta(&dir.join("split.meta"))?;
    let pairs: Vec<Pair> = read_jsonl(&dir.join("pairs.jsonl"), meta.count)?;
    let grid_path = dir.join("grids.f32");
    let bytes = fs::read(&grid_path).map_err(|e| Error::io(&grid_path, e))?;
    let grids = decode_grids(&grid_path, &bytes)?;
    if grids.len() != pairs.len() {
        return Err(Error::malformed(
            &grid_path,
            "grid count differs from pair count",
        ));
    }
    for (i, (p, g)) in pairs.iter().zip(&grids).enumerate() {
        if p.id != i {
            return Err(Error::malformed(
                dir.join("pairs.jsonl"),
                format!("record {i} has id {}", p.id),
            ));
        }
        p.scene
            .validate()
            .map_err(|e| Error::malformed(dir.join("pairs.jsonl"), format!("record {i}: {e}")))?;
        if render(&p.scene) != *g {
            return Err(Error::malformed(
                &grid_path,
                format!("grid {i} does not match its scene"),
            ));
        }
    }
    Ok(DatasetSplit {
        name: meta.name,
        seed: meta.seed,
        grid_size: meta.grid_size,
        max_objects: meta.max_objects,
        withheld: meta.withheld,
        pairs,
    })
}

pub fn save_corpus(corpus: &SentenceCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("sentences.jsonl"), &jsonl(&corpus.sentences))?;
    atomic_write(&dir.join("corpus.meta"), to_line(&corpus.meta()).as_bytes())
}

pub fn load_corpus(dir: &Path) -> Result<SentenceCorpus> {
    let meta: CorpusMeta = read_meta(&dir.join("corpus.meta"))?;
    let sentences = read_jsonl(&dir.join("sentences.jsonl"), meta.count)?;
    Ok(SentenceCorpus {
        sentences,
        seed: meta.seed,
        coverage: meta.coverage,
        grid_size: meta.grid_size,
        max_objects: meta.max_objects,
        withheld: meta.withheld,
    })
}

pub fn save_video(split: &VideoSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("clips.jsonl"), &jsonl(&split.clips))?;
    atomic_write(&dir.join("video.meta"), to_line(&split.meta()).as_bytes())
}

pub fn load_video(dir: &Path) -> Result<VideoSplit> {
    let meta: VideoMeta = read_meta(&dir.join("video.meta"))?;
    let clips = read_jsonl(&dir.join("clips.jsonl"), meta.count)?;
    Ok(VideoSplit {
        name: meta.name,
        seed: meta.seed,
        frames: meta.frames,
        grid_size: meta.grid_size,
        max_objects: meta.max_objects,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn params() -> CorpusParams {
        CorpusParams::default()
    }

    fn file_bytes(dir: &Path) -> Vec<Vec<u8>> {
        ["split.meta", "pairs.jsonl", "grids.f32"]
            .iter()
            .map(|f| fs::read(dir.join(f)).unwrap())
            .collect()
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_split(
            &gen_paired_dataset(100, 7, "train", &params()).unwrap(),
            a.path(),
        )
        .unwrap();
        save_split(
            &gen_paired_dataset(100, 7, "train", &params()).unwrap(),
            b.path(),
        )
        .unwrap();
        assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    }

    #[test]
    fn sharding_does_not_change_content() {
        let one = gen_paired_dataset(57, 3, "train", &params()).unwrap();
        let many = gen_paired_shards(57, 3, "train", &params(), 5).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn paired_split_respects_withheld_combos() {
        let split = gen_paired_dataset(2000, 5, "train", &params()).unwrap();
        assert_eq!(split.withheld.len(), 2);
        for p in &split.pairs {
            for o in &p.scene.objects {
                assert!(!split.withheld.contains(&(o.shape, o.color)));
            }
        }
    }

    #[test]
    fn paired_only_corpus_is_the_paired_multiset() {
        let split = gen_paired_dataset(300, 9, "train", &params()).unwrap();
        let corpus = gen_sentence_corpus(300, 9, Coverage::PairedOnly, &params(), false).unwrap();
        fn count(it: Vec<&String>) -> HashMap<&String, usize> {
            let mut m = HashMap::new();
            for s in it {
                *m.entry(s).or_default() += 1;
            }
            m
        }
        assert_eq!(
            count(split.pairs.iter().map(|p| &p.caption.text).collect()),
            count(corpus.sentences.iter().map(|c| &c.text).collect())
        );
    }

    #[test]
    fn extended_corpus_reaches_withheld_combos() {
        // set-difference oracle over the combos actually present
        let split = gen_paired_dataset(2000, 7, "train", &params()).unwrap();
        let corpus = gen_sentence_corpus(5000, 7, Coverage::Extended, &params(), false).unwrap();
        let combos = |texts: Vec<&str>| -> HashSet<(Shape, Color)> {
            texts
                .into_iter()
                .flat_map(|t| {
                    let (s, _) = super::super::grammar::parse_caption(t, 4).unwrap();
                    s.objects.into_iter().map(|o| (o.shape, o.color))
                })
                .collect()
        };
        let paired = combos(
            split
                .pairs
                .iter()
                .map(|p| p.caption.text.as_str())
                .collect(),
        );
        let extended = combos(corpus.sentences.iter().map(|c| c.text.as_str()).collect());
        let novel: Vec<_> = extended.difference(&paired).collect();
        assert!(!novel.is_empty());
        assert!(paired.is_subset(&extended) && paired.len() < extended.len());
    }

    #[test]
    fn dedup_request_beyond_capacity_fails() {
        let tiny = CorpusParams {
            grid_size: 2,
            max_objects: 1,
            withheld_fraction: 0.0,
        };
        // 4 cells * 12 combos * 2 sizes * 3 templates
        assert_eq!(distinct_caption_count(&tiny.scene_params(vec![])), 288);
        assert!(matches!(
            gen_sentence_corpus(289, 1, Coverage::PairedOnly, &tiny, true),
            Err(Error::NotEnoughCaptions { available: 288, .. })
        ));
        let all = gen_sentence_corpus(288, 1, Coverage::PairedOnly, &tiny, true).unwrap();
        let unique: HashSet<_> = all.sentences.iter().map(|c| &c.text).collect();
        assert_eq!(unique.len(), 288);
    }

    #[test]
    fn split_round_trip() {
        for seed in [1, 2, 3] {
            let dir = tempfile::tempdir().unwrap();
            let split = gen_paired_dataset(40, seed, "train", &params()).unwrap();
            save_split(&split, dir.path()).unwrap();
            assert_eq!(load_split(dir.path()).unwrap(), split);
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let split = gen_paired_dataset(10, 1, "train", &params()).unwrap();
        save_split(&split, dir.path()).unwrap();
        let grids = dir.path().join("grids.f32");
        let bytes = fs::read(&grids).unwrap();
        fs::write(&grids, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_split(dir.path()),
            Err(Error::Malformed { .. })
        ));

        save_split(&split, dir.path()).unwrap();
        let pairs = dir.path().join("pairs.jsonl");
        let text = fs::read_to_string(&pairs).unwrap();
        fs::write(&pairs, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            load_split(dir.path()),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let split = gen_paired_dataset(5, 1, "train", &params()).unwrap();
        save_split(&split, dir.path()).unwrap();
        let mut meta = split.meta();
        meta.version = 99;
        fs::write(dir.path().join("split.meta"), to_line(&meta)).unwrap();
        assert!(matches!(
            load_split(dir.path()),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn missing_split_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_split(dir.path()),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn serialized_split_hash_is_stable() {
        use sha2::{Digest, Sha256};
        let dir = tempfile::tempdir().unwrap();
        save_split(
            &gen_paired_dataset(64, 2024, "train", &params()).unwrap(),
            dir.path(),
        )
        .unwrap();
        let mut h = Sha256::new();
        for b in file_bytes(dir.path()) {
            h.update(&b);
        }
        let digest = hex::encode(h.finalize());
        assert_eq!(digest, GOLDEN_SPLIT_HASH, "split serialization changed");
    }

    const GOLDEN_SPLIT_HASH: &str =
        "4b32f9fa5cf01a72dedd0e06e4930da25727897c0d17a9f1a33b00777bbb0925";

    #[test]
    fn heldout_split_avoids_training_scenes() {
        let train = gen_paired_dataset(300, 4, "train", &params()).unwrap();
        let eval = gen_heldout_split(100, 4, "eval", &params(), &train).unwrap();
        let seen: HashSet<_> = train.pairs.iter().map(|p| &p.scene).collect();
        assert!(eval.pairs.iter().all(|p| !seen.contains(&p.scene)));
        assert_eq!(eval.withheld, train.withheld);
    }

    #[test]
    fn video_frames_translate_with_wrap() {
        let v = gen_video_split(20, 3, "train", &params(), 4).unwrap();
        for clip in &v.clips {
            assert_eq!(clip.frame(0), clip.scene);
            assert_eq!(
                clip.frame(4),
                clip.scene,
                "a 4-cell grid wraps after 4 frames"
            );
            for t in 0..4 {
                clip.frame(t).validate().unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_video(&v, dir.path()).unwrap();
        assert_eq!(load_video(dir.path()).unwrap(), v);
    }
}
