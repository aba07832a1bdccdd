use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// 3x3 occupancy pattern used by the renderer.
    fn mask(self) -> [f32; 9] {
        match self {
            Shape::Circle => [0., 1., 0., 1., 1., 1., 0., 1., 0.],
            Shape::Square => [1.; 9],
            Shape::Triangle => [0., 0., 0., 0., 1., 0., 1., 1., 1.],
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1., 0., 0.],
            Color::Green => [0., 1., 0.],
            Color::Blue => [0., 0., 1.],
            Color::Yellow => [1., 1., 0.],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    fn intensity(self) -> f32 {
        match self {
            Size::Small => 0.5,
            Size::Large => 1.0,
        }
    }
}

pub fn shape_from_word(w: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.word() == w)
}

pub fn color_from_word(w: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.word() == w)
}

pub fn size_from_word(w: &str) -> Option<Size> {
    Size::ALL.into_iter().find(|s| s.word() == w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

/// Upper bound on objects per scene accepted by [`SceneSpec::validate`].
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub grid_size: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "scene has {} objects; expected 1..={MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        let mut cells = Vec::with_capacity(self.objects.len());
        for o in &self.objects {
            if o.row >= self.grid_size || o.col >= self.grid_size {
                return Err(Error::Config(format!(
                    "object at ({}, {}) outside a {}x{} grid",
                    o.row, o.col, self.grid_size, self.grid_size
                )));
            }
            if cells.contains(&(o.row, o.col)) {
                return Err(Error::Config(format!(
                    "two objects share cell ({}, {})",
                    o.row, o.col
                )));
            }
            cells.push((o.row, o.col));
        }
        Ok(())
    }

    /// Objects in row-major order; captions list them in this order.
    pub fn canonicalize(&mut self) {
        self.objects.sort_by_key(|o| (o.row, o.col));
    }

    pub fn object_at(&self, row: usize, col: usize) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }
}

/// Scene sampler settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneParams {
    pub grid_size: usize,
    pub max_objects: usize,
    /// (shape, color) pairs that must not appear.
    #[serde(default)]
    pub excluded: Vec<(Shape, Color)>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            grid_size: 4,
            max_objects: 2,
            excluded: Vec::new(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.grid_size) {
            return Err(Error::Config(format!(
                "grid_size {} outside 2..=10",
                self.grid_size
            )));
        }
        if self.max_objects == 0 || self.max_objects > 2 {
            // Two objects already take 21 tokens in the longest template.
            return Err(Error::Config(format!(
                "max_objects {} outside 1..=2 (longer captions exceed the 24-token limit)",
                self.max_objects
            )));
        }
        if self.excluded.len() >= Shape::ALL.len() * Color::ALL.len() {
            return Err(Error::Config(
                "every (shape, color) pair is excluded".into(),
            ));
        }
        Ok(())
    }

    pub fn allowed_combos(&self) -> Vec<(Shape, Color)> {
        let mut out = Vec::new();
        for s in Shape::ALL {
            for c in Color::ALL {
                if !self.excluded.contains(&(s, c)) {
                    out.push((s, c));
                }
            }
        }
        out
    }
}

pub fn gen_scene(rng: &mut Rng, params: &SceneParams) -> SceneSpec {
    let g = params.grid_size;
    let n = rng.random_range(1..=params.max_objects);
    let cells = sample(rng, g * g, n);
    let combos = params.allowed_combos();
    let mut objects: Vec<ObjectSpec> = cells
        .iter()
        .map(|cell| {
            let (shape, color) = if params.excluded.is_empty() {
                (
                    Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                    Color::ALL[rng.random_range(0..Color::ALL.len())],
                )
            } else {
                combos[rng.random_range(0..combos.len())]
            };
            let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
            ObjectSpec {
                shape,
                color,
                size,
                row: cell / g,
                col: cell % g,
            }
        })
        .collect();
    objects.sort_by_key(|o| (o.row, o.col));
    SceneSpec {
        objects,
        grid_size: g,
    }
}

/// Pixels per cell side in the rendered grid.
pub const PATCH: usize = 3;
/// Channels per rendered cell: a 3x3 RGB patch.
pub const CELL_CHANNELS: usize = PATCH * PATCH * 3;

/// Rendered scene: `grid_size x grid_size` cells, each a flattened 3x3 RGB
/// patch, stored row-major as `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub grid_size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_size + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

pub fn render(scene: &SceneSpec) -> FeatureGrid {
    let g = scene.grid_size;
    let mut data = vec![0f32; g * g * CELL_CHANNELS];
    for o in &scene.objects {
        let base = (o.row * g + o.col) * CELL_CHANNELS;
        let mask = o.shape.mask();
        let rgb = o.color.rgb();
        let k = o.size.intensity();
        for (p, m) in mask.iter().enumerate() {
            for (c, v) in rgb.iter().enumerate() {
                data[base + p * 3 + c] = m * v * k;
            }
        }
    }
    FeatureGrid {
        grid_size: g,
        channels: CELL_CHANNELS,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn same_seed_same_scene() {
        let p = SceneParams::default();
        let a = gen_scene(&mut SeedStreams::new(0).stream("scene"), &p);
        let b = gen_scene(&mut SeedStreams::new(0).stream("scene"), &p);
        assert_eq!(a, b);
    }

    #[test]
    fn generated_scenes_satisfy_invariants() {
        let p = SceneParams::default();
        let mut rng = SeedStreams::new(1).stream("scene");
        for _ in 0..2000 {
            let s = gen_scene(&mut rng, &p);
            s.validate().unwrap();
            assert!(s
                .objects
                .windows(2)
                .all(|w| (w[0].row, w[0].col) < (w[1].row, w[1].col)));
        }
    }

    #[test]
    fn shape_frequencies_are_uniform() {
        // Chi-square over the 10k draw log, plus the per-shape band.
        let p = SceneParams {
            max_objects: 1,
            ..SceneParams::default()
        };
        let mut rng = SeedStreams::new(0).stream("freq");
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = gen_scene(&mut rng, &p);
            counts[s.objects[0].shape as usize] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 2 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.03, "frequency {f}");
        }
    }

    #[test]
    fn excluded_combos_never_drawn() {
        let p = SceneParams {
            excluded: vec![(Shape::Circle, Color::Red), (Shape::Square, Color::Blue)],
            ..SceneParams::default()
        };
        let mut rng = SeedStreams::new(4).stream("x");
        for _ in 0..3000 {
            let s = gen_scene(&mut rng, &p);
            for o in s.objects {
                assert!(!p.excluded.contains(&(o.shape, o.color)));
            }
        }
    }

    #[test]
    fn rejects_overlapping_objects() {
        let o = ObjectSpec {
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Large,
            row: 1,
            col: 1,
        };
        let s = SceneSpec {
            objects: vec![o, o],
            grid_size: 4,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn render_touches_only_occupied_cells() {
        let scene = SceneSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Square,
                color: Color::Yellow,
                size: Size::Small,
                row: 2,
                col: 3,
            }],
            grid_size: 4,
        };
        let grid = render(&scene);
        for r in 0..4 {
            for c in 0..4 {
                let nonzero = grid.cell(r, c).iter().any(|v| *v != 0.0);
                assert_eq!(nonzero, (r, c) == (2, 3));
            }
        }
        // yellow = red + green at half intensity
        assert_eq!(&grid.cell(2, 3)[..3], &[0.5, 0.5, 0.0]);
    }
}
