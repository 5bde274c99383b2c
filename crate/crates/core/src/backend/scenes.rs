//! Synthetic multi-object scenes with exact per-shape masks.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, MdeError, Result};
use crate::image::{load_mask_png, save_mask_png, Image};
use crate::types::Mask;

pub const SCENE_SIZE: usize = 32;
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == w)
    }

    /// Whether the pixel offset `(dx, dy)` from the center lies inside.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                let (top, bottom) = (-r, 0.75 * r);
                dy >= top && dy <= bottom && dx.abs() <= 0.95 * r * (dy - top) / (bottom - top)
            }
        }
    }
}

impl ColorName {
    pub const ALL: [ColorName; 4] = [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.9, 0.1, 0.1],
            ColorName::Green => [0.1, 0.75, 0.15],
            ColorName::Blue => [0.15, 0.25, 0.9],
            ColorName::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl fmt::Display for ColorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub center: (f32, f32),
    pub radius: f32,
}

impl ShapeSpec {
    /// Full (amodal) extent of the shape on the scene grid.
    pub fn mask(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| {
            self.kind.contains(x as f32 + 0.5 - self.center.0, y as f32 + 0.5 - self.center.1, self.radius)
        })
    }

    pub fn phrase(&self) -> String {
        format!("a {} {}", self.color, self.kind)
    }
}

/// A rendered scene; shapes are listed (and painted) left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub shapes: Vec<ShapeSpec>,
    pub caption: String,
    pub masks: Vec<Mask>,
    pub overlap: bool,
    pub image: Image,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    caption: String,
    overlap: bool,
    shapes: Vec<ShapeSpec>,
}

pub fn caption_for(shapes: &[ShapeSpec]) -> String {
    shapes.iter().map(ShapeSpec::phrase).collect::<Vec<_>>().join(" and ")
}

pub fn render(shapes: &[ShapeSpec], size: usize) -> Image {
    let mut img = Image::filled(size, size, BACKGROUND);
    for s in shapes {
        let m = s.mask(size);
        for y in 0..size {
            for x in 0..size {
                if m.get(y, x) {
                    img.set_pixel(y, x, s.color.rgb());
                }
            }
        }
    }
    img
}

impl SyntheticScene {
    pub fn from_shapes(mut shapes: Vec<ShapeSpec>) -> Self {
        shapes.sort_by(|a, b| a.center.0.total_cmp(&b.center.0));
        let masks: Vec<Mask> = shapes.iter().map(|s| s.mask(SCENE_SIZE)).collect();
        let overlap = masks.iter().enumerate().any(|(i, a)| masks[i + 1..].iter().any(|b| a.intersects(b)));
        Self { caption: caption_for(&shapes), image: render(&shapes, SCENE_SIZE), masks, overlap, shapes }
    }

    pub fn save(&self, dir: &Path, index: usize) -> Result<()> {
        let stem = format!("scene_{index:05}");
        self.image.save_png(&dir.join(format!("{stem}.png")))?;
        let mdir = dir.join(format!("{stem}.masks"));
        std::fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
        for (i, m) in self.masks.iter().enumerate() {
            save_mask_png(m, &mdir.join(format!("shape_{i}.png")))?;
        }
        let meta = SceneMeta { caption: self.caption.clone(), overlap: self.overlap, shapes: self.shapes.clone() };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(io_err(&path))
    }

    pub fn load(dir: &Path, index: usize) -> Result<Self> {
        let stem = format!("scene_{index:05}");
        let path = dir.join(format!("{stem}.json"));
        let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(&path).map_err(io_err(&path))?)?;
        let image = Image::load_png(&dir.join(format!("{stem}.png")))?;
        let masks = (0..meta.shapes.len())
            .map(|i| load_mask_png(&dir.join(format!("{stem}.masks/shape_{i}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shapes: meta.shapes, caption: meta.caption, masks, overlap: meta.overlap, image })
    }
}

/// Number of scenes in a dataset directory.
pub fn count_scenes(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(format!("scene_{n:05}.json")).exists() {
        n += 1;
    }
    if n == 0 && !dir.is_dir() {
        return Err(MdeError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory missing"),
        });
    }
    Ok(n)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    (0..count_scenes(dir)?).map(|i| SyntheticScene::load(dir, i)).collect()
}

fn random_shape(rng: &mut ChaCha8Rng) -> ShapeSpec {
    let radius = rng.gen_range(5.5..7.5f32);
    let margin = radius + 1.0;
    ShapeSpec {
        kind: ShapeKind::ALL[rng.gen_range(0..3)],
        color: ColorName::ALL[rng.gen_range(0..4)],
        center: (rng.gen_range(margin..SCENE_SIZE as f32 - margin), rng.gen_range(margin..SCENE_SIZE as f32 - margin)),
        radius,
    }
}

/// Two shapes whose masks are separated by at least two pixels.
pub fn disjoint_pair(rng: &mut ChaCha8Rng) -> Vec<ShapeSpec> {
    loop {
        let a = random_shape(rng);
        let b = random_shape(rng);
        if (a.center.0 - b.center.0).abs() < 4.0 {
            continue;
        }
        if !a.mask(SCENE_SIZE).dilate(2).intersects(&b.mask(SCENE_SIZE)) {
            return vec![a, b];
        }
    }
}

/// Two shapes that overlap while each keeps most of its area visible.
pub fn overlapping_pair(rng: &mut ChaCha8Rng) -> Vec<ShapeSpec> {
    loop {
        let a = random_shape(rng);
        let b = random_shape(rng);
        if (a.center.0 - b.center.0).abs() < 4.0 {
            continue;
        }
        let (ma, mb) = (a.mask(SCENE_SIZE), b.mask(SCENE_SIZE));
        let inter = ma.data().iter().zip(mb.data()).filter(|(&p, &q)| p && q).count();
        if inter > 0 && inter * 3 < ma.count().min(mb.count()) {
            return vec![a, b];
        }
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64)
}

/// Deterministic corpus; exactly `round(n · overlap_fraction)` scenes hold an
/// overlapping pair. Non-overlapping scenes hold one or two separated shapes.
pub fn generate_dataset(n: usize, seed: u64, overlap_fraction: f64) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(MdeError::InvalidValue("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(MdeError::InvalidValue(format!("overlap fraction {overlap_fraction} outside [0, 1]")));
    }
    let n_overlap = (n as f64 * overlap_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut overlapping = vec![false; n];
    for &i in &order[..n_overlap] {
        overlapping[i] = true;
    }
    Ok((0..n)
        .map(|i| {
            let mut r = scene_rng(seed, i);
            let shapes = if overlapping[i] {
                overlapping_pair(&mut r)
            } else if r.gen_bool(0.3) {
                vec![random_shape(&mut r)]
            } else {
                disjoint_pair(&mut r)
            };
            SyntheticScene::from_shapes(shapes)
        })
        .collect())
}
