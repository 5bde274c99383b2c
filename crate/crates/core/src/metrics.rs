//! Background similarity and edit-alignment scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::scenes::{render, ColorName, ShapeKind, ShapeSpec, SyntheticScene, SCENE_SIZE};
use crate::error::{io_err, MdeError, Result};
use crate::image::Image;
use crate::types::Mask;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter().map(|v| v / s).collect()
}

/// Per-pixel SSIM of one channel. Window statistics use only pixels where
/// `support` is set (and inside the image), with the Gaussian weights
/// renormalized over them.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, support: &[bool], range: f64) -> Vec<Option<f64>> {
    let g = gaussian_window();
    let r = SSIM_RADIUS as isize;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut out = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            if !support[y * w + x] {
                continue;
            }
            let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let k = yy as usize * w + xx as usize;
                    if !support[k] {
                        continue;
                    }
                    let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                    let (va, vb) = (a[k] as f64, b[k] as f64);
                    sw += wt;
                    ma += wt * va;
                    mb += wt * vb;
                    aa += wt * va * va;
                    bb += wt * vb * vb;
                    ab += wt * va * vb;
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = (aa / sw - ma * ma).max(0.0);
            let vb = (bb / sw - mb * mb).max(0.0);
            let cov = ab / sw - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            out[y * w + x] = Some(s);
        }
    }
    out
}

fn check_pair(a: &Image, b: &Image, mask: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || (a.height, a.width) != (mask.height, mask.width) {
        return Err(MdeError::ShapeMismatch(format!(
            "images {}x{} / {}x{} with mask {}x{}",
            a.height, a.width, b.height, b.width, mask.height, mask.width
        )));
    }
    if mask.is_empty() {
        return Err(MdeError::EmptyMask);
    }
    Ok(())
}

/// Mean SSIM over background pixels (data range 1, Gaussian window 11×11,
/// σ = 1.5), averaged over color channels.
pub fn bg_ssim(original: &Image, edited: &Image, background: &Mask) -> Result<f64> {
    check_pair(original, edited, background)?;
    let (h, w) = (original.height, original.width);
    let mut total = 0.0;
    for c in 0..3 {
        let map = ssim_plane(original.plane(c), edited.plane(c), h, w, background.data(), 1.0);
        total += map.iter().flatten().sum::<f64>() / background.count() as f64;
    }
    Ok(total / 3.0)
}

/// Statistics of one background crop.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// One feature vector per crop that holds background pixels, in a fixed
    /// crop order; crops without background yield `None`.
    fn features(&self, image: &Image, background: &Mask) -> Vec<Option<Vec<f64>>>;
}

/// Color mean, spread and local gradients of square crops, computed from
/// background pixels only.
#[derive(Debug, Clone, Copy)]
pub struct CropStatistics {
    pub crop: usize,
}

impl Default for CropStatistics {
    fn default() -> Self {
        Self { crop: 4 }
    }
}

impl FeatureExtractor for CropStatistics {
    fn name(&self) -> &str {
        "crop-statistics"
    }

    fn features(&self, image: &Image, background: &Mask) -> Vec<Option<Vec<f64>>> {
        let (h, w, c) = (image.height, image.width, self.crop);
        let mut out = Vec::new();
        for y0 in (0..h).step_by(c) {
            for x0 in (0..w).step_by(c) {
                let pix: Vec<(usize, usize)> = (y0..(y0 + c).min(h))
                    .flat_map(|y| (x0..(x0 + c).min(w)).map(move |x| (y, x)))
                    .filter(|&(y, x)| background.get(y, x))
                    .collect();
                if pix.is_empty() {
                    out.push(None);
                    continue;
                }
                let n = pix.len() as f64;
                let mut f = Vec::with_capacity(12);
                for ch in 0..3 {
                    let p = image.plane(ch);
                    let mean = pix.iter().map(|&(y, x)| p[y * w + x] as f64).sum::<f64>() / n;
                    let var = pix.iter().map(|&(y, x)| (p[y * w + x] as f64 - mean).powi(2)).sum::<f64>() / n;
                    let (mut gx, mut gy, mut nx, mut ny) = (0.0, 0.0, 0, 0);
                    for &(y, x) in &pix {
                        if x + 1 < w && background.get(y, x + 1) {
                            gx += (p[y * w + x + 1] - p[y * w + x]).abs() as f64;
                            nx += 1;
                        }
                        if y + 1 < h && background.get(y + 1, x) {
                            gy += (p[(y + 1) * w + x] - p[y * w + x]).abs() as f64;
                            ny += 1;
                        }
                    }
                    f.extend([mean, var.sqrt(), gx / nx.max(1) as f64, gy / ny.max(1) as f64]);
                }
                out.push(Some(f));
            }
        }
        out
    }
}

/// Mean squared feature distance over background crops.
pub fn bg_perceptual(
    original: &Image,
    edited: &Image,
    background: &Mask,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<f64> {
    let extractor = extractor.ok_or(MdeError::MissingExtractor)?;
    check_pair(original, edited, background)?;
    let fa = extractor.features(original, background);
    let fb = extractor.features(edited, background);
    let mut total = 0.0;
    let mut n = 0;
    for (a, b) in fa.iter().zip(&fb) {
        if let (Some(a), Some(b)) = (a, b) {
            total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Pixels farther than this from white (in the largest channel) are foreground.
const FOREGROUND_THRESHOLD: f32 = 0.3;

fn nearest_color(rgb: [f32; 3]) -> ColorName {
    let d = |c: ColorName| c.rgb().iter().zip(&rgb).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
    ColorName::ALL.into_iter().min_by(|&a, &b| d(a).total_cmp(&d(b))).expect("palette is non-empty")
}

/// Region descriptors: fill ratio of the bounding box and the widths of the
/// top and bottom quarters relative to the widest row.
fn shape_features(pixels: &[(usize, usize)]) -> [f64; 3] {
    let (y0, y1) = pixels.iter().fold((usize::MAX, 0), |(a, b), &(y, _)| (a.min(y), b.max(y)));
    let (x0, x1) = pixels.iter().fold((usize::MAX, 0), |(a, b), &(_, x)| (a.min(x), b.max(x)));
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut rows = vec![0usize; bh];
    for &(y, _) in pixels {
        rows[y - y0] += 1;
    }
    let widest = *rows.iter().max().unwrap() as f64;
    let q = (bh / 4).max(1);
    let top = rows[..q].iter().sum::<usize>() as f64 / q as f64;
    let bottom = rows[bh - q..].iter().sum::<usize>() as f64 / q as f64;
    [pixels.len() as f64 / (bh * bw) as f64, top / widest, bottom / widest]
}

/// Shape and color of the object inside a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub shape: ShapeKind,
    pub color: ColorName,
}

/// Nearest-centroid shape classifier over region descriptors with a
/// nearest-palette color vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub centroids: Vec<(ShapeKind, [f64; 3])>,
}

impl ToyClassifier {
    /// Fits centroids on the visible pixels of every shape in `scenes`.
    pub fn fit(scenes: &[SyntheticScene]) -> Result<Self> {
        let mut acc: Vec<(ShapeKind, [f64; 3], usize)> = ShapeKind::ALL.iter().map(|&k| (k, [0.0; 3], 0)).collect();
        for s in scenes {
            for (spec, mask) in s.shapes.iter().zip(&s.masks) {
                let Some((_, pixels)) = colored_pixels(&s.image, mask) else { continue };
                let f = shape_features(&pixels);
                let slot = acc.iter_mut().find(|(k, _, _)| *k == spec.kind).unwrap();
                for (a, v) in slot.1.iter_mut().zip(f) {
                    *a += v;
                }
                slot.2 += 1;
            }
        }
        if acc.iter().any(|(_, _, n)| *n == 0) {
            return Err(MdeError::MissingClassifier("training scenes do not cover every shape".into()));
        }
        Ok(Self { centroids: acc.into_iter().map(|(k, s, n)| (k, s.map(|v| v / n as f64))).collect() })
    }

    /// Classifier fitted on a fixed grid of clean single-shape renders.
    pub fn reference() -> Self {
        let mut scenes = Vec::new();
        for (i, kind) in ShapeKind::ALL.into_iter().enumerate() {
            for (j, color) in ColorName::ALL.into_iter().enumerate() {
                for r in [5.5f32, 6.5, 7.5] {
                    let c = 10.0 + 1.3 * (i + j) as f32;
                    scenes.push(SyntheticScene::from_shapes(vec![ShapeSpec {
                        kind,
                        color,
                        center: (c, 32.0 - c),
                        radius: r,
                    }]));
                }
            }
        }
        Self::fit(&scenes).expect("reference grid covers all shapes")
    }

    pub fn classify(&self, image: &Image, region: &Mask) -> Option<Prediction> {
        let (color, pixels) = colored_pixels(image, region)?;
        let f = shape_features(&pixels);
        let d = |c: &[f64; 3]| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let shape = self.centroids.iter().min_by(|a, b| d(&a.1).total_cmp(&d(&b.1)))?.0;
        Some(Prediction { shape, color })
    }
}

/// Majority palette color among foreground pixels of `region`, and the
/// pixels that carry it.
fn colored_pixels(image: &Image, region: &Mask) -> Option<(ColorName, Vec<(usize, usize)>)> {
    let mut votes = [0usize; 4];
    let mut fg = Vec::new();
    for y in 0..region.height {
        for x in 0..region.width {
            if !region.get(y, x) {
                continue;
            }
            let p = image.pixel(y, x);
            if p.iter().map(|v| 1.0 - v).fold(0.0f32, f32::max) < FOREGROUND_THRESHOLD {
                continue;
            }
            let c = nearest_color(p);
            votes[ColorName::ALL.iter().position(|&k| k == c).unwrap()] += 1;
            fg.push((y, x, c));
        }
    }
    let best = (0..4).max_by_key(|&i| (votes[i], std::cmp::Reverse(i)))?;
    if votes[best] == 0 {
        return None;
    }
    let color = ColorName::ALL[best];
    Some((color, fg.into_iter().filter(|&(_, _, c)| c == color).map(|(y, x, _)| (y, x)).collect()))
}

/// Region of the image and the object expected there after editing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTarget {
    pub mask: Mask,
    pub expected: Prediction,
}

/// Fraction of edit regions whose predicted object matches the target, with
/// the per-edit outcomes.
pub fn alignment_score(
    edited: &Image,
    targets: &[EditTarget],
    classifier: Option<&ToyClassifier>,
) -> Result<(f64, Vec<bool>)> {
    let classifier = classifier.ok_or_else(|| MdeError::MissingClassifier("no toy classifier loaded".into()))?;
    let per: Vec<bool> = targets.iter().map(|t| classifier.classify(edited, &t.mask) == Some(t.expected)).collect();
    let score = if per.is_empty() { 1.0 } else { per.iter().filter(|&&b| b).count() as f64 / per.len() as f64 };
    Ok((score, per))
}

/// Ground-truth render of a scene with one object replaced.
pub fn render_target(shapes: &[ShapeSpec], index: usize, expected: Prediction) -> Image {
    let mut s = shapes.to_vec();
    s[index].kind = expected.shape;
    s[index].color = expected.color;
    render(&s, SCENE_SIZE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub id: String,
    pub original: Option<String>,
    pub edited: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// A score, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: Option<f64>,
    pub reason: Option<String>,
}

impl Scored {
    pub fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self { value: Some(v), reason: None },
            Err(e) => Self { value: None, reason: Some(e.to_string()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bg_ssim: f64,
    pub bg_perceptual: Scored,
    pub alignment: Scored,
    pub per_edit_success: Vec<bool>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn success_rate(&self) -> Option<f64> {
        if self.per_edit_success.is_empty() {
            return None;
        }
        Some(self.per_edit_success.iter().filter(|&&b| b).count() as f64 / self.per_edit_success.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

/// Scores one original/edited pair; the background is the complement of `union`.
pub fn evaluate(
    original: &Image,
    edited: &Image,
    union: &Mask,
    targets: &[EditTarget],
    classifier: Option<&ToyClassifier>,
    extractor: Option<&dyn FeatureExtractor>,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    let background = union.complement();
    let bg_ssim = bg_ssim(original, edited, &background)?;
    let bg_perceptual = Scored::from_result(bg_perceptual(original, edited, &background, extractor));
    let (alignment, per_edit_success) = match alignment_score(edited, targets, classifier) {
        Ok((s, per)) => (Scored { value: Some(s), reason: None }, per),
        Err(e) => (Scored { value: None, reason: Some(e.to_string()) }, Vec::new()),
    };
    Ok(EvalReport { bg_ssim, bg_perceptual, alignment, per_edit_success, metadata })
}

/// Batch summary with columns `id, bg_ssim, bg_perceptual, alignment, success_rate`.
pub fn write_summary_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MdeError::InvalidValue(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut write = |rec: &[String]| w.write_record(rec).map_err(|e| MdeError::InvalidValue(e.to_string()));
    write(&["id", "bg_ssim", "bg_perceptual", "alignment", "success_rate"].map(String::from))?;
    for r in reports {
        write(&[
            r.metadata.id.clone(),
            format!("{:.6}", r.bg_ssim),
            opt(r.bg_perceptual.value),
            opt(r.alignment.value),
            opt(r.success_rate()),
        ])?;
    }
    w.flush().map_err(io_err(path))
}
