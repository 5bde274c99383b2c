//! Domain types shared across the editing pipeline.

use serde::{Deserialize, Serialize};

use mde_autograd::{Scalar, Tensor};

use crate::error::{MdeError, Result};

/// Latent `z_t`: `[channels, height, width]` at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T: Scalar> {
    data: Tensor<T>,
    pub timestep: usize,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(data: Tensor<T>, timestep: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(MdeError::ShapeMismatch(format!("latent must be [c, h, w], got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(MdeError::InvalidValue("latent contains non-finite values".into()));
        }
        Ok(Self { data, timestep })
    }

    pub fn zeros(shape: [usize; 3], timestep: usize) -> Self {
        Self { data: Tensor::zeros(&shape), timestep }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn data(&self) -> &[T] {
        self.data.data()
    }

    /// Same grid as `[1, c, h, w]` for the denoiser.
    pub fn batched(&self) -> Tensor<T> {
        let [c, h, w] = self.shape();
        self.data.clone().reshape(&[1, c, h, w]).expect("same element count")
    }

    pub fn with_timestep(mut self, t: usize) -> Self {
        self.timestep = t;
        self
    }

    pub fn mse(&self, other: &Self) -> T {
        let n = T::from_usize(self.data.len()).unwrap();
        self.data.data().iter().zip(other.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n
    }

    pub fn variance(&self) -> T {
        let n = T::from_usize(self.data.len()).unwrap();
        let mean = self.data.sum() / n;
        self.data.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
    }

    pub fn cast<U: Scalar>(&self) -> LatentGrid<U> {
        LatentGrid { data: self.data.cast(), timestep: self.timestep }
    }
}

/// Binary mask over an `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MdeError::ShapeMismatch(format!("mask {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&b| !b).collect() }
    }

    /// Nearest-neighbour resample to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    /// Grows the mask by `r` pixels (square structuring element).
    pub fn dilate(&self, r: usize) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(self.height - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(self.width - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| self.get(yy, xx)))
        })
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y), d.max(x)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(MdeError::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRole {
    PerObject,
    Union,
    Background,
}

/// A mask tagged with the part it plays in an edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub mask: Mask,
    pub role: MaskRole,
}

impl RegionMask {
    /// Union `M` of every per-object mask.
    pub fn union_of(masks: &[&Mask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| MdeError::InvalidValue("union of no masks".into()))?;
        let mut acc = (*first).clone();
        for m in &masks[1..] {
            acc = acc.union(m)?;
        }
        Ok(Self { mask: acc, role: MaskRole::Union })
    }

    /// Background `B = ¬M`.
    pub fn background_of(union: &RegionMask) -> Self {
        Self { mask: union.mask.complement(), role: MaskRole::Background }
    }
}

/// One edit target: the region `S_i` and the target-prompt tokens `T_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub mask: Mask,
    pub target_token_indices: Vec<usize>,
    pub label: String,
}

impl EditSpec {
    pub fn new(mask: Mask, target_token_indices: Vec<usize>, label: impl Into<String>) -> Result<Self> {
        if mask.is_empty() {
            return Err(MdeError::EmptyMask);
        }
        if target_token_indices.is_empty() {
            return Err(MdeError::InvalidValue("edit needs at least one target token".into()));
        }
        Ok(Self { mask, target_token_indices, label: label.into() })
    }

    /// Every target token must be new under `alignment`.
    pub fn validate(&self, alignment: &crate::tokens::TokenAlignment) -> Result<()> {
        for &t in &self.target_token_indices {
            if !alignment.is_new(t) {
                return Err(MdeError::AlignmentOutOfRange(format!(
                    "edit `{}` token {t} is not a new target token",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

/// Reduction of the color-consistency loss over the mask support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CclReduction {
    #[default]
    MaskedMean,
    MaskedSum,
}

/// Weights and schedule of the latent optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub opt_window: usize,
    pub inner_iters: usize,
    pub total_steps: usize,
    pub guidance_scale: f64,
    pub ccl_reduction: CclReduction,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.25,
            delta: 0.05,
            opt_window: 20,
            inner_iters: 1,
            total_steps: 50,
            guidance_scale: 3.0,
            ccl_reduction: CclReduction::MaskedMean,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MdeError::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("step size must be positive");
        }
        if self.total_steps == 0 || self.inner_iters == 0 {
            return bad("step counts must be positive");
        }
        if self.opt_window > self.total_steps {
            return bad("optimization window exceeds total steps");
        }
        if !(self.guidance_scale >= 1.0) {
            return bad("guidance scale must be at least 1");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Cross-attention probabilities captured at one denoising call.
///
/// Each map is `[height, width, tokens]`; rows over tokens are normalized
/// for maps produced by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T: Scalar> {
    pub maps: Vec<Tensor<T>>,
    pub layer_ids: Vec<usize>,
    pub head_ids: Vec<usize>,
    pub resolutions: Vec<(usize, usize)>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(maps: Vec<Tensor<T>>, layer_ids: Vec<usize>, head_ids: Vec<usize>) -> Result<Self> {
        if maps.len() != layer_ids.len() || maps.len() != head_ids.len() {
            return Err(MdeError::ShapeMismatch("attention ids do not match map count".into()));
        }
        let mut resolutions = Vec::with_capacity(maps.len());
        for m in &maps {
            if m.shape().len() != 3 {
                return Err(MdeError::ShapeMismatch(format!("attention map {:?}", m.shape())));
            }
            resolutions.push((m.dim(0), m.dim(1)));
        }
        Ok(Self { maps, layer_ids, head_ids, resolutions })
    }

    /// Splits per-layer probabilities `[1, heads, h*w, tokens]` into maps.
    pub fn from_layers(layers: &[(usize, (usize, usize), &Tensor<T>)]) -> Result<Self> {
        let mut maps = Vec::new();
        let mut layer_ids = Vec::new();
        let mut head_ids = Vec::new();
        for &(layer, (h, w), probs) in layers {
            let s = probs.shape();
            if s.len() != 4 || s[0] != 1 || s[2] != h * w {
                return Err(MdeError::ShapeMismatch(format!("layer probabilities {s:?}")));
            }
            let per_head = s[2] * s[3];
            for head in 0..s[1] {
                let data = probs.data()[head * per_head..(head + 1) * per_head].to_vec();
                maps.push(Tensor::from_vec(&[h, w, s[3]], data)?);
                layer_ids.push(layer);
                head_ids.push(head);
            }
        }
        Self::new(maps, layer_ids, head_ids)
    }

    /// Inverse of [`Self::from_layers`] for one layer: `[1, heads, h*w, tokens]`.
    pub fn layer_tensor(&self, layer: usize) -> Result<Tensor<T>> {
        let idx: Vec<usize> = (0..self.maps.len()).filter(|&i| self.layer_ids[i] == layer).collect();
        let first = idx.first().ok_or_else(|| MdeError::AlignmentOutOfRange(format!("layer {layer}")))?;
        let (h, w) = self.resolutions[*first];
        let l = self.n_tokens();
        let mut data = Vec::with_capacity(idx.len() * h * w * l);
        for &i in &idx {
            data.extend_from_slice(self.maps[i].data());
        }
        Ok(Tensor::from_vec(&[1, idx.len(), h * w, l], data)?)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.maps.first().map(|m| m.dim(2)).unwrap_or(0)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l = self.layer_ids.clone();
        l.dedup();
        l
    }

    /// Largest deviation of a row sum from 1, and whether every entry is in `[0, 1]`.
    pub fn normalization_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut in_range = true;
        for m in &self.maps {
            for row in m.data().chunks(m.dim(2)) {
                let s: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
                worst = worst.max((s - 1.0).abs());
                in_range &= row.iter().all(|&v| v >= T::zero() && v <= T::one());
            }
        }
        (worst, in_range)
    }

    /// Column `token` of map `i` as an `h × w` grid.
    pub fn column(&self, i: usize, token: usize) -> Vec<T> {
        let m = &self.maps[i];
        let l = m.dim(2);
        m.data().iter().skip(token).step_by(l).copied().collect()
    }
}
