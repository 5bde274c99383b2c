//! Cross-attention maps: computation, recording, injection between branches
//! and implicit segmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mde_autograd::{Scalar, Tensor};

use crate::error::{MdeError, Result};
use crate::image::save_heatmap_png;
use crate::tokens::{TokenAlignment, TokenId, Vocabulary};
use crate::types::AttentionStack;

/// `softmax(Q Kᵀ / √d_k)` row-wise for `Q: [n, d]`, `K: [l, d]`.
pub fn cross_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape().len() != 2 || k.shape().len() != 2 || q.dim(1) != k.dim(1) || q.dim(1) == 0 {
        return Err(MdeError::ShapeMismatch(format!("query {:?} vs key {:?}", q.shape(), k.shape())));
    }
    let (n, d, l) = (q.dim(0), q.dim(1), k.dim(0));
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); n * l];
    for (i, row) in out.chunks_mut(l).enumerate() {
        let qi = &q.data()[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let kj = &k.data()[j * d..(j + 1) * d];
            *o = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
        }
        softmax_in_place(row);
    }
    Ok(Tensor::from_vec(&[n, l], out)?)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Editing-branch stack with shared-token columns taken from the
/// reconstruction stack. New-token columns keep the editing values.
pub fn inject<T: Scalar>(
    recon: &AttentionStack<T>,
    edit: &AttentionStack<T>,
    alignment: &TokenAlignment,
) -> Result<AttentionStack<T>> {
    if recon.len() != edit.len() || recon.resolutions != edit.resolutions {
        return Err(MdeError::ShapeMismatch("attention stacks differ in layer structure".into()));
    }
    let (ls, lt) = (recon.n_tokens(), edit.n_tokens());
    for &(s, t) in &alignment.shared {
        if s >= ls || t >= lt {
            return Err(MdeError::AlignmentOutOfRange(format!("pair ({s}, {t}) for {ls}/{lt} tokens")));
        }
    }
    if let Some(&i) = alignment.new_tokens.iter().find(|&&i| i >= lt) {
        return Err(MdeError::AlignmentOutOfRange(format!("new token {i} for {lt} tokens")));
    }
    let mut out = edit.clone();
    for (dst, src) in out.maps.iter_mut().zip(&recon.maps) {
        let rows = dst.dim(0) * dst.dim(1);
        let (d, s) = (dst.data_mut(), src.data());
        for r in 0..rows {
            for &(js, jt) in &alignment.shared {
                d[r * lt + jt] = s[r * ls + js];
            }
        }
    }
    Ok(out)
}

/// Soft object mask `Ŝ_i` on the mask grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSegmentation<T> {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
    pub map: Vec<T>,
}

impl<T: Scalar> ImplicitSegmentation<T> {
    pub fn max(&self) -> T {
        self.map.iter().copied().fold(T::zero(), T::max)
    }
}

/// Interpolation taps of a half-pixel-centred bilinear resize along one axis.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `h × w` grid to `oh × ow`.
pub fn resize_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &tx {
            let fx = T::lit(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on `oh × ow` back to `h × w`.
pub fn resize_bilinear_adjoint<T: Scalar>(grad: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return grad.to_vec();
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = vec![T::zero(); h * w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::lit(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::lit(fx);
            let g = grad[oy * ow + ox];
            out[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
            out[y0 * w + x1] += g * (T::one() - fy) * fx;
            out[y1 * w + x0] += g * fy * (T::one() - fx);
            out[y1 * w + x1] += g * fy * fx;
        }
    }
    out
}

/// Mean over every layer and head of the resized attention columns of
/// `tokens` (itself averaged when an edit unit spans several tokens).
pub fn implicit_segmentation<T: Scalar>(
    stack: &AttentionStack<T>,
    tokens: &[usize],
    target: (usize, usize),
) -> Result<ImplicitSegmentation<T>> {
    if stack.is_empty() || tokens.is_empty() {
        return Err(MdeError::InvalidValue("segmentation needs at least one map and token".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= stack.n_tokens()) {
        return Err(MdeError::AlignmentOutOfRange(format!("token {t} of {}", stack.n_tokens())));
    }
    let (th, tw) = target;
    let mut acc = vec![T::zero(); th * tw];
    let weight = T::one() / T::lit((stack.len() * tokens.len()) as f64);
    for (i, &(h, w)) in stack.resolutions.iter().enumerate() {
        for &tok in tokens {
            let col = stack.column(i, tok);
            for (a, v) in acc.iter_mut().zip(resize_bilinear(&col, h, w, th, tw)) {
                *a += v * weight;
            }
        }
    }
    Ok(ImplicitSegmentation { height: th, width: tw, tokens: tokens.to_vec(), map: acc })
}

/// Adds the pullback of a gradient on `Ŝ` (for `tokens`) to per-map column
/// gradients shaped like the stack maps.
pub fn segmentation_adjoint<T: Scalar>(
    stack_shape: &AttentionStack<T>,
    tokens: &[usize],
    grad: &[T],
    target: (usize, usize),
    out: &mut [Tensor<T>],
) {
    let (th, tw) = target;
    let weight = T::one() / T::lit((stack_shape.len() * tokens.len()) as f64);
    let l = stack_shape.n_tokens();
    for (i, &(h, w)) in stack_shape.resolutions.iter().enumerate() {
        let back = resize_bilinear_adjoint(grad, h, w, th, tw);
        let d = out[i].data_mut();
        for &tok in tokens {
            for (p, &g) in back.iter().enumerate() {
                d[p * l + tok] += g * weight;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reconstruction,
    Editing,
}

#[derive(Debug, Clone)]
pub struct AttentionRecord<T: Scalar> {
    pub branch: Branch,
    /// Sampling step index, `0` being the first (noisiest) step.
    pub step: usize,
    pub timestep: usize,
    pub stack: AttentionStack<T>,
}

/// Append-only log of the attention used by each denoiser call.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecorder<T: Scalar> {
    entries: Vec<AttentionRecord<T>>,
}

impl<T: Scalar> AttentionRecorder<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn record(&mut self, branch: Branch, step: usize, timestep: usize, stack: AttentionStack<T>) {
        self.entries.push(AttentionRecord { branch, step, timestep, stack });
    }

    pub fn entries(&self) -> &[AttentionRecord<T>] {
        &self.entries
    }

    pub fn get(&self, branch: Branch, step: usize) -> Option<&AttentionStack<T>> {
        self.entries.iter().rev().find(|e| e.branch == branch && e.step == step).map(|e| &e.stack)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Worst row-sum deviation over every recorded map.
    pub fn normalization_error(&self) -> (f64, bool) {
        self.entries
            .iter()
            .map(|e| e.stack.normalization_error())
            .fold((0.0, true), |(w, ok), (e, r)| (w.max(e), ok && r))
    }
}

/// Writes one heatmap per prompt token under `dir/step_%03d/`.
pub fn dump_step<T: Scalar>(
    dir: &Path,
    step: usize,
    stack: &AttentionStack<T>,
    ids: &[TokenId],
    vocab: &Vocabulary,
    size: (usize, usize),
) -> Result<()> {
    let step_dir = dir.join(format!("step_{step:03}"));
    std::fs::create_dir_all(&step_dir).map_err(crate::error::io_err(&step_dir))?;
    for (i, &id) in ids.iter().enumerate().take(stack.n_tokens()) {
        let seg = implicit_segmentation(stack, &[i], size)?;
        let peak = seg.max().to_f64().unwrap().max(1e-12);
        let vals: Vec<f32> = seg.map.iter().map(|v| (v.to_f64().unwrap() / peak) as f32).collect();
        let word = vocab.word(id).unwrap_or("unk");
        save_heatmap_png(&vals, size.0, size.1, &step_dir.join(format!("token_{i:02}_{word}.png")))?;
    }
    Ok(())
}
