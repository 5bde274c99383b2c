//! Object alignment and color consistency losses with analytic gradients
//! with respect to their input maps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mde_autograd::Scalar;

use crate::error::{io_err, MdeError, Result};
use crate::types::{CclReduction, GuidanceConfig, Mask};

/// Clamp applied to predictions inside the cross-entropy.
pub const CLAMP_EPS: f64 = 1e-6;

/// Segmentations whose peak is below this are rejected by the alignment loss.
pub const DEGENERATE_PEAK: f64 = 1e-8;

/// Guard added to the ratio denominator of the color loss.
pub const RATIO_GUARD: f64 = 1e-12;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MdeError::ShapeMismatch(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 − eps]`.
pub fn bce<T: Scalar>(pred: &[T], target: &[bool], eps: f64) -> Result<T> {
    check_len(pred.len(), target.len())?;
    let (lo, hi) = (T::lit(eps), T::lit(1.0 - eps));
    let sum = pred.iter().zip(target).fold(T::zero(), |acc, (&p, &s)| {
        let p = p.max(lo).min(hi);
        acc - if s { p.ln() } else { (T::one() - p).ln() }
    });
    Ok(sum / T::lit(pred.len() as f64))
}

/// Gradient of [`bce`]; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(pred: &[T], target: &[bool], eps: f64) -> Result<Vec<T>> {
    check_len(pred.len(), target.len())?;
    let (lo, hi) = (T::lit(eps), T::lit(1.0 - eps));
    let n = T::lit(pred.len() as f64);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &s)| {
            if p < lo || p > hi {
                T::zero()
            } else if s {
                -T::one() / (p * n)
            } else {
                T::one() / ((T::one() - p) * n)
            }
        })
        .collect())
}

/// Alignment loss of one object, `bce(Ŝ, S) + bce(Ŝ/‖Ŝ‖∞, S)`, and its
/// gradient with respect to `Ŝ`. `token` only labels the error.
pub fn oal_object<T: Scalar>(seg: &[T], mask: &Mask, token: usize) -> Result<(T, Vec<T>)> {
    let target = mask.data();
    check_len(seg.len(), target.len())?;
    let (arg, peak) = seg
        .iter()
        .enumerate()
        .fold((0, T::zero()), |(ai, m), (i, &v)| if v.abs() > m { (i, v.abs()) } else { (ai, m) });
    if peak < T::lit(DEGENERATE_PEAK) {
        return Err(MdeError::DegenerateSegmentation(token));
    }
    let normed: Vec<T> = seg.iter().map(|&v| v / peak).collect();
    let value = bce(seg, target, CLAMP_EPS)? + bce(&normed, target, CLAMP_EPS)?;
    let mut grad = bce_grad(seg, target, CLAMP_EPS)?;
    let g2 = bce_grad(&normed, target, CLAMP_EPS)?;
    let mut through_peak = T::zero();
    for ((g, &g2k), &v) in grad.iter_mut().zip(&g2).zip(seg) {
        *g += g2k / peak;
        through_peak += g2k * v;
    }
    grad[arg] -= through_peak / (peak * peak) * seg[arg].signum();
    Ok((value, grad))
}

/// Sum over objects of [`oal_object`].
pub fn oal<T: Scalar>(segs: &[&[T]], masks: &[&Mask]) -> Result<(T, Vec<T>)> {
    if segs.is_empty() || segs.len() != masks.len() {
        return Err(MdeError::ShapeMismatch(format!("{} segmentations for {} masks", segs.len(), masks.len())));
    }
    let mut total = T::zero();
    let mut per = Vec::with_capacity(segs.len());
    for (i, (s, m)) in segs.iter().zip(masks).enumerate() {
        let (v, _) = oal_object(s, m, i)?;
        total += v;
        per.push(v);
    }
    Ok((total, per))
}

/// Gradients of the color loss with respect to the summed edit attention and
/// to the summed common attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CclGrad<T> {
    pub edit: Vec<T>,
    pub common: Vec<T>,
}

fn sum_maps<T: Scalar>(maps: &[&[T]], n: usize) -> Result<Vec<T>> {
    let mut acc = vec![T::zero(); n];
    for m in maps {
        check_len(m.len(), n)?;
        for (a, &v) in acc.iter_mut().zip(m.iter()) {
            *a += v;
        }
    }
    Ok(acc)
}

/// `(1 − r)²` over the mask support with `r = a / (a + Σ c)`, where `a` sums
/// the edit-token maps and `c` runs over the common-token maps.
pub fn ccl<T: Scalar>(edit: &[&[T]], common: &[&[T]], mask: &Mask, reduction: CclReduction) -> Result<(T, CclGrad<T>)> {
    let n = mask.data().len();
    if mask.is_empty() {
        return Err(MdeError::EmptyMask);
    }
    if edit.is_empty() {
        return Err(MdeError::InvalidValue("color loss needs an edit token".into()));
    }
    let a = sum_maps(edit, n)?;
    let c = sum_maps(common, n)?;
    let norm = match reduction {
        CclReduction::MaskedMean => T::lit(mask.count() as f64),
        CclReduction::MaskedSum => T::one(),
    };
    let guard = T::lit(RATIO_GUARD);
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad = CclGrad { edit: vec![T::zero(); n], common: vec![T::zero(); n] };
    for (k, &inside) in mask.data().iter().enumerate() {
        if !inside {
            continue;
        }
        let d = a[k] + c[k] + guard;
        let r = a[k] / d;
        value += (T::one() - r) * (T::one() - r);
        let outer = -two * (T::one() - r) / norm;
        grad.edit[k] = outer * (c[k] + guard) / (d * d);
        grad.common[k] = -outer * a[k] / (d * d);
    }
    Ok((value / norm, grad))
}

/// Weighted loss terms for one optimization iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub oal: f64,
    pub ccl: f64,
    pub total: f64,
    pub per_object_oal: Vec<f64>,
    pub per_object_ccl: Vec<f64>,
}

/// `λ₁·oal + λ₂·ccl`.
pub fn total_loss(oal: f64, ccl: f64, config: &GuidanceConfig) -> LossBreakdown {
    LossBreakdown {
        oal,
        ccl,
        total: config.lambda1 * oal + config.lambda2 * ccl,
        per_object_oal: Vec::new(),
        per_object_ccl: Vec::new(),
    }
}

/// One line of the per-iteration loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub iter: usize,
    pub oal: f64,
    pub ccl: f64,
    pub total: f64,
}

impl LossLogEntry {
    pub fn new(step: usize, iter: usize, b: &LossBreakdown) -> Self {
        Self { step, iter, oal: b.oal, ccl: b.ccl, total: b.total }
    }
}

pub fn write_loss_log(entries: &[LossLogEntry], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(io_err(path))?;
    }
    Ok(())
}
