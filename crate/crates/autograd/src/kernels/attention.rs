use std::sync::Arc;

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Replaces selected probability columns with columns of another map.
///
/// `source` has layout `[n, heads, queries, source_tokens]`; each pair is
/// `(target_column, source_column)`. Replaced columns are constants: no
/// gradient flows through them into the scores.
#[derive(Debug, Clone)]
pub struct ColumnOverride<T> {
    pub pairs: Vec<(usize, usize)>,
    pub source: Arc<Tensor<T>>,
}

pub(crate) struct Dims {
    pub n: usize,
    pub s: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
}

impl Dims {
    pub fn dh(&self) -> usize {
        self.d / self.heads
    }
}

/// Row-wise softmax of `q kᵀ * scale` per head. Returns `(used, own)` where
/// `own` is only kept when an override altered the map.
pub(crate) fn probs_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    dims: &Dims,
    scale: T,
    over: Option<&ColumnOverride<T>>,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let Dims { n, s, l, d, heads } = *dims;
    let dh = dims.dh();
    let mut p = Tensor::zeros(&[n, heads, s, l]);
    for b in 0..n {
        let qb = q.slab(b);
        let kb = k.slab(b);
        for h in 0..heads {
            let off = (b * heads + h) * s * l;
            let ph = &mut p.data_mut()[off..off + s * l];
            gemm(
                scale,
                MatRef::strided(&qb[h * dh..], s, dh, d),
                MatRef::strided(&kb[h * dh..], l, dh, d).t(),
                T::zero(),
                ph,
                l,
            );
            for row in ph.chunks_mut(l) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
    }
    match over {
        None => (p, None),
        Some(over) => {
            let mut used = p.clone();
            let src = &over.source;
            let ls = src.dim(3);
            for b in 0..n {
                for h in 0..heads {
                    let off = (b * heads + h) * s * l;
                    let soff = (b * heads + h) * s * ls;
                    for row in 0..s {
                        for &(tgt, from) in &over.pairs {
                            used.data_mut()[off + row * l + tgt] = src.data()[soff + row * ls + from];
                        }
                    }
                }
            }
            (used, Some(p))
        }
    }
}

/// Gradients of the scores map back onto `q` and `k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn probs_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    own: &Tensor<T>,
    dims: &Dims,
    scale: T,
    over: Option<&ColumnOverride<T>>,
    dp: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let Dims { n, s, l, d, heads } = *dims;
    let dh = dims.dh();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut ds = vec![T::zero(); s * l];
    let mut replaced = vec![false; l];
    if let Some(over) = over {
        for &(tgt, _) in &over.pairs {
            replaced[tgt] = true;
        }
    }
    for b in 0..n {
        for h in 0..heads {
            let off = (b * heads + h) * s * l;
            let ph = &own.data()[off..off + s * l];
            let gh = &dp.data()[off..off + s * l];
            for row in 0..s {
                let pr = &ph[row * l..(row + 1) * l];
                let gr = &gh[row * l..(row + 1) * l];
                let dot: T = (0..l).filter(|&j| !replaced[j]).map(|j| pr[j] * gr[j]).sum();
                for j in 0..l {
                    let g = if replaced[j] { T::zero() } else { gr[j] };
                    ds[row * l + j] = pr[j] * (g - dot);
                }
            }
            let qb = q.slab(b);
            let kb = k.slab(b);
            let dqb = &mut dq.data_mut()[b * s * d..(b + 1) * s * d];
            gemm(
                scale,
                MatRef::new(&ds, s, l),
                MatRef::strided(&kb[h * dh..], l, dh, d),
                T::one(),
                &mut dqb[h * dh..],
                d,
            );
            let dkb = &mut dk.data_mut()[b * l * d..(b + 1) * l * d];
            gemm(
                scale,
                MatRef::new(&ds, s, l).t(),
                MatRef::strided(&qb[h * dh..], s, dh, d),
                T::one(),
                &mut dkb[h * dh..],
                d,
            );
        }
    }
    (dq, dk)
}

/// `out[b, :, head] = P[b, head] · v[b, :, head]`.
pub(crate) fn mix_forward<T: Scalar>(p: &Tensor<T>, v: &Tensor<T>, dims: &Dims) -> Tensor<T> {
    let Dims { n, s, l, d, heads } = *dims;
    let dh = dims.dh();
    let mut out = Tensor::zeros(&[n, s, d]);
    for b in 0..n {
        let vb = v.slab(b);
        let ob = &mut out.data_mut()[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let off = (b * heads + h) * s * l;
            gemm(
                T::one(),
                MatRef::new(&p.data()[off..off + s * l], s, l),
                MatRef::strided(&vb[h * dh..], l, dh, d),
                T::zero(),
                &mut ob[h * dh..],
                d,
            );
        }
    }
    out
}

pub(crate) fn mix_backward<T: Scalar>(
    p: &Tensor<T>,
    v: &Tensor<T>,
    dims: &Dims,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let Dims { n, s, l, d, heads } = *dims;
    let dh = dims.dh();
    let mut dp = Tensor::zeros(p.shape());
    let mut dv = Tensor::zeros(v.shape());
    for b in 0..n {
        let vb = v.slab(b);
        let db = dout.slab(b);
        for h in 0..heads {
            let off = (b * heads + h) * s * l;
            gemm(
                T::one(),
                MatRef::strided(&db[h * dh..], s, dh, d),
                MatRef::strided(&vb[h * dh..], l, dh, d).t(),
                T::zero(),
                &mut dp.data_mut()[off..off + s * l],
                l,
            );
            let dvb = &mut dv.data_mut()[b * l * d..(b + 1) * l * d];
            gemm(
                T::one(),
                MatRef::new(&p.data()[off..off + s * l], s, l).t(),
                MatRef::strided(&db[h * dh..], s, dh, d),
                T::one(),
                &mut dvb[h * dh..],
                d,
            );
        }
    }
    (dp, dv)
}
