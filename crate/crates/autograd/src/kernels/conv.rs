use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0 {
            return None;
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return None;
        }
        Some(Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            k,
            stride,
            pad,
            ho: (x[2] + 2 * pad - k) / stride + 1,
            wo: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.ci {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.ci {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    let bias = b.data();
    for n in 0..g.n {
        let xn = x.slab(n);
        let cols_ref: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let on = &mut out.data_mut()[n * g.co * plane..(n + 1) * g.co * plane];
        for (c, row) in on.chunks_mut(plane).enumerate() {
            row.fill(bias[c]);
        }
        gemm(T::one(), MatRef::new(w.data(), g.co, patch), MatRef::new(cols_ref, patch, plane), T::one(), on, plane);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = need_dx.then(|| Tensor::zeros(&[g.n, g.ci, g.h, g.w]));
    let mut dw = need_dw.then(|| Tensor::zeros(&[g.co, g.ci, g.k, g.k]));
    let mut db = need_dw.then(|| Tensor::zeros(&[g.co]));
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    let mut dcols = if need_dx && !g.pointwise() { vec![T::zero(); patch * plane] } else { Vec::new() };
    for n in 0..g.n {
        let dyn_ = dy.slab(n);
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let xn = x.slab(n);
            let cols_ref: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::new(dyn_, g.co, plane),
                MatRef::new(cols_ref, patch, plane).t(),
                T::one(),
                dw.data_mut(),
                patch,
            );
            for (c, row) in dyn_.chunks(plane).enumerate() {
                db.data_mut()[c] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
            if g.pointwise() {
                gemm(
                    T::one(),
                    MatRef::new(w.data(), g.co, patch).t(),
                    MatRef::new(dyn_, g.co, plane),
                    T::one(),
                    dxn,
                    plane,
                );
            } else {
                gemm(
                    T::one(),
                    MatRef::new(w.data(), g.co, patch).t(),
                    MatRef::new(dyn_, g.co, plane),
                    T::zero(),
                    &mut dcols,
                    plane,
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}
