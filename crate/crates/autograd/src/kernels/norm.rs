use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-(sample, group) statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, GroupStats<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane: usize = x.shape()[2..].iter().product();
    let per_group = c / groups;
    let count = T::from_usize(per_group * plane).unwrap();
    let mut y = Tensor::zeros(x.shape());
    let mut stats = GroupStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    for s in 0..n {
        for g in 0..groups {
            let lo = (s * c + g * per_group) * plane;
            let hi = lo + per_group * plane;
            let xs = &x.data()[lo..hi];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            let ys = &mut y.data_mut()[lo..hi];
            for (j, (yv, &xv)) in ys.iter_mut().zip(xs).enumerate() {
                let ch = g * per_group + j / plane;
                *yv = (xv - mean) * rstd * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    (y, stats)
}

pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    groups: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane: usize = x.shape()[2..].iter().product();
    let per_group = c / groups;
    let count = T::from_usize(per_group * plane).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for s in 0..n {
        for g in 0..groups {
            let idx = s * groups + g;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let lo = (s * c + g * per_group) * plane;
            let hi = lo + per_group * plane;
            let xs = &x.data()[lo..hi];
            let dys = &dy.data()[lo..hi];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for (j, (&xv, &dv)) in xs.iter().zip(dys).enumerate() {
                let ch = g * per_group + j / plane;
                let xhat = (xv - mean) * rstd;
                let dxhat = dv * gamma.data()[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma.data_mut()[ch] += dv * xhat;
                dbeta.data_mut()[ch] += dv;
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            let dxs = &mut dx.data_mut()[lo..hi];
            for (j, ((d, &xv), &dv)) in dxs.iter_mut().zip(xs).zip(dys).enumerate() {
                let ch = g * per_group + j / plane;
                let xhat = (xv - mean) * rstd;
                *d = rstd * (dv * gamma.data()[ch] - m1 - xhat * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}
