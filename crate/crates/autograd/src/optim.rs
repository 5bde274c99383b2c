use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub clip_norm: Option<T>,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: T) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update over the whole store; `grads[i]` belongs to parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|i| Tensor::zeros(params.get(i).shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let scale = match self.clip_norm {
            Some(clip) => {
                let norm = grads.iter().flatten().map(|g| g.sq_norm()).sum::<T>().sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.update_slice(i, params.get_mut(i).data_mut(), g.data(), scale, bc1, bc2);
        }
    }

    /// Plain slice update for optimizing a single free tensor (e.g. an embedding).
    pub fn step_tensor(&mut self, value: &mut Tensor<T>, grad: &Tensor<T>) {
        if self.m.is_empty() {
            self.m = vec![Tensor::zeros(value.shape())];
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        self.update_slice(0, value.data_mut(), grad.data(), T::one(), bc1, bc2);
    }

    fn update_slice(&mut self, i: usize, p: &mut [T], g: &[T], scale: T, bc1: T, bc2: T) {
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] * scale;
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
