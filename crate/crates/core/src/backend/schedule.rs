use serde::{Deserialize, Serialize};

use mde_autograd::{Scalar, Tensor};

/// Cumulative signal rates `ᾱ_t` for `t = 0..=train_steps`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly in `[beta_start, beta_end]` over `train_steps`.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alphas_cumprod = Vec::with_capacity(train_steps + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let frac = if train_steps > 1 { i as f64 / (train_steps - 1) as f64 } else { 0.0 };
            acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
            alphas_cumprod.push(acc);
        }
        Self { train_steps, beta_start, beta_end, alphas_cumprod }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `steps + 1` evenly spaced timesteps `0 = t_0 < … < t_steps = train_steps`.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        (0..=steps).map(|k| ((k as f64) * self.train_steps as f64 / steps.max(1) as f64).round() as usize).collect()
    }

    /// `(a, b)` such that the deterministic DDIM update from `from` to `to`
    /// is `z_to = a·z_from + b·ε`. Serves both sampling and inversion.
    pub fn ddim_coeffs(&self, from: usize, to: usize) -> (f64, f64) {
        let (af, at) = (self.alpha_bar(from), self.alpha_bar(to));
        let a = (at / af).sqrt();
        let b = (1.0 - at).sqrt() - (at * (1.0 - af) / af).sqrt();
        (a, b)
    }

    pub fn ddim_step<T: Scalar>(&self, z: &Tensor<T>, eps: &Tensor<T>, from: usize, to: usize) -> Tensor<T> {
        let (a, b) = self.ddim_coeffs(from, to);
        let (a, b) = (T::lit(a), T::lit(b));
        z.zip_map(eps, |zv, ev| a * zv + b * ev).expect("latent and noise shapes match")
    }

    /// Forward diffusion `√ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample<T: Scalar>(&self, z0: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Tensor<T> {
        let ab = self.alpha_bar(t);
        let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        z0.zip_map(eps, |x, e| s * x + n * e).expect("shapes match")
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_from_one() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.train_steps {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn timesteps_cover_range() {
        let s = NoiseSchedule::default();
        let ts = s.ddim_timesteps(50);
        assert_eq!(ts.len(), 51);
        assert_eq!((ts[0], ts[1], ts[50]), (0, 20, 1000));
    }

    #[test]
    fn q_sample_at_zero_is_identity() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::from_vec(&[3], vec![0.3f64, -0.7, 1.1]).unwrap();
        let eps = Tensor::from_vec(&[3], vec![5.0f64, -2.0, 0.4]).unwrap();
        assert_eq!(s.q_sample(&z0, &eps, 0), z0);
    }

    #[test]
    fn ddim_step_recovers_clean_sample_with_true_noise() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::from_vec(&[2], vec![0.5f64, -0.25]).unwrap();
        let eps = Tensor::from_vec(&[2], vec![1.3f64, -0.4]).unwrap();
        let zt = s.q_sample(&z0, &eps, 600);
        let back = s.ddim_step(&zt, &eps, 600, 0);
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // and forward again along the same noise
        let z200 = s.ddim_step(&zt, &eps, 600, 200);
        let direct = s.q_sample(&z0, &eps, 200);
        for (a, b) in z200.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
