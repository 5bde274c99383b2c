//! Noise-prediction training of the toy denoiser on synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use mde_autograd::{Adam, Graph, ParamStore, Scalar, Tensor};

use super::scenes::SyntheticScene;
use super::{AttentionControl, DenoiserBackend, ToyDenoiser};
use crate::error::{MdeError, Result};
use crate::tokens::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the peak rate kept at the end of the cosine decay.
    pub final_lr_fraction: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Probability of replacing a caption with the empty prompt.
    pub null_caption_prob: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 2e-3,
            final_lr_fraction: 0.05,
            warmup_steps: 200,
            grad_clip: 1.0,
            null_caption_prob: 0.1,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One noisy training example.
struct Example<T: Scalar> {
    z0: Vec<T>,
    eps: Vec<T>,
    t: usize,
    ids: Vec<TokenId>,
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn examples<T: Scalar>(
    model: &ToyDenoiser<T>,
    scenes: &[&SyntheticScene],
    rng: &mut ChaCha8Rng,
    null_prob: f64,
) -> Result<Vec<Example<T>>> {
    let null = model.tokenize_padded("")?;
    scenes
        .iter()
        .map(|s| {
            let z0 = model.encode(&s.image)?.into_tensor().into_vec();
            let eps = normal_vec(rng, z0.len());
            let t = rng.gen_range(1..=model.schedule.train_steps);
            let ids = if rng.gen_bool(null_prob) { null.clone() } else { model.tokenize_padded(&s.caption)? };
            Ok(Example { z0, eps, t, ids })
        })
        .collect()
}

/// Mean squared noise error of a batch, and its gradient for every parameter
/// when `grads` is requested.
fn batch_loss<T: Scalar>(
    model: &ToyDenoiser<T>,
    batch: &[Example<T>],
    grads: bool,
) -> Result<(f64, Option<Vec<Option<Tensor<T>>>>)> {
    let [c, h, w] = model.latent_shape();
    let n = batch.len();
    let mut zt = Vec::with_capacity(n * c * h * w);
    let mut eps = Vec::with_capacity(n * c * h * w);
    let mut ts = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n * model.config.context_len);
    for ex in batch {
        let z0 = Tensor::from_vec(&[c, h, w], ex.z0.clone())?;
        let e = Tensor::from_vec(&[c, h, w], ex.eps.clone())?;
        zt.extend(model.schedule.q_sample(&z0, &e, ex.t).into_vec());
        eps.extend_from_slice(&ex.eps);
        ts.push(ex.t);
        ids.extend_from_slice(&ex.ids);
    }
    let mut g = Graph::new();
    let pv = model.params.register(&mut g, grads);
    let z = g.leaf(Tensor::from_vec(&[n, c, h, w], zt)?, false);
    let ctx = model.encode_text_graph(&mut g, &pv, &ids, n)?;
    let out = model.forward_batch(&mut g, &pv, z, &ts, ctx, &AttentionControl::None)?;
    let pred = g.value(out.eps);
    let count = T::lit(pred.len() as f64);
    let mut loss = 0.0;
    let seed: Vec<T> = pred
        .data()
        .iter()
        .zip(&eps)
        .map(|(&p, &e)| {
            let d = p - e;
            loss += (d * d).to_f64().unwrap();
            T::lit(2.0) * d / count
        })
        .collect();
    loss /= pred.len() as f64;
    if !grads {
        return Ok((loss, None));
    }
    let seed = Tensor::from_vec(pred.shape(), seed)?;
    let mut gr = g.backward(vec![(out.eps, seed)])?;
    let pg = pv.vars().iter().map(|&v| gr.take(v)).collect();
    Ok((loss, Some(pg)))
}

/// Held-out noise-prediction loss with a fixed noise draw per scene.
pub fn evaluate_loss<T: Scalar>(model: &ToyDenoiser<T>, scenes: &[SyntheticScene], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let mut total = 0.0;
    let mut count = 0;
    for chunk in refs.chunks(16) {
        let batch = examples(model, chunk, &mut rng, 0.0)?;
        let (l, _) = batch_loss(model, &batch, false)?;
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps).max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cos)
}

fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    let d = T::lit(decay);
    for id in 0..params.len() {
        let src = params.get(id);
        let dst = ema.get_mut(id);
        for (e, &p) in dst.data_mut().iter_mut().zip(src.data()) {
            *e = d * *e + (T::one() - d) * p;
        }
    }
}

/// Trains `model` in place on `dataset`. The returned weights are the
/// exponential moving average of the optimizer iterates. `progress` is called
/// after every optimizer step.
pub fn train_toy<T: Scalar>(
    mut model: ToyDenoiser<T>,
    dataset: &[SyntheticScene],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<ToyDenoiser<T>> {
    if dataset.is_empty() {
        return Err(MdeError::InvalidValue("training needs a non-empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut adam = Adam::new(T::lit(cfg.lr)).with_clip(T::lit(cfg.grad_clip));
    let mut ema = model.params.clone();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for idx in order.chunks(cfg.batch_size) {
            let scenes: Vec<&SyntheticScene> = idx.iter().map(|&i| &dataset[i]).collect();
            let batch = examples(&model, &scenes, &mut rng, cfg.null_caption_prob)?;
            let (loss, grads) = batch_loss(&model, &batch, true)?;
            if !loss.is_finite() {
                return Err(MdeError::DivergedTraining { step, loss });
            }
            let lr = lr_at(cfg, step, total);
            adam.lr = T::lit(lr);
            adam.step(&mut model.params, &grads.expect("gradients requested"));
            let decay = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema_update(&mut ema, &model.params, decay);
            progress(&TrainRecord { step, loss, lr });
            step += 1;
        }
    }
    model.params = ema;
    Ok(model)
}

/// Plain optimizer iterates on a fixed batch, for optimization sanity checks.
pub fn fit_fixed_batch<T: Scalar>(
    model: &mut ToyDenoiser<T>,
    scenes: &[SyntheticScene],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let batch = examples(model, &refs, &mut rng, 0.0)?;
    let mut adam = Adam::new(T::lit(lr));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = batch_loss(model, &batch, true)?;
        if !loss.is_finite() {
            return Err(MdeError::DivergedTraining { step, loss });
        }
        adam.step(&mut model.params, &grads.expect("gradients requested"));
        losses.push(loss);
    }
    Ok(losses)
}
