//! DDIM inversion and per-step null-text optimization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mde_autograd::{Adam, Graph, Scalar, Tensor};

use crate::backend::sampler::{ddim_sample, null_context, NullSchedule, SampleOptions};
use crate::backend::{batch_context, AttentionControl, DenoiserBackend};
use crate::error::{io_err, MdeError, Result};
use crate::image::Image;
use crate::tokens::TokenId;
use crate::types::LatentGrid;

/// Latents from `z_0` (index 0) up to `z_T`, with optional null embeddings
/// ordered like sampling steps (first entry is used at `z_T`).
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory<T: Scalar> {
    pub latents: Vec<LatentGrid<T>>,
    pub timesteps: Vec<usize>,
    pub null_embeddings: Option<Vec<Tensor<T>>>,
    pub prompt: String,
    pub prompt_ids: Vec<TokenId>,
    pub backend_digest: String,
}

impl<T: Scalar> InversionTrajectory<T> {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn z0(&self) -> &LatentGrid<T> {
        &self.latents[0]
    }

    pub fn z_t(&self) -> &LatentGrid<T> {
        self.latents.last().expect("trajectory holds z_0")
    }

    pub fn null_schedule(&self) -> NullSchedule<T> {
        match &self.null_embeddings {
            Some(v) => NullSchedule::PerStep(v.clone()),
            None => NullSchedule::Default,
        }
    }
}

/// Deterministic DDIM inversion under `prompt` without guidance.
pub fn ddim_invert<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    image: &Image,
    prompt: &str,
    steps: usize,
) -> Result<InversionTrajectory<T>> {
    let ids = backend.tokenize_padded(prompt)?;
    let cond = backend.text_encode(&ids)?;
    let schedule = backend.schedule();
    let ts = schedule.ddim_timesteps(steps);
    let mut latents = vec![backend.encode(image)?];
    for k in 1..ts.len().min(steps + 1) {
        let prev = &latents[k - 1];
        let eps = backend.predict_noise(prev, ts[k], &cond, &AttentionControl::None)?.eps;
        let next = schedule.ddim_step(prev.tensor(), &eps, ts[k - 1], ts[k]);
        latents.push(LatentGrid::new(next, ts[k])?);
    }
    let timesteps = if steps == 0 { vec![0] } else { ts };
    Ok(InversionTrajectory {
        latents,
        timesteps,
        null_embeddings: None,
        prompt: prompt.to_string(),
        prompt_ids: ids,
        backend_digest: backend.parameter_digest(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtiConfig {
    pub inner_steps: usize,
    pub lr: f64,
    /// Stop a step once the mean squared distance falls below this.
    pub early_stop_tol: f64,
    pub guidance_scale: f64,
}

impl Default for NtiConfig {
    fn default() -> Self {
        Self { inner_steps: 10, lr: 1e-2, early_stop_tol: 1e-5, guidance_scale: 3.0 }
    }
}

/// Distances recorded while optimizing one sampling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtiStepLog {
    pub step: usize,
    pub timestep: usize,
    /// Distance of each evaluated iterate, starting with the initial embedding.
    pub distances: Vec<f64>,
    /// Best distance seen so far after each evaluation.
    pub best: Vec<f64>,
}

impl NtiStepLog {
    pub fn initial(&self) -> f64 {
        self.distances[0]
    }

    pub fn final_best(&self) -> f64 {
        *self.best.last().expect("at least one evaluation")
    }
}

/// Optimizes one null embedding per sampling step so that guided DDIM
/// sampling retraces the inversion trajectory. Weights and the conditional
/// embedding are never modified.
pub fn nti_optimize<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    trajectory: &InversionTrajectory<T>,
    cfg: &NtiConfig,
) -> Result<(InversionTrajectory<T>, Vec<NtiStepLog>)> {
    let steps = trajectory.steps();
    let schedule = backend.schedule();
    let ts = &trajectory.timesteps;
    let cond = backend.text_encode(&trajectory.prompt_ids)?;
    let cond_b = batch_context(&cond)?;
    let w = T::lit(cfg.guidance_scale);
    let mut null = null_context(backend)?;
    let ctx_shape = null.shape().to_vec();
    let mut z = trajectory.z_t().clone();
    let mut nulls = Vec::with_capacity(steps);
    let mut logs = Vec::with_capacity(steps);
    for (k, i) in (1..=steps).rev().enumerate() {
        let (t, s) = (ts[i], ts[i - 1]);
        let target = trajectory.latents[i - 1].tensor();
        let (a, b) = schedule.ddim_coeffs(t, s);
        let (a, b) = (T::lit(a), T::lit(b));
        let eps_c = {
            let mut g = Graph::new();
            let zv = g.leaf(z.batched(), false);
            let cv = g.leaf(cond_b.clone(), false);
            let out = backend.forward(&mut g, zv, t, cv, &AttentionControl::None)?;
            g.value(out.eps).clone()
        };
        let n = T::lit(target.len() as f64);
        let mut adam = Adam::new(T::lit(cfg.lr));
        let mut log = NtiStepLog { step: k, timestep: t, distances: Vec::new(), best: Vec::new() };
        let mut best: Option<(f64, Tensor<T>, Tensor<T>)> = None;
        for j in 0..=cfg.inner_steps {
            let mut g = Graph::new();
            let zv = g.leaf(z.batched(), false);
            let uv = g.leaf(batch_context(&null)?, true);
            let out = backend.forward(&mut g, zv, t, uv, &AttentionControl::None)?;
            let eps_u = g.value(out.eps);
            let z_prev: Vec<T> = eps_u
                .data()
                .iter()
                .zip(eps_c.data())
                .zip(z.data())
                .map(|((&eu, &ec), &zz)| a * zz + b * (eu + w * (ec - eu)))
                .collect();
            let diff: Vec<T> = z_prev.iter().zip(target.data()).map(|(&p, &q)| p - q).collect();
            let dist = diff.iter().fold(T::zero(), |acc, &d| acc + d * d).to_f64().unwrap() / target.len() as f64;
            if !dist.is_finite() {
                return Err(MdeError::DivergedOptimization {
                    step: k,
                    distance: dist,
                    start: log.distances.first().copied().unwrap_or(f64::NAN),
                });
            }
            log.distances.push(dist);
            let start = log.distances[0];
            if dist > 10.0 * start && start > 0.0 {
                return Err(MdeError::DivergedOptimization { step: k, distance: dist, start });
            }
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                let zp = Tensor::from_vec(target.shape(), z_prev)?;
                best = Some((dist, null.clone(), zp));
            }
            log.best.push(best.as_ref().unwrap().0);
            if j == cfg.inner_steps || dist < cfg.early_stop_tol {
                break;
            }
            let seed_scale = T::lit(2.0) * b * (T::one() - w) / n;
            let seed: Vec<T> = diff.iter().map(|&d| d * seed_scale).collect();
            let seed = Tensor::from_vec(eps_u.shape(), seed)?;
            let mut grads = g.backward(vec![(out.eps, seed)])?;
            let grad = grads.take(uv).expect("null embedding requires grad").reshape(&ctx_shape)?;
            if !grad.all_finite() {
                return Err(MdeError::NonFiniteGradient { timestep: t, iter: j });
            }
            adam.step_tensor(&mut null, &grad);
        }
        let (_, best_null, z_prev) = best.expect("at least one evaluation");
        null = best_null;
        nulls.push(null.clone());
        z = LatentGrid::new(z_prev, s)?;
        logs.push(log);
    }
    let mut out = trajectory.clone();
    out.null_embeddings = Some(nulls);
    Ok((out, logs))
}

/// Samples back from `z_T` under the trajectory's prompt: unguided when no null
/// embeddings are attached, guided with them otherwise.
pub fn reconstruct<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    trajectory: &InversionTrajectory<T>,
    guidance_scale: f64,
) -> Result<LatentGrid<T>> {
    let opts = SampleOptions {
        steps: trajectory.steps(),
        guidance_scale: if trajectory.null_embeddings.is_some() { guidance_scale } else { 1.0 },
        null: trajectory.null_schedule(),
    };
    if opts.steps == 0 {
        return Ok(trajectory.z0().clone());
    }
    ddim_sample(backend, trajectory.z_t(), &trajectory.prompt_ids, &opts, None)
}

const TRAJ_MAGIC: &[u8] = b"MDETRAJ1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajHeader {
    prompt: String,
    prompt_ids: Vec<TokenId>,
    steps: usize,
    timesteps: Vec<usize>,
    backend_digest: String,
    latent_shape: [usize; 3],
    null_shape: Option<Vec<usize>>,
}

impl<T: Scalar> InversionTrajectory<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = TrajHeader {
            prompt: self.prompt.clone(),
            prompt_ids: self.prompt_ids.clone(),
            steps: self.steps(),
            timesteps: self.timesteps.clone(),
            backend_digest: self.backend_digest.clone(),
            latent_shape: self.z0().shape(),
            null_shape: self.null_embeddings.as_ref().and_then(|v| v.first()).map(|t| t.shape().to_vec()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(TRAJ_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let blobs =
            self.latents.iter().map(|l| l.data()).chain(self.null_embeddings.iter().flatten().map(|t| t.data()));
        for blob in blobs {
            for v in blob {
                out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| MdeError::Checkpoint(format!("trajectory: {m}"));
        if !bytes.starts_with(TRAJ_MAGIC) {
            return Err(bad("bad magic"));
        }
        let at = TRAJ_MAGIC.len();
        let len =
            u64::from_le_bytes(bytes.get(at..at + 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        let header: TrajHeader =
            serde_json::from_slice(bytes.get(at + 8..at + 8 + len).ok_or_else(|| bad("truncated"))?)?;
        let mut floats =
            bytes[at + 8 + len..].chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64));
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let data: Vec<T> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated blobs"));
            }
            Ok(Tensor::from_vec(shape, data)?)
        };
        let mut latents = Vec::with_capacity(header.steps + 1);
        for &t in &header.timesteps {
            latents.push(LatentGrid::new(take(&header.latent_shape)?, t)?);
        }
        let null_embeddings = match &header.null_shape {
            Some(shape) => Some((0..header.steps).map(|_| take(shape)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(Self {
            latents,
            timesteps: header.timesteps,
            null_embeddings,
            prompt: header.prompt,
            prompt_ids: header.prompt_ids,
            backend_digest: header.backend_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}
