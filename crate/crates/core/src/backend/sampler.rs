use mde_autograd::{Scalar, Tensor};

use super::{AttentionControl, DenoiserBackend};
use crate::attention::{AttentionRecorder, Branch};
use crate::error::{MdeError, Result};
use crate::tokens::TokenId;
use crate::types::LatentGrid;

/// Unconditional embeddings used for classifier-free guidance.
#[derive(Debug, Clone)]
pub enum NullSchedule<T: Scalar> {
    /// Encoding of the empty prompt at every step.
    Default,
    /// One embedding per sampling step, ordered from `z_T` down to `z_0`.
    PerStep(Vec<Tensor<T>>),
}

impl<T: Scalar> NullSchedule<T> {
    /// Embedding for sampling step `k` (`k = 0` is the first, noisiest step).
    pub fn at(&self, k: usize, default: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Default => Ok(default.clone()),
            Self::PerStep(v) => {
                v.get(k).cloned().ok_or_else(|| MdeError::InvalidValue(format!("no null embedding for step {k}")))
            }
        }
    }
}

/// Encoding of the empty prompt.
pub fn null_context<T: Scalar>(backend: &dyn DenoiserBackend<T>) -> Result<Tensor<T>> {
    let ids = backend.tokenize_padded("")?;
    backend.text_encode(&ids)
}

/// `ε_u + w (ε_c − ε_u)`; `w = 1` skips the unconditional pass.
pub fn guided_noise<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    z: &LatentGrid<T>,
    t: usize,
    cond: &Tensor<T>,
    null: &Tensor<T>,
    guidance_scale: f64,
    control: &AttentionControl<T>,
) -> Result<(Tensor<T>, crate::types::AttentionStack<T>)> {
    let c = backend.predict_noise(z, t, cond, control)?;
    if guidance_scale == 1.0 {
        return Ok((c.eps, c.attention));
    }
    let u = backend.predict_noise(z, t, null, &AttentionControl::None)?;
    let w = T::lit(guidance_scale);
    let eps = u.eps.zip_map(&c.eps, |eu, ec| eu + w * (ec - eu))?;
    Ok((eps, c.attention))
}

#[derive(Debug, Clone)]
pub struct SampleOptions<T: Scalar> {
    pub steps: usize,
    pub guidance_scale: f64,
    pub null: NullSchedule<T>,
}

impl<T: Scalar> Default for SampleOptions<T> {
    fn default() -> Self {
        Self { steps: 50, guidance_scale: 3.0, null: NullSchedule::Default }
    }
}

/// Deterministic DDIM (η = 0) from `z_T` to `z_0` under padded prompt `ids`.
/// When a recorder is given, the conditional pass of every step is recorded.
pub fn ddim_sample<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    z_t: &LatentGrid<T>,
    ids: &[TokenId],
    opts: &SampleOptions<T>,
    mut recorder: Option<&mut AttentionRecorder<T>>,
) -> Result<LatentGrid<T>> {
    if opts.steps == 0 {
        return Err(MdeError::InvalidValue("sampling needs at least one step".into()));
    }
    let schedule = backend.schedule();
    let ts = schedule.ddim_timesteps(opts.steps);
    let cond = backend.text_encode(ids)?;
    let default_null = null_context(backend)?;
    let mut z = z_t.clone().with_timestep(ts[opts.steps]);
    for (k, i) in (1..=opts.steps).rev().enumerate() {
        let (t, s) = (ts[i], ts[i - 1]);
        let null = opts.null.at(k, &default_null)?;
        let (eps, stack) = guided_noise(backend, &z, t, &cond, &null, opts.guidance_scale, &AttentionControl::None)?;
        if let Some(r) = recorder.as_deref_mut() {
            r.record(Branch::Reconstruction, k, t, stack);
        }
        z = LatentGrid::new(schedule.ddim_step(z.tensor(), &eps, t, s), s)?;
    }
    Ok(z)
}
