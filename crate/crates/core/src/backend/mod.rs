//! Denoiser backends. The toy backend is a small U-Net trained from scratch
//! on synthetic shape scenes; any backend exposing the same surface can
//! drive inversion and editing.

pub mod checkpoint;
pub mod sampler;
pub mod scenes;
pub mod schedule;
pub mod train;
pub mod unet;

use std::sync::Arc;

use mde_autograd::{ColumnOverride, Graph, Scalar, Tensor, Var};

use crate::error::{MdeError, Result};
use crate::image::Image;
use crate::tokens::{TokenId, Vocabulary};
use crate::types::{AttentionStack, LatentGrid};

pub use schedule::NoiseSchedule;
pub use unet::{ToyConfig, ToyDenoiser};

static PRETRAINED: &[u8] = include_bytes!("../../assets/toy.ckpt");

/// The bundled toy checkpoint, trained on the default synthetic corpus.
pub fn pretrained<T: Scalar>() -> Result<ToyDenoiser<T>> {
    checkpoint::from_bytes(PRETRAINED)
}

/// One cross-attention site of a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayerInfo {
    pub layer: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
}

/// Graph handles produced by one denoiser call.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Var,
    /// Per attention layer, probabilities `[1, heads, h*w, tokens]` as used.
    pub probs: Vec<Var>,
}

/// Evaluated noise estimate with the attention it used.
#[derive(Debug, Clone)]
pub struct NoisePrediction<T: Scalar> {
    pub eps: Tensor<T>,
    pub attention: AttentionStack<T>,
}

/// How cross-attention probabilities are altered during a forward pass.
#[derive(Debug, Clone, Default)]
pub enum AttentionControl<T: Scalar> {
    #[default]
    None,
    /// Per layer, overwrite target columns with columns of a recorded map.
    Inject { sources: Vec<Arc<Tensor<T>>>, pairs: Vec<(usize, usize)> },
}

impl<T: Scalar> AttentionControl<T> {
    /// Builds an injection from a recorded stack and `(source, target)` pairs.
    pub fn inject_from(stack: &AttentionStack<T>, shared: &[(usize, usize)]) -> Result<Self> {
        let sources = stack.layers().into_iter().map(|l| stack.layer_tensor(l).map(Arc::new)).collect::<Result<_>>()?;
        Ok(Self::Inject { sources, pairs: shared.iter().map(|&(s, t)| (t, s)).collect() })
    }

    pub(crate) fn overrides(&self, layers: usize) -> Result<Vec<Option<ColumnOverride<T>>>> {
        match self {
            Self::None => Ok(vec![None; layers]),
            Self::Inject { sources, pairs } => {
                if sources.len() != layers {
                    return Err(MdeError::ShapeMismatch(format!(
                        "injection carries {} layers, backend has {layers}",
                        sources.len()
                    )));
                }
                Ok(sources
                    .iter()
                    .map(|s| Some(ColumnOverride { pairs: pairs.clone(), source: Arc::clone(s) }))
                    .collect())
            }
        }
    }
}

/// `ε_θ` with its text encoder `τ_θ`, codec and noise schedule.
pub trait DenoiserBackend<T: Scalar>: Send + Sync {
    fn latent_shape(&self) -> [usize; 3];

    /// Token positions per encoded prompt (prompts are padded with EOS).
    fn context_len(&self) -> usize;

    fn vocabulary(&self) -> &Vocabulary;

    fn schedule(&self) -> &NoiseSchedule;

    fn attention_layers(&self) -> Vec<AttentionLayerInfo>;

    /// Embedding sequence `[context_len, dim]` for padded token ids.
    fn text_encode(&self, ids: &[TokenId]) -> Result<Tensor<T>>;

    fn encode(&self, image: &Image) -> Result<LatentGrid<T>>;

    fn decode(&self, z: &LatentGrid<T>) -> Image;

    /// Records one denoiser call on `g`. `z` is `[1, c, h, w]` and `ctx` is
    /// `[1, context_len, dim]`; gradients flow to whichever inputs require them.
    fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        t: usize,
        ctx: Var,
        control: &AttentionControl<T>,
    ) -> Result<DenoiserOutput>;

    /// Digest of all weights; unchanged by inference.
    fn parameter_digest(&self) -> String;

    fn predict_noise(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        ctx: &Tensor<T>,
        control: &AttentionControl<T>,
    ) -> Result<NoisePrediction<T>> {
        let mut g = Graph::new();
        let zv = g.leaf(z.batched(), false);
        let cv = g.leaf(batch_context(ctx)?, false);
        let out = self.forward(&mut g, zv, t, cv, control)?;
        let eps = g.value(out.eps).clone().reshape(&z.shape())?;
        let attention = self.stack_from(&g, &out)?;
        Ok(NoisePrediction { eps, attention })
    }

    /// Assembles the recorded attention of a forward into a stack.
    fn stack_from(&self, g: &Graph<T>, out: &DenoiserOutput) -> Result<AttentionStack<T>> {
        let infos = self.attention_layers();
        let layers: Vec<_> = infos
            .iter()
            .zip(&out.probs)
            .map(|(info, &p)| (info.layer, (info.height, info.width), g.value(p)))
            .collect();
        AttentionStack::from_layers(&layers)
    }

    fn tokenize_padded(&self, prompt: &str) -> Result<Vec<TokenId>> {
        self.vocabulary().tokenize_padded(prompt, self.context_len())
    }
}

/// `[l, d]` to `[1, l, d]`.
pub fn batch_context<T: Scalar>(ctx: &Tensor<T>) -> Result<Tensor<T>> {
    let s = ctx.shape().to_vec();
    if s.len() != 2 {
        return Err(MdeError::ShapeMismatch(format!("context {s:?}")));
    }
    Ok(ctx.clone().reshape(&[1, s[0], s[1]])?)
}
