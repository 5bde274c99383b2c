//! Dual-branch editing: a reconstruction branch under the source prompt and an
//! editing branch under the target prompt that receives the reconstruction
//! attention for shared tokens and is steered by the masked latent update
//! during the first denoising steps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mde_autograd::{Graph, Scalar, Tensor};

use crate::attention::{dump_step, implicit_segmentation, segmentation_adjoint, AttentionRecorder, Branch};
use crate::backend::sampler::null_context;
use crate::backend::{batch_context, AttentionControl, DenoiserBackend};
use crate::error::{MdeError, Result};
use crate::image::{load_mask_png, Image};
use crate::inversion::{ddim_invert, nti_optimize, InversionTrajectory, NtiConfig};
use crate::losses::{ccl, oal_object, LossBreakdown, LossLogEntry};
use crate::tokens::{align_tokens, TokenAlignment, TokenId, Vocabulary};
use crate::types::{AttentionStack, EditSpec, GuidanceConfig, LatentGrid, Mask, RegionMask};

/// `z ← M ⊙ (z − δ·g) + (1 − M) ⊙ z` with `M` broadcast over channels.
pub fn masked_update<T: Scalar>(z: &[T], grad: &[T], mask: &[T], delta: T) -> Vec<T> {
    let plane = mask.len();
    z.iter()
        .zip(grad)
        .enumerate()
        .map(|(k, (&zk, &gk))| {
            let m = mask[k % plane];
            m * (zk - delta * gk) + (T::one() - m) * zk
        })
        .collect()
}

/// Switches used by ablations and wiring checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    /// Replace shared-token attention of the editing branch.
    pub inject: bool,
    /// Run the latent optimization inside the window.
    pub optimize: bool,
    pub nti: NtiConfig,
    /// Per-step attention heatmaps are written here when set.
    pub debug_dir: Option<PathBuf>,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self { inject: true, optimize: true, nti: NtiConfig::default(), debug_dir: None }
    }
}

/// One invocation of the latent optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeCall {
    pub step: usize,
    pub timestep: usize,
    pub iter: usize,
    pub losses: LossBreakdown,
    /// Every coordinate outside the edit union kept its exact value.
    pub background_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditWarning {
    pub kind: String,
    pub label: String,
    pub detail: String,
}

struct PreparedEdit {
    tokens: Vec<usize>,
    mask: Mask,
}

/// State of one dual-branch edit. Single-threaded; distinct sessions are
/// independent.
pub struct EditSession<'a, T: Scalar> {
    backend: &'a dyn DenoiserBackend<T>,
    pub trajectory: InversionTrajectory<T>,
    pub alignment: TokenAlignment,
    pub edits: Vec<EditSpec>,
    pub union: RegionMask,
    pub config: GuidanceConfig,
    pub options: EditOptions,
    pub recorder: AttentionRecorder<T>,
    pub calls: Vec<OptimizeCall>,
    pub loss_log: Vec<LossLogEntry>,
    pub warnings: Vec<EditWarning>,
    prepared: Vec<PreparedEdit>,
    /// Union mask on the latent grid as 0/1 values.
    latent_mask: Vec<T>,
    mask_shape: (usize, usize),
    tgt_ids: Vec<TokenId>,
    cond_src: Tensor<T>,
    cond_tgt: Tensor<T>,
    default_null: Tensor<T>,
    /// Shared content tokens as `(source, target)` positions.
    common: Vec<(usize, usize)>,
}

impl<'a, T: Scalar> EditSession<'a, T> {
    pub fn new(
        backend: &'a dyn DenoiserBackend<T>,
        trajectory: InversionTrajectory<T>,
        target_prompt: &str,
        edits: Vec<EditSpec>,
        config: GuidanceConfig,
        options: EditOptions,
    ) -> Result<Self> {
        config.validate()?;
        if trajectory.steps() != config.total_steps {
            return Err(MdeError::InvalidConfig(format!(
                "trajectory has {} steps, configuration asks for {}",
                trajectory.steps(),
                config.total_steps
            )));
        }
        let vocab = backend.vocabulary();
        let src = vocab.tokenize(&trajectory.prompt)?;
        let tgt = vocab.tokenize(target_prompt)?;
        let alignment = align_tokens(&src, &tgt)?;
        for e in &edits {
            e.validate(&alignment)?;
        }
        let [_, lh, lw] = backend.latent_shape();
        let mask_shape = edits.first().map(|e| (e.mask.height, e.mask.width)).unwrap_or((lh, lw));
        if edits.iter().any(|e| (e.mask.height, e.mask.width) != mask_shape) {
            return Err(MdeError::ShapeMismatch("edit masks differ in resolution".into()));
        }
        let union = if edits.is_empty() {
            RegionMask { mask: Mask::empty(mask_shape.0, mask_shape.1), role: crate::types::MaskRole::Union }
        } else {
            RegionMask::union_of(&edits.iter().map(|e| &e.mask).collect::<Vec<_>>())?
        };
        let latent_mask = union.mask.resize_nearest(lh, lw).to_values();
        let prepared = edits
            .iter()
            .map(|e| PreparedEdit { tokens: e.target_token_indices.clone(), mask: e.mask.clone() })
            .collect();
        let tgt_ids = backend.tokenize_padded(target_prompt)?;
        let cond_src = backend.text_encode(&trajectory.prompt_ids)?;
        let cond_tgt = backend.text_encode(&tgt_ids)?;
        let default_null = null_context(backend)?;
        let common = alignment.shared_content().collect();
        Ok(Self {
            backend,
            trajectory,
            alignment,
            edits,
            union,
            config,
            options,
            recorder: AttentionRecorder::new(),
            calls: Vec::new(),
            loss_log: Vec::new(),
            warnings: Vec::new(),
            prepared,
            latent_mask,
            mask_shape,
            tgt_ids,
            cond_src,
            cond_tgt,
            default_null,
            common,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.total_steps
    }

    /// Timestep pair `(t, t_prev)` of sampling step `k`.
    pub fn timesteps(&self, k: usize) -> (usize, usize) {
        let i = self.steps() - k;
        (self.trajectory.timesteps[i], self.trajectory.timesteps[i - 1])
    }

    fn null_at(&self, k: usize) -> Result<Tensor<T>> {
        self.trajectory.null_schedule().at(k, &self.default_null)
    }

    fn injection(&self, recon: &AttentionStack<T>) -> Result<AttentionControl<T>> {
        if !self.options.inject {
            return Ok(AttentionControl::None);
        }
        let padded = self.alignment.padded(self.backend.context_len())?;
        AttentionControl::inject_from(recon, &padded.shared)
    }

    /// Losses of the current editing-branch attention and their gradient with
    /// respect to every map of `stack`.
    fn losses(
        &self,
        stack: &AttentionStack<T>,
        recon: &AttentionStack<T>,
    ) -> Result<(LossBreakdown, AttentionStack<T>)> {
        let cfg = &self.config;
        let mut grads: Vec<Tensor<T>> = stack.maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
        let commons: Vec<Vec<T>> = self
            .common
            .iter()
            .map(|&(s, _)| implicit_segmentation(recon, &[s], self.mask_shape).map(|seg| seg.map))
            .collect::<Result<_>>()?;
        let common_refs: Vec<&[T]> = commons.iter().map(Vec::as_slice).collect();
        let mut b = LossBreakdown { oal: 0.0, ccl: 0.0, total: 0.0, per_object_oal: vec![], per_object_ccl: vec![] };
        for e in &self.prepared {
            if cfg.lambda1 > 0.0 {
                let seg = implicit_segmentation(stack, &e.tokens, self.mask_shape)?;
                let (v, g) = oal_object(&seg.map, &e.mask, e.tokens[0])?;
                let g: Vec<T> = g.iter().map(|&x| x * T::lit(cfg.lambda1)).collect();
                segmentation_adjoint(stack, &e.tokens, &g, self.mask_shape, &mut grads);
                b.per_object_oal.push(v.to_f64().unwrap());
            }
            if cfg.lambda2 > 0.0 {
                let maps: Vec<Vec<T>> = e
                    .tokens
                    .iter()
                    .map(|&tok| implicit_segmentation(stack, &[tok], self.mask_shape).map(|s| s.map))
                    .collect::<Result<_>>()?;
                let refs: Vec<&[T]> = maps.iter().map(Vec::as_slice).collect();
                let (v, g) = ccl(&refs, &common_refs, &e.mask, cfg.ccl_reduction)?;
                let ge: Vec<T> = g.edit.iter().map(|&x| x * T::lit(cfg.lambda2)).collect();
                for &tok in &e.tokens {
                    segmentation_adjoint(stack, &[tok], &ge, self.mask_shape, &mut grads);
                }
                b.per_object_ccl.push(v.to_f64().unwrap());
            }
        }
        b.oal = b.per_object_oal.iter().fold(0.0, |a, v| a + v);
        b.ccl = b.per_object_ccl.iter().fold(0.0, |a, v| a + v);
        b.total = cfg.lambda1 * b.oal + cfg.lambda2 * b.ccl;
        let grad_stack = AttentionStack::new(grads, stack.layer_ids.clone(), stack.head_ids.clone())?;
        Ok((b, grad_stack))
    }

    /// Total loss at `z` and its gradient, differentiated through one
    /// editing-branch forward.
    pub fn loss_and_grad(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        recon: &AttentionStack<T>,
    ) -> Result<(LossBreakdown, Tensor<T>)> {
        let control = self.injection(recon)?;
        let mut g = Graph::new();
        let zv = g.leaf(z.batched(), true);
        let cv = g.leaf(batch_context(&self.cond_tgt)?, false);
        let out = self.backend.forward(&mut g, zv, t, cv, &control)?;
        let stack = self.backend.stack_from(&g, &out)?;
        let (losses, grad_stack) = self.losses(&stack, recon)?;
        let seeds = grad_stack
            .layers()
            .into_iter()
            .zip(&out.probs)
            .map(|(layer, &p)| Ok((p, grad_stack.layer_tensor(layer)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = g.backward(seeds)?;
        let grad = match grads.take(zv) {
            Some(gz) => gz.reshape(&z.shape())?,
            None => Tensor::zeros(&z.shape()),
        };
        Ok((losses, grad))
    }

    /// Masked latent optimization at sampling step `k`. Only valid inside the
    /// optimization window.
    pub fn mde_optimize(&mut self, k: usize, z: LatentGrid<T>, recon: &AttentionStack<T>) -> Result<LatentGrid<T>> {
        if k >= self.config.opt_window {
            return Err(MdeError::InvalidValue(format!(
                "step {k} is outside the optimization window of {}",
                self.config.opt_window
            )));
        }
        let (t, _) = self.timesteps(k);
        let delta = T::lit(self.config.delta);
        let mut z = z;
        for iter in 0..self.config.inner_iters {
            let (losses, grad) = self.loss_and_grad(&z, t, recon)?;
            if !grad.all_finite() || !losses.total.is_finite() {
                return Err(MdeError::NonFiniteGradient { timestep: t, iter });
            }
            let updated = masked_update(z.data(), grad.data(), &self.latent_mask, delta);
            let plane = self.latent_mask.len();
            let background_unchanged = z
                .data()
                .iter()
                .zip(&updated)
                .enumerate()
                .all(|(i, (a, b))| self.latent_mask[i % plane] != T::zero() || a.to_bits_eq(b));
            self.loss_log.push(LossLogEntry::new(k, iter, &losses));
            self.calls.push(OptimizeCall { step: k, timestep: t, iter, losses, background_unchanged });
            z = LatentGrid::new(Tensor::from_vec(&z.shape(), updated)?, t)?;
        }
        Ok(z)
    }

    fn guided(
        &self,
        z: &LatentGrid<T>,
        t: usize,
        cond: &Tensor<T>,
        null: &Tensor<T>,
        control: &AttentionControl<T>,
    ) -> Result<(Tensor<T>, AttentionStack<T>)> {
        crate::backend::sampler::guided_noise(self.backend, z, t, cond, null, self.config.guidance_scale, control)
    }

    /// Advances both branches by one DDIM step from sampling step `k`.
    pub fn dual_branch_step(
        &mut self,
        k: usize,
        z: &LatentGrid<T>,
        z_edit: &LatentGrid<T>,
    ) -> Result<(LatentGrid<T>, LatentGrid<T>)> {
        let (t, s) = self.timesteps(k);
        let null = self.null_at(k)?;
        let (eps_r, recon) = self.guided(z, t, &self.cond_src, &null, &AttentionControl::None)?;
        let mut z_edit = z_edit.clone();
        if self.options.optimize && !self.prepared.is_empty() && k < self.config.opt_window {
            z_edit = self.mde_optimize(k, z_edit, &recon)?;
        }
        let control = self.injection(&recon)?;
        let (eps_e, edited) = self.guided(&z_edit, t, &self.cond_tgt, &null, &control)?;
        if let Some(dir) = &self.options.debug_dir {
            dump_step(&dir.join("attn"), k, &edited, &self.tgt_ids, self.backend.vocabulary(), self.mask_shape)?;
        }
        if k + 1 == self.config.opt_window {
            self.check_attention(&edited)?;
        }
        self.recorder.record(Branch::Reconstruction, k, t, recon);
        self.recorder.record(Branch::Editing, k, t, edited);
        let schedule = self.backend.schedule();
        let z_next = LatentGrid::new(schedule.ddim_step(z.tensor(), &eps_r, t, s), s)?;
        let e_next = LatentGrid::new(schedule.ddim_step(z_edit.tensor(), &eps_e, t, s), s)?;
        Ok((z_next, e_next))
    }

    /// Flags edit tokens whose attention inside their mask never rises above
    /// the uniform level.
    fn check_attention(&mut self, stack: &AttentionStack<T>) -> Result<()> {
        let floor = 1.0 / stack.n_tokens().max(1) as f64;
        for (e, spec) in self.prepared.iter().zip(&self.edits) {
            let seg = implicit_segmentation(stack, &e.tokens, self.mask_shape)?;
            let peak = seg
                .map
                .iter()
                .zip(e.mask.data())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.to_f64().unwrap())
                .fold(0.0, f64::max);
            if peak <= floor {
                log::warn!("edit `{}` barely attends inside its mask (peak {peak:.4})", spec.label);
                self.warnings.push(EditWarning {
                    kind: "UnmaskedEditToken".into(),
                    label: spec.label.clone(),
                    detail: format!("peak attention {peak:.4} inside mask, floor {floor:.4}"),
                });
            }
        }
        Ok(())
    }

    /// Runs all sampling steps from the shared `z_T`.
    pub fn run(mut self) -> Result<EditOutcome<T>> {
        let mut z = self.trajectory.z_t().clone();
        let mut z_edit = z.clone();
        for k in 0..self.steps() {
            let (a, b) = self.dual_branch_step(k, &z, &z_edit)?;
            z = a;
            z_edit = b;
        }
        Ok(EditOutcome {
            edited: self.backend.decode(&z_edit),
            reconstruction: self.backend.decode(&z),
            z_edit,
            z_recon: z,
            union: self.union.mask.clone(),
            calls: self.calls,
            loss_log: self.loss_log,
            warnings: self.warnings,
            recorder: self.recorder,
        })
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // NaN never reaches here (latents are checked finite), so equality is
        // bit equality up to the sign of zero
        self == other && self.is_sign_negative() == other.is_sign_negative()
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome<T: Scalar> {
    pub edited: Image,
    pub reconstruction: Image,
    pub z_edit: LatentGrid<T>,
    pub z_recon: LatentGrid<T>,
    pub union: Mask,
    pub calls: Vec<OptimizeCall>,
    pub loss_log: Vec<LossLogEntry>,
    pub warnings: Vec<EditWarning>,
    pub recorder: AttentionRecorder<T>,
}

/// Inverts `image` under `source_prompt` with null-text optimization.
pub fn invert<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    image: &Image,
    source_prompt: &str,
    config: &GuidanceConfig,
    nti: &NtiConfig,
) -> Result<InversionTrajectory<T>> {
    let traj = ddim_invert(backend, image, source_prompt, config.total_steps)?;
    let nti = NtiConfig { guidance_scale: config.guidance_scale, ..nti.clone() };
    Ok(nti_optimize(backend, &traj, &nti)?.0)
}

/// Inversion followed by the dual-branch edit.
pub fn edit<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    image: &Image,
    source_prompt: &str,
    target_prompt: &str,
    edits: Vec<EditSpec>,
    config: &GuidanceConfig,
    options: &EditOptions,
) -> Result<EditOutcome<T>> {
    let traj = invert(backend, image, source_prompt, config, &options.nti)?;
    EditSession::new(backend, traj, target_prompt, edits, config.clone(), options.clone())?.run()
}

/// Positions in `target_prompt` of the words in `phrase` that the alignment
/// classifies as new.
pub fn resolve_edit_tokens(
    vocab: &Vocabulary,
    source_prompt: &str,
    target_prompt: &str,
    phrase: &str,
) -> Result<Vec<usize>> {
    let src = vocab.tokenize(source_prompt)?;
    let tgt = vocab.tokenize(target_prompt)?;
    let alignment = align_tokens(&src, &tgt)?;
    let mut out = Vec::new();
    for word in phrase.split_whitespace() {
        let id = vocab.id(&word.to_lowercase()).ok_or_else(|| MdeError::UnknownWord(word.to_string()))?;
        let pos = (0..tgt.len())
            .find(|&i| tgt[i] == id && alignment.is_new(i) && !out.contains(&i))
            .ok_or_else(|| MdeError::InvalidValue(format!("`{word}` is not a new word of `{target_prompt}`")))?;
        out.push(pos);
    }
    Ok(out)
}

/// One edit entry of a session file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEntry {
    pub token: String,
    pub mask_path: PathBuf,
}

/// Session file consumed by the `edit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub source_prompt: String,
    pub target_prompt: String,
    pub edits: Vec<EditEntry>,
    #[serde(default = "defaults::lambda1")]
    pub lambda1: f64,
    #[serde(default = "defaults::lambda2")]
    pub lambda2: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::opt_window")]
    pub opt_window: usize,
    #[serde(default = "defaults::inner_iters")]
    pub inner_iters: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ccl_reduction: crate::types::CclReduction,
}

mod defaults {
    use crate::types::GuidanceConfig;

    pub fn lambda1() -> f64 {
        GuidanceConfig::default().lambda1
    }
    pub fn lambda2() -> f64 {
        GuidanceConfig::default().lambda2
    }
    pub fn delta() -> f64 {
        GuidanceConfig::default().delta
    }
    pub fn opt_window() -> usize {
        GuidanceConfig::default().opt_window
    }
    pub fn inner_iters() -> usize {
        GuidanceConfig::default().inner_iters
    }
    pub fn steps() -> usize {
        GuidanceConfig::default().total_steps
    }
}

impl SessionConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            delta: self.delta,
            opt_window: self.opt_window,
            inner_iters: self.inner_iters,
            total_steps: self.steps,
            ccl_reduction: self.ccl_reduction,
            ..GuidanceConfig::default()
        }
    }

    /// Loads every mask (relative paths resolve against `base`) and maps edit
    /// words to target positions.
    pub fn edit_specs(&self, vocab: &Vocabulary, base: &Path) -> Result<Vec<EditSpec>> {
        self.edits
            .iter()
            .map(|e| {
                let path = if e.mask_path.is_absolute() { e.mask_path.clone() } else { base.join(&e.mask_path) };
                let mask = load_mask_png(&path)?;
                let tokens = resolve_edit_tokens(vocab, &self.source_prompt, &self.target_prompt, &e.token)?;
                EditSpec::new(mask, tokens, e.token.clone())
            })
            .collect()
    }
}
