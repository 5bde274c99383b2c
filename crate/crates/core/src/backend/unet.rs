//! Small text-conditioned U-Net denoiser with cross-attention at 16×16 and 8×8.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use mde_autograd::params::ParamVars;
use mde_autograd::{ColumnOverride, Graph, ParamStore, Scalar, Tensor, Var};

use super::{AttentionControl, AttentionLayerInfo, DenoiserBackend, DenoiserOutput, NoiseSchedule};
use crate::error::{MdeError, Result};
use crate::image::Image;
use crate::tokens::{TokenId, Vocabulary};
use crate::types::LatentGrid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub text_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub context_len: usize,
    pub groups: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            widths: [16, 32, 64],
            text_dim: 64,
            heads: 2,
            head_dim: 16,
            time_dim: 64,
            context_len: 12,
            groups: 4,
        }
    }
}

const SINUSOID_DIM: usize = 32;

/// Cross-attention sites in forward order: `(name, width index, downsampling)`.
const ATTN_SITES: [(&str, usize, usize); 3] = [("attn0", 1, 2), ("attn1", 2, 4), ("attn2", 1, 2)];

/// The toy denoiser `ε_θ(z_t, t, τ(y))` with its text encoder and codec.
#[derive(Debug, Clone)]
pub struct ToyDenoiser<T: Scalar> {
    pub config: ToyConfig,
    pub params: ParamStore<T>,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        self.store.insert(name, Tensor::from_vec(shape, data).unwrap());
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        self.store.insert(name, Tensor::from_vec(shape, data).unwrap());
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, T::lit(v)));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[cout, cin, k, k], bound);
        self.uniform(&format!("{name}.b"), &[cout], bound);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let bound = 1.0 / (din as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[dout, din], bound);
        self.uniform(&format!("{name}.b"), &[dout], bound);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.constant(&format!("{name}.g"), &[c], 1.0);
        self.constant(&format!("{name}.b"), &[c], 0.0);
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) {
        self.norm(&format!("{name}.n1"), cin);
        self.conv(&format!("{name}.c1"), cin, cout, 3);
        self.linear(&format!("{name}.t"), tdim, cout);
        self.norm(&format!("{name}.n2"), cout);
        self.conv(&format!("{name}.c2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }

    fn attn(&mut self, name: &str, c: usize, text: usize, inner: usize) {
        self.norm(&format!("{name}.n"), c);
        self.linear(&format!("{name}.q"), c, inner);
        self.linear(&format!("{name}.k"), text, inner);
        self.linear(&format!("{name}.v"), text, inner);
        self.linear(&format!("{name}.o"), inner, c);
    }
}

/// Residual blocks in forward order: `(name, in width, out width)`.
fn res_blocks(w: [usize; 3]) -> [(&'static str, usize, usize); 6] {
    [
        ("r1", w[0], w[0]),
        ("r2", w[1], w[1]),
        ("r3", w[2], w[2]),
        ("r4", w[2], w[2]),
        ("r5", w[2] + w[1], w[1]),
        ("r6", w[1] + w[0], w[0]),
    ]
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(config: ToyConfig, vocab: Vocabulary, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let w = config.widths;
        let inner = config.heads * config.head_dim;
        b.normal("tok_emb", &[vocab.len(), config.text_dim], 1.0);
        b.normal("pos_emb", &[config.context_len, config.text_dim], 0.2);
        b.linear("time1", SINUSOID_DIM, config.time_dim);
        b.linear("time2", config.time_dim, config.time_dim);
        b.conv("conv_in", config.in_channels, w[0], 3);
        b.conv("down1", w[0], w[1], 3);
        b.conv("down2", w[1], w[2], 3);
        for (name, cin, cout) in res_blocks(w) {
            b.res(name, cin, cout, config.time_dim);
        }
        for (name, wi, _) in ATTN_SITES {
            b.attn(name, w[wi], config.text_dim, inner);
        }
        b.norm("out_norm", w[0]);
        b.conv("conv_out", w[0], config.in_channels, 3);
        Self { config, params, vocab, schedule }
    }

    pub fn cast<U: Scalar>(&self) -> ToyDenoiser<U> {
        ToyDenoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab: self.vocab.clone(),
            schedule: self.schedule.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Sinusoidal features `[n, 32]` of integer timesteps.
    pub fn timestep_features(ts: &[usize]) -> Tensor<T> {
        let half = SINUSOID_DIM / 2;
        let mut data = Vec::with_capacity(ts.len() * SINUSOID_DIM);
        for &t in ts {
            let t = t as f64;
            let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp() * t).collect();
            data.extend(freqs.iter().map(|f| T::lit(f.sin())));
            data.extend(freqs.iter().map(|f| T::lit(f.cos())));
        }
        Tensor::from_vec(&[ts.len(), SINUSOID_DIM], data).unwrap()
    }

    /// Token plus position embeddings for `n` sequences of `context_len` ids.
    pub fn encode_text_graph(&self, g: &mut Graph<T>, pv: &ParamVars, ids: &[TokenId], n: usize) -> Result<Var> {
        if ids.len() != n * self.config.context_len {
            return Err(MdeError::ShapeMismatch(format!(
                "{} ids for {n} sequences of {}",
                ids.len(),
                self.config.context_len
            )));
        }
        let tok = g.gather(self.var(pv, "tok_emb"), ids, n)?;
        Ok(g.add_broadcast(tok, self.var(pv, "pos_emb"))?)
    }

    fn var(&self, pv: &ParamVars, name: &str) -> Var {
        pv.get(self.params.id(name).expect("parameter registered at construction"))
    }

    fn conv(&self, g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(pv, &format!("{name}.w"));
        let b = self.var(pv, &format!("{name}.b"));
        let k = g.value(w).dim(2);
        Ok(g.conv2d(x, w, b, stride, k / 2)?)
    }

    fn linear(&self, g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
        Ok(g.linear(x, self.var(pv, &format!("{name}.w")), self.var(pv, &format!("{name}.b")))?)
    }

    fn norm(&self, g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(pv, &format!("{name}.g"));
        let beta = self.var(pv, &format!("{name}.b"));
        Ok(g.group_norm(x, gamma, beta, self.config.groups)?)
    }

    fn res(&self, g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(g, pv, &format!("{name}.n1"), x)?;
        let h = g.silu(h);
        let h = self.conv(g, pv, &format!("{name}.c1"), h, 1)?;
        let tproj = self.linear(g, pv, &format!("{name}.t"), temb)?;
        let h = g.add_channel(h, tproj)?;
        let h = self.norm(g, pv, &format!("{name}.n2"), h)?;
        let h = g.silu(h);
        let h = self.conv(g, pv, &format!("{name}.c2"), h, 1)?;
        let skip = if self.params.id(&format!("{name}.skip.w")).is_ok() {
            self.conv(g, pv, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        Ok(g.add(h, skip)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        name: &str,
        x: Var,
        ctx: Var,
        over: Option<ColumnOverride<T>>,
    ) -> Result<(Var, Var)> {
        let s = g.value(x).shape().to_vec();
        let h = self.norm(g, pv, &format!("{name}.n"), x)?;
        let tok = g.to_tokens(h)?;
        let q = self.linear(g, pv, &format!("{name}.q"), tok)?;
        let k = self.linear(g, pv, &format!("{name}.k"), ctx)?;
        let v = self.linear(g, pv, &format!("{name}.v"), ctx)?;
        let p = g.attn_probs(q, k, self.config.heads, over)?;
        let a = g.attn_mix(p, v, self.config.heads)?;
        let o = self.linear(g, pv, &format!("{name}.o"), a)?;
        let o = g.from_tokens(o, s[2], s[3])?;
        Ok((g.add(x, o)?, p))
    }

    /// Full network on a batch `z: [n, c, h, w]`, one timestep per sample.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z: Var,
        ts: &[usize],
        ctx: Var,
        control: &AttentionControl<T>,
    ) -> Result<DenoiserOutput> {
        let feats = g.leaf(Self::timestep_features(ts), false);
        let temb = self.linear(g, pv, "time1", feats)?;
        let temb = g.silu(temb);
        let temb = self.linear(g, pv, "time2", temb)?;
        let temb = g.silu(temb);

        let mut probs = Vec::with_capacity(ATTN_SITES.len());
        let mut overrides = control.overrides(ATTN_SITES.len())?.into_iter();

        let h = self.conv(g, pv, "conv_in", z, 1)?;
        let s1 = self.res(g, pv, "r1", h, temb)?;
        let h = self.conv(g, pv, "down1", s1, 2)?;
        let h = self.res(g, pv, "r2", h, temb)?;
        let (s2, p) = self.attn(g, pv, "attn0", h, ctx, overrides.next().flatten())?;
        probs.push(p);
        let h = self.conv(g, pv, "down2", s2, 2)?;
        let h = self.res(g, pv, "r3", h, temb)?;
        let (h, p) = self.attn(g, pv, "attn1", h, ctx, overrides.next().flatten())?;
        probs.push(p);
        let h = self.res(g, pv, "r4", h, temb)?;
        let h = g.upsample2x(h)?;
        let h = g.concat_channels(h, s2)?;
        let h = self.res(g, pv, "r5", h, temb)?;
        let (h, p) = self.attn(g, pv, "attn2", h, ctx, overrides.next().flatten())?;
        probs.push(p);
        let h = g.upsample2x(h)?;
        let h = g.concat_channels(h, s1)?;
        let h = self.res(g, pv, "r6", h, temb)?;
        let h = self.norm(g, pv, "out_norm", h)?;
        let h = g.silu(h);
        let eps = self.conv(g, pv, "conv_out", h, 1)?;
        Ok(DenoiserOutput { eps, probs })
    }
}

impl<T: Scalar> DenoiserBackend<T> for ToyDenoiser<T> {
    fn latent_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.image_size, self.config.image_size]
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn attention_layers(&self) -> Vec<AttentionLayerInfo> {
        ATTN_SITES
            .iter()
            .enumerate()
            .map(|(layer, &(_, _, down))| AttentionLayerInfo {
                layer,
                heads: self.config.heads,
                height: self.config.image_size / down,
                width: self.config.image_size / down,
            })
            .collect()
    }

    fn text_encode(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let ctx = self.encode_text_graph(&mut g, &pv, ids, 1)?;
        Ok(g.value(ctx).clone().reshape(&[self.config.context_len, self.config.text_dim])?)
    }

    /// Fixed normalization `x ↦ 2x − 1`; no learned weights.
    fn encode(&self, image: &Image) -> Result<LatentGrid<T>> {
        let [c, h, w] = self.latent_shape();
        if image.height != h || image.width != w {
            return Err(MdeError::ShapeMismatch(format!("image {}x{} vs latent {h}x{w}", image.height, image.width)));
        }
        let data = image.data().iter().map(|&v| T::lit(2.0 * v as f64 - 1.0)).collect();
        LatentGrid::new(Tensor::from_vec(&[c, h, w], data)?, 0)
    }

    fn decode(&self, z: &LatentGrid<T>) -> Image {
        let [_, h, w] = z.shape();
        let data = z.data().iter().map(|v| ((v.to_f64().unwrap() + 1.0) / 2.0).clamp(0.0, 1.0) as f32).collect();
        Image::new(h, w, data).expect("latent has three channels")
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        t: usize,
        ctx: Var,
        control: &AttentionControl<T>,
    ) -> Result<DenoiserOutput> {
        let pv = self.params.register(g, false);
        self.forward_batch(g, &pv, z, &[t], ctx, control)
    }

    fn parameter_digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.params.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
            }
        }
        crate::digest(&bytes)
    }
}

/// Shared handle used across pipelines and threads.
pub type SharedBackend<T> = Arc<dyn DenoiserBackend<T>>;
