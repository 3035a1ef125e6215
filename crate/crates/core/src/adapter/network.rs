//! Denoiser architecture: a base network, a trainable copied control branch
//! whose outputs are injected through zero-initialized projections, and a
//! strided event encoder that brings raw stack tensors to the latent grid.

use ndarray::{concatenate, Array1, Array4, Axis};
use rand::Rng;

use crate::diffusion::{Denoiser, Latent};
use crate::{Error, Result};

use super::layers::{
    silu, silu_backward, step_features, Conv2d, EmbedAffine, ParamTensors, TemporalConv,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channels of the latent video and of the keyframe conditioning tensor.
    pub latent_channels: usize,
    /// Channels of the encoded event tensor fed to the control branch.
    pub event_channels: usize,
    /// Channels of the raw stack tensor fed to the event encoder.
    pub stack_channels: usize,
    /// Width of the hidden feature maps.
    pub hidden: usize,
    /// Number of residual blocks.
    pub blocks: usize,
    /// Step-embedding dimension (even).
    pub embed_dim: usize,
    /// Total spatial stride of the event encoder; a power of two.
    pub encoder_downsample: usize,
    /// Length of the noise schedule the network is trained against; used to
    /// normalize the step index for the embedding.
    pub n_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 1,
            event_channels: 8,
            stack_channels: 6,
            hidden: 16,
            blocks: 3,
            embed_dim: 8,
            encoder_downsample: 2,
            n_steps: 50,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("event_channels", self.event_channels),
            ("stack_channels", self.stack_channels),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("n_steps", self.n_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even and >= 2".into()));
        }
        if self.encoder_downsample == 0 || !self.encoder_downsample.is_power_of_two() {
            return Err(Error::Config(
                "encoder_downsample must be a power of two".into(),
            ));
        }
        Ok(())
    }
}

/// Residual block: spatial conv, step modulation, silu, temporal conv, silu,
/// skip connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub spatial: Conv2d,
    pub embed: EmbedAffine,
    pub temporal: TemporalConv,
}

pub struct BlockCache {
    x: Array4<f64>,
    u: Array4<f64>,
    u2: Array4<f64>,
    a: Array4<f64>,
    v: Array4<f64>,
}

impl Block {
    fn new<R: Rng>(c: usize, embed_dim: usize, rng: &mut R) -> Self {
        Block {
            spatial: Conv2d::new(c, c, 3, 1, 1, rng),
            embed: EmbedAffine::new(c, embed_dim, rng),
            temporal: TemporalConv::new(c, c, 3, rng),
        }
    }

    fn forward(&self, x: &Array4<f64>, phi: &Array1<f64>) -> (Array4<f64>, BlockCache) {
        let u = self.spatial.forward(x);
        let u2 = self.embed.forward(&u, phi);
        let a = silu(&u2);
        let v = self.temporal.forward(&a);
        let y = x + &silu(&v);
        (
            y,
            BlockCache {
                x: x.clone(),
                u,
                u2,
                a,
                v,
            },
        )
    }

    fn backward(
        &self,
        cache: &BlockCache,
        phi: &Array1<f64>,
        gy: &Array4<f64>,
        grad: &mut Block,
    ) -> Array4<f64> {
        let gv = silu_backward(&cache.v, gy);
        let ga = self.temporal.backward(&cache.a, &gv, &mut grad.temporal);
        let gu2 = silu_backward(&cache.u2, &ga);
        let gu = self.embed.backward(&cache.u, phi, &gu2, &mut grad.embed);
        let gx = self.spatial.backward(&cache.x, &gu, &mut grad.spatial);
        gy + &gx
    }
}

impl ParamTensors for Block {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.spatial.visit(&mut |n, s| f(&format!("spatial.{n}"), s));
        self.embed.visit(&mut |n, s| f(&format!("embed.{n}"), s));
        self.temporal.visit(&mut |n, s| f(&format!("temporal.{n}"), s));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.spatial.visit_mut(&mut |n, s| f(&format!("spatial.{n}"), s));
        self.embed.visit_mut(&mut |n, s| f(&format!("embed.{n}"), s));
        self.temporal.visit_mut(&mut |n, s| f(&format!("temporal.{n}"), s));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, shapes) in [
            ("spatial", self.spatial.named_shapes()),
            ("embed", self.embed.named_shapes()),
            ("temporal", self.temporal.named_shapes()),
        ] {
            out.extend(shapes.into_iter().map(|(n, s)| (format!("{prefix}.{n}"), s)));
        }
        out
    }
}

fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching non-channel dims")
        .as_standard_layout()
        .to_owned()
}

/// Noise-prediction network conditioned on the keyframe tensor and the step
/// index. Residual tensors, when given, are added after each block; a block's
/// input shape equals its output shape so any prefix of blocks is unaffected
/// by later injections.
#[derive(Debug, Clone)]
pub struct BaseDenoiser {
    pub cfg: DenoiserConfig,
    pub stem: Conv2d,
    pub blocks: Vec<Block>,
    pub head: Conv2d,
}

pub struct BaseCache {
    zcat: Array4<f64>,
    block_caches: Vec<BlockCache>,
    head_in: Array4<f64>,
    phi: Array1<f64>,
}

impl BaseDenoiser {
    pub fn new<R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden;
        Ok(BaseDenoiser {
            cfg: *cfg,
            stem: Conv2d::new(2 * cfg.latent_channels, c, 3, 1, 1, rng),
            blocks: (0..cfg.blocks).map(|_| Block::new(c, cfg.embed_dim, rng)).collect(),
            head: Conv2d::new(c, cfg.latent_channels, 3, 1, 1, rng),
        })
    }

    pub fn phi(&self, k: usize) -> Array1<f64> {
        step_features(k, self.cfg.n_steps, self.cfg.embed_dim)
    }

    pub fn forward(
        &self,
        z: &Latent,
        i_cond: &Latent,
        k: usize,
        residuals: Option<&[Array4<f64>]>,
    ) -> (Latent, BaseCache) {
        assert_eq!(z.dim(), i_cond.dim(), "latent and conditioning shapes differ");
        if let Some(r) = residuals {
            assert_eq!(r.len(), self.blocks.len(), "one residual per block");
        }
        let phi = self.phi(k);
        let zcat = concat_channels(z, i_cond);
        let mut h = self.stem.forward(&zcat);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (mut y, cache) = block.forward(&h, &phi);
            if let Some(r) = residuals {
                y += &r[b];
            }
            block_caches.push(cache);
            h = y;
        }
        let eps_hat = self.head.forward(&h);
        (
            eps_hat,
            BaseCache {
                zcat,
                block_caches,
                head_in: h,
                phi,
            },
        )
    }

    /// Backpropagate the output gradient; parameter gradients are accumulated
    /// only when `grad` is given (the base stays frozen during adaptation).
    /// Returns the gradient at each block's post-injection sum node, which is
    /// exactly the gradient with respect to an injected residual.
    pub fn backward(
        &self,
        cache: &BaseCache,
        g_eps: &Latent,
        mut grad: Option<&mut BaseDenoiser>,
    ) -> Vec<Array4<f64>> {
        let mut scratch = None;
        let g = match grad.as_deref_mut() {
            Some(g) => g,
            None => scratch.insert(super::layers::zeroed(self)),
        };
        let mut gh = self.head.backward(&cache.head_in, g_eps, &mut g.head);
        let nb = self.blocks.len();
        let mut g_res = vec![Array4::zeros((0, 0, 0, 0)); nb];
        for b in (0..nb).rev() {
            g_res[b] = gh.clone();
            gh = self.blocks[b].backward(&cache.block_caches[b], &cache.phi, &gh, &mut g.blocks[b]);
        }
        let _ = self.stem.backward(&cache.zcat, &gh, &mut g.stem);
        g_res
    }
}

impl ParamTensors for BaseDenoiser {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.stem.visit(&mut |n, s| f(&format!("stem.{n}"), s));
        for (b, block) in self.blocks.iter().enumerate() {
            block.visit(&mut |n, s| f(&format!("blocks.{b}.{n}"), s));
        }
        self.head.visit(&mut |n, s| f(&format!("head.{n}"), s));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.stem.visit_mut(&mut |n, s| f(&format!("stem.{n}"), s));
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&mut |n, s| f(&format!("blocks.{b}.{n}"), s));
        }
        self.head.visit_mut(&mut |n, s| f(&format!("head.{n}"), s));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .stem
            .named_shapes()
            .into_iter()
            .map(|(n, s)| (format!("stem.{n}"), s))
            .collect();
        for (b, block) in self.blocks.iter().enumerate() {
            out.extend(
                block
                    .named_shapes()
                    .into_iter()
                    .map(|(n, s)| (format!("blocks.{b}.{n}"), s)),
            );
        }
        out.extend(self.head.named_shapes().into_iter().map(|(n, s)| (format!("head.{n}"), s)));
        out
    }
}

/// Trainable copy of the base trunk plus an event input path. Block outputs
/// pass through zero-initialized 1x1 projections, so the injected residuals
/// are identically zero before training and the adapted model reproduces the
/// base model exactly at initialization.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub stem: Conv2d,
    pub event_in: Conv2d,
    pub blocks: Vec<Block>,
    pub projs: Vec<Conv2d>,
}

pub struct BranchCache {
    zcat: Array4<f64>,
    e_cond: Array4<f64>,
    h: Vec<Array4<f64>>,
    block_caches: Vec<BlockCache>,
    phi: Array1<f64>,
}

impl ControlBranch {
    pub fn from_base<R: Rng>(base: &BaseDenoiser, rng: &mut R) -> Self {
        let c = base.cfg.hidden;
        ControlBranch {
            stem: base.stem.clone(),
            event_in: Conv2d::new(base.cfg.event_channels, c, 3, 1, 1, rng),
            blocks: base.blocks.clone(),
            projs: (0..base.cfg.blocks).map(|_| Conv2d::zero_init(c, c, 1, 1, 0)).collect(),
        }
    }

    pub fn forward(
        &self,
        zcat: &Array4<f64>,
        e_cond: &Array4<f64>,
        phi: &Array1<f64>,
    ) -> (Vec<Array4<f64>>, BranchCache) {
        assert_eq!(
            (zcat.dim().0, zcat.dim().2, zcat.dim().3),
            (e_cond.dim().0, e_cond.dim().2, e_cond.dim().3),
            "event tensor must share the latent grid"
        );
        let h0 = &self.stem.forward(zcat) + &self.event_in.forward(e_cond);
        let mut h = vec![h0];
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(h.last().expect("nonempty"), phi);
            block_caches.push(cache);
            h.push(y);
        }
        let residuals: Vec<Array4<f64>> =
            self.projs.iter().enumerate().map(|(b, p)| p.forward(&h[b + 1])).collect();
        (
            residuals,
            BranchCache {
                zcat: zcat.clone(),
                e_cond: e_cond.clone(),
                h,
                block_caches,
                phi: phi.clone(),
            },
        )
    }

    /// Accumulate gradients for every branch parameter and return the
    /// gradient with respect to the encoded event tensor.
    pub fn backward(
        &self,
        cache: &BranchCache,
        g_res: &[Array4<f64>],
        grad: &mut ControlBranch,
    ) -> Array4<f64> {
        let nb = self.blocks.len();
        assert_eq!(g_res.len(), nb);
        let mut gh = Array4::zeros(cache.h[nb].dim());
        for b in (0..nb).rev() {
            gh += &self.projs[b].backward(&cache.h[b + 1], &g_res[b], &mut grad.projs[b]);
            gh = self.blocks[b].backward(&cache.block_caches[b], &cache.phi, &gh, &mut grad.blocks[b]);
        }
        let _ = self.stem.backward(&cache.zcat, &gh, &mut grad.stem);
        self.event_in.backward(&cache.e_cond, &gh, &mut grad.event_in)
    }
}

impl ParamTensors for ControlBranch {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.stem.visit(&mut |n, s| f(&format!("stem.{n}"), s));
        self.event_in.visit(&mut |n, s| f(&format!("event_in.{n}"), s));
        for (b, block) in self.blocks.iter().enumerate() {
            block.visit(&mut |n, s| f(&format!("blocks.{b}.{n}"), s));
        }
        for (b, p) in self.projs.iter().enumerate() {
            p.visit(&mut |n, s| f(&format!("projs.{b}.{n}"), s));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.stem.visit_mut(&mut |n, s| f(&format!("stem.{n}"), s));
        self.event_in.visit_mut(&mut |n, s| f(&format!("event_in.{n}"), s));
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&mut |n, s| f(&format!("blocks.{b}.{n}"), s));
        }
        for (b, p) in self.projs.iter_mut().enumerate() {
            p.visit_mut(&mut |n, s| f(&format!("projs.{b}.{n}"), s));
        }
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .stem
            .named_shapes()
            .into_iter()
            .map(|(n, s)| (format!("stem.{n}"), s))
            .collect();
        out.extend(
            self.event_in
                .named_shapes()
                .into_iter()
                .map(|(n, s)| (format!("event_in.{n}"), s)),
        );
        for (b, block) in self.blocks.iter().enumerate() {
            out.extend(
                block
                    .named_shapes()
                    .into_iter()
                    .map(|(n, s)| (format!("blocks.{b}.{n}"), s)),
            );
        }
        for (b, p) in self.projs.iter().enumerate() {
            out.extend(p.named_shapes().into_iter().map(|(n, s)| (format!("projs.{b}.{n}"), s)));
        }
        out
    }
}

/// Strided convolutional encoder that maps per-frame stack tensors down to
/// the latent grid: `log2(downsample)` stride-2 convolutions with silu
/// between them and a linear last layer. Each output side is the ceiling of
/// the input side divided by the total stride.
#[derive(Debug, Clone)]
pub struct EventEncoder {
    pub layers: Vec<Conv2d>,
}

pub struct EncoderCache {
    xs: Vec<Array4<f64>>,
    pre: Vec<Array4<f64>>,
}

impl EventEncoder {
    pub fn new<R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.encoder_downsample.trailing_zeros() as usize;
        let layers = if n == 0 {
            vec![Conv2d::new(cfg.stack_channels, cfg.event_channels, 3, 1, 1, rng)]
        } else {
            (0..n)
                .map(|i| {
                    let c_in = if i == 0 { cfg.stack_channels } else { cfg.event_channels };
                    Conv2d::new(c_in, cfg.event_channels, 3, 2, 1, rng)
                })
                .collect()
        };
        Ok(EventEncoder { layers })
    }

    pub fn forward(&self, stacks: &Array4<f64>) -> (Array4<f64>, EncoderCache) {
        let mut xs = vec![stacks.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(xs.last().expect("nonempty"));
            let out = if i + 1 < self.layers.len() { silu(&y) } else { y.clone() };
            pre.push(y);
            xs.push(out);
        }
        let e_cond = xs.pop().expect("nonempty");
        (e_cond, EncoderCache { xs, pre })
    }

    pub fn backward(&self, cache: &EncoderCache, g_out: &Array4<f64>, grad: &mut EventEncoder) {
        let mut g = g_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = silu_backward(&cache.pre[i], &g);
            }
            g = self.layers[i].backward(&cache.xs[i], &g, &mut grad.layers[i]);
        }
    }
}

impl ParamTensors for EventEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&mut |n, s| f(&format!("layers.{i}.{n}"), s));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&mut |n, s| f(&format!("layers.{i}.{n}"), s));
        }
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named_shapes().into_iter().map(|(n, s)| (format!("layers.{i}.{n}"), s)));
        }
        out
    }
}

/// The trainable half of the adapted model: control branch plus event
/// encoder, optimized together while the base stays frozen.
#[derive(Debug, Clone)]
pub struct ControlModule {
    pub branch: ControlBranch,
    pub encoder: EventEncoder,
}

impl ControlModule {
    pub fn from_base<R: Rng>(base: &BaseDenoiser, rng: &mut R) -> Result<Self> {
        Ok(ControlModule {
            branch: ControlBranch::from_base(base, rng),
            encoder: EventEncoder::new(&base.cfg, rng)?,
        })
    }
}

impl ParamTensors for ControlModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.branch.visit(&mut |n, s| f(&format!("branch.{n}"), s));
        self.encoder.visit(&mut |n, s| f(&format!("encoder.{n}"), s));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.branch.visit_mut(&mut |n, s| f(&format!("branch.{n}"), s));
        self.encoder.visit_mut(&mut |n, s| f(&format!("encoder.{n}"), s));
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .branch
            .named_shapes()
            .into_iter()
            .map(|(n, s)| (format!("branch.{n}"), s))
            .collect();
        out.extend(
            self.encoder
                .named_shapes()
                .into_iter()
                .map(|(n, s)| (format!("encoder.{n}"), s)),
        );
        out
    }
}

/// Denoiser over the base network with an optional control branch. With a
/// branch, `e_cond` must already be the encoder output on the latent grid;
/// without one, `e_cond` is ignored.
pub struct AdaptedModel<'a> {
    pub base: &'a BaseDenoiser,
    pub branch: Option<&'a ControlBranch>,
}

impl Denoiser for AdaptedModel<'_> {
    fn predict_noise(&self, z: &Latent, k: usize, i_cond: &Latent, e_cond: &Latent) -> Latent {
        match self.branch {
            None => self.base.forward(z, i_cond, k, None).0,
            Some(branch) => {
                let zcat = concat_channels(z, i_cond);
                let phi = self.base.phi(k);
                let (residuals, _) = branch.forward(&zcat, e_cond, &phi);
                self.base.forward(z, i_cond, k, Some(&residuals)).0
            }
        }
    }
}
