//! The gated U-Net denoiser.
//!
//! The backbone stacks the scaled noisy input and the conditioning prior on
//! the channel axis, runs encoder / bottleneck / decoder conv blocks with a
//! noise-level embedding added per block, and gates every skip connection
//! with a multi-scale gate before concatenation. The public entry point is
//! the skip-parameterized denoiser
//! `c_skip(sigma) * x_t + c_out(sigma) * F(c_in(sigma) * x_t, c_noise, mu)`,
//! which reduces to the identity as sigma approaches zero.
//!
//! Features are multiplied by the frame mask at every block boundary, so
//! outputs are exactly zero on padded frames and loss values are invariant
//! under appending padding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::rng::{derive_rng, uniform_f64, Domain};
use crate::scalar::Scalar;
use crate::schedule::{c_in, c_noise, c_out, c_skip, NoiseLevel, ScheduleConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{FrameMask, Shape, Tensor};

/// Backbone dimensions. Parameter names, shapes and count are a pure
/// function of this config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Number of down/upsampling levels.
    pub depth: usize,
    pub base_width: usize,
    /// Width multiplier per level; needs depth + 1 entries (the last one is
    /// the bottleneck).
    pub width_mult: Vec<usize>,
    /// Noise-embedding width (even).
    pub time_embed_dim: usize,
    /// Multi-scale gates on skip connections; when false skips pass through
    /// unchanged and the gate parameters are inert.
    pub msgate_enabled: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            depth: 2,
            base_width: 32,
            width_mult: alloc::vec![1, 2, 4],
            time_embed_dim: 64,
            msgate_enabled: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |msg: &str| Err(CoreError::InvalidArgument(msg.into()));
        if self.depth < 1 {
            return fail("depth must be >= 1");
        }
        if self.base_width < 1 {
            return fail("base_width must be >= 1");
        }
        if self.width_mult.len() != self.depth + 1 {
            return fail("width_mult needs depth + 1 entries");
        }
        if self.width_mult.iter().any(|&m| m < 1) {
            return fail("width multipliers must be >= 1");
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return fail("time_embed_dim must be even and >= 4");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.width_mult[level]
    }
}

/// Named parameter tensors in a fixed, architecture-derived order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.shape().len()).sum()
    }

    /// Zero tensors with matching shapes (gradient / moment buffers).
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        ParamSet { entries }
    }
}

/// Spectrogram channel plus the conditioning prior.
const IN_CHANNELS: usize = 2;
/// Gate fusion bias starts positive so initial gates sit near identity.
const FUSE_BIAS_INIT: f64 = 2.0;

fn conv_shape(cout: usize, cin: usize, k: usize) -> Shape {
    Shape::new(cout, cin, k, k)
}

fn bias_shape(c: usize) -> Shape {
    Shape::new(1, c, 1, 1)
}

/// Every (name, shape) pair of the parameter set, plus an init tag.
#[derive(Clone, Copy, PartialEq)]
enum Init {
    FanIn,
    Zero,
    FuseBias,
}

fn push_conv(
    out: &mut Vec<(String, Shape, Init)>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    zero: bool,
) {
    let init = if zero { Init::Zero } else { Init::FanIn };
    out.push((format!("{name}.w"), conv_shape(cout, cin, k), init));
    out.push((format!("{name}.b"), bias_shape(cout), Init::Zero));
}

fn param_layout(arch: &ArchConfig) -> Vec<(String, Shape, Init)> {
    let dt = arch.time_embed_dim;
    let mut out: Vec<(String, Shape, Init)> = Vec::new();

    push_conv(&mut out, "temb.fc1", dt, dt, 1, false);
    push_conv(&mut out, "temb.fc2", dt, dt, 1, false);
    push_conv(&mut out, "stem", arch.width(0), IN_CHANNELS, 3, false);
    for l in 0..arch.depth {
        let w = arch.width(l);
        push_conv(&mut out, &format!("enc{l}.conv"), w, w, 3, false);
        push_conv(&mut out, &format!("enc{l}.temb"), w, dt, 1, false);
        push_conv(&mut out, &format!("down{l}"), arch.width(l + 1), w, 3, false);
    }
    let wb = arch.width(arch.depth);
    push_conv(&mut out, "mid.conv", wb, wb, 3, false);
    push_conv(&mut out, "mid.temb", wb, dt, 1, false);
    for l in (0..arch.depth).rev() {
        let w = arch.width(l);
        push_conv(&mut out, &format!("up{l}"), w, arch.width(l + 1), 3, false);
        push_conv(&mut out, &format!("gate{l}.k1"), w, w, 1, false);
        push_conv(&mut out, &format!("gate{l}.k3"), w, w, 3, false);
        push_conv(&mut out, &format!("gate{l}.k5"), w, w, 5, false);
        push_conv(&mut out, &format!("gate{l}.pool"), w, w, 1, false);
        // fusion bias gets its own init so training starts near identity
        out.push((format!("gate{l}.fuse.w"), conv_shape(w, 4 * w, 1), Init::FanIn));
        out.push((format!("gate{l}.fuse.b"), bias_shape(w), Init::FuseBias));
        push_conv(&mut out, &format!("dec{l}.conv"), w, 2 * w, 3, false);
        push_conv(&mut out, &format!("dec{l}.temb"), w, dt, 1, false);
    }
    push_conv(&mut out, "head", 1, arch.width(0), 3, true);
    out
}

/// Number of scalar parameters implied by the architecture.
pub fn param_count(arch: &ArchConfig) -> usize {
    param_layout(arch).iter().map(|(_, s, _)| s.len()).sum()
}

fn init_params<T: Scalar>(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut entries = Vec::new();
    for (name, shape, init) in param_layout(arch) {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zero => {}
            Init::FuseBias => {
                for v in t.data_mut() {
                    *v = T::from_f64(FUSE_BIAS_INIT);
                }
            }
            Init::FanIn => {
                let fan_in = shape.c * shape.h * shape.w;
                let bound = (1.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = T::from_f64(uniform_f64(rng, -bound, bound));
                }
            }
        }
        entries.push((name, t));
    }
    ParamSet { entries }
}

/// Node ids of every parameter after registering them on a tape, in
/// `ParamSet` order.
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// The denoiser: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    arch: ArchConfig,
    params: ParamSet<T>,
}

struct Ctx<'m> {
    arch: &'m ArchConfig,
    names: Vec<&'m str>,
    ids: Vec<NodeId>,
}

impl<'m> Ctx<'m> {
    fn id(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Fresh model with fan-in-scaled uniform conv kernels, zero biases, a
    /// zero-initialized head and gate fusion biases at +2.
    pub fn init(arch: ArchConfig, master_seed: u64) -> Result<Self, CoreError> {
        arch.validate()?;
        let mut rng = derive_rng(master_seed, Domain::Init, 0, 0);
        let params = init_params(&arch, &mut rng);
        Ok(Denoiser { arch, params })
    }

    pub fn from_parts(arch: ArchConfig, params: ParamSet<T>) -> Result<Self, CoreError> {
        arch.validate()?;
        let layout = param_layout(&arch);
        if layout.len() != params.len() {
            return Err(CoreError::InvalidArgument(format!(
                "parameter set has {} tensors, architecture needs {}",
                params.len(),
                layout.len()
            )));
        }
        for (i, (name, shape, _)) in layout.iter().enumerate() {
            if params.name(i) != name {
                return Err(CoreError::InvalidArgument(format!(
                    "parameter {i} is named {}, expected {name}",
                    params.name(i)
                )));
            }
            if params.tensor(i).shape() != *shape {
                return Err(CoreError::InvalidArgument(format!(
                    "parameter {name} has shape {}, expected {shape}",
                    params.tensor(i).shape()
                )));
            }
        }
        Ok(Denoiser { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Register all parameters as trainable leaves.
    pub fn register_params<'a>(&'a self, tape: &mut Tape<'a, T>) -> ParamNodes {
        let ids = self
            .params
            .entries
            .iter()
            .map(|(_, t)| tape.param(t))
            .collect::<Vec<_>>();
        ParamNodes { ids }
    }

    fn ctx<'m>(&'m self, nodes: &ParamNodes) -> Ctx<'m> {
        Ctx {
            arch: &self.arch,
            names: self.params.entries.iter().map(|(n, _)| n.as_str()).collect(),
            ids: nodes.ids.clone(),
        }
    }

    /// Raw backbone output F(x_scaled, emb, mu): same shape as the input
    /// spectrogram, exactly zero on padded frames.
    pub fn unet_forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        nodes: &ParamNodes,
        x_scaled: NodeId,
        noise_embed_input: f64,
        mu: NodeId,
        mask: &FrameMask,
    ) -> Result<NodeId, CoreError> {
        let xs = tape.shape(x_scaled);
        let ms = tape.shape(mu);
        if xs != ms {
            return Err(CoreError::ShapeMismatch {
                what: "noisy input and conditioning prior",
            });
        }
        if xs.c != 1 {
            return Err(CoreError::ShapeMismatch {
                what: "spectrogram inputs must have one channel",
            });
        }
        if xs.b != mask.batch() || xs.w != mask.frames() {
            return Err(CoreError::ShapeMismatch {
                what: "input frames vs mask",
            });
        }
        if !tape.value(x_scaled).is_finite() || !tape.value(mu).is_finite() {
            return Err(CoreError::NonFinite {
                what: "denoiser input",
            });
        }
        let ctx = self.ctx(nodes);
        let arch = &self.arch;

        // noise embedding: sinusoidal features through a two-layer projection
        let emb_in = tape.constant(sinusoid_features(xs.b, arch.time_embed_dim, noise_embed_input));
        let h1 = conv_named(tape, &ctx, "temb.fc1", emb_in, 1)?;
        let h1 = tape.silu(h1);
        let temb = conv_named(tape, &ctx, "temb.fc2", h1, 1)?;

        // per-level masks and sizes
        let mut masks = alloc::vec![mask.clone()];
        for _ in 0..arch.depth {
            let next = masks.last().unwrap().downsample();
            masks.push(next);
        }

        let stacked = tape.concat_c(&[x_scaled, mu])?;
        let mut h = conv_named(tape, &ctx, "stem", stacked, 1)?;
        h = tape.zero_pad(h, &masks[0])?;

        let mut skips: Vec<(NodeId, usize, usize)> = Vec::new();
        for l in 0..arch.depth {
            h = block(tape, &ctx, &format!("enc{l}"), h, temb, &masks[l])?;
            let s = tape.shape(h);
            skips.push((h, s.h, s.w));
            h = conv_named(tape, &ctx, &format!("down{l}"), h, 2)?;
            h = tape.silu(h);
            h = tape.zero_pad(h, &masks[l + 1])?;
        }

        h = block(tape, &ctx, "mid", h, temb, &masks[arch.depth])?;

        for l in (0..arch.depth).rev() {
            let (skip, sh, sw) = skips[l];
            h = tape.upsample_to(h, sh, sw)?;
            h = conv_named(tape, &ctx, &format!("up{l}"), h, 1)?;
            h = tape.silu(h);
            h = tape.zero_pad(h, &masks[l])?;
            let gated = if arch.msgate_enabled {
                msgate_on_tape(tape, &ctx, l, skip, &masks[l])?
            } else {
                skip
            };
            let cat = tape.concat_c(&[h, gated])?;
            h = block(tape, &ctx, &format!("dec{l}"), cat, temb, &masks[l])?;
        }

        let out = conv_named(tape, &ctx, "head", h, 1)?;
        tape.zero_pad(out, &masks[0])
    }

    /// Skip-parameterized denoiser on a tape (training path).
    pub fn denoise_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        nodes: &ParamNodes,
        x_t: NodeId,
        sigma: NoiseLevel,
        mu: NodeId,
        mask: &FrameMask,
        cfg: &ScheduleConfig,
    ) -> Result<NodeId, CoreError> {
        if sigma.get() > cfg.sigma_max {
            return Err(CoreError::SigmaOutOfRange {
                sigma: sigma.get(),
                max: cfg.sigma_max,
            });
        }
        let skip = T::from_f64(c_skip(sigma, cfg)?);
        let out = T::from_f64(c_out(sigma, cfg)?);
        let scale_in = T::from_f64(c_in(sigma, cfg)?);
        let emb = c_noise(sigma)?;

        let x_scaled = tape.scale(x_t, scale_in);
        let backbone = self.unet_forward_on_tape(tape, nodes, x_scaled, emb, mu, mask)?;
        tape.affine(x_t, backbone, skip, out)
    }

    /// Inference-mode backbone call.
    pub fn unet_forward(
        &self,
        x_scaled: &Tensor<T>,
        noise_embed_input: f64,
        mu: &Tensor<T>,
        mask: &FrameMask,
    ) -> Result<Tensor<T>, CoreError> {
        let mut tape = Tape::new();
        let xi = tape.input(x_scaled);
        let mi = tape.input(mu);
        let nodes = self.register_params(&mut tape);
        let out = self.unet_forward_on_tape(&mut tape, &nodes, xi, noise_embed_input, mi, mask)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-mode denoiser: the consistency function estimate
    /// f(x_t, sigma, mu).
    pub fn denoise(
        &self,
        x_t: &Tensor<T>,
        sigma: NoiseLevel,
        mu: &Tensor<T>,
        mask: &FrameMask,
        cfg: &ScheduleConfig,
    ) -> Result<Tensor<T>, CoreError> {
        let mut tape = Tape::new();
        let xi = tape.input(x_t);
        let mi = tape.input(mu);
        let nodes = self.register_params(&mut tape);
        let out = self.denoise_on_tape(&mut tape, &nodes, xi, sigma, mi, mask, cfg)?;
        Ok(tape.value(out).clone())
    }
}

/// Score estimate (denoised - x_t) / sigma^2.
pub fn score_from_denoiser<T: Scalar>(
    x_t: &Tensor<T>,
    sigma: NoiseLevel,
    denoised: &Tensor<T>,
) -> Result<Tensor<T>, CoreError> {
    if sigma.get() <= 0.0 {
        return Err(CoreError::NonPositiveSigma { sigma: sigma.get() });
    }
    let inv = T::from_f64(1.0 / (sigma.get() * sigma.get()));
    let diff = denoised.add_scaled(x_t, -T::one())?;
    Ok(diff.map(|v| v * inv))
}

fn conv_named<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    ctx: &Ctx<'_>,
    name: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId, CoreError> {
    let w = ctx.id(&format!("{name}.w"));
    let b = ctx.id(&format!("{name}.b"));
    tape.conv2d(x, w, b, stride)
}

/// conv + noise-embedding bias + silu + mask.
fn block<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    ctx: &Ctx<'_>,
    name: &str,
    x: NodeId,
    temb: NodeId,
    mask: &FrameMask,
) -> Result<NodeId, CoreError> {
    let h = conv_named(tape, ctx, &format!("{name}.conv"), x, 1)?;
    let bias = conv_named(tape, ctx, &format!("{name}.temb"), temb, 1)?;
    let h = tape.add_bias(h, bias)?;
    let h = tape.silu(h);
    tape.zero_pad(h, mask)
}

/// Multi-scale gate: four parallel branches (pointwise, 3x3, 5x5, masked
/// global pool) concatenated, fused by a pointwise conv, squashed to (0, 1)
/// and applied elementwise to the input feature.
fn msgate_on_tape<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    ctx: &Ctx<'_>,
    level: usize,
    h: NodeId,
    mask: &FrameMask,
) -> Result<NodeId, CoreError> {
    let hs = tape.shape(h);
    let b1 = conv_named(tape, ctx, &format!("gate{level}.k1"), h, 1)?;
    let b3 = conv_named(tape, ctx, &format!("gate{level}.k3"), h, 1)?;
    let b5 = conv_named(tape, ctx, &format!("gate{level}.k5"), h, 1)?;
    let pooled = tape.masked_pool(h, mask)?;
    let pooled = conv_named(tape, ctx, &format!("gate{level}.pool"), pooled, 1)?;
    let bg = tape.broadcast_to(pooled, hs.h, hs.w)?;
    let cat = tape.concat_c(&[b1, b3, b5, bg])?;
    let fused = conv_named(tape, ctx, &format!("gate{level}.fuse"), cat, 1)?;
    let gate = tape.sigmoid(fused);
    tape.mul(h, gate)
}

/// Standalone multi-scale gate evaluation for a single level's parameters;
/// the backbone uses the same construction on its own tape.
pub fn msgate_forward<T: Scalar>(
    model: &Denoiser<T>,
    level: usize,
    h: &Tensor<T>,
    mask: &FrameMask,
) -> Result<Tensor<T>, CoreError> {
    if level >= model.arch().depth {
        return Err(CoreError::InvalidArgument(format!(
            "gate level {level} out of range (depth {})",
            model.arch().depth
        )));
    }
    if h.shape().c != model.arch().width(level) {
        return Err(CoreError::ShapeMismatch {
            what: "gate input channels",
        });
    }
    let mut tape = Tape::new();
    let hi = tape.input(h);
    let nodes = model.register_params(&mut tape);
    let ctx = model.ctx(&nodes);
    let out = msgate_on_tape(&mut tape, &ctx, level, hi, mask)?;
    Ok(tape.value(out).clone())
}

/// Sin/cos features of the noise embedding input, frequencies log-spaced in
/// [1, 256].
fn sinusoid_features<T: Scalar>(batch: usize, dim: usize, u: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(Shape::new(batch, dim, 1, 1));
    let half = dim / 2;
    for b in 0..batch {
        for i in 0..half {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let omega = (256.0f64.ln() * frac).exp();
            t.set(b, 2 * i, 0, 0, T::from_f64((omega * u).sin()));
            t.set(b, 2 * i + 1, 0, 0, T::from_f64((omega * u).cos()));
        }
    }
    t
}
