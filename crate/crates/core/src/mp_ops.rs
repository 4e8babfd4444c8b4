//! Magnitude-preserving layers and the normalizations they replace.
//!
//! Every function takes and returns [`Var`]s so gradients flow through.
//! Expected magnitude `M[a]` is the root-mean-square of the elements.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{NormKind, Tensor, Var};

/// Guard used wherever a norm is inverted.
pub const EPS: f64 = 1e-4;

/// `E[silu(x)^2]^(1/2)` for `x ~ N(0, 1)`, rounded as published.
pub const MP_SILU_DIVISOR: f64 = 0.596;

/// Activation clamp applied at block exits.
pub const CLAMP: f64 = 256.0;

/// Blend factor `t` in `[0, 1]` for [`mp_sum`] and [`mp_cat`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendFactor(f64);

impl BlendFactor {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::Domain(format!("blend factor {t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// How raw weights become the weights actually applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Use the raw tensor.
    Plain,
    /// `w / ||w||` per output channel.
    Normalized,
}

/// Root-mean-square of every element.
pub fn magnitude(t: &Tensor) -> f64 {
    t.rms()
}

fn rows_view<'t>(w: Var<'t>) -> Result<(Var<'t>, Vec<usize>, usize)> {
    let shape = w.shape();
    let out = *shape
        .first()
        .ok_or_else(|| Error::Contract("weight must have rank >= 1".into()))?;
    let fan_in = shape[1..].iter().product::<usize>();
    Ok((w.reshape(&[out, fan_in])?, shape, fan_in))
}

/// Normalizes each output-channel slice of `w` to unit L2 norm:
/// `w_i / max(||w_i||, eps)`.
///
/// Gradients are projected onto the tangent plane of each `w_i`.
pub fn weight_normalize<'t>(w: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let (rows, shape, _) = rows_view(w)?;
    rows.normalize_axis(1, NormKind::L2 { eps })?.reshape(&shape)
}

/// Weights applied by magnitude-preserving layers: unit L2 norm per output
/// channel, so unit-variance uncorrelated inputs give unit-variance outputs.
/// Equivalently, rows rescaled to RMS 1 and divided by `sqrt(fan_in)`.
pub fn mp_weight<'t>(w: Var<'t>) -> Result<Var<'t>> {
    weight_normalize(w, EPS)
}

/// Weight tensor used for the given mode.
pub fn effective_weight<'t>(w: Var<'t>, mode: WeightMode) -> Result<Var<'t>> {
    match mode {
        WeightMode::Plain => Ok(w),
        WeightMode::Normalized => mp_weight(w),
    }
}

/// `a [N, in] -> [N, out]` with weight `[out, in]`.
pub fn linear<'t>(a: Var<'t>, w: Var<'t>, mode: WeightMode) -> Result<Var<'t>> {
    let (ash, wsh) = (a.shape(), w.shape());
    if ash.len() != 2 || wsh.len() != 2 || ash[1] != wsh[1] {
        return Err(Error::shape("linear", &ash, &wsh));
    }
    a.matmul(effective_weight(w, mode)?.transpose()?)
}

/// `a [N, Ci, H, W] -> [N, Co, H, W]` with 'same' padding.
pub fn conv<'t>(a: Var<'t>, w: Var<'t>, mode: WeightMode) -> Result<Var<'t>> {
    a.conv2d(effective_weight(w, mode)?)
}

/// Magnitude-preserving fully-connected layer.
pub fn mp_linear<'t>(a: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    linear(a, w, WeightMode::Normalized)
}

/// Magnitude-preserving convolution.
pub fn mp_conv<'t>(a: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    conv(a, w, WeightMode::Normalized)
}

/// `a / (rms over axis + eps)` at every position.
pub fn pixel_norm<'t>(a: Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
    a.normalize_axis(axis, NormKind::Rms { eps })
}

fn group_view<'t>(a: Var<'t>, group_size: usize, op: &str) -> Result<(Var<'t>, Vec<usize>)> {
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::Contract(format!("{op}: need [N, C, ...], got {shape:?}")));
    }
    let c = shape[1];
    if group_size == 0 || c % group_size != 0 {
        return Err(Error::Config(format!(
            "{op}: {c} channels not divisible by group size {group_size}"
        )));
    }
    let rest: usize = shape[2..].iter().product();
    let v = a.reshape(&[shape[0], c / group_size, group_size * rest])?;
    Ok((v, shape))
}

/// Divides by the RMS over each group of `group_size` channels and all
/// pixels. No mean subtraction, no learned scale.
pub fn group_norm_simplified<'t>(a: Var<'t>, group_size: usize, eps: f64) -> Result<Var<'t>> {
    let (v, shape) = group_view(a, group_size, "group_norm_simplified")?;
    v.normalize_axis(2, NormKind::Rms { eps })?.reshape(&shape)
}

/// Standard group normalization with mean subtraction and a learned
/// per-channel scale and optional bias.
pub fn group_norm_learned<'t>(
    a: Var<'t>,
    group_size: usize,
    eps: f64,
    scale: Var<'t>,
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let (v, shape) = group_view(a, group_size, "group_norm_learned")?;
    let n = v.shape()[2];
    let centered = v.sub(v.mean_axis(2)?.expand_axis(2, n)?)?;
    let y = centered
        .normalize_axis(2, NormKind::Rms { eps })?
        .reshape(&shape)?
        .scale_channels(scale)?;
    match bias {
        Some(b) => y.shift_channels(b),
        None => Ok(y),
    }
}

/// Attention logits flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// `q . k / sqrt(ch)` on raw projections.
    Dot,
    /// Queries and keys pixel-normalized first, so logits are `sqrt(ch) cos`.
    Cosine,
}

/// 1x1 projection weights, each `[C, C, 1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub o: Var<'t>,
}

/// Attention result plus the softmax map and the logits (`[N*heads, HW, HW]`).
pub struct AttentionOut<'t> {
    pub out: Var<'t>,
    pub map: Var<'t>,
    pub logits: Var<'t>,
}

/// Multi-head self-attention over the pixels of `x [N, C, H, W]`.
pub fn attention<'t>(
    x: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
    mode: AttentionMode,
    weight_mode: WeightMode,
) -> Result<AttentionOut<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Contract(format!("attention: need [N, C, H, W], got {shape:?}")));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("attention: {c} channels not divisible by {heads} heads")));
    }
    let ch = c / heads;
    let split = |p: Var<'t>| p.reshape(&[n * heads, ch, hw]);
    let mut q = split(conv(x, w.q, weight_mode)?)?;
    let mut k = split(conv(x, w.k, weight_mode)?)?;
    let v = split(conv(x, w.v, weight_mode)?)?;
    if mode == AttentionMode::Cosine {
        q = pixel_norm(q, 1, EPS)?;
        k = pixel_norm(k, 1, EPS)?;
    }
    let logits = q.transpose()?.bmm(k)?.scale(1.0 / (ch as f64).sqrt());
    let map = logits.softmax(2)?;
    let y = v.bmm(map.transpose()?)?.reshape(&shape)?;
    let out = conv(y, w.o, weight_mode)?;
    Ok(AttentionOut { out, map, logits })
}

/// Cosine attention with magnitude-preserving projections.
pub fn cosine_attention<'t>(
    x: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Result<AttentionOut<'t>> {
    attention(x, w, heads, AttentionMode::Cosine, WeightMode::Normalized)
}

/// Random Fourier features with frequencies and phases frozen at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBank {
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl FourierBank {
    /// `f ~ N(0, 1)`, `phi ~ U(0, 1)`.
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let freqs = rng.normal_vec(channels);
        let phases = rng.uniform_vec(channels);
        Self { freqs, phases }
    }

    pub fn from_parts(freqs: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if freqs.len() != phases.len() {
            return Err(Error::shape("FourierBank", &[freqs.len()], &[phases.len()]));
        }
        Ok(Self { freqs, phases })
    }

    pub fn channels(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// `cos(2 pi (f a + phi))` for each `a` in `[N]`, shaped `[N, C]`, scaled by `amp`.
    pub fn features<'t>(&self, a: Var<'t>, amp: f64) -> Result<Var<'t>> {
        let sh = a.shape();
        if sh.len() != 1 {
            return Err(Error::Contract(format!("fourier: need [N], got {sh:?}")));
        }
        let (n, c) = (sh[0], self.channels());
        let tape = a.tape();
        let f = tape.constant(Tensor::new(&[1, c], self.freqs.clone())?);
        let phi: Vec<f64> = (0..n).flat_map(|_| self.phases.iter().copied()).collect();
        let phi = tape.constant(Tensor::new(&[n, c], phi)?);
        let arg = a.reshape(&[n, 1])?.matmul(f)?.add(phi)?.scale(2.0 * PI);
        Ok(arg.cos().scale(amp))
    }
}

/// `sqrt(2) cos(2 pi (f a + phi))`, unit expected magnitude over the bank.
pub fn mp_fourier<'t>(a: Var<'t>, bank: &FourierBank) -> Result<Var<'t>> {
    bank.features(a, SQRT_2)
}

/// `silu(a) / 0.596`.
pub fn mp_silu(a: Var<'_>) -> Var<'_> {
    a.silu().scale(1.0 / MP_SILU_DIVISOR)
}

/// `((1 - t) a + t b) / sqrt((1 - t)^2 + t^2)`.
pub fn mp_sum<'t>(a: Var<'t>, b: Var<'t>, t: BlendFactor) -> Result<Var<'t>> {
    let t = t.get();
    let d = ((1.0 - t).powi(2) + t * t).sqrt();
    a.scale((1.0 - t) / d).add(b.scale(t / d))
}

/// Concatenation along `axis` rebalanced so both inputs contribute per `t`.
pub fn mp_cat<'t>(a: Var<'t>, b: Var<'t>, t: BlendFactor, axis: usize) -> Result<Var<'t>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if axis >= ash.len() || axis >= bsh.len() {
        return Err(Error::shape("mp_cat", &ash, &bsh));
    }
    let (na, nb) = (ash[axis] as f64, bsh[axis] as f64);
    let t = t.get();
    let c = ((na + nb) / ((1.0 - t).powi(2) + t * t)).sqrt();
    Var::concat(&[a.scale(c * (1.0 - t) / na.sqrt()), b.scale(c * t / nb.sqrt())], axis)
}

/// `g * a` with a learned scalar `g`.
pub fn gain<'t>(a: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    a.mul_scalar(g)
}

/// Clamps activations to `[-256, 256]`.
pub fn clamp_activations(a: Var<'_>) -> Var<'_> {
    a.clamp(-CLAMP, CLAMP)
}
