use std::collections::HashMap;

use super::{Bucket, FixedFnMode, GroupNormMode, NetConfig, Side, WeightNormMode};
use crate::error::{Error, Result};
use crate::mp_ops::{self, AttentionWeights, BlendFactor, FourierBank, WeightMode, EPS};
use crate::params::{Param, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise level must be positive and finite, got {sigma}")));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Multiplies sample `n` of `x [N, ...]` by `s[n]`.
pub fn scale_samples<'t>(x: Var<'t>, s: &[f64]) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.first() != Some(&s.len()) {
        return Err(Error::shape("scale_samples", &shape, &[s.len()]));
    }
    let rest: usize = shape[1..].iter().product();
    let sv = x.tape().constant(Tensor::new(&[s.len(), 1], s.to_vec())?);
    x.reshape(&[s.len(), 1, rest])?.scale_channels(sv)?.reshape(&shape)
}

/// Per-feature magnitudes of one learned layer's output.
#[derive(Clone, Debug)]
pub struct Probe {
    pub bucket: Bucket,
    pub layer: String,
    pub magnitudes: Vec<f64>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub training: bool,
    /// Needed when training with dropout.
    pub rng: Option<&'a mut Rng>,
    pub probes: Option<&'a mut Vec<Probe>>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            probes: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Keep,
    Down,
    Up,
}

#[derive(Clone, Debug)]
struct BlockSpec {
    prefix: String,
    bucket: Bucket,
    in_ch: usize,
    out_ch: usize,
    resample: Resample,
    attention: bool,
    /// Concatenate a U-Net skip before the block.
    takes_skip: bool,
}

/// Toy U-Net `F` wrapped in preconditioning.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub bank: FourierBank,
    enc: Vec<BlockSpec>,
    dec: Vec<BlockSpec>,
}

struct Builder<'r> {
    cfg: NetConfig,
    set: ParamSet,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], zero: bool) -> Result<()> {
        let n: usize = shape.iter().product();
        let fan_in = n / shape[0];
        let data = if zero && self.cfg.zero_init {
            vec![0.0; n]
        } else if self.cfg.weights == WeightNormMode::Plain {
            let a = (3.0 / fan_in as f64).sqrt();
            self.rng.uniform_vec(n).into_iter().map(|u| a * (2.0 * u - 1.0)).collect()
        } else {
            self.rng.normal_vec(n)
        };
        self.set.insert(Param::new(name, ParamKind::Weight, Tensor::new(shape, data)?))?;
        if self.cfg.biases {
            self.set
                .insert(Param::new(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[shape[0]])))?;
        }
        Ok(())
    }

    fn gain(&mut self, name: &str) -> Result<()> {
        if self.cfg.fixed_fn == FixedFnMode::Mp {
            self.set.insert(Param::new(name, ParamKind::Gain, Tensor::scalar(0.0)))?;
        }
        Ok(())
    }

    fn norm(&mut self, name: &str, ch: usize) -> Result<()> {
        if self.cfg.group_norm == GroupNormMode::Learned {
            self.set
                .insert(Param::new(format!("{name}.scale"), ParamKind::NormScale, Tensor::ones(&[ch])))?;
            if self.cfg.biases {
                self.set
                    .insert(Param::new(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[ch])))?;
            }
        }
        Ok(())
    }

    fn block(&mut self, b: &BlockSpec) -> Result<()> {
        let p = &b.prefix;
        let (ci, co) = (b.in_ch, b.out_ch);
        if ci != co {
            self.weight(&format!("{p}.conv_skip"), &[co, ci, 1, 1], false)?;
        }
        let res_in = if b.bucket.side == Side::Enc { co } else { ci };
        self.norm(&format!("{p}.norm0"), res_in)?;
        self.weight(&format!("{p}.conv_res0"), &[co, res_in, 3, 3], false)?;
        self.weight(&format!("{p}.emb"), &[co, self.cfg.emb_channels], false)?;
        self.gain(&format!("{p}.emb_gain"))?;
        self.norm(&format!("{p}.norm1"), co)?;
        self.weight(&format!("{p}.conv_res1"), &[co, co, 3, 3], true)?;
        if b.attention {
            self.norm(&format!("{p}.norm2"), co)?;
            for k in ["q", "k", "v"] {
                self.weight(&format!("{p}.attn_{k}"), &[co, co, 1, 1], false)?;
            }
            self.weight(&format!("{p}.attn_proj"), &[co, co, 1, 1], true)?;
        }
        Ok(())
    }
}

fn layout(cfg: &NetConfig) -> (Vec<BlockSpec>, Vec<BlockSpec>) {
    let levels = cfg.levels();
    let attn = |l: usize| cfg.attn_levels.contains(&l);
    let mut enc = Vec::new();
    let mut skips = vec![cfg.channels[0]];
    let mut cout = cfg.channels[0];
    for (level, &ch) in cfg.channels.iter().enumerate() {
        let bucket = Bucket { side: Side::Enc, level };
        if level > 0 {
            enc.push(BlockSpec {
                prefix: format!("enc.{level}.down"),
                bucket,
                in_ch: cout,
                out_ch: cout,
                resample: Resample::Down,
                attention: false,
                takes_skip: false,
            });
            skips.push(cout);
        }
        for i in 0..cfg.num_blocks {
            enc.push(BlockSpec {
                prefix: format!("enc.{level}.block{i}"),
                bucket,
                in_ch: cout,
                out_ch: ch,
                resample: Resample::Keep,
                attention: attn(level),
                takes_skip: false,
            });
            cout = ch;
            skips.push(cout);
        }
    }
    let mut dec = Vec::new();
    for level in (0..levels).rev() {
        let ch = cfg.channels[level];
        let bucket = Bucket { side: Side::Dec, level };
        if level == levels - 1 {
            for (i, a) in [(0, true), (1, false)] {
                dec.push(BlockSpec {
                    prefix: format!("dec.{level}.in{i}"),
                    bucket,
                    in_ch: cout,
                    out_ch: cout,
                    resample: Resample::Keep,
                    attention: a,
                    takes_skip: false,
                });
            }
        } else {
            dec.push(BlockSpec {
                prefix: format!("dec.{level}.up"),
                bucket,
                in_ch: cout,
                out_ch: cout,
                resample: Resample::Up,
                attention: false,
                takes_skip: false,
            });
        }
        for i in 0..=cfg.num_blocks {
            let skip = skips.pop().expect("skip stack matches layout");
            dec.push(BlockSpec {
                prefix: format!("dec.{level}.block{i}"),
                bucket,
                in_ch: cout + skip,
                out_ch: ch,
                resample: Resample::Keep,
                attention: attn(level),
                takes_skip: true,
            });
            cout = ch;
        }
    }
    (enc, dec)
}

struct Ctx<'t, 'o, 'a> {
    vars: &'o [Var<'t>],
    opts: &'o mut ForwardOptions<'a>,
}

impl Denoiser {
    pub fn new(cfg: NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (enc, dec) = layout(&cfg);
        let bank = FourierBank::new(cfg.fourier_channels, rng);
        let mut b = Builder {
            cfg: cfg.clone(),
            set: ParamSet::new(),
            rng,
        };
        let cin = cfg.img_channels + cfg.const_channel as usize;
        b.weight("emb.noise", &[cfg.emb_channels, cfg.fourier_channels], false)?;
        if cfg.label_dim > 0 {
            let data = b.rng.normal_vec(cfg.emb_channels * cfg.label_dim);
            b.set.insert(Param::new(
                "emb.label",
                ParamKind::Weight,
                Tensor::new(&[cfg.emb_channels, cfg.label_dim], data)?,
            ))?;
        }
        b.weight("in.conv", &[cfg.channels[0], cin, 3, 3], false)?;
        for blk in enc.iter().chain(&dec) {
            b.block(blk)?;
        }
        b.weight("out.conv", &[cfg.img_channels, cfg.channels[0], 3, 3], true)?;
        b.gain("out.gain")?;
        let mut params = b.set;
        if cfg.weights == WeightNormMode::Forced {
            params.force_normalize_weights();
        }
        Ok(Self {
            cfg,
            params,
            bank,
            enc,
            dec,
        })
    }

    /// Puts every parameter on `tape`, as traced leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Parameter index by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.position(name)
    }

    /// Preconditioned denoiser `D(x; sigma)` with one noise level per sample.
    pub fn denoise_var<'t>(
        &self,
        vars: &[Var<'t>],
        x: Var<'t>,
        sigma: &[f64],
        labels: Option<&Tensor>,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var<'t>> {
        let pc: Vec<Precond> = sigma
            .iter()
            .map(|&s| precondition(s, self.cfg.sigma_data))
            .collect::<Result<_>>()?;
        let pick = |f: fn(&Precond) -> f64| pc.iter().map(f).collect::<Vec<_>>();
        let xin = scale_samples(x, &pick(|p| p.c_in))?;
        let f = self.raw_var(vars, xin, &pick(|p| p.c_noise), labels, opts)?;
        scale_samples(x, &pick(|p| p.c_skip))?.add(scale_samples(f, &pick(|p| p.c_out))?)
    }

    /// Evaluation-mode `D(x; sigma)` without gradients.
    pub fn denoise(&self, x: &Tensor, sigma: &[f64], labels: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.denoise_var(&vars, tape.constant(x.clone()), sigma, labels, &mut ForwardOptions::eval())?;
        Ok((*out.value()).clone())
    }

    /// Evaluation-mode raw network output `F(x; c_noise)`.
    pub fn raw(&self, x: &Tensor, c_noise: &[f64], labels: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.raw_var(&vars, tape.constant(x.clone()), c_noise, labels, &mut ForwardOptions::eval())?;
        Ok((*out.value()).clone())
    }

    /// Raw network `F(x; c_noise)`.
    pub fn raw_var<'t>(
        &self,
        vars: &[Var<'t>],
        x: Var<'t>,
        c_noise: &[f64],
        labels: Option<&Tensor>,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let xs = x.shape();
        let want = [xs.first().copied().unwrap_or(0), cfg.img_channels, cfg.img_resolution, cfg.img_resolution];
        if xs != want || c_noise.len() != want[0] {
            return Err(Error::shape("denoiser input", &xs, &want));
        }
        if opts.training && cfg.dropout > 0.0 && opts.rng.is_none() {
            return Err(Error::Contract("training with dropout needs an rng".into()));
        }
        let n = want[0];
        let tape = x.tape();
        let mut ctx = Ctx { vars, opts };

        // embedding
        let cn = tape.constant(Tensor::from_slice(c_noise));
        let four = match cfg.fixed_fn {
            FixedFnMode::Mp => mp_ops::mp_fourier(cn, &self.bank)?,
            FixedFnMode::Plain => self.bank.features(cn, 1.0)?,
        };
        let mut emb = self.linear(&ctx, "emb.noise", four)?;
        if cfg.label_dim > 0 {
            let onehot = match labels {
                Some(l) => {
                    if l.shape() != [n, cfg.label_dim] {
                        return Err(Error::shape("labels", l.shape(), &[n, cfg.label_dim]));
                    }
                    l.clone()
                }
                None => Tensor::zeros(&[n, cfg.label_dim]),
            };
            let s = if cfg.weights == WeightNormMode::Plain { 1.0 } else { (cfg.label_dim as f64).sqrt() };
            let class = self.linear(&ctx, "emb.label", tape.constant(onehot.scale(s)))?;
            emb = self.sum(emb, class, cfg.t_emb)?;
        } else if labels.is_some() {
            return Err(Error::Contract("labels given to an unconditional model".into()));
        }
        let emb = self.act(emb);

        // encoder
        let mut h = x;
        if cfg.const_channel {
            let ones = tape.constant(Tensor::ones(&[n, 1, cfg.img_resolution, cfg.img_resolution]));
            h = Var::concat(&[h, ones], 1)?;
        }
        h = self.conv(&mut ctx, "in.conv", h, None)?;
        let mut skips = vec![h];
        for b in &self.enc {
            h = self.block(&mut ctx, b, h, emb)?;
            skips.push(h);
        }

        // decoder
        for b in &self.dec {
            if b.takes_skip {
                let s = skips.pop().ok_or_else(|| Error::Contract("skip stack underflow".into()))?;
                h = match cfg.fixed_fn {
                    FixedFnMode::Mp => mp_ops::mp_cat(h, s, BlendFactor::new(cfg.t_cat)?, 1)?,
                    FixedFnMode::Plain => Var::concat(&[h, s], 1)?,
                };
            }
            h = self.block(&mut ctx, b, h, emb)?;
        }

        let mut out = self.conv(&mut ctx, "out.conv", h, None)?;
        if let Some(g) = self.var(&ctx, "out.gain") {
            out = mp_ops::gain(out, g)?;
        }
        Ok(out)
    }

    fn var<'t>(&self, ctx: &Ctx<'t, '_, '_>, name: &str) -> Option<Var<'t>> {
        self.params.position(name).map(|i| ctx.vars[i])
    }

    fn need<'t>(&self, ctx: &Ctx<'t, '_, '_>, name: &str) -> Result<Var<'t>> {
        self.var(ctx, name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    fn weight_mode(&self) -> WeightMode {
        self.cfg.weights.apply_mode()
    }

    fn linear<'t>(&self, ctx: &Ctx<'t, '_, '_>, name: &str, a: Var<'t>) -> Result<Var<'t>> {
        let y = mp_ops::linear(a, self.need(ctx, name)?, self.weight_mode())?;
        match self.var(ctx, &format!("{name}.bias")) {
            Some(b) => {
                let n = y.shape()[0];
                y.add(b.reshape(&[1, b.shape()[0]])?.expand_axis(0, n)?)
            }
            None => Ok(y),
        }
    }

    /// Convolution plus bias, recording output magnitudes when probing.
    fn conv<'t>(&self, ctx: &mut Ctx<'t, '_, '_>, name: &str, a: Var<'t>, probe: Option<Bucket>) -> Result<Var<'t>> {
        let mut y = mp_ops::conv(a, self.need(ctx, name)?, self.weight_mode())?;
        if let Some(b) = self.var(ctx, &format!("{name}.bias")) {
            y = y.shift_channels(b)?;
        }
        if let (Some(bucket), Some(probes)) = (probe, ctx.opts.probes.as_deref_mut()) {
            probes.push(Probe {
                bucket,
                layer: name.to_string(),
                magnitudes: feature_magnitudes(&y.value()),
            });
        }
        Ok(y)
    }

    fn act<'t>(&self, a: Var<'t>) -> Var<'t> {
        match self.cfg.fixed_fn {
            FixedFnMode::Mp => mp_ops::mp_silu(a),
            FixedFnMode::Plain => a.silu(),
        }
    }

    fn sum<'t>(&self, a: Var<'t>, b: Var<'t>, t: f64) -> Result<Var<'t>> {
        match self.cfg.fixed_fn {
            FixedFnMode::Mp => mp_ops::mp_sum(a, b, BlendFactor::new(t)?),
            FixedFnMode::Plain => a.add(b),
        }
    }

    fn norm<'t>(&self, ctx: &Ctx<'t, '_, '_>, name: &str, a: Var<'t>) -> Result<Var<'t>> {
        let ch = a.shape()[1];
        let g = self.cfg.group_size_for(ch);
        match self.cfg.group_norm {
            GroupNormMode::Learned => mp_ops::group_norm_learned(
                a,
                g,
                EPS,
                self.need(ctx, &format!("{name}.scale"))?,
                self.var(ctx, &format!("{name}.bias")),
            ),
            GroupNormMode::Simplified => mp_ops::group_norm_simplified(a, g, EPS),
            GroupNormMode::PixelNorm => Ok(a),
        }
    }

    fn dropout<'t>(&self, ctx: &mut Ctx<'t, '_, '_>, a: Var<'t>) -> Result<Var<'t>> {
        let p = self.cfg.dropout;
        if !ctx.opts.training || p == 0.0 {
            return Ok(a);
        }
        let rng = ctx.opts.rng.as_deref_mut().expect("checked on entry");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.value().len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        a.mul(a.tape().constant(Tensor::new(&a.shape(), mask)?))
    }

    fn block<'t>(&self, ctx: &mut Ctx<'t, '_, '_>, b: &BlockSpec, x: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let p = &b.prefix;
        let probe = Some(b.bucket);
        let enc = b.bucket.side == Side::Enc;
        let mut x = match b.resample {
            Resample::Keep => x,
            Resample::Down => x.avg_pool2()?,
            Resample::Up => x.upsample2()?,
        };
        if enc && b.in_ch != b.out_ch {
            x = self.conv(ctx, &format!("{p}.conv_skip"), x, probe)?;
        }
        if enc && cfg.group_norm == GroupNormMode::PixelNorm {
            x = mp_ops::pixel_norm(x, 1, EPS)?;
        }

        let y = self.norm(ctx, &format!("{p}.norm0"), x)?;
        let y = self.conv(ctx, &format!("{p}.conv_res0"), self.act(y), probe)?;
        let mut c = self.linear(ctx, &format!("{p}.emb"), emb)?;
        if let Some(g) = self.var(ctx, &format!("{p}.emb_gain")) {
            c = mp_ops::gain(c, g)?;
        }
        if let Some(probes) = ctx.opts.probes.as_deref_mut() {
            probes.push(Probe {
                bucket: b.bucket,
                layer: format!("{p}.emb"),
                magnitudes: feature_magnitudes(&c.value()),
            });
        }
        let y = self.norm(ctx, &format!("{p}.norm1"), y)?;
        let y = self.act(y.scale_channels(c.add_scalar(1.0))?);
        let y = self.dropout(ctx, y)?;
        let y = self.conv(ctx, &format!("{p}.conv_res1"), y, probe)?;

        if !enc && b.in_ch != b.out_ch {
            x = self.conv(ctx, &format!("{p}.conv_skip"), x, probe)?;
        }
        x = self.sum(x, y, cfg.t_res)?;

        if b.attention {
            let a = self.norm(ctx, &format!("{p}.norm2"), x)?;
            let w = AttentionWeights {
                q: self.need(ctx, &format!("{p}.attn_q"))?,
                k: self.need(ctx, &format!("{p}.attn_k"))?,
                v: self.need(ctx, &format!("{p}.attn_v"))?,
                o: self.need(ctx, &format!("{p}.attn_proj"))?,
            };
            let heads = cfg.heads_for(b.out_ch);
            let mut att = mp_ops::attention(a, &w, heads, cfg.attention, self.weight_mode())?.out;
            if let Some(bias) = self.var(ctx, &format!("{p}.attn_proj.bias")) {
                att = att.shift_channels(bias)?;
            }
            if let Some(probes) = ctx.opts.probes.as_deref_mut() {
                probes.push(Probe {
                    bucket: b.bucket,
                    layer: format!("{p}.attn_proj"),
                    magnitudes: feature_magnitudes(&att.value()),
                });
            }
            x = self.sum(x, att, cfg.t_res)?;
        }
        Ok(mp_ops::clamp_activations(x))
    }
}

/// `sqrt(mean of squares)` per feature of `[N, C, ...]`, pooled over batch and pixels.
pub(crate) fn feature_magnitudes(t: &Tensor) -> Vec<f64> {
    let sh = t.shape();
    let (n, c) = (sh[0], sh[1]);
    let m: usize = sh[2..].iter().product();
    let mut acc = vec![0.0; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (b * c + ch) * m;
            *a += t.data()[base..base + m].iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc.into_iter().map(|s| (s / (n * m) as f64).sqrt()).collect()
}

impl Denoiser {
    /// Parameter names grouped by bucket.
    pub fn bucket_params(&self) -> HashMap<Bucket, Vec<usize>> {
        let mut m: HashMap<Bucket, Vec<usize>> = HashMap::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(b) = Bucket::of_param(&p.name) {
                m.entry(b).or_default().push(i);
            }
        }
        m
    }
}
