//! Deterministic second-order (Heun) sampler for the probability-flow ODE
//! `dx/dsigma = (x - D(x; sigma)) / sigma`, with classifier-free guidance.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Guidance weight; 1 disables guidance.
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            guidance: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || !self.guidance.is_finite() {
            return Err(Error::Config(format!("invalid rho {} or guidance {}", self.rho, self.guidance)));
        }
        Ok(())
    }

    /// Denoiser evaluations per sample.
    pub fn nfe(&self) -> usize {
        2 * self.steps - 1
    }
}

/// `sigma_0 .. sigma_N` with `sigma_N = 0`. The endpoints `sigma_max` and
/// `sigma_min` are set exactly rather than through the power round trip.
pub fn sigma_steps(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.steps;
    let mut s = Vec::with_capacity(n + 1);
    if n == 1 {
        s.push(cfg.sigma_max);
    } else {
        let (a, b) = (cfg.sigma_max.powf(1.0 / cfg.rho), cfg.sigma_min.powf(1.0 / cfg.rho));
        for i in 0..n {
            s.push((a + i as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho));
        }
        s[0] = cfg.sigma_max;
        s[n - 1] = cfg.sigma_min;
    }
    s.push(0.0);
    Ok(s)
}

/// `w D_cond + (1 - w) D_uncond`.
pub fn guided_denoiser(d_cond: &Tensor, d_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        if d_cond.shape() != d_uncond.shape() {
            return Err(Error::shape("guided_denoiser", d_cond.shape(), d_uncond.shape()));
        }
        return Ok(d_cond.clone());
    }
    d_cond.zip_map(d_uncond, "guided_denoiser", |c, u| w * c + (1.0 - w) * u)
}

/// Wraps a conditional and an unconditional denoiser into one guided
/// denoiser. The unconditional one is skipped when `w == 1`.
pub fn guide<'a, C, U>(mut d_cond: C, mut d_uncond: U, w: f64) -> impl FnMut(&Tensor, f64) -> Result<Tensor> + 'a
where
    C: FnMut(&Tensor, f64) -> Result<Tensor> + 'a,
    U: FnMut(&Tensor, f64) -> Result<Tensor> + 'a,
{
    move |x, sigma| {
        let c = d_cond(x, sigma)?;
        if w == 1.0 {
            return Ok(c);
        }
        guided_denoiser(&c, &d_uncond(x, sigma)?, w)
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x: Tensor,
    pub nfe: usize,
    /// State at each `sigma_i`, including the initial noise and the final output.
    pub trajectory: Vec<Tensor>,
    pub sigmas: Vec<f64>,
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler state at step {step}")))
    }
}

/// Integrates from `x0` at `sigma_max` down to zero.
pub fn sample_from<D>(mut denoise: D, cfg: &SamplerConfig, x0: Tensor) -> Result<SampleOutput>
where
    D: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let sigmas = sigma_steps(cfg)?;
    let mut x = x0;
    check_finite(&x, 0)?;
    let mut nfe = 0;
    let mut trajectory = vec![x.clone()];
    for i in 0..cfg.steps {
        let (s, sn) = (sigmas[i], sigmas[i + 1]);
        let d = denoise(&x, s)?;
        nfe += 1;
        let slope = x.zip_map(&d, "sample", |xv, dv| (xv - dv) / s)?;
        let mut next = x.clone();
        next.axpy(sn - s, &slope)?;
        if sn > 0.0 {
            let d2 = denoise(&next, sn)?;
            nfe += 1;
            let slope2 = next.zip_map(&d2, "sample", |xv, dv| (xv - dv) / sn)?;
            next = x.clone();
            next.axpy(0.5 * (sn - s), &slope)?;
            next.axpy(0.5 * (sn - s), &slope2)?;
        }
        check_finite(&next, i + 1)?;
        x = next;
        trajectory.push(x.clone());
    }
    Ok(SampleOutput {
        x,
        nfe,
        trajectory,
        sigmas,
    })
}

/// Draws `x0 ~ N(0, sigma_max^2 I)` of `shape` and integrates.
pub fn sample<D>(denoise: D, cfg: &SamplerConfig, shape: &[usize], rng: &mut Rng) -> Result<SampleOutput>
where
    D: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let x0 = Tensor::randn(shape, rng).scale(cfg.sigma_max);
    sample_from(denoise, cfg, x0)
}

const SAMPLE_MAGIC: &str = "MPDSAMPLES1";

/// Header of a sample file: one text line, then little-endian f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleHeader {
    pub shape: Vec<usize>,
    pub seed: u64,
    pub cfg: SamplerConfig,
    pub class: Option<usize>,
}

pub fn write_samples(path: &Path, header: &SampleHeader, x: &Tensor) -> Result<()> {
    if header.shape != x.shape() {
        return Err(Error::shape("write_samples", &header.shape, x.shape()));
    }
    let shape: Vec<String> = header.shape.iter().map(|d| d.to_string()).collect();
    let class = header.class.map_or("none".to_string(), |c| c.to_string());
    let c = &header.cfg;
    let line = format!(
        "{SAMPLE_MAGIC} shape={} seed={} steps={} sigma_min={} sigma_max={} rho={} guidance={} class={class}\n",
        shape.join("x"),
        header.seed,
        c.steps,
        c.sigma_min,
        c.sigma_max,
        c.rho,
        c.guidance
    );
    let mut buf = line.into_bytes();
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<(SampleHeader, Tensor)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let nl = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("sample file has no header".into()))?;
    let line = std::str::from_utf8(&buf[..nl]).map_err(|_| Error::Parse("sample header is not UTF-8".into()))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(SAMPLE_MAGIC) {
        return Err(Error::Parse("not a sample file".into()));
    }
    let mut h = SampleHeader {
        shape: vec![],
        seed: 0,
        cfg: SamplerConfig::default(),
        class: None,
    };
    let bad = |k: &str| Error::Parse(format!("bad sample header field {k}"));
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
        match k {
            "shape" => {
                h.shape = v
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(k)))
                    .collect::<Result<_>>()?
            }
            "seed" => h.seed = v.parse().map_err(|_| bad(k))?,
            "steps" => h.cfg.steps = v.parse().map_err(|_| bad(k))?,
            "sigma_min" => h.cfg.sigma_min = v.parse().map_err(|_| bad(k))?,
            "sigma_max" => h.cfg.sigma_max = v.parse().map_err(|_| bad(k))?,
            "rho" => h.cfg.rho = v.parse().map_err(|_| bad(k))?,
            "guidance" => h.cfg.guidance = v.parse().map_err(|_| bad(k))?,
            "class" => h.class = if v == "none" { None } else { Some(v.parse().map_err(|_| bad(k))?) },
            _ => return Err(bad(k)),
        }
    }
    let body = &buf[nl + 1..];
    let n: usize = h.shape.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Parse(format!("expected {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let t = Tensor::new(&h.shape, data)?;
    Ok((h, t))
}
