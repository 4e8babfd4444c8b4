//! Denoising score matching with the learned uncertainty weighting `u(sigma)`.

use crate::error::{Error, Result};
use crate::mp_ops::{self, FourierBank};
use crate::params::{Param, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Log-normal training noise levels, `ln sigma ~ N(p_mean, p_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseDist {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for NoiseDist {
    fn default() -> Self {
        Self {
            p_mean: -0.4,
            p_std: 1.0,
        }
    }
}

impl NoiseDist {
    pub fn new(p_mean: f64, p_std: f64) -> Result<Self> {
        if !(p_std > 0.0 && p_std.is_finite() && p_mean.is_finite()) {
            return Err(Error::Config(format!("invalid noise distribution ({p_mean}, {p_std})")));
        }
        Ok(Self { p_mean, p_std })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        (self.p_mean + self.p_std * rng.normal()).exp()
    }

    pub fn sample_n(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// `(sigma^2 + sigma_data^2) / (sigma sigma_data)^2`.
pub fn lambda_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise level must be positive, got {sigma}")));
    }
    Ok((sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2))
}

/// Squared error per sample `[N]`, summed over elements.
pub fn per_sample_sq_error<'t>(denoised: Var<'t>, clean: Var<'t>) -> Result<Var<'t>> {
    let sh = denoised.shape();
    let n = *sh.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let d: usize = sh[1..].iter().product();
    denoised.sub(clean)?.sqr().reshape(&[n, d])?.sum_axis(1)?.reshape(&[n])
}

/// `||D - y||^2`, summed over elements and averaged over the batch.
pub fn dsm_loss<'t>(denoised: Var<'t>, clean: Var<'t>) -> Result<Var<'t>> {
    Ok(per_sample_sq_error(denoised, clean)?.mean())
}

/// One-layer head mapping `c_noise(sigma)` to the scalar log-uncertainty `u`.
#[derive(Clone, Debug)]
pub struct UncertaintyHead {
    pub bank: FourierBank,
    /// A single `[1, channels]` weight named `u.linear`.
    pub params: ParamSet,
}

impl UncertaintyHead {
    pub const DEFAULT_CHANNELS: usize = 128;

    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        let bank = FourierBank::new(channels, rng);
        let mut params = ParamSet::new();
        params.insert(Param::new(
            "u.linear",
            ParamKind::Weight,
            Tensor::new(&[1, channels], rng.normal_vec(channels))?,
        ))?;
        Ok(Self { bank, params })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        let w = self.params.get(0).value.clone();
        if trainable {
            tape.param(w)
        } else {
            tape.constant(w)
        }
    }

    /// `u` for each noise level, shape `[N]`.
    pub fn u_var<'t>(&self, w: Var<'t>, sigma: &[f64]) -> Result<Var<'t>> {
        let cn: Vec<f64> = sigma
            .iter()
            .map(|&s| {
                if s > 0.0 {
                    Ok(s.ln() / 4.0)
                } else {
                    Err(Error::Domain(format!("noise level must be positive, got {s}")))
                }
            })
            .collect::<Result<_>>()?;
        let f = mp_ops::mp_fourier(w.tape().constant(Tensor::from_slice(&cn)), &self.bank)?;
        mp_ops::mp_linear(f, w)?.reshape(&[sigma.len()])
    }

    pub fn u(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let w = self.bind(&tape, false);
        Ok(self.u_var(w, sigma)?.value().data().to_vec())
    }
}

/// `mean_n[ lambda(sigma_n) / e^{u_n} * L_n + u_n ]`.
///
/// `per_elem_loss` is the squared error averaged over elements, so an ideal
/// Gaussian denoiser gives `lambda * L = 1`.
pub fn weighted_loss_terms<'t>(
    per_elem_loss: Var<'t>,
    u: Var<'t>,
    sigma: &[f64],
    sigma_data: f64,
) -> Result<Var<'t>> {
    let lam: Vec<f64> = sigma
        .iter()
        .map(|&s| lambda_weight(s, sigma_data))
        .collect::<Result<_>>()?;
    let lam = per_elem_loss.tape().constant(Tensor::from_slice(&lam));
    Ok(lam.mul(u.neg().exp())?.mul(per_elem_loss)?.add(u)?.mean())
}

/// Result of one weighted-loss evaluation.
pub struct WeightedLoss<'t> {
    pub total: Var<'t>,
    pub sigma: Vec<f64>,
    /// Per-sample squared error averaged over elements.
    pub per_elem: Vec<f64>,
    pub u: Vec<f64>,
}

/// Draws noise levels and noise, runs `denoise(x_noisy, sigma)`, and returns
/// the uncertainty-weighted loss.
pub fn weighted_loss<'t, D>(
    denoise: D,
    head: &UncertaintyHead,
    u_weight: Var<'t>,
    clean: Var<'t>,
    dist: &NoiseDist,
    sigma_data: f64,
    rng: &mut Rng,
) -> Result<WeightedLoss<'t>>
where
    D: FnOnce(Var<'t>, &[f64]) -> Result<Var<'t>>,
{
    let sh = clean.shape();
    let n = sh[0];
    let d: usize = sh[1..].iter().product();
    let sigma = dist.sample_n(rng, n);
    let mut noise = Tensor::randn(&sh, rng);
    for (row, s) in noise.data_mut().chunks_mut(d).zip(&sigma) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    let tape = clean.tape();
    let x = clean.add(tape.constant(noise))?;
    let den = denoise(x, &sigma)?;
    let per_elem = per_sample_sq_error(den, clean)?.scale(1.0 / d as f64);
    let u = head.u_var(u_weight, &sigma)?;
    let total = weighted_loss_terms(per_elem, u, &sigma, sigma_data)?;
    Ok(WeightedLoss {
        total,
        sigma,
        per_elem: per_elem.value().data().to_vec(),
        u: u.value().data().to_vec(),
    })
}

/// Running per-sigma-bucket loss statistics with CSV export.
#[derive(Clone, Debug)]
pub struct SigmaBuckets {
    edges: Vec<f64>,
    count: Vec<u64>,
    loss: Vec<f64>,
    weighted: Vec<f64>,
    u: Vec<f64>,
}

impl SigmaBuckets {
    /// `n` log-spaced buckets spanning `[lo, hi]`; values outside go to the end buckets.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Self {
        let (a, b) = (lo.ln(), hi.ln());
        let edges = (0..=n).map(|i| (a + (b - a) * i as f64 / n as f64).exp()).collect();
        Self {
            edges,
            count: vec![0; n],
            loss: vec![0.0; n],
            weighted: vec![0.0; n],
            u: vec![0.0; n],
        }
    }

    fn index(&self, sigma: f64) -> usize {
        let n = self.count.len();
        self.edges[1..n].iter().take_while(|&&e| sigma >= e).count()
    }

    pub fn record(&mut self, sigma: f64, per_elem_loss: f64, u: f64, sigma_data: f64) -> Result<()> {
        let i = self.index(sigma);
        self.count[i] += 1;
        self.loss[i] += per_elem_loss;
        self.weighted[i] += lambda_weight(sigma, sigma_data)? * per_elem_loss;
        self.u[i] += u;
        Ok(())
    }

    pub const HEADER: &'static str = "sigma_lo,sigma_hi,count,loss,lambda_loss,u_mean";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for i in 0..self.count.len() {
            let c = self.count[i].max(1) as f64;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.count[i],
                self.loss[i] / c,
                self.weighted[i] / c,
                self.u[i] / c
            ));
        }
        s
    }
}
