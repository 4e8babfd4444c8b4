use super::denoiser::Probe;
use super::{Bucket, Denoiser, ForwardOptions};
use crate::error::{Error, Result};
use crate::params::ParamKind;
use crate::tensor::{Tape, Tensor};

/// Max and mean of per-feature magnitudes in one bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BucketStats {
    pub act_max: f64,
    pub act_mean: f64,
    pub w_max: f64,
    pub w_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeReport {
    /// One entry per bucket, encoder levels first.
    pub buckets: Vec<(Bucket, String, BucketStats)>,
}

impl MagnitudeReport {
    /// Largest activation magnitude over all buckets.
    pub fn act_max(&self) -> f64 {
        self.buckets.iter().map(|b| b.2.act_max).fold(0.0, f64::max)
    }

    pub fn w_max(&self) -> f64 {
        self.buckets.iter().map(|b| b.2.w_max).fold(0.0, f64::max)
    }

    /// CSV column names: `<bucket>_act_max`, `<bucket>_act_mean`, `<bucket>_w_max`, `<bucket>_w_mean`.
    pub fn columns(&self) -> Vec<String> {
        self.buckets
            .iter()
            .flat_map(|(_, l, _)| ["act_max", "act_mean", "w_max", "w_mean"].map(|k| format!("{l}_{k}")))
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.buckets
            .iter()
            .flat_map(|(_, _, s)| [s.act_max, s.act_mean, s.w_max, s.w_mean])
            .collect()
    }
}

fn aggregate(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max, vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Activation and weight magnitudes per encoder/decoder resolution bucket.
///
/// Activations are the outputs of learned layers before any nonlinearity,
/// after biases and gains. Weights are measured per output channel as
/// `sqrt(mean of squares)`; gains, biases and norm scales are excluded.
pub fn measure_magnitudes(
    net: &Denoiser,
    x: &Tensor,
    sigma: &[f64],
    labels: Option<&Tensor>,
) -> Result<MagnitudeReport> {
    if x.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("measure_magnitudes needs at least one sample".into()));
    }
    let mut probes: Vec<Probe> = Vec::new();
    {
        let tape = Tape::new();
        let vars = net.bind(&tape, false);
        let mut opts = ForwardOptions {
            probes: Some(&mut probes),
            ..ForwardOptions::eval()
        };
        net.denoise_var(&vars, tape.constant(x.clone()), sigma, labels, &mut opts)?;
    }
    let owned = net.bucket_params();
    let mut buckets = Vec::new();
    for b in Bucket::all(&net.cfg) {
        let acts: Vec<f64> = probes
            .iter()
            .filter(|p| p.bucket == b)
            .flat_map(|p| p.magnitudes.iter().copied())
            .collect();
        let mut ws = Vec::new();
        for &i in owned.get(&b).map(|v| v.as_slice()).unwrap_or(&[]) {
            let p = net.params.get(i);
            if p.kind == ParamKind::Weight {
                let m = p.fan_in() as f64;
                ws.extend(p.row_norms().into_iter().map(|n| n / m.sqrt()));
            }
        }
        let (act_max, act_mean) = aggregate(&acts);
        let (w_max, w_mean) = aggregate(&ws);
        buckets.push((
            b,
            b.label(&net.cfg),
            BucketStats {
                act_max,
                act_mean,
                w_max,
                w_mean,
            },
        ));
    }
    Ok(MagnitudeReport { buckets })
}
