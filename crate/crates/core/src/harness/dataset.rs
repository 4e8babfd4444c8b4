//! Procedural image datasets standardized to zero mean and std `sigma_data`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// i.i.d. `N(0, sigma_data^2)` per element; the covariance is `sigma_data^2 I`.
    Gaussian,
    /// Sums of Gaussian bumps; class `c` has `c + 2` bumps.
    Blobs,
    /// Binary checkerboards; the class picks the period.
    Checker,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Gaussian => "gaussian",
            DataKind::Blobs => "blobs",
            DataKind::Checker => "checker",
        })
    }
}

impl FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(DataKind::Gaussian),
            "blobs" => Ok(DataKind::Blobs),
            "checker" => Ok(DataKind::Checker),
            _ => Err(Error::Parse(format!("unknown dataset {s:?} (gaussian, blobs, checker)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub kind: DataKind,
    pub resolution: usize,
    pub channels: usize,
    /// 0 means unconditional.
    pub classes: usize,
    pub sigma_data: f64,
    shift: f64,
    scale: f64,
}

/// Draws used to estimate the standardization constants.
const CALIBRATION_DRAWS: usize = 8192;

impl SyntheticDataset {
    pub fn new(kind: DataKind, resolution: usize, channels: usize, classes: usize, sigma_data: f64) -> Result<Self> {
        if resolution == 0 || channels == 0 || !(sigma_data > 0.0) {
            return Err(Error::Config("dataset needs positive resolution, channels and sigma_data".into()));
        }
        let mut ds = Self {
            kind,
            resolution,
            channels,
            classes,
            sigma_data,
            shift: 0.0,
            scale: 1.0,
        };
        if kind != DataKind::Gaussian {
            // fixed calibration stream, independent of the run seed
            let mut rng = Rng::new(0x5eed_da7a);
            let d = ds.dim();
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut buf = vec![0.0; d];
            for _ in 0..CALIBRATION_DRAWS {
                let c = if classes > 0 { rng.below(classes) } else { 0 };
                ds.raw_into(c, &mut rng, &mut buf);
                for &v in &buf {
                    s1 += v;
                    s2 += v * v;
                }
            }
            let n = (CALIBRATION_DRAWS * d) as f64;
            let mean = s1 / n;
            ds.shift = mean;
            ds.scale = sigma_data / (s2 / n - mean * mean).sqrt();
        }
        Ok(ds)
    }

    /// Elements per sample.
    pub fn dim(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    fn raw_into(&self, class: usize, rng: &mut Rng, out: &mut [f64]) {
        let r = self.resolution;
        let plane = r * r;
        match self.kind {
            DataKind::Gaussian => rng.fill_normal(out),
            DataKind::Blobs => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let bumps = class + 2;
                for _ in 0..bumps {
                    let (cy, cx) = (rng.uniform() * r as f64, rng.uniform() * r as f64);
                    let w = r as f64 / 8.0 * (0.5 + rng.uniform());
                    let amp = 0.5 + rng.uniform();
                    let tint: Vec<f64> = (0..self.channels).map(|_| 0.5 + rng.uniform()).collect();
                    for y in 0..r {
                        for x in 0..r {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            let v = amp * (-d2 / (2.0 * w * w)).exp();
                            for (c, t) in tint.iter().enumerate() {
                                out[c * plane + y * r + x] += v * t;
                            }
                        }
                    }
                }
            }
            DataKind::Checker => {
                let period = 1usize << (1 + class % 3);
                let (oy, ox) = (rng.below(period), rng.below(period));
                for c in 0..self.channels {
                    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    for y in 0..r {
                        for x in 0..r {
                            let parity = ((y + oy) / period.max(1) + (x + ox) / period.max(1)) % 2;
                            out[c * plane + y * r + x] = sign * if parity == 0 { 1.0 } else { -1.0 };
                        }
                    }
                }
            }
        }
    }

    /// `n` standardized samples `[n, C, R, R]` and one-hot labels when conditional.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Tensor, Option<Tensor>) {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        let mut labels = vec![0.0; n * self.classes];
        for (i, chunk) in data.chunks_mut(d).enumerate() {
            let c = if self.classes > 0 { rng.below(self.classes) } else { 0 };
            if self.classes > 0 {
                labels[i * self.classes + c] = 1.0;
            }
            self.raw_into(c, rng, chunk);
            if self.kind == DataKind::Gaussian {
                chunk.iter_mut().for_each(|v| *v *= self.sigma_data);
            } else {
                chunk.iter_mut().for_each(|v| *v = (*v - self.shift) * self.scale);
            }
        }
        let x = Tensor::new(&[n, self.channels, self.resolution, self.resolution], data).unwrap();
        let l = (self.classes > 0).then(|| Tensor::new(&[n, self.classes], labels).unwrap());
        (x, l)
    }
}
