//! Power-function and exponential EMA of parameters, snapshot storage and
//! post-hoc synthesis of new averaging profiles.

mod posthoc;
mod snapshot;

pub use posthoc::{fit_residual, profile_dot, solve_posthoc_weights, ProfileAt, DUPLICATE_TOL};
pub use snapshot::{
    glob_match, read_snapshot, write_snapshot, Manifest, ManifestEntry, Precision, Reconstruction, Snapshot,
    SnapshotStore, FORMAT_VERSION, MAGIC,
};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Upper bound on the relative standard deviation of a power profile, `12^-1/2`.
pub fn sigma_rel_max() -> f64 {
    12f64.powf(-0.5)
}

/// Averaging profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmaProfile {
    /// Weight `∝ tau^gamma` over `[0, t]`.
    Power { gamma: f64 },
    /// Half-life in steps.
    Exponential { half_life: f64 },
}

impl EmaProfile {
    pub fn power(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        Ok(EmaProfile::Power { gamma })
    }

    pub fn from_sigma_rel(sigma_rel: f64) -> Result<Self> {
        Ok(EmaProfile::Power {
            gamma: gamma_of_sigma_rel(sigma_rel)?,
        })
    }

    pub fn exponential(half_life: f64) -> Result<Self> {
        if !(half_life > 0.0 && half_life.is_finite()) {
            return Err(Error::Domain(format!("half-life must be positive, got {half_life}")));
        }
        Ok(EmaProfile::Exponential { half_life })
    }

    /// Decay factor for the update at step `t` (`t >= 1`).
    pub fn beta(&self, t: u64) -> Result<f64> {
        if t < 1 {
            return Err(Error::Contract("EMA update needs t >= 1".into()));
        }
        Ok(match *self {
            EmaProfile::Power { gamma } => (1.0 - 1.0 / t as f64).powf(gamma + 1.0),
            EmaProfile::Exponential { half_life } => 0.5f64.powf(1.0 / half_life),
        })
    }

    /// Realized weights of `theta_0 ..= theta_T` after `T` updates.
    pub fn discrete_weights(&self, t_total: u64) -> Result<Vec<f64>> {
        let mut w = vec![0.0; t_total as usize + 1];
        w[0] = 1.0;
        let mut keep = 1.0;
        for t in (1..=t_total).rev() {
            let b = self.beta(t)?;
            w[t as usize] = keep * (1.0 - b);
            keep *= b;
        }
        w[0] = keep;
        Ok(w)
    }
}

/// `sqrt(gamma + 1) / ((gamma + 2) sqrt(gamma + 3))`.
pub fn sigma_rel_of_gamma(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    Ok(sigma_rel_unchecked(gamma))
}

fn sigma_rel_unchecked(gamma: f64) -> f64 {
    (gamma + 1.0).sqrt() / ((gamma + 2.0) * (gamma + 3.0).sqrt())
}

/// Inverse of [`sigma_rel_of_gamma`] by bisection on the monotone map.
pub fn gamma_of_sigma_rel(sigma_rel: f64) -> Result<f64> {
    let max = sigma_rel_max();
    if !(sigma_rel > 0.0 && sigma_rel < max) {
        return Err(Error::Domain(format!(
            "sigma_rel = {sigma_rel} outside (0, {:.4}...); power profiles require sigma_rel < 12^-0.5",
            (max * 1e4).floor() / 1e4
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while sigma_rel_unchecked(hi) > sigma_rel {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Domain(format!("sigma_rel = {sigma_rel} too small")));
        }
    }
    // sigma_rel decreases in gamma
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sigma_rel_unchecked(mid) > sigma_rel {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (elo, ehi) = (
        (sigma_rel_unchecked(lo) - sigma_rel).abs(),
        (sigma_rel_unchecked(hi) - sigma_rel).abs(),
    );
    Ok(if elo < ehi { lo } else { hi })
}

/// `theta_hat <- beta theta_hat + (1 - beta) theta` for step `t`.
pub fn ema_update(avg: &mut Tensor, theta: &Tensor, t: u64, profile: &EmaProfile) -> Result<()> {
    if avg.shape() != theta.shape() {
        return Err(Error::shape("ema_update", avg.shape(), theta.shape()));
    }
    let b = profile.beta(t)?;
    for (a, &x) in avg.data_mut().iter_mut().zip(theta.data()) {
        *a = b * *a + (1.0 - b) * x;
    }
    Ok(())
}

/// One running average of a full parameter set.
#[derive(Clone, Debug)]
pub struct EmaTrack {
    pub profile: EmaProfile,
    pub params: ParamSet,
}

/// Tracks several averages of the same parameters.
#[derive(Clone, Debug)]
pub struct EmaTracker {
    pub tracks: Vec<EmaTrack>,
    step: u64,
}

impl EmaTracker {
    pub fn new(params: &ParamSet, profiles: &[EmaProfile]) -> Self {
        Self {
            tracks: profiles
                .iter()
                .map(|&profile| EmaTrack {
                    profile,
                    params: params.clone(),
                })
                .collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Folds in the parameters reached after training step `self.step() + 1`.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        self.step += 1;
        for tr in &mut self.tracks {
            for (a, p) in tr.params.iter_mut().zip(params.iter()) {
                if a.name != p.name {
                    return Err(Error::Contract(format!("EMA tensor {} vs {}", a.name, p.name)));
                }
                ema_update(&mut a.value, &p.value, self.step, &tr.profile)?;
            }
        }
        Ok(())
    }
}
