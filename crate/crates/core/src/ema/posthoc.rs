use nalgebra::DMatrix;

use super::EmaProfile;
use crate::error::{Error, Result};

/// Profiles closer than this (relative time gap plus parameter gap) are
/// treated as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-12;

/// A profile evaluated at training time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileAt {
    pub t: f64,
    pub profile: EmaProfile,
}

impl ProfileAt {
    pub fn power(t: f64, gamma: f64) -> Self {
        Self {
            t,
            profile: EmaProfile::Power { gamma },
        }
    }

    /// Continuous response density at `tau` in `[0, t]`.
    pub fn density(&self, tau: f64) -> f64 {
        if tau < 0.0 || tau > self.t {
            return 0.0;
        }
        match self.profile {
            EmaProfile::Power { gamma } => (gamma + 1.0) * (tau / self.t).powf(gamma) / self.t,
            EmaProfile::Exponential { half_life } => {
                let c = std::f64::consts::LN_2 / half_life;
                c * (-(self.t - tau) * c).exp() / (-(-c * self.t).exp_m1())
            }
        }
    }

    fn param(&self) -> f64 {
        match self.profile {
            EmaProfile::Power { gamma } => gamma,
            EmaProfile::Exponential { half_life } => half_life,
        }
    }
}

/// `∫ p_a p_b`. Power profiles use the closed form with the ratio raised to
/// a non-positive exponent, so large time ratios cannot overflow.
pub fn profile_dot(a: &ProfileAt, b: &ProfileAt) -> f64 {
    match (a.profile, b.profile) {
        (EmaProfile::Power { gamma: ga }, EmaProfile::Power { gamma: gb }) => {
            let ratio = a.t / b.t;
            let e = if a.t < b.t { gb } else { -ga };
            (ga + 1.0) * (gb + 1.0) * ratio.powf(e) / ((ga + gb + 1.0) * a.t.max(b.t))
        }
        _ => {
            let hi = a.t.min(b.t);
            adaptive_simpson(&|x| a.density(x) * b.density(x), 0.0, hi, 1e-13, 60)
        }
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol * scale, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn gram(snapshots: &[ProfileAt]) -> DMatrix<f64> {
    let n = snapshots.len();
    DMatrix::from_fn(n, n, |i, j| profile_dot(&snapshots[i], &snapshots[j]))
}

fn check_duplicates(snapshots: &[ProfileAt]) -> Result<()> {
    for i in 0..snapshots.len() {
        for j in i + 1..snapshots.len() {
            let (a, b) = (&snapshots[i], &snapshots[j]);
            let same_kind = std::mem::discriminant(&a.profile) == std::mem::discriminant(&b.profile);
            let gap = (a.t - b.t).abs() / a.t.max(b.t) + (a.param() - b.param()).abs();
            if same_kind && gap < DUPLICATE_TOL {
                return Err(Error::DuplicateProfile {
                    i,
                    j,
                    t: a.t,
                    gamma: a.param(),
                });
            }
        }
    }
    Ok(())
}

/// Least-squares weights combining snapshot profiles into each target.
/// Row `i` is snapshot `i`, column `r` is target `r`.
pub fn solve_posthoc_weights(snapshots: &[ProfileAt], targets: &[ProfileAt]) -> Result<DMatrix<f64>> {
    if snapshots.is_empty() {
        return Err(Error::Solver("no snapshots to combine".into()));
    }
    for p in snapshots.iter().chain(targets) {
        if !(p.t > 0.0 && p.t.is_finite()) {
            return Err(Error::Domain(format!("profile time must be positive, got {}", p.t)));
        }
    }
    check_duplicates(snapshots)?;
    let a = gram(snapshots);
    let b = DMatrix::from_fn(snapshots.len(), targets.len(), |i, r| profile_dot(&snapshots[i], &targets[r]));
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Solver("singular Gram matrix".into()))
}

/// `||p_r - sum_i x_i p_i|| / ||p_r||`.
pub fn fit_residual(snapshots: &[ProfileAt], target: &ProfileAt, x: &[f64]) -> f64 {
    let rr = profile_dot(target, target);
    let mut cross = 0.0;
    let mut quad = 0.0;
    for (i, si) in snapshots.iter().enumerate() {
        cross += x[i] * profile_dot(si, target);
        let mut row = 0.0;
        for (j, sj) in snapshots.iter().enumerate() {
            row += x[j] * profile_dot(si, sj);
        }
        quad += x[i] * row;
    }
    ((rr - 2.0 * cross + quad).max(0.0) / rr).sqrt()
}
