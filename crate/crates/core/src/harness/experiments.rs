//! Experiments and diagnostics built on top of [`train`](super::train).

use std::path::Path;

use super::manifest::RunManifest;
use super::train::{streams, train, u_sigmas, validation_loss, MetricsTable, Run, TrainOptions, MANIFEST_FILE, STORE_DIR};
use crate::ema::{gamma_of_sigma_rel, profile_dot, sigma_rel_of_gamma, solve_posthoc_weights, ProfileAt, Reconstruction, SnapshotStore};
use crate::error::{Error, Result};
use crate::loss::{weighted_loss, NoiseDist, UncertaintyHead};
use crate::network::{measure_magnitudes, precondition, scale_samples, Denoiser, MagnitudeReport, NetConfig, Preset};
use crate::optim::{adam_step, forced_renormalize, lr_at, AdamConfig, AdamState, LrSchedule};
use crate::params::{Param, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::sampler::{guide, sample, SampleOutput, SamplerConfig};
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// drift

/// One preset's magnitude history in a drift comparison.
#[derive(Clone, Debug)]
pub struct DriftSeries {
    pub preset: Preset,
    /// Magnitudes of the untrained network on the probe batch.
    pub initial: MagnitudeReport,
    pub metrics: MetricsTable,
}

impl DriftSeries {
    fn act_columns(&self, suffix: &str) -> Vec<usize> {
        self.metrics
            .header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.ends_with(suffix) && !h.starts_with("u_"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Largest activation magnitude over buckets at each metrics row.
    pub fn act_max_series(&self) -> Vec<f64> {
        let cols = self.act_columns("_act_max");
        self.metrics
            .rows
            .iter()
            .map(|r| cols.iter().map(|&c| r[c]).fold(0.0, f64::max))
            .collect()
    }

    /// Final over initial largest activation magnitude.
    pub fn act_max_growth(&self) -> f64 {
        let last = self.act_max_series().last().copied().unwrap_or(f64::NAN);
        last / self.initial.act_max()
    }

    /// `(column, value)` for every `_act_mean` column at every row.
    pub fn act_means(&self) -> Vec<(String, f64)> {
        let cols = self.act_columns("_act_mean");
        self.metrics
            .rows
            .iter()
            .flat_map(|r| cols.iter().map(|&c| (self.metrics.header[c].clone(), r[c])))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DriftReport {
    pub series: Vec<DriftSeries>,
}

impl DriftReport {
    pub fn get(&self, p: Preset) -> Option<&DriftSeries> {
        self.series.iter().find(|s| s.preset == p)
    }

    /// `preset,step,<max act>` long-format CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("preset,step,act_max,act_max_growth\n");
        for d in &self.series {
            let init = d.initial.act_max();
            let steps = d.metrics.column("step").unwrap_or_default();
            for (st, a) in steps.iter().zip(d.act_max_series()) {
                s.push_str(&format!("{},{},{},{}\n", d.preset.letter(), st, a, a / init));
            }
        }
        s
    }
}

/// Trains `base` once per preset with everything else shared (including the
/// learning rate) and collects magnitude histories.
pub fn drift_experiment(base: &RunManifest, presets: &[Preset]) -> Result<DriftReport> {
    let mut series = Vec::new();
    for &p in presets {
        let mut m = base.clone();
        m.preset = p;
        let run = Run::init(&m)?;
        let (x, s, l) = run.probe();
        let initial = measure_magnitudes(&run.net, &x, &s, l.as_ref())?;
        let out = train(&m, &TrainOptions::default())?;
        series.push(DriftSeries {
            preset: p,
            initial,
            metrics: out.metrics,
        });
    }
    Ok(DriftReport { series })
}

// ---------------------------------------------------------------------------
// stored runs

/// A finished run directory: manifest plus snapshot store.
pub struct StoredRun {
    pub run: Run,
    pub store: SnapshotStore,
}

impl StoredRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let m = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        Ok(Self {
            run: Run::init(&m)?,
            store: SnapshotStore::open(dir.join(STORE_DIR))?,
        })
    }

    pub fn last_step(&self) -> Result<u64> {
        self.store
            .manifest()
            .entries
            .last()
            .map(|e| e.t)
            .ok_or_else(|| Error::Contract("snapshot store is empty".into()))
    }

    /// Post-hoc average at `sigma_rel` (and step `at_step`, default the last
    /// snapshot) with optional per-tensor `(pattern, sigma_rel)` overrides.
    pub fn reconstruct(
        &self,
        sigma_rel: f64,
        at_step: Option<u64>,
        per_tensor: &[(String, f64)],
    ) -> Result<Reconstruction> {
        let t = at_step.unwrap_or(self.last_step()?) as f64;
        let target = ProfileAt::power(t, gamma_of_sigma_rel(sigma_rel)?);
        let overrides = per_tensor
            .iter()
            .map(|(pat, s)| Ok((pat.clone(), ProfileAt::power(t, gamma_of_sigma_rel(*s)?))))
            .collect::<Result<Vec<_>>>()?;
        self.store.reconstruct(target, &overrides)
    }

    /// Network with the reconstructed parameters loaded.
    pub fn network(&self, rec: &Reconstruction) -> Result<Denoiser> {
        let mut net = self.run.net.clone();
        net.params.load_tensors(&rec.tensors)?;
        Ok(net)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub sigma_rel: f64,
    pub metric: f64,
    pub fit_residual: f64,
}

pub const SWEEP_HEADER: &str = "sigma_rel,metric,fit_residual";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.sigma_rel, r.metric, r.fit_residual));
    }
    s
}

/// `n` σ_rel values evenly spaced on a log scale over `[lo, hi]`.
pub fn sigma_rel_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Held-out weighted denoising loss across a σ_rel grid.
pub fn sweep_ema(stored: &StoredRun, grid: &[f64], val_samples: usize) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&s| {
            let rec = stored.reconstruct(s, None, &[])?;
            let net = stored.network(&rec)?;
            Ok(SweepRow {
                sigma_rel: s,
                metric: validation_loss(&stored.run, &net, val_samples)?,
                fit_residual: rec.residuals[0].1,
            })
        })
        .collect()
}

/// Local minima of `v` after a centred 3-point moving average.
pub fn count_local_minima(v: &[f64]) -> usize {
    let n = v.len();
    if n < 3 {
        return usize::from(n > 0);
    }
    let sm: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            v[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    (0..n)
        .filter(|&i| (i == 0 || sm[i] < sm[i - 1]) && (i == n - 1 || sm[i] < sm[i + 1]))
        .count()
}

/// Magnitudes of each stored snapshot of the first tracked profile, one row
/// per snapshot time. Columns: `step,gamma,<bucket columns>`.
pub fn measure_traces(stored: &StoredRun) -> Result<MetricsTable> {
    let entries = &stored.store.manifest().entries;
    let Some(first) = entries.first() else {
        return Ok(MetricsTable::default());
    };
    let gamma = first.gamma;
    let (x, s, l) = stored.run.probe();
    let mut table = MetricsTable::default();
    for (i, e) in entries.iter().enumerate() {
        if e.gamma.to_bits() != gamma.to_bits() {
            continue;
        }
        let snap = stored.store.load(i)?;
        let mut net = stored.run.net.clone();
        net.params.load_tensors(&snap.tensors)?;
        let rep = measure_magnitudes(&net, &x, &s, l.as_ref())?;
        if table.header.is_empty() {
            table.header = ["step", "gamma"].map(String::from).to_vec();
            table.header.extend(rep.columns());
        }
        let mut row = vec![e.t as f64, gamma];
        row.extend(rep.values());
        table.rows.push(row);
    }
    Ok(table)
}

/// Options for [`sample_run`].
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub sigma_rel: f64,
    pub count: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Class to condition on; `None` samples unconditionally.
    pub class: Option<usize>,
}

/// Samples from the post-hoc EMA network of a stored run. With guidance the
/// unconditional branch is the same network given an all-zero label.
pub fn sample_run(stored: &StoredRun, req: &SampleRequest) -> Result<SampleOutput> {
    let rec = stored.reconstruct(req.sigma_rel, None, &[])?;
    let net = stored.network(&rec)?;
    let cfg = &net.cfg;
    let n = req.count;
    let labels = match (req.class, cfg.label_dim) {
        (None, 0) => None,
        (None, d) => Some(Tensor::zeros(&[n, d])),
        (Some(c), d) if c < d => {
            let mut l = Tensor::zeros(&[n, d]);
            for i in 0..n {
                l.data_mut()[i * d + c] = 1.0;
            }
            Some(l)
        }
        (Some(c), d) => return Err(Error::Config(format!("class {c} out of range for {d} labels"))),
    };
    let zero = (cfg.label_dim > 0).then(|| Tensor::zeros(&[n, cfg.label_dim]));
    let shape = [n, cfg.img_channels, cfg.img_resolution, cfg.img_resolution];
    let cond = |x: &Tensor, s: f64| net.denoise(x, &vec![s; n], labels.as_ref());
    let uncond = |x: &Tensor, s: f64| net.denoise(x, &vec![s; n], zero.as_ref());
    let mut rng = Rng::new(req.seed).fork(streams::SAMPLE);
    sample(guide(cond, uncond, req.sampler.guidance), &req.sampler, &shape, &mut rng)
}

// ---------------------------------------------------------------------------
// uncertainty tracking

/// Per-σ gain of the frozen denoiser `D(x; sigma) = k(sigma) x` used by the
/// u-tracking experiment: the ideal Gaussian gain perturbed so the loss is
/// not the ideal one.
pub fn frozen_gain(sigma: f64, sigma_data: f64) -> f64 {
    let ideal = sigma_data * sigma_data / (sigma * sigma + sigma_data * sigma_data);
    ideal * (1.0 + 0.5 * (sigma.ln()).sin())
}

#[derive(Clone, Debug)]
pub struct UTrackReport {
    pub sigmas: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct UTrackConfig {
    pub steps: u64,
    pub batch: usize,
    pub resolution: usize,
    pub channels: usize,
    pub lr: LrSchedule,
    pub dist: NoiseDist,
    pub seed: u64,
}

impl Default for UTrackConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch: 128,
            resolution: 8,
            channels: UncertaintyHead::DEFAULT_CHANNELS,
            lr: LrSchedule::inverse_sqrt(0.02, 500.0).with_rampup(50),
            dist: NoiseDist::default(),
            seed: 0,
        }
    }
}

/// Trains only the uncertainty head against the frozen denoiser
/// [`frozen_gain`] on Gaussian data, and reports `u` at [`u_sigmas`].
pub fn u_tracking_experiment(cfg: &UTrackConfig) -> Result<UTrackReport> {
    let sd = 0.5;
    let root = Rng::new(cfg.seed);
    let mut head = UncertaintyHead::new(cfg.channels, &mut root.fork(streams::HEAD))?;
    let mut rng = root.fork(streams::NOISE);
    let mut adam = AdamState::new(&head.params, AdamConfig::default());
    for step in 1..=cfg.steps {
        forced_renormalize(&mut head.params);
        let y = Tensor::randn(&[cfg.batch, 1, cfg.resolution, cfg.resolution], &mut rng).scale(sd);
        let tape = Tape::new();
        let w = head.bind(&tape, true);
        let wl = weighted_loss(
            |x, s| {
                let k: Vec<f64> = s.iter().map(|&v| frozen_gain(v, sd)).collect();
                scale_samples(x, &k)
            },
            &head,
            w,
            tape.constant(y),
            &cfg.dist,
            sd,
            &mut rng,
        )?;
        let g = tape
            .backward(wl.total)
            .take(w)
            .unwrap_or_else(|| Tensor::zeros(&[1, head.params.get(0).value.len()]));
        drop(tape);
        adam_step(&mut head.params, &[g], &mut adam, lr_at(step as f64, &cfg.lr))?;
    }
    let sigmas = u_sigmas(&cfg.dist);
    Ok(UTrackReport {
        u: head.u(&sigmas)?,
        sigmas,
    })
}

// ---------------------------------------------------------------------------
// self test

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Fast consistency checks against independent reference computations.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(2024);

    let n = 200_000;
    let m2 = (0..n).map(|_| silu(rng.normal()).powi(2)).sum::<f64>() / n as f64;
    out.push(check("mp_silu_constant", (m2 - 0.3558).abs() < 0.005, format!("E[silu^2] = {m2:.4}")));

    let worst = (1..=14)
        .map(|i| {
            let s = 0.02 * i as f64;
            let g = gamma_of_sigma_rel(s).and_then(sigma_rel_of_gamma).unwrap_or(f64::NAN);
            (g - s).abs()
        })
        .fold(0.0, f64::max);
    out.push(check("sigma_rel_round_trip", worst <= 1e-9, format!("max error {worst:.2e}")));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = ProfileAt::power(1.0 + 99.0 * rng.uniform(), 0.5 + 20.0 * rng.uniform());
        let b = ProfileAt::power(1.0 + 99.0 * rng.uniform(), 0.5 + 20.0 * rng.uniform());
        let q = simpson(|x| a.density(x) * b.density(x), 0.0, a.t.min(b.t), 20_000);
        worst = worst.max((profile_dot(&a, &b) / q - 1.0).abs());
    }
    out.push(check("profile_dot_quadrature", worst < 1e-6, format!("max relative error {worst:.2e}")));

    let snaps: Vec<ProfileAt> = (1..=6)
        .flat_map(|k| [16.97, 6.94].map(|g| ProfileAt::power(100.0 * k as f64, g)))
        .collect();
    let ident = solve_posthoc_weights(&snaps, &snaps)
        .map(|x| {
            let mut e = 0.0f64;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    e = e.max((x[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
            e
        })
        .unwrap_or(f64::INFINITY);
    out.push(check("posthoc_identity", ident < 1e-8, format!("max deviation {ident:.2e}")));

    let sd = 0.5;
    let errs: Vec<f64> = [16usize, 32]
        .iter()
        .map(|&steps| {
            let cfg = SamplerConfig { steps, ..Default::default() };
            let x0 = Tensor::from_slice(&[cfg.sigma_max]);
            let ideal = |x: &Tensor, s: f64| Ok(x.scale(sd * sd / (s * s + sd * sd)));
            let o = crate::sampler::sample_from(ideal, &cfg, x0).unwrap();
            let exact = ((cfg.sigma_min.powi(2) + sd * sd) / (cfg.sigma_max.powi(2) + sd * sd)).sqrt() * cfg.sigma_max;
            (o.trajectory[steps - 1].item() / exact - 1.0).abs()
        })
        .collect();
    let order = (errs[0] / errs[1]).log2();
    out.push(check(
        "sampler_second_order",
        (1.7..=2.3).contains(&order) && SamplerConfig::default().nfe() == 63,
        format!("observed order {order:.2}"),
    ));

    let precond = Denoiser::new(NetConfig::toy(Preset::G), &mut rng.fork(1)).and_then(|net| {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let s = (rng.normal() * 1.5).exp();
            let x = Tensor::randn(&[1, 1, 16, 16], &mut rng);
            let d = net.denoise(&x, &[s], None)?;
            let cs = precondition(s, sd)?.c_skip;
            worst = worst.max(d.sub(&x.scale(cs))?.max_abs());
        }
        Ok(worst)
    });
    let pd = precond.unwrap_or(f64::INFINITY);
    out.push(check("fresh_g_is_skip_only", pd <= 1e-12, format!("max deviation {pd:.2e}")));

    let mut ps = ParamSet::new();
    let _ = ps.insert(Param::new("w", ParamKind::Weight, Tensor::randn(&[4, 2, 3, 3], &mut rng).scale(7.0)));
    forced_renormalize(&mut ps);
    let dev = ps.get(0).row_norms().iter().map(|n| (n / 18f64.sqrt() - 1.0).abs()).fold(0.0, f64::max);
    out.push(check("forced_norm", dev < 1e-12, format!("max deviation {dev:.2e}")));

    let dir = std::env::temp_dir().join(format!("mpdiff-selftest-{}", std::process::id()));
    let io = (|| -> Result<bool> {
        let mut store = SnapshotStore::create(&dir)?;
        let snap = crate::ema::Snapshot::from_params(7, 3.0, &ps);
        store.write(&snap, crate::ema::Precision::F32)?;
        let back = SnapshotStore::open(&dir)?.load(0)?;
        Ok(back.tensors[0].1.data().iter().zip(snap.tensors[0].1.data()).all(|(a, b)| *a == *b as f32 as f64))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    out.push(check(
        "snapshot_round_trip",
        matches!(io, Ok(true)),
        format!("{io:?}"),
    ));
    out
}
