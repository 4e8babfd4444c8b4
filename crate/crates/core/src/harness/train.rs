//! The training loop: weighted denoising loss, Adam, forced normalization,
//! EMA tracking, snapshots and metrics.

use std::path::{Path, PathBuf};

use super::dataset::SyntheticDataset;
use super::manifest::RunManifest;
use crate::ema::{write_snapshot, EmaProfile, EmaTracker, Precision, Snapshot, SnapshotStore};
use crate::error::{Error, Result};
use crate::loss::{lambda_weight, weighted_loss, NoiseDist, SigmaBuckets, UncertaintyHead};
use crate::network::{measure_magnitudes, Denoiser, ForwardOptions, NetConfig, WeightNormMode};
use crate::optim::{adam_step, forced_renormalize, lr_at, sanitize_grads, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// RNG stream ids derived from the manifest seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const HEAD: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const SAMPLE: u64 = 8;
}

pub const PROBE_BATCH: usize = 4;
pub const U_SAMPLES: usize = 8;

/// Network, uncertainty head and data built deterministically from a manifest.
#[derive(Clone, Debug)]
pub struct Run {
    pub manifest: RunManifest,
    pub cfg: NetConfig,
    pub data: SyntheticDataset,
    pub net: Denoiser,
    pub head: UncertaintyHead,
}

impl Run {
    pub fn init(manifest: &RunManifest) -> Result<Self> {
        manifest.validate()?;
        let cfg = manifest.net_config()?;
        let root = Rng::new(manifest.seed);
        let net = Denoiser::new(cfg.clone(), &mut root.fork(streams::INIT))?;
        let head = UncertaintyHead::new(manifest.u_channels, &mut root.fork(streams::HEAD))?;
        let data = manifest.dataset(cfg.sigma_data)?;
        Ok(Self {
            manifest: manifest.clone(),
            cfg,
            data,
            net,
            head,
        })
    }

    /// Noisy probe batch at `sigma = sigma_data` used for magnitude rows.
    pub fn probe(&self) -> (Tensor, Vec<f64>, Option<Tensor>) {
        let mut rng = Rng::new(self.manifest.seed).fork(streams::PROBE);
        let (y, labels) = self.data.sample(PROBE_BATCH, &mut rng);
        let sd = self.cfg.sigma_data;
        let noise = Tensor::randn(y.shape(), &mut rng).scale(sd);
        (y.add(&noise).unwrap(), vec![sd; PROBE_BATCH], labels)
    }
}

/// The `U_SAMPLES` log-spaced noise levels at which `u` is logged, spanning
/// two standard deviations of the training distribution.
pub fn u_sigmas(dist: &NoiseDist) -> Vec<f64> {
    let (a, b) = (dist.p_mean - 2.0 * dist.p_std, dist.p_mean + 2.0 * dist.p_std);
    (0..U_SAMPLES)
        .map(|i| (a + (b - a) * i as f64 / (U_SAMPLES - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Header of the metrics CSV for `run`.
pub fn metrics_header(run: &Run) -> Result<Vec<String>> {
    let (x, s, l) = run.probe();
    let rep = measure_magnitudes(&run.net, &x, &s, l.as_ref())?;
    let mut h = vec!["step".to_string(), "loss".into(), "lr".into()];
    h.extend(rep.columns());
    h.extend(u_sigmas(&run.manifest.noise()?).iter().map(|s| format!("u_sigma_{s:.4}")));
    Ok(h)
}

fn metrics_row(run: &Run, step: u64, loss: f64, lr: f64) -> Result<Vec<f64>> {
    let (x, s, l) = run.probe();
    let rep = measure_magnitudes(&run.net, &x, &s, l.as_ref())?;
    let mut row = vec![step as f64, loss, lr];
    row.extend(rep.values());
    row.extend(run.head.u(&u_sigmas(&run.manifest.noise()?))?);
    Ok(row)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the store, CSVs and copies of the manifest. Nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Print a progress line to stderr every this many steps.
    pub log_every: Option<u64>,
}

pub struct TrainOutcome {
    pub run: Run,
    /// Every tracked profile; the first `ema_gammas.len()` go to the store,
    /// the rest are the hidden ones.
    pub ema: EmaTracker,
    pub metrics: MetricsTable,
    pub sigma_buckets: SigmaBuckets,
    pub store: Option<SnapshotStore>,
    /// Steps whose update was skipped because the loss was not finite.
    pub skipped_steps: u64,
    /// Weighted loss of every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn checksum(&self) -> u64 {
        self.run.net.params.checksum()
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SIGMA_FILE: &str = "loss_by_sigma.csv";
pub const MANIFEST_FILE: &str = "run.manifest";
pub const STORE_DIR: &str = "snapshots";
pub const FINAL_FILE: &str = "final.phema";

pub fn hidden_path(dir: &Path, gamma: f64) -> PathBuf {
    dir.join(format!("hidden-gamma{gamma}.phema"))
}

pub fn train(manifest: &RunManifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut run = Run::init(manifest)?;
    let m = run.manifest.clone();
    let sd = run.cfg.sigma_data;
    let dist = m.noise()?;
    let sched = m.schedule();
    let forced = run.cfg.weights == WeightNormMode::Forced;

    let store = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            m.save(&dir.join(MANIFEST_FILE))?;
            Some(SnapshotStore::create(dir.join(STORE_DIR))?)
        }
        None => None,
    };
    let mut store = store;

    let profiles: Vec<EmaProfile> = m
        .ema_gammas
        .iter()
        .chain(&m.hidden_gammas)
        .map(|&g| EmaProfile::power(g))
        .collect::<Result<_>>()?;
    let mut ema = EmaTracker::new(&run.net.params, &profiles);

    let root = Rng::new(m.seed);
    let mut data_rng = root.fork(streams::DATA);
    let mut noise_rng = root.fork(streams::NOISE);
    let mut drop_rng = root.fork(streams::DROPOUT);

    let mut adam = AdamState::new(&run.net.params, AdamConfig::default());
    let mut head_adam = AdamState::new(&run.head.params, AdamConfig::default());
    let mut metrics = MetricsTable {
        header: metrics_header(&run)?,
        rows: vec![],
    };
    let mut buckets = SigmaBuckets::log_spaced(0.002, 80.0, 16);
    let mut losses = Vec::with_capacity(m.steps as usize);
    let (mut since_row, mut n_since) = (0.0, 0usize);
    let (mut consecutive_bad, mut skipped) = (0u32, 0u64);

    for step in 1..=m.steps {
        if forced {
            forced_renormalize(&mut run.net.params);
            forced_renormalize(&mut run.head.params);
        }
        let (clean, labels) = run.data.sample(m.batch, &mut data_rng);
        let lr = lr_at(step as f64, &sched);
        let (total, grads, head_grads, sigma, per_elem, u) = {
            let tape = Tape::new();
            let vars = run.net.bind(&tape, true);
            let uw = run.head.bind(&tape, true);
            let net = &run.net;
            let wl = weighted_loss(
                |x, s| net.denoise_var(&vars, x, s, labels.as_ref(), &mut ForwardOptions::train(&mut drop_rng)),
                &run.head,
                uw,
                tape.constant(clean),
                &dist,
                sd,
                &mut noise_rng,
            )?;
            let total = wl.total.item();
            let mut g = tape.backward(wl.total);
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(net.params.iter())
                .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect();
            let hg = vec![g
                .take(uw)
                .unwrap_or_else(|| Tensor::zeros(run.head.params.get(0).value.shape()))];
            (total, grads, hg, wl.sigma, wl.per_elem, wl.u)
        };
        losses.push(total);
        if total.is_finite() {
            consecutive_bad = 0;
            let (mut grads, mut head_grads) = (grads, head_grads);
            sanitize_grads(&mut grads);
            sanitize_grads(&mut head_grads);
            adam_step(&mut run.net.params, &grads, &mut adam, lr)?;
            adam_step(&mut run.head.params, &head_grads, &mut head_adam, lr)?;
            for ((&s, &l), &uu) in sigma.iter().zip(&per_elem).zip(&u) {
                buckets.record(s, l, uu, sd)?;
            }
            since_row += total;
            n_since += 1;
        } else {
            consecutive_bad += 1;
            skipped += 1;
            if consecutive_bad > m.nonfinite_patience {
                return Err(Error::NonFinite(format!(
                    "loss not finite for {consecutive_bad} consecutive steps ending at step {step}; \
                     last sigma batch {sigma:?}, lr {lr}, preset {}",
                    m.preset
                )));
            }
        }
        ema.update(&run.net.params)?;

        if let Some(store) = store.as_mut() {
            if step % m.snapshot_every == 0 || step == m.steps {
                for tr in &ema.tracks[..m.ema_gammas.len()] {
                    let EmaProfile::Power { gamma } = tr.profile else { unreachable!() };
                    store.write(&Snapshot::from_params(step, gamma, &tr.params), m.precision)?;
                }
            }
        }
        if step % m.metrics_every == 0 || step == m.steps {
            let loss = if n_since > 0 { since_row / n_since as f64 } else { f64::NAN };
            metrics.rows.push(metrics_row(&run, step, loss, lr)?);
            since_row = 0.0;
            n_since = 0;
        }
        if let Some(every) = opts.log_every {
            if step % every == 0 {
                eprintln!("step {step}/{} loss {total:.5} lr {lr:.3e}", m.steps);
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join(METRICS_FILE), metrics.to_csv())?;
        std::fs::write(dir.join(SIGMA_FILE), buckets.to_csv())?;
        if m.steps > 0 {
            write_snapshot(
                &dir.join(FINAL_FILE),
                &Snapshot::from_params(m.steps, 0.0, &run.net.params),
                Precision::F32,
            )?;
            for tr in &ema.tracks[m.ema_gammas.len()..] {
                let EmaProfile::Power { gamma } = tr.profile else { unreachable!() };
                write_snapshot(
                    &hidden_path(dir, gamma),
                    &Snapshot::from_params(m.steps, gamma, &tr.params),
                    Precision::F32,
                )?;
            }
        }
    }

    Ok(TrainOutcome {
        run,
        ema,
        metrics,
        sigma_buckets: buckets,
        store,
        skipped_steps: skipped,
        losses,
    })
}

/// Held-out `mean[lambda(sigma) * L(sigma)]` on a fixed batch from the
/// validation stream. Lower is better; an ideal Gaussian denoiser scores 1.
pub fn validation_loss(run: &Run, net: &Denoiser, n: usize) -> Result<f64> {
    let mut rng = Rng::new(run.manifest.seed).fork(streams::VALIDATION);
    let dist = run.manifest.noise()?;
    let sd = run.cfg.sigma_data;
    let (y, labels) = run.data.sample(n, &mut rng);
    let sigma = dist.sample_n(&mut rng, n);
    let d = run.data.dim();
    let mut x = Tensor::randn(y.shape(), &mut rng);
    for (row, s) in x.data_mut().chunks_mut(d).zip(&sigma) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    let x = x.add(&y)?;
    let den = net.denoise(&x, &sigma, labels.as_ref())?;
    let mut acc = 0.0;
    for ((a, b), &s) in den.data().chunks(d).zip(y.data().chunks(d)).zip(&sigma) {
        let l = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / d as f64;
        acc += lambda_weight(s, sd)? * l;
    }
    Ok(acc / n as f64)
}
