//! Run manifests as line-oriented `key=value` text.

use std::fmt::Write as _;
use std::path::Path;

use super::dataset::{DataKind, SyntheticDataset};
use crate::ema::Precision;
use crate::error::{Error, Result};
use crate::loss::{NoiseDist, UncertaintyHead};
use crate::network::{NetConfig, Preset};
use crate::optim::LrSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub preset: Preset,
    pub resolution: usize,
    pub img_channels: usize,
    pub channels: Vec<usize>,
    pub num_blocks: usize,
    pub attn_levels: Vec<usize>,
    /// Overrides the preset's dropout when set.
    pub dropout: Option<f64>,
    pub dataset: DataKind,
    pub classes: usize,
    pub steps: u64,
    pub batch: usize,
    pub alpha_ref: f64,
    /// `None` keeps the learning rate constant.
    pub t_ref: Option<f64>,
    pub rampup: u64,
    pub p_mean: f64,
    pub p_std: f64,
    /// Profiles written to the snapshot store.
    pub ema_gammas: Vec<f64>,
    /// Extra profiles tracked directly and saved next to the store, for checking reconstructions.
    pub hidden_gammas: Vec<f64>,
    pub snapshot_every: u64,
    pub precision: Precision,
    pub metrics_every: u64,
    pub seed: u64,
    pub u_channels: usize,
    /// Abort after this many consecutive non-finite losses.
    pub nonfinite_patience: u32,
}

impl RunManifest {
    /// Toy defaults for `preset`.
    pub fn toy(preset: Preset) -> Self {
        Self {
            preset,
            resolution: 16,
            img_channels: 1,
            channels: vec![8, 16],
            num_blocks: 1,
            attn_levels: vec![1],
            dropout: None,
            dataset: DataKind::Blobs,
            classes: 0,
            steps: 2000,
            batch: 8,
            alpha_ref: preset.alpha_ref(),
            t_ref: preset.decays().then_some(1000.0),
            rampup: 100,
            p_mean: -0.4,
            p_std: 1.0,
            ema_gammas: vec![16.97, 6.94],
            hidden_gammas: vec![],
            snapshot_every: 256,
            precision: Precision::F32,
            metrics_every: 64,
            seed: 0,
            u_channels: UncertaintyHead::DEFAULT_CHANNELS,
            nonfinite_patience: 8,
        }
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let mut c = NetConfig::toy(self.preset);
        c.img_resolution = self.resolution;
        c.img_channels = self.img_channels;
        c.label_dim = self.classes;
        c.channels = self.channels.clone();
        c.num_blocks = self.num_blocks;
        c.attn_levels = self.attn_levels.clone();
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn schedule(&self) -> LrSchedule {
        let s = match self.t_ref {
            Some(t) => LrSchedule::inverse_sqrt(self.alpha_ref, t),
            None => LrSchedule::constant(self.alpha_ref),
        };
        s.with_rampup(self.rampup)
    }

    pub fn noise(&self) -> Result<NoiseDist> {
        NoiseDist::new(self.p_mean, self.p_std)
    }

    pub fn dataset(&self, sigma_data: f64) -> Result<SyntheticDataset> {
        SyntheticDataset::new(self.dataset, self.resolution, self.img_channels, self.classes, sigma_data)
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config()?;
        self.schedule().validate()?;
        self.noise()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.snapshot_every == 0 || self.metrics_every == 0 {
            return Err(Error::Config("snapshot_every and metrics_every must be positive".into()));
        }
        for &g in self.ema_gammas.iter().chain(&self.hidden_gammas) {
            crate::ema::EmaProfile::power(g)?;
        }
        if self.u_channels == 0 {
            return Err(Error::Config("u_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let flist = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("preset", self.preset.letter().to_string());
        kv("resolution", self.resolution.to_string());
        kv("img_channels", self.img_channels.to_string());
        kv("channels", list(&self.channels));
        kv("num_blocks", self.num_blocks.to_string());
        kv("attn_levels", list(&self.attn_levels));
        kv("dropout", self.dropout.map_or("preset".into(), |d| d.to_string()));
        kv("dataset", self.dataset.to_string());
        kv("classes", self.classes.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("alpha_ref", self.alpha_ref.to_string());
        kv("t_ref", self.t_ref.map_or("none".into(), |t| t.to_string()));
        kv("rampup", self.rampup.to_string());
        kv("p_mean", self.p_mean.to_string());
        kv("p_std", self.p_std.to_string());
        kv("ema_gammas", flist(&self.ema_gammas));
        kv("hidden_gammas", flist(&self.hidden_gammas));
        kv("snapshot_every", self.snapshot_every.to_string());
        kv("precision", if self.precision == Precision::F16 { "16" } else { "32" }.into());
        kv("metrics_every", self.metrics_every.to_string());
        kv("seed", self.seed.to_string());
        kv("u_channels", self.u_channels.to_string());
        kv("nonfinite_patience", self.nonfinite_patience.to_string());
        s
    }

    /// Parses `key=value` lines. `preset` is read first; other keys override its defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("manifest line {}: expected key=value", ln + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Preset::G);
        let mut m = Self::toy(preset);
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("bad value for {k}: {v:?}")))
        }
        fn nums<T: std::str::FromStr>(k: &str, v: &str) -> Result<Vec<T>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| num(k, x.trim())).collect()
        }
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "preset" => {}
                "resolution" => m.resolution = num(k, v)?,
                "img_channels" => m.img_channels = num(k, v)?,
                "channels" => m.channels = nums(k, v)?,
                "num_blocks" => m.num_blocks = num(k, v)?,
                "attn_levels" => m.attn_levels = nums(k, v)?,
                "dropout" => m.dropout = if v == "preset" { None } else { Some(num(k, v)?) },
                "dataset" => m.dataset = v.parse()?,
                "classes" => m.classes = num(k, v)?,
                "steps" => m.steps = num(k, v)?,
                "batch" => m.batch = num(k, v)?,
                "alpha_ref" => m.alpha_ref = num(k, v)?,
                "t_ref" => m.t_ref = if v == "none" { None } else { Some(num(k, v)?) },
                "rampup" => m.rampup = num(k, v)?,
                "p_mean" => m.p_mean = num(k, v)?,
                "p_std" => m.p_std = num(k, v)?,
                "ema_gammas" => m.ema_gammas = nums(k, v)?,
                "hidden_gammas" => m.hidden_gammas = nums(k, v)?,
                "snapshot_every" => m.snapshot_every = num(k, v)?,
                "precision" => m.precision = v.parse()?,
                "metrics_every" => m.metrics_every = num(k, v)?,
                "seed" => m.seed = num(k, v)?,
                "u_channels" => m.u_channels = num(k, v)?,
                "nonfinite_patience" => m.nonfinite_patience = num(k, v)?,
                _ => return Err(Error::Parse(format!("unknown manifest key {k:?}"))),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
