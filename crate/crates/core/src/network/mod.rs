//! Configurable toy U-Net denoiser.
//!
//! Every preset shares one block topology (resample, optional skip
//! projection, residual branch, optional attention). The variant flags
//! switch each operation between its baseline and magnitude-preserving form.

mod denoiser;
mod magnitude;

pub use denoiser::{precondition, scale_samples, Denoiser, ForwardOptions, Precond, Probe};
pub use magnitude::{measure_magnitudes, BucketStats, MagnitudeReport};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mp_ops::{AttentionMode, WeightMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupNormMode {
    /// Mean subtraction plus learned scale (and bias when biases are on).
    Learned,
    /// Divide by group RMS only.
    Simplified,
    /// No group norm; pixel norm at the start of encoder blocks.
    PixelNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightNormMode {
    Plain,
    /// Normalized at use time.
    Normalized,
    /// Normalized at use time and re-projected to `sqrt(fan_in)` every step.
    Forced,
}

impl WeightNormMode {
    pub fn apply_mode(self) -> WeightMode {
        match self {
            WeightNormMode::Plain => WeightMode::Plain,
            _ => WeightMode::Normalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedFnMode {
    Plain,
    /// MP-SiLU, MP-Sum, MP-Cat, MP-Fourier and learned gains.
    Mp,
}

/// Named presets reproducing the ablation ladder at toy scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::B, Preset::C, Preset::D, Preset::E, Preset::F, Preset::G];

    pub fn letter(self) -> char {
        match self {
            Preset::B => 'B',
            Preset::C => 'C',
            Preset::D => 'D',
            Preset::E => 'E',
            Preset::F => 'F',
            Preset::G => 'G',
        }
    }

    /// Reference learning rate.
    pub fn alpha_ref(self) -> f64 {
        match self {
            Preset::B | Preset::C => 2e-4,
            _ => 1e-2,
        }
    }

    /// Whether the learning rate decays (E onward).
    pub fn decays(self) -> bool {
        matches!(self, Preset::E | Preset::F | Preset::G)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_uppercase();
        let s = s.strip_prefix("CONFIG_").unwrap_or(&s);
        match s {
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            "F" => Ok(Preset::F),
            "G" => Ok(Preset::G),
            _ => Err(Error::Parse(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub img_resolution: usize,
    pub img_channels: usize,
    /// 0 for an unconditional model.
    pub label_dim: usize,
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub num_blocks: usize,
    /// Levels that get self-attention.
    pub attn_levels: Vec<usize>,
    /// Channels per group; `None` means `min(32, channels)`.
    pub group_size: Option<usize>,
    pub channels_per_head: usize,
    pub emb_channels: usize,
    pub fourier_channels: usize,
    pub t_res: f64,
    pub t_emb: f64,
    pub t_cat: f64,
    pub dropout: f64,
    pub sigma_data: f64,
    pub biases: bool,
    pub group_norm: GroupNormMode,
    pub attention: AttentionMode,
    pub weights: WeightNormMode,
    pub fixed_fn: FixedFnMode,
    /// Append a constant-1 input channel.
    pub const_channel: bool,
    /// Zero-initialize the last layer of each residual branch and the output.
    pub zero_init: bool,
}

impl NetConfig {
    /// 16x16, widths (8, 16), one block per level, attention at the lowest level.
    pub fn toy(preset: Preset) -> Self {
        let mut c = Self {
            img_resolution: 16,
            img_channels: 1,
            label_dim: 0,
            channels: vec![8, 16],
            num_blocks: 1,
            attn_levels: vec![1],
            group_size: None,
            channels_per_head: 16,
            emb_channels: 32,
            fourier_channels: 16,
            t_res: 0.3,
            t_emb: 0.5,
            t_cat: 0.5,
            dropout: 0.1,
            sigma_data: 0.5,
            biases: true,
            group_norm: GroupNormMode::Learned,
            attention: AttentionMode::Dot,
            weights: WeightNormMode::Plain,
            fixed_fn: FixedFnMode::Plain,
            const_channel: false,
            zero_init: true,
        };
        c.apply_preset(preset);
        c
    }

    /// Sets the variant flags of `preset`, leaving sizes alone.
    pub fn apply_preset(&mut self, preset: Preset) {
        use Preset::*;
        let at_least = |p: Preset| preset as u8 >= p as u8;
        self.biases = !at_least(C);
        self.group_norm = if at_least(F) {
            GroupNormMode::PixelNorm
        } else if at_least(C) {
            GroupNormMode::Simplified
        } else {
            GroupNormMode::Learned
        };
        self.attention = if at_least(C) { AttentionMode::Cosine } else { AttentionMode::Dot };
        self.weights = if at_least(E) {
            WeightNormMode::Forced
        } else if at_least(D) {
            WeightNormMode::Normalized
        } else {
            WeightNormMode::Plain
        };
        self.fixed_fn = if at_least(G) { FixedFnMode::Mp } else { FixedFnMode::Plain };
        self.const_channel = at_least(C);
        self.zero_init = !at_least(C);
        self.dropout = if at_least(G) { 0.0 } else { 0.1 };
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn resolution_at(&self, level: usize) -> usize {
        self.img_resolution >> level
    }

    pub fn group_size_for(&self, channels: usize) -> usize {
        self.group_size.unwrap_or(32).min(channels)
    }

    pub fn heads_for(&self, channels: usize) -> usize {
        (channels / self.channels_per_head.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, t) in [("t_res", self.t_res), ("t_emb", self.t_emb), ("t_cat", self.t_cat)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} = {t} outside [0, 1]"));
            }
        }
        if !(self.sigma_data > 0.0) {
            return bad(format!("sigma_data must be positive, got {}", self.sigma_data));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive".into());
        }
        if self.img_resolution % (1 << (self.levels() - 1)) != 0 {
            return bad(format!(
                "resolution {} not divisible by 2^{}",
                self.img_resolution,
                self.levels() - 1
            ));
        }
        if self.attn_levels.iter().any(|&l| l >= self.levels()) {
            return bad(format!("attention level out of range: {:?}", self.attn_levels));
        }
        if self.img_channels == 0 || self.emb_channels == 0 || self.fourier_channels == 0 {
            return bad("image, embedding and Fourier channel counts must be positive".into());
        }
        if self.group_norm != GroupNormMode::PixelNorm {
            for &c in &self.channels {
                let g = self.group_size_for(c);
                if c % g != 0 {
                    return bad(format!("{c} channels not divisible by group size {g}"));
                }
            }
        }
        for &l in &self.attn_levels {
            let c = self.channels[l];
            if c % self.heads_for(c) != 0 {
                return bad(format!("{c} channels not divisible into heads"));
            }
        }
        Ok(())
    }
}

/// Encoder or decoder half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Enc,
    Dec,
}

/// Resolution bucket for magnitude reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bucket {
    pub side: Side,
    pub level: usize,
}

impl Bucket {
    /// `enc16`, `dec8`, ...
    pub fn label(&self, cfg: &NetConfig) -> String {
        let s = match self.side {
            Side::Enc => "enc",
            Side::Dec => "dec",
        };
        format!("{s}{}", cfg.resolution_at(self.level))
    }

    /// Bucket owning a parameter, parsed from its `enc.<level>.` or `dec.<level>.` prefix.
    pub fn of_param(name: &str) -> Option<Bucket> {
        let mut it = name.split('.');
        let side = match it.next()? {
            "enc" => Side::Enc,
            "dec" => Side::Dec,
            _ => return None,
        };
        let level = it.next()?.parse().ok()?;
        Some(Bucket { side, level })
    }

    pub fn all(cfg: &NetConfig) -> Vec<Bucket> {
        let mut v = Vec::new();
        for side in [Side::Enc, Side::Dec] {
            for level in 0..cfg.levels() {
                v.push(Bucket { side, level });
            }
        }
        v
    }
}
