//! Binary snapshot files and a directory store with a text manifest.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PHEMA1" | u16 version | u8 precision bits (16|32) | u8 time unit (0 = steps) | u32 records
//! record: u32 name_len | name | u32 rank | u64 extents[rank] | f64 gamma | u64 t | payload | u32 crc32
//! ```
//!
//! The record CRC covers everything from `name_len` through the payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use half::f16;

use super::posthoc::{fit_residual, solve_posthoc_weights, ProfileAt};
use super::EmaProfile;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PHEMA1";
pub const FORMAT_VERSION: u16 = 1;
const TIME_UNIT_STEPS: u8 = 0;
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F16,
    F32,
}

impl Precision {
    fn bits(self) -> u8 {
        match self {
            Precision::F16 => 16,
            Precision::F32 => 32,
        }
    }

    fn from_bits(b: u8) -> Result<Self> {
        match b {
            16 => Ok(Precision::F16),
            32 => Ok(Precision::F32),
            _ => Err(Error::Corrupt(format!("unknown precision {b}"))),
        }
    }

    /// Value after a round trip through storage.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F16 => f16::from_f64(v).to_f64(),
            Precision::F32 => v as f32 as f64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "16" | "f16" | "fp16" => Ok(Precision::F16),
            "32" | "f32" | "fp32" => Ok(Precision::F32),
            _ => Err(Error::Parse(format!("precision must be 16 or 32, got {s}"))),
        }
    }
}

/// Pre-averaged parameters `theta_hat_gamma(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: u64,
    pub gamma: f64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn from_params(t: u64, gamma: f64, params: &ParamSet) -> Self {
        Self {
            t,
            gamma,
            tensors: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn profile(&self) -> ProfileAt {
        ProfileAt::power(self.t as f64, self.gamma)
    }
}

fn encode(snap: &Snapshot, precision: Precision) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(precision.bits());
    buf.push(TIME_UNIT_STEPS);
    buf.extend_from_slice(&(snap.tensors.len() as u32).to_le_bytes());
    for (name, t) in &snap.tensors {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("tensor {name} at t={}", snap.t)));
        }
        let start = buf.len();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.extend_from_slice(&snap.gamma.to_le_bytes());
        buf.extend_from_slice(&snap.t.to_le_bytes());
        for &v in t.data() {
            match precision {
                Precision::F16 => buf.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        let crc = crc32fast::hash(&buf[start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("truncated snapshot file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(buf: &[u8], path: &Path) -> Result<(Snapshot, Precision)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Corrupt(format!("{} is not a snapshot file", path.display())));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let precision = Precision::from_bits(r.u8()?)?;
    let unit = r.u8()?;
    if unit != TIME_UNIT_STEPS {
        return Err(Error::Corrupt(format!("unknown time unit {unit}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut header: Option<(f64, u64)> = None;
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let gamma = r.f64()?;
        let t = r.u64()?;
        let n: usize = shape.iter().product();
        let width = if precision == Precision::F16 { 2 } else { 4 };
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let found = crc32fast::hash(&buf[start..r.pos]);
        let expected = r.u32()?;
        if found != expected {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        let data = match precision {
            Precision::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        match header {
            None => header = Some((gamma, t)),
            Some((g, tt)) if g.to_bits() != gamma.to_bits() || tt != t => {
                return Err(Error::Corrupt(format!("record {name} disagrees on (t, gamma)")));
            }
            _ => {}
        }
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes after last record".into()));
    }
    let (gamma, t) = header.unwrap_or((0.0, 0));
    Ok((Snapshot { t, gamma, tensors }, precision))
}

/// Writes a snapshot file and returns the CRC32 of the whole file.
pub fn write_snapshot(path: &Path, snap: &Snapshot, precision: Precision) -> Result<u32> {
    let buf = encode(snap, precision)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(crc32fast::hash(&buf))
}

pub fn read_snapshot(path: &Path) -> Result<(Snapshot, Precision)> {
    let buf = fs::read(path)?;
    decode(&buf, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub t: u64,
    pub gamma: f64,
    /// Relative to the store directory.
    pub file: String,
    pub crc: u32,
}

impl ManifestEntry {
    pub fn profile(&self) -> ProfileAt {
        ProfileAt::power(self.t as f64, self.gamma)
    }
}

/// Line-oriented `t=<int> gamma=<real> file=<path> crc=<hex>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (mut t, mut gamma, mut file, mut crc) = (None, None, None, None);
            for field in line.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("manifest line {}: bad field {field}", ln + 1)))?;
                let bad = |_| Error::Parse(format!("manifest line {}: bad value {field}", ln + 1));
                match k {
                    "t" => t = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                    "gamma" => gamma = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                    "file" => file = Some(v.to_string()),
                    "crc" => crc = Some(u32::from_str_radix(v, 16).map_err(|e| bad(e.to_string()))?),
                    _ => return Err(Error::Parse(format!("manifest line {}: unknown key {k}", ln + 1))),
                }
            }
            match (t, gamma, file, crc) {
                (Some(t), Some(gamma), Some(file), Some(crc)) => entries.push(ManifestEntry { t, gamma, file, crc }),
                _ => return Err(Error::Parse(format!("manifest line {}: missing field", ln + 1))),
            }
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("t={} gamma={} file={} crc={:08x}\n", e.t, e.gamma, e.file, e.crc))
            .collect()
    }
}

/// `*` matches any run of characters, `?` exactly one.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Reconstructed parameters plus the profile-space residual of each target used.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub tensors: Vec<(String, Tensor)>,
    /// `(target description, residual)`, the global target first.
    pub residuals: Vec<(String, f64)>,
    /// Weights of the global target, one per manifest entry.
    pub weights: Vec<f64>,
}

impl Reconstruction {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Directory of snapshot files plus `manifest.txt`.
#[derive(Clone, Debug)]
pub struct SnapshotStore {
    dir: PathBuf,
    manifest: Manifest,
}

impl SnapshotStore {
    /// Creates `dir` if needed and starts an empty manifest, replacing any old one.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let s = Self {
            dir,
            manifest: Manifest::default(),
        };
        s.save_manifest()?;
        Ok(s)
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(Self {
            manifest: Manifest::parse(&text)?,
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    fn save_manifest(&self) -> Result<()> {
        let tmp = self.dir.join("manifest.txt.tmp");
        fs::write(&tmp, self.manifest.render())?;
        fs::rename(tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }

    /// Appends a snapshot. Times must not decrease, and a `(t, gamma)` pair may
    /// appear only once.
    pub fn write(&mut self, snap: &Snapshot, precision: Precision) -> Result<&ManifestEntry> {
        if snap.t == 0 {
            return Err(Error::Contract("snapshots need t >= 1".into()));
        }
        if let Some(last) = self.manifest.entries.last() {
            if snap.t < last.t {
                return Err(Error::Contract(format!("snapshot t={} after t={}", snap.t, last.t)));
            }
        }
        if self
            .manifest
            .entries
            .iter()
            .any(|e| e.t == snap.t && e.gamma.to_bits() == snap.gamma.to_bits())
        {
            return Err(Error::Contract(format!("duplicate snapshot t={} gamma={}", snap.t, snap.gamma)));
        }
        let idx = self.manifest.entries.iter().filter(|e| e.t == snap.t).count();
        let file = format!("snap-{:010}-{idx}.phema", snap.t);
        let crc = write_snapshot(&self.dir.join(&file), snap, precision)?;
        self.manifest.entries.push(ManifestEntry {
            t: snap.t,
            gamma: snap.gamma,
            file,
            crc,
        });
        self.save_manifest()?;
        Ok(self.manifest.entries.last().unwrap())
    }

    /// Loads entry `i`, checking the whole-file CRC recorded in the manifest.
    pub fn load(&self, i: usize) -> Result<Snapshot> {
        let e = self
            .manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no snapshot {i}")))?;
        let path = self.dir.join(&e.file);
        let buf = fs::read(&path)?;
        let found = crc32fast::hash(&buf);
        if found != e.crc {
            return Err(Error::Checksum {
                path,
                expected: e.crc,
                found,
            });
        }
        let (snap, _) = decode(&buf, &path)?;
        if snap.t != e.t || snap.gamma.to_bits() != e.gamma.to_bits() {
            return Err(Error::Corrupt(format!("{} does not match its manifest entry", e.file)));
        }
        Ok(snap)
    }

    pub fn profiles(&self) -> Vec<ProfileAt> {
        self.manifest.entries.iter().map(|e| e.profile()).collect()
    }

    /// Post-hoc average for `target`. Tensors whose names match an override
    /// pattern use that override's profile instead (first match wins).
    pub fn reconstruct(&self, target: ProfileAt, overrides: &[(String, ProfileAt)]) -> Result<Reconstruction> {
        if self.is_empty() {
            return Err(Error::Contract("snapshot store is empty".into()));
        }
        let last = self.manifest.entries.last().unwrap().t as f64;
        for p in std::iter::once(&target).chain(overrides.iter().map(|(_, p)| p)) {
            if p.t > last {
                return Err(Error::Extrapolation { target: p.t, last });
            }
        }
        let snaps = self.profiles();
        let mut targets = vec![target];
        targets.extend(overrides.iter().map(|(_, p)| *p));
        let x = solve_posthoc_weights(&snaps, &targets)?;

        let mut residuals = Vec::with_capacity(targets.len());
        for (r, p) in targets.iter().enumerate() {
            let col: Vec<f64> = x.column(r).iter().copied().collect();
            let label = if r == 0 {
                format!("global {}", describe(p))
            } else {
                format!("{} {}", overrides[r - 1].0, describe(p))
            };
            residuals.push((label, fit_residual(&snaps, p, &col)));
        }

        let mut acc: Vec<(String, Tensor)> = Vec::new();
        let mut choice: Vec<usize> = Vec::new();
        for i in 0..self.len() {
            let snap = self.load(i)?;
            if i == 0 {
                for (name, t) in &snap.tensors {
                    let r = overrides
                        .iter()
                        .position(|(pat, _)| glob_match(pat, name))
                        .map_or(0, |k| k + 1);
                    choice.push(r);
                    acc.push((name.clone(), Tensor::zeros(t.shape())));
                }
            }
            for ((name, sum), &r) in acc.iter_mut().zip(&choice) {
                let t = snap.get(name).ok_or_else(|| {
                    Error::Corrupt(format!("tensor {name} missing from {}", self.manifest.entries[i].file))
                })?;
                if t.shape() != sum.shape() {
                    return Err(Error::Corrupt(format!(
                        "tensor {name} has shape {:?} in {}, expected {:?}",
                        t.shape(),
                        self.manifest.entries[i].file,
                        sum.shape()
                    )));
                }
                sum.axpy(x[(i, r)], t)?;
            }
        }
        Ok(Reconstruction {
            tensors: acc,
            residuals,
            weights: x.column(0).iter().copied().collect(),
        })
    }
}

fn describe(p: &ProfileAt) -> String {
    match p.profile {
        EmaProfile::Power { gamma } => format!("t={} gamma={gamma}", p.t),
        EmaProfile::Exponential { half_life } => format!("t={} half_life={half_life}", p.t),
    }
}
