//! Named trainable parameters shared by the network, optimizer and EMA.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm guard used when a weight vector is normalized.
pub const WEIGHT_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or fully-connected weight, `[out, fan_in...]`.
    Weight,
    /// Learned scalar gain.
    Gain,
    Bias,
    /// Learned per-channel normalization scale.
    NormScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        Self {
            name: name.into(),
            kind,
            value,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.value.shape().first().copied().unwrap_or(1)
    }

    /// Elements per output channel.
    pub fn fan_in(&self) -> usize {
        self.value.len() / self.out_channels().max(1)
    }

    /// Whether forced weight normalization applies: weights with fan-in of at
    /// least two. Gains, biases and scales are left alone.
    pub fn is_forced_normalizable(&self) -> bool {
        self.kind == ParamKind::Weight && self.fan_in() >= 2
    }

    /// Per-output-channel L2 norms.
    pub fn row_norms(&self) -> Vec<f64> {
        let m = self.fan_in();
        self.value
            .data()
            .chunks(m.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Unit-norm view of each output channel, `w / max(||w||, eps)`.
    pub fn normalized(&self) -> Tensor {
        let m = self.fan_in().max(1);
        let mut t = self.value.clone();
        for row in t.data_mut().chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(WEIGHT_EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    /// Rescales every output channel to norm `sqrt(fan_in)`. All-zero rows
    /// are left untouched.
    pub fn force_normalize(&mut self) {
        let m = self.fan_in().max(1);
        let target = (m as f64).sqrt();
        for row in self.value.data_mut().chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                let c = target / n;
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Param) -> Result<usize> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
        }
        let i = self.params.len();
        self.index.insert(p.name.clone(), i);
        self.params.push(p);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Like [`load_values`](Self::load_values) for a list of named tensors.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let src = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("load_tensors", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Applies forced weight normalization to every eligible weight.
    pub fn force_normalize_weights(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.is_forced_normalizable()) {
            p.force_normalize();
        }
    }

    /// Flattened copy of all parameter values, in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_normalization_hits_sqrt_fan_in() {
        let mut p = Param::new(
            "w",
            ParamKind::Weight,
            Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| i as f64 - 4.5).collect()).unwrap(),
        );
        assert_eq!(p.fan_in(), 9);
        p.force_normalize();
        for n in p.row_norms() {
            assert!((n - 3.0).abs() < 1e-9);
        }
        let before = p.value.clone();
        p.force_normalize();
        for (a, b) in p.value.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_view_has_unit_rows() {
        let p = Param::new(
            "w",
            ParamKind::Weight,
            Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap(),
        );
        assert_eq!(p.normalized().data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn gains_are_not_forced() {
        let p = Param::new("g", ParamKind::Gain, Tensor::scalar(0.0));
        assert!(!p.is_forced_normalizable());
    }
}
