//! Named parameter sets shared by every trainable upsampler.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "parameter of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Param { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered map from globally unique parameter names to arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        if param.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {name} has non-finite values")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Data of `name`, checked against the expected shape.
    pub fn data(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let p = self.get(name)?;
        if p.shape != shape {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                p.shape
            )));
        }
        Ok(&p.data)
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(&mut self.get_mut(name)?.data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names with zero-filled arrays.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Param::zeros(v.shape.clone())))
                .collect(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(format!(
                "parameter sets differ in size ({} vs {})",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::invalid(format!("parameter name mismatch: {ka} vs {kb}")));
            }
            if va.shape != vb.shape {
                return Err(Error::invalid(format!(
                    "parameter {ka} shape mismatch: {:?} vs {:?}",
                    va.shape, vb.shape
                )));
            }
        }
        Ok(())
    }

    /// `self += scale · other` over matching parameters.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.entries.values_mut() {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Total scalar parameter count.
pub fn param_count(params: &ParamSet) -> usize {
    params.entries.values().map(Param::len).sum()
}

/// Uniform init with variance `1 / fan_in`.
pub fn variance_scaled(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Param {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Param { shape, data }
}

pub fn constant(shape: Vec<usize>, value: f64) -> Param {
    let n = shape.iter().product();
    Param { shape, data: vec![value; n] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(param_count(&ParamSet::new()), 0);
        let mut p = ParamSet::new();
        p.insert("w", Param::zeros(vec![3, 4])).unwrap();
        p.insert("b", Param::zeros(vec![4])).unwrap();
        assert_eq!(param_count(&p), 16);
    }

    #[test]
    fn duplicate_and_shape_errors() {
        let mut p = ParamSet::new();
        p.insert("w", Param::zeros(vec![2])).unwrap();
        assert!(p.insert("w", Param::zeros(vec![2])).is_err());
        assert!(p.data("w", &[3]).is_err());
        assert!(p.get("nope").is_err());
        assert!(Param::new(vec![2, 2], vec![0.0; 3]).is_err());

        let mut q = ParamSet::new();
        q.insert("w", Param::zeros(vec![3])).unwrap();
        assert!(p.check_same_layout(&q).is_err());
    }
}
