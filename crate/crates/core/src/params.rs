//! Named parameter collections shared by all models.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, ZptError};
use crate::tensor::{Gradients, Mat, Tape, Var};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.entries
            .get(name)
            .ok_or_else(|| ZptError::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Puts every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Collects gradients in parameter order, zero for unreached entries.
    pub fn grads(&self, params: &ParamSet, grads: &Gradients) -> Vec<Mat> {
        self.vars
            .iter()
            .map(|(name, &v)| grads.get_or_zeros(v, &params.entries[name.as_str()]))
            .collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Mat::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

/// Glorot-uniform weights.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Mat::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
