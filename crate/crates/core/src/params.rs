//! Named, shaped learnable parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Parameters in registration order; names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Glorot/Xavier uniform on (fan_in = rows, fan_out = cols).
    Xavier,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let value = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Constant(v) => Mat::filled(rows, cols, v),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                Mat::from_vec(rows, cols, data)
            }
            Init::Normal(sd) => {
                let normal = Normal::new(0.0, sd).expect("valid sd");
                let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
                Mat::from_vec(rows, cols, data)
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero-valued gradient buffers with matching shapes.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.params
            .iter()
            .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.norm_sq().sqrt()))
            .collect()
    }
}
