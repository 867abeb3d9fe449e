use tensorad::{Real, Tensor};

use crate::error::{Error, Result};
use crate::rng::{Rng, STREAM_INIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std²) truncated at ±2 std.
    TruncNormal(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All learnable arrays, in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Draws every parameter from its own substream of `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.numel();
                let data = match s.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                    Init::TruncNormal(std) => {
                        let mut rng = Rng::substream(seed, &[STREAM_INIT, i as u64]);
                        (0..n).map(|_| F::from_f64(rng.trunc_normal(std)).unwrap()).collect()
                    }
                    Init::Normal(std) => {
                        let mut rng = Rng::substream(seed, &[STREAM_INIT, i as u64]);
                        (0..n).map(|_| F::from_f64(rng.normal() * std).unwrap()).collect()
                    }
                };
                Tensor::new(&s.shape, data).unwrap()
            })
            .collect();
        Self {
            specs: specs.to_vec(),
            tensors,
        }
    }

    pub fn from_tensors(specs: &[ParamSpec], tensors: Vec<Tensor<F>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::config("params", format!("{} tensors for {} parameters", tensors.len(), specs.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::config(
                    s.name.clone(),
                    format!("shape {:?}, expected {:?}", t.shape(), s.shape),
                ));
            }
        }
        Ok(Self {
            specs: specs.to_vec(),
            tensors,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
