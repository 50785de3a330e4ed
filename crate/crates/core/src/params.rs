//! Named trainable parameters, their initialization, and the small layer
//! wrappers every block is assembled from.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::LN_EPS;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    /// Dotted hierarchical path, unique within a store.
    pub name: String,
    pub value: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            adam_m: value.zeros_like(),
            adam_v: value.zeros_like(),
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Graph<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if tape.is_recording() {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Graph { tape, vars }
    }

    /// Hex SHA-256 over names, shapes and values; equal checksums mean
    /// bit-identical weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        crate::data::hex(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    adam_m: p.adam_m.cast(),
                    adam_v: p.adam_v.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of a store bound to one tape.
pub struct Graph<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Graph<'t, T> {
    /// Builds a graph from existing vars, in store order.
    pub fn from_vars(tape: &'t Tape<T>, vars: Vec<Var<'t, T>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn input(&self, x: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(x)
    }
}

/// Weight initialization policies.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    /// Normal truncated to ±2 std.
    TruncNormal { std: f64 },
}

/// Creates parameters under a name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(self.rng.normal() * std)).collect()
            }
            Init::TruncNormal { std } => (0..n).map(|_| T::of(self.rng.trunc_normal(std))).collect(),
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, Tensor::new(shape, data)?)
    }

    /// Dense conv with Kaiming fan-in init and zero bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Conv> {
        let mut s = self.scope(name);
        Ok(Conv {
            weight: s.tensor("weight", &[c_out, c_in, k, k], Init::Kaiming { fan_in: c_in * k * k })?,
            bias: s.tensor("bias", &[c_out], Init::Zeros)?,
            padding: k / 2,
        })
    }

    /// Dense 1×1 channel projection with truncated-normal init.
    pub fn projection(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<Conv> {
        let mut s = self.scope(name);
        Ok(Conv {
            weight: s.tensor("weight", &[c_out, c_in, 1, 1], Init::TruncNormal { std: 0.02 })?,
            bias: s.tensor("bias", &[c_out], Init::Zeros)?,
            padding: 0,
        })
    }

    pub fn depthwise(&mut self, name: &str, channels: usize, k: usize) -> Result<DepthwiseConv> {
        let mut s = self.scope(name);
        Ok(DepthwiseConv {
            weight: s.tensor("weight", &[channels, 1, k, k], Init::Kaiming { fan_in: k * k })?,
            bias: s.tensor("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let mut s = self.scope(name);
        Ok(Linear {
            weight: s.tensor("weight", &[d_in, d_out], Init::TruncNormal { std: 0.02 })?,
            bias: if bias {
                Some(s.tensor("bias", &[d_out], Init::Zeros)?)
            } else {
                None
            },
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNorm> {
        let mut s = self.scope(name);
        Ok(LayerNorm {
            gamma: s.tensor("gamma", &[width], Init::Ones)?,
            beta: s.tensor("beta", &[width], Init::Zeros)?,
        })
    }
}

/// Stride-1 "same" convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv {
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(g.param(self.weight), Some(g.param(self.bias)), 1, self.padding)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.depthwise_conv2d(g.param(self.weight), Some(g.param(self.bias)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(g.param(self.weight), self.bias.map(|b| g.param(b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(g.param(self.gamma), g.param(self.beta), LN_EPS)
    }

    /// Normalizes an `(N,C,H,W)` map over channels at each position.
    pub fn forward_nchw<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.forward(g, x.permute(&[0, 2, 3, 1])?)?;
        y.permute(&[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0, Stream::Init);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut enc = b.scope("encoder");
        enc.conv("0", 2, 4, 3).unwrap();
        assert!(enc.conv("0", 2, 4, 3).is_err());
        assert!(store.by_name("encoder.0.weight").is_some());
        assert!(store.by_name("encoder.0.bias").is_some());
        // single conv3×3, 2→4 channels with bias
        assert_eq!(store.count(), 2 * 4 * 9 + 4);
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0, Stream::Init);
        ParamBuilder::new(&mut store, &mut rng).linear("fc", 10, 5, true).unwrap();
        assert_eq!(store.count(), 55);
    }

    #[test]
    fn moments_start_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(3, Stream::Init);
        ParamBuilder::new(&mut store, &mut rng)
            .tensor("w", &[3], Init::TruncNormal { std: 1.0 })
            .unwrap();
        let p = store.iter().next().unwrap();
        assert!(p.adam_m.data().iter().chain(p.adam_v.data()).all(|&v| v == 0.0));
    }
}
