use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors with stable dot-separated keys,
/// e.g. `e_i.stage2.conv1.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Scalar> ParamStore<T> {
    /// Each tensor draws from its own generator keyed by `(seed, name)`, so a
    /// parameter's initial value does not depend on which others exist.
    pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let params = specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::HeNormal { fan_in } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
                        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                            .expect("fan_in is positive");
                        (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                    }
                };
                let tensor = Tensor::from_vec(&spec.shape, data).expect("spec shape matches");
                (spec.name.clone(), tensor)
            })
            .collect();
        ParamStore { params }
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter whose name starts with one of `prefixes` as a
    /// differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>, prefixes: &[&str]) -> ParamVars {
        let vars = self
            .params
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, t)| (name.clone(), tape.variable(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Like [`bind`](Self::bind) but records the parameters as constants.
    pub fn bind_frozen(&self, tape: &mut Tape<T>, prefixes: &[&str]) -> ParamVars {
        let vars = self
            .params
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Adds the gradients of every bound parameter into its grad buffer.
    /// Parameters the output does not depend on are left without a buffer.
    pub fn accumulate(&mut self, bound: &ParamVars, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in &bound.vars {
            if let Some(g) = grads.get(*var) {
                let param = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                param.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }
}

/// Tape handles for a bound subset of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound on this pass")))
    }

    /// Replaces the handle of one parameter, e.g. to probe it in a gradient check.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn merge(&mut self, other: ParamVars) {
        self.vars.extend(other.vars);
    }
}
