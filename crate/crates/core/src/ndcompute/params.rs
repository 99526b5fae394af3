use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter gradients keyed by name, as produced by one backward pass.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Merges `other` in; a name present in both is an error.
    pub fn extend_from(&mut self, other: ParamSet<T>) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`, cloned.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = lit(rng.gen_range(-bound..=bound));
    }
    t
}

/// Registers `{prefix}.{i}.weight` / `{prefix}.{i}.bias` for each layer of
/// an MLP with the given widths. Weights are `[d_in, d_out]`.
pub fn init_mlp<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    dims: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!("mlp `{prefix}` needs at least two widths")));
    }
    for (i, w) in dims.windows(2).enumerate() {
        let bound = (1.0 / w[0] as f64).sqrt();
        params.insert(format!("{prefix}.{i}.weight"), uniform_tensor(&[w[0], w[1]], bound, rng))?;
        params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[w[1]]))?;
    }
    Ok(())
}

/// Registers `{prefix}.gain` (ones) and `{prefix}.shift` (zeros).
pub fn init_norm<T: Real>(params: &mut ParamSet<T>, prefix: &str, width: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Tensor::full(&[width], T::one()))?;
    params.insert(format!("{prefix}.shift"), Tensor::zeros(&[width]))
}
