use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t.with_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Record every parameter as a leaf. Leaves track gradients iff `track`.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    g.leaf_ref(t)
                } else {
                    g.leaf(t.clone().with_grad(false))
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>()).collect(),
        }
    }

    /// Replace all values from flat buffers, validating each length.
    pub fn load_flat(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for ((t, v), name) in self.tensors.iter_mut().zip(values).zip(&self.names) {
            if v.len() != t.len() {
                return Err(Error::contract(format!(
                    "parameter {name}: expected {} values, got {}",
                    t.len(),
                    v.len()
                )));
            }
            t.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform matrix `[fan_in × fan_out]`.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn([fan_in, fan_out], |_| {
            T::lit(self.rng.random_range(-bound..bound))
        })
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

/// Dropout state carried through a training forward pass.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Everything a layer needs during one forward pass: the tape, the bound
/// parameter leaves, and (in training) dropout state.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    params: &'a [Var],
    dropout: Option<&'a mut Dropout>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Var]) -> Self {
        Ctx {
            g,
            params,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, dropout: &'a mut Dropout) -> Self {
        self.dropout = Some(dropout);
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn training(&self) -> bool {
        self.dropout.as_ref().is_some_and(|d| d.p > 0.0)
    }

    /// Inverted dropout; identity at inference or when p = 0.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_deref_mut() {
            Some(d) if d.p > 0.0 => {
                let n = self.g.data(x).len();
                let keep: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= d.p).collect();
                self.g.dropout(x, &keep, d.p)
            }
            _ => Ok(x),
        }
    }
}
