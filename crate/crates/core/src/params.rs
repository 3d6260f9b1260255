//! Named parameter declarations and their materialized values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to. Only the frozen
/// backbone group is excluded from optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Encoder,
    Pooling,
}

impl ParamGroup {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamGroup::Backbone)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects declarations in order. Modules register their parameters here
/// and keep the returned ids.
#[derive(Default, Debug)]
pub struct Registry {
    decls: Vec<ParamDecl>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
    ) -> ParamId {
        self.decls.push(ParamDecl {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            group,
        });
        ParamId(self.decls.len() - 1)
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.decls
            .iter()
            .filter(|d| d.group == group)
            .map(ParamDecl::numel)
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.decls
            .iter()
            .filter(|d| d.group.trainable())
            .map(ParamDecl::numel)
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.decls.iter().map(ParamDecl::numel).sum()
    }

    /// Allocates values in declaration order from one seeded stream.
    pub fn materialize<T: Scalar>(self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = self
            .decls
            .iter()
            .map(|d| match d.init {
                Init::Zeros => Tensor::zeros(d.shape.clone()),
                Init::Ones => Tensor::ones(d.shape.clone()),
                Init::Const(c) => Tensor::full(d.shape.clone(), T::of(c)),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f64, std).expect("valid std");
                    let data = (0..d.numel()).map(|_| T::of(dist.sample(&mut rng))).collect();
                    Tensor::new(d.shape.clone(), data).expect("declared shape")
                }
            })
            .collect();
        ParamStore {
            decls: self.decls,
            values,
        }
    }
}

/// Materialized parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    decls: Vec<ParamDecl>,
    values: Vec<Tensor<T>>,
}

/// Tape vars for every parameter of a store, for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.decls[id.0].group.trainable())
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.decls.iter().position(|d| d.name == name).map(ParamId)
    }

    /// Inserts every parameter as a leaf. With `train` set, trainable
    /// groups require gradients; frozen ones never do.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.decls)
            .map(|(v, d)| tape.leaf(v.clone(), train && d.group.trainable()))
            .collect();
        Bound { vars }
    }

    /// Binds all parameters as constants except the given overrides.
    pub fn bind_with(&self, tape: &mut Tape<T>, overrides: &[(ParamId, Var)]) -> Bound {
        let mut vars: Vec<Option<Var>> = vec![None; self.values.len()];
        for &(id, v) in overrides {
            vars[id.0] = Some(v);
        }
        let vars = vars
            .into_iter()
            .zip(&self.values)
            .map(|(v, t)| v.unwrap_or_else(|| tape.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            decls: self.decls.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces all values; shapes must match the declarations.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> crate::Result<()> {
        if values.len() != self.decls.len() {
            return Err(crate::Error::shape(
                "params",
                format!("{} values for {} params", values.len(), self.decls.len()),
            ));
        }
        for (v, d) in values.iter().zip(&self.decls) {
            if v.shape() != d.shape.as_slice() {
                return Err(crate::Error::shape(
                    "params",
                    format!("{} is {:?}, declared {:?}", d.name, v.shape(), d.shape),
                ));
            }
        }
        self.values = values;
        Ok(())
    }
}
