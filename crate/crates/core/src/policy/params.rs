//! Named parameter tensors partitioned into per-network groups.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One group per network; the optimizer solves multipliers per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    HighLevel,
    /// Low-level policy together with the codebooks.
    LowLevel,
    Posterior,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::HighLevel, ParamGroup::LowLevel, ParamGroup::Posterior];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::HighLevel => "high_level",
            ParamGroup::LowLevel => "low_level",
            ParamGroup::Posterior => "posterior",
        }
    }
}

/// Index of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Parameters placed on a tape as differentiable leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, group, value)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Scalar parameter count of a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// The gradient of every parameter in `group`, flattened in store order.
    pub fn flat_grad(&self, grads: &Gradients, bound: &Bound, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count(group));
        for (p, v) in self.params.iter().zip(&bound.vars) {
            if p.group == group {
                match grads.get(*v) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
                }
            }
        }
        out
    }

    /// Parameter values of `group`, flattened in store order.
    pub fn flat_values(&self, group: ParamGroup) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Overwrites the values of `group` from a flat vector.
    pub fn set_flat(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        if values.len() != self.count(group) {
            return Err(Error::Shape {
                op: "set_flat",
                detail: format!("{} values for a group of {}", values.len(), self.count(group)),
            });
        }
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Replaces values from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            if p.name != o.name || p.value.shape() != o.value.shape() || p.group != o.group {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    o.name,
                    o.value.shape()
                )));
            }
            p.value = o.value.clone();
        }
        Ok(())
    }
}
