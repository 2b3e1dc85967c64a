//! Named parameter tensors.
//!
//! Every parameter block implements [`ParamSet`], a visitor over its tensors
//! with stable dotted names. The same traversal drives initialization,
//! loading from and saving to a [`ParamStore`], parameter counting, and the
//! finite-difference checker.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
    /// A network input treated as a variable (used by gradient checks).
    Input,
}

impl ParamKind {
    /// Running statistics are fixed buffers, everything else is trainable.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

pub trait ParamSet<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> ParamSet<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(prefix, ParamKind::Input, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(prefix, ParamKind::Input, self)
    }
}

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real, A: ParamSet<T>, B: ParamSet<T>> ParamSet<T> for (A, B) {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.0.visit(&join(prefix, "params"), f);
        self.1.visit(&join(prefix, "inputs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.0.visit_mut(&join(prefix, "params"), f);
        self.1.visit_mut(&join(prefix, "inputs"), f);
    }
}

/// Number of learnable scalars.
pub fn param_count<T: Real>(p: &impl ParamSet<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, kind, t| {
        if kind.is_learnable() {
            n += t.len();
        }
    });
    n
}

/// Ordered name → tensor map holding every weight and buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of a parameter block, converted to `f32`.
    pub fn from_params<T: Real>(params: &impl ParamSet<T>) -> Result<Self> {
        let mut store = Self::new();
        let mut dup = None;
        params.visit("", &mut |name, _, t| {
            if store.tensors.insert(name.to_string(), t.cast()).is_some() && dup.is_none() {
                dup = Some(name.to_string());
            }
        });
        match dup {
            Some(name) => Err(Error::Parameter(format!("duplicate tensor name `{name}`"))),
            None => Ok(store),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of stored scalars, buffers included.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Fills `params` from the store. Fails on the first tensor that is
    /// missing, has the wrong shape, or has no counterpart in `params`.
    pub fn load_into<T: Real>(&self, params: &mut impl ParamSet<T>) -> Result<()> {
        let mut first_err: Option<Error> = None;
        let mut seen = 0usize;
        params.visit_mut("", &mut |name, _, t| {
            if first_err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => first_err = Some(Error::Parameter(format!("missing tensor `{name}`"))),
                Some(src) if src.shape() != t.shape() => {
                    first_err = Some(Error::Parameter(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => {
                    *t = src.cast();
                    seen += 1;
                }
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            let mut expected = std::collections::BTreeSet::new();
            params.visit("", &mut |name, _, _| {
                expected.insert(name.to_string());
            });
            if let Some(extra) = self.tensors.keys().find(|k| !expected.contains(*k)) {
                return Err(Error::Parameter(format!("unexpected tensor `{extra}`")));
            }
        }
        Ok(())
    }

    /// Checks every tensor is finite.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.all_finite() {
                return Err(Error::Parameter(format!("tensor `{name}` is not finite")));
            }
        }
        Ok(())
    }
}
