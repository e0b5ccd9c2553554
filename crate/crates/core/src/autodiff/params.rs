use std::collections::BTreeMap;

use super::array::Array;
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub value: Array<F>,
    /// Accumulated gradient; `None` until a backward pass reaches the parameter.
    pub grad: Option<Array<F>>,
}

/// Named trainable arrays with gradient slots, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Parameter<F>>,
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<F>) {
        self.params
            .insert(name.into(), Parameter { value, grad: None });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Array<F>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<F>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.get(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Array<F>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Array<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
        if p.value.shape() != grad.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("{name}: {:?} vs {:?}", p.value.shape(), grad.shape()),
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Array<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Array::cast),
                        },
                    )
                })
                .collect(),
        }
    }
}
