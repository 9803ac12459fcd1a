use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Learning-rate group. The backbone trains at a tenth of the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<F: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub state: AdamState<F>,
}

impl<F: Real> Parameter<F> {
    fn new(name: &str, group: ParamGroup, value: Tensor<F>) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.to_string(),
            group,
            grad: zeros.clone(),
            state: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            value,
        }
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    params: Vec<Parameter<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name, group, value));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds `scale · grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: F) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b * scale;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.group, p.value.cast()).expect("unique names");
        }
        out
    }
}

/// AdamW hyperparameters. The learning rate is supplied per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update of every parameter. `lr` maps a parameter group to its
    /// current learning rate. Fails before touching anything if a gradient
    /// is not finite.
    pub fn step<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {}",
                p.name
            )));
        }
        for p in &mut store.params {
            let rate = lr(p.group);
            p.state.step += 1;
            let t = p.state.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - rate * self.weight_decay;
            let values = p.value.data_mut();
            let m = p.state.m.data_mut();
            let v = p.state.v.data_mut();
            for (i, &g) in p.grad.data().iter().enumerate() {
                let g = g.as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                m[i] = F::of(mi);
                v[i] = F::of(vi);
                let update = rate * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                values[i] = F::of(values[i].as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s
            .insert("p", ParamGroup::Rest, Tensor::from_f64([1], &[value]).unwrap())
            .unwrap();
        s.get_mut(id).grad.data_mut()[0] = grad;
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = single(0.7, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..5 {
            opt.step(&mut s, |_| 0.1).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).value.data(), &[0.7]);
    }

    #[test]
    fn decay_only_step() {
        let mut s = single(1.0, 0.0);
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        opt.step(&mut s, |_| 0.1).unwrap();
        assert!((s.get(ParamId(0)).value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = single(0.0, 1.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, |_| 1e-3).unwrap();
        assert!((s.get(ParamId(0)).value.data()[0] + 1e-3).abs() < 1e-9);
        assert_eq!(s.get(ParamId(0)).state.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(0.0, f64::NAN);
        let err = AdamW::default().step(&mut s, |_| 1e-3).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains('p')));
        assert_eq!(s.get(ParamId(0)).value.data(), &[0.0]);
    }
}
