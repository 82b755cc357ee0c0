use std::collections::BTreeMap;
use std::sync::Arc;

use crate::float::Float;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Arc<Tensor<F>>>,
}

/// Tape handles of every parameter in a store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Per-parameter gradients keyed by name.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.get_arc(name)
    }

    pub fn get_arc(&self, name: &str) -> &Arc<Tensor<F>> {
        match self.params.get(name) {
            Some(t) => t,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        match self.params.get_mut(name) {
            Some(t) => Arc::make_mut(t),
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on the tape. On an inference tape the
    /// parameters are recorded as constants.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Bound { vars }
    }

    /// Gradients of the bound parameters; parameters off the loss path get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &mut Grads<F>) -> GradMap<F> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = bound.try_get(k).and_then(|var| grads.take(var)).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<G>()))).collect() }
    }
}

/// Adds `src` into `dst`, inserting missing entries.
pub fn accumulate_grads<F: Float>(dst: &mut GradMap<F>, src: GradMap<F>) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(d) => d.add_assign(&g),
            None => {
                dst.insert(k, g);
            }
        }
    }
}

pub fn global_norm<F: Float>(grads: &GradMap<F>) -> f64 {
    grads.values().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut GradMap<F>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
