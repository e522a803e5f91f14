use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SegError};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered registry of named trainable tensors.
///
/// Registration order is the canonical order for optimizer updates, the L2
/// term and checkpoint serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "parameter {name} registered twice"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.params.iter().map(|p| p.value.sum_squares()).sum()
    }

    /// Records every parameter on `tape` as a borrowed leaf, in registry order.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.value)).collect()
    }

    /// Gradients for `leaves` (from [`register`](Self::register)) in registry
    /// order; parameters the loss does not reach get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, leaves: &[Var]) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(leaves)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    /// `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(SegError::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(SegError::Shape {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst` elementwise, parameter by parameter.
pub fn accumulate_grads(dst: &mut [Tensor], src: &[Tensor]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}
