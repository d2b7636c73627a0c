//! Named traversal of learnable tensors, shared by optimizers, checkpoints
//! and gradient checks. Gradients use the same types as the parameters.

use crate::tensor::{LinearParams, Tensor};

pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Same structure with every tensor zeroed.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, t| t.fill(0.0));
        out
    }

    /// Flattened copies of every tensor, in traversal order.
    fn flat_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

/// `params[i] += scale * grads[i]` over matching traversal order.
pub fn axpy<P: Parameters>(params: &mut P, grads: &P, scale: f64) {
    let flat = grads.flat_tensors();
    let mut i = 0;
    params.visit_mut("", &mut |_, t| {
        for (p, g) in t.data_mut().iter_mut().zip(flat[i].data()) {
            *p += scale * g;
        }
        i += 1;
    });
}

/// Elementwise `acc += other`.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    axpy(acc, other, 1.0);
}

impl Parameters for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self);
    }
}

impl Parameters for LinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
