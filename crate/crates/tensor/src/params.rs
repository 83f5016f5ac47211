//! Named parameter collections and their binding onto a [`Graph`].

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Ordered, named parameter set of one network.
///
/// Insertion order is stable and doubles as the serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "ModelParams::set",
                format!("{:?}", p.value.shape()),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Sum of squared gradient entries; `None` if no gradient is present.
    pub fn grad_norm_sq(&self) -> Option<f64> {
        let mut any = false;
        let mut acc = 0.0;
        for g in self.params.iter().filter_map(|p| p.grad.as_ref()) {
            any = true;
            acc += g.iter().map(|v| v * v).sum::<f64>();
        }
        any.then_some(acc)
    }
}

/// Graph handles of a [`ModelParams`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Graph {
    /// Places every parameter on the graph as a differentiable leaf.
    pub fn bind(&mut self, params: &ModelParams) -> Bound {
        Bound {
            vars: params.iter().map(|p| self.leaf(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on the graph as a constant.
    pub fn bind_frozen(&mut self, params: &ModelParams) -> Bound {
        Bound {
            vars: params.iter().map(|p| self.constant(p.value.clone())).collect(),
        }
    }

    /// Adds the gradients gathered by [`Graph::backward`] into `params`.
    ///
    /// Parameters the loss did not reach receive an explicit zero gradient.
    pub fn collect_grads(&self, bound: &Bound, params: &mut ModelParams) {
        for (p, &v) in params.iter_mut().zip(&bound.vars) {
            if !self.requires_grad(v) {
                continue;
            }
            let n = p.value.numel();
            let dst = p.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = self.grad(v) {
                crate::graph::add_into(dst, g);
            }
        }
    }
}

/// He-style uniform initialization bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: RngExt + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Convolution kernel `[cout, cin, k, k]` with He-uniform weights.
pub fn conv_kernel<R: RngExt + ?Sized>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Tensor {
    kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k)
}

/// Normal samples with standard deviation `std`.
pub fn normal<R: RngExt + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut params = ModelParams::new();
        let w = params.add("w", Tensor::full([2], 3.0));
        let mut g = Graph::new();
        let b = g.bind(&params);
        let x = g.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        // used twice: loss = sum(w*x) + sum(w*x)
        let p1 = g.mul(b[w], x).unwrap();
        let p2 = g.mul(b[w], x).unwrap();
        let s = g.add(p1, p2).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        g.collect_grads(&b, &mut params);
        assert_eq!(params.get(w).grad.as_deref(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut params = ModelParams::new();
        let w = params.add("w", Tensor::full([1], 2.0));
        let mut g = Graph::new();
        let b = g.bind_frozen(&params);
        let x = g.leaf(Tensor::full([1], 5.0));
        let p = g.mul(b[w], x).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        g.collect_grads(&b, &mut params);
        assert!(params.get(w).grad.is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = conv_kernel(&mut ChaCha8Rng::seed_from_u64(9), 4, 3, 3);
        let b = conv_kernel(&mut ChaCha8Rng::seed_from_u64(9), 4, 3, 3);
        assert_eq!(a, b);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
