use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    /// Binary elementwise op on two tensors of identical shape.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::shape(
                "elementwise",
                format!("{:?}", x.shape()),
                y.shape(),
            ));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |p, q| p + q,
            Elementwise::Sub => |p, q| p - q,
            Elementwise::Mul => |p, q| p * q,
            Elementwise::Div => |p, q| p / q,
        };
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let op = match kind {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            Elementwise::Mul => Op::Mul(a, b),
            Elementwise::Div => Op::Div(a, b),
        };
        Ok(self.push_op(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Div)
    }

    /// `k * a`
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| k * v);
        self.push_op(value, Op::Scale(a, k))
    }

    /// `a + k`
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push_op(value, Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push_op(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push_op(value, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push_op(value, Op::Clamp { input: a, lo, hi })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a))
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push_op(value, Op::Mean(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_elements() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 3], |i| (i as f64).sin()));
        let z = g.constant(Tensor::zeros([2, 3]));
        let o = g.constant(Tensor::full([2, 3], 1.0));
        let s = g.add(a, z).unwrap();
        let p = g.mul(a, o).unwrap();
        assert_eq!(g.value(s), g.value(a));
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new([3], vec![-0.5, 0.5, 1.5]).unwrap());
        let c = g.clamp(a, 0.0, 1.0);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 0.0]);
    }
}
