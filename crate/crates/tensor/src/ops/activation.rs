use crate::error::{Result, TensorError};
use crate::graph::{Activation, Graph, Op, Tape, Var};

impl Graph {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let value = self.value(input).map(f);
        self.push_op(value, Op::Act { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    /// Parametric ReLU with one learnable slope per channel of an
    /// `[N, C, H, W]` input.
    pub fn prelu(&mut self, input: Var, alpha: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("prelu")?;
        let a = self.value(alpha);
        if a.numel() != c {
            return Err(TensorError::shape("prelu slope", format!("{c} elements"), a.shape()));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for plane in 0..n * c {
            let slope = a.data()[plane % c];
            out[plane * hw..(plane + 1) * hw]
                .iter_mut()
                .filter(|v| **v < 0.0)
                .for_each(|v| *v *= slope);
        }
        let value = crate::Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Prelu { input, alpha }))
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn backward(t: &mut Tape<'_>, out: usize, input: Var, kind: Activation, g: &[f64]) {
    let x = t.value(input).data();
    let y = t.nodes[out].value.data();
    t.acc(input, |gx| match kind {
        Activation::Relu => {
            for ((d, s), v) in gx.iter_mut().zip(g).zip(x) {
                if *v > 0.0 {
                    *d += s;
                }
            }
        }
        Activation::Sigmoid => {
            for ((d, s), y) in gx.iter_mut().zip(g).zip(y) {
                *d += s * y * (1.0 - y);
            }
        }
        Activation::Tanh => {
            for ((d, s), y) in gx.iter_mut().zip(g).zip(y) {
                *d += s * (1.0 - y * y);
            }
        }
    });
}

pub(crate) fn prelu_backward(t: &mut Tape<'_>, input: Var, alpha: Var, g: &[f64]) {
    let xv = t.value(input);
    let (n, c, h, w) = xv.dims4("prelu").expect("validated");
    let x = xv.data();
    let a = t.value(alpha).data();
    let hw = h * w;
    t.acc(input, |gx| {
        for plane in 0..n * c {
            let slope = a[plane % c];
            let r = plane * hw..(plane + 1) * hw;
            for ((d, s), v) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&x[r]) {
                *d += if *v > 0.0 { *s } else { slope * s };
            }
        }
    });
    t.acc(alpha, |ga| {
        for plane in 0..n * c {
            let r = plane * hw..(plane + 1) * hw;
            ga[plane % c] += g[r.clone()]
                .iter()
                .zip(&x[r])
                .filter(|(_, v)| **v < 0.0)
                .map(|(s, v)| s * v)
                .sum::<f64>();
        }
    });
}
