use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Tape, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Concatenates `[N, Ci, H, W]` parts along the channel axis, in order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.value(p).dims4("concat_channels")?;
        }
        self.concat(parts, 1)
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents
    /// must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::config("concat", "no parts given"));
        };
        let ref_shape = self.value(first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(TensorError::shape("concat", format!("rank above {axis}"), &ref_shape));
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let inner: usize = ref_shape[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                let mut expected = format!("{ref_shape:?}");
                expected.push_str(&format!(" except along axis {axis}"));
                return Err(TensorError::shape("concat", expected, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Channels `start..start + len` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(TensorError::shape(
                "slice_channels",
                format!("at least {} channels", start + len),
                x.shape(),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            out.extend_from_slice(&x.data()[base..base + len * hw]);
        }
        let value = Tensor::new([n, len, h, w], out)?;
        Ok(self.push_op(value, Op::SliceChannels { input, start }))
    }

    /// Repeats a `[N, C, 1, 1]` tensor over an `h x w` grid.
    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, xh, xw) = x.dims4("broadcast_spatial")?;
        if (xh, xw) != (1, 1) {
            return Err(TensorError::shape("broadcast_spatial", "[N, C, 1, 1]", x.shape()));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for v in x.data() {
            out.extend(std::iter::repeat_n(*v, h * w));
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(value, Op::BroadcastSpatial(input)))
    }
}

pub(crate) fn concat_backward(t: &mut Tape<'_>, out: usize, parts: &[Var], axis: usize, g: &[f64]) {
    let oshape = t.nodes[out].value.shape();
    let outer: usize = oshape[..axis].iter().product();
    let inner: usize = oshape[axis + 1..].iter().product();
    let total_chunk = oshape[axis] * inner;
    let mut offset = 0;
    for &p in parts {
        let chunk = t.value(p).shape()[axis] * inner;
        t.acc(p, |gp| {
            for o in 0..outer {
                let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                crate::graph::add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
            }
        });
        offset += chunk;
    }
}

pub(crate) fn slice_backward(t: &mut Tape<'_>, out: usize, input: Var, start: usize, g: &[f64]) {
    let (n, c, h, w) = t.value(input).dims4("slice_channels").expect("validated");
    let len = t.nodes[out].value.shape()[1];
    let hw = h * w;
    t.acc(input, |gx| {
        for s in 0..n {
            let base = (s * c + start) * hw;
            crate::graph::add_into(
                &mut gx[base..base + len * hw],
                &g[s * len * hw..(s + 1) * len * hw],
            );
        }
    });
}

pub(crate) fn broadcast_backward(t: &mut Tape<'_>, out: usize, input: Var, g: &[f64]) {
    let oshape = t.nodes[out].value.shape();
    let hw = oshape[2] * oshape[3];
    t.acc(input, |gx| {
        for (i, d) in gx.iter_mut().enumerate() {
            *d += g[i * hw..(i + 1) * hw].iter().sum::<f64>();
        }
    });
}
