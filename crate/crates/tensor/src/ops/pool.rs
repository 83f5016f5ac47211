use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, PoolKind, Tape, Var};
use crate::ops::conv::output_extent;
use crate::tensor::Tensor;

impl Graph {
    /// Windowed max or mean pooling without padding.
    ///
    /// Max pooling routes the gradient to the first maximal element of each
    /// window in row-major order.
    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("pool2d")?;
        let (Some(oh), Some(ow)) = (
            output_extent(h, kh, stride, 0),
            output_extent(w, kw, stride, 0),
        ) else {
            return Err(TensorError::shape(
                "pool2d",
                format!("spatial extent at least {kh}x{kw} and stride >= 1"),
                x.shape(),
            ));
        };
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let norm = 1.0 / (kh * kw) as f64;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let o = (plane * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let idx = base + (y0 + ky) * w + x0 + kx;
                                    if xd[idx] > xd[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out[o] = xd[best];
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut acc = 0.0;
                            for ky in 0..kh {
                                let row = base + (y0 + ky) * w + x0;
                                acc += xd[row..row + kw].iter().sum::<f64>();
                            }
                            out[o] = acc * norm;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push_op(
            value,
            Op::Pool2d {
                input,
                kind,
                kh,
                kw,
                stride,
                argmax,
            },
        ))
    }

    /// Reduces every channel to a single value: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("global_pool")?;
        if h == 0 || w == 0 {
            return Err(TensorError::shape("global_pool", "non-empty spatial extent", x.shape()));
        }
        let hw = h * w;
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for plane in 0..n * c {
            let s = &xd[plane * hw..(plane + 1) * hw];
            match kind {
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, v) in s.iter().enumerate() {
                        if *v > s[best] {
                            best = i;
                        }
                    }
                    out.push(s[best]);
                    argmax.push(plane * hw + best);
                }
                PoolKind::Avg => out.push(s.iter().sum::<f64>() / hw as f64),
            }
        }
        let value = Tensor::new([n, c, 1, 1], out)?;
        Ok(self.push_op(
            value,
            Op::GlobalPool {
                input,
                kind,
                argmax,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool2d_backward(
    t: &mut Tape<'_>,
    out: usize,
    input: Var,
    kind: PoolKind,
    kh: usize,
    kw: usize,
    stride: usize,
    argmax: &[usize],
    g: &[f64],
) {
    let (n, c, h, w) = t.value(input).dims4("pool2d").expect("validated");
    let oshape = t.nodes[out].value.shape();
    let (oh, ow) = (oshape[2], oshape[3]);
    t.acc(input, |gx| match kind {
        PoolKind::Max => {
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
        }
        PoolKind::Avg => {
            let norm = 1.0 / (kh * kw) as f64;
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[(plane * oh + oy) * ow + ox] * norm;
                        for ky in 0..kh {
                            let row = base + (oy * stride + ky) * w + ox * stride;
                            gx[row..row + kw].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn global_backward(
    t: &mut Tape<'_>,
    input: Var,
    kind: PoolKind,
    argmax: &[usize],
    g: &[f64],
) {
    let (n, c, h, w) = t.value(input).dims4("global_pool").expect("validated");
    let hw = h * w;
    t.acc(input, |gx| match kind {
        PoolKind::Max => {
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
        }
        PoolKind::Avg => {
            for plane in 0..n * c {
                let share = g[plane] / hw as f64;
                gx[plane * hw..(plane + 1) * hw]
                    .iter_mut()
                    .for_each(|d| *d += share);
            }
        }
    });
}
