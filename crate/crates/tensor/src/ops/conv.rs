//! 2-D convolution lowered to GEMM via im2col.
//!
//! Column buffers are rebuilt during the backward pass instead of being kept
//! alive on the tape; they are `k*k` times larger than the activations.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub(crate) fn output_extent(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || k == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Range of output positions `o` for which `o * stride + k - padding` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // largest o with o*stride + k - padding <= len - 1
    let hi = if len + padding > k {
        ((len + padding - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.padding, g.h, g.oh);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.padding, g.w, g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < oy_lo || oy >= oy_hi || ox_lo == ox_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..ox_lo].fill(0.0);
                    line[ox_hi..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.padding;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.padding, g.h, g.oh);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.padding, g.w, g.ow);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.padding] += line[ox];
                    }
                }
            }
        }
    }
}

fn geometry(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, cin, h, w) = x.dims4("conv2d")?;
    let (cout, kcin, kh, kw) = k.dims4("conv2d kernel")?;
    if kcin != cin {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel with {cin} input channels"),
            k.shape(),
        ));
    }
    if stride == 0 {
        return Err(TensorError::config("conv2d", "stride must be at least 1"));
    }
    let (Some(oh), Some(ow)) = (
        output_extent(h, kh, stride, padding),
        output_extent(w, kw, stride, padding),
    ) else {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} within padded input"),
            x.shape(),
        ));
    };
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        },
    ))
}

fn view<'a>(rows: usize, cols: usize, data: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer sized by geometry")
}

fn view_mut<'a>(rows: usize, cols: usize, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer sized by geometry")
}

impl Graph {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `input` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, kH, kW]` and the
    /// optional `bias` has `Cout` elements.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, cout, geo) = geometry(x, k, stride, padding)?;
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != cout {
                return Err(TensorError::shape(
                    "conv2d bias",
                    format!("{cout} elements"),
                    bt.shape(),
                ));
            }
        }
        let (rows, p) = (geo.rows(), geo.cols());
        let in_stride = geo.cin * geo.h * geo.w;
        let mut out = vec![0.0; n * cout * p];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        let kv = view(cout, rows, k.data());
        for s in 0..n {
            let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
            let colv = if geo.is_pointwise() {
                view(rows, p, xs)
            } else {
                im2col(xs, &geo, &mut cols);
                view(rows, p, &cols)
            };
            let mut o = view_mut(cout, p, &mut out[s * cout * p..(s + 1) * cout * p]);
            general_mat_mul(1.0, &kv, &colv, 0.0, &mut o);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for s in 0..n {
                for (co, &bias) in bv.iter().enumerate() {
                    let start = (s * cout + co) * p;
                    out[start..start + p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new([n, cout, geo.oh, geo.ow], out)?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel "valid" correlation with a fixed `[kH, kW]` kernel shared
    /// by every channel. The kernel is not differentiated.
    pub fn depthwise_fixed(&mut self, input: Var, kernel: &Tensor) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("depthwise_fixed")?;
        let [kh, kw] = kernel.shape() else {
            return Err(TensorError::shape(
                "depthwise_fixed kernel",
                "rank-2 [kH, kW]",
                kernel.shape(),
            ));
        };
        let (kh, kw) = (*kh, *kw);
        if kh > h || kw > w {
            return Err(TensorError::shape(
                "depthwise_fixed",
                format!("spatial extent at least {kh}x{kw}"),
                x.shape(),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let kd = kernel.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[ky * kw + kx];
                    for oy in 0..oh {
                        let row = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += wgt * v);
                    }
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push_op(
            value,
            Op::Depthwise {
                input,
                kernel: kernel.clone(),
            },
        ))
    }
}

pub(crate) fn backward(
    t: &mut Tape<'_>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    g: &[f64],
) {
    let x = t.value(input);
    let k = t.value(kernel);
    let (n, cout, geo) = geometry(x, k, stride, padding).expect("validated in forward");
    let (rows, p) = (geo.rows(), geo.cols());
    let in_stride = geo.cin * geo.h * geo.w;

    if let Some(b) = bias {
        t.acc(b, |gb| {
            for s in 0..n {
                for (co, d) in gb.iter_mut().enumerate() {
                    let start = (s * cout + co) * p;
                    *d += g[start..start + p].iter().sum::<f64>();
                }
            }
        });
    }

    let need_k = t.needs(kernel);
    let need_x = t.needs(input);
    if !need_k && !need_x {
        return;
    }
    let mut cols = if geo.is_pointwise() || !need_k {
        Vec::new()
    } else {
        vec![0.0; rows * p]
    };
    let mut dk = if need_k {
        vec![0.0; cout * rows]
    } else {
        Vec::new()
    };
    let mut dx = if need_x {
        vec![0.0; n * in_stride]
    } else {
        Vec::new()
    };
    let mut dcols = if need_x && !geo.is_pointwise() {
        vec![0.0; rows * p]
    } else {
        Vec::new()
    };
    let kv = view(cout, rows, k.data());
    for s in 0..n {
        let gs = view(cout, p, &g[s * cout * p..(s + 1) * cout * p]);
        if need_k {
            let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
            let colv = if geo.is_pointwise() {
                view(rows, p, xs)
            } else {
                im2col(xs, &geo, &mut cols);
                view(rows, p, &cols)
            };
            let mut dkv = view_mut(cout, rows, &mut dk);
            general_mat_mul(1.0, &gs, &colv.t(), 1.0, &mut dkv);
        }
        if need_x {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            if geo.is_pointwise() {
                let mut dv = view_mut(rows, p, dxs);
                general_mat_mul(1.0, &kv.t(), &gs, 0.0, &mut dv);
            } else {
                let mut dv = view_mut(rows, p, &mut dcols);
                general_mat_mul(1.0, &kv.t(), &gs, 0.0, &mut dv);
                col2im(&dcols, &geo, dxs);
            }
        }
    }
    if need_k {
        t.acc(kernel, |gk| crate::graph::add_into(gk, &dk));
    }
    if need_x {
        t.acc(input, |gx| crate::graph::add_into(gx, &dx));
    }
}

pub(crate) fn depthwise_backward(t: &mut Tape<'_>, input: Var, kernel: &Tensor, g: &[f64]) {
    let (n, c, h, w) = t.value(input).dims4("depthwise_fixed").expect("validated");
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let kd = kernel.data();
    t.acc(input, |gx| {
        for plane in 0..n * c {
            let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
            let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[ky * kw + kx];
                    for oy in 0..oh {
                        let row = &mut dst[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let s = &src[oy * ow..(oy + 1) * ow];
                        row.iter_mut().zip(s).for_each(|(d, v)| *d += wgt * v);
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_matches_formula() {
        assert_eq!(output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(output_extent(64, 7, 2, 0), Some(29));
        assert_eq!(output_extent(29, 7, 2, 0), Some(12));
        assert_eq!(output_extent(2, 3, 1, 0), None);
        assert_eq!(output_extent(4, 3, 0, 0), None);
    }

    #[test]
    fn valid_range_clips_padding() {
        // k=0, pad=1, stride 1, len 5, out 5: o-1 >= 0 => o >= 1
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        // k=2, pad=1: o+1 <= 4 => o <= 3
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        // stride 2, k=0, pad=1, len 5, out 3: 2o-1 >= 0 => o >= 1
        assert_eq!(valid_range(0, 2, 1, 5, 3), (1, 3));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 1, 3, 4], |i| i as f64 * 0.37 - 1.0));
        let k = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn averaging_kernel_on_constant_field_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 6, 5], 0.7));
        let k = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 3]);
        for v in g.value(y).data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros([3, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, None, 1, 1),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(g.conv2d(x, k, None, 1, 1).is_err());
        assert!(g.conv2d(x, k, None, 0, 2).is_err());
    }
}
