use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Tape, Var};
use crate::tensor::Tensor;

/// Source taps of half-pixel-centred bilinear interpolation along one axis.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

impl Graph {
    /// Bilinear resampling of the spatial axes to `oh x ow`.
    pub fn resize_bilinear(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("resize_bilinear")?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(TensorError::config("resize_bilinear", "empty extent"));
        }
        let (ty, tx) = (taps(h, oh), taps(w, ow));
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
                    let bot = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
                    out[(plane * oh + oy) * ow + ox] = (1.0 - wy) * top + wy * bot;
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push_op(value, Op::Resize(input)))
    }

    /// Extends the bottom and right borders by mirror reflection (the edge
    /// sample is not repeated).
    pub fn reflect_pad(&mut self, input: Var, bottom: usize, right: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("reflect_pad")?;
        if bottom >= h || right >= w {
            return Err(TensorError::shape(
                "reflect_pad",
                format!("extent larger than padding {bottom}x{right}"),
                x.shape(),
            ));
        }
        let (oh, ow) = (h + bottom, w + right);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                let sy = reflect(y, h);
                for xx in 0..ow {
                    out.push(src[sy * w + reflect(xx, w)]);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push_op(value, Op::ReflectPad(input)))
    }

    /// The `h x w` window whose top-left corner sits at `(y0, x0)`.
    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, xh, xw) = x.dims4("crop")?;
        if y0 + h > xh || x0 + w > xw {
            return Err(TensorError::shape(
                "crop",
                format!("at least {}x{}", y0 + h, x0 + w),
                x.shape(),
            ));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let row = plane * xh * xw + (y0 + y) * xw + x0;
                out.extend_from_slice(&x.data()[row..row + w]);
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(value, Op::Crop { input, y0, x0 }))
    }
}

pub(crate) fn resize_backward(t: &mut Tape<'_>, out: usize, input: Var, g: &[f64]) {
    let (n, c, h, w) = t.value(input).dims4("resize_bilinear").expect("validated");
    let os = t.nodes[out].value.shape();
    let (oh, ow) = (os[2], os[3]);
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    t.acc(input, |gx| {
        for plane in 0..n * c {
            let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let s = g[(plane * oh + oy) * ow + ox];
                    dst[y0 * w + x0] += s * (1.0 - wy) * (1.0 - wx);
                    dst[y0 * w + x1] += s * (1.0 - wy) * wx;
                    dst[y1 * w + x0] += s * wy * (1.0 - wx);
                    dst[y1 * w + x1] += s * wy * wx;
                }
            }
        }
    });
}

pub(crate) fn reflect_pad_backward(t: &mut Tape<'_>, out: usize, input: Var, g: &[f64]) {
    let (n, c, h, w) = t.value(input).dims4("reflect_pad").expect("validated");
    let os = t.nodes[out].value.shape();
    let (oh, ow) = (os[2], os[3]);
    t.acc(input, |gx| {
        for plane in 0..n * c {
            for y in 0..oh {
                let sy = reflect(y, h);
                for xx in 0..ow {
                    gx[plane * h * w + sy * w + reflect(xx, w)] += g[(plane * oh + y) * ow + xx];
                }
            }
        }
    });
}

pub(crate) fn crop_backward(t: &mut Tape<'_>, out: usize, input: Var, y0: usize, x0: usize, g: &[f64]) {
    let (n, c, xh, xw) = t.value(input).dims4("crop").expect("validated");
    let os = t.nodes[out].value.shape();
    let (h, w) = (os[2], os[3]);
    t.acc(input, |gx| {
        for plane in 0..n * c {
            for y in 0..h {
                let row = plane * xh * xw + (y0 + y) * xw + x0;
                let src = &g[(plane * h + y) * w..(plane * h + y + 1) * w];
                crate::graph::add_into(&mut gx[row..row + w], src);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_a_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 2, 3, 4], 0.4));
        let y = g.resize_bilinear(x, 6, 8).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn upsampling_interpolates_linear_ramp() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.resize_bilinear(x, 1, 8).unwrap();
        let expected = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (v, e) in g.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn reflect_pad_then_crop_recovers_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64));
        let p = g.reflect_pad(x, 2, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 5, 4]);
        // row 3 mirrors row 1, column 3 mirrors column 1
        assert_eq!(&g.value(p).data()[12..16], &[3.0, 4.0, 5.0, 4.0]);
        let c = g.crop(p, 0, 0, 3, 3).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn offset_crop_selects_interior_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let c = g.crop(x, 1, 2, 2, 2).unwrap();
        assert_eq!(g.value(c).data(), &[6.0, 7.0, 10.0, 11.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().iter().sum::<f64>(), 4.0);
        assert_eq!(g.grad(x).unwrap()[6], 1.0);
        assert!(g.crop(x, 3, 0, 2, 2).is_err());
    }
}
