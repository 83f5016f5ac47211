use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Tape, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Group normalization over `[N, C, H, W]`: channels are split into
    /// `groups` contiguous groups, each normalized to zero mean and unit
    /// (biased) variance per sample, then scaled by `gamma` and shifted by
    /// `beta` per channel.
    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::config(
                "group_norm",
                format!("{c} channels are not divisible into {groups} groups"),
            ));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(p);
            if t.numel() != c {
                return Err(TensorError::shape(
                    "group_norm",
                    format!("{name} with {c} elements"),
                    t.shape(),
                ));
            }
        }
        let m = c / groups * h * w;
        let xd = x.data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        let mut out = vec![0.0; xd.len()];
        let hw = h * w;
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * groups + gi) * m;
                let seg = &xd[start..start + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in seg.iter().enumerate() {
                    let xh = (v - mean) * is;
                    let ch = (start + j) / hw % c;
                    xhat[start + j] = xh;
                    out[start + j] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push_op(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    t: &mut Tape<'_>,
    input: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) {
    let (n, c, h, w) = t.value(input).dims4("group_norm").expect("validated");
    let hw = h * w;
    let m = c / groups * hw;
    t.acc(beta, |gb| {
        for (i, s) in g.iter().enumerate() {
            gb[i / hw % c] += s;
        }
    });
    t.acc(gamma, |gg| {
        for (i, (s, xh)) in g.iter().zip(xhat).enumerate() {
            gg[i / hw % c] += s * xh;
        }
    });
    let gm = t.value(gamma).data();
    t.acc(input, |gx| {
        let mut dxhat = vec![0.0; m];
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * groups + gi) * m;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..m {
                    let d = g[start + j] * gm[(start + j) / hw % c];
                    dxhat[j] = d;
                    sum_d += d;
                    sum_dx += d * xhat[start + j];
                }
                let is = inv_std[s * groups + gi];
                let mf = m as f64;
                for j in 0..m {
                    gx[start + j] += is / mf * (mf * dxhat[j] - sum_d - xhat[start + j] * sum_dx);
                }
            }
        }
    });
}
