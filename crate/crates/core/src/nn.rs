//! Parameter-owning building blocks shared by the networks.

use dehaze_tensor::{conv_kernel, Bound, Graph, ModelParams, ParamId, Tensor, Var};
use rand::RngExt;

use crate::error::Result;

/// `k x k` convolution with bias and "same" zero padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv {
    pub fn new<R: RngExt + ?Sized>(
        params: &mut ModelParams,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        Self::scaled(params, rng, name, cin, cout, k, 1.0)
    }

    /// He-uniform weights multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled<R: RngExt + ?Sized>(
        params: &mut ModelParams,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Self {
        let w = conv_kernel(rng, cout, cin, k).map(|v| v * gain);
        Conv {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros([cout])),
            padding: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, b[self.weight], Some(b[self.bias]), 1, self.padding)?)
    }
}

/// Convolution followed by a per-channel PReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvPrelu {
    pub conv: Conv,
    pub alpha: ParamId,
}

impl ConvPrelu {
    pub fn new<R: RngExt + ?Sized>(
        params: &mut ModelParams,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let conv = Conv::new(params, rng, name, cin, cout, 3);
        let alpha = params.add(format!("{name}.alpha"), Tensor::full([cout], 0.25));
        ConvPrelu { conv, alpha }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        Ok(g.prelu(y, b[self.alpha])?)
    }
}

/// Convolution, group normalization, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvNormRelu {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl ConvNormRelu {
    pub fn new<R: RngExt + ?Sized>(
        params: &mut ModelParams,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
    ) -> Self {
        let conv = Conv::new(params, rng, name, cin, cout, 3);
        let gamma = params.add(format!("{name}.gn.gamma"), Tensor::full([cout], 1.0));
        let beta = params.add(format!("{name}.gn.beta"), Tensor::zeros([cout]));
        ConvNormRelu {
            conv,
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = g.group_norm(y, self.groups, b[self.gamma], b[self.beta], 1e-5)?;
        Ok(g.relu(y))
    }
}
