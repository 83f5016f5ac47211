//! Iterative prior-updated dehazing: a conv-LSTM dehazer that refines the
//! image while two updater networks refine the transmission map and the
//! airlight at every step.

use dehaze_tensor::{conv_kernel, Bound, Graph, ModelParams, ParamId, PoolKind, Tensor, Var};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{AtmosphericLight, ImagePlane};
use crate::nn::{Conv, ConvPrelu};
use crate::scattering::DEFAULT_T_FLOOR;

/// Channel layout of the dehazer input, in order.
pub const INPUT_LAYOUT: [(&str, usize); 6] = [
    ("I", 3),
    ("T", 1),
    ("A", 3),
    ("I'", 3),
    ("T'", 1),
    ("A'", 3),
];

/// Channel layouts of the two updater inputs.
pub const T_UPDATER_LAYOUT: [(&str, usize); 4] = [("I", 3), ("T", 1), ("I'", 3), ("T'", 1)];
pub const A_UPDATER_LAYOUT: [(&str, usize); 4] = [("I", 3), ("A", 3), ("I'", 3), ("A'", 3)];

pub const INPUT_CHANNELS: usize = 14;

/// Canonical description of every input layout; checkpoints written under
/// a different layout are refused.
pub fn layout_fingerprint() -> String {
    let fmt = |l: &[(&str, usize)]| {
        l.iter()
            .map(|(n, c)| format!("{n}{c}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "dehazer[{}];t_updater[{}];a_updater[{}]",
        fmt(&INPUT_LAYOUT),
        fmt(&T_UPDATER_LAYOUT),
        fmt(&A_UPDATER_LAYOUT)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateLocality {
    /// One airlight correction per channel (average pooled).
    Global,
    /// A per-pixel airlight correction.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpudnConfig {
    pub features: usize,
    pub res_blocks: usize,
    pub updater_width: usize,
    pub updater_blocks: usize,
    pub t_floor: f64,
    pub locality: UpdateLocality,
}

impl Default for IpudnConfig {
    fn default() -> Self {
        IpudnConfig {
            features: 32,
            res_blocks: 6,
            updater_width: 32,
            updater_blocks: 6,
            t_floor: DEFAULT_T_FLOOR,
            locality: UpdateLocality::Global,
        }
    }
}

/// The four conv-LSTM gates in storage order.
pub const GATES: [char; 4] = ['i', 'f', 'o', 'g'];

#[derive(Debug, Clone)]
struct LstmParams {
    /// `[gate][0 = input y, 1 = hidden state]`
    kernels: [[ParamId; 2]; 4],
    biases: [ParamId; 4],
}

/// Gate kernels stacked into one `[4F, 2F, 3, 3]` convolution over
/// `concat(y, h)`, so a step costs a single GEMM.
#[derive(Debug, Clone, Copy)]
pub struct FusedLstm {
    pub kernel: Var,
    pub bias: Var,
}

/// `f_in`, conv-LSTM, residual trunk and `f_out`.
#[derive(Debug, Clone)]
pub struct Dehazer {
    features: usize,
    params: ModelParams,
    f_in: Conv,
    lstm: LstmParams,
    res: Vec<(Conv, Conv)>,
    f_out: Conv,
}

impl Dehazer {
    pub fn new<R: RngExt + ?Sized>(features: usize, res_blocks: usize, rng: &mut R) -> Result<Self> {
        if features == 0 {
            return Err(DehazeError::param("features", "must be positive"));
        }
        let f = features;
        let mut params = ModelParams::new();
        let f_in = Conv::new(&mut params, rng, "f_in", INPUT_CHANNELS, f, 3);
        let kernels = GATES.map(|gate| {
            [format!("lstm.W_{gate}y"), format!("lstm.W_{gate}s")]
                .map(|name| params.add(name, conv_kernel(rng, f, f, 3)))
        });
        // a unit forget bias keeps the cell state alive early in training
        let biases = GATES.map(|gate| {
            let init = if gate == 'f' { 1.0 } else { 0.0 };
            params.add(format!("lstm.b_{gate}"), Tensor::full([f], init))
        });
        let lstm = LstmParams { kernels, biases };
        let res = (0..res_blocks)
            .map(|k| {
                let a = Conv::new(&mut params, rng, &format!("res{k}.0"), f, f, 3);
                let b = Conv::scaled(&mut params, rng, &format!("res{k}.1"), f, f, 3, 0.1);
                (a, b)
            })
            .collect();
        let f_out = Conv::scaled(&mut params, rng, "f_out", f, 3, 3, 0.1);
        params.set("f_out.bias", Tensor::full([3], 0.5))?;
        Ok(Dehazer {
            features,
            params,
            f_in,
            lstm,
            res,
            f_out,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn fuse_lstm(&self, g: &mut Graph, b: &Bound) -> Result<FusedLstm> {
        let mut rows = Vec::with_capacity(4);
        for [wy, ws] in self.lstm.kernels {
            rows.push(g.concat(&[b[wy], b[ws]], 1)?);
        }
        let kernel = g.concat(&rows, 0)?;
        let biases: Vec<Var> = self.lstm.biases.iter().map(|&p| b[p]).collect();
        let bias = g.concat(&biases, 0)?;
        Ok(FusedLstm { kernel, bias })
    }

    /// One conv-LSTM update; returns `(h, c)`.
    pub fn conv_lstm_step(
        &self,
        g: &mut Graph,
        lstm: &FusedLstm,
        y: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let f = self.features;
        let yh = g.concat_channels(&[y, h_prev])?;
        let z = g.conv2d(yh, lstm.kernel, Some(lstm.bias), 1, 1)?;
        let zi = g.slice_channels(z, 0, f)?;
        let zf = g.slice_channels(z, f, f)?;
        let zo = g.slice_channels(z, 2 * f, f)?;
        let zg = g.slice_channels(z, 3 * f, f)?;
        let i = g.sigmoid(zi);
        let fg = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let gg = g.tanh(zg);
        let keep = g.mul(fg, c_prev)?;
        let write = g.mul(i, gg)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// `f_in`, conv-LSTM, `f_out(f_res(h))` clamped to `[0, 1]`.
    pub fn dehaze_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        lstm: &FusedLstm,
        input: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var, Var)> {
        let y = self.f_in.forward(g, b, input)?;
        let y = g.relu(y);
        let (h, c) = self.conv_lstm_step(g, lstm, y, h_prev, c_prev)?;
        let mut r = h;
        for (first, second) in &self.res {
            let t = first.forward(g, b, r)?;
            let t = g.relu(t);
            let t = second.forward(g, b, t)?;
            r = g.add(r, t)?;
        }
        let out = self.f_out.forward(g, b, r)?;
        Ok((g.clamp(out, 0.0, 1.0), h, c))
    }
}

/// Six conv+PReLU blocks and a 1-channel tanh head.
#[derive(Debug, Clone)]
pub struct TransmissionUpdater {
    params: ModelParams,
    blocks: Vec<ConvPrelu>,
    head: Conv,
}

impl TransmissionUpdater {
    pub fn new<R: RngExt + ?Sized>(width: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        let (params, blocks, head) = updater_body(width, blocks, 8, 1, rng)?;
        Ok(TransmissionUpdater {
            params,
            blocks,
            head,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Per-pixel correction `dT` in `(-1, 1)`, shape `[N, 1, H, W]`.
    pub fn update_transmission(
        &self,
        g: &mut Graph,
        b: &Bound,
        image: Var,
        t: Var,
        i_prime: Var,
        t_prev: Var,
    ) -> Result<Var> {
        let x = g.concat_channels(&[image, t, i_prime, t_prev])?;
        let y = run_blocks(g, b, &self.blocks, &self.head, x)?;
        Ok(g.tanh(y))
    }
}

/// Six conv+PReLU blocks and a 3-channel tanh head, globally averaged
/// unless the locality is [`UpdateLocality::Local`].
#[derive(Debug, Clone)]
pub struct AtmosphericUpdater {
    params: ModelParams,
    blocks: Vec<ConvPrelu>,
    head: Conv,
    locality: UpdateLocality,
}

impl AtmosphericUpdater {
    pub fn new<R: RngExt + ?Sized>(
        width: usize,
        blocks: usize,
        locality: UpdateLocality,
        rng: &mut R,
    ) -> Result<Self> {
        let (params, blocks, head) = updater_body(width, blocks, 12, 3, rng)?;
        Ok(AtmosphericUpdater {
            params,
            blocks,
            head,
            locality,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn locality(&self) -> UpdateLocality {
        self.locality
    }

    /// `dA` as `[N, 3, 1, 1]` (global) or `[N, 3, H, W]` (local).
    pub fn update_atmospheric(
        &self,
        g: &mut Graph,
        b: &Bound,
        image: Var,
        a_plane: Var,
        i_prime: Var,
        a_prev_plane: Var,
    ) -> Result<Var> {
        let x = g.concat_channels(&[image, a_plane, i_prime, a_prev_plane])?;
        let y = run_blocks(g, b, &self.blocks, &self.head, x)?;
        let y = g.tanh(y);
        match self.locality {
            UpdateLocality::Global => Ok(g.global_pool(y, PoolKind::Avg)?),
            UpdateLocality::Local => Ok(y),
        }
    }
}

type UpdaterBody = (ModelParams, Vec<ConvPrelu>, Conv);

fn updater_body<R: RngExt + ?Sized>(
    width: usize,
    blocks: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<UpdaterBody> {
    if width == 0 || blocks == 0 {
        return Err(DehazeError::param("updater", "width and block count must be positive"));
    }
    let mut params = ModelParams::new();
    let mut c = cin;
    let body = (0..blocks)
        .map(|k| {
            let blk = ConvPrelu::new(&mut params, rng, &format!("block{k}"), c, width);
            c = width;
            blk
        })
        .collect();
    let head = Conv::scaled(&mut params, rng, "head", width, cout, 3, 0.1);
    Ok((params, body, head))
}

fn run_blocks(g: &mut Graph, b: &Bound, blocks: &[ConvPrelu], head: &Conv, x: Var) -> Result<Var> {
    let mut h = x;
    for blk in blocks {
        h = blk.forward(g, b, h)?;
    }
    head.forward(g, b, h)
}

/// Concatenates static and dynamic inputs in [`INPUT_LAYOUT`] order.
pub fn assemble_input(
    g: &mut Graph,
    image: Var,
    t: Var,
    a_plane: Var,
    i_prime: Var,
    t_prime: Var,
    a_prime_plane: Var,
) -> Result<Var> {
    let parts = [image, t, a_plane, i_prime, t_prime, a_prime_plane];
    for (&p, (name, c)) in parts.iter().zip(INPUT_LAYOUT) {
        let got = g.value(p).dims4("assemble_input")?.1;
        if got != c {
            return Err(DehazeError::shape(
                "assemble_input",
                format!("{name} has {got} channels, expected {c}"),
            ));
        }
    }
    Ok(g.concat_channels(&parts)?)
}

/// The dehazer and both updaters.
#[derive(Debug, Clone)]
pub struct Ipudn {
    config: IpudnConfig,
    pub dehazer: Dehazer,
    pub t_updater: TransmissionUpdater,
    pub a_updater: AtmosphericUpdater,
}

/// Parameters of an [`Ipudn`] placed on one graph.
#[derive(Debug, Clone)]
pub struct IpudnBound {
    pub dehazer: Bound,
    pub lstm: FusedLstm,
    pub t_updater: Bound,
    pub a_updater: Bound,
}

/// Graph handles of an unrolled run; index `k` holds step `k + 1`.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub outputs: Vec<Var>,
    pub t_primes: Vec<Var>,
    pub a_primes: Vec<Var>,
    /// The airlight correction as added to the full-resolution plane.
    pub applied_delta_a: Vec<Var>,
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
    pub a_plane: Var,
}

impl Ipudn {
    pub fn new<R: RngExt + ?Sized>(config: IpudnConfig, rng: &mut R) -> Result<Self> {
        if !(config.t_floor > 0.0 && config.t_floor < 1.0) {
            return Err(DehazeError::param("t_floor", "must lie in (0, 1)"));
        }
        let dehazer = Dehazer::new(config.features, config.res_blocks, rng)?;
        let t_updater = TransmissionUpdater::new(config.updater_width, config.updater_blocks, rng)?;
        let a_updater = AtmosphericUpdater::new(
            config.updater_width,
            config.updater_blocks,
            config.locality,
            rng,
        )?;
        Ok(Ipudn {
            config,
            dehazer,
            t_updater,
            a_updater,
        })
    }

    pub fn config(&self) -> &IpudnConfig {
        &self.config
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<IpudnBound> {
        let bind = |g: &mut Graph, p: &ModelParams| {
            if trainable {
                g.bind(p)
            } else {
                g.bind_frozen(p)
            }
        };
        let dehazer = bind(g, self.dehazer.params());
        let lstm = self.dehazer.fuse_lstm(g, &dehazer)?;
        let t_updater = bind(g, self.t_updater.params());
        let a_updater = bind(g, self.a_updater.params());
        Ok(IpudnBound {
            dehazer,
            lstm,
            t_updater,
            a_updater,
        })
    }

    /// Runs `steps` iterations on `[N, 3, H, W]` images with transmission
    /// `[N, 1, H, W]` and airlight `[N, 3, 1, 1]`.
    pub fn unroll(
        &self,
        g: &mut Graph,
        bound: &IpudnBound,
        image: Var,
        t: Var,
        a: Var,
        steps: usize,
    ) -> Result<Unrolled> {
        if steps == 0 {
            return Err(DehazeError::param("t1", "must be at least 1"));
        }
        let (n, _, h, w) = g.value(image).dims4("ipudn")?;
        let f = self.dehazer.features();
        let a_plane = g.broadcast_spatial(a, h, w)?;
        let zeros = g.constant(Tensor::zeros([n, f, h, w]));
        let (mut hs, mut cs) = (zeros, zeros);
        let (mut i_prime, mut t_prime, mut a_prime) = (image, t, a_plane);
        let mut out = Unrolled {
            outputs: Vec::with_capacity(steps),
            t_primes: Vec::with_capacity(steps),
            a_primes: Vec::with_capacity(steps),
            applied_delta_a: Vec::with_capacity(steps),
            hidden: Vec::with_capacity(steps),
            cell: Vec::with_capacity(steps),
            a_plane,
        };
        for _ in 0..steps {
            let x = assemble_input(g, image, t, a_plane, i_prime, t_prime, a_prime)?;
            let (next, h_new, c_new) =
                self.dehazer
                    .dehaze_step(g, &bound.dehazer, &bound.lstm, x, hs, cs)?;
            (i_prime, hs, cs) = (next, h_new, c_new);

            let dt = self
                .t_updater
                .update_transmission(g, &bound.t_updater, image, t, i_prime, t_prime)?;
            let t_sum = g.add(t_prime, dt)?;
            let da = self
                .a_updater
                .update_atmospheric(g, &bound.a_updater, image, a_plane, i_prime, a_prime)?;
            let da_plane = match self.a_updater.locality() {
                UpdateLocality::Global => g.broadcast_spatial(da, h, w)?,
                UpdateLocality::Local => da,
            };
            let a_sum = g.add(a_prime, da_plane)?;
            t_prime = g.clamp(t_sum, self.config.t_floor, 1.0);
            a_prime = g.clamp(a_sum, 0.0, 1.0);

            out.outputs.push(i_prime);
            out.t_primes.push(t_prime);
            out.a_primes.push(a_prime);
            out.applied_delta_a.push(da_plane);
            out.hidden.push(hs);
            out.cell.push(cs);
        }
        Ok(out)
    }

    /// Inference on one image; returns `I'(t1)` and every intermediate state.
    pub fn run(
        &self,
        image: &ImagePlane,
        t: &ImagePlane,
        a: AtmosphericLight,
        steps: usize,
    ) -> Result<(ImagePlane, Trajectory)> {
        image.require_channels(3, "run_ipudn")?;
        t.require_channels(1, "run_ipudn")?;
        image.require_dims(t, "run_ipudn")?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let iv = g.constant(image.to_tensor());
        let tv = g.constant(t.to_tensor());
        let av = g.constant(a.to_tensor());
        let u = self.unroll(&mut g, &bound, iv, tv, av, steps)?;
        let (h, w, f) = (image.height(), image.width(), self.dehazer.features());
        let plane = |g: &Graph, v: Var| ImagePlane::from_tensor(g.value(v), 0);
        let state_tensor = |g: &Graph, v: Var| g.value(v).clone().reshape([f, h, w]);
        let initial = IterationState {
            step: 0,
            i_prime: image.clone(),
            t_prime: t.clone(),
            a_prime: a.to_plane(h, w),
            delta_a: None,
            h: Tensor::zeros([f, h, w]),
            c: Tensor::zeros([f, h, w]),
        };
        let mut states = Vec::with_capacity(steps);
        for k in 0..steps {
            states.push(IterationState {
                step: k + 1,
                i_prime: plane(&g, u.outputs[k])?,
                t_prime: plane(&g, u.t_primes[k])?,
                a_prime: plane(&g, u.a_primes[k])?,
                delta_a: Some(plane(&g, u.applied_delta_a[k])?),
                h: state_tensor(&g, u.hidden[k])?,
                c: state_tensor(&g, u.cell[k])?,
            });
        }
        let result = states.last().expect("steps >= 1").i_prime.clone();
        Ok((
            result,
            Trajectory {
                initial,
                steps: states,
            },
        ))
    }
}

/// Inference entry point: `I'(t1)` and the per-step trajectory.
pub fn run_ipudn(
    image: &ImagePlane,
    t: &ImagePlane,
    a: AtmosphericLight,
    t1: usize,
    model: &Ipudn,
) -> Result<(ImagePlane, Trajectory)> {
    model.run(image, t, a, t1)
}

/// Dynamic quantities after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub step: usize,
    pub i_prime: ImagePlane,
    pub t_prime: ImagePlane,
    /// Updated airlight as a full-resolution plane.
    pub a_prime: ImagePlane,
    /// Correction applied to the airlight plane during this step.
    pub delta_a: Option<ImagePlane>,
    pub h: Tensor,
    pub c: Tensor,
}

impl IterationState {
    /// Channel means of the airlight plane; exact for global updates.
    pub fn airlight(&self) -> AtmosphericLight {
        let n = self.a_prime.pixels() as f64;
        AtmosphericLight::saturating(
            [0, 1, 2].map(|c| self.a_prime.channel(c).iter().sum::<f64>() / n),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: IterationState,
    /// One state per iteration, `steps[k].step == k + 1`.
    pub steps: Vec<IterationState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Largest per-channel variance of a correction plane; exactly zero for a
/// constant channel.
pub fn max_channel_variance(plane: &ImagePlane) -> f64 {
    (0..plane.channels())
        .map(|c| {
            let v = plane.channel(c);
            let n = v.len() as f64;
            let shift = v.first().copied().unwrap_or(0.0);
            let mean = v.iter().map(|x| x - shift).sum::<f64>() / n;
            v.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / n
        })
        .fold(0.0, f64::max)
}
