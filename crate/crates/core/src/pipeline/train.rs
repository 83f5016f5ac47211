//! The three-stage training protocol.
//!
//! Stage 1 fits the two prior estimators separately, stage 2 fits the
//! dehazer and updaters on priors from the frozen estimators, and stage 3
//! fine-tunes everything jointly with a reduced estimator learning rate.
//! A [`Trainer`] advances one batch update at a time and can be
//! checkpointed between any two updates.

use std::collections::VecDeque;

use dehaze_tensor::{AdamConfig, AdamState, Graph, ModelParams, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DehazeError, Result};
use crate::image::ImagePlane;
use crate::pipeline::checkpoint::{Blob, Checkpoint};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{augment, gen_scene, sample_haze_params, HazeBand, HazySample, Priors};
use crate::pipeline::models::{Architecture, Models, NETWORKS};
use crate::quality::{self, mse_loss, ssim_loss_graph, total_loss, FeatureExtractor, SsimConfig};

const STREAM_TRAIN: u64 = 10;
const STREAM_VALIDATION: u64 = 20;
const STREAM_POOL: u64 = 30;

/// Updates recorded by the divergence guard's running median.
const GUARD_WINDOW: usize = 64;
const GUARD_MIN_HISTORY: usize = 16;
const GUARD_FACTOR: f64 = 10.0;

pub fn trained_networks(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &NETWORKS[..2],
        2 => &NETWORKS[2..],
        _ => &NETWORKS,
    }
}

/// Names of the per-iteration loss columns of a stage.
pub fn loss_columns(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &["transmission", "atmospheric"],
        _ => &["total"],
    }
}

/// Networks selected together on validation loss.
fn selection_groups(stage: u8) -> Vec<Vec<&'static str>> {
    match stage {
        1 => vec![vec!["transmission"], vec!["atmospheric"]],
        s => vec![trained_networks(s).to_vec()],
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Draws `count` samples: scene seeds and haze from one stream.
fn draw_samples(
    rng: &mut ChaCha8Rng,
    count: usize,
    size: usize,
    mut haze_for: impl FnMut(usize, &mut ChaCha8Rng) -> Result<crate::HazeParams>,
) -> Result<Vec<HazySample>> {
    let plan = (0..count)
        .map(|i| {
            let seed: u64 = rng.random();
            Ok((seed, haze_for(i, rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    plan.into_par_iter()
        .map(|(seed, haze)| HazySample::new(&gen_scene(seed, size), haze))
        .collect()
}

/// Held-out scenes, each hazed at the low, mid and high band.
pub fn validation_set(cfg: &TrainConfig) -> Result<Vec<HazySample>> {
    let mut rng = seeded(cfg.seed, STREAM_VALIDATION);
    let bands = HazeBand::GRAY;
    draw_samples(&mut rng, cfg.val_scenes * bands.len(), cfg.image_size, |i, rng| {
        let mut s = bands[i % bands.len()].sampling();
        s.a_range = cfg.a_range;
        sample_haze_params(rng, &s)
    })
}

/// Fixed training samples used by stages 2 and 3.
pub fn training_pool(cfg: &TrainConfig) -> Result<Vec<HazySample>> {
    let mut rng = seeded(cfg.seed, STREAM_POOL);
    let haze = cfg.haze_sampling();
    draw_samples(&mut rng, cfg.train_pool, cfg.image_size, |_, rng| sample_haze_params(rng, &haze))
}

/// Attaches estimator outputs to every sample.
pub fn attach_priors(models: &Models, samples: &mut [HazySample]) -> Result<()> {
    samples.par_iter_mut().try_for_each(|s| {
        s.priors = Some(Priors {
            transmission: models.transmission.estimate(&s.hazy)?,
            airlight: models.atmospheric.estimate(&s.hazy)?,
        });
        Ok(())
    })
}

fn stack(samples: &[HazySample], f: impl Fn(&HazySample) -> &ImagePlane) -> Result<Tensor> {
    let planes: Vec<&ImagePlane> = samples.iter().map(f).collect();
    ImagePlane::stack(&planes)
}

fn stack_airlight(samples: &[HazySample], f: impl Fn(&HazySample) -> [f64; 3]) -> Tensor {
    let data = samples.iter().flat_map(f).collect();
    Tensor::new([samples.len(), 3, 1, 1], data).expect("three values per sample")
}

fn prior(s: &HazySample) -> Result<&Priors> {
    s.priors
        .as_ref()
        .ok_or_else(|| DehazeError::param("sample", "priors have not been attached"))
}

/// One row of the training log. Iteration 0 is the untrained state.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    /// Mean training loss per column of [`loss_columns`]; NaN at iteration 0.
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Mean PSNR of the final output on the validation set (stages 2, 3).
    pub validation_psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub stage: u8,
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    fn columns(&self) -> usize {
        3 + 2 * loss_columns(self.stage).len()
    }

    fn to_tensor(&self) -> Tensor {
        let cols = self.columns();
        let mut data = Vec::with_capacity(self.records.len() * cols);
        for r in &self.records {
            data.push(r.iteration as f64);
            data.push(r.learning_rate);
            data.extend(&r.train);
            data.extend(&r.validation);
            data.push(r.validation_psnr.unwrap_or(f64::NAN));
        }
        Tensor::new([self.records.len(), cols], data).expect("rectangular log")
    }

    fn from_tensor(stage: u8, t: &Tensor) -> Result<Self> {
        let mut log = TrainLog {
            stage,
            records: Vec::new(),
        };
        let cols = log.columns();
        let k = loss_columns(stage).len();
        if t.shape().len() != 2 || t.shape()[1] != cols {
            return Err(DehazeError::Checkpoint(format!("training log has shape {:?}", t.shape())));
        }
        for row in t.data().chunks_exact(cols) {
            log.records.push(IterationRecord {
                iteration: row[0] as usize,
                learning_rate: row[1],
                train: row[2..2 + k].to_vec(),
                validation: row[2 + k..2 + 2 * k].to_vec(),
                validation_psnr: Some(row[2 + 2 * k]).filter(|v| !v.is_nan()),
            });
        }
        Ok(log)
    }

    /// Tab-separated header for [`TrainLog::tsv_row`].
    pub fn tsv_header(stage: u8) -> String {
        let mut cols = vec!["stage".to_owned(), "iteration".into(), "lr".into()];
        for c in loss_columns(stage) {
            cols.push(format!("train_{c}"));
        }
        for c in loss_columns(stage) {
            cols.push(format!("val_{c}"));
        }
        cols.push("val_psnr".into());
        cols.join("\t")
    }

    pub fn tsv_row(stage: u8, r: &IterationRecord) -> String {
        let mut cols = vec![stage.to_string(), r.iteration.to_string(), format!("{:.3e}", r.learning_rate)];
        cols.extend(r.train.iter().chain(&r.validation).map(|v| format!("{v:.6}")));
        cols.push(r.validation_psnr.map_or_else(|| "-".into(), |p| format!("{p:.3}")));
        cols.join("\t")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = Self::tsv_header(self.stage);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::tsv_row(self.stage, r));
            out.push('\n');
        }
        out
    }

    /// Validation losses of the best record per column.
    pub fn best_validation(&self) -> Vec<f64> {
        let k = loss_columns(self.stage).len();
        (0..k)
            .map(|c| {
                self.records
                    .iter()
                    .map(|r| r.validation[c])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// Aborts on non-finite losses or a loss ten times its running median.
#[derive(Debug, Clone, Default, PartialEq)]
struct DivergenceGuard {
    recent: VecDeque<f64>,
}

impl DivergenceGuard {
    fn check(&mut self, loss: f64, update: u64, what: &str) -> Result<()> {
        if !loss.is_finite() {
            return Err(DehazeError::Diverged {
                update,
                reason: format!("{what} loss is {loss}"),
            });
        }
        if self.recent.len() >= GUARD_MIN_HISTORY {
            let mut sorted: Vec<f64> = self.recent.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            if loss > GUARD_FACTOR * median {
                return Err(DehazeError::Diverged {
                    update,
                    reason: format!("{what} loss {loss:.6e} exceeds {GUARD_FACTOR}x the running median {median:.6e}"),
                });
            }
        }
        if self.recent.len() == GUARD_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BestSlot {
    networks: Vec<&'static str>,
    validation: f64,
    params: Vec<ModelParams>,
}

/// Final models of a stage (best on validation) and its log.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub models: Models,
    pub log: TrainLog,
}

pub struct Trainer {
    cfg: TrainConfig,
    models: Models,
    optimizers: Vec<AdamState>,
    rng: ChaCha8Rng,
    iteration: usize,
    update_in_iteration: usize,
    updates_done: u64,
    loss_sums: Vec<f64>,
    guards: Vec<DivergenceGuard>,
    best: Vec<BestSlot>,
    log: TrainLog,
    feature_extractor: FeatureExtractor,
    validation: Vec<HazySample>,
    pool: Vec<HazySample>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.cfg.stage)
            .field("iteration", &self.iteration)
            .field("update_in_iteration", &self.update_in_iteration)
            .field("updates_done", &self.updates_done)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Prepares `cfg.stage` starting from `models` and validates the
    /// starting point.
    pub fn new(cfg: TrainConfig, models: Models) -> Result<Self> {
        let mut t = Self::prepare(cfg, models)?;
        let (validation, psnr) = t.validate()?;
        for (slot, v) in t.best.iter_mut().zip(&validation) {
            slot.validation = *v;
        }
        let k = validation.len();
        t.log.records.push(IterationRecord {
            iteration: 0,
            learning_rate: t.cfg.learning_rate(0),
            train: vec![f64::NAN; k],
            validation,
            validation_psnr: psnr,
        });
        Ok(t)
    }

    fn prepare(cfg: TrainConfig, models: Models) -> Result<Self> {
        cfg.validate()?;
        if models.architecture() != &Architecture::from(&cfg) {
            return Err(DehazeError::Config(
                "model architecture differs from the training config".into(),
            ));
        }
        let stage = cfg.stage;
        let nets = trained_networks(stage);
        let optimizers = nets
            .iter()
            .map(|n| AdamState::new(models.network(n).expect("known"), AdamConfig::default()))
            .collect();
        let best = selection_groups(stage)
            .into_iter()
            .map(|networks| BestSlot {
                params: networks
                    .iter()
                    .map(|n| models.network(n).expect("known").clone())
                    .collect(),
                networks,
                validation: f64::INFINITY,
            })
            .collect();
        let k = loss_columns(stage).len();
        let mut validation = validation_set(&cfg)?;
        let pool = match stage {
            1 => Vec::new(),
            _ => training_pool(&cfg)?,
        };
        let mut t = Trainer {
            rng: seeded(cfg.seed, STREAM_TRAIN + stage as u64),
            feature_extractor: FeatureExtractor::new(cfg.perceptual_seed),
            optimizers,
            iteration: 0,
            update_in_iteration: 0,
            updates_done: 0,
            loss_sums: vec![0.0; k],
            guards: vec![DivergenceGuard::default(); k],
            best,
            log: TrainLog {
                stage,
                records: Vec::new(),
            },
            validation: Vec::new(),
            pool,
            models,
            cfg,
        };
        if stage == 2 {
            attach_priors(&t.models, &mut validation)?;
            attach_priors(&t.models, &mut t.pool)?;
        }
        t.validation = validation;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Current (not best-selected) weights.
    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn updates_done(&self) -> u64 {
        self.updates_done
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// One batch update. Returns the log record when it completes an
    /// iteration.
    pub fn step(&mut self) -> Result<Option<IterationRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let lr = self.cfg.learning_rate(self.iteration);
        let losses = match self.cfg.stage {
            1 => self.update_stage1(lr)?,
            2 => self.update_stage2(lr)?,
            _ => self.update_stage3(lr)?,
        };
        self.updates_done += 1;
        let cols = loss_columns(self.cfg.stage);
        for (k, l) in losses.iter().enumerate() {
            self.guards[k].check(*l, self.updates_done, cols[k])?;
            self.loss_sums[k] += l;
        }
        self.update_in_iteration += 1;
        if self.update_in_iteration < self.cfg.batch_updates_per_iteration {
            return Ok(None);
        }
        let n = self.update_in_iteration as f64;
        let train = self.loss_sums.iter().map(|s| s / n).collect();
        self.loss_sums.iter_mut().for_each(|s| *s = 0.0);
        self.update_in_iteration = 0;
        self.iteration += 1;
        let (validation, psnr) = self.validate()?;
        for (slot, v) in self.best.iter_mut().zip(&validation) {
            if *v < slot.validation {
                slot.validation = *v;
                slot.params = slot
                    .networks
                    .iter()
                    .map(|n| self.models.network(n).expect("known").clone())
                    .collect();
            }
        }
        let record = IterationRecord {
            iteration: self.iteration,
            learning_rate: lr,
            train,
            validation,
            validation_psnr: psnr,
        };
        self.log.records.push(record.clone());
        Ok(Some(record))
    }

    /// Runs at most `n` updates; stops early when the schedule ends.
    pub fn run_updates(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Models with the best-on-validation weights of every trained network.
    pub fn best_models(&self) -> Models {
        let mut m = self.models.clone();
        for slot in &self.best {
            for (net, p) in slot.networks.iter().zip(&slot.params) {
                *m.network_mut(net).expect("known") = p.clone();
            }
        }
        m
    }

    pub fn finish(self) -> StageOutcome {
        StageOutcome {
            models: self.best_models(),
            log: self.log,
        }
    }

    fn fresh_sample(&mut self) -> Result<HazySample> {
        let seed: u64 = self.rng.random();
        let haze = sample_haze_params(&mut self.rng, &self.cfg.haze_sampling())?;
        let s = HazySample::new(&gen_scene(seed, self.cfg.image_size), haze)?;
        Ok(augment(&s, &mut self.rng)?.0)
    }

    fn pool_sample(&mut self) -> Result<HazySample> {
        let i = self.rng.random_range(0..self.pool.len());
        Ok(augment(&self.pool[i], &mut self.rng)?.0)
    }

    fn random_window(&mut self) -> (usize, usize) {
        let span = self.cfg.image_size - self.cfg.patch_size;
        (self.rng.random_range(0..=span), self.rng.random_range(0..=span))
    }

    fn apply(&mut self, net_index: usize, lr: f64) -> Result<()> {
        let net = trained_networks(self.cfg.stage)[net_index];
        self.optimizers[net_index].set_learning_rate(lr);
        let params = self.models.network_mut(net).expect("known");
        self.optimizers[net_index].update(params)?;
        Ok(())
    }

    fn update_stage1(&mut self, lr: f64) -> Result<Vec<f64>> {
        let batch = (0..self.cfg.batch_size)
            .map(|_| self.fresh_sample())
            .collect::<Result<Vec<_>>>()?;
        let p = self.cfg.patch_size;
        let patches = batch
            .iter()
            .map(|s| {
                let (y0, x0) = self.random_window();
                s.crop(y0, x0, p)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        let b = g.bind(self.models.transmission.params());
        let x = g.constant(stack(&patches, |s| &s.hazy)?);
        let target = g.constant(stack(&patches, |s| &s.transmission)?);
        let t = self.models.transmission.forward(&mut g, &b, x)?;
        let lt = ssim_loss_graph(&mut g, t, target, &SsimConfig::default())?;
        g.backward(lt)?;
        let t_loss = g.value(lt).data()[0];
        g.collect_grads(&b, self.models.transmission.params_mut());

        let mut g = Graph::new();
        let b = g.bind(self.models.atmospheric.params());
        let x = g.constant(stack(&batch, |s| &s.hazy)?);
        let target = g.constant(stack_airlight(&batch, |s| s.haze.airlight.rgb()));
        let a = self.models.atmospheric.forward(&mut g, &b, x)?;
        let la = mse_loss(&mut g, a, target)?;
        g.backward(la)?;
        let a_loss = g.value(la).data()[0];
        g.collect_grads(&b, self.models.atmospheric.params_mut());

        self.apply(0, lr)?;
        self.apply(1, lr)?;
        Ok(vec![t_loss, a_loss])
    }

    fn update_stage2(&mut self, lr: f64) -> Result<Vec<f64>> {
        let p = self.cfg.patch_size;
        let batch = (0..self.cfg.batch_size)
            .map(|_| {
                let s = self.pool_sample()?;
                let (y0, x0) = self.random_window();
                s.crop(y0, x0, p)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let bound = self.models.ipudn.bind(&mut g, true)?;
        let image = g.constant(stack(&batch, |s| &s.hazy)?);
        let t = g.constant(stack(&batch, |s| &s.priors.as_ref().expect("pool has priors").transmission)?);
        let a = g.constant(stack_airlight(&batch, |s| {
            s.priors.as_ref().expect("pool has priors").airlight.rgb()
        }));
        let gt = g.constant(stack(&batch, |s| &s.clean)?);
        let u = self.models.ipudn.unroll(&mut g, &bound, image, t, a, self.cfg.t1)?;
        let loss = total_loss(&mut g, &u.outputs, gt, &self.cfg.loss, &self.feature_extractor)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        g.collect_grads(&bound.dehazer, self.models.ipudn.dehazer.params_mut());
        g.collect_grads(&bound.t_updater, self.models.ipudn.t_updater.params_mut());
        g.collect_grads(&bound.a_updater, self.models.ipudn.a_updater.params_mut());
        for k in 0..3 {
            self.apply(k, lr)?;
        }
        Ok(vec![value])
    }

    fn update_stage3(&mut self, lr: f64) -> Result<Vec<f64>> {
        let batch = (0..self.cfg.batch_size)
            .map(|_| self.pool_sample())
            .collect::<Result<Vec<_>>>()?;
        let (y0, x0) = self.random_window();
        let p = self.cfg.patch_size;
        let m = &self.models;
        let mut g = Graph::new();
        let bt = g.bind(m.transmission.params());
        let ba = g.bind(m.atmospheric.params());
        let bound = m.ipudn.bind(&mut g, true)?;
        let full = g.constant(stack(&batch, |s| &s.hazy)?);
        let t_true = g.constant(stack(&batch, |s| &s.transmission)?);
        let a_true = g.constant(stack_airlight(&batch, |s| s.haze.airlight.rgb()));
        let gt_full = g.constant(stack(&batch, |s| &s.clean)?);

        let t_full = m.transmission.forward(&mut g, &bt, full)?;
        let a = m.atmospheric.forward(&mut g, &ba, full)?;
        let image = g.crop(full, y0, x0, p, p)?;
        let t = g.crop(t_full, y0, x0, p, p)?;
        let gt = g.crop(gt_full, y0, x0, p, p)?;
        let u = m.ipudn.unroll(&mut g, &bound, image, t, a, self.cfg.t1)?;
        let main = total_loss(&mut g, &u.outputs, gt, &self.cfg.loss, &self.feature_extractor)?;
        let lt = ssim_loss_graph(&mut g, t_full, t_true, &SsimConfig::default())?;
        let la = mse_loss(&mut g, a, a_true)?;
        let aux = g.add(lt, la)?;
        let loss = g.add(main, aux)?;
        g.backward(loss)?;
        let value = g.value(main).data()[0];

        g.collect_grads(&bt, self.models.transmission.params_mut());
        g.collect_grads(&ba, self.models.atmospheric.params_mut());
        g.collect_grads(&bound.dehazer, self.models.ipudn.dehazer.params_mut());
        g.collect_grads(&bound.t_updater, self.models.ipudn.t_updater.params_mut());
        g.collect_grads(&bound.a_updater, self.models.ipudn.a_updater.params_mut());
        let est_lr = lr * self.cfg.estimator_lr_ratio;
        self.apply(0, est_lr)?;
        self.apply(1, est_lr)?;
        for k in 2..5 {
            self.apply(k, lr)?;
        }
        Ok(vec![value])
    }

    /// Validation losses per column and, for stages 2 and 3, mean PSNR.
    fn validate(&self) -> Result<(Vec<f64>, Option<f64>)> {
        let chunk = self.cfg.batch_size.max(1);
        let n = self.validation.len() as f64;
        let parts = self
            .validation
            .par_chunks(chunk)
            .map(|c| self.validate_chunk(c))
            .collect::<Result<Vec<_>>>()?;
        let k = loss_columns(self.cfg.stage).len();
        let mut sums = vec![0.0; k];
        let mut psnr = 0.0;
        for (losses, p) in &parts {
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
            psnr += p;
        }
        let means = sums.into_iter().map(|s| s / n).collect();
        Ok((means, (self.cfg.stage > 1).then_some(psnr / n)))
    }

    /// Sums of per-sample losses and PSNR over one chunk.
    fn validate_chunk(&self, chunk: &[HazySample]) -> Result<(Vec<f64>, f64)> {
        let m = &self.models;
        let w = chunk.len() as f64;
        let mut g = Graph::new();
        let image = g.constant(stack(chunk, |s| &s.hazy)?);
        if self.cfg.stage == 1 {
            let bt = g.bind_frozen(m.transmission.params());
            let ba = g.bind_frozen(m.atmospheric.params());
            let t_true = g.constant(stack(chunk, |s| &s.transmission)?);
            let a_true = g.constant(stack_airlight(chunk, |s| s.haze.airlight.rgb()));
            let t = m.transmission.forward(&mut g, &bt, image)?;
            let lt = ssim_loss_graph(&mut g, t, t_true, &SsimConfig::default())?;
            let a = m.atmospheric.forward(&mut g, &ba, image)?;
            let la = mse_loss(&mut g, a, a_true)?;
            return Ok((vec![g.value(lt).data()[0] * w, g.value(la).data()[0] * w], 0.0));
        }
        let (t, a) = if self.cfg.stage == 2 {
            let priors = chunk.iter().map(prior).collect::<Result<Vec<_>>>()?;
            let tp: Vec<&ImagePlane> = priors.iter().map(|p| &p.transmission).collect();
            let t = g.constant(ImagePlane::stack(&tp)?);
            let a = g.constant(stack_airlight(chunk, |s| s.priors.as_ref().expect("checked").airlight.rgb()));
            (t, a)
        } else {
            let bt = g.bind_frozen(m.transmission.params());
            let ba = g.bind_frozen(m.atmospheric.params());
            (
                m.transmission.forward(&mut g, &bt, image)?,
                m.atmospheric.forward(&mut g, &ba, image)?,
            )
        };
        let bound = m.ipudn.bind(&mut g, false)?;
        let gt = g.constant(stack(chunk, |s| &s.clean)?);
        let u = m.ipudn.unroll(&mut g, &bound, image, t, a, self.cfg.t1)?;
        let loss = total_loss(&mut g, &u.outputs, gt, &self.cfg.loss, &self.feature_extractor)?;
        let last: Var = *u.outputs.last().expect("t1 >= 1");
        let mut psnr = 0.0;
        for (i, s) in chunk.iter().enumerate() {
            let out = ImagePlane::from_tensor(g.value(last), i)?;
            psnr += quality::psnr(&out, &s.clean, 1.0)?;
        }
        Ok((vec![g.value(loss).data()[0] * w], psnr))
    }

    /// Complete training state; [`Trainer::resume`] continues from it
    /// bitwise identically.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.models.to_checkpoint(&self.cfg);
        for (net, opt) in trained_networks(self.cfg.stage).iter().zip(&self.optimizers) {
            let a = &opt.config;
            c.insert_f64s(
                format!("adam/{net}/hyper"),
                &[a.learning_rate, a.beta1, a.beta2, a.eps, opt.step as f64],
            );
            let params = self.models.network(net).expect("known");
            for ((p, m), v) in params.iter().zip(&opt.first_moment).zip(&opt.second_moment) {
                c.insert_f64s(format!("adam/{net}/m/{}", p.name), m);
                c.insert_f64s(format!("adam/{net}/v/{}", p.name), v);
            }
        }
        for (k, slot) in self.best.iter().enumerate() {
            c.insert_f64s(format!("best/{k}/validation"), &[slot.validation]);
            for (net, params) in slot.networks.iter().zip(&slot.params) {
                for p in params.iter() {
                    c.insert_tensor(format!("best/{k}/{net}/{}", p.name), p.value.clone());
                }
            }
        }
        c.insert_f64s(
            "trainer/counters",
            &[
                self.iteration as f64,
                self.update_in_iteration as f64,
                self.updates_done as f64,
            ],
        );
        c.insert_f64s("trainer/loss_sums", &self.loss_sums);
        for (k, guard) in self.guards.iter().enumerate() {
            let v: Vec<f64> = guard.recent.iter().copied().collect();
            c.insert_f64s(format!("trainer/guard/{k}"), &v);
        }
        c.insert_tensor("trainer/log", self.log.to_tensor());
        c.insert("trainer/rng", Blob::Bytes(rng_state(&self.rng)));
        c
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let (models, cfg) = Models::from_checkpoint(ckpt)?;
        let mut t = Self::prepare(cfg, models)?;
        let bad = |what: &str| DehazeError::Checkpoint(format!("malformed {what}"));
        let stage = t.cfg.stage;
        for (net, opt) in trained_networks(stage).iter().zip(&mut t.optimizers) {
            let h = ckpt.f64s(&format!("adam/{net}/hyper"))?;
            let [lr, b1, b2, eps, step] = h else {
                return Err(bad("optimizer hyper-parameters"));
            };
            opt.config = AdamConfig {
                learning_rate: *lr,
                beta1: *b1,
                beta2: *b2,
                eps: *eps,
            };
            opt.step = *step as u64;
            let params = t.models.network(net).expect("known");
            for (i, p) in params.iter().enumerate() {
                let m = ckpt.f64s(&format!("adam/{net}/m/{}", p.name))?;
                let v = ckpt.f64s(&format!("adam/{net}/v/{}", p.name))?;
                if m.len() != p.value.numel() || v.len() != p.value.numel() {
                    return Err(bad("optimizer moments"));
                }
                opt.first_moment[i] = m.to_vec();
                opt.second_moment[i] = v.to_vec();
            }
        }
        for (k, slot) in t.best.iter_mut().enumerate() {
            slot.validation = *ckpt
                .f64s(&format!("best/{k}/validation"))?
                .first()
                .ok_or_else(|| bad("best validation"))?;
            for (net, params) in slot.networks.iter().zip(&mut slot.params) {
                let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
                for name in names {
                    let v = ckpt.tensor(&format!("best/{k}/{net}/{name}"))?;
                    params
                        .set(&name, v.clone())
                        .map_err(|e| DehazeError::Checkpoint(e.to_string()))?;
                }
            }
        }
        let counters = ckpt.f64s("trainer/counters")?;
        let [iteration, in_iter, done] = counters else {
            return Err(bad("trainer counters"));
        };
        t.iteration = *iteration as usize;
        t.update_in_iteration = *in_iter as usize;
        t.updates_done = *done as u64;
        let sums = ckpt.f64s("trainer/loss_sums")?;
        if sums.len() != t.loss_sums.len() {
            return Err(bad("loss sums"));
        }
        t.loss_sums = sums.to_vec();
        for (k, guard) in t.guards.iter_mut().enumerate() {
            guard.recent = ckpt.f64s(&format!("trainer/guard/{k}"))?.iter().copied().collect();
        }
        t.log = TrainLog::from_tensor(stage, ckpt.tensor("trainer/log")?)?;
        t.rng = rng_from_state(ckpt.bytes("trainer/rng")?)?;
        Ok(t)
    }
}

fn rng_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 32 + 8 + 16 {
        return Err(DehazeError::Checkpoint(format!("rng state has {} bytes", bytes.len())));
    }
    let seed: [u8; 32] = bytes[..32].try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..].try_into().expect("16 bytes")));
    Ok(rng)
}

/// Fresh networks trained by stage 1.
pub fn train_stage1(cfg: &TrainConfig) -> Result<StageOutcome> {
    let models = Models::new(Architecture::from(cfg), cfg.seed)?;
    run_stage(cfg, models, 1)
}

/// Stage 2 on top of stage-1 `models`; the estimators are left untouched.
pub fn train_stage2(cfg: &TrainConfig, models: Models) -> Result<StageOutcome> {
    run_stage(cfg, models, 2)
}

pub fn train_stage3(cfg: &TrainConfig, models: Models) -> Result<StageOutcome> {
    run_stage(cfg, models, 3)
}

fn run_stage(cfg: &TrainConfig, models: Models, stage: u8) -> Result<StageOutcome> {
    if cfg.stage != stage {
        return Err(DehazeError::Config(format!(
            "config is for stage {}, not stage {stage}",
            cfg.stage
        )));
    }
    let mut t = Trainer::new(cfg.clone(), models)?;
    t.run()?;
    Ok(t.finish())
}
