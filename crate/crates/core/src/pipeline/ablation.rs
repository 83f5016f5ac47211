//! Paired training runs that differ along a single design axis.

use std::fmt;
use std::str::FromStr;

use crate::error::{DehazeError, Result};
use crate::estimators::PoolChoice;
use crate::ipudn::UpdateLocality;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::HazeBand;
use crate::pipeline::eval::{eval_suite, evaluate, EvalCase, Metrics};
use crate::pipeline::models::{Architecture, Models};
use crate::pipeline::train::{train_stage1, train_stage2};
use crate::quality::LossKind;
use crate::scattering::invert_scattering;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Global max vs. average pooling in the airlight estimator.
    PoolKind,
    UpdateLocality,
    /// Recurrent steps 3, 6 and 9.
    TimeSteps,
    /// L1, MSE and per-step L1 reconstruction losses.
    LossKind,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::PoolKind,
        AblationAxis::UpdateLocality,
        AblationAxis::TimeSteps,
        AblationAxis::LossKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::PoolKind => "pool_kind",
            AblationAxis::UpdateLocality => "update_locality",
            AblationAxis::TimeSteps => "time_steps",
            AblationAxis::LossKind => "loss_kind",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = DehazeError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DehazeError::param("axis", format!("unknown ablation axis {s:?}")))
    }
}

/// Base configurations and the held-out suite every variant is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval_seed: u64,
    /// Scenes per haze band.
    pub eval_scenes: usize,
}

impl AblationPlan {
    pub fn desk(seed: u64) -> Self {
        AblationPlan {
            stage1: TrainConfig { seed, ..TrainConfig::desk(1) },
            stage2: TrainConfig { seed, ..TrainConfig::desk(2) },
            eval_seed: seed.wrapping_add(777),
            eval_scenes: 8,
        }
    }

    fn suite(&self, bands: &[HazeBand]) -> Result<Vec<EvalCase>> {
        eval_suite(self.eval_seed, self.eval_scenes, self.stage2.image_size, bands)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub metrics: Metrics,
    /// Mean squared airlight error; pooling axis only.
    pub a_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Header plus one tab-separated line per configuration.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("axis\tconfig\tpsnr\tssim\tciede2000\ta_mse\n");
        for r in &self.rows {
            let a = r.a_mse.map_or_else(|| "-".to_owned(), |v| format!("{v:.6e}"));
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.5}\t{:.4}\t{a}\n",
                self.axis, r.label, r.metrics.psnr, r.metrics.ssim, r.metrics.ciede2000
            ));
        }
        out
    }
}

/// Trains every variant of `axis` and scores it on the held-out suite.
///
/// Variants past stage 1 share one set of stage-1 estimators: `pretrained`
/// when given, else a fresh run of `plan.stage1`.
pub fn run_ablation(axis: AblationAxis, plan: &AblationPlan, pretrained: Option<&Models>) -> Result<AblationReport> {
    let rows = match axis {
        AblationAxis::PoolKind => pool_rows(plan)?,
        _ => {
            let trained;
            let base = match pretrained {
                Some(m) => m,
                None => {
                    trained = train_stage1(&plan.stage1)?.models;
                    &trained
                }
            };
            let cases = plan.suite(&HazeBand::GRAY)?;
            variants(axis, &plan.stage2)
                .into_iter()
                .map(|(label, cfg)| {
                    let models = stage2_variant(base, &cfg)?;
                    let metrics = evaluate(&cases, |s| Ok(models.dehaze(&s.hazy, cfg.t1)?.image))?;
                    Ok(AblationRow {
                        label,
                        metrics: Metrics::mean(&metrics),
                        a_mse: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(AblationReport { axis, rows })
}

fn variants(axis: AblationAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::PoolKind => [PoolChoice::Max, PoolChoice::Avg]
            .into_iter()
            .map(|p| {
                let label = match p {
                    PoolChoice::Max => "max",
                    PoolChoice::Avg => "avg",
                };
                (label.to_owned(), with(&|c| c.atmospheric.global_pool = p))
            })
            .collect(),
        AblationAxis::UpdateLocality => [UpdateLocality::Global, UpdateLocality::Local]
            .into_iter()
            .map(|l| {
                let label = match l {
                    UpdateLocality::Global => "global",
                    UpdateLocality::Local => "local",
                };
                (label.to_owned(), with(&|c| c.ipudn.locality = l))
            })
            .collect(),
        AblationAxis::TimeSteps => [3, 6, 9]
            .into_iter()
            .map(|t| (format!("t1={t}"), with(&|c| c.t1 = t)))
            .collect(),
        AblationAxis::LossKind => [LossKind::L1, LossKind::Mse, LossKind::RecursiveL1]
            .into_iter()
            .map(|k| {
                let label = match k {
                    LossKind::L1 => "l1",
                    LossKind::Mse => "mse",
                    LossKind::RecursiveL1 => "recursive_l1",
                };
                (label.to_owned(), with(&|c| c.loss.kind = k))
            })
            .collect(),
    }
}

/// Stage 2 of `cfg` on top of the estimators of `base`.
fn stage2_variant(base: &Models, cfg: &TrainConfig) -> Result<Models> {
    let mut models = Models::new(Architecture::from(cfg), cfg.seed)?;
    if base.transmission.config() != &cfg.transmission || base.atmospheric.config() != &cfg.atmospheric {
        return Err(DehazeError::Config(
            "pretrained estimators differ from the stage-2 config".into(),
        ));
    }
    models.transmission = base.transmission.clone();
    models.atmospheric = base.atmospheric.clone();
    Ok(train_stage2(cfg, models)?.models)
}

/// Airlight estimators trained with each global pool, scored by airlight
/// error and by inverting with the true transmission on the gray bands.
fn pool_rows(plan: &AblationPlan) -> Result<Vec<AblationRow>> {
    let cases = plan.suite(&HazeBand::GRAY)?;
    variants(AblationAxis::PoolKind, &plan.stage1)
        .into_iter()
        .map(|(label, cfg)| {
            let models = train_stage1(&cfg)?.models;
            let est = &models.atmospheric;
            let floor = cfg.ipudn.t_floor;
            let metrics = evaluate(&cases, |s| {
                invert_scattering(&s.hazy, &s.transmission, est.estimate(&s.hazy)?, floor)
            })?;
            let mut sq = 0.0;
            for c in &cases {
                let a = est.estimate(&c.sample.hazy)?.rgb();
                let t = c.sample.haze.airlight.rgb();
                sq += a.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 3.0;
            }
            Ok(AblationRow {
                label,
                metrics: Metrics::mean(&metrics),
                a_mse: Some(sq / cases.len() as f64),
            })
        })
        .collect()
}
