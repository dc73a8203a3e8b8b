use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ToyRegressor;
use super::{count, Sample};
use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::imagedata::{AnnotationTarget, DensityMap};
use crate::losses::{
    cost_matrix, dmcount_loss_with_cost, gst_loss, l2_loss, make_pseudo_gt, CostMatrix, DmCountConfig, LossResult,
};

pub const CSV_HEADER: &str = "step,loss,count_err,transport_ms,total_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Push-forward L1 through a fitted-splat kernel.
    Gst,
    /// Push-forward L1 through a fixed isotropic kernel.
    Heuristic,
    /// Squared error against pseudo ground truth.
    L2,
    DmCount,
}

impl LossKind {
    pub fn needs_kernel(self) -> bool {
        matches!(self, LossKind::Gst | LossKind::Heuristic)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gst => "gst",
            LossKind::Heuristic => "heuristic",
            LossKind::L2 => "l2",
            LossKind::DmCount => "dm-count",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gst" => Ok(LossKind::Gst),
            "heuristic" => Ok(LossKind::Heuristic),
            "l2" => Ok(LossKind::L2),
            "dm-count" | "dmcount" => Ok(LossKind::DmCount),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps; one image per step.
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Pseudo ground-truth width for the L2 loss.
    pub pseudo_sigma: f64,
    pub dmcount: DmCountConfig,
    /// Record wall-clock columns; off gives byte-reproducible logs.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            seed: 0,
            pseudo_sigma: 2.0,
            dmcount: DmCountConfig::default(),
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(self.pseudo_sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be > 0".into()));
        }
        self.dmcount.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    /// `|count - N|` on the step's image before the update.
    pub count_err: f64,
    pub transport_ms: f64,
    pub total_ms: f64,
    /// Inner solver iterations spent on transport (0 for closed-form losses).
    pub transport_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub loss: LossKind,
    pub config: TrainConfig,
    pub records: Vec<TrainRecord>,
    pub model: ToyRegressor,
}

impl TrainRun {
    pub fn mean_transport_ms(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.transport_ms).sum::<f64>() / self.records.len() as f64
    }
}

/// Per-sample state the loss needs, built once before training.
enum Prepared {
    Kernel(AnnotationTarget),
    Pseudo(DensityMap),
    Cost(Option<CostMatrix>),
}

fn prepare(data: &[Sample], kind: LossKind, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let (h, w) = (s.image.height(), s.image.width());
            Ok(match kind {
                LossKind::Gst | LossKind::Heuristic => {
                    let k = s.kernel.as_ref().ok_or(Error::MissingKernel(i))?;
                    if k.n_pixels() != h * w || k.n_targets() != s.annotations.n_targets() {
                        return Err(Error::shape(
                            format!("kernel for {h}x{w} with {} targets", s.annotations.n_targets()),
                            format!("{} rows, {} targets", k.n_pixels(), k.n_targets()),
                        ));
                    }
                    Prepared::Kernel(AnnotationTarget::from_annotations(&s.annotations))
                }
                LossKind::L2 => Prepared::Pseudo(make_pseudo_gt(&s.annotations, cfg.pseudo_sigma, h, w)?),
                LossKind::DmCount => Prepared::Cost(if s.annotations.is_empty() {
                    None
                } else {
                    Some(cost_matrix(h, w, &s.annotations, cfg.dmcount.metric)?)
                }),
            })
        })
        .collect()
}

fn transport_loss(
    sample: &Sample,
    prepared: &Prepared,
    d: &DensityMap,
    cfg: &TrainConfig,
) -> Result<(LossResult, usize)> {
    match prepared {
        Prepared::Kernel(target) => {
            let k = sample.kernel.as_ref().expect("checked in prepare");
            Ok((gst_loss(k, d, target)?, 0))
        }
        Prepared::Pseudo(p) => Ok((l2_loss(d, p)?, 0)),
        Prepared::Cost(Some(cost)) => {
            let (loss, stats) = dmcount_loss_with_cost(d, cost, &cfg.dmcount)?;
            Ok((loss, stats.sinkhorn_iterations))
        }
        // nothing to transport to: only the count term remains
        Prepared::Cost(None) => {
            let mass = d.total();
            Ok((
                LossResult {
                    value: cfg.dmcount.lambda_d * mass,
                    grad: vec![cfg.dmcount.lambda_d; d.len()],
                },
                0,
            ))
        }
    }
}

/// Train a fresh regressor (seeded by `cfg.seed`) with Adam, one image per
/// step, visiting the data in a seeded shuffled order each epoch.
pub fn train(data: &[Sample], kind: LossKind, cfg: &TrainConfig) -> Result<TrainRun> {
    train_from(ToyRegressor::new(cfg.seed), data, kind, cfg)
}

pub fn train_from(mut model: ToyRegressor, data: &[Sample], kind: LossKind, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared = prepare(data, kind, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(
        model.params.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let sample = &data[idx];
        let started = Instant::now();
        let d = model.forward(&sample.image)?;
        let transport_start = Instant::now();
        let (loss, transport_iterations) = transport_loss(sample, &prepared[idx], &d, cfg)?;
        let transport_ms = transport_start.elapsed().as_secs_f64() * 1e3;
        if !loss.value.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at step {step}")));
        }
        let grad = model.backward(&sample.image, &loss.grad)?;
        adam.step(&mut model.params, &grad, None);
        let total_ms = started.elapsed().as_secs_f64() * 1e3;
        records.push(TrainRecord {
            step,
            loss: loss.value,
            count_err: (count(&d) - sample.annotations.len() as f64).abs(),
            transport_ms: if cfg.record_timing { transport_ms } else { 0.0 },
            total_ms: if cfg.record_timing { total_ms } else { 0.0 },
            transport_iterations,
        });
    }
    Ok(TrainRun {
        loss: kind,
        config: cfg.clone(),
        records,
        model,
    })
}

/// Training log as CSV with [`CSV_HEADER`].
pub fn write_run_csv(run: &TrainRun) -> String {
    let mut out = String::with_capacity(64 * (run.records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &run.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.loss, r.count_err, r.transport_ms, r.total_ms
        );
    }
    out
}
