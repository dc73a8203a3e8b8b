//! DMCount-style baseline: count discrepancy plus an entropic OT term solved
//! by Sinkhorn on every call.

use serde::{Deserialize, Serialize};

use super::ot::{cost_matrix, sinkhorn, CostMatrix, Metric, SinkhornConfig};
use super::{sign, LossResult};
use crate::error::{Error, Result};
use crate::imagedata::{AnnotationSet, DensityMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmCountConfig {
    /// Weight of the count term `| ||d||_1 - N |`.
    pub lambda_d: f64,
    pub sinkhorn: SinkhornConfig,
    pub metric: Metric,
}

impl Default for DmCountConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            sinkhorn: SinkhornConfig::default(),
            metric: Metric::SquaredEuclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmCountStats {
    pub count_term: f64,
    pub ot_term: f64,
    pub sinkhorn_iterations: usize,
}

pub fn dmcount_loss(d: &DensityMap, ann: &AnnotationSet, cfg: &DmCountConfig) -> Result<(LossResult, DmCountStats)> {
    let cost = cost_matrix(d.height(), d.width(), ann, cfg.metric)?;
    dmcount_loss_with_cost(d, &cost, cfg)
}

/// Same as [`dmcount_loss`] with a precomputed pixel-to-annotation cost matrix.
///
/// The OT term is `<C, P>` for the Sinkhorn plan between `d / ||d||_1` and the
/// uniform annotation marginal. Its gradient comes from the source dual
/// potential `f` pulled back through the normalization,
/// `(f_i - sum_j a_j f_j) / ||d||_1`.
pub fn dmcount_loss_with_cost(
    d: &DensityMap,
    cost: &CostMatrix,
    cfg: &DmCountConfig,
) -> Result<(LossResult, DmCountStats)> {
    if cost.rows() != d.len() {
        return Err(Error::shape(
            format!("{} cost rows", d.len()),
            format!("{}", cost.rows()),
        ));
    }
    let n = cost.cols();
    if n == 0 {
        return Err(Error::InvalidInput("DMCount needs at least one annotation".into()));
    }
    let mass = d.total();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let a: Vec<f64> = d.values().iter().map(|v| v / mass).collect();
    let b = vec![1.0 / n as f64; n];
    let out = sinkhorn(&a, &b, cost, &cfg.sinkhorn)?;

    let excess = mass - n as f64;
    let count_term = cfg.lambda_d * excess.abs();
    let count_grad = cfg.lambda_d * sign(excess);
    let mean_f: f64 = a.iter().zip(&out.f_hat).map(|(ai, fi)| ai * fi).sum();
    let grad = out.f_hat.iter().map(|fi| count_grad + (fi - mean_f) / mass).collect();
    Ok((
        LossResult {
            value: count_term + out.cost,
            grad,
        },
        DmCountStats {
            count_term,
            ot_term: out.cost,
            sinkhorn_iterations: out.iterations,
        },
    ))
}
