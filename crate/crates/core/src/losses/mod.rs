//! Training losses on predicted density maps, plus the optimal-transport
//! machinery used by the DMCount baseline and the audit oracles.

mod dmcount;
mod ot;

use crate::error::{Error, Result};
use crate::imagedata::{pixel_center, AnnotationSet, AnnotationTarget, DensityMap};
use crate::kernel::TransportKernel;

pub use dmcount::{dmcount_loss, dmcount_loss_with_cost, DmCountConfig, DmCountStats};
pub use ot::{
    check_pushforward_equivalence, cost_matrix, nw_corner_plan, ot_1d_cost, sinkhorn, CostMatrix, Metric,
    SinkhornConfig, SinkhornOutput, TransportPlan,
};

/// Loss value and its gradient with respect to every density pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Transported mass discrepancy `|| K' d - zeta_g ||_1` over all targets,
/// background included. The gradient is `K sign(K' d - zeta_g)`.
pub fn gst_loss(kernel: &TransportKernel, d: &DensityMap, target: &AnnotationTarget) -> Result<LossResult> {
    if target.len() != kernel.n_targets() {
        return Err(Error::shape(
            format!("{} targets", kernel.n_targets()),
            format!("{} targets", target.len()),
        ));
    }
    let pushed = kernel.transpose_mul(d.values())?;
    let residual: Vec<f64> = pushed.iter().zip(target.values()).map(|(p, z)| p - z).collect();
    let value = residual.iter().map(|r| r.abs()).sum();
    let signs: Vec<f64> = residual.iter().map(|&r| sign(r)).collect();
    Ok(LossResult {
        value,
        grad: kernel.mul(&signs)?,
    })
}

/// Pseudo ground truth: one isotropic Gaussian of width `sigma` per
/// annotation, each normalized to unit mass over the pixel grid.
pub fn make_pseudo_gt(ann: &AnnotationSet, sigma: f64, height: usize, width: usize) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig("sigma must be > 0".into()));
    }
    let mut values = vec![0.0; height * width];
    let mut blob = vec![0.0; height * width];
    let inv = 0.5 / (sigma * sigma);
    for p in ann.points() {
        let mut total = 0.0;
        for (i, b) in blob.iter_mut().enumerate() {
            let x = pixel_center(i / width, i % width);
            let d2 = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
            *b = (-d2 * inv).exp();
            total += *b;
        }
        if !(total > 0.0) {
            // sigma far below a pixel and the point far from every center
            return Err(Error::Numerical(format!(
                "pseudo ground truth underflows for sigma {sigma}"
            )));
        }
        for (v, b) in values.iter_mut().zip(&blob) {
            *v += b / total;
        }
    }
    DensityMap::new(height, width, values)
}

/// Squared error against a pseudo ground-truth map.
pub fn l2_loss(d: &DensityMap, pseudo: &DensityMap) -> Result<LossResult> {
    if (d.height(), d.width()) != (pseudo.height(), pseudo.width()) {
        return Err(Error::shape(
            format!("{}x{}", pseudo.height(), pseudo.width()),
            format!("{}x{}", d.height(), d.width()),
        ));
    }
    let diff: Vec<f64> = d.values().iter().zip(pseudo.values()).map(|(a, b)| a - b).collect();
    Ok(LossResult {
        value: diff.iter().map(|x| x * x).sum(),
        grad: diff.iter().map(|x| 2.0 * x).collect(),
    })
}
