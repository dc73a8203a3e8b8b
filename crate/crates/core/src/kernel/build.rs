use std::f64::consts::PI;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::correspondence::{
    log_p_x_given_background, log_p_x_given_gaussian, p_g_given_y, Component, CorrespondenceParams,
};
use super::{KernelMeta, TransportKernel};
use crate::error::{Error, Result};
use crate::imagedata::{pixel_center, AnnotationSet};
use crate::splat2d::{Gaussian2D, GaussianScene, Role};

/// Per-annotation evaluation state for the foreground Gaussian assigned to it.
struct Target {
    mu: [f64; 2],
    sin: f64,
    cos: f64,
    inv_var: [f64; 2],
    /// `-ln(2 pi) - ln(s1 s2)`
    log_norm: f64,
}

impl Target {
    fn new(g: &Gaussian2D) -> Self {
        let (sin, cos) = g.theta.sin_cos();
        Self {
            mu: g.mu,
            sin,
            cos,
            inv_var: [(-2.0 * g.log_s[0]).exp(), (-2.0 * g.log_s[1]).exp()],
            log_norm: -(2.0 * PI).ln() - g.log_s[0] - g.log_s[1],
        }
    }

    #[inline]
    fn mahalanobis_sq(&self, x: [f64; 2]) -> f64 {
        let (dr, dc) = (x[0] - self.mu[0], x[1] - self.mu[1]);
        let u1 = self.cos * dr + self.sin * dc;
        let u2 = -self.sin * dr + self.cos * dc;
        u1 * u1 * self.inv_var[0] + u2 * u2 * self.inv_var[1]
    }
}

/// Build the row-stochastic transport kernel of a fitted scene.
///
/// Row `i` is `P(x_i | y_n) / sum_n' P(x_i | y_n')` over the background
/// (column 0) and every annotation whose Gaussian lies within the truncation
/// radius of pixel `i`, computed in log space. Dropped entries count as zero.
pub fn build_kernel(
    scene: &GaussianScene,
    ann: &AnnotationSet,
    params: &CorrespondenceParams,
) -> Result<TransportKernel> {
    params.validate()?;
    if (scene.height, scene.width) != (ann.height(), ann.width()) {
        return Err(Error::shape(
            format!("scene {}x{}", scene.height, scene.width),
            format!("annotations for {}x{}", ann.height(), ann.width()),
        ));
    }
    if scene.n_foreground() != ann.len() {
        return Err(Error::InvalidInput(format!(
            "scene has {} foreground Gaussians but there are {} annotations",
            scene.n_foreground(),
            ann.len()
        )));
    }
    let fg_index = scene.foreground_index(ann.len())?;
    let targets: Vec<Target> = fg_index.iter().map(|&m| Target::new(&scene.gaussians[m])).collect();
    let (h, w) = (scene.height, scene.width);
    let radius = params.radius();
    let radius_sq = radius * radius;
    let candidates = candidate_lists(scene, &fg_index, h, w, radius_sq);
    let background = params.background || targets.is_empty();
    let cutoff_sq = params.cutoff_d * params.cutoff_d;

    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let x = pixel_center(i / w, i % w);
            let mut cols: Vec<u32> = Vec::new();
            let mut logs: Vec<f64> = Vec::new();
            let mut nearest: Option<(usize, f64)> = None;
            let mut visit = |n: usize, cols: &mut Vec<u32>, logs: &mut Vec<f64>| {
                let d2 = targets[n].mahalanobis_sq(x);
                if d2 <= radius_sq {
                    if nearest.is_none_or(|(_, b)| d2 < b) {
                        nearest = Some((n, d2));
                    }
                    cols.push(n as u32 + 1);
                    logs.push(targets[n].log_norm - 0.5 * d2);
                }
            };
            match &candidates {
                Some(lists) => {
                    for &n in &lists[i] {
                        visit(n as usize, &mut cols, &mut logs);
                    }
                }
                None => {
                    for n in 0..targets.len() {
                        visit(n, &mut cols, &mut logs);
                    }
                }
            }
            if background {
                let log_bg = match nearest {
                    // no foreground within reach: the row is pure background
                    None => 0.0,
                    Some((n, d2)) => targets[n].log_norm - 0.5 * (cutoff_sq - d2),
                };
                cols.insert(0, 0);
                logs.insert(0, log_bg);
            } else if cols.is_empty() {
                // keep the most likely annotation so the row stays stochastic
                let best = (0..targets.len())
                    .map(|n| (n, targets[n].log_norm - 0.5 * targets[n].mahalanobis_sq(x)))
                    .fold(None, |acc: Option<(usize, f64)>, (n, l)| match acc {
                        Some((_, b)) if b >= l => acc,
                        _ => Some((n, l)),
                    })
                    .expect("at least one annotation");
                cols.push(best.0 as u32 + 1);
                logs.push(best.1);
            }
            (cols, normalize_log_weights(&logs))
        })
        .collect();

    let mut kernel = TransportKernel::from_rows(ann.n_targets(), params.cutoff_d, rows)?;
    kernel.meta = Some(KernelMeta {
        scene_hash: scene_hash(scene),
        truncation_radius: radius,
        background,
    });
    Ok(kernel)
}

/// Row normalization `exp(l_n - logsumexp(l))`.
fn normalize_log_weights(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let lse = max + total.ln();
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// Annotation indices (0-based) whose truncation ellipse bounding box covers
/// each pixel, in increasing order; `None` when truncation is disabled.
fn candidate_lists(
    scene: &GaussianScene,
    fg_index: &[usize],
    h: usize,
    w: usize,
    radius_sq: f64,
) -> Option<Vec<Vec<u32>>> {
    if !radius_sq.is_finite() {
        return None;
    }
    let mut lists = vec![Vec::new(); h * w];
    for (n, &m) in fg_index.iter().enumerate() {
        let g = &scene.gaussians[m];
        let ext = g.half_extent(radius_sq);
        let rows = index_range(g.mu[0], ext[0], h);
        let cols = index_range(g.mu[1], ext[1], w);
        for r in rows {
            for c in cols.clone() {
                lists[r * w + c].push(n as u32);
            }
        }
    }
    Some(lists)
}

fn index_range(center: f64, ext: f64, len: usize) -> std::ops::Range<usize> {
    // pixel centers sit at index + 0.5; pad by one pixel against rounding
    let lo = (center - ext - 1.5).floor().max(0.0);
    let hi = (center + ext + 0.5).ceil().min(len as f64);
    if hi <= lo {
        return 0..0;
    }
    lo as usize..hi as usize
}

/// Scene with one isotropic `sigma` Gaussian per annotation, assigned in order.
pub fn heuristic_scene(ann: &AnnotationSet, sigma: f64) -> GaussianScene {
    let gaussians = ann
        .points()
        .iter()
        .enumerate()
        .map(|(i, &p)| Gaussian2D {
            role: Role::Foreground,
            assigned: Some(i + 1),
            ..Gaussian2D::isotropic(p, sigma, 1.0, vec![1.0])
        })
        .collect();
    GaussianScene::new(ann.height(), ann.width(), gaussians)
}

/// Kernel with `P(x | y_n) = N(x; y_n, sigma^2 I)` and the background term
/// taken from the nearest annotation (in Euclidean distance).
pub fn build_heuristic_kernel(
    ann: &AnnotationSet,
    sigma: f64,
    params: &CorrespondenceParams,
) -> Result<TransportKernel> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig("sigma must be > 0".into()));
    }
    build_kernel(&heuristic_scene(ann, sigma), ann, params)
}

/// Brute-force dense kernel, row-major `n_pixels x (N + 1)`.
///
/// Every entry is evaluated from the correspondence definitions with no
/// truncation and no neighbor search; meant as an oracle on small images.
/// Column 0 is all zeros when `params.background` is off and there is at
/// least one annotation.
pub fn build_dense_kernel(
    scene: &GaussianScene,
    ann: &AnnotationSet,
    params: &CorrespondenceParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let n = ann.len();
    if scene.n_foreground() != n {
        return Err(Error::InvalidInput(format!(
            "scene has {} foreground Gaussians but there are {n} annotations",
            scene.n_foreground()
        )));
    }
    let fg_index = scene.foreground_index(n)?;
    let background = params.background || n == 0;
    let (h, w) = (scene.height, scene.width);
    let cols = n + 1;
    let mut dense = vec![0.0; h * w * cols];
    for (i, row) in dense.chunks_mut(cols).enumerate() {
        let x = pixel_center(i / w, i % w);
        let mut logs = vec![f64::NEG_INFINITY; cols];
        if background {
            logs[0] = log_p_x_given_background(x, scene, &fg_index, params.cutoff_d);
        }
        for (t, log) in logs.iter_mut().enumerate().skip(1) {
            let terms: Vec<f64> = scene
                .gaussians
                .iter()
                .enumerate()
                .filter(|&(m, _)| p_g_given_y(scene, Component::Splat(m), t) != 0.0)
                .map(|(_, g)| log_p_x_given_gaussian(x, g))
                .collect();
            *log = log_sum_exp(&terms);
        }
        let lse = log_sum_exp(&logs);
        for (v, l) in row.iter_mut().zip(&logs) {
            *v = (l - lse).exp();
        }
    }
    Ok(dense)
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Hex SHA-256 prefix of the scene's JSON form.
pub fn scene_hash(scene: &GaussianScene) -> String {
    let digest = Sha256::digest(scene.to_json().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
