//! Pixel-to-Gaussian, pixel-to-background and Gaussian-to-annotation
//! correspondences, combined by the law of total probability.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat2d::{Gaussian2D, GaussianScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrespondenceParams {
    /// Mahalanobis cut-off beyond which a pixel prefers the background.
    pub cutoff_d: f64,
    /// Mahalanobis radius past which foreground entries are dropped;
    /// `None` means `2 * cutoff_d`, infinity keeps every entry.
    pub truncation_radius: Option<f64>,
    /// Include the virtual background target (column 0).
    pub background: bool,
}

impl Default for CorrespondenceParams {
    fn default() -> Self {
        Self {
            cutoff_d: 3.0,
            truncation_radius: None,
            background: true,
        }
    }
}

impl CorrespondenceParams {
    pub fn with_cutoff(cutoff_d: f64) -> Self {
        Self {
            cutoff_d,
            ..Self::default()
        }
    }

    /// Same parameters with truncation disabled.
    pub fn untruncated(self) -> Self {
        Self {
            truncation_radius: Some(f64::INFINITY),
            ..self
        }
    }

    pub fn radius(&self) -> f64 {
        self.truncation_radius.unwrap_or(2.0 * self.cutoff_d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_d > 0.0 && self.cutoff_d.is_finite()) {
            return Err(Error::InvalidConfig("cutoff d must be > 0".into()));
        }
        if !(self.radius() >= self.cutoff_d) {
            return Err(Error::InvalidConfig("truncation radius must be ≥ cutoff d".into()));
        }
        Ok(())
    }
}

/// `ln N(x; mu, Sigma)`.
#[inline]
pub fn log_p_x_given_gaussian(x: [f64; 2], g: &Gaussian2D) -> f64 {
    -0.5 * g.mahalanobis_sq(x) - (2.0 * PI).ln() - g.log_s[0] - g.log_s[1]
}

/// Normalized 2D Gaussian density `N(x; mu, Sigma)`.
pub fn p_x_given_gaussian(x: [f64; 2], g: &Gaussian2D) -> f64 {
    log_p_x_given_gaussian(x, g).exp()
}

/// Foreground Gaussian nearest to `x` in Mahalanobis distance, with its
/// squared distance. `fg_index[n - 1]` is the Gaussian assigned to
/// annotation `n`; ties go to the lowest annotation index.
pub fn nearest_foreground(x: [f64; 2], scene: &GaussianScene, fg_index: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &m in fg_index {
        let d2 = scene.gaussians[m].mahalanobis_sq(x);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((m, d2));
        }
    }
    best
}

/// `ln P(x | G0)`; zero (probability 1) when the scene has no foreground.
pub fn log_p_x_given_background(x: [f64; 2], scene: &GaussianScene, fg_index: &[usize], cutoff_d: f64) -> f64 {
    match nearest_foreground(x, scene, fg_index) {
        None => 0.0,
        Some((m, d2)) => {
            let g = &scene.gaussians[m];
            -0.5 * (cutoff_d * cutoff_d - d2) - (2.0 * PI).ln() - g.log_s[0] - g.log_s[1]
        }
    }
}

/// Background correspondence
/// `exp(-(d^2 - d_M^2(x, G*)) / 2) / (2 pi |Sigma*|^(1/2))` where `G*` is the
/// nearest foreground Gaussian.
pub fn p_x_given_background(x: [f64; 2], scene: &GaussianScene, cutoff_d: f64) -> Result<f64> {
    let fg = foreground_in_order(scene)?;
    Ok(log_p_x_given_background(x, scene, &fg, cutoff_d).exp())
}

/// Foreground Gaussians ordered by annotation index.
fn foreground_in_order(scene: &GaussianScene) -> Result<Vec<usize>> {
    scene.foreground_index(scene.n_foreground())
}

/// A member of the extended Gaussian set: the background pseudo-Gaussian
/// `G0` or a splatted Gaussian by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Background,
    Splat(usize),
}

/// Pre-assignment indicator `P(G_m | y_n)`; target `n = 0` is the background.
pub fn p_g_given_y(scene: &GaussianScene, component: Component, n: usize) -> f64 {
    let hit = match component {
        Component::Background => n == 0,
        Component::Splat(m) => {
            let g = &scene.gaussians[m];
            g.is_foreground() && n >= 1 && g.assigned == Some(n)
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// `P(x | y_n) = sum_m P(x | G_m) P(G_m | y_n)` over the extended Gaussian set,
/// evaluated literally.
pub fn p_x_given_y(x: [f64; 2], n: usize, scene: &GaussianScene, params: &CorrespondenceParams) -> Result<f64> {
    let mut total = 0.0;
    if p_g_given_y(scene, Component::Background, n) != 0.0 {
        total += p_x_given_background(x, scene, params.cutoff_d)?;
    }
    for (m, g) in scene.gaussians.iter().enumerate() {
        let weight = p_g_given_y(scene, Component::Splat(m), n);
        if weight != 0.0 {
            total += weight * p_x_given_gaussian(x, g);
        }
    }
    Ok(total)
}
