//! 2D Gaussian splatting of annotated images.
//!
//! Each Gaussian carries a mean, two log-scales, a rotation angle, an opacity
//! and a color. Foreground Gaussians are pinned one-to-one to annotations;
//! their means never move during fitting.

mod fit;
mod render;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit, fit_from, fit_with_history, initial_scene, FitConfig, FitRecord};
pub use render::{
    reconstruction_loss, render, render_with, shape_loss, total_loss, total_loss_and_grad, LossAndGrad, RenderMode,
    TRUNCATION_MAHALANOBIS_SQ,
};

/// Trainable scalars per Gaussian ahead of its color channels:
/// `mu_row, mu_col, log_s1, log_s2, theta, alpha`.
pub const GEOMETRY_PARAMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "fg")]
    Foreground,
    #[serde(rename = "bg")]
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    /// Mean `(row, col)` in pixel coordinates.
    pub mu: [f64; 2],
    pub log_s: [f64; 2],
    pub theta: f64,
    pub alpha: f64,
    pub color: Vec<f64>,
    pub role: Role,
    /// Extended annotation index (`1..=N`) of a foreground Gaussian.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned: Option<usize>,
}

impl Gaussian2D {
    pub fn isotropic(mu: [f64; 2], scale: f64, alpha: f64, color: Vec<f64>) -> Self {
        Self {
            mu,
            log_s: [scale.ln(); 2],
            theta: 0.0,
            alpha,
            color,
            role: Role::Background,
            assigned: None,
        }
    }

    pub fn scales(&self) -> [f64; 2] {
        [self.log_s[0].exp(), self.log_s[1].exp()]
    }

    /// `R S (R S)'` with `R` the rotation by `theta` and `S = diag(s1, s2)`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [s1, s2] = self.scales();
        let (sin, cos) = self.theta.sin_cos();
        let (v1, v2) = (s1 * s1, s2 * s2);
        let off = (v1 - v2) * cos * sin;
        [
            [v1 * cos * cos + v2 * sin * sin, off],
            [off, v1 * sin * sin + v2 * cos * cos],
        ]
    }

    /// `sqrt(det(Sigma)) = s1 * s2`.
    pub fn sqrt_det(&self) -> f64 {
        (self.log_s[0] + self.log_s[1]).exp()
    }

    /// Offset from the mean expressed along the Gaussian's principal axes.
    #[inline]
    pub fn local_offset(&self, x: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = self.theta.sin_cos();
        let (dr, dc) = (x[0] - self.mu[0], x[1] - self.mu[1]);
        [cos * dr + sin * dc, -sin * dr + cos * dc]
    }

    /// Squared Mahalanobis distance `(x - mu)' Sigma^-1 (x - mu)`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: [f64; 2]) -> f64 {
        let [u1, u2] = self.local_offset(x);
        let inv1 = (-2.0 * self.log_s[0]).exp();
        let inv2 = (-2.0 * self.log_s[1]).exp();
        u1 * u1 * inv1 + u2 * u2 * inv2
    }

    /// Major over minor scale, always `>= 1`.
    pub fn aspect_ratio(&self) -> f64 {
        (self.log_s[0] - self.log_s[1]).abs().exp()
    }

    pub fn is_foreground(&self) -> bool {
        self.role == Role::Foreground
    }

    /// Half extents `(rows, cols)` of the ellipse `mahalanobis_sq <= radius_sq`.
    pub fn half_extent(&self, radius_sq: f64) -> [f64; 2] {
        let cov = self.covariance();
        [(radius_sq * cov[0][0]).sqrt(), (radius_sq * cov[1][1]).sqrt()]
    }
}

pub fn covariance(g: &Gaussian2D) -> [[f64; 2]; 2] {
    g.covariance()
}

pub fn mahalanobis_sq(x: [f64; 2], g: &Gaussian2D) -> f64 {
    g.mahalanobis_sq(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub height: usize,
    pub width: usize,
    pub gaussians: Vec<Gaussian2D>,
}

impl GaussianScene {
    pub fn new(height: usize, width: usize, gaussians: Vec<Gaussian2D>) -> Self {
        Self {
            height,
            width,
            gaussians,
        }
    }

    /// Color channel count, taken from the first Gaussian (1 for an empty scene).
    pub fn channels(&self) -> usize {
        self.gaussians.first().map_or(1, |g| g.color.len())
    }

    pub fn n_foreground(&self) -> usize {
        self.gaussians.iter().filter(|g| g.is_foreground()).count()
    }

    /// Gaussian index for each annotation: entry `n - 1` holds the Gaussian
    /// assigned to annotation `n`.
    ///
    /// Fails unless the foreground assignment is a bijection onto `1..=n_annotations`.
    pub fn foreground_index(&self, n_annotations: usize) -> Result<Vec<usize>> {
        let mut slots = vec![None; n_annotations];
        for (m, g) in self.gaussians.iter().enumerate() {
            match (g.role, g.assigned) {
                (Role::Foreground, Some(n)) if (1..=n_annotations).contains(&n) => {
                    if slots[n - 1].replace(m).is_some() {
                        return Err(Error::InvalidInput(format!(
                            "annotation {n} has more than one foreground Gaussian"
                        )));
                    }
                }
                (Role::Foreground, other) => {
                    return Err(Error::InvalidInput(format!(
                        "foreground Gaussian {m} has invalid assignment {other:?} for {n_annotations} annotations"
                    )))
                }
                (Role::Background, _) => {}
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, slot)| {
                slot.ok_or_else(|| Error::InvalidInput(format!("annotation {} has no foreground Gaussian", i + 1)))
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.gaussians.len() * (GEOMETRY_PARAMS + self.channels())
    }

    /// Flatten trainable parameters, Gaussian by Gaussian.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for g in &self.gaussians {
            out.extend_from_slice(&[g.mu[0], g.mu[1], g.log_s[0], g.log_s[1], g.theta, g.alpha]);
            out.extend_from_slice(&g.color);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let stride = GEOMETRY_PARAMS + self.channels();
        assert_eq!(params.len(), self.gaussians.len() * stride);
        for (g, p) in self.gaussians.iter_mut().zip(params.chunks_exact(stride)) {
            g.mu = [p[0], p[1]];
            g.log_s = [p[2], p[3]];
            g.theta = p[4];
            g.alpha = p[5];
            g.color.copy_from_slice(&p[GEOMETRY_PARAMS..]);
        }
    }

    /// `true` for parameters that fitting never changes (foreground means).
    pub fn frozen_mask(&self) -> Vec<bool> {
        let stride = GEOMETRY_PARAMS + self.channels();
        let mut mask = vec![false; self.n_params()];
        for (m, g) in self.gaussians.iter().enumerate() {
            if g.is_foreground() {
                mask[m * stride] = true;
                mask[m * stride + 1] = true;
            }
        }
        mask
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let channels = scene.channels();
        if scene.gaussians.iter().any(|g| g.color.len() != channels) {
            return Err(Error::Parse("inconsistent color channel counts".into()));
        }
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn gauss(s: [f64; 2], theta: f64) -> Gaussian2D {
        Gaussian2D {
            mu: [5.0, 5.0],
            log_s: [s[0].ln(), s[1].ln()],
            theta,
            alpha: 1.0,
            color: vec![1.0],
            role: Role::Background,
            assigned: None,
        }
    }

    fn assert_mat(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) {
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn covariance_examples() {
        assert_mat(gauss([1.0, 1.0], 0.7).covariance(), [[1.0, 0.0], [0.0, 1.0]]);
        assert_mat(gauss([2.0, 1.0], 0.0).covariance(), [[4.0, 0.0], [0.0, 1.0]]);
        assert_mat(gauss([2.0, 1.0], FRAC_PI_2).covariance(), [[1.0, 0.0], [0.0, 4.0]]);
    }

    #[test]
    fn mahalanobis_examples() {
        let g = gauss([1.0, 1.0], 0.3);
        assert_eq!(g.mahalanobis_sq(g.mu), 0.0);
        assert!((g.mahalanobis_sq([8.0, 9.0]) - 25.0).abs() < 1e-12);
        let g = gauss([2.0, 1.0], 0.0);
        assert!((g.mahalanobis_sq([7.0, 5.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn foreground_index_requires_bijection() {
        let mut fg = gauss([1.0, 1.0], 0.0);
        fg.role = Role::Foreground;
        fg.assigned = Some(2);
        let mut fg1 = fg.clone();
        fg1.assigned = Some(1);
        let scene = GaussianScene::new(8, 8, vec![gauss([1.0, 1.0], 0.0), fg.clone(), fg1]);
        assert_eq!(scene.foreground_index(2).unwrap(), vec![2, 1]);
        assert!(scene.foreground_index(3).is_err());
        let dup = GaussianScene::new(8, 8, vec![fg.clone(), fg]);
        assert!(dup.foreground_index(2).is_err());
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let mut fg = gauss([1.3, 0.7], 0.1 + 0.2);
        fg.role = Role::Foreground;
        fg.assigned = Some(1);
        fg.alpha = 1.0 / 3.0;
        fg.mu = [std::f64::consts::E, 1e-300];
        let scene = GaussianScene::new(8, 9, vec![fg, gauss([2.0, 0.5], -PI)]);
        let text = scene.to_json();
        assert!(text.contains("\"role\":\"fg\"") && text.contains("\"assigned\":1"));
        assert_eq!(GaussianScene::from_json(&text).unwrap(), scene);
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            s1 in 0.1f64..10.0, s2 in 0.1f64..10.0, theta in -4.0f64..4.0,
        ) {
            let c = gauss([s1, s2], theta).covariance();
            prop_assert!((c[0][1] - c[1][0]).abs() < 1e-12);
            let trace = c[0][0] + c[1][1];
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            let tol = 1e-9 * (1.0 + trace * trace);
            prop_assert!((trace - (s1 * s1 + s2 * s2)).abs() < tol);
            prop_assert!((det - s1 * s1 * s2 * s2).abs() < tol);
        }

        #[test]
        fn mahalanobis_is_non_negative(
            s1 in 0.1f64..10.0, s2 in 0.1f64..10.0, theta in -4.0f64..4.0,
            dr in -20.0f64..20.0, dc in -20.0f64..20.0,
        ) {
            let g = gauss([s1, s2], theta);
            let d = g.mahalanobis_sq([g.mu[0] + dr, g.mu[1] + dc]);
            prop_assert!(d >= 0.0);
            if dr != 0.0 || dc != 0.0 {
                prop_assert!(d > 0.0);
            }
        }
    }
}
