use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{total_loss_and_grad, RenderMode};
use super::{Gaussian2D, GaussianScene, Role};
use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::imagedata::{AnnotationSet, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Maximum aspect ratio tolerated by the shape loss.
    pub delta: f64,
    /// Shape-loss weight.
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Background Gaussian count; `None` means `max(64, N)`.
    pub n_background: Option<usize>,
    /// Initial scale (pixels) of every Gaussian.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            learning_rate: 0.01,
            delta: 1.5,
            beta: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_background: None,
            init_scale: 4.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(self.delta >= 1.0) {
            return Err(Error::InvalidConfig("delta must be ≥ 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("beta must be ≥ 0".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::InvalidConfig("init scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn background_count(&self, n_annotations: usize) -> usize {
        self.n_background.unwrap_or(64.max(n_annotations))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitRecord {
    pub iteration: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub shape: f64,
}

/// Foreground Gaussians (one per annotation, in annotation order) followed by
/// randomly placed background Gaussians.
pub fn initial_scene(image: &Image, ann: &AnnotationSet, cfg: &FitConfig) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (image.height(), image.width());
    let mut gaussians = Vec::with_capacity(ann.len() + cfg.background_count(ann.len()));
    for (i, &point) in ann.points().iter().enumerate() {
        gaussians.push(Gaussian2D {
            role: Role::Foreground,
            assigned: Some(i + 1),
            ..Gaussian2D::isotropic(point, cfg.init_scale, 0.5, image.sample_at(point).to_vec())
        });
    }
    for _ in 0..cfg.background_count(ann.len()) {
        let mu = [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)];
        gaussians.push(Gaussian2D::isotropic(
            mu,
            cfg.init_scale,
            0.5,
            image.sample_at(mu).to_vec(),
        ));
    }
    GaussianScene::new(h, w, gaussians)
}

pub fn fit(image: &Image, ann: &AnnotationSet, cfg: &FitConfig) -> Result<GaussianScene> {
    fit_with_history(image, ann, cfg).map(|(scene, _)| scene)
}

/// Fit and return the loss before every step plus the loss of the final scene.
pub fn fit_with_history(
    image: &Image,
    ann: &AnnotationSet,
    cfg: &FitConfig,
) -> Result<(GaussianScene, Vec<FitRecord>)> {
    if (ann.height(), ann.width()) != (image.height(), image.width()) {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            format!("annotations for {}x{}", ann.height(), ann.width()),
        ));
    }
    fit_from(initial_scene(image, ann, cfg), image, cfg)
}

/// Run `cfg.iterations` Adam steps starting from `scene`.
pub fn fit_from(mut scene: GaussianScene, image: &Image, cfg: &FitConfig) -> Result<(GaussianScene, Vec<FitRecord>)> {
    cfg.validate()?;
    let mut params = scene.params();
    let frozen = scene.frozen_mask();
    let mut adam = Adam::new(params.len(), cfg.adam());
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for iteration in 0..=cfg.iterations {
        let out = total_loss_and_grad(&scene, image, cfg.beta, cfg.delta, RenderMode::Truncated)?;
        history.push(FitRecord {
            iteration,
            loss: out.loss,
            reconstruction: out.reconstruction,
            shape: out.shape,
        });
        if iteration == cfg.iterations {
            break;
        }
        adam.step(&mut params, &out.grad, Some(&frozen));
        scene.set_params(&params);
    }
    Ok((scene, history))
}

#[cfg(test)]
mod tests {
    use super::super::render::render;
    use super::*;

    fn blob_image(h: usize, w: usize, centers: &[[f64; 2]], radius: f64) -> Image {
        let mut values = vec![0.1; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                for &[cr, cc] in centers {
                    let d2 = (r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2);
                    let v = (-0.5 * d2 / (radius * radius)).exp();
                    for k in 0..3 {
                        values[(r * w + c) * 3 + k] += v * [0.8, 0.5, 0.2][k];
                    }
                }
            }
        }
        Image::new(h, w, 3, values).unwrap()
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = FitConfig {
            delta: 0.9,
            ..Default::default()
        };
        assert_eq!(
            cfg.validate().unwrap_err().to_string(),
            "invalid config: delta must be ≥ 1"
        );
        assert!(FitConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FitConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fixed_point_stays_put() {
        let img = blob_image(16, 16, &[[8.5, 8.5]], 2.0);
        let ann = AnnotationSet::new(vec![[8.5, 8.5]], 16, 16).unwrap();
        let cfg = FitConfig {
            iterations: 5,
            n_background: Some(3),
            ..Default::default()
        };
        let scene0 = initial_scene(&img, &ann, &cfg);
        let target = render(&scene0);
        let (scene, history) = fit_from(scene0.clone(), &target, &cfg).unwrap();
        assert_eq!(history.first().unwrap().loss, 0.0);
        assert_eq!(history.last().unwrap().loss, 0.0);
        assert_eq!(scene, scene0);
    }

    #[test]
    fn background_only_when_no_annotations() {
        let img = blob_image(16, 16, &[], 2.0);
        let ann = AnnotationSet::empty(16, 16);
        let cfg = FitConfig {
            iterations: 3,
            ..Default::default()
        };
        let scene = fit(&img, &ann, &cfg).unwrap();
        assert_eq!(scene.gaussians.len(), 64);
        assert_eq!(scene.n_foreground(), 0);
    }

    #[test]
    fn anchors_are_exact_and_runs_deterministic() {
        let centers = [[5.25, 6.5], [10.5, 11.75]];
        let img = blob_image(16, 16, &centers, 1.5);
        let ann = AnnotationSet::new(centers.to_vec(), 16, 16).unwrap();
        let cfg = FitConfig {
            iterations: 40,
            n_background: Some(8),
            seed: 4,
            ..Default::default()
        };
        let a = fit(&img, &ann, &cfg).unwrap();
        let b = fit(&img, &ann, &cfg).unwrap();
        assert_eq!(a, b);
        let index = a.foreground_index(2).unwrap();
        for (n, &m) in index.iter().enumerate() {
            assert_eq!(a.gaussians[m].mu, centers[n]);
        }
    }
}
