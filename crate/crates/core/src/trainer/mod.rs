//! Desk-scale training: synthetic annotated scenes, a small density
//! regressor, and training/evaluation under the different losses.

mod manifest;
mod model;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{pixel_center, AnnotationSet, DensityMap, Image};
use crate::kernel::TransportKernel;
use crate::losses::make_pseudo_gt;

pub use manifest::{load_dataset, Manifest, ManifestEntry};
pub use model::{ToyRegressor, HIDDEN, N_PARAMS};
pub use train::{train, write_run_csv, LossKind, TrainConfig, TrainRecord, TrainRun, CSV_HEADER};

/// Parameters of a synthetic blob scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of blob counts.
    pub blob_count_range: (usize, usize),
    /// Half-open range of blob radii in pixels.
    pub blob_radius_range: (f64, f64),
    /// Standard deviation of the per-pixel noise.
    pub noise_level: f64,
    /// Minimum distance (pixels) from blob centers to the image border.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            blob_count_range: (1, 8),
            blob_radius_range: (1.5, 3.0),
            noise_level: 0.05,
            margin: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig("scene dimensions must be ≥ 16".into()));
        }
        if self.blob_count_range.0 > self.blob_count_range.1 {
            return Err(Error::InvalidConfig("blob count range is empty".into()));
        }
        let (lo, hi) = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig("blob radius range is empty".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidConfig("noise level must be ≥ 0".into()));
        }
        if !(self.margin >= 0.0 && 2.0 * self.margin < self.height.min(self.width) as f64) {
            return Err(Error::InvalidConfig("margin leaves no room for blobs".into()));
        }
        Ok(())
    }
}

/// Textured noisy background plus radial blobs; annotations at blob centers.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, AnnotationSet)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // low-frequency texture: a few random plane waves per channel
    let waves: Vec<[f64; 4]> = (0..3 * 3)
        .map(|_| {
            [
                rng.random_range(0.02..0.06),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(0.15..0.35),
        rng.random_range(0.15..0.35),
        rng.random_range(0.15..0.35),
    ];
    let mut values = vec![0.0; h * w * 3];
    for i in 0..h * w {
        let [y, x] = pixel_center(i / w, i % w);
        for k in 0..3 {
            let mut v = base[k];
            for [amp, fy, fx, phase] in &waves[k * 3..k * 3 + 3] {
                v += amp * (fy * y + fx * x + phase).sin();
            }
            values[i * 3 + k] = v;
        }
    }

    let count = rng.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = if spec.blob_radius_range.0 < spec.blob_radius_range.1 {
            rng.random_range(spec.blob_radius_range.0..spec.blob_radius_range.1)
        } else {
            spec.blob_radius_range.0
        };
        let margin = spec.margin;
        let center = [
            rng.random_range(margin..h as f64 - margin),
            rng.random_range(margin..w as f64 - margin),
        ];
        let color: [f64; 3] = [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
        ];
        let inv = 0.5 / (radius * radius);
        for i in 0..h * w {
            let [y, x] = pixel_center(i / w, i % w);
            let d2 = (y - center[0]).powi(2) + (x - center[1]).powi(2);
            if d2 > 16.0 * radius * radius {
                continue;
            }
            let weight = (-d2 * inv).exp();
            for k in 0..3 {
                let v = &mut values[i * 3 + k];
                *v = *v * (1.0 - weight) + color[k] * weight;
            }
        }
        points.push(center);
    }

    if spec.noise_level > 0.0 {
        for v in &mut values {
            // sum of uniforms: cheap, bounded, roughly Gaussian
            let u: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 0.866;
            *v += spec.noise_level * u;
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((Image::new(h, w, 3, values)?, AnnotationSet::new(points, h, w)?))
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub annotations: AnnotationSet,
    pub kernel: Option<TransportKernel>,
}

impl Sample {
    pub fn new(image: Image, annotations: AnnotationSet) -> Self {
        Self {
            image,
            annotations,
            kernel: None,
        }
    }

    pub fn with_kernel(mut self, kernel: TransportKernel) -> Self {
        self.kernel = Some(kernel);
        self
    }
}

/// Anything that maps a sample to a density map.
pub trait DensityModel {
    fn predict(&self, sample: &Sample) -> Result<DensityMap>;
}

impl DensityModel for ToyRegressor {
    fn predict(&self, sample: &Sample) -> Result<DensityMap> {
        self.forward(&sample.image)
    }
}

/// Reference model that returns the pseudo ground truth of the true annotations.
#[derive(Debug, Clone, Copy)]
pub struct PseudoGtOracle {
    pub sigma: f64,
}

impl DensityModel for PseudoGtOracle {
    fn predict(&self, sample: &Sample) -> Result<DensityMap> {
        make_pseudo_gt(
            &sample.annotations,
            self.sigma,
            sample.image.height(),
            sample.image.width(),
        )
    }
}

/// Predicted count: total density mass.
pub fn count(d: &DensityMap) -> f64 {
    d.total()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

/// Mean absolute and root-mean-square count error.
pub fn evaluate(model: &dyn DensityModel, data: &[Sample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for sample in data {
        let err = count(&model.predict(sample)?) - sample.annotations.len() as f64;
        abs += err.abs();
        sq += err * err;
    }
    let n = data.len() as f64;
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}
