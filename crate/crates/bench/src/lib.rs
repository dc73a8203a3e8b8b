//! Shared fixtures for the criterion benches.

use gst_core::experiment::quick_fit_config;
use gst_core::kernel::{build_kernel, CorrespondenceParams};
use gst_core::splat2d::fit;
use gst_core::trainer::{generate_scene, SceneSpec};
use gst_core::{AnnotationSet, AnnotationTarget, DensityMap, FitConfig, GaussianScene, Image, TransportKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub image: Image,
    pub annotations: AnnotationSet,
    pub scene: GaussianScene,
    pub kernel: TransportKernel,
    pub target: AnnotationTarget,
    pub density: DensityMap,
}

/// Synthetic image with `n` blobs, a short splat fit and its kernel, plus a
/// random density with total mass near `n`.
pub fn instance(height: usize, width: usize, n: usize) -> Instance {
    let spec = SceneSpec {
        height,
        width,
        blob_count_range: (n, n),
        seed: 0,
        ..SceneSpec::default()
    };
    let (image, annotations) = generate_scene(&spec).expect("valid scene spec");
    let cfg = FitConfig {
        iterations: 50,
        ..quick_fit_config()
    };
    let scene = fit(&image, &annotations, &cfg).expect("fit");
    let kernel = build_kernel(&scene, &annotations, &CorrespondenceParams::default()).expect("kernel");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hi = 2.0 * n.max(1) as f64 / (height * width) as f64;
    let density = DensityMap::new(
        height,
        width,
        (0..height * width).map(|_| rng.random_range(0.0..hi)).collect(),
    )
    .expect("density shape");
    let target = AnnotationTarget::from_annotations(&annotations);
    Instance {
        image,
        annotations,
        scene,
        kernel,
        target,
        density,
    }
}
