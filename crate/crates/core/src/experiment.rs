//! Desk-scale experiments and oracle suites shared by the CLI and the
//! acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{AnnotationSet, AnnotationTarget, DensityMap};
use crate::kernel::{
    build_dense_kernel, build_heuristic_kernel, build_kernel, consistent_marginals, foreground_is_interior,
    verify_marginals, CorrespondenceParams,
};
use crate::losses::{
    check_pushforward_equivalence, cost_matrix, dmcount_loss_with_cost, gst_loss, nw_corner_plan, ot_1d_cost, sinkhorn,
    CostMatrix, DmCountConfig, Metric, SinkhornConfig,
};
use crate::splat2d::{fit, FitConfig, Gaussian2D, GaussianScene, Role};
use crate::trainer::{evaluate, generate_scene, train, LossKind, Sample, SceneSpec, TrainConfig};

/// Fit settings used for desk-scale corpora: shorter and more aggressive
/// than the full schedule, which is tuned for large images.
pub fn quick_fit_config() -> FitConfig {
    FitConfig {
        iterations: 300,
        learning_rate: 0.05,
        n_background: Some(32),
        init_scale: 2.0,
        ..FitConfig::default()
    }
}

/// `count` scenes with consecutive seeds starting at `first_seed`.
pub fn synthetic_corpus(spec: &SceneSpec, count: usize, first_seed: u64) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| {
            let (image, ann) = generate_scene(&SceneSpec {
                seed: first_seed + i,
                ..spec.clone()
            })?;
            Ok(Sample::new(image, ann))
        })
        .collect()
}

/// Fit every sample and attach the resulting kernel. Fit seeds are offset by
/// the sample index so background placement differs between images.
pub fn with_fitted_kernels(
    samples: &[Sample],
    fit_cfg: &FitConfig,
    params: &CorrespondenceParams,
) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = FitConfig {
                seed: fit_cfg.seed.wrapping_add(i as u64),
                ..fit_cfg.clone()
            };
            let scene = fit(&s.image, &s.annotations, &cfg)?;
            Ok(s.clone().with_kernel(build_kernel(&scene, &s.annotations, params)?))
        })
        .collect()
}

pub fn with_heuristic_kernels(samples: &[Sample], sigma: f64, params: &CorrespondenceParams) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(s.clone()
                .with_kernel(build_heuristic_kernel(&s.annotations, sigma, params)?))
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderingConfig {
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub params: CorrespondenceParams,
    pub heuristic_sigma: f64,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_train: 50,
            n_test: 20,
            train_seed: 1000,
            test_seed: 5000,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                steps: 1000,
                record_timing: false,
                ..TrainConfig::default()
            },
            fit: quick_fit_config(),
            params: CorrespondenceParams::default(),
            heuristic_sigma: 8.0,
        }
    }
}

/// Test MAE of one training seed under each loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderingRun {
    pub seed: u64,
    pub gst: f64,
    pub heuristic: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderingReport {
    pub runs: Vec<OrderingRun>,
    pub median_gst: f64,
    pub median_heuristic: f64,
    pub median_l2: f64,
}

impl OrderingReport {
    pub fn gst_beats_l2(&self) -> bool {
        self.median_gst < self.median_l2
    }

    pub fn gst_not_worse_than_heuristic(&self) -> bool {
        self.median_gst <= self.median_heuristic
    }
}

/// Train the regressor with fitted-splat GST, heuristic-kernel GST and L2
/// pseudo ground truth on the same corpus and compare held-out MAE.
pub fn ordering_experiment(cfg: &OrderingConfig) -> Result<OrderingReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let train_set = synthetic_corpus(&cfg.scene, cfg.n_train, cfg.train_seed)?;
    let test_set = synthetic_corpus(&cfg.scene, cfg.n_test, cfg.test_seed)?;
    let fitted = with_fitted_kernels(&train_set, &cfg.fit, &cfg.params)?;
    let heuristic = with_heuristic_kernels(&train_set, cfg.heuristic_sigma, &cfg.params)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mae =
            |data: &[Sample], kind| -> Result<f64> { Ok(evaluate(&train(data, kind, &tc)?.model, &test_set)?.mae) };
        runs.push(OrderingRun {
            seed,
            gst: mae(&fitted, LossKind::Gst)?,
            heuristic: mae(&heuristic, LossKind::Heuristic)?,
            l2: mae(&train_set, LossKind::L2)?,
        });
    }
    let col = |f: fn(&OrderingRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(OrderingReport {
        median_gst: col(|r| r.gst),
        median_heuristic: col(|r| r.heuristic),
        median_l2: col(|r| r.l2),
        runs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformityConfig {
    pub scene: SceneSpec,
    pub n_images: usize,
    pub first_seed: u64,
    pub fit: FitConfig,
    /// Shape-loss weight of the constrained run; the other run uses 0.
    pub beta: f64,
}

impl Default for DeformityConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_images: 8,
            first_seed: 7000,
            fit: quick_fit_config(),
            beta: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeformityReport {
    pub n_gaussians: usize,
    pub mean_aspect_constrained: f64,
    pub mean_aspect_free: f64,
    pub max_aspect_constrained: f64,
    pub max_aspect_free: f64,
}

/// Fit the same corpus with and without the shape loss and compare the
/// foreground aspect ratios.
pub fn deformity_experiment(cfg: &DeformityConfig) -> Result<DeformityReport> {
    let corpus = synthetic_corpus(&cfg.scene, cfg.n_images, cfg.first_seed)?;
    let aspects = |beta: f64| -> Result<Vec<f64>> {
        let per_image: Vec<Vec<f64>> = corpus
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let fc = FitConfig {
                    beta,
                    seed: cfg.fit.seed.wrapping_add(i as u64),
                    ..cfg.fit.clone()
                };
                let scene = fit(&s.image, &s.annotations, &fc)?;
                Ok(scene
                    .gaussians
                    .iter()
                    .filter(|g| g.is_foreground())
                    .map(Gaussian2D::aspect_ratio)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per_image.concat())
    };
    let constrained = aspects(cfg.beta)?;
    let free = aspects(0.0)?;
    if constrained.is_empty() {
        return Err(Error::InvalidInput("corpus has no annotations".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DeformityReport {
        n_gaussians: constrained.len(),
        mean_aspect_constrained: mean(&constrained),
        mean_aspect_free: mean(&free),
        max_aspect_constrained: max(&constrained),
        max_aspect_free: max(&free),
    })
}

/// Outcome of a randomized oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.max_residual < self.tolerance
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Push-forward identity: with an exact plan between `P_X` and `P_Y` and
/// `zeta_g = ||zeta_g|| P_Y`, the pushed-forward L1 discrepancy equals the
/// mass difference.
pub fn pushforward_identity_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (i, n) = (rng.random_range(1..=200), rng.random_range(1..=30));
        let p_x = random_simplex(&mut rng, i);
        let p_y = random_simplex(&mut rng, n);
        let target_mass = rng.random_range(0.0..100.0);
        let d_mass = rng.random_range(0.0..100.0);
        let target = AnnotationTarget::from_values(p_y.iter().map(|p| p * target_mass).collect())?;
        let plan = nw_corner_plan(&p_x, &p_y);
        let (lhs, rhs) = check_pushforward_equivalence(&plan, d_mass, &target)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(OracleReport {
        name: "appendix-a".into(),
        trials,
        max_residual: worst,
        tolerance: 1e-12,
    })
}

/// Entropic Sinkhorn cost against the exact sorted-matching cost in 1D.
pub fn sinkhorn_1d_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SinkhornConfig {
        epsilon: 1e-3,
        max_iters: 5000,
        tol: 1e-9,
        epsilon_scaling: true,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (i, n) = (rng.random_range(1..=30), rng.random_range(1..=10));
        let xs: Vec<f64> = (0..i).map(|_| rng.random()).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let p_x = random_simplex(&mut rng, i);
        let p_y = random_simplex(&mut rng, n);
        let line = |v: &[f64]| v.iter().map(|&x| [0.0, x]).collect::<Vec<_>>();
        let c = CostMatrix::from_points(&line(&xs), &line(&ys), Metric::Euclidean, 1.0);
        let out = sinkhorn(&p_x, &p_y, &c, &cfg)?;
        let pair = |pos: &[f64], mass: &[f64]| pos.iter().copied().zip(mass.iter().copied()).collect::<Vec<_>>();
        let exact = ot_1d_cost(&pair(&xs, &p_x), &pair(&ys, &p_y))?;
        worst = worst.max((out.cost - exact).abs());
    }
    Ok(OracleReport {
        name: "ot-1d".into(),
        trials,
        max_residual: worst,
        tolerance: 1e-3,
    })
}

/// Random scene with anisotropic foreground Gaussians at the annotations
/// plus a few background Gaussians.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    max_points: usize,
) -> (GaussianScene, AnnotationSet) {
    let n = rng.random_range(0..=max_points);
    let points: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
            ]
        })
        .collect();
    let mut gaussians = Vec::new();
    for (k, &p) in points.iter().enumerate() {
        gaussians.push(Gaussian2D {
            log_s: [rng.random_range(-0.5f64..1.5), rng.random_range(-0.5f64..1.5)],
            theta: rng.random_range(-3.0..3.0),
            role: Role::Foreground,
            assigned: Some(k + 1),
            ..Gaussian2D::isotropic(p, 1.0, 1.0, vec![1.0])
        });
    }
    for _ in 0..rng.random_range(0..4) {
        let mu = [
            rng.random_range(0.0..height as f64),
            rng.random_range(0.0..width as f64),
        ];
        gaussians.push(Gaussian2D::isotropic(mu, rng.random_range(1.0..4.0), 0.5, vec![0.5]));
    }
    // interleave roles so foreground lookup cannot rely on position
    let len = gaussians.len();
    for i in (1..len).rev() {
        gaussians.swap(i, rng.random_range(0..=i));
    }
    let ann = AnnotationSet::new(points, height, width).expect("points drawn inside the image");
    (GaussianScene::new(height, width, gaussians), ann)
}

/// Sparse builder with truncation disabled against the dense brute force,
/// with and without the background target.
pub fn dense_kernel_oracle(scenes: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for s in 0..scenes {
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let (scene, ann) = random_scene(&mut rng, h, w, 8);
        let params = CorrespondenceParams {
            cutoff_d: rng.random_range(1.0..5.0),
            background: s % 2 == 0 || ann.is_empty(),
            ..CorrespondenceParams::default()
        }
        .untruncated();
        let sparse = build_kernel(&scene, &ann, &params)?;
        let dense = build_dense_kernel(&scene, &ann, &params)?;
        let cols = ann.n_targets();
        for (i, row) in dense.chunks(cols).enumerate() {
            for (n, v) in row.iter().enumerate() {
                worst = worst.max((sparse.get(i, n) - v).abs());
            }
        }
    }
    Ok(OracleReport {
        name: "dense-kernel".into(),
        trials: scenes,
        max_residual: worst,
        tolerance: 1e-12,
    })
}

/// Annotations recovered from a fitted scene: the pinned foreground means in
/// annotation order.
pub fn scene_annotations(scene: &GaussianScene) -> Result<AnnotationSet> {
    let fg = scene.foreground_index(scene.n_foreground())?;
    AnnotationSet::new(
        fg.iter().map(|&m| scene.gaussians[m].mu).collect(),
        scene.height,
        scene.width,
    )
}

/// Row and column marginal residuals of one scene. Rows are checked on the
/// full kernel and on the annotation-only kernel; columns on the latter
/// with the consistent pixel marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalAudit {
    pub row_residual: f64,
    pub col_residual: f64,
}

pub fn audit_scene(scene: &GaussianScene, ann: &AnnotationSet, params: &CorrespondenceParams) -> Result<MarginalAudit> {
    let full = build_kernel(
        scene,
        ann,
        &CorrespondenceParams {
            background: true,
            ..*params
        },
    )?;
    let no_bg = build_kernel(
        scene,
        ann,
        &CorrespondenceParams {
            background: false,
            ..*params
        },
    )?;
    let (p_x, p_y) = consistent_marginals(scene, ann)?;
    let (row, col) = verify_marginals(&no_bg, &p_x, &p_y)?;
    Ok(MarginalAudit {
        row_residual: row.max(full.max_row_deviation()),
        col_residual: col,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FittedAuditReport {
    pub scenes: usize,
    /// Fitted scenes discarded because a foreground Gaussian reached the border.
    pub rejected: usize,
    pub max_row_residual: f64,
    pub max_col_residual: f64,
}

impl FittedAuditReport {
    pub fn passed(&self) -> bool {
        self.scenes > 0 && self.max_row_residual <= 1e-12 && self.max_col_residual < 1e-6
    }
}

/// Fit random interior scenes until `scenes` of them keep every foreground
/// Gaussian 6 sigma inside the image, and audit each one.
pub fn fitted_marginal_audit(scenes: usize, seed: u64) -> Result<FittedAuditReport> {
    let spec = SceneSpec {
        height: 64,
        width: 64,
        margin: 24.0,
        blob_count_range: (1, 8),
        blob_radius_range: (1.0, 2.0),
        ..SceneSpec::default()
    };
    let fit_cfg = FitConfig {
        iterations: 60,
        ..quick_fit_config()
    };
    let params = CorrespondenceParams::default();
    let mut report = FittedAuditReport {
        scenes: 0,
        rejected: 0,
        max_row_residual: 0.0,
        max_col_residual: 0.0,
    };
    let mut next = seed;
    while report.scenes < scenes {
        if report.rejected > 10 * scenes.max(1) {
            return Err(Error::Numerical("fitted scenes keep leaving the interior".into()));
        }
        let (image, ann) = generate_scene(&SceneSpec {
            seed: next,
            ..spec.clone()
        })?;
        let scene = fit(
            &image,
            &ann,
            &FitConfig {
                seed: next,
                ..fit_cfg.clone()
            },
        )?;
        next += 1;
        if !foreground_is_interior(&scene, 6.0) {
            report.rejected += 1;
            continue;
        }
        let audit = audit_scene(&scene, &ann, &params)?;
        report.scenes += 1;
        report.max_row_residual = report.max_row_residual.max(audit.row_residual);
        report.max_col_residual = report.max_col_residual.max(audit.col_residual);
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize)>,
    pub point_counts: Vec<usize>,
    /// Sinkhorn iterations per DMCount call (run to completion).
    pub k: usize,
    pub epsilon: f64,
    pub repeats: usize,
    pub seed: u64,
    /// Fit used for the GST kernel pre-computation.
    pub fit: FitConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(64, 64), (128, 128)],
            point_counts: vec![10, 50],
            k: 100,
            epsilon: 0.01,
            repeats: 10,
            seed: 0,
            fit: FitConfig {
                iterations: 100,
                ..quick_fit_config()
            },
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 1 {
            return Err(Error::InvalidConfig("repeats must be ≥ 1".into()));
        }
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be ≥ 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        self.fit.validate()
    }
}

/// Per-call loss timings on one synthetic instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportTiming {
    pub height: usize,
    pub width: usize,
    pub n_points: usize,
    pub gst_mean_ms: f64,
    pub gst_std_ms: f64,
    pub sinkhorn_mean_ms: f64,
    pub sinkhorn_std_ms: f64,
    /// Splat fit plus kernel construction, done once per image.
    pub kernel_build_ms: f64,
}

impl TransportTiming {
    pub fn speedup(&self) -> f64 {
        self.sinkhorn_mean_ms / self.gst_mean_ms
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Time the GST loss and the DMCount loss (exactly `k` Sinkhorn iterations)
/// on the same random density for a scene with `n_points` annotations.
/// Cost matrix and kernel are built outside the timed region.
pub fn time_transport(height: usize, width: usize, n_points: usize, cfg: &BenchConfig) -> Result<TransportTiming> {
    cfg.validate()?;
    let spec = SceneSpec {
        height,
        width,
        blob_count_range: (n_points, n_points),
        seed: cfg.seed,
        ..SceneSpec::default()
    };
    let (image, ann) = generate_scene(&spec)?;
    let started = Instant::now();
    let scene = fit(&image, &ann, &cfg.fit)?;
    let kernel = build_kernel(&scene, &ann, &CorrespondenceParams::default())?;
    let kernel_build_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = DensityMap::new(
        height,
        width,
        (0..height * width)
            .map(|_| rng.random_range(0.0..2.0 * n_points.max(1) as f64 / (height * width) as f64))
            .collect(),
    )?;
    let target = AnnotationTarget::from_annotations(&ann);
    let dm_cfg = DmCountConfig {
        sinkhorn: SinkhornConfig {
            epsilon: cfg.epsilon,
            max_iters: cfg.k,
            tol: 0.0,
            epsilon_scaling: false,
        },
        ..DmCountConfig::default()
    };
    let cost = if ann.is_empty() {
        None
    } else {
        Some(cost_matrix(height, width, &ann, dm_cfg.metric)?)
    };

    let mut gst_ms = Vec::with_capacity(cfg.repeats);
    let mut sk_ms = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        std::hint::black_box(gst_loss(&kernel, &d, &target)?);
        gst_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if let Some(cost) = &cost {
            let t = Instant::now();
            std::hint::black_box(dmcount_loss_with_cost(&d, cost, &dm_cfg)?);
            sk_ms.push(t.elapsed().as_secs_f64() * 1e3);
        } else {
            sk_ms.push(0.0);
        }
    }
    let (gst_mean_ms, gst_std_ms) = mean_std(&gst_ms);
    let (sinkhorn_mean_ms, sinkhorn_std_ms) = mean_std(&sk_ms);
    Ok(TransportTiming {
        height,
        width,
        n_points,
        gst_mean_ms,
        gst_std_ms,
        sinkhorn_mean_ms,
        sinkhorn_std_ms,
        kernel_build_ms,
    })
}
