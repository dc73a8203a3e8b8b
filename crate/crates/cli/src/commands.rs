use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gst_core::experiment::{
    audit_scene, dense_kernel_oracle, fitted_marginal_audit, pushforward_identity_oracle, quick_fit_config,
    scene_annotations, sinkhorn_1d_oracle, time_transport, OracleReport,
};
use gst_core::imagedata::{load_annotations, load_image, save_annotations, save_image};
use gst_core::kernel::{build_heuristic_kernel, build_kernel, save_kernel, CorrespondenceParams};
use gst_core::splat2d::{fit_with_history, render, FitConfig, GaussianScene};
use gst_core::trainer::{
    evaluate, generate_scene, load_dataset, train as train_model, write_run_csv, DensityModel, LossKind, Manifest,
    ManifestEntry, PseudoGtOracle, Sample, SceneSpec, ToyRegressor,
};
use serde::Serialize;

use crate::config::CliError;
use crate::viz::{correspondence_image, density_heatmap};
use crate::Global;

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_file(path, text + "\n")
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Receives scene.json, reconstruction.png and fit_loss.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_background: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn override_fit(mut cfg: FitConfig, args: &FitArgs) -> FitConfig {
    cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.delta = args.delta.unwrap_or(cfg.delta);
    cfg.beta = args.beta.unwrap_or(cfg.beta);
    cfg.n_background = args.n_background.or(cfg.n_background);
    cfg.init_scale = args.init_scale.unwrap_or(cfg.init_scale);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg
}

pub fn fit(global: &Global, args: FitArgs) -> Result<()> {
    let cfg = override_fit(global.config.fit.clone().unwrap_or_default(), &args);
    cfg.validate()?;
    let image = load_image(&args.image)?;
    let ann = load_annotations(&args.annotations, image.height(), image.width())?;
    create_dir(&args.out_dir)?;
    let (scene, history) = fit_with_history(&image, &ann, &cfg)?;
    scene.save(args.out_dir.join("scene.json"))?;
    save_image(&render(&scene), args.out_dir.join("reconstruction.png"))?;
    let mut csv = String::from("iteration,loss,reconstruction,shape\n");
    for r in &history {
        let _ = writeln!(csv, "{},{},{},{}", r.iteration, r.loss, r.reconstruction, r.shape);
    }
    write_file(&args.out_dir.join("fit_loss.csv"), csv)?;
    let (first, last) = (history[0].loss, history[history.len() - 1].loss);
    println!(
        "fitted {} foreground and {} background Gaussians; loss {first:e} -> {last:e}",
        scene.n_foreground(),
        scene.gaussians.len() - scene.n_foreground()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildKernelArgs {
    /// Fitted scene JSON.
    #[arg(long, required_unless_present = "sigma")]
    scene: Option<PathBuf>,
    #[arg(long)]
    annotations: PathBuf,
    /// Output GSTK file.
    #[arg(long)]
    out: PathBuf,
    /// Correspondence picture (default: the output path with a .png extension).
    #[arg(long)]
    viz: Option<PathBuf>,
    /// Fixed isotropic width instead of a fitted scene.
    #[arg(long, conflicts_with = "scene", requires = "image")]
    sigma: Option<f64>,
    /// Image whose dimensions the heuristic kernel uses.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    cutoff_d: Option<f64>,
    #[arg(long)]
    truncation_radius: Option<f64>,
    /// Leave out the background target.
    #[arg(long)]
    no_background: bool,
}

pub fn build_kernel_cmd(global: &Global, args: BuildKernelArgs) -> Result<()> {
    let mut params: CorrespondenceParams = global.config.correspondence;
    params.cutoff_d = args.cutoff_d.unwrap_or(params.cutoff_d);
    params.truncation_radius = args.truncation_radius.or(params.truncation_radius);
    params.background &= !args.no_background;
    params.validate()?;
    let (kernel, h, w) = match (&args.scene, args.sigma) {
        (Some(scene_path), _) => {
            let scene = GaussianScene::load(scene_path)?;
            let ann = load_annotations(&args.annotations, scene.height, scene.width)?;
            if scene.n_foreground() != ann.len() {
                return Err(CliError::Data(format!(
                    "scene has {} foreground Gaussians but {} has {} annotations",
                    scene.n_foreground(),
                    args.annotations.display(),
                    ann.len()
                )));
            }
            (build_kernel(&scene, &ann, &params)?, scene.height, scene.width)
        }
        (None, Some(sigma)) => {
            let image_path = args.image.as_ref().expect("clap enforces --image");
            let image = load_image(image_path)?;
            let ann = load_annotations(&args.annotations, image.height(), image.width())?;
            (
                build_heuristic_kernel(&ann, sigma, &params)?,
                image.height(),
                image.width(),
            )
        }
        (None, None) => unreachable!("clap requires --scene or --sigma"),
    };
    save_kernel(&kernel, &args.out)?;
    let viz = args.viz.unwrap_or_else(|| args.out.with_extension("png"));
    save_image(&correspondence_image(&kernel, h, w), &viz)?;
    println!(
        "kernel {} pixels x {} targets, {} nonzeros",
        kernel.n_pixels(),
        kernel.n_targets(),
        kernel.nnz()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelSource {
    None,
    Fitted,
    Heuristic,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Receives images/, annotations/, kernels/ and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Seed of the first scene; later scenes use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    min_blobs: Option<usize>,
    #[arg(long)]
    max_blobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = KernelSource::None)]
    kernels: KernelSource,
    /// Width of heuristic kernels.
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    #[arg(long)]
    fit_iterations: Option<usize>,
}

pub fn synth(global: &Global, args: SynthArgs) -> Result<()> {
    let mut spec: SceneSpec = global.config.scene.clone();
    spec.height = args.height.unwrap_or(spec.height);
    spec.width = args.width.unwrap_or(spec.width);
    spec.blob_count_range.0 = args.min_blobs.unwrap_or(spec.blob_count_range.0);
    spec.blob_count_range.1 = args.max_blobs.unwrap_or(spec.blob_count_range.1);
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.validate()?;
    let mut fit_cfg = global.config.fit.clone().unwrap_or_else(quick_fit_config);
    fit_cfg.iterations = args.fit_iterations.unwrap_or(fit_cfg.iterations);
    fit_cfg.validate()?;
    if args.sigma.is_nan() || args.sigma <= 0.0 {
        return Err(CliError::Config("sigma must be > 0".into()));
    }
    let params = global.config.correspondence;
    params.validate()?;

    for sub in ["images", "annotations", "kernels"] {
        create_dir(&args.out_dir.join(sub))?;
    }
    let mut manifest = Manifest::default();
    for i in 0..args.count {
        let (image, ann) = generate_scene(&SceneSpec {
            seed: spec.seed + i as u64,
            ..spec.clone()
        })?;
        let image_rel = PathBuf::from(format!("images/{i:04}.png"));
        let ann_rel = PathBuf::from(format!("annotations/{i:04}.json"));
        let image_path = args.out_dir.join(&image_rel);
        save_image(&image, &image_path)?;
        save_annotations(&ann, args.out_dir.join(&ann_rel))?;
        // fit what a later reader sees: the quantized file, not the float image
        let stored = load_image(&image_path)?;
        let kernel = match args.kernels {
            KernelSource::None => None,
            KernelSource::Fitted => {
                let cfg = FitConfig {
                    seed: fit_cfg.seed.wrapping_add(i as u64),
                    ..fit_cfg.clone()
                };
                let (scene, _) = fit_with_history(&stored, &ann, &cfg)?;
                Some(build_kernel(&scene, &ann, &params)?)
            }
            KernelSource::Heuristic => Some(build_heuristic_kernel(&ann, args.sigma, &params)?),
        };
        let kernel_rel = match kernel {
            Some(k) => {
                let rel = PathBuf::from(format!("kernels/{i:04}.gstk"));
                save_kernel(&k, args.out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        manifest.samples.push(ManifestEntry {
            image: image_rel,
            annotations: ann_rel,
            kernel: kernel_rel,
        });
    }
    manifest.save(args.out_dir.join("manifest.json"))?;
    println!("wrote {} samples to {}", args.count, args.out_dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    mae: f64,
    rmse: f64,
    mean_transport_ms: f64,
}

fn write_heatmaps(dir: &Path, model: &dyn DensityModel, data: &[Sample], count: usize) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    create_dir(dir)?;
    for (i, sample) in data.iter().take(count).enumerate() {
        let d = model.predict(sample)?;
        save_image(&density_heatmap(&d), dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// gst, heuristic, l2 or dm-count.
    #[arg(long)]
    loss: String,
    /// Receives train.csv, model.json, metrics.json and heatmaps/.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pseudo_sigma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    lambda_d: Option<f64>,
    /// Heatmaps written for the first this-many samples.
    #[arg(long, default_value_t = 4)]
    heatmaps: usize,
}

pub fn train(global: &Global, args: TrainArgs) -> Result<()> {
    let kind: LossKind = args.loss.parse()?;
    let mut cfg = global.config.train.clone();
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.pseudo_sigma = args.pseudo_sigma.unwrap_or(cfg.pseudo_sigma);
    cfg.dmcount.sinkhorn.epsilon = args.epsilon.unwrap_or(cfg.dmcount.sinkhorn.epsilon);
    cfg.dmcount.sinkhorn.max_iters = args.sinkhorn_iters.unwrap_or(cfg.dmcount.sinkhorn.max_iters);
    cfg.dmcount.lambda_d = args.lambda_d.unwrap_or(cfg.dmcount.lambda_d);
    cfg.record_timing = !global.deterministic;
    cfg.validate()?;

    let data = load_dataset(&args.manifest, kind.needs_kernel())?;
    let run = train_model(&data, kind, &cfg)?;
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("train.csv"), write_run_csv(&run))?;
    write_file(&args.out_dir.join("model.json"), run.model.to_json() + "\n")?;
    let metrics = evaluate(&run.model, &data)?;
    write_json(
        &args.out_dir.join("metrics.json"),
        &MetricsFile {
            mae: metrics.mae,
            rmse: metrics.rmse,
            mean_transport_ms: run.mean_transport_ms(),
        },
    )?;
    write_heatmaps(&args.out_dir.join("heatmaps"), &run.model, &data, args.heatmaps)?;
    println!(
        "trained {} steps with {} loss; training MAE {:.4}, RMSE {:.4}",
        cfg.steps,
        kind.name(),
        metrics.mae,
        metrics.rmse
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model JSON from `train`, or `oracle` for the pseudo ground truth.
    #[arg(long)]
    model: String,
    /// Receives metrics.json and heatmaps/.
    #[arg(long)]
    out_dir: PathBuf,
    /// Width of the oracle's pseudo ground truth.
    #[arg(long, default_value_t = 2.0)]
    pseudo_sigma: f64,
    #[arg(long, default_value_t = 4)]
    heatmaps: usize,
}

pub fn eval(_global: &Global, args: EvalArgs) -> Result<()> {
    let model: Box<dyn DensityModel> = if args.model == "oracle" {
        if args.pseudo_sigma.is_nan() || args.pseudo_sigma <= 0.0 {
            return Err(CliError::Config("sigma must be > 0".into()));
        }
        Box::new(PseudoGtOracle {
            sigma: args.pseudo_sigma,
        })
    } else {
        let path = Path::new(&args.model);
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Box::new(ToyRegressor::from_json(&text)?)
    };
    let data = load_dataset(&args.manifest, false)?;
    let metrics = evaluate(model.as_ref(), &data)?;
    create_dir(&args.out_dir)?;
    // evaluation runs no transport
    write_json(
        &args.out_dir.join("metrics.json"),
        &MetricsFile {
            mae: metrics.mae,
            rmse: metrics.rmse,
            mean_transport_ms: 0.0,
        },
    )?;
    write_heatmaps(&args.out_dir.join("heatmaps"), model.as_ref(), &data, args.heatmaps)?;
    println!(
        "MAE {:.6} RMSE {:.6} over {} samples",
        metrics.mae,
        metrics.rmse,
        data.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated `HxW` list.
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated annotation counts.
    #[arg(long)]
    points: Option<String>,
    /// Sinkhorn iterations per DMCount call.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fit_iterations: Option<usize>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T>(text: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| item(s.trim()).ok_or_else(|| CliError::Config(format!("cannot parse {s:?} in {text:?}"))))
        .collect()
}

pub fn bench(global: &Global, args: BenchArgs) -> Result<()> {
    let mut cfg = global.config.bench.clone();
    if let Some(s) = &args.sizes {
        cfg.sizes = parse_list(s, |t| {
            let (h, w) = t.split_once('x')?;
            Some((h.parse().ok()?, w.parse().ok()?))
        })?;
    }
    if let Some(p) = &args.points {
        cfg.point_counts = parse_list(p, |t| t.parse().ok())?;
    }
    cfg.k = args.k.unwrap_or(cfg.k);
    cfg.epsilon = args.epsilon.unwrap_or(cfg.epsilon);
    cfg.repeats = args.repeats.unwrap_or(cfg.repeats);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.fit.iterations = args.fit_iterations.unwrap_or(cfg.fit.iterations);
    cfg.validate()?;

    let mut csv = String::from("height,width,n_points,method,mean_ms,std_ms,kernel_build_ms\n");
    for &(h, w) in &cfg.sizes {
        for &n in &cfg.point_counts {
            let t = time_transport(h, w, n, &cfg)?;
            // wall-clock values never reproduce; --deterministic blanks them
            let ms = |v: f64| if global.deterministic { 0.0 } else { v };
            let _ = writeln!(
                csv,
                "{h},{w},{n},gst_loss,{},{},{}",
                ms(t.gst_mean_ms),
                ms(t.gst_std_ms),
                ms(t.kernel_build_ms)
            );
            let _ = writeln!(
                csv,
                "{h},{w},{n},sinkhorn_k{},{},{},0",
                cfg.k,
                ms(t.sinkhorn_mean_ms),
                ms(t.sinkhorn_std_ms)
            );
        }
    }
    match &args.out {
        Some(path) => write_file(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// appendix-a, theorem1, ot-1d or dense-kernel.
    name: String,
    /// Trials (or scenes); each oracle has its own default.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Audit this fitted scene instead of random ones (theorem1 only).
    #[arg(long)]
    scene: Option<PathBuf>,
}

fn report_line(r: &OracleReport) -> String {
    format!(
        "{} {} trials={} max_residual={:e} tolerance={:e}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.trials,
        r.max_residual,
        r.tolerance
    )
}

pub fn oracle(global: &Global, args: OracleArgs) -> Result<()> {
    let (line, passed) = match args.name.as_str() {
        "appendix-a" => {
            let r = pushforward_identity_oracle(args.trials.unwrap_or(1000), args.seed)?;
            (report_line(&r), r.passed())
        }
        "ot-1d" => {
            let r = sinkhorn_1d_oracle(args.trials.unwrap_or(50), args.seed)?;
            (report_line(&r), r.passed())
        }
        "dense-kernel" => {
            let r = dense_kernel_oracle(args.trials.unwrap_or(20), args.seed)?;
            (report_line(&r), r.passed())
        }
        "theorem1" => match &args.scene {
            Some(path) => {
                let scene = GaussianScene::load(path)?;
                let ann = scene_annotations(&scene)?;
                let a = audit_scene(&scene, &ann, &global.config.correspondence)?;
                let passed = a.row_residual <= 1e-12 && a.col_residual < 1e-6;
                let line = format!(
                    "{} theorem1 scenes=1 rowResidual={:e} colResidual={:e}",
                    if passed { "PASS" } else { "FAIL" },
                    a.row_residual,
                    a.col_residual
                );
                (line, passed)
            }
            None => {
                let r = fitted_marginal_audit(args.trials.unwrap_or(100), args.seed)?;
                let line = format!(
                    "{} theorem1 scenes={} rejected={} rowResidual={:e} colResidual={:e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.scenes,
                    r.rejected,
                    r.max_row_residual,
                    r.max_col_residual
                );
                (line, r.passed())
            }
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown oracle {other:?} (expected appendix-a, theorem1, ot-1d or dense-kernel)"
            )))
        }
    };
    println!("{line}");
    if passed {
        Ok(())
    } else {
        Err(CliError::OracleFailed(args.name))
    }
}
