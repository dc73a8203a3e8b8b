use std::ops::Range;

use rayon::prelude::*;

use super::{Gaussian2D, GaussianScene, GEOMETRY_PARAMS};
use crate::error::{Error, Result};
use crate::imagedata::Image;

/// Gaussians contribute only where `mahalanobis_sq <= 36` (a 6-sigma ellipse).
/// The dropped tail is below `exp(-18) < 2e-8` of the peak.
pub const TRUNCATION_MAHALANOBIS_SQ: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderMode {
    #[default]
    Truncated,
    /// Evaluate every Gaussian at every pixel.
    Exact,
}

/// Precomputed per-Gaussian evaluation state.
struct Footprint {
    rows: Range<usize>,
    cols: Range<usize>,
    mu: [f64; 2],
    sin: f64,
    cos: f64,
    inv_var: [f64; 2],
    limit_sq: f64,
}

impl Footprint {
    fn new(g: &Gaussian2D, height: usize, width: usize, mode: RenderMode) -> Self {
        let (sin, cos) = g.theta.sin_cos();
        let inv_var = [(-2.0 * g.log_s[0]).exp(), (-2.0 * g.log_s[1]).exp()];
        let (rows, cols, limit_sq) = match mode {
            RenderMode::Exact => (0..height, 0..width, f64::INFINITY),
            RenderMode::Truncated => {
                let ext = g.half_extent(TRUNCATION_MAHALANOBIS_SQ);
                (
                    center_range(g.mu[0], ext[0], height),
                    center_range(g.mu[1], ext[1], width),
                    TRUNCATION_MAHALANOBIS_SQ,
                )
            }
        };
        Self {
            rows,
            cols,
            mu: g.mu,
            sin,
            cos,
            inv_var,
            limit_sq,
        }
    }

    /// Local offset and squared Mahalanobis distance of pixel `(r, c)`.
    #[inline]
    fn eval(&self, r: usize, c: usize) -> ([f64; 2], f64) {
        let dr = r as f64 + 0.5 - self.mu[0];
        let dc = c as f64 + 0.5 - self.mu[1];
        let u1 = self.cos * dr + self.sin * dc;
        let u2 = -self.sin * dr + self.cos * dc;
        ([dr, dc], u1 * u1 * self.inv_var[0] + u2 * u2 * self.inv_var[1])
    }
}

/// Pixel indices whose centers lie within `[center - ext, center + ext]`.
fn center_range(center: f64, ext: f64, len: usize) -> Range<usize> {
    let lo = (center - ext - 0.5).ceil().max(0.0);
    let hi = (center + ext - 0.5).floor() + 1.0;
    if !(hi > lo) || lo >= len as f64 {
        return 0..0;
    }
    lo as usize..(hi.min(len as f64)) as usize
}

/// Additive splat `sum_m alpha_m c_m exp(-d^2/2)` with 6-sigma truncation.
pub fn render(scene: &GaussianScene) -> Image {
    render_with(scene, RenderMode::Truncated)
}

pub fn render_with(scene: &GaussianScene, mode: RenderMode) -> Image {
    let (h, w, ch) = (scene.height, scene.width, scene.channels());
    let prints: Vec<Footprint> = scene.gaussians.iter().map(|g| Footprint::new(g, h, w, mode)).collect();
    let mut values = vec![0.0; h * w * ch];
    if w == 0 {
        return Image::new(h, w, ch, values).expect("shape is consistent");
    }
    values.par_chunks_mut(w * ch).enumerate().for_each(|(r, row)| {
        for (g, fp) in scene.gaussians.iter().zip(&prints) {
            if !fp.rows.contains(&r) {
                continue;
            }
            for c in fp.cols.clone() {
                let (_, d2) = fp.eval(r, c);
                if d2 > fp.limit_sq {
                    continue;
                }
                let weight = g.alpha * (-0.5 * d2).exp();
                for (out, col) in row[c * ch..(c + 1) * ch].iter_mut().zip(&g.color) {
                    *out += weight * col;
                }
            }
        }
    });
    Image::new(h, w, ch, values).expect("rendered samples are finite")
}

/// Mean squared difference over all pixels and channels.
pub fn reconstruction_loss(rendered: &Image, target: &Image) -> Result<f64> {
    check_shape(rendered, target)?;
    let n = rendered.values().len().max(1) as f64;
    Ok(rendered
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn check_shape(a: &Image, b: &Image) -> Result<()> {
    let sa = (a.height(), a.width(), a.channels());
    let sb = (b.height(), b.width(), b.channels());
    if sa != sb {
        return Err(Error::shape(format!("{sa:?}"), format!("{sb:?}")));
    }
    Ok(())
}

/// Largest aspect-ratio excess over `delta`, with the Gaussian that attains it.
/// Ties go to the lowest index; `None` when no ratio exceeds `delta`.
fn shape_argmax(scene: &GaussianScene, delta: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (m, g) in scene.gaussians.iter().enumerate() {
        let excess = g.aspect_ratio() - delta;
        if excess > 0.0 && best.is_none_or(|(_, b)| excess > b) {
            best = Some((m, excess));
        }
    }
    best
}

/// `max_m max(s_major / s_minor - delta, 0)`.
pub fn shape_loss(scene: &GaussianScene, delta: f64) -> f64 {
    shape_argmax(scene, delta).map_or(0.0, |(_, e)| e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub reconstruction: f64,
    pub shape: f64,
    /// Same layout as [`GaussianScene::params`].
    pub grad: Vec<f64>,
}

/// `L_rec + beta * L_shape` without gradients.
pub fn total_loss(scene: &GaussianScene, target: &Image, beta: f64, delta: f64, mode: RenderMode) -> Result<f64> {
    let rec = reconstruction_loss(&render_with(scene, mode), target)?;
    Ok(rec + beta * shape_loss(scene, delta))
}

/// Loss `L_rec + beta * L_shape` and its analytic gradient.
///
/// Foreground means are frozen and always receive a zero gradient.
pub fn total_loss_and_grad(
    scene: &GaussianScene,
    target: &Image,
    beta: f64,
    delta: f64,
    mode: RenderMode,
) -> Result<LossAndGrad> {
    let rendered = render_with(scene, mode);
    check_shape(&rendered, target)?;
    let ch = scene.channels();
    let n = rendered.values().len().max(1) as f64;
    let reconstruction = reconstruction_loss(&rendered, target)?;
    // dL_rec / d(rendered sample)
    let residual: Vec<f64> = rendered
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect();

    let (h, w) = (scene.height, scene.width);
    let stride = GEOMETRY_PARAMS + ch;
    let per_gaussian: Vec<Vec<f64>> = scene
        .gaussians
        .par_iter()
        .map(|g| {
            let fp = Footprint::new(g, h, w, mode);
            let mut grad = vec![0.0; stride];
            let (mut g_mu, mut g_ls, mut g_theta, mut g_alpha) = ([0.0; 2], [0.0; 2], 0.0, 0.0);
            let mut g_color = vec![0.0; ch];
            for r in fp.rows.clone() {
                for c in fp.cols.clone() {
                    let ([dr, dc], d2) = fp.eval(r, c);
                    if d2 > fp.limit_sq {
                        continue;
                    }
                    let e = (-0.5 * d2).exp();
                    let res = &residual[(r * w + c) * ch..(r * w + c + 1) * ch];
                    let mut dot = 0.0;
                    for k in 0..ch {
                        dot += res[k] * g.color[k];
                        g_color[k] += res[k] * g.alpha * e;
                    }
                    g_alpha += dot * e;
                    // dL/d(d2) = dL/de * de/d(d2) = (alpha * dot) * (-e / 2)
                    let g_d2 = -0.5 * g.alpha * dot * e;
                    let u1 = fp.cos * dr + fp.sin * dc;
                    let u2 = -fp.sin * dr + fp.cos * dc;
                    let a1 = u1 * fp.inv_var[0];
                    let a2 = u2 * fp.inv_var[1];
                    g_ls[0] += g_d2 * (-2.0 * u1 * a1);
                    g_ls[1] += g_d2 * (-2.0 * u2 * a2);
                    g_theta += g_d2 * 2.0 * u1 * u2 * (fp.inv_var[0] - fp.inv_var[1]);
                    g_mu[0] += g_d2 * -2.0 * (fp.cos * a1 - fp.sin * a2);
                    g_mu[1] += g_d2 * -2.0 * (fp.sin * a1 + fp.cos * a2);
                }
            }
            if !g.is_foreground() {
                grad[0] = g_mu[0];
                grad[1] = g_mu[1];
            }
            grad[2] = g_ls[0];
            grad[3] = g_ls[1];
            grad[4] = g_theta;
            grad[5] = g_alpha;
            grad[GEOMETRY_PARAMS..].copy_from_slice(&g_color);
            grad
        })
        .collect();
    let mut grad = per_gaussian.concat();

    let mut shape = 0.0;
    if let Some((m, excess)) = shape_argmax(scene, delta) {
        shape = excess;
        let g = &scene.gaussians[m];
        let ratio = g.aspect_ratio();
        let sign = if g.log_s[0] >= g.log_s[1] { 1.0 } else { -1.0 };
        grad[m * stride + 2] += beta * ratio * sign;
        grad[m * stride + 3] -= beta * ratio * sign;
    }
    Ok(LossAndGrad {
        loss: reconstruction + beta * shape,
        reconstruction,
        shape,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Role;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, m: usize, ch: usize) -> GaussianScene {
        let gaussians = (0..m)
            .map(|i| Gaussian2D {
                mu: [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)],
                log_s: [rng.random_range(-0.3..1.2), rng.random_range(-0.3..1.2)],
                theta: rng.random_range(-PI..PI),
                alpha: rng.random_range(-0.5..1.5),
                color: (0..ch).map(|_| rng.random_range(-0.2..1.0)).collect(),
                role: if i % 2 == 0 { Role::Foreground } else { Role::Background },
                assigned: (i % 2 == 0).then_some(i / 2 + 1),
            })
            .collect();
        GaussianScene::new(h, w, gaussians)
    }

    #[test]
    fn empty_scene_renders_black() {
        let scene = GaussianScene::new(4, 5, vec![]);
        let img = render(&scene);
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_peak() {
        let mut g = Gaussian2D::isotropic([2.5, 3.5], 1.0, 1.0, vec![1.0, 0.0, 0.0]);
        g.theta = 0.4;
        let img = render(&GaussianScene::new(6, 6, vec![g]));
        assert_eq!(img.pixel(2, 3), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn additive_blending() {
        let g = Gaussian2D::isotropic([1.5, 1.5], 2.0, 0.5, vec![1.0]);
        let img = render(&GaussianScene::new(4, 4, vec![g.clone(), g]));
        assert_eq!(img.pixel(1, 1), &[1.0]);
    }

    #[test]
    fn truncation_error_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 24, 24, 6, 3);
        let a = render_with(&scene, RenderMode::Truncated);
        let b = render_with(&scene, RenderMode::Exact);
        let bound: f64 = scene
            .gaussians
            .iter()
            .map(|g| g.alpha.abs() * g.color.iter().fold(0.0f64, |m, c| m.max(c.abs())))
            .sum::<f64>()
            * (-18.0f64).exp();
        assert!(a.max_abs_diff(&b).unwrap() <= bound);
    }

    #[test]
    fn rotation_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let scene = random_scene(&mut rng, 8, 8, 4, 1);
            let base = render_with(&scene, RenderMode::Exact);
            let mut flipped = scene.clone();
            let mut swapped = scene.clone();
            for (f, s) in flipped.gaussians.iter_mut().zip(&mut swapped.gaussians) {
                f.theta += PI;
                s.theta += FRAC_PI_2;
                s.log_s.swap(0, 1);
            }
            for other in [flipped, swapped] {
                let img = render_with(&other, RenderMode::Exact);
                assert!(img.max_abs_diff(&base).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let ones = Image::filled(2, 3, 3, 1.0);
        let zeros = Image::zeros(2, 3, 3);
        let half = Image::filled(2, 3, 3, 0.5);
        assert_eq!(reconstruction_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&half, &zeros).unwrap(), 0.25);
        assert!(reconstruction_loss(&ones, &Image::zeros(3, 2, 3)).is_err());
    }

    #[test]
    fn shape_loss_examples() {
        let with_scales = |scales: &[[f64; 2]]| {
            let gaussians = scales
                .iter()
                .map(|&[a, b]| Gaussian2D {
                    log_s: [a.ln(), b.ln()],
                    ..Gaussian2D::isotropic([0.0, 0.0], 1.0, 1.0, vec![1.0])
                })
                .collect();
            GaussianScene::new(4, 4, gaussians)
        };
        assert_eq!(shape_loss(&with_scales(&[[1.0, 1.5], [2.0, 2.0]]), 1.5), 0.0);
        assert!((shape_loss(&with_scales(&[[3.0, 1.0]]), 1.5) - 1.5).abs() < 1e-12);
        assert!((shape_loss(&with_scales(&[[2.0, 1.0], [1.0, 4.0]]), 1.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut scene = random_scene(&mut rng, 8, 8, 4, 3);
        for g in &mut scene.gaussians {
            g.log_s[1] = g.log_s[0];
        }
        let target = render(&scene);
        let out = total_loss_and_grad(&scene, &target, 0.2, 1.5, RenderMode::Truncated).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn foreground_mean_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 8, 8, 6, 3);
        let target = Image::zeros(8, 8, 3);
        let out = total_loss_and_grad(&scene, &target, 0.2, 1.5, RenderMode::Exact).unwrap();
        let stride = GEOMETRY_PARAMS + 3;
        for (m, g) in scene.gaussians.iter().enumerate() {
            let mu_grad = &out.grad[m * stride..m * stride + 2];
            if g.is_foreground() {
                assert_eq!(mu_grad, &[0.0, 0.0]);
            } else {
                assert!(mu_grad.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-5;
        for trial in 0..8 {
            let scene = random_scene(&mut rng, 8, 8, 5, 3);
            let target = Image::new(8, 8, 3, (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
            let out = total_loss_and_grad(&scene, &target, 0.2, 1.5, RenderMode::Exact).unwrap();
            let frozen = scene.frozen_mask();
            let params = scene.params();
            for (i, &analytic) in out.grad.iter().enumerate() {
                if frozen[i] {
                    continue;
                }
                let eval = |x: f64| {
                    let mut p = params.clone();
                    p[i] = x;
                    let mut s = scene.clone();
                    s.set_params(&p);
                    total_loss(&s, &target, 0.2, 1.5, RenderMode::Exact).unwrap()
                };
                let fd = (eval(params[i] + h) - eval(params[i] - h)) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs());
                assert!(
                    (analytic - fd).abs() <= 1e-4 * scale + 1e-10,
                    "trial {trial} param {i}: analytic {analytic} fd {fd}"
                );
            }
        }
    }
}
