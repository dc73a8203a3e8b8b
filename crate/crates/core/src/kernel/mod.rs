//! Pre-computed Bayesian transport kernels.
//!
//! A [`TransportKernel`] is a sparse row-stochastic matrix with one row per
//! pixel and `N + 1` columns: column 0 is the virtual background target and
//! columns `1..=N` are the annotations. Entry `(i, n)` is the posterior
//! `P(y_n | x_i)` obtained from the fitted Gaussians by Bayes' rule under a
//! uniform prior, so `diag(P_X) K` is a transport plan for any pixel marginal.

mod build;
mod correspondence;
mod format;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagedata::{pixel_center, AnnotationSet, DensityMap};
use crate::splat2d::GaussianScene;

pub use build::{build_dense_kernel, build_heuristic_kernel, build_kernel, heuristic_scene, scene_hash};
pub use correspondence::{
    log_p_x_given_background, log_p_x_given_gaussian, nearest_foreground, p_g_given_y, p_x_given_background,
    p_x_given_gaussian, p_x_given_y, Component, CorrespondenceParams,
};
pub use format::{decode_kernel, encode_kernel, load_kernel, save_kernel, GSTK_MAGIC, GSTK_VERSION};

/// Build provenance. Kept in memory only; the GSTK format does not carry it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelMeta {
    pub scene_hash: String,
    pub truncation_radius: f64,
    pub background: bool,
}

/// Sparse row storage: row `i` owns `cols[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportKernel {
    n_targets: usize,
    cutoff_d: f64,
    offsets: Vec<u64>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    pub meta: Option<KernelMeta>,
}

impl TransportKernel {
    /// Assemble from per-row `(columns, weights)` pairs, validating structure.
    pub fn from_rows(n_targets: usize, cutoff_d: f64, rows: Vec<(Vec<u32>, Vec<f64>)>) -> Result<Self> {
        let nnz = rows.iter().map(|(c, _)| c.len()).sum();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut weights = Vec::with_capacity(nnz);
        offsets.push(0);
        for (c, w) in rows {
            if c.len() != w.len() {
                return Err(Error::InvalidInput("row columns and weights differ in length".into()));
            }
            cols.extend(c);
            weights.extend(w);
            offsets.push(cols.len() as u64);
        }
        Self::from_csr(n_targets, cutoff_d, offsets, cols, weights)
    }

    pub fn from_csr(
        n_targets: usize,
        cutoff_d: f64,
        offsets: Vec<u64>,
        cols: Vec<u32>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("kernel structure: {msg}")));
        if offsets.first() != Some(&0) || *offsets.last().unwrap() as usize != cols.len() {
            return bad("row offsets do not span the entries");
        }
        if cols.len() != weights.len() {
            return bad("column and weight counts differ");
        }
        if offsets.windows(2).any(|p| p[0] > p[1]) {
            return bad("row offsets decrease");
        }
        for pair in offsets.windows(2) {
            let row = &cols[pair[0] as usize..pair[1] as usize];
            if row.windows(2).any(|c| c[0] >= c[1]) {
                return bad("columns not strictly increasing within a row");
            }
            if row.last().is_some_and(|&c| c as usize >= n_targets) {
                return bad("column index out of range");
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative");
        }
        Ok(Self {
            n_targets,
            cutoff_d,
            offsets,
            cols,
            weights,
            meta: None,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `N + 1`, background included.
    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn cutoff_d(&self) -> f64 {
        self.cutoff_d
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let range = self.offsets[i] as usize..self.offsets[i + 1] as usize;
        (&self.cols[range.clone()], &self.weights[range])
    }

    pub fn get(&self, i: usize, n: usize) -> f64 {
        let (cols, weights) = self.row(i);
        cols.binary_search(&(n as u32)).map_or(0.0, |k| weights[k])
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        (0..self.n_pixels())
            .map(|i| (self.row(i).1.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `K' v`: mass arriving at each target.
    pub fn transpose_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_pixels() {
            return Err(Error::shape(
                format!("{} pixel values", self.n_pixels()),
                format!("{} values", v.len()),
            ));
        }
        let mut out = vec![0.0; self.n_targets];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let (cols, weights) = self.row(i);
            for (&c, &w) in cols.iter().zip(weights) {
                out[c as usize] += w * vi;
            }
        }
        Ok(out)
    }

    /// `K u`: per-pixel expectation of a target-indexed vector.
    pub fn mul(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n_targets {
            return Err(Error::shape(
                format!("{} target values", self.n_targets),
                format!("{} values", u.len()),
            ));
        }
        Ok((0..self.n_pixels())
            .map(|i| {
                let (cols, weights) = self.row(i);
                cols.iter().zip(weights).map(|(&c, &w)| w * u[c as usize]).sum()
            })
            .collect())
    }

    /// Target with the largest weight in each row and that weight.
    pub fn row_argmax(&self, i: usize) -> (usize, f64) {
        let (cols, weights) = self.row(i);
        cols.iter().zip(weights).fold(
            (0, f64::NEG_INFINITY),
            |best, (&c, &w)| {
                if w > best.1 {
                    (c as usize, w)
                } else {
                    best
                }
            },
        )
    }
}

/// Push a density forward through the kernel: `out[n] = sum_i K[i][n] d[i]`.
pub fn push_forward(kernel: &TransportKernel, d: &DensityMap) -> Result<Vec<f64>> {
    kernel.transpose_mul(d.values())
}

/// L1 residuals of the row and column marginals of `diag(p_x) K` against
/// `p_x` and `p_y`.
pub fn verify_marginals(kernel: &TransportKernel, p_x: &[f64], p_y: &[f64]) -> Result<(f64, f64)> {
    if p_y.len() != kernel.n_targets() {
        return Err(Error::shape(
            format!("{} target probabilities", kernel.n_targets()),
            format!("{}", p_y.len()),
        ));
    }
    let cols = kernel.transpose_mul(p_x)?;
    let row_residual = (0..kernel.n_pixels())
        .map(|i| {
            let mass: f64 = kernel.row(i).1.iter().map(|w| w * p_x[i]).sum();
            (mass - p_x[i]).abs()
        })
        .sum();
    let col_residual = cols.iter().zip(p_y).map(|(a, b)| (a - b).abs()).sum();
    Ok((row_residual, col_residual))
}

/// Marginals for auditing the transport-plan property of a kernel built
/// *without* the background target.
///
/// `P_Y` is uniform over the annotations and zero on the background;
/// `P_X(x_i) ∝ sum_n N(x_i; mu_n, Sigma_n) P_Y(y_n)`, evaluated directly from
/// the scene with no truncation.
pub fn consistent_marginals(scene: &GaussianScene, ann: &AnnotationSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = ann.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "marginal audit needs at least one annotation".into(),
        ));
    }
    let fg = scene.foreground_index(n)?;
    let (h, w) = (scene.height, scene.width);
    let mut p_x: Vec<f64> = (0..h * w)
        .map(|i| {
            let x = pixel_center(i / w, i % w);
            fg.iter()
                .map(|&m| p_x_given_gaussian(x, &scene.gaussians[m]) / n as f64)
                .sum()
        })
        .collect();
    let total: f64 = p_x.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    p_x.iter_mut().for_each(|v| *v /= total);
    let mut p_y = vec![1.0 / n as f64; n + 1];
    p_y[0] = 0.0;
    Ok((p_x, p_y))
}

/// `true` when every foreground Gaussian's `k`-sigma box lies inside the image.
pub fn foreground_is_interior(scene: &GaussianScene, k_sigma: f64) -> bool {
    scene.gaussians.iter().filter(|g| g.is_foreground()).all(|g| {
        let ext = g.half_extent(k_sigma * k_sigma);
        g.mu[0] - ext[0] >= 0.0
            && g.mu[0] + ext[0] <= scene.height as f64
            && g.mu[1] - ext[1] >= 0.0
            && g.mu[1] + ext[1] <= scene.width as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat2d::{Gaussian2D, Role};
    use proptest::prelude::*;

    fn one_gaussian_scene() -> (GaussianScene, AnnotationSet) {
        let mu = [10.5, 10.5];
        let g = Gaussian2D {
            role: Role::Foreground,
            assigned: Some(1),
            ..Gaussian2D::isotropic(mu, 1.0, 1.0, vec![1.0])
        };
        (
            GaussianScene::new(21, 21, vec![g]),
            AnnotationSet::new(vec![mu], 21, 21).unwrap(),
        )
    }

    #[test]
    fn empty_annotations_send_everything_to_background() {
        let ann = AnnotationSet::empty(6, 7);
        let scene = GaussianScene::new(6, 7, vec![Gaussian2D::isotropic([1.0, 1.0], 2.0, 1.0, vec![1.0])]);
        let k = build_kernel(&scene, &ann, &CorrespondenceParams::default()).unwrap();
        assert_eq!(k.n_pixels(), 42);
        assert_eq!(k.n_targets(), 1);
        for i in 0..k.n_pixels() {
            assert_eq!(k.row(i), (&[0u32][..], &[1.0][..]));
        }
    }

    #[test]
    fn analytic_row_at_the_mean() {
        let (scene, ann) = one_gaussian_scene();
        let k = build_kernel(&scene, &ann, &CorrespondenceParams::default()).unwrap();
        let i = 10 * 21 + 10;
        let e = (-4.5f64).exp();
        assert!((k.get(i, 0) - e / (1.0 + e)).abs() < 1e-15);
        assert!((k.get(i, 1) - 1.0 / (1.0 + e)).abs() < 1e-15);
        // 0.010987, quoted as 0.01100 at four significant digits
        assert!((k.get(i, 0) - 0.01100).abs() < 5e-5);
        assert!(k.max_row_deviation() <= 1e-12);
    }

    #[test]
    fn heuristic_kernel_matches_analytic_ratio_and_symmetry() {
        let ann = AnnotationSet::new(vec![[16.5, 10.5], [16.5, 22.5]], 33, 33).unwrap();
        let params = CorrespondenceParams::default();
        let k = build_heuristic_kernel(&ann, 8.0, &params).unwrap();
        let at = 16 * 33 + 10;
        let e = (-4.5f64).exp();
        // the second annotation sits 12 px (1.5 sigma) away
        let other = (-0.5 * 1.5f64 * 1.5).exp();
        let z = e + 1.0 + other;
        assert!((k.get(at, 0) - e / z).abs() < 1e-12);
        assert!((k.get(at, 1) - 1.0 / z).abs() < 1e-12);
        // equidistant pixel
        let mid = 16 * 33 + 16;
        assert!((k.get(mid, 1) - k.get(mid, 2)).abs() < 1e-12);
        assert!(k.max_row_deviation() <= 1e-12);
        assert!(build_heuristic_kernel(&ann, 0.0, &params).is_err());
    }

    #[test]
    fn heuristic_row_at_annotation_is_sigma_independent() {
        let ann = AnnotationSet::new(vec![[40.5, 40.5]], 81, 81).unwrap();
        let e = (-4.5f64).exp();
        for sigma in [1.0, 3.0, 8.0] {
            let k = build_heuristic_kernel(&ann, sigma, &CorrespondenceParams::default()).unwrap();
            assert!((k.get(40 * 81 + 40, 1) - 1.0 / (1.0 + e)).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_foreground_is_rejected() {
        let (scene, _) = one_gaussian_scene();
        let two = AnnotationSet::new(vec![[1.0, 1.0], [2.0, 2.0]], 21, 21).unwrap();
        assert!(build_kernel(&scene, &two, &CorrespondenceParams::default()).is_err());
    }

    #[test]
    fn push_forward_examples() {
        let (scene, ann) = one_gaussian_scene();
        let k = build_kernel(&scene, &ann, &CorrespondenceParams::default()).unwrap();
        let zero = DensityMap::zeros(21, 21);
        assert_eq!(push_forward(&k, &zero).unwrap(), vec![0.0, 0.0]);
        assert!(push_forward(&k, &DensityMap::zeros(2, 2)).is_err());

        // each row a single unit entry
        let rows = vec![
            (vec![1], vec![1.0]),
            (vec![0], vec![1.0]),
            (vec![1], vec![1.0]),
            (vec![2], vec![1.0]),
        ];
        let perm = TransportKernel::from_rows(3, 3.0, rows).unwrap();
        let ones = DensityMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(push_forward(&perm, &ones).unwrap(), vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn rejects_malformed_structure() {
        assert!(TransportKernel::from_rows(2, 3.0, vec![(vec![1, 0], vec![0.5, 0.5])]).is_err());
        assert!(TransportKernel::from_rows(2, 3.0, vec![(vec![2], vec![1.0])]).is_err());
        assert!(TransportKernel::from_rows(2, 3.0, vec![(vec![0], vec![-1.0])]).is_err());
    }

    #[test]
    fn far_background_pixel_breaks_column_marginal() {
        let ann = AnnotationSet::new(vec![[5.5, 5.5], [5.5, 8.5], [8.5, 5.5]], 40, 40).unwrap();
        let k = build_heuristic_kernel(&ann, 1.0, &CorrespondenceParams::default()).unwrap();
        let mut p_x = vec![0.0; 1600];
        p_x[39 * 40 + 39] = 1.0;
        let p_y = vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let (row, col) = verify_marginals(&k, &p_x, &p_y).unwrap();
        assert!(row <= 1e-12);
        // all mass lands on the background, none where P_Y expects it
        assert!((col - 2.0).abs() < 1e-12);
        assert!(col > 0.1);
    }

    #[test]
    fn dense_oracle_matches_untruncated_sparse() {
        let mk = |mu: [f64; 2], s: [f64; 2], theta: f64, n: usize| Gaussian2D {
            log_s: [s[0].ln(), s[1].ln()],
            theta,
            role: Role::Foreground,
            assigned: Some(n),
            ..Gaussian2D::isotropic(mu, 1.0, 1.0, vec![1.0])
        };
        let points = vec![[4.2, 5.1], [11.0, 3.3], [7.7, 12.9]];
        let mut gaussians = vec![
            mk(points[2], [1.5, 0.8], 0.3, 3),
            Gaussian2D::isotropic([8.0, 8.0], 3.0, 0.5, vec![1.0]),
            mk(points[0], [1.0, 2.0], -1.1, 1),
            mk(points[1], [2.5, 2.5], 0.0, 2),
        ];
        gaussians[1].role = Role::Background;
        let scene = GaussianScene::new(14, 16, gaussians);
        let ann = AnnotationSet::new(points, 14, 16).unwrap();
        for background in [true, false] {
            let params = CorrespondenceParams {
                background,
                ..CorrespondenceParams::default()
            }
            .untruncated();
            let k = build_kernel(&scene, &ann, &params).unwrap();
            let dense = build_dense_kernel(&scene, &ann, &params).unwrap();
            for i in 0..k.n_pixels() {
                for n in 0..4 {
                    assert!((k.get(i, n) - dense[i * 4 + n]).abs() <= 1e-12);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rows_are_stochastic_and_mass_is_conserved(
            points in prop::collection::vec((0.0f64..24.0, 0.0f64..24.0), 0..6),
            sigma in 0.5f64..6.0,
            cutoff in 1.0f64..5.0,
            background in any::<bool>(),
            density in prop::collection::vec(0.0f64..5.0, 576),
        ) {
            let ann = AnnotationSet::new(points.iter().map(|&(r, c)| [r, c]).collect(), 24, 24).unwrap();
            let params = CorrespondenceParams { cutoff_d: cutoff, truncation_radius: None, background };
            let k = build_heuristic_kernel(&ann, sigma, &params).unwrap();
            prop_assert!(k.max_row_deviation() <= 1e-12);
            prop_assert!(k.weights().iter().all(|&w| w >= 0.0));
            let d = DensityMap::new(24, 24, density).unwrap();
            let out = push_forward(&k, &d).unwrap();
            prop_assert!((out.iter().sum::<f64>() - d.total()).abs() <= 1e-9);
        }
    }
}
