//! Balanced optimal transport: cost matrices, log-domain Sinkhorn, and the
//! exact oracles (1D sorted matching, north-west corner) used to audit it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{pixel_center, AnnotationSet, AnnotationTarget};

/// Tolerance on `sum = 1` for probability inputs.
const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Metric {
    #[inline]
    fn eval(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        match self {
            Metric::SquaredEuclidean => d2,
            Metric::Euclidean => d2.sqrt(),
        }
    }
}

/// Dense `I x N` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    pub metric: Metric,
}

impl CostMatrix {
    /// Pairwise costs with all coordinates divided by `scale`.
    pub fn from_points(sources: &[[f64; 2]], targets: &[[f64; 2]], metric: Metric, scale: f64) -> Self {
        let inv = 1.0 / scale;
        let targets: Vec<[f64; 2]> = targets.iter().map(|t| [t[0] * inv, t[1] * inv]).collect();
        let entries = sources
            .par_iter()
            .flat_map_iter(|s| {
                let s = [s[0] * inv, s[1] * inv];
                targets.iter().map(move |&t| metric.eval(s, t))
            })
            .collect();
        Self {
            rows: sources.len(),
            cols: targets.len(),
            entries,
            metric,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, n: usize) -> f64 {
        self.entries[i * self.cols + n]
    }
}

/// Pixel-center to annotation costs, coordinates normalized by `max(height, width)`.
pub fn cost_matrix(height: usize, width: usize, ann: &AnnotationSet, metric: Metric) -> Result<CostMatrix> {
    if ann.is_empty() {
        return Err(Error::InvalidInput("cost matrix needs at least one annotation".into()));
    }
    let pixels: Vec<[f64; 2]> = (0..height * width)
        .map(|i| pixel_center(i / width, i % width))
        .collect();
    Ok(CostMatrix::from_points(
        &pixels,
        ann.points(),
        metric,
        height.max(width) as f64,
    ))
}

/// Dense transport plan, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, n: usize) -> f64 {
        self.entries[i * self.cols + n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.entries.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// `<C, P>`.
    pub fn cost(&self, c: &CostMatrix) -> Result<f64> {
        if (c.rows, c.cols) != (self.rows, self.cols) {
            return Err(Error::shape(
                format!("{}x{} costs", self.rows, self.cols),
                format!("{}x{}", c.rows, c.cols),
            ));
        }
        Ok(self.entries.iter().zip(&c.entries).map(|(p, c)| p * c).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the row-marginal L1 error falls below this.
    pub tol: f64,
    /// Anneal epsilon down from the largest cost, halving per stage and
    /// warm-starting the potentials; `max_iters` bounds all stages together.
    pub epsilon_scaling: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 100,
            tol: 1e-6,
            epsilon_scaling: false,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("sinkhorn iterations must be ≥ 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tolerance must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    /// `<C, P>`.
    pub cost: f64,
    pub iterations: usize,
    /// Row-marginal L1 error of the returned plan.
    pub marginal_error: f64,
    /// Dual potentials; `P_in = exp((f_i + g_n - C_in) / epsilon)`.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `-epsilon LSE_n((g_n - C_in) / epsilon)`: the source potential with
    /// `epsilon ln a_i` removed, finite even where `a_i = 0`.
    pub f_hat: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidInput(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between `p_x` and `p_y` by alternating log-domain updates.
///
/// Each iteration refits `f` to the row marginal and then `g` to the column
/// marginal, so columns are exact after every iteration; the loop stops when
/// the row marginal is within `tol` (L1) or after `max_iters` iterations.
/// With `epsilon_scaling` every intermediate stage stops on the same
/// tolerance or after its share of the budget.
pub fn sinkhorn(p_x: &[f64], p_y: &[f64], c: &CostMatrix, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    cfg.validate()?;
    if (p_x.len(), p_y.len()) != (c.rows, c.cols) {
        return Err(Error::shape(
            format!("{}x{} marginals", c.rows, c.cols),
            format!("{}x{}", p_x.len(), p_y.len()),
        ));
    }
    check_distribution(p_x, "source marginal")?;
    check_distribution(p_y, "target marginal")?;
    let log_a: Vec<f64> = p_x.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = p_y.iter().map(|v| v.ln()).collect();
    let mut stages = vec![cfg.epsilon];
    if cfg.epsilon_scaling {
        let c_max = c.entries.iter().copied().fold(0.0, f64::max);
        while stages[stages.len() - 1] * 2.0 < c_max {
            let next = stages[stages.len() - 1] * 2.0;
            stages.push(next);
        }
        stages.reverse();
        if cfg.max_iters < 2 * stages.len() {
            stages = vec![cfg.epsilon];
        }
    }
    // absolute-unit potentials carried between stages
    let mut f = vec![0.0; c.rows];
    let mut g = vec![0.0; c.cols];
    let mut iterations = 0;
    let mut error = f64::INFINITY;
    let mut scaled = Vec::new();
    let mut r = Vec::new();
    let n_stages = stages.len();
    for (s, &eps) in stages.iter().enumerate() {
        // intermediate stages share half the budget; the target stage gets the rest
        let budget = if s + 1 == n_stages {
            cfg.max_iters - iterations
        } else {
            (cfg.max_iters / (2 * (n_stages - 1))).max(1)
        };
        scaled = c.entries.par_iter().map(|v| -v / eps).collect();
        let mut fe: Vec<f64> = f.iter().map(|v| v / eps).collect();
        let mut ge: Vec<f64> = g.iter().map(|v| v / eps).collect();
        let stage = run_stage(&scaled, c.cols, &log_a, &log_b, &mut fe, &mut ge, budget, cfg.tol)?;
        iterations += stage.0;
        error = stage.1;
        r = stage.2;
        f = fe.iter().map(|v| v * eps).collect();
        g = ge.iter().map(|v| v * eps).collect();
    }
    let eps = cfg.epsilon;
    let f: Vec<f64> = f.iter().map(|v| v / eps).collect();
    let g: Vec<f64> = g.iter().map(|v| v / eps).collect();
    let srow = |i: usize| &scaled[i * c.cols..(i + 1) * c.cols];

    let entries: Vec<f64> = (0..c.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let fi = f[i];
            srow(i).iter().zip(&g).map(move |(s, gn)| (fi + gn + s).exp())
        })
        .collect();
    let plan = TransportPlan {
        rows: c.rows,
        cols: c.cols,
        entries,
    };
    let cost = plan.cost(c)?;
    if !cost.is_finite() {
        return Err(Error::Numerical("sinkhorn produced a non-finite cost".into()));
    }
    Ok(SinkhornOutput {
        plan,
        cost,
        iterations,
        marginal_error: error,
        f_hat: r.iter().map(|ri| -eps * ri).collect(),
        f: f.iter().map(|v| eps * v).collect(),
        g: g.iter().map(|v| eps * v).collect(),
    })
}

/// Sinkhorn iterations on the scaled cost `S = -C / eps` with potentials in
/// units of eps. Returns the iteration count, the final row-marginal error
/// and the row log-sums `r_i = LSE_n(g_n + S_in)`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    scaled: &[f64],
    cols: usize,
    log_a: &[f64],
    log_b: &[f64],
    f: &mut [f64],
    g: &mut [f64],
    max_iters: usize,
    tol: f64,
) -> Result<(usize, f64, Vec<f64>)> {
    let row_lse = |g: &[f64]| -> Vec<f64> {
        scaled
            .par_chunks(cols)
            .map(|row| log_sum_exp(row.iter().zip(g).map(|(s, gn)| gn + s)))
            .collect()
    };
    let mut iterations = 0;
    let mut r = row_lse(g);
    let mut error = f64::INFINITY;
    while iterations < max_iters {
        for ((fi, la), ri) in f.iter_mut().zip(log_a).zip(&r) {
            *fi = la - ri;
        }
        update_columns(scaled, cols, f, log_b, g);
        iterations += 1;
        r = row_lse(g);
        error = f
            .iter()
            .zip(&r)
            .zip(log_a)
            .map(|((fi, ri), la)| ((fi + ri).exp() - la.exp()).abs())
            .sum();
        if error.is_nan() || g.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!("sinkhorn diverged at iteration {iterations}")));
        }
        if error < tol {
            break;
        }
    }
    Ok((iterations, error, r))
}

/// `g_n = ln b_n - LSE_i(f_i + S_in)`, streaming over rows of `S`.
fn update_columns(scaled: &[f64], cols: usize, f: &[f64], log_b: &[f64], g: &mut [f64]) {
    let mut max = vec![f64::NEG_INFINITY; cols];
    for (row, fi) in scaled.chunks(cols).zip(f) {
        for (m, s) in max.iter_mut().zip(row) {
            *m = m.max(fi + s);
        }
    }
    let mut sum = vec![0.0; cols];
    for (row, fi) in scaled.chunks(cols).zip(f) {
        for ((acc, s), m) in sum.iter_mut().zip(row).zip(&max) {
            *acc += (fi + s - m).exp();
        }
    }
    for n in 0..cols {
        let lse = if max[n] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            max[n] + sum[n].ln()
        };
        g[n] = log_b[n] - lse;
    }
}

/// Exact 1D Wasserstein-1 cost between two weighted point sets of equal mass:
/// the integral of `|F(t) - G(t)|` over the merged sorted positions.
pub fn ot_1d_cost(source: &[(f64, f64)], target: &[(f64, f64)]) -> Result<f64> {
    let total_s: f64 = source.iter().map(|p| p.1).sum();
    let total_t: f64 = target.iter().map(|p| p.1).sum();
    if (total_s - total_t).abs() > MASS_TOL * total_s.max(total_t).max(1.0) {
        return Err(Error::InvalidInput(format!(
            "1D transport needs equal masses, got {total_s} and {total_t}"
        )));
    }
    // signed events: +mass for the source CDF, -mass for the target CDF
    let mut events: Vec<(f64, f64)> = source
        .iter()
        .map(|&(x, m)| (x, m))
        .chain(target.iter().map(|&(x, m)| (x, -m)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cost = 0.0;
    let mut diff = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        cost += diff.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(cost)
}

/// North-west corner rule: a feasible plan with exact marginals.
pub fn nw_corner_plan(p_x: &[f64], p_y: &[f64]) -> TransportPlan {
    let (rows, cols) = (p_x.len(), p_y.len());
    let mut plan = TransportPlan::zeros(rows, cols);
    if rows == 0 || cols == 0 {
        return plan;
    }
    let (mut i, mut n) = (0, 0);
    let (mut left_row, mut left_col) = (p_x[0], p_y[0]);
    loop {
        let m = left_row.min(left_col);
        plan.entries[i * cols + n] += m;
        left_row -= m;
        left_col -= m;
        if left_row <= left_col {
            i += 1;
            if i == rows {
                break;
            }
            left_row = p_x[i];
        } else {
            n += 1;
            if n == cols {
                break;
            }
            left_col = p_y[n];
        }
    }
    plan
}

/// Both sides of the mass identity for pushing `d_mass` units through `plan`:
/// `lhs = || (d_mass P)' 1 - zeta_g ||_1` computed explicitly and
/// `rhs = | d_mass - ||zeta_g||_1 |`. They agree whenever the plan's column
/// marginal is `zeta_g / ||zeta_g||_1`.
pub fn check_pushforward_equivalence(
    plan: &TransportPlan,
    d_mass: f64,
    target: &AnnotationTarget,
) -> Result<(f64, f64)> {
    if plan.cols != target.len() {
        return Err(Error::shape(
            format!("{} plan columns", target.len()),
            format!("{}", plan.cols),
        ));
    }
    let mut pushed = vec![0.0; plan.cols];
    for row in plan.entries.chunks(plan.cols.max(1)) {
        for (p, v) in pushed.iter_mut().zip(row) {
            *p += d_mass * v;
        }
    }
    let lhs = pushed.iter().zip(target.values()).map(|(p, z)| (p - z).abs()).sum();
    let rhs = (d_mass - target.total()).abs();
    Ok((lhs, rhs))
}
