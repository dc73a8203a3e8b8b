//! Three-stage convolutional density regressor with hand-written backprop.
//!
//! Activations are stored channels-last. Parameter layout (flat):
//! `w1[ky][kx][3][16] b1[16] w2[ky][kx][16][16] b2[16] w3[16] b3`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{DensityMap, Image};

pub const IN_CHANNELS: usize = 3;
pub const HIDDEN: usize = 16;

const W1: usize = 0;
const B1: usize = W1 + 9 * IN_CHANNELS * HIDDEN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + 9 * HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;
pub const N_PARAMS: usize = B3 + 1;

/// Output bias at initialization; keeps the initial count near a few units.
const INIT_OUTPUT_BIAS: f64 = -5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRegressor {
    pub seed: u64,
    pub params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    z3: Vec<f64>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inputs in `[0, 1]` are shifted to `[-0.5, 0.5]`.
fn centered(img: &Image) -> Vec<f64> {
    img.values().iter().map(|v| v - 0.5).collect()
}

/// Same-padded 3x3 convolution, channels-last.
fn conv3x3(input: &[f64], h: usize, w: usize, cin: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            let acc = &mut out[(r * w + c) * cout..(r * w + c + 1) * cout];
            acc.copy_from_slice(bias);
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let x = &input[(rr * w + cc) * cin..(rr * w + cc + 1) * cin];
                    let wk = &weights[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (ci, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (a, wv) in acc.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse of [`conv3x3`]: accumulates weight and bias gradients and, when
/// `grad_in` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let cout = grad_b.len();
    for r in 0..h {
        for c in 0..w {
            let g = &grad_out[(r * w + c) * cout..(r * w + c + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (gb, gv) in grad_b.iter_mut().zip(g) {
                *gb += gv;
            }
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (rr * w + cc) * cin;
                    let k = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = input[base + ci];
                        let wrow = &weights[k + ci * cout..k + (ci + 1) * cout];
                        let gwrow = &mut grad_w[k + ci * cout..k + (ci + 1) * cout];
                        let mut back = 0.0;
                        for co in 0..cout {
                            gwrow[co] += xv * g[co];
                            back += wrow[co] * g[co];
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            gi[base + ci] += back;
                        }
                    }
                }
            }
        }
    }
}

impl ToyRegressor {
    /// He-uniform weights from `seed`, zero hidden biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; N_PARAMS];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        fill(W1..B1, 9 * IN_CHANNELS);
        fill(W2..B2, 9 * HIDDEN);
        fill(W3..B3, HIDDEN);
        params[B3] = INIT_OUTPUT_BIAS;
        Self { seed, params }
    }

    pub fn zeros() -> Self {
        Self {
            seed: 0,
            params: vec![0.0; N_PARAMS],
        }
    }

    pub fn from_params(seed: u64, params: Vec<f64>) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(Error::shape(
                format!("{N_PARAMS} parameters"),
                format!("{}", params.len()),
            ));
        }
        Ok(Self { seed, params })
    }

    fn check_input(img: &Image) -> Result<()> {
        if img.channels() != IN_CHANNELS {
            return Err(Error::shape(
                format!("{IN_CHANNELS} channels"),
                format!("{} channels", img.channels()),
            ));
        }
        Ok(())
    }

    fn activations(&self, img: &Image) -> Activations {
        let (h, w) = (img.height(), img.width());
        let p = &self.params;
        let x = centered(img);
        let z1 = conv3x3(&x, h, w, IN_CHANNELS, &p[W1..B1], &p[B1..W2]);
        let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = conv3x3(&h1, h, w, HIDDEN, &p[W2..B2], &p[B2..W3]);
        let h2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
        let z3 = h2
            .chunks(HIDDEN)
            .map(|hp| p[B3] + hp.iter().zip(&p[W3..B3]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Activations { z1, h1, z2, h2, z3 }
    }

    pub fn forward(&self, img: &Image) -> Result<DensityMap> {
        Self::check_input(img)?;
        let acts = self.activations(img);
        DensityMap::new(
            img.height(),
            img.width(),
            acts.z3.iter().map(|&z| softplus(z)).collect(),
        )
    }

    /// Gradient of `sum_i upstream_i * forward(img)_i` with respect to every parameter.
    pub fn backward(&self, img: &Image, upstream: &[f64]) -> Result<Vec<f64>> {
        Self::check_input(img)?;
        let (h, w) = (img.height(), img.width());
        if upstream.len() != h * w {
            return Err(Error::shape(
                format!("{} upstream values", h * w),
                format!("{}", upstream.len()),
            ));
        }
        let p = &self.params;
        let acts = self.activations(img);
        let mut grad = vec![0.0; N_PARAMS];

        let gz3: Vec<f64> = upstream.iter().zip(&acts.z3).map(|(u, &z)| u * sigmoid(z)).collect();
        let mut gz2 = vec![0.0; h * w * HIDDEN];
        for (i, &g) in gz3.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[B3] += g;
            let hp = &acts.h2[i * HIDDEN..(i + 1) * HIDDEN];
            let zp = &acts.z2[i * HIDDEN..(i + 1) * HIDDEN];
            for k in 0..HIDDEN {
                grad[W3 + k] += g * hp[k];
                if zp[k] > 0.0 {
                    gz2[i * HIDDEN + k] = g * p[W3 + k];
                }
            }
        }

        let mut gh1 = vec![0.0; h * w * HIDDEN];
        let (gw2, rest) = grad[W2..W3].split_at_mut(B2 - W2);
        conv3x3_backward(&acts.h1, h, w, HIDDEN, &p[W2..B2], &gz2, gw2, rest, Some(&mut gh1));
        let gz1: Vec<f64> = gh1
            .iter()
            .zip(&acts.z1)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        let (gw1, gb1) = grad[W1..W2].split_at_mut(B1 - W1);
        conv3x3_backward(&centered(img), h, w, IN_CHANNELS, &p[W1..B1], &gz1, gw1, gb1, None);
        Ok(grad)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("regressor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("model: {e}")))?;
        Self::from_params(model.seed, model.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_give_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ToyRegressor::zeros().forward(&random_image(&mut rng, 5, 7)).unwrap();
        assert_eq!((out.height(), out.width()), (5, 7));
        assert!(out.values().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn output_is_nonnegative_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 12, 9);
        let a = ToyRegressor::new(3).forward(&img).unwrap();
        let b = ToyRegressor::new(3).forward(&img).unwrap();
        assert!(a.values().iter().all(|&v| v >= 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_channels() {
        let gray = Image::zeros(4, 4, 1);
        assert!(ToyRegressor::new(0).forward(&gray).is_err());
        let rgb = Image::zeros(4, 4, 3);
        assert!(ToyRegressor::new(0).backward(&rgb, &[0.0; 15]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 6, 6);
        let grad = ToyRegressor::new(1).backward(&img, &[0.0; 36]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dead_rectifiers_block_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 6, 6);
        let mut model = ToyRegressor::new(1);
        for b in &mut model.params[B1..W2] {
            *b = -100.0;
        }
        for b in &mut model.params[B2..W3] {
            *b = -100.0;
        }
        let grad = model.backward(&img, &[1.0; 36]).unwrap();
        assert!(grad[..B3].iter().all(|&g| g == 0.0));
        assert!(grad[B3] > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 16, 16);
        let model = ToyRegressor::new(7);
        let upstream: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = model.backward(&img, &upstream).unwrap();
        let objective = |m: &ToyRegressor| -> f64 {
            m.forward(&img)
                .unwrap()
                .values()
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.params[k] += h;
            minus.params[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            num += (fd - g).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn json_round_trip() {
        let m = ToyRegressor::new(9);
        assert_eq!(ToyRegressor::from_json(&m.to_json()).unwrap(), m);
        assert!(ToyRegressor::from_json(r#"{"seed":1,"params":[1.0]}"#).is_err());
    }
}
