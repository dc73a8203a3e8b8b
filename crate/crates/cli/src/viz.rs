//! Heatmaps and correspondence pictures.

use gst_core::kernel::TransportKernel;
use gst_core::{DensityMap, Image};

/// Piecewise-linear black -> red -> yellow -> white for `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let s = 3.0 * t;
    if s <= 1.0 {
        [s, 0.0, 0.0]
    } else if s <= 2.0 {
        [1.0, s - 1.0, 0.0]
    } else {
        [1.0, 1.0, s - 2.0]
    }
}

/// Density scaled by its maximum and passed through [`colormap`].
pub fn density_heatmap(d: &DensityMap) -> Image {
    let max = d.values().iter().copied().fold(0.0, f64::max);
    let values = d
        .values()
        .iter()
        .flat_map(|&v| colormap(if max > 0.0 { v / max } else { 0.0 }))
        .collect();
    Image::new(d.height(), d.width(), 3, values).expect("three channels per pixel")
}

/// Distinct fully saturated color for annotation `n >= 1` (golden-angle hues).
pub fn target_color(n: usize) -> [f64; 3] {
    let hue = (n as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Each pixel takes the color of its most likely target, scaled by that
/// weight; pixels whose most likely target is the background stay black.
pub fn correspondence_image(kernel: &TransportKernel, height: usize, width: usize) -> Image {
    let values = (0..kernel.n_pixels())
        .flat_map(|i| {
            let (n, w) = kernel.row_argmax(i);
            if n == 0 {
                [0.0; 3]
            } else {
                target_color(n).map(|c| c * w)
            }
        })
        .collect();
    Image::new(height, width, 3, values).expect("kernel rows match the image")
}
