//! Images, point annotations and density maps, plus their file formats.
//!
//! Coordinates are `(row, col)` in continuous pixel units. Pixel `(r, c)`
//! covers `[r, r+1) x [c, c+1)` and its center sits at `(r + 0.5, c + 0.5)`;
//! every distance and Gaussian evaluation in the crate uses pixel centers.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous coordinate of the center of pixel `(row, col)`.
#[inline]
pub fn pixel_center(row: usize, col: usize) -> [f64; 2] {
    [row as f64 + 0.5, col as f64 + 0.5]
}

/// Row-major, channel-interleaved image with samples nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} samples"),
                format!("{} samples", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image samples must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            values: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Samples of pixel `(row, col)`, one per channel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Samples at the pixel containing a continuous coordinate, clamped to the image.
    pub fn sample_at(&self, point: [f64; 2]) -> &[f64] {
        let row = (point[0].floor().max(0.0) as usize).min(self.height - 1);
        let col = (point[1].floor().max(0.0) as usize).min(self.width - 1);
        self.pixel(row, col)
    }

    fn check_same_shape(&self, other: &Image) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::shape(
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{}x{}x{}", other.height, other.width, other.channels),
            ));
        }
        Ok(())
    }

    /// Maximum absolute per-sample difference.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Point annotations inside an image of known size.
///
/// The extended target set used by the transport kernel puts the virtual
/// background object at index 0 and the real annotations at `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    points: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    points: Vec<[f64; 2]>,
}

impl AnnotationSet {
    pub fn new(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        for &[row, col] in &points {
            let inside = row.is_finite()
                && col.is_finite()
                && (0.0..height as f64).contains(&row)
                && (0.0..width as f64).contains(&col);
            if !inside {
                return Err(Error::PointOutOfBounds {
                    row,
                    col,
                    height,
                    width,
                });
            }
        }
        Ok(Self { points, height, width })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            points: Vec::new(),
            height,
            width,
        }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Number of real annotations `N`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Size of the extended target set, `N + 1`.
    pub fn n_targets(&self) -> usize {
        self.points.len() + 1
    }

    /// Annotation with extended index `n >= 1`.
    pub fn target_point(&self, n: usize) -> Option<[f64; 2]> {
        n.checked_sub(1).and_then(|i| self.points.get(i).copied())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&AnnotationFile {
            points: self.points.clone(),
        })
        .expect("annotation serialization cannot fail")
    }

    pub fn from_json(text: &str, height: usize, width: usize) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(file.points, height, width)
    }
}

/// Non-negative per-pixel density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} values"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "density values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Total mass (the predicted count).
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Ground-truth mass over the extended target set: 0 on the background, 1 per annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTarget {
    values: Vec<f64>,
}

impl AnnotationTarget {
    pub fn for_count(n_annotations: usize) -> Self {
        let mut values = vec![1.0; n_annotations + 1];
        values[0] = 0.0;
        Self { values }
    }

    pub fn from_annotations(ann: &AnnotationSet) -> Self {
        Self::for_count(ann.len())
    }

    /// Arbitrary non-negative per-target masses, background first.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "target masses must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total ground-truth mass, `N`.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Normalize a density map into a probability vector over pixels.
pub fn normalize(d: &DensityMap) -> Result<Vec<f64>> {
    let total = d.total();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(d.values.iter().map(|v| v / total).collect())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decode PPM (P5/P6) or PNG bytes, sniffing the format from the magic.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::MalformedImage("unrecognized image format".into()))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedImage("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedImage("expected a number in header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage("header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 {
        return Err(Error::MalformedImage("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedBitDepth(16));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedImage("missing separator after header".into()));
    }
    pos += 1;
    let n = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::MalformedImage("unexpected end of pixel data".into()));
    }
    let scale = maxval as f64;
    let values = payload[..n].iter().map(|&b| b as f64 / scale).collect();
    Image::new(height, width, channels, values)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let png_err = |e: png::DecodingError| Error::MalformedImage(e.to_string());
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(info.bit_depth as u32));
    }
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::MalformedImage("palette was not expanded".into())),
    };
    let (height, width) = (info.height as usize, info.width as usize);
    let mut values = Vec::with_capacity(height * width * keep);
    for row in buf.chunks_exact(info.line_size).take(height) {
        for px in row[..width * src_channels].chunks_exact(src_channels) {
            values.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(height, width, keep, values)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save as PNG when the extension is `.png`, otherwise as binary PPM/PGM.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_pnm(img) };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.values.iter().map(|&v| quantize(v)));
    out
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        encoder.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| Error::MalformedImage(e.to_string());
        let mut writer = encoder.write_header().map_err(encode_err)?;
        let data: Vec<u8> = img.values.iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&data).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>, height: usize, width: usize) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationSet::from_json(&text, height, width)
}

pub fn save_annotations(ann: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(ann.to_json().as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(bytes: &[u8], name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn white_p6() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let (_d, path) = write_tmp(&bytes, "w.ppm");
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn black_p5_with_comment() {
        let (_d, path) = write_tmp(b"P5 # one pixel\n1 1\n255\n\x00", "b.pgm");
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.values(), &[0.0]);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 11]);
        let err = decode_image(&bytes).unwrap_err();
        assert!(err.to_string().contains("unexpected end of pixel data"), "{err}");
    }

    #[test]
    fn sixteen_bit_ppm_rejected() {
        let err = decode_image(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::UnsupportedBitDepth(_)));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_image("/nonexistent/x.ppm").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ppm"));
    }

    #[test]
    fn half_gray_quantizes_within_bound() {
        let img = Image::filled(4, 5, 3, 0.5);
        for name in ["h.ppm", "h.png"] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert!(back.values().iter().all(|&v| v == 127.0 / 255.0 || v == 128.0 / 255.0));
            assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn zero_image_round_trip_exact() {
        let img = Image::zeros(3, 7, 1);
        let dir = tempfile::tempdir().unwrap();
        for name in ["z.pgm", "z.png"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn random_rgb_png_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let values = (0..128 * 128 * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(128, 128, 3, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn annotation_files() {
        let empty = AnnotationSet::from_json(r#"{"points": []}"#, 64, 64).unwrap();
        assert_eq!(empty.len(), 0);
        let one = AnnotationSet::from_json(r#"{"points": [[10.5, 20.0]]}"#, 64, 64).unwrap();
        assert_eq!(one.points(), &[[10.5, 20.0]]);
        assert_eq!(one.target_point(1), Some([10.5, 20.0]));
        assert_eq!(one.target_point(0), None);
        let err = AnnotationSet::from_json(r#"{"points": [[70, 0]]}"#, 64, 64).unwrap_err();
        assert!(err.to_string().contains("point out of bounds"));
        assert!(matches!(
            AnnotationSet::from_json("{\"pts\": []}", 8, 8),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let ones = DensityMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(normalize(&ones).unwrap(), vec![0.25; 4]);
        let two = DensityMap::new(1, 2, vec![3.0, 1.0]).unwrap();
        assert_eq!(normalize(&two).unwrap(), vec![0.75, 0.25]);
        let zero = DensityMap::zeros(2, 2);
        assert_eq!(normalize(&zero).unwrap_err().to_string(), "zero mass");
    }

    #[test]
    fn target_has_zero_background() {
        let t = AnnotationTarget::for_count(3);
        assert_eq!(t.values(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.total(), 3.0);
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(
            values in prop::collection::vec(0.0f64..10.0, 1..64),
            scale in 1e-3f64..1e3,
        ) {
            prop_assume!(values.iter().sum::<f64>() > 1e-6);
            let d = DensityMap::new(1, values.len(), values).unwrap();
            let p = normalize(&d).unwrap();
            let q = normalize(&d.scaled(scale).unwrap()).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
