//! Feature acquisition: precomputed feature CSV files and a classic Gabor
//! competition-code extractor for grayscale palmprint ROI images.
//!
//! The extractor convolves the (resized, 128x128) image with a bank of
//! even-symmetric, zero-mean Gabor kernels, takes the per-pixel winner
//! orientation as the argmin response (palm lines are dark ridges), pools
//! winners over a grid of blocks by majority vote and emits one-hot block
//! encodings of length `grid^2 * n_theta`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::cancelable::FeatureVector;
use crate::error::{Error, Result};

/// Images are resized to this square size before filtering.
pub const RESIZE_TO: usize = 128;

/// Grayscale region-of-interest image, intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RoiImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        for (name, dim) in [("width", width), ("height", height)] {
            if !(32..=1024).contains(&dim) {
                return Err(Error::Dimension(format!(
                    "image {name} {dim} outside [32, 1024]"
                )));
            }
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 255.0)
        {
            return Err(Error::Validation("pixel intensity outside [0, 255]".into()));
        }
        Ok(RoiImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Parses a binary PGM (P5) image with maxval 255.
    pub fn from_pgm_bytes(data: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = |what: &str| -> Result<String> {
            // skip whitespace and '#' comment lines
            loop {
                while pos < data.len() && data[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < data.len() && data[pos] == b'#' {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Validation(format!("PGM: missing {what}")));
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };

        if token("magic")? != "P5" {
            return Err(Error::Validation("PGM: expected P5 magic".into()));
        }
        let width: usize = token("width")?
            .parse()
            .map_err(|_| Error::Validation("PGM: bad width".into()))?;
        let height: usize = token("height")?
            .parse()
            .map_err(|_| Error::Validation("PGM: bad height".into()))?;
        let maxval: usize = token("maxval")?
            .parse()
            .map_err(|_| Error::Validation("PGM: bad maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Validation(format!(
                "PGM: maxval {maxval} unsupported, expected 255"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height;
        if data.len() < pos + need {
            return Err(Error::Validation(format!(
                "PGM: raster truncated, need {need} bytes"
            )));
        }
        let pixels = data[pos..pos + need]
            .iter()
            .map(|&b| f64::from(b))
            .collect();
        RoiImage::new(width, height, pixels)
    }

    pub fn from_pgm_file(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        RoiImage::from_pgm_bytes(&data)
    }

    /// Bilinear resize with pixel-center mapping.
    fn resized(&self, width: usize, height: usize) -> RoiImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(width * height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.at(x0, y0) * (1.0 - wx) + self.at(x1, y0) * wx;
                let bot = self.at(x0, y1) * (1.0 - wx) + self.at(x1, y1) * wx;
                pixels.push(top * (1.0 - wy) + bot * wy);
            }
        }
        RoiImage {
            width,
            height,
            pixels,
        }
    }
}

/// Parameters of the even-symmetric Gabor filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborBank {
    pub n_theta: usize,
    pub kernel_size: usize,
    pub wavelength: f64,
    pub sigma: f64,
    pub aspect: f64,
}

impl Default for GaborBank {
    fn default() -> Self {
        GaborBank {
            n_theta: 6,
            kernel_size: 35,
            wavelength: 8.0,
            sigma: 4.0,
            aspect: 0.5,
        }
    }
}

impl GaborBank {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 2 {
            return Err(Error::Parameter(format!(
                "n_theta must be >= 2, got {}",
                self.n_theta
            )));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size < 3 {
            return Err(Error::Parameter(format!(
                "kernel_size must be odd and >= 3, got {}",
                self.kernel_size
            )));
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("sigma", self.sigma),
            ("aspect", self.aspect),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Zero-mean even Gabor kernel tuned to lines at orientation
    /// `theta_t = t * pi / n_theta`.
    fn kernel(&self, t: usize) -> Vec<f64> {
        let phi = t as f64 * std::f64::consts::PI / self.n_theta as f64;
        let half = (self.kernel_size / 2) as isize;
        let mut kern = Vec::with_capacity(self.kernel_size * self.kernel_size);
        // Carrier varies across the line direction (cos phi, sin phi).
        let (sin_p, cos_p) = phi.sin_cos();
        for dy in -half..=half {
            for dx in -half..=half {
                let x = dx as f64;
                let y = dy as f64;
                let across = -x * sin_p + y * cos_p;
                let along = x * cos_p + y * sin_p;
                let envelope = (-(across * across + self.aspect * self.aspect * along * along)
                    / (2.0 * self.sigma * self.sigma))
                    .exp();
                let carrier = (2.0 * std::f64::consts::PI * across / self.wavelength).cos();
                kern.push(envelope * carrier);
            }
        }
        let mean = kern.iter().sum::<f64>() / kern.len() as f64;
        for v in &mut kern {
            *v -= mean;
        }
        kern
    }
}

/// Extracts the competition-code feature: one-hot winner orientations pooled
/// over a `grid x grid` partition of the resized image. Output length is
/// `grid^2 * n_theta`.
pub fn competition_code(img: &RoiImage, bank: &GaborBank, grid: usize) -> Result<Vec<f64>> {
    bank.validate()?;
    if grid == 0 || !RESIZE_TO.is_multiple_of(grid) {
        return Err(Error::Parameter(format!(
            "grid {grid} must divide the working size {RESIZE_TO}"
        )));
    }
    let work = img.resized(RESIZE_TO, RESIZE_TO);
    let first = work.pixels[0];
    if work.pixels.iter().all(|&p| p == first) {
        return Err(Error::Degenerate(
            "constant image has no winner orientation".into(),
        ));
    }

    // Per-orientation responses, clamp padding at the borders.
    let size = RESIZE_TO;
    let half = (bank.kernel_size / 2) as isize;
    let responses: Vec<Vec<f64>> = (0..bank.n_theta)
        .into_par_iter()
        .map(|t| {
            let kern = bank.kernel(t);
            let mut resp = vec![0.0f64; size * size];
            for y in 0..size as isize {
                for x in 0..size as isize {
                    let mut acc = 0.0;
                    let mut ki = 0;
                    for dy in -half..=half {
                        let sy = (y + dy).clamp(0, size as isize - 1) as usize;
                        for dx in -half..=half {
                            let sx = (x + dx).clamp(0, size as isize - 1) as usize;
                            acc += work.pixels[sy * size + sx] * kern[ki];
                            ki += 1;
                        }
                    }
                    resp[y as usize * size + x as usize] = acc;
                }
            }
            resp
        })
        .collect();

    // Per-pixel winner: most negative response, ties to the lowest index.
    let mut winners = vec![0usize; size * size];
    for idx in 0..size * size {
        let mut best_t = 0usize;
        let mut best_v = responses[0][idx];
        for (t, resp) in responses.iter().enumerate().skip(1) {
            if resp[idx] < best_v {
                best_v = resp[idx];
                best_t = t;
            }
        }
        winners[idx] = best_t;
    }

    // Majority vote per block, ties to the lowest orientation index.
    let block = size / grid;
    let mut feature = vec![0.0f64; grid * grid * bank.n_theta];
    for by in 0..grid {
        for bx in 0..grid {
            let mut counts = vec![0usize; bank.n_theta];
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    counts[winners[y * size + x]] += 1;
                }
            }
            let winner = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(t, _)| t)
                .unwrap_or(0);
            feature[(by * grid + bx) * bank.n_theta + winner] = 1.0;
        }
    }
    Ok(feature)
}

/// Loads feature vectors from a CSV file with header `id,sample,v1,...,vM`.
///
/// Rows must agree on the dimension (and with `expected_m_f` when given);
/// parse failures name the offending 1-based line. An empty file yields an
/// empty list.
pub fn load_features(path: &Path, expected_m_f: Option<usize>) -> Result<Vec<FeatureVector>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&content, expected_m_f)
}

fn parse_features(content: &str, expected_m_f: Option<usize>) -> Result<Vec<FeatureVector>> {
    if content.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().expect("non-empty content");
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "sample" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header id,sample,v1,...  got {header:?}"),
        });
    }
    let m_f = cols.len() - 2;
    if let Some(expected) = expected_m_f {
        if m_f != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares {m_f} feature columns, expected {expected}"),
            });
        }
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m_f + 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("row has {} fields, expected {}", fields.len(), m_f + 2),
            });
        }
        let mut values = Vec::with_capacity(m_f);
        for (ci, cell) in fields[2..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("column v{} is not a number: {cell:?}", ci + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("column v{} is not finite", ci + 1),
                });
            }
            values.push(v);
        }
        let fv = FeatureVector::new(fields[0], fields[1], values).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(fv);
    }
    Ok(out)
}

/// Writes feature vectors in the CSV format read by [`load_features`].
/// Values are printed with shortest round-trip formatting, so save/load is
/// lossless and byte-deterministic.
pub fn write_features(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let mut out = String::new();
    let m_f = features.first().map(|f| f.dim()).unwrap_or(0);
    out.push_str("id,sample");
    for i in 1..=m_f {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for f in features {
        if f.dim() != m_f {
            return Err(Error::Dimension(format!(
                "feature {}/{} has dimension {}, expected {m_f}",
                f.subject_id,
                f.sample_id,
                f.dim()
            )));
        }
        out.push_str(&f.subject_id);
        out.push(',');
        out.push_str(&f.sample_id);
        for v in f.values() {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
