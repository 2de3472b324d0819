use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            out.extend(row.iter().rev());
        }
        Self {
            pixels: out,
            ..*self
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sample = |out: usize, src: usize, i: usize| -> (usize, usize, f32) {
            let x = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (x - lo as f64) as f32)
        };
        let cols: Vec<_> = (0..width).map(|j| sample(width, self.width, j)).collect();
        let mut pixels = Vec::with_capacity(width * height);
        for i in 0..height {
            let (r0, r1, fy) = sample(height, self.height, i);
            for &(c0, c1, fx) in &cols {
                let top = self.at(r0, c0) * (1.0 - fx) + self.at(r0, c1) * fx;
                let bottom = self.at(r1, c0) * (1.0 - fx) + self.at(r1, c1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
        Self { width, height, pixels }
    }

    /// `[height × width × 1]`
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.height, self.width, 1],
            self.pixels.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(load_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(load_err(path, format!("unsupported PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| load_err(path, format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(load_err(path, format!("unsupported PGM maxval {maxval}")));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| load_err(path, "truncated PGM raster"))?;
    GrayImage::from_bytes(w, h, raster)
}

/// 8-bit grayscale PNG without alpha.
pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| load_err(path, e.to_string()))?;
    writer
        .write_image_data(&img.to_bytes())
        .map_err(|e| load_err(path, e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| load_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(load_err(
            path,
            format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut raster = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        raster.extend_from_slice(&row[..w]);
    }
    GrayImage::from_bytes(w, h, &raster)
}

/// Reads a `.pgm` or `.png` file.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(load_err(path, "file not found"));
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(load_err(path, "unsupported image format, expected .pgm or .png")),
    }
}
