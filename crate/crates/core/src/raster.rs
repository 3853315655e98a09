//! RGB images and boolean masks with PNG input/output.

use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image {h}x{w} needs {expected} values, got {actual}")]
    BadLength {
        h: usize,
        w: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: image::ImageError,
    },
}

/// RGB image in `[0, 1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if data.len() != h * w * 3 {
            return Err(RasterError::BadLength {
                h,
                w,
                expected: h * w * 3,
                actual: data.len(),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Self { h, w, data }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// `[h * w, 3]` tensor view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.h * self.w, 3], self.data.clone()).expect("finite image")
    }

    pub fn from_tensor(h: usize, w: usize, t: &Tensor<f32>) -> Result<Self, RasterError> {
        Self::new(h, w, t.to_vec())
    }

    pub fn clamped(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Self, RasterError> {
        Self::new(h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Round-trips through 8-bit quantization, matching what a PNG reload would produce.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.h, self.w, &self.to_rgb8()).expect("same size")
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.to_rgb8())
            .expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| RasterError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    /// Loads an 8-bit RGB or RGBA PNG; alpha is composited onto white.
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rgba = img.to_rgba8();
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for p in rgba.pixels() {
            let a = p[3] as f32 / 255.0;
            for c in 0..3 {
                data.push((p[c] as f32 / 255.0) * a + (1.0 - a));
            }
        }
        Self::new(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![true; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of the true cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => {
                            (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1))
                        }
                    });
                }
            }
        }
        bb
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes = self
            .data
            .iter()
            .map(|&b| if b { 255u8 } else { 0 })
            .collect();
        let buf =
            image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes).expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| RasterError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let g = img.to_luma8();
        Ok(Self {
            h: g.height() as usize,
            w: g.width() as usize,
            data: g.pixels().map(|p| p[0] >= 128).collect(),
        })
    }
}
