//! Grayscale images and label maps, with PNG IO.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image, intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[1, height, width]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.data.clone())
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        let data = luma.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}

/// Writes a class-index map as an 8-bit PNG.
pub fn save_label_png(labels: &[usize], width: usize, height: usize, path: &Path) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::invalid("label map size mismatch"));
    }
    if labels.iter().any(|&l| l > 255) {
        return Err(Error::invalid("label PNGs hold at most 256 classes"));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| Luma([labels[y as usize * width + x as usize] as u8]));
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_label_png(path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Ok((luma.pixels().map(|p| p.0[0] as usize).collect(), w as usize, h as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = GrayImage::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.123]).unwrap();
        img.save_png(&p).unwrap();
        let back = GrayImage::load_png(&p).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        let lp = dir.path().join("l.png");
        save_label_png(&[0, 1, 2, 3, 2, 1], 3, 2, &lp).unwrap();
        assert_eq!(load_label_png(&lp).unwrap(), (vec![0, 1, 2, 3, 2, 1], 3, 2));
    }
}
