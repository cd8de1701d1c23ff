//! Single-channel float images with values nominally in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "pixel buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Snap every pixel to the nearest 16-bit level, clamping to `[0, 1]`.
    /// Quantized images survive a PNG round trip exactly.
    pub fn quantize16(&mut self) {
        for v in &mut self.data {
            *v = f32::from(to_u16(*v)) / 65535.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.data.iter().map(|&v| to_u16(v)).collect();
        let buf = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            raw,
        )
        .expect("buffer length matches dimensions");
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u16> = self.data.iter().map(|&v| to_u16(v)).collect();
        let buf = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            raw,
        )
        .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ::image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let luma = img.into_luma16();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect();
        Ok(GrayImage {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}
