//! RGB images with channels in `[0, 1]`, stored planar as `[3, h, w]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::Window;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("image must be [3, h, w], got {s:?}")));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { pixels })
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), h * w));
        }
        Image {
            pixels: Tensor::from_vec(&[3, h, w], data).expect("image shape"),
        }
    }

    /// Builds an image from values that may stray slightly outside `[0, 1]`.
    pub fn from_clamped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.pixels.data_mut()[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            pixels: self.pixels.map(|v| (v * 255.0).round() / 255.0),
        }
    }

    pub fn crop(&self, win: Window) -> Image {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(3 * win.width() * win.height());
        for c in 0..3 {
            for y in win.y0..win.y1 {
                let row = (c * h + y) * w;
                data.extend_from_slice(&self.pixels.data()[row + win.x0..row + win.x1]);
            }
        }
        Image {
            pixels: Tensor::from_vec(&[3, win.height(), win.width()], data).expect("crop shape"),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        Image {
            pixels: Tensor::from_vec(&[3, h, w], data).expect("image shape"),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| {
            Error::parse(
                path.display().to_string(),
                format!("cannot decode image: {e}"),
            )
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Writes a single-channel map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(values[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
