//! Planar float images in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// A channel-major (`C×H×W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copies the `h×w` window at `(y, x)` into a new image.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::DegenerateInput(format!(
                "crop {h}x{w} at ({y},{x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, yy, xx| {
            self.get(c, y + yy, x + xx)
        }))
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Image::from_fn(self.channels, height, width, |c, y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            self.sample_bilinear(c, fy, fx, 0.0)
        })
    }

    /// Bilinear sample at fractional coordinates; out-of-bounds taps read `fill`.
    pub fn sample_bilinear(&self, c: usize, fy: f32, fx: f32, fill: f32) -> f32 {
        let y0 = fy.floor();
        let x0 = fx.floor();
        let dy = fy - y0;
        let dx = fx - x0;
        let tap = |yy: f32, xx: f32| -> f32 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f32 || xx >= self.width as f32 {
                fill
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let mut acc = 0.0;
        let weights = [
            (y0, x0, (1.0 - dy) * (1.0 - dx)),
            (y0, x0 + 1.0, (1.0 - dy) * dx),
            (y0 + 1.0, x0, dy * (1.0 - dx)),
            (y0 + 1.0, x0 + 1.0, dy * dx),
        ];
        for (yy, xx, w) in weights {
            if w != 0.0 {
                acc += w * tap(yy, xx);
            }
        }
        acc
    }

    /// Loads an image file as 3-channel RGB.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image::from_fn(3, h, w, |c, y, x| {
            f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        }))
    }

    /// Writes an 8-bit PNG. Grayscale for 1 channel, RGB for 3.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([quant(self.get(0, y as usize, x as usize))])
            })
            .save(path),
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let (y, x) = (y as usize, x as usize);
                image::Rgb([
                    quant(self.get(0, y, x)),
                    quant(self.get(1, y, x)),
                    quant(self.get(2, y, x)),
                ])
            })
            .save(path),
            n => {
                return Err(Error::Data(format!(
                    "cannot encode {n}-channel image as PNG"
                )))
            }
        };
        res.map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Rounds values to the 8-bit grid, the exact content a PNG round trip preserves.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}
