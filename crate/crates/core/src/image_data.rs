//! Owned image and segmentation-mask buffers plus the raster operations the
//! dataset pipeline needs (crop, flip, resize, jitter, png io).

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An RGB image stored channel-major (`[3, h, w]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

/// A binary segmentation mask, `[h, w]`, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    data: Vec<u8>,
    height: usize,
    width: usize,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "image dims must be >= 1, got {height}x{width}"
            )));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                Self::CHANNELS * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation(
                "image values must be finite and within [0, 1]",
            ));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    /// A `h`x`w` image filled with a constant value.
    pub fn constant(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![value; Self::CHANNELS * height * width], height, width)
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// View as a `[3, h, w]` candle tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (Self::CHANNELS, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let data = data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(data, h, w)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::shape(format!(
                "crop {top},{left} {h}x{w} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = vec![0.0; Self::CHANNELS * h * w];
        for c in 0..Self::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    out[(c * h + y) * w + x] = self.get(c, top + y, left + x);
                }
            }
        }
        Self::new(out, h, w)
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinear resize to `h`x`w`.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("resize target must be >= 1"));
        }
        let mut out = vec![0.0f32; Self::CHANNELS * h * w];
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        for y in 0..h {
            // sample at pixel centers
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..Self::CHANNELS {
                    let v = self.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.get(c, y0, x1) * (1.0 - wy) * wx
                        + self.get(c, y1, x0) * wy * (1.0 - wx)
                        + self.get(c, y1, x1) * wy * wx;
                    out[(c * h + y) * w + x] = v;
                }
            }
        }
        Self::new(out, h, w)
    }

    /// Brightness/saturation jitter; factors near 1.0 keep the change mild.
    pub fn color_jitter(&self, brightness: f32, saturation: f32) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let r = self.get(0, y, x);
                let g = self.get(1, y, x);
                let b = self.get(2, y, x);
                let gray = 0.299 * r + 0.587 * g + 0.114 * b;
                for (c, v) in [r, g, b].into_iter().enumerate() {
                    let sat = gray + (v - gray) * saturation;
                    out.set(c, y, x, (sat * brightness).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(0, y, x) * 255.0).round() as u8,
                    (self.get(1, y, x) * 255.0).round() as u8,
                    (self.get(2, y, x) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; Self::CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(data, h, w)
    }
}

impl SegMask {
    pub fn new(data: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::validation("mask values must be 0 or 1"));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0; height * width],
            height,
            width,
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: vec![1; height * width],
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    /// Bounding box of nonzero pixels as `(top, left, height, width)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut min_y = usize::MAX;
        let mut min_x = usize::MAX;
        let mut max_y = 0usize;
        let mut max_x = 0usize;
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) != 0 {
                    any = true;
                    min_y = min_y.min(y);
                    min_x = min_x.min(x);
                    max_y = max_y.max(y);
                    max_x = max_x.max(x);
                }
            }
        }
        any.then(|| (min_y, min_x, max_y - min_y + 1, max_x - min_x + 1))
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::shape("mask crop exceeds bounds"));
        }
        let mut out = SegMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(top + y, left + x));
            }
        }
        Ok(out)
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Nearest-neighbour resize; keeps the mask binary.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("resize target must be >= 1"));
        }
        let mut out = SegMask::zeros(h, w);
        for y in 0..h {
            let sy = ((y as f32 + 0.5) * self.height as f32 / h as f32) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..w {
                let sx = ((x as f32 + 0.5) * self.width as f32 / w as f32) as usize;
                let sx = sx.min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                buf.put_pixel(x as u32, y as u32, image::Luma([self.get(y, x) * 255]));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0u8; h * w];
        for (x, y, px) in img.enumerate_pixels() {
            data[y as usize * w + x as usize] = u8::from(px.0[0] >= 128);
        }
        Self::new(data, h, w)
    }
}
