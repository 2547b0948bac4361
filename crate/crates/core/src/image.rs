//! Interleaved RGB image buffers.

use ehdr_tensor::{Scalar, Tensor};

use crate::error::{EhdrError, Result};

/// ITU-R BT.709 luma weights.
pub const LUMA_709: [f32; 3] = [0.2126, 0.7152, 0.0722];

/// Linear-radiance RGB image, `height x width x 3`, all values finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

/// Gamma-encoded bracket in `[0, 1]` with its exposure metadata.
///
/// `exposure_time` is relative to the shortest bracket of the stack (which has 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub exposure_time: f32,
    pub fstop: i32,
    pub timestamp_us: u64,
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height * 3 != len {
        return Err(EhdrError::input(format!(
            "{width}x{height} RGB image needs {} values, got {len}",
            width * height * 3
        )));
    }
    Ok(())
}

fn to_tensor<T: Scalar>(width: usize, height: usize, pixels: &[f32]) -> Tensor<T> {
    let plane = width * height;
    Tensor::from_fn(&[1, 3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        T::of(pixels[p * 3 + c] as f64)
    })
}

fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f32>)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(EhdrError::input(format!(
            "expected a 1x3xHxW tensor, got {:?}",
            t.shape()
        )));
    }
    let plane = h * w;
    let mut pixels = vec![0.0; 3 * plane];
    for (i, v) in t.data().iter().enumerate() {
        pixels[(i % plane) * 3 + i / plane] = v.as_f64() as f32;
    }
    Ok((w, h, pixels))
}

impl HdrImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        check_len(width, height, pixels.len())?;
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(EhdrError::input(format!(
                "HDR values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn luminance(&self, x: usize, y: usize) -> f32 {
        (0..3).map(|c| LUMA_709[c] * self.get(x, y, c)).sum()
    }

    pub fn luminance_plane(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| LUMA_709[0] * p[0] + LUMA_709[1] * p[1] + LUMA_709[2] * p[2])
            .collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `1 x 3 x H x W` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        to_tensor(self.width, self.height, &self.pixels)
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (w, h, pixels) = from_tensor(t)?;
        Self::new(w, h, pixels)
    }

    /// Drops `border` pixels from every side.
    pub fn crop_border(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(EhdrError::input(format!(
                "border {border} leaves nothing of a {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in border..border + h {
            let row = (y * self.width + border) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

impl LdrImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        exposure_time: f32,
        fstop: i32,
    ) -> Result<Self> {
        check_len(width, height, pixels.len())?;
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EhdrError::input("LDR values must lie in [0, 1]"));
        }
        if !(exposure_time > 0.0 && exposure_time.is_finite()) {
            return Err(EhdrError::input(format!(
                "exposure time must be positive, got {exposure_time}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            exposure_time,
            fstop,
            timestamp_us: 0,
        })
    }

    pub fn with_timestamp(mut self, t_us: u64) -> Self {
        self.timestamp_us = t_us;
        self
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        to_tensor(self.width, self.height, &self.pixels)
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}
