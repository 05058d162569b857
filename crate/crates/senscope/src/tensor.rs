//! Core image container and geometry operations.
//!
//! Pixels are stored row-major as `(y, x, c)` with values on the 8-bit scale
//! `[0, 255]`, kept as `f32` so sub-integer noise survives between
//! operations. Derivative-valued grids share the same layout through
//! [`GradientMap`].

use crate::error::{Error, Result};

/// H×W×C image with values in `[0, 255]`, row-major `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from raw data, validating shape and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 255.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 255]"
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds per element from `(y, x, c)`; the result is clamped to `[0, 255]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp_u8_range(f(y, x, c)));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    /// Input vector on the raw `[0, 255]` scale, widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Mirror around the vertical axis.
    pub fn flip_lr(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let i = out.idx(y, x, c);
                    out.data[i] = self.get(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }

    /// Mirror around the horizontal axis.
    pub fn flip_ud(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let i = out.idx(y, x, c);
                    out.data[i] = self.get(self.height - 1 - y, x, c);
                }
            }
        }
        out
    }

    /// Rotation by 90 degrees clockwise; output is W×H.
    pub fn rotate90(&self) -> Self {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let mut out = Self {
            height: w,
            width: h,
            channels: ch,
            data: vec![0.0; self.data.len()],
        };
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    // (y, x) -> (x, h - 1 - y)
                    let i = out.idx(x, h - 1 - y, c);
                    out.data[i] = self.get(y, x, c);
                }
            }
        }
        out
    }

    /// Copies the sub-rectangle described by `bbox`.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.validate(self)?;
        let mut data = Vec::with_capacity(bbox.w * bbox.h * self.channels);
        for y in bbox.y0..bbox.y0 + bbox.h {
            for x in bbox.x0..bbox.x0 + bbox.w {
                for c in 0..self.channels {
                    data.push(self.get(y, x, c));
                }
            }
        }
        Self::new(bbox.h, bbox.w, self.channels, data)
    }

    /// Bilinear resampling with half-pixel-center alignment.
    ///
    /// Source coordinates are clamped to the image border, so resizing to the
    /// identical size reproduces the input exactly.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<Self> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::InvalidArgument("target size must be positive".into()));
        }
        let sy = self.height as f64 / new_h as f64;
        let sx = self.width as f64 / new_w as f64;
        let mut data = Vec::with_capacity(new_h * new_w * self.channels);
        for y in 0..new_h {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..new_w {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    data.push(clamp_u8_range(self.sample_bilinear_clamped(src_y, src_x, c)));
                }
            }
        }
        Self::new(new_h, new_w, self.channels, data)
    }

    /// Bilinear sample at real coordinates, clamping neighbours to the border.
    pub fn sample_bilinear_clamped(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        self.bilinear_from_floor(y, x, c, |i, n| i.clamp(0, n as i64 - 1) as usize)
    }

    /// Bilinear sample at real coordinates with reflecting (edge-repeating
    /// mirror) boundary handling; coordinates may fall outside the image.
    pub fn sample_bilinear_reflect(&self, y: f64, x: f64, c: usize) -> f64 {
        self.bilinear_from_floor(y, x, c, reflect_index)
    }

    fn bilinear_from_floor(
        &self,
        y: f64,
        x: f64,
        c: usize,
        map: impl Fn(i64, usize) -> usize,
    ) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let y0i = y0 as i64;
        let x0i = x0 as i64;
        let ya = map(y0i, self.height);
        let yb = map(y0i + 1, self.height);
        let xa = map(x0i, self.width);
        let xb = map(x0i + 1, self.width);
        let v00 = self.get(ya, xa, c) as f64;
        let v01 = self.get(ya, xb, c) as f64;
        let v10 = self.get(yb, xa, c) as f64;
        let v11 = self.get(yb, xb, c) as f64;
        v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx
    }

    /// Per-channel spatial derivatives: central differences in the interior,
    /// one-sided differences on the border. Output shape equals input shape.
    pub fn image_gradients(&self) -> Result<(GradientMap, GradientMap)> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::ImageTooSmall(format!(
                "gradients need at least 3x3, got {}x{}",
                self.height, self.width
            )));
        }
        let mut gx = GradientMap::zeros(self.height, self.width, self.channels);
        let mut gy = GradientMap::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let dx = if x == 0 {
                        self.get(y, 1, c) as f64 - self.get(y, 0, c) as f64
                    } else if x == self.width - 1 {
                        self.get(y, x, c) as f64 - self.get(y, x - 1, c) as f64
                    } else {
                        (self.get(y, x + 1, c) as f64 - self.get(y, x - 1, c) as f64) / 2.0
                    };
                    let dy = if y == 0 {
                        self.get(1, x, c) as f64 - self.get(0, x, c) as f64
                    } else if y == self.height - 1 {
                        self.get(y, x, c) as f64 - self.get(y - 1, x, c) as f64
                    } else {
                        (self.get(y + 1, x, c) as f64 - self.get(y - 1, x, c) as f64) / 2.0
                    };
                    let i = self.idx(y, x, c);
                    gx.data[i] = dx;
                    gy.data[i] = dy;
                }
            }
        }
        Ok((gx, gy))
    }

    /// Maximum absolute per-element difference to another image.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max)
    }
}

/// Clamp to the valid pixel range and narrow to f32.
#[inline]
pub fn clamp_u8_range(v: f64) -> f32 {
    v.clamp(0.0, 255.0) as f32
}

/// Mirror an index into `[0, n)` with the edge sample repeated
/// (`-1 -> 0`, `n -> n-1`, `-2 -> 1`, ...).
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as i64;
    let mut i = i;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Axis-aligned rectangle inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument("bounding box must have positive size".into()));
        }
        Ok(Self { x0, y0, w, h })
    }

    pub fn validate(&self, img: &ImageTensor) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidArgument("bounding box must have positive size".into()));
        }
        if self.x0 + self.w > img.width() || self.y0 + self.h > img.height() {
            return Err(Error::InvalidArgument(format!(
                "bounding box {}+{}x{}+{} exceeds image {}x{}",
                self.x0,
                self.w,
                self.y0,
                self.h,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Boolean mask over the image, true inside the box.
    pub fn to_mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut mask = vec![false; height * width];
        for y in self.y0..(self.y0 + self.h).min(height) {
            for x in self.x0..(self.x0 + self.w).min(width) {
                mask[y * width + x] = true;
            }
        }
        mask
    }
}

/// Per-element derivative grid with the same `(y, x, c)` layout as
/// [`ImageTensor`]. Holds `d(output)/d(input element)` values for the scalar
/// output selected during the backward pass, or spatial image derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    height: usize,
    width: usize,
    channels: usize,
    pub data: Vec<f64>,
}

impl GradientMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("gradient contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
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

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn same_shape_as(&self, img: &ImageTensor) -> bool {
        self.height == img.height() && self.width == img.width() && self.channels == img.channels()
    }

    /// Squared Euclidean norm of the flattened map.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize, a: f64, b: f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, 1, |y, x, _| a * x as f64 + b * y as f64).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes_and_values() {
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![256.0]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![255.0]).is_ok());
    }

    #[test]
    fn flips_are_involutions() {
        let img = ImageTensor::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 3) % 256) as f64)
            .unwrap();
        assert_eq!(img.flip_lr().flip_lr(), img);
        assert_eq!(img.flip_ud().flip_ud(), img);
    }

    #[test]
    fn rotate90_four_times_is_identity() {
        let img = ImageTensor::from_fn(4, 6, 3, |y, x, c| ((y * 13 + x * 5 + c) % 256) as f64)
            .unwrap();
        let r = img.rotate90();
        assert_eq!(r.height(), img.width());
        assert_eq!(r.width(), img.height());
        let back = r.rotate90().rotate90().rotate90();
        assert_eq!(back, img);
    }

    #[test]
    fn flip_ud_equals_two_rotations_then_flip_lr() {
        let img = ImageTensor::from_fn(6, 6, 3, |y, x, c| ((y * 17 + x * 3 + c * 11) % 256) as f64)
            .unwrap();
        let via_rot = img.rotate90().rotate90().flip_lr();
        assert_eq!(via_rot, img.flip_ud());
    }

    #[test]
    fn gradients_flat_field_are_zero() {
        let img = ImageTensor::filled(5, 5, 3, 77.0).unwrap();
        let (gx, gy) = img.image_gradients().unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        assert!(gy.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_of_linear_ramp_are_exact() {
        let (a, b) = (1.5, -0.75);
        let img = ImageTensor::from_fn(8, 8, 1, |y, x, _| 100.0 + a * x as f64 + b * y as f64)
            .unwrap();
        let (gx, gy) = img.image_gradients().unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((gx.get(y, x, 0) - a).abs() < 1e-5);
                assert!((gy.get(y, x, 0) - b).abs() < 1e-5);
            }
        }
        // one-sided borders are exact for a linear field too
        assert!((gx.get(0, 0, 0) - a).abs() < 1e-5);
        assert!((gy.get(7, 3, 0) - b).abs() < 1e-5);
    }

    #[test]
    fn gradients_match_bruteforce_shifted_differences() {
        let img = ImageTensor::from_fn(8, 8, 1, |y, x, _| {
            ((y * 97 + x * 41 + y * x * 13) % 253) as f64
        })
        .unwrap();
        let (gx, gy) = img.image_gradients().unwrap();
        // independent route: build shifted copies and subtract
        for y in 1..7 {
            for x in 1..7 {
                let ex = (img.get(y, x + 1, 0) as f64 - img.get(y, x - 1, 0) as f64) / 2.0;
                let ey = (img.get(y + 1, x, 0) as f64 - img.get(y - 1, x, 0) as f64) / 2.0;
                assert_eq!(gx.get(y, x, 0), ex);
                assert_eq!(gy.get(y, x, 0), ey);
            }
        }
    }

    #[test]
    fn gradients_reject_tiny_images() {
        let img = ImageTensor::filled(2, 5, 1, 0.0).unwrap();
        assert!(img.image_gradients().is_err());
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = ImageTensor::from_fn(9, 5, 3, |y, x, c| ((y * 29 + x * 3 + c) % 256) as f64)
            .unwrap();
        assert_eq!(img.resize_bilinear(9, 5).unwrap(), img);
    }

    #[test]
    fn resize_checkerboard_to_single_pixel_averages() {
        let img =
            ImageTensor::new(2, 2, 1, vec![0.0, 255.0, 255.0, 0.0]).unwrap();
        let out = img.resize_bilinear(1, 1).unwrap();
        assert!((out.get(0, 0, 0) - 127.5).abs() < 1e-5);
    }

    #[test]
    fn crop_full_image_is_identity() {
        let img = ramp_image(6, 4, 2.0, 3.0);
        let bbox = BoundingBox::new(0, 0, 4, 6).unwrap();
        assert_eq!(img.crop(&bbox).unwrap(), img);
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let img = ramp_image(4, 4, 1.0, 1.0);
        let bbox = BoundingBox::new(2, 2, 3, 1).unwrap();
        assert!(img.crop(&bbox).is_err());
    }

    #[test]
    fn crop_extracts_expected_window() {
        let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64).unwrap();
        let sub = img.crop(&BoundingBox::new(1, 2, 2, 2).unwrap()).unwrap();
        assert_eq!(sub.data(), &[9.0, 10.0, 13.0, 14.0]);
    }

    #[test]
    fn reflect_index_mirrors_with_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
    }
}
