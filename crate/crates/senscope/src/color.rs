//! RGB <-> HSI conversion.
//!
//! Intensity is the RGB mean, saturation the normalized distance from the
//! gray axis, and hue the angle of the classic HSI transform. All three
//! channels live on the 8-bit scale: hue maps the circle `[0°, 360°)` onto
//! `[0, 256)` and wraps modulo 256, while saturation and intensity clamp to
//! `[0, 255]`.

use crate::error::{Error, Result};
use crate::tensor::{clamp_u8_range, ImageTensor};

/// Hue/saturation/intensity image with the same layout as [`ImageTensor`].
///
/// Channel 0 is hue on `[0, 256)` (circular), channel 1 saturation and
/// channel 2 intensity, both on `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HsiImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "HSI data length {} != {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        3
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Adds `delta` to the hue of every pixel, wrapping modulo 256.
    pub fn shift_hue(&mut self, y: usize, x: usize, delta: f64) {
        let i = self.idx(y, x, 0);
        self.data[i] = wrap_hue(self.data[i] as f64 + delta);
    }

    /// Adds `delta` to saturation (c = 1) or intensity (c = 2), clamping.
    pub fn shift_clamped(&mut self, y: usize, x: usize, c: usize, delta: f64) {
        debug_assert!(c == 1 || c == 2);
        let i = self.idx(y, x, c);
        self.data[i] = clamp_u8_range(self.data[i] as f64 + delta);
    }
}

/// Wraps a hue value onto `[0, 256)`.
#[inline]
pub fn wrap_hue(h: f64) -> f32 {
    // the f32 narrowing can round values just below 256 up to 256 exactly
    let w = h.rem_euclid(256.0) as f32;
    if w >= 256.0 {
        0.0
    } else {
        w
    }
}

/// Converts a 3-channel RGB image to HSI.
///
/// Achromatic pixels (R = G = B) have undefined hue; it is reported as 0.
pub fn rgb_to_hsi(img: &ImageTensor) -> Result<HsiImage> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(
            "HSI conversion requires a 3-channel image".into(),
        ));
    }
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let (h, s, i) = rgb_pixel_to_hsi(r, g, b);
        data.push(wrap_hue(h));
        data.push(clamp_u8_range(s));
        data.push(clamp_u8_range(i));
    }
    HsiImage::new(img.height(), img.width(), data)
}

/// Inverse of [`rgb_to_hsi`] up to rounding; output channels clamp to
/// `[0, 255]`.
pub fn hsi_to_rgb(img: &HsiImage) -> ImageTensor {
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let (h, s, i) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let (r, g, b) = hsi_pixel_to_rgb(h, s, i);
        data.push(clamp_u8_range(r));
        data.push(clamp_u8_range(g));
        data.push(clamp_u8_range(b));
    }
    ImageTensor::new(img.height(), img.width(), 3, data)
        .expect("clamped HSI->RGB data is always valid")
}

/// Scalar RGB -> (hue on [0,256), saturation on [0,255], intensity on [0,255]).
pub fn rgb_pixel_to_hsi(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let intensity = (r + g + b) / 3.0;
    let min = r.min(g).min(b);
    let saturation = if intensity > 0.0 { 255.0 * (1.0 - min / intensity) } else { 0.0 };
    let num = 0.5 * ((r - g) + (r - b));
    let den = ((r - g) * (r - g) + (r - b) * (g - b)).sqrt();
    let hue_deg = if den == 0.0 {
        0.0
    } else {
        let theta = (num / den).clamp(-1.0, 1.0).acos().to_degrees();
        if b <= g {
            theta
        } else {
            360.0 - theta
        }
    };
    (hue_deg * 256.0 / 360.0, saturation, intensity)
}

/// Scalar (hue, saturation, intensity) -> RGB via the sector formula.
pub fn hsi_pixel_to_rgb(h: f64, s: f64, i: f64) -> (f64, f64, f64) {
    let h_deg = (h.rem_euclid(256.0)) * 360.0 / 256.0;
    let s_frac = (s / 255.0).clamp(0.0, 1.0);
    // within a 120-degree sector: low = I(1-S), peak = I(1 + S cos h / cos(60 - h))
    let sector = |hd: f64| -> (f64, f64, f64) {
        let hr = hd.to_radians();
        let low = i * (1.0 - s_frac);
        let peak = i * (1.0 + s_frac * hr.cos() / (60f64.to_radians() - hr).cos());
        let rest = 3.0 * i - (low + peak);
        (low, peak, rest)
    };
    if h_deg < 120.0 {
        let (b, r, g) = sector(h_deg);
        (r, g, b)
    } else if h_deg < 240.0 {
        let (r, g, b) = sector(h_deg - 120.0);
        (r, g, b)
    } else {
        let (g, b, r) = sector(h_deg - 240.0);
        (r, g, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn achromatic_pixel() {
        let (h, s, i) = rgb_pixel_to_hsi(100.0, 100.0, 100.0);
        assert_eq!(h, 0.0);
        assert_eq!(s, 0.0);
        assert!((i - 100.0).abs() < 1e-12);
        let (r, g, b) = hsi_pixel_to_rgb(0.0, 0.0, 100.0);
        assert!((r - 100.0).abs() < 1e-9 && (g - 100.0).abs() < 1e-9 && (b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pure_red() {
        let (h, s, i) = rgb_pixel_to_hsi(255.0, 0.0, 0.0);
        assert!(h.abs() < 1e-9);
        assert!((s - 255.0).abs() < 1e-9);
        assert!((i - 85.0).abs() < 1e-9);
        let (r, g, b) = hsi_pixel_to_rgb(0.0, 255.0, 85.0);
        assert!((r - 255.0).abs() < 1e-6);
        assert!(g.abs() < 1e-6 && b.abs() < 1e-6);
    }

    #[test]
    fn reference_formula_pixel() {
        // independent straight-line evaluation of the HSI angle formula
        let (r, g, b) = (10.0_f64, 200.0, 30.0);
        let num = 0.5 * ((r - g) + (r - b));
        let den = ((r - g) * (r - g) + (r - b) * (g - b)).sqrt();
        let theta = (num / den).acos().to_degrees();
        let expected_h = (360.0 - theta) * 256.0 / 360.0; // b > g branch
        let expected_h = if b <= g { theta * 256.0 / 360.0 } else { expected_h };
        let expected_i = (r + g + b) / 3.0;
        let expected_s = 255.0 * (1.0 - r.min(g).min(b) / expected_i);

        let (h, s, i) = rgb_pixel_to_hsi(r, g, b);
        assert!((h - expected_h).abs() < 1e-9);
        assert!((s - expected_s).abs() < 1e-9);
        assert!((i - expected_i).abs() < 1e-9);

        let (r2, g2, b2) = hsi_pixel_to_rgb(h, s, i);
        assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
    }

    #[test]
    fn round_trip_random_pixels() {
        let mut rng = CounterRng::new(0xC0FFEE);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let r = rng.next_range(0.0, 255.0);
            let g = rng.next_range(0.0, 255.0);
            let b = rng.next_range(0.0, 255.0);
            if (r - g).abs() < 1e-6 && (g - b).abs() < 1e-6 {
                continue;
            }
            let (h, s, i) = rgb_pixel_to_hsi(r, g, b);
            let (r2, g2, b2) = hsi_pixel_to_rgb(h, s, i);
            worst = worst.max((r - r2).abs()).max((g - g2).abs()).max((b - b2).abs());
        }
        assert!(worst <= 1.0, "worst round-trip error {worst}");
    }

    #[test]
    fn image_round_trip() {
        let mut rng = CounterRng::new(9);
        let img = ImageTensor::from_fn(16, 16, 3, |_, _, _| rng.next_range(0.0, 255.0)).unwrap();
        let back = hsi_to_rgb(&rgb_to_hsi(&img).unwrap());
        assert!(img.max_abs_diff(&back) <= 1.0);
    }

    #[test]
    fn single_channel_rejected() {
        let img = ImageTensor::filled(4, 4, 1, 10.0).unwrap();
        assert!(rgb_to_hsi(&img).is_err());
    }

    #[test]
    fn wrap_hue_is_circular() {
        assert_eq!(wrap_hue(256.0), 0.0);
        assert_eq!(wrap_hue(-1.0), 255.0);
        assert_eq!(wrap_hue(300.0), 44.0);
        let w = wrap_hue(-1e-13);
        assert!((0.0..256.0).contains(&(w as f64)));
    }
}
