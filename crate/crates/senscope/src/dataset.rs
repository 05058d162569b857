//! Synthetic fine-grained dataset generator.
//!
//! Each class is a striped ellipse whose color angle (hue) and stripe
//! frequency are class-specific; backgrounds are low-frequency color clutter.
//! Colors are built as `gray + chroma * (cos(a) u + sin(a) v)` with `u, v` an
//! orthonormal basis of the plane perpendicular to the RGB gray axis, which
//! keeps every channel comfortably inside `[25, 230]` -- no pixel sits on a
//! clamping boundary, so additive noise acts linearly on fresh images.
//!
//! Generation is a pure function of `(num_classes, per_class, img_size,
//! seed)`; image `m` of class `c` draws from the counter stream keyed by
//! `mix(seed, c * per_class + m)`, so the split is deterministic and
//! train/test never share content.

use crate::error::{Error, Result};
use crate::rng::{mix, CounterRng};
use crate::tensor::ImageTensor;

/// Basis of the isoluminant color plane (unit vectors orthogonal to gray).
const COLOR_U: [f64; 3] = [0.816496580927726, -0.408248290463863, -0.408248290463863];
const COLOR_V: [f64; 3] = [0.0, 0.7071067811865476, -0.7071067811865476];

/// One split of labeled images plus per-image foreground masks.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    /// Per image, true where the foreground object lies (row-major pixels).
    pub masks: Vec<Vec<bool>>,
    /// "train" or "test".
    pub tag: String,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A generated dataset with its deterministic train/test split.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub num_classes: usize,
    pub img_size: usize,
}

/// Generates the synthetic dataset. Per class, the first 3/4 of the images
/// go to the train split and the remainder to test.
pub fn generate_synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    img_size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if per_class < 2 {
        return Err(Error::InvalidArgument("need at least two images per class".into()));
    }
    if img_size < 8 || img_size % 4 != 0 {
        return Err(Error::InvalidArgument(
            "image size must be at least 8 and divisible by 4".into(),
        ));
    }
    let n_train = (per_class * 3) / 4;
    let mut train = DatasetSplit {
        images: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
        tag: "train".into(),
    };
    let mut test = DatasetSplit {
        images: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
        tag: "test".into(),
    };
    for class in 0..num_classes {
        for m in 0..per_class {
            let key = mix(seed, (class * per_class + m) as u64);
            let (img, mask) = render_sample(class, num_classes, img_size, key);
            let split = if m < n_train { &mut train } else { &mut test };
            split.images.push(img);
            split.labels.push(class);
            split.masks.push(mask);
        }
    }
    Ok(SyntheticDataset { train, test, num_classes, img_size })
}

fn render_sample(
    class: usize,
    num_classes: usize,
    size: usize,
    key: u64,
) -> (ImageTensor, Vec<bool>) {
    let mut rng = CounterRng::new(key);
    let s = size as f64;

    // per-image draws, fixed order
    let bg_gray = rng.next_range(105.0, 150.0);
    let bg_amp = rng.next_range(8.0, 22.0);
    let bg_fx = rng.next_range(0.5, 1.5);
    let bg_fy = rng.next_range(0.5, 1.5);
    let bg_phase = rng.next_range(0.0, std::f64::consts::TAU);
    let bg_angle = rng.next_range(0.0, std::f64::consts::TAU);
    let bg_chroma = rng.next_range(5.0, 22.0);

    let cx = s / 2.0 + rng.next_range(-s / 8.0, s / 8.0);
    let cy = s / 2.0 + rng.next_range(-s / 8.0, s / 8.0);
    let semi_a = rng.next_range(0.30, 0.40) * s;
    let semi_b = rng.next_range(0.24, 0.34) * s;
    let theta = rng.next_range(0.0, std::f64::consts::PI);
    let light = rng.next_range(-12.0, 12.0);
    let fg_chroma = rng.next_range(50.0, 66.0);
    let hue_jitter = 0.06 * rng.next_gaussian();
    let stripe_phase = rng.next_range(0.0, std::f64::consts::TAU);

    let class_angle =
        std::f64::consts::TAU * (class as f64 + 0.5) / num_classes as f64 + hue_jitter;
    let stripe_freq = 2.0 + (class % 3) as f64 * 1.5;
    let (sin_t, cos_t) = theta.sin_cos();

    let mut data = Vec::with_capacity(size * size * 3);
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let gray_noise = rng.next_range(-4.0, 4.0);
            let angle_noise = rng.next_gaussian();

            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let u = px * cos_t + py * sin_t;
            let v = -px * sin_t + py * cos_t;
            let inside = (u / semi_a).powi(2) + (v / semi_b).powi(2) <= 1.0;

            let (gray, chroma, angle) = if inside {
                mask[y * size + x] = true;
                let stripes =
                    26.0 * (std::f64::consts::PI * stripe_freq * u / semi_a + stripe_phase).sin();
                (
                    128.0 + light + stripes + gray_noise,
                    fg_chroma,
                    class_angle + 0.04 * angle_noise,
                )
            } else {
                let wave = bg_amp
                    * (std::f64::consts::TAU * (bg_fx * x as f64 + bg_fy * y as f64) / s
                        + bg_phase)
                        .sin();
                (bg_gray + wave + gray_noise, bg_chroma, bg_angle)
            };

            let (sin_a, cos_a) = angle.sin_cos();
            for ch in 0..3 {
                let val = gray + chroma * (cos_a * COLOR_U[ch] + sin_a * COLOR_V[ch]);
                data.push(val.clamp(0.0, 255.0) as f32);
            }
        }
    }
    let img = ImageTensor::new(size, size, 3, data).expect("generator output is in range");
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let a = generate_synthetic_dataset(3, 8, 16, 42).unwrap();
        let b = generate_synthetic_dataset(3, 8, 16, 42).unwrap();
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            assert_eq!(x, y);
        }
        for (x, y) in a.test.images.iter().zip(&b.test.images) {
            assert_eq!(x, y);
        }
        assert_eq!(a.train.masks, b.train.masks);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic_dataset(3, 4, 16, 1).unwrap();
        let b = generate_synthetic_dataset(3, 4, 16, 2).unwrap();
        assert_ne!(a.train.images[0], b.train.images[0]);
    }

    #[test]
    fn labels_are_uniform_and_split_sizes_add_up() {
        let data = generate_synthetic_dataset(5, 12, 16, 7).unwrap();
        assert_eq!(data.train.len(), 5 * 9);
        assert_eq!(data.test.len(), 5 * 3);
        for class in 0..5 {
            assert_eq!(data.train.labels.iter().filter(|&&l| l == class).count(), 9);
            assert_eq!(data.test.labels.iter().filter(|&&l| l == class).count(), 3);
        }
    }

    #[test]
    fn pixels_stay_away_from_clamp_boundaries() {
        let data = generate_synthetic_dataset(4, 6, 32, 11).unwrap();
        for img in data.train.images.iter().chain(&data.test.images) {
            for &v in img.data() {
                assert!((25.0..=230.0).contains(&(v as f64)), "pixel {v} near boundary");
            }
        }
    }

    #[test]
    fn masks_mark_a_reasonable_foreground() {
        let data = generate_synthetic_dataset(3, 4, 32, 13).unwrap();
        for mask in &data.train.masks {
            let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            assert!((0.1..0.7).contains(&frac), "foreground fraction {frac}");
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(generate_synthetic_dataset(1, 8, 16, 0).is_err());
        assert!(generate_synthetic_dataset(3, 1, 16, 0).is_err());
        assert!(generate_synthetic_dataset(3, 8, 15, 0).is_err());
        assert!(generate_synthetic_dataset(3, 8, 4, 0).is_err());
    }
}
