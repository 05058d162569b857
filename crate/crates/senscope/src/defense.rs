//! Robustness interventions: test-time denoising pre-filters and the
//! comparison harness against a dropout-trained model.
//!
//! Pre-filters run on the already-degraded test image, before the forward
//! pass. Both filters preserve shape and the `[0, 255]` range and use
//! reflecting (edge-repeating mirror) boundary handling.

use rayon::prelude::*;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::perturb::{apply_perturbation, PerturbationSpec, Seed};
use crate::tensor::{reflect_index, ImageTensor};

/// Per-channel convolution with a sampled, renormalized Gaussian kernel.
///
/// The kernel weight at integer offset (dy, dx) is
/// `exp(-(dx^2 + dy^2) / (2 sigma^2))`, normalized so the weights sum to 1;
/// constant images pass through unchanged and the image mean is preserved.
pub fn gaussian_prefilter(img: &ImageTensor, kernel_size: usize, sigma: f64) -> Result<ImageTensor> {
    if kernel_size % 2 == 0 || kernel_size < 3 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and at least 3, got {kernel_size}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument("filter sigma must be positive".into()));
    }
    let kernel = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as i64;
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let mut acc = 0.0;
        for (ki, row) in kernel.iter().enumerate() {
            let yy = reflect_index(y as i64 + ki as i64 - r, img.height());
            for (kj, &w) in row.iter().enumerate() {
                let xx = reflect_index(x as i64 + kj as i64 - r, img.width());
                acc += w * img.get(yy, xx, c) as f64;
            }
        }
        acc
    })
}

/// Sampled 2D Gaussian kernel, normalized to sum exactly 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as i64;
    let mut kernel = vec![vec![0.0; size]; size];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        let dy = (i as i64 - r) as f64;
        for (j, w) in row.iter_mut().enumerate() {
            let dx = (j as i64 - r) as f64;
            *w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            sum += *w;
        }
    }
    for row in &mut kernel {
        for w in row {
            *w /= sum;
        }
    }
    kernel
}

/// Grayscale morphological closing per channel: dilation (max over a square
/// structuring element) followed by erosion (min). Removes dark specks
/// smaller than the structuring element; idempotent.
pub fn morphological_closing(img: &ImageTensor, se_size: usize) -> Result<ImageTensor> {
    if se_size % 2 == 0 || se_size < 3 {
        return Err(Error::InvalidArgument(format!(
            "structuring element size must be odd and at least 3, got {se_size}"
        )));
    }
    let dilated = window_extremum(img, se_size, true);
    Ok(window_extremum(&dilated, se_size, false))
}

fn window_extremum(img: &ImageTensor, size: usize, maximum: bool) -> ImageTensor {
    let r = (size / 2) as i64;
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let mut best = if maximum { f64::NEG_INFINITY } else { f64::INFINITY };
        for dy in -r..=r {
            let yy = reflect_index(y as i64 + dy, img.height());
            for dx in -r..=r {
                let xx = reflect_index(x as i64 + dx, img.width());
                let v = img.get(yy, xx, c) as f64;
                best = if maximum { best.max(v) } else { best.min(v) };
            }
        }
        best
    })
    .expect("extremum of in-range values is in range")
}

/// One defense strategy applied at test time.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Plain model on the raw degraded image.
    NoCompensation,
    /// Plain model after a Gaussian pre-filter.
    GaussianFilter { kernel_size: usize, sigma: f64 },
    /// Plain model after a morphological closing.
    Closing { se_size: usize },
    /// Dropout-trained model on the raw degraded image.
    DropoutTrained,
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::NoCompensation => "none".into(),
            Strategy::GaussianFilter { kernel_size, sigma } => {
                format!("gauss_filter_{kernel_size}x{kernel_size}_s{sigma}")
            }
            Strategy::Closing { se_size } => format!("closing_{se_size}x{se_size}"),
            Strategy::DropoutTrained => "dropout_trained".into(),
        }
    }

    /// The four strategies compared by the defense harness.
    pub fn default_set() -> Vec<Strategy> {
        vec![
            Strategy::NoCompensation,
            Strategy::GaussianFilter { kernel_size: 3, sigma: 0.5 },
            Strategy::Closing { se_size: 3 },
            Strategy::DropoutTrained,
        ]
    }
}

/// One row of the defense comparison table.
#[derive(Debug, Clone)]
pub struct DefenseRow {
    pub strategy: String,
    pub kind: String,
    pub level: f64,
    pub accuracy: f64,
}

impl DefenseRow {
    pub const CSV_HEADER: &'static str = "strategy,kind,level,accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.strategy, self.kind, self.level, self.accuracy)
    }
}

/// Compares the default strategies over a noise grid.
///
/// `base_spec` supplies the noise kind; `levels` instantiates it per row.
/// Noise draws are shared across strategies at each (level, image, trial),
/// so strategy comparisons are paired.
pub fn defense_sweep(
    baseline: &ModelParams,
    dropout_model: &ModelParams,
    split: &DatasetSplit,
    base_spec: &PerturbationSpec,
    levels: &[f64],
    trials: usize,
    seed: Seed,
) -> Result<Vec<DefenseRow>> {
    if split.is_empty() || levels.is_empty() {
        return Err(Error::InvalidArgument("defense sweep needs images and levels".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let strategies = Strategy::default_set();
    let mut rows = Vec::with_capacity(strategies.len() * levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let spec = base_spec.with_level(level)?;
        let level_seed = seed.derive(li as u64);
        // perturb once per (image, trial), reuse across strategies
        let per_image: Vec<Vec<usize>> = split
            .images
            .par_iter()
            .zip(split.labels.par_iter())
            .enumerate()
            .map(|(i, (img, &label))| -> Result<Vec<usize>> {
                let image_seed = level_seed.derive(i as u64);
                let mut correct = vec![0usize; strategies.len()];
                for t in 0..trials {
                    let degraded = apply_perturbation(img, &spec, image_seed, t as u64)?;
                    for (si, strategy) in strategies.iter().enumerate() {
                        let (model, prepared) = match strategy {
                            Strategy::NoCompensation => (baseline, degraded.clone()),
                            Strategy::GaussianFilter { kernel_size, sigma } => {
                                (baseline, gaussian_prefilter(&degraded, *kernel_size, *sigma)?)
                            }
                            Strategy::Closing { se_size } => {
                                (baseline, morphological_closing(&degraded, *se_size)?)
                            }
                            Strategy::DropoutTrained => (dropout_model, degraded.clone()),
                        };
                        if nn::predict(model, &prepared)? == label {
                            correct[si] += 1;
                        }
                    }
                }
                Ok(correct)
            })
            .collect::<Result<Vec<_>>>()?;
        let total = (split.len() * trials) as f64;
        for (si, strategy) in strategies.iter().enumerate() {
            let correct: usize = per_image.iter().map(|c| c[si]).sum();
            rows.push(DefenseRow {
                strategy: strategy.name(),
                kind: spec.kind_name().to_string(),
                level,
                accuracy: correct as f64 / total,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = CounterRng::new(seed);
        ImageTensor::from_fn(h, w, 3, |_, _, _| rng.next_range(0.0, 255.0)).unwrap()
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = gaussian_kernel(3, 0.5);
        let sum: f64 = k.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                assert!((k[i][j] - k[2 - i][2 - j]).abs() < 1e-15);
                assert!((k[i][j] - k[j][i]).abs() < 1e-15);
            }
        }
        // center dominates for sigma = 0.5
        assert!(k[1][1] > 0.5);
    }

    #[test]
    fn impulse_response_recovers_kernel() {
        let mut data = vec![0.0f32; 9 * 9 * 1];
        data[(4 * 9 + 4) * 1] = 255.0;
        let img = ImageTensor::new(9, 9, 1, data).unwrap();
        let out = gaussian_prefilter(&img, 3, 0.5).unwrap();
        let k = gaussian_kernel(3, 0.5);
        for dy in 0..3 {
            for dx in 0..3 {
                let v = out.get(3 + dy, 3 + dx, 0) as f64;
                assert!((v - 255.0 * k[dy][dx]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn constant_image_unchanged_by_both_filters() {
        let img = ImageTensor::filled(6, 6, 3, 123.0).unwrap();
        let blurred = gaussian_prefilter(&img, 3, 0.5).unwrap();
        assert!(img.max_abs_diff(&blurred) < 1e-4);
        let closed = morphological_closing(&img, 3).unwrap();
        assert_eq!(img, closed);
    }

    #[test]
    fn prefilter_preserves_mean_under_reflect_padding() {
        let img = random_image(8, 10, 77);
        let out = gaussian_prefilter(&img, 3, 0.5).unwrap();
        let mean = |im: &ImageTensor| {
            im.data().iter().map(|&v| v as f64).sum::<f64>() / im.data().len() as f64
        };
        assert!((mean(&img) - mean(&out)).abs() < 1e-3);
    }

    #[test]
    fn closing_restores_single_dark_speck() {
        let mut data = vec![255.0f32; 7 * 7];
        data[3 * 7 + 3] = 0.0;
        let img = ImageTensor::new(7, 7, 1, data).unwrap();
        let out = morphological_closing(&img, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn closing_is_idempotent() {
        let img = random_image(10, 11, 91);
        let once = morphological_closing(&img, 3).unwrap();
        let twice = morphological_closing(&once, 3).unwrap();
        assert_eq!(once, twice);
        // also for a larger structuring element
        let once5 = morphological_closing(&img, 5).unwrap();
        let twice5 = morphological_closing(&once5, 5).unwrap();
        assert_eq!(once5, twice5);
    }

    #[test]
    fn filters_preserve_shape_and_range() {
        let img = random_image(9, 5, 101);
        for out in [
            gaussian_prefilter(&img, 5, 1.0).unwrap(),
            morphological_closing(&img, 3).unwrap(),
        ] {
            assert_eq!(out.height(), 9);
            assert_eq!(out.width(), 5);
            assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&(v as f64))));
        }
    }

    #[test]
    fn even_sizes_rejected() {
        let img = random_image(6, 6, 111);
        assert!(gaussian_prefilter(&img, 4, 0.5).is_err());
        assert!(gaussian_prefilter(&img, 3, 0.0).is_err());
        assert!(morphological_closing(&img, 4).is_err());
        assert!(morphological_closing(&img, 1).is_err());
    }
}
