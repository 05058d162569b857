//! Monte Carlo ground truth and validation of the analytic predictions.
//!
//! Estimators are deterministic functions of their seed: image `i` of spec
//! `j` draws trials from the stream keyed by `mix(mix(base, j), i)`, with one
//! fixed key per (spec, image) pair decided before dispatch. Images are
//! processed in parallel but collected in index order and reduced
//! sequentially, so results are identical for any thread count.

use rayon::prelude::*;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::perturb::{apply_perturbation, PepperMode, PerturbationSpec, Seed};
use crate::sensitivity::{
    sensitivity_gaussian_rgb, sensitivity_pepper, sensitivity_translation, SensitivityScore,
};
use crate::tensor::ImageTensor;

/// Accuracy and label-change probability of one spec at one level.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub kind: String,
    pub level: f64,
    pub trials: usize,
    pub accuracy: f64,
    pub label_change_prob: f64,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "kind,level,trials,accuracy,label_change_prob";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.kind, self.level, self.trials, self.accuracy, self.label_change_prob
        )
    }
}

/// Per-image pairing of the analytic score with the measured deviation.
#[derive(Debug, Clone)]
pub struct SensitivityRecord {
    pub image_id: usize,
    pub analytic_std: f64,
    pub empirical_std: f64,
    pub trials: usize,
}

impl SensitivityRecord {
    pub const CSV_HEADER: &'static str = "image_id,analytic_std,empirical_std";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.image_id, self.analytic_std, self.empirical_std)
    }
}

/// Fraction of trials in which the predicted label changes under the spec.
pub fn label_change_probability(
    params: &ModelParams,
    img: &ImageTensor,
    spec: &PerturbationSpec,
    trials: usize,
    seed: Seed,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let original = nn::predict(params, img)?;
    let mut flips = 0usize;
    for t in 0..trials {
        let perturbed = apply_perturbation(img, spec, seed, t as u64)?;
        if nn::predict(params, &perturbed)? != original {
            flips += 1;
        }
    }
    Ok(flips as f64 / trials as f64)
}

/// Runs every spec over the split: accuracy is averaged over all
/// (image, trial) pairs, the label-change probability over images.
pub fn sweep(
    params: &ModelParams,
    split: &DatasetSplit,
    specs: &[PerturbationSpec],
    trials: usize,
    seed: Seed,
) -> Result<Vec<SweepResult>> {
    if split.is_empty() || specs.is_empty() {
        return Err(Error::InvalidArgument("sweep needs a nonempty split and spec list".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut results = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let spec_seed = seed.derive(j as u64);
        let per_image: Vec<(usize, f64)> = split
            .images
            .par_iter()
            .zip(split.labels.par_iter())
            .enumerate()
            .map(|(i, (img, &label))| -> Result<(usize, f64)> {
                let image_seed = spec_seed.derive(i as u64);
                let original = nn::predict(params, img)?;
                let mut correct = 0usize;
                let mut flips = 0usize;
                for t in 0..trials {
                    let perturbed = apply_perturbation(img, spec, image_seed, t as u64)?;
                    let pred = nn::predict(params, &perturbed)?;
                    if pred == label {
                        correct += 1;
                    }
                    if pred != original {
                        flips += 1;
                    }
                }
                Ok((correct, flips as f64 / trials as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = (split.len() * trials) as f64;
        let correct: usize = per_image.iter().map(|(c, _)| c).sum();
        let rho: f64 = per_image.iter().map(|(_, f)| f).sum::<f64>() / split.len() as f64;
        results.push(SweepResult {
            kind: spec.kind_name().to_string(),
            level: spec.nominal_level(),
            trials,
            accuracy: correct as f64 / total,
            label_change_prob: rho,
        });
    }
    Ok(results)
}

/// Root mean squared change of the clean predicted class's score over trials.
///
/// The scalar output is pinned to the clean image's predicted class even when
/// the prediction flips under noise, so every trial measures the same output
/// unit.
pub fn empirical_output_std(
    params: &ModelParams,
    img: &ImageTensor,
    spec: &PerturbationSpec,
    trials: usize,
    seed: Seed,
) -> Result<f64> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    let clean_scores = nn::forward(params, img)?;
    let class = nn::argmax(&clean_scores);
    let f0 = clean_scores[class];
    let mut sum_sq = 0.0;
    for t in 0..trials {
        let perturbed = apply_perturbation(img, spec, seed, t as u64)?;
        let f = nn::forward(params, &perturbed)?[class];
        sum_sq += (f - f0) * (f - f0);
    }
    Ok((sum_sq / trials as f64).sqrt())
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for zero variance".into()));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Analytic score for one of the three predictable kinds, from one gradient.
pub fn analytic_score(
    img: &ImageTensor,
    grad: &crate::tensor::GradientMap,
    spec: &PerturbationSpec,
) -> Result<SensitivityScore> {
    match spec {
        PerturbationSpec::GaussianRgb { sigma } => Ok(sensitivity_gaussian_rgb(grad, *sigma)),
        PerturbationSpec::Pepper { p, mode } => {
            if *mode != PepperMode::PerPixel {
                return Err(Error::Unsupported(
                    "the analytic pepper score models per_pixel hits".into(),
                ));
            }
            sensitivity_pepper(img, grad, *p)
        }
        PerturbationSpec::Translation { sigma } => sensitivity_translation(img, grad, *sigma),
        other => Err(Error::Unsupported(format!(
            "no analytic predictor for kind {}",
            other.kind_name()
        ))),
    }
}

/// Correlates the analytic standard deviation with the empirical one over a
/// split. Returns the per-image records and the Pearson r of the std pairing.
pub fn validate_prediction(
    params: &ModelParams,
    split: &DatasetSplit,
    spec: &PerturbationSpec,
    trials: usize,
    seed: Seed,
) -> Result<(Vec<SensitivityRecord>, f64)> {
    spec.validate()?;
    if split.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    let records: Vec<SensitivityRecord> = split
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| -> Result<SensitivityRecord> {
            let class = nn::predict(params, img)?;
            let grad = nn::input_gradient(params, img, class)?;
            let analytic = analytic_score(img, &grad, spec)?;
            let empirical = empirical_output_std(params, img, spec, trials, seed.derive(i as u64))?;
            Ok(SensitivityRecord {
                image_id: i,
                analytic_std: analytic.std(),
                empirical_std: empirical,
                trials,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let analytic: Vec<f64> = records.iter().map(|r| r.analytic_std).collect();
    let empirical: Vec<f64> = records.iter().map(|r| r.empirical_std).collect();
    let r = pearson_correlation(&analytic, &empirical)?;
    Ok((records, r))
}
