//! senscope: measure and predict the sensitivity of differentiable image
//! classifiers to acquisition-time image degradations.
//!
//! The crate has three layers:
//!
//! 1. **Degradations** ([`perturb`]): seeded, replayable image noise and
//!    geometric transforms (Gaussian RGB/intensity/hue/saturation noise,
//!    pepper noise, random translations, flips and rotation, composition).
//! 2. **Measurement** ([`empirical`]): Monte Carlo estimates of accuracy,
//!    label-change probability and output deviation for a trained model
//!    ([`nn`]) on the synthetic dataset ([`dataset`]).
//! 3. **Prediction** ([`sensitivity`]): analytic sensitivity scores computed
//!    from a single backward pass, with closed forms for Gaussian, pepper and
//!    translation noise, validated against the measurements by correlation.
//!
//! [`defense`] evaluates test-time pre-filtering and dropout-trained models;
//! [`stats`] characterizes sensitive images (hue entropy, rank-sum test).
//! The `senscope` binary exposes all of this as subcommands; the `examples/`
//! directory holds one runnable example per capability.

pub mod color;
pub mod commands;
pub mod dataset;
pub mod defense;
pub mod empirical;
pub mod error;
pub mod io;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod tensor;

pub use color::{hsi_to_rgb, rgb_to_hsi, HsiImage};
pub use dataset::{generate_synthetic_dataset, DatasetSplit, SyntheticDataset};
pub use empirical::{
    empirical_output_std, label_change_probability, pearson_correlation, sweep,
    validate_prediction, SensitivityRecord, SweepResult,
};
pub use error::{Error, Result};
pub use nn::{
    evaluate_accuracy, forward, input_gradient, predict, train, Arch, ModelParams, TrainConfig,
};
pub use perturb::{apply_perturbation, PepperMode, PerturbationSpec, Seed};
pub use sensitivity::{
    bernoulli_second_moment, sensitivity_gaussian_rgb, sensitivity_general, sensitivity_pepper,
    sensitivity_translation, Matrix, SensitivityScore,
};
pub use stats::{hue_entropy, rank_by_sensitivity, wilcoxon_rank_sum};
pub use tensor::{BoundingBox, GradientMap, ImageTensor};
