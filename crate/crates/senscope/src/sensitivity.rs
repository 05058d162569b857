//! Analytic sensitivity scores from a single backward pass.
//!
//! For a scalar model output `f(x)` and a stochastic degradation
//! `g(x, eps)` with `g(x, 0) = x`, the first-order expansion
//! `f(g(x, eps)) - f(x) ~ F' G' eps` (with `F` the input gradient and `G`
//! the perturbation Jacobian at `eps = 0`) gives the expected squared output
//! change
//!
//! ```text
//! V = E[(df)^2] = (GF)' E[eps eps'] (GF)
//! ```
//!
//! evaluated here as a quadratic form on the vector `GF`, never as a full
//! N x N trace. `V` is an expected squared change around the clean output,
//! not a mean-centered variance: for skewed noise such as pepper the mean
//! change is nonzero and is deliberately included.
//!
//! Closed forms avoid materializing `G`:
//!
//! * Gaussian (iid additive): `V = sigma^2 ||F||^2`
//! * pepper (shared Bernoulli per pixel): `V = p^2 (v'e)^2 + p(1-p) ||v||^2`
//!   with `v_k = -sum_c x_{k,c} F_{k,c}`
//! * translation: `V = sigma^2 ||G F||^2` with `G` the two rows of per-element
//!   image x/y derivatives
//!
//! For exactly linear models these scores equal the true expected squared
//! change; for nonlinear models they are first-order approximations that are
//! accurate at small noise levels.

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, ImageTensor};

/// Predicted expected squared output change under a degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityScore {
    /// The score V (a variance-like quantity, always nonnegative).
    pub variance: f64,
}

impl SensitivityScore {
    pub fn new(variance: f64) -> Self {
        // guard against tiny negative rounding residue
        Self { variance: variance.max(0.0) }
    }

    /// Standard-deviation form, `sqrt(V)`; this is what empirical output
    /// deviations are compared against.
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Minimal dense row-major matrix used by the general-form score.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::InvalidArgument("matrix needs at least one row".into()));
        }
        let c = rows[0].len();
        if c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged or empty matrix rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.into_iter().flatten().collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {}x{} against vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self.get(r, c) - self.get(c, r)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

/// General trace-form score `V = (GF)' E[eps eps'] (GF)`.
///
/// `second_moment` is the N x N matrix `E[eps eps']`, `jacobian` the N x M
/// perturbation Jacobian at zero noise, and `grad` the flattened gradient
/// map of length M (same element order as the image layout).
pub fn sensitivity_general(
    second_moment: &Matrix,
    jacobian: &Matrix,
    grad: &[f64],
) -> Result<SensitivityScore> {
    if second_moment.rows() != second_moment.cols() {
        return Err(Error::ShapeMismatch("second moment must be square".into()));
    }
    if second_moment.rows() != jacobian.rows() {
        return Err(Error::ShapeMismatch(format!(
            "second moment is {}x{} but jacobian has {} rows",
            second_moment.rows(),
            second_moment.cols(),
            jacobian.rows()
        )));
    }
    if !second_moment.is_symmetric(1e-9) {
        return Err(Error::InvalidArgument("second moment must be symmetric".into()));
    }
    let u = jacobian.matvec(grad)?;
    let mu = second_moment.matvec(&u)?;
    let v: f64 = u.iter().zip(&mu).map(|(a, b)| a * b).sum();
    Ok(SensitivityScore::new(v))
}

/// Closed form for additive iid Gaussian noise: `V = sigma^2 ||F||^2`.
pub fn sensitivity_gaussian_rgb(grad: &GradientMap, sigma: f64) -> SensitivityScore {
    SensitivityScore::new(sigma * sigma * grad.norm_sq())
}

/// Closed form for per-pixel pepper noise (shared Bernoulli across channels):
/// `V = p^2 (v'e)^2 + p(1-p) ||v||^2` with `v_k = -sum_c x_{k,c} F_{k,c}`.
pub fn sensitivity_pepper(
    img: &ImageTensor,
    grad: &GradientMap,
    p: f64,
) -> Result<SensitivityScore> {
    if !grad.same_shape_as(img) {
        return Err(Error::ShapeMismatch("gradient shape does not match image".into()));
    }
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("pepper probability {p} outside [0, 1]")));
    }
    let ch = img.channels();
    let mut sum_v = 0.0;
    let mut sum_v2 = 0.0;
    for px in 0..img.num_pixels() {
        let mut v = 0.0;
        for c in 0..ch {
            let i = px * ch + c;
            v -= img.data()[i] as f64 * grad.data[i];
        }
        sum_v += v;
        sum_v2 += v * v;
    }
    Ok(SensitivityScore::new(p * p * sum_v * sum_v + p * (1.0 - p) * sum_v2))
}

/// Closed form for random translations: `V = sigma^2 ||G F||^2`, where the
/// two rows of `G` are the per-element x and y image derivatives.
pub fn sensitivity_translation(
    img: &ImageTensor,
    grad: &GradientMap,
    sigma: f64,
) -> Result<SensitivityScore> {
    if !grad.same_shape_as(img) {
        return Err(Error::ShapeMismatch("gradient shape does not match image".into()));
    }
    let (gx, gy) = img.image_gradients()?;
    let a: f64 = gx.data.iter().zip(&grad.data).map(|(g, f)| g * f).sum();
    let b: f64 = gy.data.iter().zip(&grad.data).map(|(g, f)| g * f).sum();
    Ok(SensitivityScore::new(sigma * sigma * (a * a + b * b)))
}

/// Second moment `E[eps eps']` of D iid Bernoulli(p) variables:
/// p on the diagonal, p^2 off it (equivalently `p^2 ee' - p(p-1) I`).
pub fn bernoulli_second_moment(p: f64, d: usize) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut m = Matrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            m.set(r, c, if r == c { p } else { p * p });
        }
    }
    Ok(m)
}

/// Dense pepper Jacobian at zero noise for the crate's interleaved
/// `(pixel, channel)` layout: row k has `-x_{k,c}` at column `k*C + c`.
/// Only used to cross-check the closed form against the general form.
pub fn pepper_jacobian(img: &ImageTensor) -> Matrix {
    let ch = img.channels();
    let d = img.num_pixels();
    let mut g = Matrix::zeros(d, d * ch);
    for px in 0..d {
        for c in 0..ch {
            g.set(px, px * ch + c, -(img.data()[px * ch + c] as f64));
        }
    }
    g
}
