//! Characterizing sensitive images: hue entropy, the Wilcoxon rank-sum test
//! and sensitivity-based ranking.

use crate::color::rgb_to_hsi;
use crate::empirical::SensitivityRecord;
use crate::error::{Error, Result};
use crate::tensor::{BoundingBox, ImageTensor};

/// Total sample size up to which the rank-sum p-value is computed by exact
/// permutation enumeration. The normal approximation is too coarse in the
/// extreme tails below roughly this size (errors above 0.1 for n <= 8), so
/// small samples get the exact distribution, as reference statistics
/// packages do.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

/// Shannon entropy (bits) of the hue distribution inside a masked region.
///
/// Hue values on `[0, 256)` fall into `bins` equal-width circular bins; empty
/// bins contribute nothing. The result is invariant under global hue
/// rotations by whole bins.
pub fn hue_entropy(img: &ImageTensor, mask: &[bool], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least two histogram bins".into()));
    }
    if mask.len() != img.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} != {} pixels",
            mask.len(),
            img.num_pixels()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("region is empty".into()));
    }
    let hsi = rgb_to_hsi(img)?;
    let mut hist = vec![0usize; bins];
    for (px, &inside) in mask.iter().enumerate() {
        if !inside {
            continue;
        }
        let h = hsi.data()[px * 3] as f64; // hue channel, in [0, 256)
        let bin = ((h * bins as f64 / 256.0) as usize).min(bins - 1);
        hist[bin] += 1;
    }
    let n = count as f64;
    let mut entropy = 0.0;
    for &c in &hist {
        if c > 0 {
            let p = c as f64 / n;
            entropy -= p * p.log2();
        }
    }
    Ok(entropy)
}

/// [`hue_entropy`] over a rectangular region.
pub fn hue_entropy_bbox(img: &ImageTensor, bbox: &BoundingBox, bins: usize) -> Result<f64> {
    bbox.validate(img)?;
    hue_entropy(img, &bbox.to_mask(img.height(), img.width()), bins)
}

/// Two-sample Wilcoxon rank-sum test with midrank tie handling.
///
/// Returns `(W, p)` where `W` is the rank sum of `a` in the pooled sample and
/// `p` a two-sided p-value: exact permutation enumeration for total sample
/// sizes up to [`WILCOXON_EXACT_LIMIT`], otherwise a normal approximation
/// with continuity and tie correction.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (w, ranks, na) = rank_sum_statistic(a, b)?;
    let n = ranks.len();
    let p = if n <= WILCOXON_EXACT_LIMIT {
        exact_two_sided_p(&ranks, na, w)
    } else {
        normal_two_sided_p(&ranks, na, w)
    };
    Ok((w, p))
}

/// The large-sample path of [`wilcoxon_rank_sum`]: continuity-corrected
/// normal approximation with tie-corrected variance, for any sample size.
pub fn wilcoxon_rank_sum_normal(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (w, ranks, na) = rank_sum_statistic(a, b)?;
    Ok((w, normal_two_sided_p(&ranks, na, w)))
}

/// Pooled midranks (in pooled order: a's values first) and the statistic.
fn rank_sum_statistic(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("both samples must be nonempty".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("samples must not contain NaN".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0; // average of 1-based ranks i+1..j
        for &idx in &order[i..j] {
            ranks[idx] = midrank;
        }
        i = j;
    }
    let w: f64 = ranks[..a.len()].iter().sum();
    Ok((w, ranks, a.len()))
}

/// Exact two-sided p by enumerating all assignments of `na` of the pooled
/// midranks to the first sample: `min(1, 2 min(P(W <= w), P(W >= w)))`.
fn exact_two_sided_p(ranks: &[f64], na: usize, w: f64) -> f64 {
    let n = ranks.len();
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut total = 0u64;
    let mut comb: Vec<usize> = (0..na).collect();
    let eps = 1e-9;
    loop {
        let sum: f64 = comb.iter().map(|&i| ranks[i]).sum();
        total += 1;
        if sum <= w + eps {
            le += 1;
        }
        if sum >= w - eps {
            ge += 1;
        }
        if !next_combination(&mut comb, n) {
            break;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Advances index combination `comb` (sorted, from `0..n`) to its
/// lexicographic successor; false once exhausted.
fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if comb[i] != i + n - k {
            comb[i] += 1;
            for j in i + 1..k {
                comb[j] = comb[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn normal_two_sided_p(ranks: &[f64], na: usize, w: f64) -> f64 {
    let n = ranks.len();
    let nb = n - na;
    let mu = na as f64 * (n as f64 + 1.0) / 2.0;
    // tie correction: subtract sum(t^3 - t) over tie groups
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nf = n as f64;
    let var = (na as f64 * nb as f64 / 12.0) * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return 1.0; // all pooled values identical
    }
    let diff = w - mu;
    let z = if diff > 0.0 {
        (diff - 0.5) / var.sqrt()
    } else if diff < 0.0 {
        (diff + 0.5) / var.sqrt()
    } else {
        0.0
    };
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Rational approximation of the error function (abs error ~1.5e-7).
fn erf(z: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.5 * z.abs());
    let tau = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if z >= 0.0 {
        1.0 - tau
    } else {
        tau - 1.0
    }
}

/// Splits records into the k most and k least sensitive image ids, ranked by
/// empirical standard deviation; ties break by ascending image id.
pub fn rank_by_sensitivity(
    records: &[SensitivityRecord],
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k > records.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for {} records",
            records.len()
        )));
    }
    let mut by_desc: Vec<&SensitivityRecord> = records.iter().collect();
    by_desc.sort_by(|x, y| {
        y.empirical_std
            .partial_cmp(&x.empirical_std)
            .unwrap()
            .then(x.image_id.cmp(&y.image_id))
    });
    let top: Vec<usize> = by_desc[..k].iter().map(|r| r.image_id).collect();
    let mut by_asc: Vec<&SensitivityRecord> = records.iter().collect();
    by_asc.sort_by(|x, y| {
        x.empirical_std
            .partial_cmp(&y.empirical_std)
            .unwrap()
            .then(x.image_id.cmp(&y.image_id))
    });
    let bottom: Vec<usize> = by_asc[..k].iter().map(|r| r.image_id).collect();
    Ok((top, bottom))
}
