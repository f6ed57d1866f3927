//! Uniformity and local-structure metrics over embedding matrices, plus
//! summary statistics of singular-value spectra.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, svd, EmbeddingMatrix};

pub const DEFAULT_RBF_T: f64 = 0.5;
pub const DEFAULT_KNN: usize = 12;
pub const DEFAULT_EV_KS: [usize; 3] = [1, 3, 10];

/// Slack added to the cone bound to absorb rounding.
pub const CONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumStats {
    /// Fisher skewness `m3 / m2^(3/2)`; 0 when the spectrum is flat.
    pub skewness: f64,
    /// Set when the spread is too small for skewness to be meaningful.
    pub degenerate: bool,
    pub median: f64,
    pub max: f64,
    /// `(value / max, fraction of values <= it)`, one point per distinct value.
    pub cdf: Vec<(f64, f64)>,
}

pub fn spectrum_stats(sigma: &[f64]) -> Result<SpectrumStats> {
    if sigma.is_empty() {
        return Err(Error::DegenerateSpectrum("empty spectrum".into()));
    }
    if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidParam(format!(
            "singular value {i} is {}; expected finite and non-negative",
            sigma[i]
        )));
    }
    let mut sorted = sigma.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    if max == 0.0 {
        return Err(Error::DegenerateSpectrum(
            "all singular values are zero; CDF is undefined".into(),
        ));
    }

    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };

    let nf = n as f64;
    let mean = sorted.iter().sum::<f64>() / nf;
    let m2 = sorted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / nf;
    let m3 = sorted.iter().map(|s| (s - mean).powi(3)).sum::<f64>() / nf;
    let degenerate = m2.sqrt() <= 1e-10 * max;
    let skewness = if degenerate { 0.0 } else { m3 / m2.powf(1.5) };

    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, s) in sorted.iter().enumerate() {
        let point = (s / max, (i + 1) as f64 / nf);
        match cdf.last_mut() {
            Some(last) if sorted[i - 1] == *s => *last = point,
            _ => cdf.push(point),
        }
    }
    // the top value divides to exactly 1, but pin both coordinates anyway
    if let Some(last) = cdf.last_mut() {
        *last = (1.0, 1.0);
    }

    Ok(SpectrumStats {
        skewness,
        degenerate,
        median,
        max,
        cdf,
    })
}

/// Unit-normalised rows; errors on the first zero row.
fn unit_rows(x: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
    (0..x.rows())
        .map(|i| {
            let r = x.row_slice(i);
            let n = l2_norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm { index: Some(i) })
            } else {
                Ok(r.iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

fn require_pairs(x: &EmbeddingMatrix) -> Result<()> {
    if x.rows() < 2 {
        return Err(Error::InvalidShape(format!(
            "pairwise metrics need at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// Mean cosine similarity over all unordered row pairs.
pub fn token_uniformity(x: &EmbeddingMatrix) -> Result<f64> {
    require_pairs(x)?;
    let rows = unit_rows(x)?;
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            total += c.clamp(-1.0, 1.0);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log(mean_{i<j} exp(-|x_i - x_j|^2 / t))`, computed with log-sum-exp so
/// that well-separated rows give a large negative value instead of `-inf`.
pub fn rbf_uniformity(x: &EmbeddingMatrix, t: f64) -> Result<f64> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "RBF temperature must be positive, got {t}"
        )));
    }
    require_pairs(x)?;
    let n = x.rows();
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            exps.push(-sq_dist(x.row_slice(i), x.row_slice(j)) / t);
        }
    }
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exps.iter().map(|e| (e - top).exp()).sum();
    let value = top + sum.ln() - (exps.len() as f64).ln();
    Ok(value.min(0.0))
}

/// Share of squared spectrum mass in the top `k` values.
pub fn explained_variance(sigma: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > sigma.len() {
        return Err(Error::InvalidParam(format!(
            "explained-variance k must be in 1..={}, got {k}",
            sigma.len()
        )));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::DegenerateSpectrum(
            "all singular values are zero".into(),
        ));
    }
    let head: f64 = sigma[..k].iter().map(|s| s * s).sum();
    Ok((head / total).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LsdsWeighting {
    /// `w_ij = exp(-|x_i - x_j|^2 / t)` as is.
    #[default]
    Raw,
    /// Raw weights divided by their sum over the neighbourhood.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsdsResult {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

/// Indices of the `k` nearest rows to row `i` (self excluded), by squared
/// Euclidean distance with ties going to the lower index.
pub fn nearest_neighbors(x: &EmbeddingMatrix, i: usize, k: usize) -> Vec<(usize, f64)> {
    let xi = x.row_slice(i);
    let mut d: Vec<(usize, f64)> = (0..x.rows())
        .filter(|&j| j != i)
        .map(|j| (j, sq_dist(xi, x.row_slice(j))))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Local Structure Discrepancy Score.
///
/// Neighbourhoods and weights come from `original`; the residual
/// `|f(x_i) - sum_j w_ij f(x_j)|^2` is measured on `transformed`.
pub fn lsds(
    original: &EmbeddingMatrix,
    transformed: &EmbeddingMatrix,
    k: usize,
    t: f64,
    weighting: LsdsWeighting,
) -> Result<LsdsResult> {
    if original.shape() != transformed.shape() {
        return Err(Error::Dimension(format!(
            "original is {:?}, transformed is {:?}",
            original.shape(),
            transformed.shape()
        )));
    }
    let n = original.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidParam(format!(
            "LSDS neighbourhood size must be in 1..{n}, got {k}"
        )));
    }
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "LSDS temperature must be positive, got {t}"
        )));
    }

    let d = transformed.cols();
    let per_item: Vec<f64> = (0..n)
        .map(|i| {
            let nbrs = nearest_neighbors(original, i, k);
            let mut w: Vec<f64> = nbrs.iter().map(|(_, d2)| (-d2 / t).exp()).collect();
            if weighting == LsdsWeighting::Normalized {
                let s: f64 = w.iter().sum();
                if s > 0.0 {
                    w.iter_mut().for_each(|v| *v /= s);
                }
            }
            let mut recon = vec![0.0; d];
            for ((j, _), wj) in nbrs.iter().zip(&w) {
                for (r, v) in recon.iter_mut().zip(transformed.row_slice(*j)) {
                    *r += wj * v;
                }
            }
            sq_dist(transformed.row_slice(i), &recon)
        })
        .collect();
    let mean = per_item.iter().sum::<f64>() / n as f64;
    Ok(LsdsResult { per_item, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConeBound {
    pub k: usize,
    pub max_residual: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Distance from each row to its projection onto the top-`k` right
/// singular directions, compared with the `(k+1)`-th singular value.
pub fn cone_bound_check(x: &EmbeddingMatrix, k: usize) -> Result<ConeBound> {
    let f = svd(x)?;
    cone_bound_from_factors(x, &f, k)
}

/// [`cone_bound_check`] for every valid cut `1..r`.
pub fn cone_bound_sweep(x: &EmbeddingMatrix) -> Result<Vec<ConeBound>> {
    let f = svd(x)?;
    (1..f.rank_len())
        .map(|k| cone_bound_from_factors(x, &f, k))
        .collect()
}

fn cone_bound_from_factors(
    x: &EmbeddingMatrix,
    f: &crate::matrix::SvdFactors,
    k: usize,
) -> Result<ConeBound> {
    let r = f.rank_len();
    if k == 0 || k >= r {
        return Err(Error::InvalidParam(format!(
            "cone cut index must be in 1..{r}, got {k}"
        )));
    }
    let mut max_residual = 0.0f64;
    for i in 0..x.rows() {
        let mut approx = vec![0.0; x.cols()];
        for j in 0..k {
            let coef = f.sigma[j] * f.u[[i, j]];
            for (a, v) in approx.iter_mut().zip(f.vt.row(j)) {
                *a += coef * v;
            }
        }
        max_residual = max_residual.max(sq_dist(x.row_slice(i), &approx).sqrt());
    }
    let bound = f.sigma[k];
    Ok(ConeBound {
        k,
        max_residual,
        bound,
        pass: max_residual <= bound + CONE_SLACK,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformityReport {
    pub token_uni: f64,
    pub rbf_log: f64,
    pub ev_k: BTreeMap<usize, f64>,
    pub lsds_mean: f64,
    pub lsds_per_item: Vec<f64>,
}

/// All four metrics for `transformed`, with LSDS measured against `original`.
///
/// `ev_ks` entries larger than the spectrum length are clamped to it.
pub fn uniformity_report(
    original: &EmbeddingMatrix,
    transformed: &EmbeddingMatrix,
    ev_ks: &[usize],
    t: f64,
    knn: usize,
) -> Result<UniformityReport> {
    let sigma = svd(transformed)?.sigma.to_vec();
    let mut ev_k = BTreeMap::new();
    for &k in ev_ks {
        let k = k.min(sigma.len());
        ev_k.insert(k, explained_variance(&sigma, k)?);
    }
    let l = lsds(original, transformed, knn, t, LsdsWeighting::Raw)?;
    Ok(UniformityReport {
        token_uni: token_uniformity(transformed)?,
        rbf_log: rbf_uniformity(transformed, t)?,
        ev_k,
        lsds_mean: l.mean,
        lsds_per_item: l.per_item,
    })
}
