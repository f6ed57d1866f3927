//! Singular-value reshaping: the SoftDecay transform, the whitening
//! baseline, and the exponential-decay prior diagnostic.

use log::warn;
use ndarray::Array1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{reconstruct, svd, EmbeddingMatrix};

/// Default decay strength for unsupervised use.
pub const DEFAULT_ALPHA: f64 = -0.6;

/// Grid searched by the sweep tooling.
pub const ALPHA_GRID: [f64; 5] = [-0.2, -0.4, -0.6, -0.8, -1.0];

/// Whitening keeps directions whose singular value exceeds `eps * max`.
pub const DEFAULT_WHITEN_EPS: f64 = 1e-10;

pub const PRIOR_C1: f64 = 1.0;
pub const PRIOR_C2: f64 = 1.0;
pub const PRIOR_GAMMA: f64 = 2.0;
pub const PRIOR_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayParams {
    pub alpha: f64,
    /// Transformed values below this floor are raised to it before rescaling.
    pub clamp_floor: f64,
    pub warn_on_clamp: bool,
}

impl DecayParams {
    pub fn new(alpha: f64) -> Result<Self> {
        Self::with_floor(alpha, 0.0)
    }

    pub fn with_floor(alpha: f64, clamp_floor: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha >= 0.0 {
            return Err(Error::InvalidParam(format!(
                "alpha must be a finite negative number, got {alpha}"
            )));
        }
        if !clamp_floor.is_finite() || clamp_floor < 0.0 {
            return Err(Error::InvalidParam(format!(
                "clamp_floor must be finite and non-negative, got {clamp_floor}"
            )));
        }
        Ok(Self {
            alpha,
            clamp_floor,
            warn_on_clamp: true,
        })
    }
}

impl Default for DecayParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            clamp_floor: 0.0,
            warn_on_clamp: true,
        }
    }
}

/// `f(x) = -ln(1 - alpha * (x + alpha)) / alpha`.
pub fn soft_decay_scalar(x: f64, alpha: f64) -> Result<f64> {
    let arg = 1.0 - alpha * (x + alpha);
    if arg.is_nan() || arg <= 0.0 {
        return Err(Error::Domain { x, alpha, arg });
    }
    // ln_1p keeps precision as alpha -> 0, where the map tends to identity
    Ok(-(-alpha * (x + alpha)).ln_1p() / alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformReport {
    pub input_sigma: Vec<f64>,
    pub transformed_sigma: Vec<f64>,
    pub rescale_k: f64,
    pub clamped_count: usize,
}

/// Decays, clamps and rescales a descending spectrum so its maximum is kept.
///
/// Values outside the log's domain (possible only when `alpha <= -1` and
/// `x` is small) tend to `-inf` and are clamped like any other value below
/// the floor.
pub fn transform_spectrum(sigma: &[f64], p: &DecayParams) -> Result<TransformReport> {
    if sigma.is_empty() {
        return Err(Error::DegenerateSpectrum("empty spectrum".into()));
    }
    if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidParam(format!(
            "singular value {i} is {}; expected finite and non-negative",
            sigma[i]
        )));
    }
    if let Some(i) = sigma.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::InvalidParam(format!(
            "spectrum is not descending at index {}",
            i + 1
        )));
    }
    let max = sigma[0];
    if max == 0.0 {
        return Err(Error::DegenerateSpectrum(
            "all singular values are zero".into(),
        ));
    }

    let mut clamped_count = 0;
    let decayed: Vec<f64> = sigma
        .iter()
        .map(|&s| match soft_decay_scalar(s, p.alpha) {
            Ok(v) if v >= p.clamp_floor => v,
            _ => {
                clamped_count += 1;
                p.clamp_floor
            }
        })
        .collect();

    let top = decayed[0];
    if top.is_nan() || top <= 0.0 {
        return Err(Error::DecayCollapse {
            max,
            decayed: soft_decay_scalar(max, p.alpha).unwrap_or(f64::NEG_INFINITY),
            alpha: p.alpha,
        });
    }
    let k = max / top;
    let mut transformed: Vec<f64> = decayed.iter().map(|v| v * k).collect();
    // K * f(max) == max up to rounding; pin it exactly
    transformed[0] = max;

    if clamped_count > 0 && p.warn_on_clamp {
        warn!(
            "soft-decay clamped {clamped_count} of {} singular values to {}; consider a smaller |alpha| than {}",
            sigma.len(),
            p.clamp_floor,
            p.alpha
        );
    }
    Ok(TransformReport {
        input_sigma: sigma.to_vec(),
        transformed_sigma: transformed,
        rescale_k: k,
        clamped_count,
    })
}

/// SVD, spectrum transform, reconstruction.
pub fn apply_soft_decay(
    x: &EmbeddingMatrix,
    p: &DecayParams,
) -> Result<(EmbeddingMatrix, TransformReport)> {
    let f = svd(x)?;
    let report = transform_spectrum(f.sigma.as_slice().expect("contiguous"), p)?;
    let out = reconstruct(&f.with_sigma(Array1::from(report.transformed_sigma.clone())))?;
    Ok((out, report))
}

/// ZCA whitening: centre the columns, then set every retained singular
/// value of the centred matrix to `sqrt(rows - 1)`, which makes the sample
/// covariance (normalised by `rows - 1`) the identity on those directions.
///
/// Directions with singular value `<= eps * max` keep their original scale.
/// With `eps == 0`, any zero-variance direction is an error.
pub fn whiten(x: &EmbeddingMatrix, eps: f64) -> Result<EmbeddingMatrix> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidShape(format!(
            "whitening needs at least 2 rows, got {n}"
        )));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::InvalidParam(format!(
            "whitening eps must be >= 0, got {eps}"
        )));
    }
    let mean = x.as_array().mean_axis(ndarray::Axis(0)).expect("rows >= 2");
    let centred = EmbeddingMatrix::new(x.as_array() - &mean)?;
    let f = svd(&centred)?;
    let smax = f.sigma[0];
    let target = ((n - 1) as f64).sqrt();

    let cutoff = if eps == 0.0 {
        let tol = smax * f64::EPSILON * (n.max(x.cols()) as f64);
        let zero_dirs = f.sigma.iter().filter(|s| **s <= tol).count();
        if zero_dirs > 0 {
            return Err(Error::SingularCovariance { zero_dirs });
        }
        tol
    } else {
        eps * smax
    };
    let sigma = f.sigma.mapv(|s| if s > cutoff { target } else { s });
    reconstruct(&f.with_sigma(sigma))
}

/// `c1 * exp(-c2 * k^gamma)` for `k = 1..=k_count`.
pub fn exp_decay_prior(k_count: usize, c1: f64, c2: f64, gamma: f64) -> Vec<f64> {
    (1..=k_count)
        .map(|k| c1 * (-c2 * (k as f64).powf(gamma)).exp())
        .collect()
}

/// `gamma_e * sum_k (sigma_k - prior_k)`, reported as a diagnostic.
pub fn prior_deviation(sigma: &[f64], prior: &[f64], gamma_e: f64) -> Result<f64> {
    if sigma.len() != prior.len() {
        return Err(Error::Dimension(format!(
            "spectrum has {} values, prior has {}",
            sigma.len(),
            prior.len()
        )));
    }
    Ok(gamma_e * sigma.iter().zip(prior).map(|(s, p)| s - p).sum::<f64>())
}

/// Outcome of one sampled property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub passed: bool,
    /// Point with the largest violation (or the closest call when passing).
    pub worst_x: Option<f64>,
    pub worst_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    /// f' >= 0 on the grid.
    pub monotone: PropertyCheck,
    /// f'' <= 0 on the grid.
    pub concave: PropertyCheck,
    /// K * f(max) == max after rescaling.
    pub max_preserved: PropertyCheck,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.monotone.passed && self.concave.passed && self.max_preserved.passed
    }
}

pub const PROPERTY_GRID_POINTS: usize = 2000;
pub const PROPERTY_FD_TOL: f64 = 1e-6;

/// Samples SoftDecay on `[0, grid_max]` and checks the three shape
/// properties by finite differences.
pub fn validate_transform_properties(p: &DecayParams, grid_max: f64) -> Result<PropertyReport> {
    let alpha = p.alpha;
    validate_properties_with(|x| soft_decay_scalar(x, alpha).ok(), grid_max)
}

/// Property check for an arbitrary scalar map. `f` returns `None` outside
/// its domain; such points are skipped.
pub fn validate_properties_with(
    f: impl Fn(f64) -> Option<f64>,
    grid_max: f64,
) -> Result<PropertyReport> {
    if !grid_max.is_finite() || grid_max <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "grid_max must be positive, got {grid_max}"
        )));
    }
    let n = PROPERTY_GRID_POINTS;
    let h = grid_max / n as f64;
    let values: Vec<Option<f64>> = (0..=n).map(|i| f(i as f64 * h)).collect();

    // (worst value, x); for f' we track the minimum, for f'' the maximum
    let mut min_d1 = (f64::INFINITY, None);
    let mut max_d2 = (f64::NEG_INFINITY, None);
    for i in 1..n {
        let (Some(lo), Some(mid), Some(hi)) = (values[i - 1], values[i], values[i + 1]) else {
            continue;
        };
        let x = i as f64 * h;
        let d1 = (hi - lo) / (2.0 * h);
        let d2 = (hi - 2.0 * mid + lo) / (h * h);
        if d1 < min_d1.0 {
            min_d1 = (d1, Some(x));
        }
        if d2 > max_d2.0 {
            max_d2 = (d2, Some(x));
        }
    }

    let max_preserved = match values[n] {
        Some(top) if top > 0.0 => {
            let k = grid_max / top;
            let rel = (k * top - grid_max).abs() / grid_max;
            PropertyCheck {
                passed: rel <= 1e-12,
                worst_x: Some(grid_max),
                worst_value: rel,
            }
        }
        other => PropertyCheck {
            passed: false,
            worst_x: Some(grid_max),
            worst_value: other.unwrap_or(f64::NAN),
        },
    };

    Ok(PropertyReport {
        monotone: PropertyCheck {
            passed: min_d1.1.is_some() && min_d1.0 >= -PROPERTY_FD_TOL,
            worst_x: min_d1.1,
            worst_value: min_d1.0,
        },
        concave: PropertyCheck {
            passed: max_d2.1.is_some() && max_d2.0 <= PROPERTY_FD_TOL,
            worst_x: max_d2.1,
            worst_value: max_d2.0,
        },
        max_preserved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::explained_variance;
    use ndarray::{array, Array2};

    #[test]
    fn scalar_examples() {
        assert!((soft_decay_scalar(10.0, -0.6).unwrap() - 3.155_186_605_813_904).abs() < 1e-12);
        assert!((soft_decay_scalar(1.0, -0.6).unwrap() - 0.358_518_966_028_242_5).abs() < 1e-12);
        for x in [0.0, 0.3, 1.0, 7.5, 42.0] {
            assert!((soft_decay_scalar(x, -1e-9).unwrap() - x).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_domain_error() {
        // alpha = -1: argument is exactly x
        assert!(matches!(
            soft_decay_scalar(0.0, -1.0),
            Err(Error::Domain { .. })
        ));
        assert!(soft_decay_scalar(1e-3, -1.0).is_ok());
        assert!(matches!(
            soft_decay_scalar(0.1, -2.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(DecayParams::new(0.0).is_err());
        assert!(DecayParams::new(0.5).is_err());
        assert!(DecayParams::new(f64::NAN).is_err());
        assert!(DecayParams::with_floor(-0.6, -1.0).is_err());
        assert_eq!(DecayParams::default().alpha, -0.6);
    }

    #[test]
    fn worked_spectrum() {
        let r = transform_spectrum(&[10.0, 5.0, 1.0], &DecayParams::default()).unwrap();
        assert_eq!(r.transformed_sigma[0], 10.0);
        assert!((r.transformed_sigma[1] - 6.824_655_416_935_699).abs() < 1e-10);
        assert!((r.transformed_sigma[2] - 1.136_284_508_078_278).abs() < 1e-10);
        assert!((r.rescale_k - 3.169_384_651_156_132).abs() < 1e-10);
        assert_eq!(r.clamped_count, 0);
    }

    #[test]
    fn single_value_spectrum() {
        let c = 4.2;
        let r = transform_spectrum(&[c], &DecayParams::default()).unwrap();
        assert_eq!(r.transformed_sigma, vec![c]);
        let expected_k = c / soft_decay_scalar(c, -0.6).unwrap();
        assert!((r.rescale_k - expected_k).abs() < 1e-12);
    }

    #[test]
    fn negative_decay_is_clamped() {
        let decayed = soft_decay_scalar(0.5, -0.6).unwrap();
        assert!((decayed + 0.103_125_672_863_479_12).abs() < 1e-12);
        let r = transform_spectrum(&[10.0, 0.5], &DecayParams::default()).unwrap();
        assert_eq!(r.clamped_count, 1);
        assert_eq!(r.transformed_sigma[1], 0.0);
    }

    #[test]
    fn out_of_domain_values_are_clamped() {
        let p = DecayParams::new(-1.0).unwrap();
        let r = transform_spectrum(&[5.0, 0.0], &p).unwrap();
        assert_eq!(r.clamped_count, 1);
        assert_eq!(r.transformed_sigma, vec![5.0, 0.0]);
    }

    #[test]
    fn clamp_floor_is_respected() {
        let p = DecayParams::with_floor(-0.6, 0.05).unwrap();
        let r = transform_spectrum(&[10.0, 0.5], &p).unwrap();
        assert_eq!(r.clamped_count, 1);
        assert!((r.transformed_sigma[1] - 0.05 * r.rescale_k).abs() < 1e-15);
    }

    #[test]
    fn spectrum_errors() {
        let p = DecayParams::default();
        assert!(matches!(
            transform_spectrum(&[0.0, 0.0], &p),
            Err(Error::DegenerateSpectrum(_))
        ));
        assert!(transform_spectrum(&[], &p).is_err());
        assert!(matches!(
            transform_spectrum(&[1.0, 2.0], &p),
            Err(Error::InvalidParam(_))
        ));
        assert!(matches!(
            transform_spectrum(&[0.4], &p),
            Err(Error::DecayCollapse { .. })
        ));
    }

    #[test]
    fn rank_one_input_is_unchanged() {
        let u = array![0.6, 0.8, 0.0];
        let v = array![1.0, 2.0, 2.0] / 3.0;
        let x = 7.0
            * &u.view()
                .insert_axis(ndarray::Axis(1))
                .dot(&v.view().insert_axis(ndarray::Axis(0)));
        let x = EmbeddingMatrix::new(x).unwrap();
        let (y, _) = apply_soft_decay(&x, &DecayParams::default()).unwrap();
        let diff = (y.as_array() - x.as_array())
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-10);
    }

    #[test]
    fn near_identity_alpha() {
        let x = EmbeddingMatrix::new(array![[3.0, 1.0], [1.0, 2.0], [0.5, -1.0]]).unwrap();
        let p = DecayParams::new(-1e-9).unwrap();
        let (y, _) = apply_soft_decay(&x, &p).unwrap();
        let rel = EmbeddingMatrix::new(y.as_array() - x.as_array())
            .unwrap()
            .frobenius_norm()
            / x.frobenius_norm();
        assert!(rel <= 1e-4);
    }

    #[test]
    fn decay_flattens_explained_variance() {
        let x = EmbeddingMatrix::new(array![
            [9.0, 1.0, 0.0],
            [8.0, 0.0, 3.0],
            [10.0, 2.0, 1.0],
            [9.5, -2.0, 2.0]
        ])
        .unwrap();
        let before = svd(&x).unwrap().sigma.to_vec();
        let (y, r) = apply_soft_decay(&x, &DecayParams::default()).unwrap();
        assert_eq!(r.clamped_count, 0);
        let after = svd(&y).unwrap().sigma.to_vec();
        assert!(explained_variance(&after, 1).unwrap() <= explained_variance(&before, 1).unwrap());
    }

    #[test]
    fn whitening_centres_and_decorrelates() {
        let x = EmbeddingMatrix::new(array![
            [1.0, 2.0, 0.5],
            [2.0, 4.5, 1.0],
            [0.0, 1.0, 3.0],
            [3.0, 5.0, -1.0],
            [1.5, 3.5, 0.0],
            [2.5, 2.0, 2.0]
        ])
        .unwrap();
        let w = whiten(&x, DEFAULT_WHITEN_EPS).unwrap();
        let a = w.as_array();
        for m in a.mean_axis(ndarray::Axis(0)).unwrap() {
            assert!(m.abs() < 1e-10);
        }
        let cov = a.t().dot(a) / (a.nrows() - 1) as f64;
        let dev = (&cov - &Array2::<f64>::eye(3))
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(dev < 1e-10, "{dev}");
    }

    #[test]
    fn whitening_rank_deficient() {
        // third column duplicates the first
        let x = EmbeddingMatrix::new(array![
            [1.0, 2.0, 1.0],
            [2.0, 0.0, 2.0],
            [0.0, 1.0, 0.0],
            [3.0, 5.0, 3.0]
        ])
        .unwrap();
        assert!(matches!(
            whiten(&x, 0.0),
            Err(Error::SingularCovariance { zero_dirs: 1 })
        ));
        let w = whiten(&x, DEFAULT_WHITEN_EPS).unwrap();
        let s = svd(&w).unwrap().sigma;
        assert!((s[0] - 3f64.sqrt()).abs() < 1e-10 && (s[1] - 3f64.sqrt()).abs() < 1e-10);
        assert!(s[2] < 1e-10);
        assert!(whiten(&EmbeddingMatrix::zeros(1, 3).unwrap(), 1e-10).is_err());
    }

    #[test]
    fn prior_examples() {
        let p = exp_decay_prior(1, 1.0, 1.0, 2.0);
        assert!((p[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(exp_decay_prior(5, 0.0, 1.0, 2.0).iter().all(|v| *v == 0.0));
        let p = exp_decay_prior(3, PRIOR_C1, PRIOR_C2, PRIOR_GAMMA);
        assert!((p[2] - (-9.0f64).exp()).abs() < 1e-18);
        assert_eq!(prior_deviation(&p, &p, PRIOR_WEIGHT).unwrap(), 0.0);
        assert_eq!(prior_deviation(&[3.0, 1.0], &[0.1, 0.2], 0.0).unwrap(), 0.0);
        let d = prior_deviation(&[3.0, 1.0], &[1.0, 0.5], PRIOR_WEIGHT).unwrap();
        assert!((d - 2.5e-4).abs() < 1e-18);
        assert!(prior_deviation(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn property_validator() {
        let r = validate_transform_properties(&DecayParams::default(), 20.0).unwrap();
        assert!(r.all_passed(), "{r:?}");
        let r = validate_transform_properties(&DecayParams::new(-1e-9).unwrap(), 20.0).unwrap();
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn property_validator_catches_convex_map() {
        let r = validate_properties_with(|x| Some(x * x), 20.0).unwrap();
        assert!(r.monotone.passed);
        assert!(!r.concave.passed);
        assert!((r.concave.worst_value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn property_validator_catches_decreasing_map() {
        let r = validate_properties_with(|x| Some(-x.sqrt()), 5.0).unwrap();
        assert!(!r.monotone.passed);
        assert!(!r.max_preserved.passed);
    }
}
