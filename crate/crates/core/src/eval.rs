//! Sentence-pair similarity evaluation (Spearman against gold scores) and
//! synthetic datasets with a controlled anisotropic embedding map.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{cosine, reconstruct, svd, EmbeddingMatrix, SvdFactors};
use crate::metrics::{uniformity_report, DEFAULT_EV_KS};
use crate::spectrum::{apply_soft_decay, whiten, DecayParams, DEFAULT_WHITEN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub name: String,
    pub ids: Vec<String>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub gold: Vec<f64>,
}

impl PairDataset {
    pub fn new(
        name: impl Into<String>,
        ids: Vec<String>,
        pairs: Vec<(Vec<f64>, Vec<f64>)>,
        gold: Vec<f64>,
    ) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::InvalidShape(format!(
                "a pair dataset needs at least 2 pairs, got {}",
                pairs.len()
            )));
        }
        if gold.len() != pairs.len() || ids.len() != pairs.len() {
            return Err(Error::Dimension(format!(
                "{} pairs, {} gold scores, {} ids",
                pairs.len(),
                gold.len(),
                ids.len()
            )));
        }
        let dim = pairs[0].0.len();
        if dim == 0 {
            return Err(Error::InvalidShape("embeddings must be non-empty".into()));
        }
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.len() != dim || b.len() != dim {
                return Err(Error::Dimension(format!(
                    "pair {i} has dimensions {} and {}, expected {dim}",
                    a.len(),
                    b.len()
                )));
            }
            if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    location: format!("pair {i}"),
                    value: *v,
                });
            }
        }
        if let Some(i) = gold.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteValue {
                location: format!("gold score {i}"),
                value: gold[i],
            });
        }
        Ok(Self {
            name: name.into(),
            ids,
            pairs,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.len()
    }

    /// Rows interleaved as `a_0, b_0, a_1, b_1, ...`.
    pub fn stacked(&self) -> Result<EmbeddingMatrix> {
        let flat: Vec<f64> = self
            .pairs
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b))
            .copied()
            .collect();
        EmbeddingMatrix::from_shape_vec(2 * self.len(), self.dim(), flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Identity,
    SoftDecay { params: DecayParams },
    Whiten { eps: f64 },
}

impl Method {
    pub fn soft_decay(alpha: f64) -> Result<Self> {
        Ok(Method::SoftDecay {
            params: DecayParams::new(alpha)?,
        })
    }

    pub fn whiten() -> Self {
        Method::Whiten {
            eps: DEFAULT_WHITEN_EPS,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Identity => "identity".into(),
            Method::SoftDecay { params } => format!("soft_decay({})", params.alpha),
            Method::Whiten { .. } => "whiten".into(),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Method::SoftDecay { params } => Some(params.alpha),
            _ => None,
        }
    }

    pub fn apply(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        match self {
            Method::Identity => Ok(x.clone()),
            Method::SoftDecay { params } => apply_soft_decay(x, params).map(|(y, _)| y),
            Method::Whiten { eps } => whiten(x, *eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub method: String,
    pub spearman_rho: f64,
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_used: Option<f64>,
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "spearman of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "fewer than 2 observations".into(),
        ));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation(format!("non-finite value {v}")));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Applies `method` to the stacked embeddings, either all at once or in
/// chunks of `per_batch` pairs, and returns the transformed stack.
pub fn transform_stacked(
    d: &PairDataset,
    method: &Method,
    per_batch: Option<usize>,
) -> Result<EmbeddingMatrix> {
    let stacked = d.stacked()?;
    match per_batch {
        None => method.apply(&stacked),
        Some(0) => Err(Error::InvalidParam(
            "per-batch size must be positive".into(),
        )),
        Some(b) if b >= d.len() => method.apply(&stacked),
        Some(b) => {
            let chunks: Vec<EmbeddingMatrix> = (0..d.len())
                .step_by(b)
                .map(|start| {
                    let end = (start + b).min(d.len());
                    let part = EmbeddingMatrix::new(
                        stacked
                            .view()
                            .slice(ndarray::s![2 * start..2 * end, ..])
                            .to_owned(),
                    )?;
                    method.apply(&part)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&EmbeddingMatrix> = chunks.iter().collect();
            EmbeddingMatrix::vstack(&refs)
        }
    }
}

/// Per-pair cosine similarities of an interleaved stack.
pub fn pair_cosines(stacked: &EmbeddingMatrix) -> Result<Vec<f64>> {
    (0..stacked.rows() / 2)
        .map(|i| {
            cosine(stacked.row_slice(2 * i), stacked.row_slice(2 * i + 1)).map_err(|e| match e {
                Error::ZeroNorm { index: Some(k) } => Error::ZeroNorm {
                    index: Some(2 * i + k),
                },
                other => other,
            })
        })
        .collect()
}

pub fn evaluate_pairs(d: &PairDataset, method: &Method) -> Result<EvalResult> {
    evaluate_pairs_batched(d, method, None)
}

pub fn evaluate_pairs_batched(
    d: &PairDataset,
    method: &Method,
    per_batch: Option<usize>,
) -> Result<EvalResult> {
    let y = transform_stacked(d, method, per_batch)?;
    let sims = pair_cosines(&y)?;
    Ok(EvalResult {
        method: method.label(),
        spearman_rho: spearman(&sims, &d.gold)?,
        n_pairs: d.len(),
        alpha_used: method.alpha(),
    })
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let g = Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(rng));
    // polar factor of a Gaussian matrix
    let f = svd(&EmbeddingMatrix::new(g)?)?;
    Ok(f.u.dot(&f.vt))
}

fn unit_gaussian(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Synthetic STS-style dataset.
///
/// Each pair starts as two unit vectors in an isotropic latent space whose
/// cosine is drawn uniformly from `[-1, 1]`; the gold score is that cosine
/// plus Gaussian noise. Observed embeddings are the latent vectors pushed
/// through a fixed linear map `R1 diag(skew) R2` with random rotations, so
/// `skew` sets the anisotropy of the observed space.
pub fn synth_sts(
    n_pairs: usize,
    dim: usize,
    skew: &[f64],
    noise: f64,
    seed: u64,
) -> Result<PairDataset> {
    if skew.len() != dim {
        return Err(Error::Dimension(format!(
            "skew spectrum has {} values for dim {dim}",
            skew.len()
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidParam(format!(
            "dim must be at least 2, got {dim}"
        )));
    }
    if skew.iter().any(|s| !(s.is_finite() && *s > 0.0)) || skew.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidParam(
            "skew must be a descending vector of positive values".into(),
        ));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::InvalidParam(format!(
            "noise must be >= 0, got {noise}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = reconstruct(&SvdFactors {
        u: random_orthogonal(dim, &mut rng)?,
        sigma: Array1::from(skew.to_vec()),
        vt: random_orthogonal(dim, &mut rng)?,
    })?
    .into_inner();

    let mut pairs = Vec::with_capacity(n_pairs);
    let mut gold = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = unit_gaussian(dim, &mut rng);
        let mut w = unit_gaussian(dim, &mut rng);
        w = &w - &(&a * a.dot(&w));
        let w = &w / w.dot(&w).sqrt();
        let c: f64 = rng.random_range(-1.0..=1.0);
        let b = &a * c + &w * (1.0 - c * c).max(0.0).sqrt();
        let eps: f64 = StandardNormal.sample(&mut rng);
        gold.push(c + noise * eps);
        pairs.push((map.dot(&a).to_vec(), map.dot(&b).to_vec()));
    }
    let ids = (0..n_pairs).map(|i| format!("synth-{i}")).collect();
    PairDataset::new(format!("synth_sts(seed={seed})"), ids, pairs, gold)
}

/// `n_blobs` Gaussian clusters of `n_per_blob` points each around a shared
/// offset, projected onto the unit sphere like normalised sentence
/// embeddings. The shared offset puts the cloud in a narrow cone.
pub fn synth_blobs(
    n_per_blob: usize,
    n_blobs: usize,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    const CENTRE_STD: f64 = 0.5;
    const NOISE_STD: f64 = 0.3;
    if n_per_blob == 0 || n_blobs == 0 || dim == 0 {
        return Err(Error::InvalidParam(
            "blob counts and dim must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = unit_gaussian(dim, &mut rng);
    let mut data = Vec::with_capacity(n_per_blob * n_blobs * dim);
    for _ in 0..n_blobs {
        let centre: Array1<f64> = &offset
            + &Array1::from_shape_simple_fn(dim, || {
                let z: f64 = StandardNormal.sample(&mut rng);
                CENTRE_STD * z
            });
        for _ in 0..n_per_blob {
            let p: Array1<f64> = &centre
                + &Array1::from_shape_simple_fn(dim, || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    NOISE_STD * z
                });
            let n = p.dot(&p).sqrt();
            data.extend(p.iter().map(|v| v / n));
        }
    }
    EmbeddingMatrix::from_shape_vec(n_per_blob * n_blobs, dim, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub spearman_rho: f64,
    pub n_pairs: usize,
    pub token_uni: f64,
    pub rbf_log: f64,
    pub ev_k: BTreeMap<usize, f64>,
    pub lsds_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub dataset: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn ev_columns(&self) -> Vec<usize> {
        self.rows
            .first()
            .map(|r| r.ev_k.keys().copied().collect())
            .unwrap_or_default()
    }

    /// CSV with one row per method. Floats use the shortest round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let ks = self.ev_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "method".to_string(),
            "alpha".into(),
            "spearman_rho".into(),
            "n_pairs".into(),
            "token_uni".into(),
            "rbf_log".into(),
        ];
        header.extend(ks.iter().map(|k| format!("ev_{k}")));
        header.push("lsds_mean".into());
        let csv_err = |e: csv::Error| Error::Parse {
            location: "comparison csv".into(),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.method.clone(),
                r.alpha.map(|a| a.to_string()).unwrap_or_default(),
                r.spearman_rho.to_string(),
                r.n_pairs.to_string(),
                r.token_uni.to_string(),
                r.rbf_log.to_string(),
            ];
            rec.extend(ks.iter().map(|k| r.ev_k[k].to_string()));
            rec.push(r.lsds_mean.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse {
            location: "comparison csv".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Identity, whitening, then SoftDecay at each alpha; Spearman plus the
/// uniformity and LSDS metrics of the transformed stack.
pub fn compare_methods(
    d: &PairDataset,
    alphas: &[f64],
    t: f64,
    knn: usize,
    ev_ks: &[usize],
) -> Result<ComparisonTable> {
    let mut methods = vec![Method::Identity, Method::whiten()];
    for &a in alphas {
        methods.push(Method::soft_decay(a)?);
    }
    let ev_ks = if ev_ks.is_empty() {
        &DEFAULT_EV_KS[..]
    } else {
        ev_ks
    };
    let original = d.stacked()?;

    let rows = methods
        .iter()
        .map(|m| {
            let y = m.apply(&original)?;
            let sims = pair_cosines(&y)?;
            let u = uniformity_report(&original, &y, ev_ks, t, knn)?;
            Ok(ComparisonRow {
                method: m.label(),
                alpha: m.alpha(),
                spearman_rho: spearman(&sims, &d.gold)?,
                n_pairs: d.len(),
                token_uni: u.token_uni,
                rbf_log: u.rbf_log,
                ev_k: u.ev_k,
                lsds_mean: u.lsds_mean,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable {
        dataset: d.name.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PairDataset {
        PairDataset::new(
            "tiny",
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                (vec![1.0, 0.0], vec![1.0, 0.1]),
                (vec![1.0, 0.0], vec![0.0, 1.0]),
                (vec![1.0, 1.0], vec![-1.0, -0.5]),
            ],
            vec![0.9, 0.1, -0.8],
        )
        .unwrap()
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert_eq!(spearman(&a, &b).unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(spearman(&a, &neg).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn spearman_ties_use_average_ranks() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        // ranks (1.5, 1.5, 3) vs (1, 2, 3): cov 1.5, var 1.5 and 2
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let one = PairDataset::new(
            "x",
            vec!["a".into()],
            vec![(vec![1.0], vec![1.0])],
            vec![1.0],
        );
        assert!(one.is_err());
        let ragged = PairDataset::new(
            "x",
            vec!["a".into(), "b".into()],
            vec![(vec![1.0], vec![1.0]), (vec![1.0, 2.0], vec![1.0, 2.0])],
            vec![1.0, 2.0],
        );
        assert!(matches!(ragged, Err(Error::Dimension(_))));
        let nan = PairDataset::new(
            "x",
            vec!["a".into(), "b".into()],
            vec![(vec![1.0], vec![1.0]), (vec![2.0], vec![1.0])],
            vec![1.0, f64::NAN],
        );
        assert!(matches!(nan, Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn stacking_interleaves() {
        let s = tiny().stacked().unwrap();
        assert_eq!(s.shape(), (6, 2));
        assert_eq!(s.row_slice(1), &[1.0, 0.1]);
        assert_eq!(s.row_slice(2), &[1.0, 0.0]);
    }

    #[test]
    fn per_batch_identity_matches_whole() {
        let d = tiny();
        let whole = evaluate_pairs(&d, &Method::Identity).unwrap();
        let batched = evaluate_pairs_batched(&d, &Method::Identity, Some(1)).unwrap();
        assert_eq!(whole, batched);
        assert!(evaluate_pairs_batched(&d, &Method::Identity, Some(0)).is_err());
    }

    #[test]
    fn zero_norm_after_transform_names_row() {
        let d = PairDataset::new(
            "z",
            vec!["a".into(), "b".into()],
            vec![
                (vec![1.0, 0.0], vec![0.0, 0.0]),
                (vec![1.0, 1.0], vec![0.0, 1.0]),
            ],
            vec![0.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            evaluate_pairs(&d, &Method::Identity),
            Err(Error::ZeroNorm { index: Some(1) })
        ));
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let skew = vec![3.0, 2.0, 1.0, 1.0];
        let a = synth_sts(20, 4, &skew, 0.05, 9).unwrap();
        assert_eq!(a, synth_sts(20, 4, &skew, 0.05, 9).unwrap());
        assert_ne!(a, synth_sts(20, 4, &skew, 0.05, 10).unwrap());
        assert!(synth_sts(20, 3, &skew, 0.05, 9).is_err());
        assert!(synth_sts(20, 4, &[1.0, 2.0, 1.0, 1.0], 0.05, 9).is_err());
        assert!(synth_sts(20, 4, &[1.0, 1.0, 1.0, 0.0], 0.05, 9).is_err());
    }

    #[test]
    fn noiseless_isotropic_synth_is_perfect_under_identity() {
        let d = synth_sts(50, 6, &[1.0; 6], 0.0, 3).unwrap();
        let r = evaluate_pairs(&d, &Method::Identity).unwrap();
        assert!((r.spearman_rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comparison_rows_and_csv() {
        let d = synth_sts(30, 4, &[5.0, 1.0, 1.0, 1.0], 0.05, 1).unwrap();
        let t = compare_methods(&d, &[-0.6], 0.5, 5, &[1, 2]).unwrap();
        let labels: Vec<_> = t.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(labels, vec!["identity", "whiten", "soft_decay(-0.6)"]);
        let csv = t.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,alpha,spearman_rho,n_pairs,token_uni,rbf_log,ev_1,ev_2,lsds_mean"
        );
        assert_eq!(lines.count(), 3);
    }
}
