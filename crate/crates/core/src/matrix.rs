//! Dense embedding matrices and their thin SVD.
//!
//! Rows index items (tokens or sentences) and columns index feature
//! dimensions. Hidden-state dumps laid out feature-major (one column per
//! token) go through [`EmbeddingMatrix::from_feature_major`], which
//! transposes into this orientation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before the factorization is declared failed.
pub const MAX_SWEEPS: usize = 30;

/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const JACOBI_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Wraps a row-as-item array after checking it is non-empty and finite.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "embedding matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        // normalise memory layout so row slices are always contiguous
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self { data })
    }

    pub fn from_shape_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        Self::new(data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {i} has {} values, expected {cols}",
                r.len()
            )));
        }
        let flat = rows.iter().flatten().copied().collect();
        Self::from_shape_vec(rows.len(), cols, flat)
    }

    /// Builds a matrix from a feature-major layout (`dim x items`), as used
    /// for transformer hidden states written one token per column.
    pub fn from_feature_major(data: Array2<f64>) -> Result<Self> {
        Self::new(data.reversed_axes())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Row `i` as a contiguous slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.data.as_slice().expect("standard layout")[i * cols..(i + 1) * cols]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn transpose(&self) -> EmbeddingMatrix {
        EmbeddingMatrix {
            data: self.data.t().as_standard_layout().into_owned(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies `f` to the raw array and re-validates the result.
    pub fn map_array(&self, f: impl FnOnce(ArrayView2<'_, f64>) -> Array2<f64>) -> Result<Self> {
        Self::new(f(self.view()))
    }

    /// Stacks row blocks vertically.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        let data =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data)
    }
}

/// Thin SVD factors `u * diag(sigma) * vt`, with `sigma` sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// Left singular vectors, `rows x r`.
    pub u: Array2<f64>,
    /// Singular values, length `r = min(rows, cols)`.
    pub sigma: Array1<f64>,
    /// Right singular vectors as rows, `r x cols`.
    pub vt: Array2<f64>,
}

impl SvdFactors {
    pub fn rank_len(&self) -> usize {
        self.sigma.len()
    }

    /// Same singular vectors with a replacement spectrum.
    pub fn with_sigma(&self, sigma: Array1<f64>) -> SvdFactors {
        SvdFactors {
            u: self.u.clone(),
            sigma,
            vt: self.vt.clone(),
        }
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Each right singular vector is sign-normalised so that its first entry
/// that is nonzero (relative to the vector's largest magnitude) is
/// non-negative; the matching left vector is flipped with it.
pub fn svd(x: &EmbeddingMatrix) -> Result<SvdFactors> {
    let (rows, cols) = x.shape();
    if rows >= cols {
        let (u, sigma, v) = jacobi_tall(x.view())?;
        Ok(finish(u, sigma, v.reversed_axes()))
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let (u_t, sigma, v_t) = jacobi_tall(x.view().t())?;
        Ok(finish(v_t, sigma, u_t.reversed_axes()))
    }
}

/// Factors a matrix with `rows >= cols`; returns `(u, sigma, v)` unsorted.
fn jacobi_tall(a: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    // Work on columns stored as contiguous rows.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&w[p], &w[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Factorization {
            rows: a.nrows(),
            cols: a.ncols(),
            sweeps: MAX_SWEEPS,
        });
    }

    let sigma: Vec<f64> = w.iter().map(|col| norm(col)).collect();
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let null_tol = smax * f64::EPSILON * (m.max(n) as f64);

    let mut u = Array2::<f64>::zeros((m, n));
    let mut missing = Vec::new();
    for (j, col) in w.iter().enumerate() {
        if sigma[j] > null_tol && sigma[j] > 0.0 {
            for (i, val) in col.iter().enumerate() {
                u[[i, j]] = val / sigma[j];
            }
        } else {
            missing.push(j);
        }
    }
    let mut sigma = Array1::from(sigma);
    for &j in &missing {
        sigma[j] = 0.0;
    }
    complete_basis(&mut u, &missing);

    let mut vm = Array2::<f64>::zeros((n, n));
    for (j, col) in v.iter().enumerate() {
        for (i, val) in col.iter().enumerate() {
            vm[[i, j]] = *val;
        }
    }
    Ok((u, sigma, vm))
}

fn gram(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column (Gram-Schmidt against the standard basis).
fn complete_basis(u: &mut Array2<f64>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < m {
            let mut e = Array1::<f64>::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt for stability
            for _ in 0..2 {
                for &k in &filled {
                    let col = u.column(k);
                    let d = col.dot(&e);
                    e.scaled_add(-d, &col);
                }
            }
            let n = e.dot(&e).sqrt();
            if n > 1e-8 {
                u.column_mut(j).assign(&(e / n));
                filled.push(j);
                break;
            }
        }
    }
}

/// Sorts descending and applies the sign convention.
fn finish(u: Array2<f64>, sigma: Array1<f64>, vt: Array2<f64>) -> SvdFactors {
    let r = sigma.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut su = Array2::<f64>::zeros((u.nrows(), r));
    let mut ss = Array1::<f64>::zeros(r);
    let mut svt = Array2::<f64>::zeros((r, vt.ncols()));
    for (dst, &src) in order.iter().enumerate() {
        let row = vt.row(src);
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let flip = row
            .iter()
            .find(|v| v.abs() > 1e-12 * scale)
            .is_some_and(|v| *v < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        ss[dst] = sigma[src];
        su.column_mut(dst).assign(&(&u.column(src) * sign));
        svt.row_mut(dst).assign(&(&row * sign));
    }
    SvdFactors {
        u: su,
        sigma: ss,
        vt: svt,
    }
}

/// Computes `u * diag(sigma) * vt`.
pub fn reconstruct(f: &SvdFactors) -> Result<EmbeddingMatrix> {
    let r = f.sigma.len();
    if f.u.ncols() != r || f.vt.nrows() != r {
        return Err(Error::Dimension(format!(
            "u is {}x{}, sigma has {r} values, vt is {}x{}",
            f.u.nrows(),
            f.u.ncols(),
            f.vt.nrows(),
            f.vt.ncols()
        )));
    }
    let scaled = &f.u * &f.sigma.view().insert_axis(Axis(0));
    EmbeddingMatrix::new(scaled.dot(&f.vt))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 {
        return Err(Error::ZeroNorm { index: Some(0) });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { index: Some(1) });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    norm(v)
}
