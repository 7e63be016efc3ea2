//! Dense real linear algebra used by batch selection.
//!
//! Two independent routes to a Gram log-determinant live here: a Cholesky
//! factorization of the assembled matrix, and the product of squared
//! modified Gram-Schmidt residual norms. The greedy selector only ever uses
//! the second; the first exists so the two can be checked against each other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative asymmetry tolerated by [`cholesky_logdet`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A residual whose norm falls below this fraction of the input norm gets a
/// second projection pass.
pub const REORTH_RATIO: f64 = 1e-3;

/// Relative residual norm below which a vector is treated as lying in the
/// span of its predecessors.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric at ({row}, {col}): asymmetry {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("residual norm {norm:e} below extension threshold {min_norm:e}")]
    Saturated { norm: f64, min_norm: f64 },
    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("basis vectors are not orthonormal: {0}")]
    NotOrthonormal(String),
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, actual: x.len() });
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `A Aᵀ`: the Gram matrix of the rows. Filled symmetrically.
    pub fn gram_of_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for s in 0..n {
            for t in s..n {
                let v = dot(self.row(s), self.row(t));
                g.data[s * n + t] = v;
                g.data[t * n + s] = v;
            }
        }
        g
    }

    /// Principal submatrix on the given row/column indices.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Matrix {
        let n = idx.len();
        let mut sub = Matrix::zeros(n, n);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub.data[a * n + b] = self.get(i, j);
            }
        }
        sub
    }

    /// Selects rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn add_diagonal(&mut self, lambda: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += lambda;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
///
/// Fails rather than clamping: callers that need a defined value for a
/// singular matrix add jitter to the diagonal first.
pub fn cholesky_logdet(m: &Matrix) -> Result<f64, LinalgError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    let scale = m.as_slice().iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for r in 0..n {
        for c in (r + 1)..n {
            let gap = (m.get(r, c) - m.get(c, r)).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { row: r, col: c, gap });
            }
        }
    }

    // Lower factor, row-major.
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i, value: sum });
                }
                let d = sum.sqrt();
                l[i * n + i] = d;
                logdet += 2.0 * d.ln();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(logdet)
}

/// Ordered family of orthonormal vectors in a fixed ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl OrthoBasis {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: Vec::new() }
    }

    /// Wraps vectors that are already orthonormal, checking that they are.
    pub fn from_orthonormal(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, LinalgError> {
        if vectors.len() > dim {
            return Err(LinalgError::NotOrthonormal(format!("{} vectors in dimension {dim}", vectors.len())));
        }
        for (a, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(LinalgError::DimensionMismatch { expected: dim, actual: v.len() });
            }
            let norm = dot(v, v).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(LinalgError::NotOrthonormal(format!("vector {a} has norm {norm}")));
            }
            for (b, w) in vectors[..a].iter().enumerate() {
                let c = dot(v, w);
                if c.abs() > 1e-10 {
                    return Err(LinalgError::NotOrthonormal(format!("vectors {b} and {a} have dot {c:e}")));
                }
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// One sequential (modified Gram-Schmidt) sweep. Returns the number of
    /// inner products spent.
    pub fn project_out(&self, r: &mut [f64]) -> usize {
        for q in &self.vectors {
            let c = dot(q, r);
            r.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
        }
        self.vectors.len()
    }

    /// Residual of `v` after removing its components along every basis
    /// vector, with its squared norm.
    pub fn residual(&self, v: &[f64]) -> Result<(Vec<f64>, f64), LinalgError> {
        if v.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, actual: v.len() });
        }
        let mut r = v.to_vec();
        self.project_out(&mut r);
        let mut sq = dot(&r, &r);
        if sq > 0.0 && sq < REORTH_RATIO * REORTH_RATIO * dot(v, v) {
            self.project_out(&mut r);
            sq = dot(&r, &r);
        }
        Ok((r, sq))
    }

    /// Appends `residual / ‖residual‖`. Leaves the basis untouched and
    /// returns [`LinalgError::Saturated`] when the norm is below `min_norm`
    /// (or zero, or the basis already spans the space).
    pub fn extend(&mut self, residual: &[f64], min_norm: f64) -> Result<(), LinalgError> {
        if residual.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, actual: residual.len() });
        }
        let norm = dot(residual, residual).sqrt();
        if !(norm > 0.0) || norm < min_norm || self.vectors.len() == self.dim {
            return Err(LinalgError::Saturated { norm, min_norm });
        }
        self.vectors.push(residual.iter().map(|x| x / norm).collect());
        Ok(())
    }
}

/// `log det` of the Gram matrix of `vectors`, as the sum of log squared
/// residual norms from sequential orthogonalization.
///
/// Returns `f64::NEG_INFINITY` when the family is (numerically) linearly
/// dependent. An empty family has log-det 0.
///
/// # Panics
///
/// If the vectors do not all have the same length.
pub fn gram_logdet_by_residuals<V: AsRef<[f64]>>(vectors: &[V]) -> f64 {
    let Some(first) = vectors.first() else {
        return 0.0;
    };
    let mut basis = OrthoBasis::new(first.as_ref().len());
    let mut acc = 0.0;
    for v in vectors {
        let v = v.as_ref();
        let (r, sq) = basis.residual(v).expect("vectors of unequal length");
        if !(sq > RANK_TOL * RANK_TOL * dot(v, v)) {
            return f64::NEG_INFINITY;
        }
        acc += sq.ln();
        if basis.extend(&r, 0.0).is_err() {
            return f64::NEG_INFINITY;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cholesky_identity_is_zero() {
        assert_eq!(cholesky_logdet(&Matrix::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn cholesky_two_by_two() {
        // det [[2,1],[1,2]] = 2*2 - 1*1 = 3
        let ld = cholesky_logdet(&mat(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((ld - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_singular_and_asymmetric() {
        assert!(matches!(
            cholesky_logdet(&mat(&[&[1.0, 1.0], &[1.0, 1.0]])),
            Err(LinalgError::NotPositiveDefinite { pivot: 1, .. })
        ));
        assert!(matches!(
            cholesky_logdet(&mat(&[&[2.0, 1.0], &[0.5, 2.0]])),
            Err(LinalgError::NotSymmetric { .. })
        ));
        assert!(matches!(cholesky_logdet(&Matrix::zeros(2, 3)), Err(LinalgError::NotSquare { .. })));
    }

    #[test]
    fn residual_examples() {
        let b = OrthoBasis::from_orthonormal(2, vec![vec![1.0, 0.0]]).unwrap();
        let (r, sq) = b.residual(&[1.0, 1.0]).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
        assert_eq!(sq, 1.0);

        let (r, sq) = OrthoBasis::new(2).residual(&[3.0, 4.0]).unwrap();
        assert_eq!(r, vec![3.0, 4.0]);
        assert_eq!(sq, 25.0);

        let full = OrthoBasis::from_orthonormal(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (r, sq) = full.residual(&[2.0, 5.0]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
        assert_eq!(sq, 0.0);

        assert!(matches!(full.residual(&[1.0]), Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn extend_examples() {
        let mut b = OrthoBasis::new(2);
        b.extend(&[0.0, 2.0], 1e-8).unwrap();
        assert_eq!(b.vectors(), &[vec![0.0, 1.0]]);

        let mut b = OrthoBasis::from_orthonormal(2, vec![vec![1.0, 0.0]]).unwrap();
        let before = b.clone();
        assert!(matches!(b.extend(&[0.0, 1e-12], 1e-8), Err(LinalgError::Saturated { .. })));
        assert_eq!(b, before);

        b.extend(&[0.0, 3.0], 1e-8).unwrap();
        assert_eq!(b.vectors(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(b.extend(&[1.0, 1.0], 0.0), Err(LinalgError::Saturated { .. })));
    }

    #[test]
    fn gram_logdet_small_families() {
        assert_eq!(gram_logdet_by_residuals(&[[1.0, 0.0], [0.0, 1.0]]), 0.0);
        // Gram [[1,1],[1,2]] has determinant 1*2 - 1*1 = 1.
        assert!(gram_logdet_by_residuals(&[[1.0, 0.0], [1.0, 1.0]]).abs() < 1e-15);
        assert_eq!(gram_logdet_by_residuals(&[[1.0, 2.0], [2.0, 4.0]]), f64::NEG_INFINITY);
        assert_eq!(gram_logdet_by_residuals::<Vec<f64>>(&[]), 0.0);
    }

    #[test]
    fn gram_logdet_matches_cholesky_square_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u = Matrix::from_rows(&rows).unwrap();
        let by_chol = cholesky_logdet(&u.gram_of_rows()).unwrap();
        let by_mgs = gram_logdet_by_residuals(&rows);
        assert!((by_chol - by_mgs).abs() <= 1e-8 * by_chol.abs().max(1.0), "{by_chol} vs {by_mgs}");
    }

    #[test]
    fn matrix_deserialize_validates_shape() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
        let good = r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#;
        assert_eq!(serde_json::from_str::<Matrix>(good).unwrap().row(0), &[1.0, 2.0]);
    }
}
