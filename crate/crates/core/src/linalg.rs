//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Shift matrix of the Brunovsky pair: ones on the first superdiagonal.
pub fn shift_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 })
}

/// Last unit vector `e_n`.
pub fn last_unit(n: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    if n > 0 {
        e[n - 1] = 1.0;
    }
    e
}

/// `A_c w + B_c y`: drop the oldest entry, append `y`.
pub fn shift_in(window: &[f64], y: f64) -> Vec<f64> {
    let mut next = Vec::with_capacity(window.len());
    if !window.is_empty() {
        next.extend_from_slice(&window[1..]);
        next.push(y);
    }
    next
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

/// Spectral (induced 2-) norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Number of singular values above `max(rows, cols) * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * top;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Vertical concatenation; all blocks must share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Horizontal concatenation; all blocks must share a row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Uniformly distributed direction on the unit sphere in `R^dim`.
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with row-major data.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct MatrixRecord {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&DMatrix<f64>> for MatrixRecord {
        fn from(m: &DMatrix<f64>) -> Self {
            let mut data = Vec::with_capacity(m.len());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    data.push(m[(i, j)]);
                }
            }
            Self {
                rows: m.nrows(),
                cols: m.ncols(),
                data,
            }
        }
    }

    impl MatrixRecord {
        pub fn into_matrix(self) -> Result<DMatrix<f64>, String> {
            if self.rows * self.cols != self.data.len() {
                return Err(format!(
                    "matrix record {}x{} carries {} entries",
                    self.rows,
                    self.cols,
                    self.data.len()
                ));
            }
            Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        MatrixRecord::deserialize(d)?
            .into_matrix()
            .map_err(serde::de::Error::custom)
    }
}
