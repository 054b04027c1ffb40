//! Dense row-major matrices at truncation scale (a few dozen rows at
//! most).  Nothing here tries to be fast beyond what the inner solver
//! loop needs: matrix-vector products and an operator-norm estimate.

use crate::spectral::StateVector;

/// Dense `rows x cols` matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data; panics if the length does not match.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &StateVector) -> StateVector {
        assert_eq!(self.cols, x.dim(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.coeffs()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        StateVector::new(out)
    }

    /// `y = M x` for a raw slice argument (used with Wiener increments).
    pub fn matvec_slice(&self, x: &[f64]) -> StateVector {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        StateVector::new(out)
    }

    /// Frobenius (Hilbert-Schmidt) norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest Euclidean row norm.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Spectral norm via power iteration on `MᵀM`, restarted from a few
    /// deterministic seeds so a degenerate start cannot stall it.
    pub fn operator_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut best: f64 = 0.0;
        for start in 0..3u64 {
            let mut v: Vec<f64> = (0..self.cols)
                .map(|j| {
                    let x = (j as f64 + 1.0) * (start as f64 + 1.0);
                    (x.sin() + 1.5).abs()
                })
                .collect();
            let mut norm_sq = 0.0;
            for _ in 0..200 {
                // w = M v
                let mut w = vec![0.0; self.rows];
                for i in 0..self.rows {
                    let row = &self.data[i * self.cols..(i + 1) * self.cols];
                    w[i] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                }
                // v' = Mᵀ w
                let mut v2 = vec![0.0; self.cols];
                for i in 0..self.rows {
                    let row = &self.data[i * self.cols..(i + 1) * self.cols];
                    for (j, a) in row.iter().enumerate() {
                        v2[j] += a * w[i];
                    }
                }
                norm_sq = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm_sq == 0.0 {
                    break;
                }
                for x in v2.iter_mut() {
                    *x /= norm_sq;
                }
                v = v2;
            }
            best = best.max(norm_sq.sqrt());
        }
        best
    }
}
