//! The truncated state space, the diagonal operator `A`, and its
//! contraction semigroup `S(t) = e^{-tA}`.
//!
//! Everything lives in the span of the first `d` eigenvectors of `A`,
//! so a state is just its `d` coordinates in that basis and the
//! semigroup acts coordinatewise as `exp(-λ_k τ)`.  Keeping `A`
//! diagonal makes the semigroup exact, which in turn makes the
//! exponential Euler scheme free of any semigroup-approximation error.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("spectrum must contain at least one eigenvalue")]
    EmptySpectrum,
    #[error("eigenvalue {index} is {value}, but eigenvalues must be finite and >= 0")]
    InvalidEigenvalue { index: usize, value: f64 },
    #[error("semigroup time {0} is negative")]
    NegativeTime(f64),
    #[error("dimension mismatch: operator has {expected}, state has {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Element of the truncated Hilbert space: `d` real coordinates in the
/// eigenbasis of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    coeffs: Vec<f64>,
}

impl StateVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        StateVector { coeffs }
    }

    pub fn zeros(d: usize) -> Self {
        StateVector {
            coeffs: vec![0.0; d],
        }
    }

    /// `k`-th coordinate basis vector (0-based) in dimension `d`.
    pub fn basis(d: usize, k: usize) -> Self {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        StateVector { coeffs: v }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of the coordinates; this realises the `H` norm.
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StateVector) -> f64 {
        self.coeffs
            .iter()
            .zip(other.coeffs.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&self, a: f64) -> StateVector {
        StateVector {
            coeffs: self.coeffs.iter().map(|x| a * x).collect(),
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for x in self.coeffs.iter_mut() {
            *x *= a;
        }
    }

    pub fn add(&self, other: &StateVector) -> StateVector {
        debug_assert_eq!(self.dim(), other.dim());
        StateVector {
            coeffs: self
                .coeffs
                .iter()
                .zip(other.coeffs.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        debug_assert_eq!(self.dim(), other.dim());
        StateVector {
            coeffs: self
                .coeffs
                .iter()
                .zip(other.coeffs.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `self += a * v`.
    pub fn axpy(&mut self, a: f64, v: &StateVector) {
        debug_assert_eq!(self.dim(), v.dim());
        for (x, y) in self.coeffs.iter_mut().zip(v.coeffs.iter()) {
            *x += a * y;
        }
    }

    pub fn add_assign(&mut self, v: &StateVector) {
        self.axpy(1.0, v);
    }

    /// Normalise to unit norm; zero vectors are left untouched.
    pub fn normalized(&self) -> StateVector {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            self.scale(1.0 / n)
        }
    }
}

/// Diagonal representation of the maximal monotone operator `A`:
/// nonnegative eigenvalues in a fixed orthonormal eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperator {
    eigenvalues: Vec<f64>,
}

impl SpectralOperator {
    /// Build from an explicit spectrum.  Every eigenvalue must be
    /// finite and nonnegative, which is exactly what makes `e^{-tA}`
    /// a contraction semigroup.
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self, SpectralError> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::EmptySpectrum);
        }
        for (index, &value) in eigenvalues.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(SpectralError::InvalidEigenvalue { index, value });
            }
        }
        Ok(SpectralOperator { eigenvalues })
    }

    /// Heat-like spectrum `λ_k = c k²`, `k = 1..=d`.  With `c = 0` the
    /// semigroup is the identity and the equation reduces to an SDE.
    pub fn quadratic(d: usize, c: f64) -> Result<Self, SpectralError> {
        if !c.is_finite() || c < 0.0 {
            return Err(SpectralError::InvalidEigenvalue { index: 0, value: c });
        }
        SpectralOperator::new((1..=d).map(|k| c * (k * k) as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Coordinatewise decay factors `exp(-λ_k τ)`.
    pub fn semigroup_factors(&self, tau: f64) -> Result<Vec<f64>, SpectralError> {
        if !(tau >= 0.0) {
            return Err(SpectralError::NegativeTime(tau));
        }
        Ok(self.eigenvalues.iter().map(|l| (-l * tau).exp()).collect())
    }

    /// Apply `S(τ) = e^{-τA}`: `result_k = exp(-λ_k τ) x_k`.
    pub fn semigroup_apply(&self, tau: f64, x: &StateVector) -> Result<StateVector, SpectralError> {
        if !(tau >= 0.0) {
            return Err(SpectralError::NegativeTime(tau));
        }
        if x.dim() != self.dim() {
            return Err(SpectralError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        let coeffs = self
            .eigenvalues
            .iter()
            .zip(x.coeffs())
            .map(|(l, v)| (-l * tau).exp() * v)
            .collect();
        Ok(StateVector::new(coeffs))
    }
}

/// The Hilbert norm of a state (free function mirroring the public
/// operation surface; identical to [`StateVector::norm`]).
pub fn hilbert_norm(x: &StateVector) -> f64 {
    x.norm()
}
