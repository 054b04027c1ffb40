//! Coefficient sets `(f, B, G)` with evaluation of their multilinear
//! derivatives up to a configured order, plus the Lipschitz/growth
//! metadata the well-posedness and differentiability checks consume.
//!
//! Only built-in coefficient families are provided (selected by name in
//! the run configuration): affine fixtures with exactly vanishing
//! higher derivatives, and compositions `x ↦ γ(Lx)` whose first
//! derivative is bounded but whose higher derivatives grow
//! polynomially.  All built-ins are autonomous; the time argument is
//! carried through so time-dependent families can be added without
//! touching call sites.

pub mod gamma;

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::spectral::StateVector;
pub use gamma::{GammaError, GammaFunction};

#[derive(Debug, Error, PartialEq)]
pub enum CoefficientError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("derivative order not available: requested {requested}, n_max is {n_max}")]
    OrderUnavailable { requested: usize, n_max: usize },
    #[error("derivative order must be at least 1")]
    ZeroOrder,
    #[error("{got} directions supplied for a derivative of order {order}")]
    DirectionCount { order: usize, got: usize },
    #[error("gamma table too small: coefficient needs derivatives up to {needed}, table has {available}")]
    GammaOrder { needed: usize, available: usize },
    #[error(transparent)]
    Gamma(#[from] GammaError),
}

/// Saturating γ evaluation for the solver's hot path: out-of-range
/// arguments become signed infinities, which the path-level blowup
/// flag then picks up instead of unwinding the ensemble.
fn gamma_saturating(g: &GammaFunction, r: f64, order: usize) -> f64 {
    match g.eval(r, order) {
        Ok(v) => v,
        Err(GammaError::ArgumentOutOfRange(_)) => f64::INFINITY.copysign(r),
        Err(e) => panic!("gamma order invariant violated: {e}"),
    }
}

/// Drift coefficient `f(t, x)`.
#[derive(Debug, Clone)]
pub enum Drift {
    Zero,
    /// `f(x) = offset + linear x`
    Affine { offset: StateVector, linear: Matrix },
    /// `f(x)_k = γ((Lx)_k)`
    Nemytskii { l: Matrix, gamma: Arc<GammaFunction> },
}

impl Drift {
    pub fn affine(offset: StateVector, linear: Matrix) -> Result<Self, CoefficientError> {
        if linear.rows() != linear.cols() || linear.rows() != offset.dim() {
            return Err(CoefficientError::DimensionMismatch(format!(
                "affine drift: offset dim {} vs matrix {}x{}",
                offset.dim(),
                linear.rows(),
                linear.cols()
            )));
        }
        Ok(Drift::Affine { offset, linear })
    }

    pub fn nemytskii(l: Matrix, gamma: Arc<GammaFunction>) -> Result<Self, CoefficientError> {
        if l.rows() != l.cols() {
            return Err(CoefficientError::DimensionMismatch(format!(
                "nemytskii drift: matrix {}x{} is not square",
                l.rows(),
                l.cols()
            )));
        }
        Ok(Drift::Nemytskii { l, gamma })
    }

    fn eval(&self, _t: f64, x: &StateVector) -> StateVector {
        match self {
            Drift::Zero => StateVector::zeros(x.dim()),
            Drift::Affine { offset, linear } => {
                let mut out = linear.matvec(x);
                out.add_assign(offset);
                out
            }
            Drift::Nemytskii { l, gamma } => {
                let lx = l.matvec(x);
                StateVector::new(
                    lx.coeffs()
                        .iter()
                        .map(|&r| gamma_saturating(gamma, r, 0))
                        .collect(),
                )
            }
        }
    }

    fn derivative(
        &self,
        order: usize,
        _t: f64,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> StateVector {
        match self {
            Drift::Zero => StateVector::zeros(x.dim()),
            Drift::Affine { linear, .. } => {
                if order == 1 {
                    linear.matvec(dirs[0])
                } else {
                    StateVector::zeros(x.dim())
                }
            }
            Drift::Nemytskii { l, gamma } => {
                let lx = l.matvec(x);
                let ldirs: Vec<StateVector> = dirs.iter().map(|v| l.matvec(v)).collect();
                let mut out = vec![0.0; x.dim()];
                for k in 0..x.dim() {
                    let mut prod = gamma_saturating(gamma, lx.coeffs()[k], order);
                    for lv in &ldirs {
                        prod *= lv.coeffs()[k];
                    }
                    out[k] = prod;
                }
                StateVector::new(out)
            }
        }
    }

    fn lipschitz_metadata(&self) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Affine { offset, linear } => linear.operator_norm().max(offset.norm()),
            Drift::Nemytskii { l, .. } => l.operator_norm(),
        }
    }

    fn growth_degree(&self, n_max: usize) -> u32 {
        match self {
            Drift::Nemytskii { .. } => n_max.saturating_sub(1) as u32,
            _ => 0,
        }
    }

    fn needed_gamma_order(&self, n_max: usize) -> Option<(usize, usize)> {
        match self {
            Drift::Nemytskii { gamma, .. } => Some((n_max, gamma.n_max())),
            _ => None,
        }
    }
}

/// Diffusion coefficient `B(t, x)`, a `d x d_W` Hilbert-Schmidt map.
#[derive(Debug, Clone)]
pub enum Diffusion {
    Zero,
    Constant(Matrix),
    /// `B(x)_{kj} = γ((Lx)_k) W_{kj}`
    Nemytskii {
        l: Matrix,
        weight: Matrix,
        gamma: Arc<GammaFunction>,
    },
}

impl Diffusion {
    pub fn nemytskii(
        l: Matrix,
        weight: Matrix,
        gamma: Arc<GammaFunction>,
    ) -> Result<Self, CoefficientError> {
        if l.rows() != l.cols() || weight.rows() != l.rows() {
            return Err(CoefficientError::DimensionMismatch(format!(
                "nemytskii diffusion: L is {}x{}, weight is {}x{}",
                l.rows(),
                l.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Diffusion::Nemytskii { l, weight, gamma })
    }

    fn eval(&self, _t: f64, x: &StateVector, d_w: usize) -> Matrix {
        match self {
            Diffusion::Zero => Matrix::zeros(x.dim(), d_w),
            Diffusion::Constant(b) => b.clone(),
            Diffusion::Nemytskii { l, weight, gamma } => {
                let lx = l.matvec(x);
                let mut out = Matrix::zeros(x.dim(), d_w);
                for k in 0..x.dim() {
                    let gk = gamma_saturating(gamma, lx.coeffs()[k], 0);
                    for j in 0..d_w {
                        out.set(k, j, gk * weight.get(k, j));
                    }
                }
                out
            }
        }
    }

    fn derivative(
        &self,
        order: usize,
        _t: f64,
        x: &StateVector,
        dirs: &[&StateVector],
        d_w: usize,
    ) -> Matrix {
        match self {
            Diffusion::Zero | Diffusion::Constant(_) => Matrix::zeros(x.dim(), d_w),
            Diffusion::Nemytskii { l, weight, gamma } => {
                let lx = l.matvec(x);
                let ldirs: Vec<StateVector> = dirs.iter().map(|v| l.matvec(v)).collect();
                let mut out = Matrix::zeros(x.dim(), d_w);
                for k in 0..x.dim() {
                    let mut prod = gamma_saturating(gamma, lx.coeffs()[k], order);
                    for lv in &ldirs {
                        prod *= lv.coeffs()[k];
                    }
                    for j in 0..d_w {
                        out.set(k, j, prod * weight.get(k, j));
                    }
                }
                out
            }
        }
    }

    fn lipschitz_metadata(&self) -> f64 {
        match self {
            Diffusion::Zero => 0.0,
            Diffusion::Constant(b) => b.frobenius_norm(),
            Diffusion::Nemytskii { l, weight, .. } => {
                weight.max_row_norm() * l.operator_norm()
            }
        }
    }

    fn growth_degree(&self, n_max: usize) -> u32 {
        match self {
            Diffusion::Nemytskii { .. } => n_max.saturating_sub(1) as u32,
            _ => 0,
        }
    }

    fn needed_gamma_order(&self, n_max: usize) -> Option<(usize, usize)> {
        match self {
            Diffusion::Nemytskii { gamma, .. } => Some((n_max, gamma.n_max())),
            _ => None,
        }
    }
}

/// Jump coefficient `G(t, z, x)`; the mark enters through the scalar
/// factor `z`, so `G(t, z, x) = z · base(x)`.
#[derive(Debug, Clone)]
pub enum Jump {
    Zero,
    /// `G(z, x) = z (offset + linear x)`
    MarkAffine { offset: StateVector, linear: Matrix },
    /// `G(z, x)_k = z γ((Lx)_k)`
    MarkNemytskii { l: Matrix, gamma: Arc<GammaFunction> },
    /// `factor · inner`, used to express explicit splits `G = G₁ + G₂`.
    Scaled { inner: Box<Jump>, factor: f64 },
}

impl Jump {
    pub fn mark_affine(offset: StateVector, linear: Matrix) -> Result<Self, CoefficientError> {
        if linear.rows() != linear.cols() || linear.rows() != offset.dim() {
            return Err(CoefficientError::DimensionMismatch(format!(
                "mark-affine jump: offset dim {} vs matrix {}x{}",
                offset.dim(),
                linear.rows(),
                linear.cols()
            )));
        }
        Ok(Jump::MarkAffine { offset, linear })
    }

    pub fn mark_nemytskii(l: Matrix, gamma: Arc<GammaFunction>) -> Result<Self, CoefficientError> {
        if l.rows() != l.cols() {
            return Err(CoefficientError::DimensionMismatch(format!(
                "mark-nemytskii jump: matrix {}x{} is not square",
                l.rows(),
                l.cols()
            )));
        }
        Ok(Jump::MarkNemytskii { l, gamma })
    }

    pub fn scaled(inner: Jump, factor: f64) -> Self {
        Jump::Scaled {
            inner: Box::new(inner),
            factor,
        }
    }

    pub fn eval(&self, t: f64, z: f64, x: &StateVector) -> StateVector {
        match self {
            Jump::Zero => StateVector::zeros(x.dim()),
            Jump::MarkAffine { offset, linear } => {
                let mut out = linear.matvec(x);
                out.add_assign(offset);
                out.scale_in_place(z);
                out
            }
            Jump::MarkNemytskii { l, gamma } => {
                let lx = l.matvec(x);
                StateVector::new(
                    lx.coeffs()
                        .iter()
                        .map(|&r| z * gamma_saturating(gamma, r, 0))
                        .collect(),
                )
            }
            Jump::Scaled { inner, factor } => inner.eval(t, z, x).scale(*factor),
        }
    }

    pub fn derivative(
        &self,
        order: usize,
        t: f64,
        z: f64,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> StateVector {
        match self {
            Jump::Zero => StateVector::zeros(x.dim()),
            Jump::MarkAffine { linear, .. } => {
                if order == 1 {
                    linear.matvec(dirs[0]).scale(z)
                } else {
                    StateVector::zeros(x.dim())
                }
            }
            Jump::MarkNemytskii { l, gamma } => {
                let lx = l.matvec(x);
                let ldirs: Vec<StateVector> = dirs.iter().map(|v| l.matvec(v)).collect();
                let mut out = vec![0.0; x.dim()];
                for k in 0..x.dim() {
                    let mut prod = z * gamma_saturating(gamma, lx.coeffs()[k], order);
                    for lv in &ldirs {
                        prod *= lv.coeffs()[k];
                    }
                    out[k] = prod;
                }
                StateVector::new(out)
            }
            Jump::Scaled { inner, factor } => {
                inner.derivative(order, t, z, x, dirs).scale(*factor)
            }
        }
    }

    /// Per-mark Lipschitz/growth bound `g(t, z)`: both
    /// `‖G(z,x)-G(z,y)‖ ≤ g(t,z)‖x-y‖` and `‖G(z,x)‖ ≤ g(t,z)(1+‖x‖)`.
    pub fn bound(&self, _t: f64, z: f64) -> f64 {
        match self {
            Jump::Zero => 0.0,
            Jump::MarkAffine { offset, linear } => {
                z.abs() * linear.operator_norm().max(offset.norm())
            }
            Jump::MarkNemytskii { l, .. } => z.abs() * l.operator_norm(),
            Jump::Scaled { inner, factor } => factor.abs() * inner.bound(_t, z),
        }
    }

    fn growth_degree(&self, n_max: usize) -> u32 {
        match self {
            Jump::MarkNemytskii { .. } => n_max.saturating_sub(1) as u32,
            Jump::Scaled { inner, .. } => inner.growth_degree(n_max),
            _ => 0,
        }
    }

    fn needed_gamma_order(&self, n_max: usize) -> Option<(usize, usize)> {
        match self {
            Jump::MarkNemytskii { gamma, .. } => Some((n_max, gamma.n_max())),
            Jump::Scaled { inner, .. } => inner.needed_gamma_order(n_max),
            _ => None,
        }
    }

    fn state_dim(&self) -> Option<usize> {
        match self {
            Jump::Zero => None,
            Jump::MarkAffine { offset, .. } => Some(offset.dim()),
            Jump::MarkNemytskii { l, .. } => Some(l.rows()),
            Jump::Scaled { inner, .. } => inner.state_dim(),
        }
    }
}

/// Which coefficient a derivative request addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffTarget {
    Drift,
    Diffusion,
    Jump,
}

/// Value of a coefficient or one of its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum CoeffValue {
    Vector(StateVector),
    Matrix(Matrix),
}

impl CoeffValue {
    pub fn norm(&self) -> f64 {
        match self {
            CoeffValue::Vector(v) => v.norm(),
            CoeffValue::Matrix(m) => m.frobenius_norm(),
        }
    }

    pub fn scale(&self, a: f64) -> CoeffValue {
        match self {
            CoeffValue::Vector(v) => CoeffValue::Vector(v.scale(a)),
            CoeffValue::Matrix(m) => CoeffValue::Matrix(m.scale(a)),
        }
    }

    /// `self - other`; panics on mismatched variants or shapes.
    pub fn sub(&self, other: &CoeffValue) -> CoeffValue {
        match (self, other) {
            (CoeffValue::Vector(a), CoeffValue::Vector(b)) => CoeffValue::Vector(a.sub(b)),
            (CoeffValue::Matrix(a), CoeffValue::Matrix(b)) => {
                let mut out = a.clone();
                out.add_assign(&b.scale(-1.0));
                CoeffValue::Matrix(out)
            }
            _ => panic!("mismatched coefficient value variants"),
        }
    }
}

/// A complete coefficient set with derivative evaluators up to `n_max`
/// and the constants of the linear-growth/Lipschitz hypotheses.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    drift: Drift,
    diffusion: Diffusion,
    jump: Jump,
    jump_split: Option<(Jump, Jump)>,
    n_max: usize,
    dim: usize,
    wiener_dim: usize,
    lip_f: f64,
    lip_b: f64,
    growth_degree: u32,
}

impl CoefficientSet {
    pub fn new(
        drift: Drift,
        diffusion: Diffusion,
        jump: Jump,
        n_max: usize,
        dim: usize,
        wiener_dim: usize,
    ) -> Result<Self, CoefficientError> {
        if n_max == 0 {
            return Err(CoefficientError::ZeroOrder);
        }
        // shape checks against the declared dimensions
        match &drift {
            Drift::Affine { offset, .. } if offset.dim() != dim => {
                return Err(CoefficientError::DimensionMismatch(format!(
                    "drift dimension {} vs state dimension {dim}",
                    offset.dim()
                )))
            }
            Drift::Nemytskii { l, .. } if l.rows() != dim => {
                return Err(CoefficientError::DimensionMismatch(format!(
                    "drift matrix {}x{} vs state dimension {dim}",
                    l.rows(),
                    l.cols()
                )))
            }
            _ => {}
        }
        match &diffusion {
            Diffusion::Constant(b) if b.rows() != dim || b.cols() != wiener_dim => {
                return Err(CoefficientError::DimensionMismatch(format!(
                    "diffusion matrix {}x{} vs {dim}x{wiener_dim}",
                    b.rows(),
                    b.cols()
                )))
            }
            Diffusion::Nemytskii { l, weight, .. }
                if l.rows() != dim || weight.cols() != wiener_dim =>
            {
                return Err(CoefficientError::DimensionMismatch(format!(
                    "diffusion shapes L {}x{}, weight {}x{} vs {dim}x{wiener_dim}",
                    l.rows(),
                    l.cols(),
                    weight.rows(),
                    weight.cols()
                )))
            }
            _ => {}
        }
        if let Some(gd) = jump.state_dim() {
            if gd != dim {
                return Err(CoefficientError::DimensionMismatch(format!(
                    "jump coefficient dimension {gd} vs state dimension {dim}"
                )));
            }
        }
        for check in [
            drift.needed_gamma_order(n_max),
            diffusion.needed_gamma_order(n_max),
            jump.needed_gamma_order(n_max),
        ]
        .into_iter()
        .flatten()
        {
            let (needed, available) = check;
            if needed > available {
                return Err(CoefficientError::GammaOrder { needed, available });
            }
        }

        let lip_f = drift.lipschitz_metadata();
        let lip_b = diffusion.lipschitz_metadata();
        let growth_degree = drift
            .growth_degree(n_max)
            .max(diffusion.growth_degree(n_max))
            .max(jump.growth_degree(n_max));

        Ok(CoefficientSet {
            drift,
            diffusion,
            jump,
            jump_split: None,
            n_max,
            dim,
            wiener_dim,
            lip_f,
            lip_b,
            growth_degree,
        })
    }

    /// Attach an explicit split `G = G₁ + G₂` (required by the `G^p`
    /// quasi-norm for `p ∈ (1,2)`).  The caller is responsible for the
    /// two parts actually summing to `G`.
    pub fn with_jump_split(mut self, g1: Jump, g2: Jump) -> Self {
        self.jump_split = Some((g1, g2));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn wiener_dim(&self) -> usize {
        self.wiener_dim
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Lipschitz/linear-growth constant of `f`.
    pub fn c_f(&self) -> f64 {
        self.lip_f
    }

    /// Lipschitz/linear-growth constant of `B` in Hilbert-Schmidt norm.
    pub fn c_b(&self) -> f64 {
        self.lip_b
    }

    /// Polynomial growth degree `m` of the derivatives of order >= 2.
    pub fn growth_degree(&self) -> u32 {
        self.growth_degree
    }

    pub fn jump(&self) -> &Jump {
        &self.jump
    }

    pub fn jump_split(&self) -> Option<&(Jump, Jump)> {
        self.jump_split.as_ref()
    }

    pub fn f(&self, t: f64, x: &StateVector) -> StateVector {
        self.drift.eval(t, x)
    }

    pub fn b(&self, t: f64, x: &StateVector) -> Matrix {
        self.diffusion.eval(t, x, self.wiener_dim)
    }

    pub fn g(&self, t: f64, z: f64, x: &StateVector) -> StateVector {
        self.jump.eval(t, z, x)
    }

    fn check_order(&self, order: usize, dirs: &[&StateVector]) -> Result<(), CoefficientError> {
        if order == 0 {
            return Err(CoefficientError::ZeroOrder);
        }
        if order > self.n_max {
            return Err(CoefficientError::OrderUnavailable {
                requested: order,
                n_max: self.n_max,
            });
        }
        if dirs.len() != order {
            return Err(CoefficientError::DirectionCount {
                order,
                got: dirs.len(),
            });
        }
        Ok(())
    }

    /// `D^order f(t,x)[v_1..v_order]`.
    pub fn df(
        &self,
        order: usize,
        t: f64,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> Result<StateVector, CoefficientError> {
        self.check_order(order, dirs)?;
        Ok(self.drift.derivative(order, t, x, dirs))
    }

    /// `D^order B(t,x)[v_1..v_order]`.
    pub fn db(
        &self,
        order: usize,
        t: f64,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> Result<Matrix, CoefficientError> {
        self.check_order(order, dirs)?;
        Ok(self.diffusion.derivative(order, t, x, dirs, self.wiener_dim))
    }

    /// `D^order G(t,z,x)[v_1..v_order]`.
    pub fn dg(
        &self,
        order: usize,
        t: f64,
        z: f64,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> Result<StateVector, CoefficientError> {
        self.check_order(order, dirs)?;
        Ok(self.jump.derivative(order, t, z, x, dirs))
    }

    /// Uniform derivative dispatch across the three coefficients.
    pub fn eval_derivative(
        &self,
        target: CoeffTarget,
        order: usize,
        t: f64,
        z: Option<f64>,
        x: &StateVector,
        dirs: &[&StateVector],
    ) -> Result<CoeffValue, CoefficientError> {
        match target {
            CoeffTarget::Drift => self.df(order, t, x, dirs).map(CoeffValue::Vector),
            CoeffTarget::Diffusion => self.db(order, t, x, dirs).map(CoeffValue::Matrix),
            CoeffTarget::Jump => {
                let z = z.unwrap_or(0.0);
                self.dg(order, t, z, x, dirs).map(CoeffValue::Vector)
            }
        }
    }

    /// The bound function `g(t, z)` of the jump coefficient.
    pub fn g_bound(&self, t: f64, z: f64) -> f64 {
        self.jump.bound(t, z)
    }

    /// Bounds `(g₁, g₂)` for the split: the explicit one when
    /// configured, otherwise the canonical `g/2` split.
    pub fn g_split_bounds(&self, t: f64, z: f64) -> (f64, f64) {
        match &self.jump_split {
            Some((g1, g2)) => (g1.bound(t, z), g2.bound(t, z)),
            None => {
                let half = 0.5 * self.jump.bound(t, z);
                (half, half)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_vec(r: &mut ChaCha12Rng, d: usize, scale: f64) -> StateVector {
        StateVector::new((0..d).map(|_| (r.random::<f64>() - 0.5) * 2.0 * scale).collect())
    }

    fn random_matrix(r: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_rows(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| (r.random::<f64>() - 0.5) * 2.0 * scale)
                .collect(),
        )
    }

    fn nemytskii_set(d: usize, n_max: usize, seed: u64, norm: f64) -> CoefficientSet {
        let mut r = rng(seed);
        let mut l = random_matrix(&mut r, d, d, 1.0);
        let op = l.operator_norm();
        l = l.scale(norm / op);
        let gamma = Arc::new(GammaFunction::new(n_max));
        CoefficientSet::new(
            Drift::nemytskii(l, gamma).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            n_max,
            d,
            0,
        )
        .unwrap()
    }

    #[test]
    fn affine_drift_examples() {
        let f0 = StateVector::new(vec![1.0, -2.0]);
        let f1 = Matrix::from_rows(2, 2, vec![0.5, 0.0, 0.25, -0.5]);
        let set = CoefficientSet::new(
            Drift::affine(f0.clone(), f1).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            3,
            2,
            0,
        )
        .unwrap();
        // f(0) = F0
        assert_eq!(set.f(0.0, &StateVector::zeros(2)), f0);
        // D²f = 0 everywhere
        let x = StateVector::new(vec![0.3, 0.7]);
        let v = StateVector::new(vec![1.0, 2.0]);
        let d2 = set.df(2, 0.0, &x, &[&v, &v]).unwrap();
        assert_eq!(d2, StateVector::zeros(2));
    }

    #[test]
    fn affine_lipschitz_metadata_vs_sampled_quotients() {
        let mut r = rng(7);
        let f1 = random_matrix(&mut r, 4, 4, 0.8);
        let set = CoefficientSet::new(
            Drift::affine(StateVector::zeros(4), f1).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            2,
            4,
            0,
        )
        .unwrap();
        let c_f = set.c_f();
        let mut max_quotient: f64 = 0.0;
        for _ in 0..20_000 {
            let x = random_vec(&mut r, 4, 2.0);
            let y = random_vec(&mut r, 4, 2.0);
            let num = set.f(0.0, &x).sub(&set.f(0.0, &y)).norm();
            let den = x.sub(&y).norm();
            if den > 1e-12 {
                max_quotient = max_quotient.max(num / den);
            }
        }
        assert!(max_quotient <= c_f * (1.0 + 1e-9));
        // sampling nearly attains the operator norm
        assert!(max_quotient >= 0.8 * c_f, "{max_quotient} vs {c_f}");
    }

    #[test]
    fn nemytskii_second_derivative_closed_form() {
        // d=1, L=(1): D²f(x)[v,w] = 2x cos(x²) v w
        let gamma = Arc::new(GammaFunction::new(4));
        let set = CoefficientSet::new(
            Drift::nemytskii(Matrix::identity(1), gamma).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            4,
            1,
            0,
        )
        .unwrap();
        let x = StateVector::new(vec![1.0]);
        let v = StateVector::new(vec![1.0]);
        let d2 = set.df(2, 0.0, &x, &[&v, &v]).unwrap();
        assert_relative_eq!(d2.coeffs()[0], 2.0 * 1.0f64.cos(), max_relative = 1e-12);
    }

    #[test]
    fn nemytskii_zero_point() {
        // γ(0) = 0 and γ'(0) = 0, so f(0) = 0 and Df(0)v = 0.
        let set = nemytskii_set(3, 3, 5, 0.7);
        assert_eq!(set.f(0.0, &StateVector::zeros(3)), StateVector::zeros(3));
        let v = StateVector::new(vec![1.0, -1.0, 0.5]);
        let d1 = set.df(1, 0.0, &StateVector::zeros(3), &[&v]).unwrap();
        assert_abs_diff_eq!(d1.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn derivative_matches_central_differences() {
        // directional derivatives with equal directions vs central
        // finite differences of f(x + eps v), orders 1..=3
        let set = nemytskii_set(1, 4, 11, 1.0);
        let x = StateVector::new(vec![0.6]);
        let v = StateVector::new(vec![1.0]);
        let f = |eps: f64| {
            let mut xe = x.clone();
            xe.axpy(eps, &v);
            set.f(0.0, &xe).coeffs()[0]
        };
        let h = 1e-4;
        let fd1 = (f(h) - f(-h)) / (2.0 * h);
        let fd2 = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        let h3 = 1e-3;
        let fd3 = (f(2.0 * h3) - 2.0 * f(h3) + 2.0 * f(-h3) - f(-2.0 * h3)) / (2.0 * h3 * h3 * h3);
        let d1 = set.df(1, 0.0, &x, &[&v]).unwrap().coeffs()[0];
        let d2 = set.df(2, 0.0, &x, &[&v, &v]).unwrap().coeffs()[0];
        let d3 = set.df(3, 0.0, &x, &[&v, &v, &v]).unwrap().coeffs()[0];
        assert_relative_eq!(fd1, d1, max_relative = 1e-6);
        assert_relative_eq!(fd2, d2, max_relative = 1e-5);
        assert_relative_eq!(fd3, d3, max_relative = 1e-4);
    }

    #[test]
    fn first_derivative_bounded_by_lipschitz_constant() {
        let set = nemytskii_set(4, 3, 23, 0.5);
        let c_f = set.c_f();
        let mut r = rng(99);
        for _ in 0..10_000 {
            let x = random_vec(&mut r, 4, 3.0);
            let v = random_vec(&mut r, 4, 1.0);
            if v.norm() < 1e-9 {
                continue;
            }
            let dv = set.df(1, 0.0, &x, &[&v]).unwrap();
            assert!(dv.norm() / v.norm() <= c_f * (1.0 + 1e-9));
        }
    }

    #[test]
    fn growth_audit_second_derivative() {
        // max over random x with ‖x‖ ≤ R of ‖D²f(x)‖/(1+‖x‖) stays
        // bounded by the same constant for R in {1, 10, 100}.
        let set = nemytskii_set(3, 3, 31, 0.6);
        let mut r = rng(17);
        let mut ratios = Vec::new();
        for &radius in &[1.0, 10.0, 100.0] {
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let mut x = random_vec(&mut r, 3, 1.0);
                let n = x.norm();
                if n > 0.0 {
                    x.scale_in_place(radius * r.random::<f64>() / n);
                }
                // crude operator-norm estimate of the bilinear map by
                // direction sampling
                let mut op: f64 = 0.0;
                for _ in 0..8 {
                    let v = random_vec(&mut r, 3, 1.0).normalized();
                    let w = random_vec(&mut r, 3, 1.0).normalized();
                    op = op.max(set.df(2, 0.0, &x, &[&v, &w]).unwrap().norm());
                }
                worst = worst.max(op / (1.0 + x.norm()));
            }
            ratios.push(worst);
        }
        let cap = ratios[0].max(1e-6) * 50.0;
        assert!(
            ratios.iter().all(|&w| w <= cap),
            "growth ratios {ratios:?} not uniformly bounded"
        );
    }

    #[test]
    fn gamma_table_must_cover_the_requested_order() {
        let gamma = Arc::new(GammaFunction::new(2));
        let err = CoefficientSet::new(
            Drift::nemytskii(Matrix::identity(2), gamma).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            4,
            2,
            0,
        )
        .unwrap_err();
        assert_eq!(
            err,
            CoefficientError::GammaOrder {
                needed: 4,
                available: 2
            }
        );
    }

    #[test]
    fn order_errors() {
        let set = nemytskii_set(2, 2, 3, 0.5);
        let x = StateVector::zeros(2);
        let v = StateVector::new(vec![1.0, 0.0]);
        assert_eq!(
            set.df(3, 0.0, &x, &[&v, &v, &v]).unwrap_err(),
            CoefficientError::OrderUnavailable {
                requested: 3,
                n_max: 2
            }
        );
        assert_eq!(
            set.df(2, 0.0, &x, &[&v]).unwrap_err(),
            CoefficientError::DirectionCount { order: 2, got: 1 }
        );
    }

    #[test]
    fn zero_direction_annihilates() {
        let set = nemytskii_set(3, 3, 41, 0.8);
        let x = StateVector::new(vec![0.2, -0.4, 0.9]);
        let v = StateVector::new(vec![1.0, 2.0, 3.0]);
        let zero = StateVector::zeros(3);
        let out = set.df(2, 0.0, &x, &[&v, &zero]).unwrap();
        assert_eq!(out, StateVector::zeros(3));
    }

    #[test]
    fn diffusion_growth_and_jump_lipschitz_bounds_hold_on_samples() {
        let gamma = Arc::new(GammaFunction::new(3));
        let mut r = rng(61);
        let l = random_matrix(&mut r, 3, 3, 0.6);
        let w = random_matrix(&mut r, 3, 2, 0.8);
        let gl = random_matrix(&mut r, 3, 3, 0.4);
        let set = CoefficientSet::new(
            Drift::Zero,
            Diffusion::nemytskii(l, w, gamma.clone()).unwrap(),
            Jump::mark_nemytskii(gl, gamma).unwrap(),
            3,
            3,
            2,
        )
        .unwrap();
        let c_b = set.c_b();
        for _ in 0..5000 {
            let x = random_vec(&mut r, 3, 4.0);
            let y = random_vec(&mut r, 3, 4.0);
            // Hilbert-Schmidt growth bound on B
            assert!(set.b(0.0, &x).frobenius_norm() <= c_b * (1.0 + x.norm()) * (1.0 + 1e-9));
            // Lipschitz bound on B
            let mut diff = set.b(0.0, &x);
            diff.add_assign(&set.b(0.0, &y).scale(-1.0));
            assert!(diff.frobenius_norm() <= c_b * x.sub(&y).norm() * (1.0 + 1e-9));
            // jump coefficient bounds against g(t, z), per mark
            for &z in &[0.3, -1.2, 2.0] {
                let g = set.g_bound(0.0, z);
                assert!(set.g(0.0, z, &x).norm() <= g * (1.0 + x.norm()) * (1.0 + 1e-9));
                let dg = set.g(0.0, z, &x).sub(&set.g(0.0, z, &y)).norm();
                assert!(dg <= g * x.sub(&y).norm() * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn jump_split_bounds_default_to_half() {
        let mut r = rng(4);
        let g1 = random_matrix(&mut r, 2, 2, 0.3);
        let set = CoefficientSet::new(
            Drift::Zero,
            Diffusion::Zero,
            Jump::mark_affine(StateVector::new(vec![0.5, 0.0]), g1).unwrap(),
            2,
            2,
            0,
        )
        .unwrap();
        let g = set.g_bound(0.0, 1.0);
        let (a, b) = set.g_split_bounds(0.0, 1.0, );
        assert_relative_eq!(a, g / 2.0);
        assert_relative_eq!(b, g / 2.0);
    }

    #[test]
    fn scaled_split_halves_evaluate_to_half() {
        let gamma = Arc::new(GammaFunction::new(2));
        let base = Jump::mark_nemytskii(Matrix::identity(2).scale(0.5), gamma).unwrap();
        let half1 = Jump::scaled(base.clone(), 0.5);
        let half2 = Jump::scaled(base.clone(), 0.5);
        let x = StateVector::new(vec![0.7, -0.2]);
        let total = base.eval(0.0, 1.3, &x);
        let sum = half1.eval(0.0, 1.3, &x).add(&half2.eval(0.0, 1.3, &x));
        assert_abs_diff_eq!(total.sub(&sum).norm(), 0.0, epsilon = 1e-15);
    }

    proptest! {
        // Multilinearity: scaling one direction scales the value.
        #[test]
        fn derivative_homogeneous_in_directions(
            seed in 0u64..500,
            alpha in -3.0f64..3.0,
            order in 1usize..=3,
        ) {
            let set = nemytskii_set(3, 3, seed, 0.7);
            let mut r = rng(seed.wrapping_add(1000));
            let x = random_vec(&mut r, 3, 1.0);
            let dirs: Vec<StateVector> = (0..order).map(|_| random_vec(&mut r, 3, 1.0)).collect();
            let refs: Vec<&StateVector> = dirs.iter().collect();
            let base = set.df(order, 0.0, &x, &refs).unwrap();

            let mut scaled_dirs = dirs.clone();
            scaled_dirs[0] = scaled_dirs[0].scale(alpha);
            let refs2: Vec<&StateVector> = scaled_dirs.iter().collect();
            let scaled = set.df(order, 0.0, &x, &refs2).unwrap();

            let expected = base.scale(alpha);
            let err = scaled.sub(&expected).norm();
            prop_assert!(err <= 1e-14 * expected.norm().max(1.0));
        }

        // Permutation symmetry of the multilinear derivative.
        #[test]
        fn derivative_symmetric_under_swap(seed in 0u64..500, order in 2usize..=3) {
            let set = nemytskii_set(3, 3, seed, 0.7);
            let mut r = rng(seed.wrapping_add(2000));
            let x = random_vec(&mut r, 3, 1.0);
            let dirs: Vec<StateVector> = (0..order).map(|_| random_vec(&mut r, 3, 1.0)).collect();
            let mut swapped = dirs.clone();
            swapped.swap(0, order - 1);
            let refs: Vec<&StateVector> = dirs.iter().collect();
            let refs2: Vec<&StateVector> = swapped.iter().collect();
            let a = set.df(order, 0.0, &x, &refs).unwrap();
            let b = set.df(order, 0.0, &x, &refs2).unwrap();
            prop_assert!(a.sub(&b).norm() <= 1e-12 * a.norm().max(1e-30));
        }
    }
}
