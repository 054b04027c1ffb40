//! Exponential Euler stepping for the state equation and its
//! variational systems, on the jump-adapted grid of a shared
//! [`NoiseRealization`].
//!
//! Between consecutive grid times (no jump inside a cell, by grid
//! construction) the update applies the exact semigroup to the whole
//! increment bracket with left-point coefficient evaluation:
//!
//! ```text
//! u(t⁻_{i+1}) = S(Δ)[u_i + f(t_i,u_i)Δ + B(t_i,u_i)ΔW_i - λΔ ∫_Z G(t_i,z,u_i) m(dz)]
//! u(τ)       = u(τ⁻) + G(τ, z, u(τ⁻))          at a jump (τ, z)
//! ```
//!
//! The compensator subtraction in the drift realises integration
//! against the compensated measure.  The order-`n` sensitivity system
//! repeats the same template with the linearised coefficients plus the
//! set-partition corrections, which makes every sensitivity path the
//! exact derivative of the discrete flow — differentiation and
//! discretisation commute here, and several tests lean on that.

use thiserror::Error;

use crate::coefficients::{CoefficientError, CoefficientSet};
use crate::faadibruno::{
    self, diffusion_correction, drift_correction, jump_correction, FaaDiBrunoError,
    MaskedPartition,
};
use crate::noise::{MarkSpace, NoiseRealization};
use crate::spectral::{SpectralError, SpectralOperator, StateVector};

/// Per-component magnitude beyond which a path is flagged as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Desk-scale cap on the sensitivity order of one system.
pub const MAX_SYSTEM_ORDER: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sensitivity order {requested} exceeds the coefficient set's n_max {n_max}")]
    OrderExceedsNMax { requested: usize, n_max: usize },
    #[error("sensitivity order {0} exceeds the desk-scale cap {MAX_SYSTEM_ORDER}")]
    OrderTooHigh(usize),
    #[error("subset {{{0}}}: lower-order sensitivity path missing")]
    MissingLowerOrder(String),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Correction(#[from] FaaDiBrunoError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// One trajectory on the grid.  `values[i]` is the cadlag value at
/// `times[i]` (post-jump at jump times); the pre-jump left limit is
/// kept separately at jump indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    times: Vec<f64>,
    values: Vec<StateVector>,
    pre_jump: Vec<Option<StateVector>>,
    blowup: Option<usize>,
}

impl PathSample {
    /// Build a jump-free path from explicit grid values (fixtures,
    /// synthetic ensembles).  Times must be strictly increasing.
    pub fn from_values(times: Vec<f64>, values: Vec<StateVector>) -> PathSample {
        assert_eq!(times.len(), values.len(), "one value per grid time");
        assert!(!times.is_empty());
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        let pre_jump = vec![None; times.len()];
        let blowup = values
            .iter()
            .position(|v| {
                v.coeffs()
                    .iter()
                    .any(|x| !x.is_finite() || x.abs() > BLOWUP_THRESHOLD)
            });
        PathSample {
            times,
            values,
            pre_jump,
            blowup,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize) -> &StateVector {
        &self.values[i]
    }

    /// Left limit at grid index `i`: the pre-jump value at a jump
    /// time, the value itself elsewhere.
    pub fn left_limit(&self, i: usize) -> &StateVector {
        self.pre_jump[i].as_ref().unwrap_or(&self.values[i])
    }

    pub fn has_jump_at(&self, i: usize) -> bool {
        self.pre_jump[i].is_some()
    }

    pub fn final_value(&self) -> &StateVector {
        self.values.last().expect("paths are never empty")
    }

    pub fn blowup_index(&self) -> Option<usize> {
        self.blowup
    }

    pub fn is_blowup(&self) -> bool {
        self.blowup.is_some()
    }

    /// Sup of the norm over grid points and stored left limits inside
    /// `[t0, t1]`; infinite for blown-up paths.
    pub fn sup_norm_window(&self, t0: f64, t1: f64) -> f64 {
        if self.blowup.is_some() {
            return f64::INFINITY;
        }
        let mut sup = 0.0f64;
        for i in 0..self.times.len() {
            let t = self.times[i];
            if t < t0 || t > t1 {
                continue;
            }
            sup = sup.max(self.values[i].norm());
            if let Some(pre) = &self.pre_jump[i] {
                sup = sup.max(pre.norm());
            }
        }
        sup
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm_window(f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Sup over the common grid (values and left limits) of the norm of a
/// linear combination `Σ cᵢ pathᵢ`, restricted to `[t0, t1]`.  All
/// paths must come from the same noise realization, hence share one
/// grid.  Used for difference quotients and remainders without
/// materialising intermediate paths.
pub fn combo_sup_window(terms: &[(f64, &PathSample)], t0: f64, t1: f64) -> f64 {
    assert!(!terms.is_empty());
    let n = terms[0].1.len();
    let d = terms[0].1.value(0).dim();
    for (_, p) in terms {
        assert_eq!(p.len(), n, "paths must share one grid");
        if p.is_blowup() {
            return f64::INFINITY;
        }
    }
    let times = terms[0].1.times();
    let mut sup = 0.0f64;
    let mut buf = vec![0.0f64; d];
    for i in 0..n {
        let t = times[i];
        if t < t0 || t > t1 {
            continue;
        }
        buf.iter_mut().for_each(|x| *x = 0.0);
        for (c, p) in terms {
            for (b, v) in buf.iter_mut().zip(p.value(i).coeffs()) {
                *b += c * v;
            }
        }
        sup = sup.max(buf.iter().map(|x| x * x).sum::<f64>().sqrt());
        // left limits differ from values only at jump indices
        if terms.iter().any(|(_, p)| p.has_jump_at(i)) {
            buf.iter_mut().for_each(|x| *x = 0.0);
            for (c, p) in terms {
                for (b, v) in buf.iter_mut().zip(p.left_limit(i).coeffs()) {
                    *b += c * v;
                }
            }
            sup = sup.max(buf.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    sup
}

/// Base path plus sensitivity paths for every nonempty subset of the
/// direction tuple; the subset with mask `m` carries
/// `u^(|m|)((h_i)_{i in m})`.
#[derive(Debug, Clone)]
pub struct SensitivitySystem {
    base: PathSample,
    directions: Vec<StateVector>,
    paths: Vec<Option<PathSample>>,
}

impl SensitivitySystem {
    /// Start a system from an already-solved base path; sensitivity
    /// paths are filled in by [`SolveContext::solve_variational`].
    pub fn from_base(base: PathSample, directions: Vec<StateVector>) -> Self {
        let n = directions.len();
        SensitivitySystem {
            base,
            directions,
            paths: vec![None; 1usize << n],
        }
    }

    pub fn order(&self) -> usize {
        self.directions.len()
    }

    pub fn base(&self) -> &PathSample {
        &self.base
    }

    pub fn directions(&self) -> &[StateVector] {
        &self.directions
    }

    pub fn path(&self, mask: u32) -> Option<&PathSample> {
        self.paths.get(mask as usize).and_then(|p| p.as_ref())
    }

    pub fn insert_path(&mut self, mask: u32, path: PathSample) {
        self.paths[mask as usize] = Some(path);
    }

    /// The full-order path `u^(n)(h_1..h_n)`.
    pub fn full_order(&self) -> &PathSample {
        let mask = (1u32 << self.directions.len()) - 1;
        self.path(mask).expect("full-order path present on success")
    }
}

/// Shared per-path solve state: the semigroup factors per grid cell
/// (deduplicated across equal cell widths) and the jump marks indexed
/// by grid position.  One context serves every solve that reuses the
/// same noise, which is exactly the common-random-numbers pattern.
pub struct SolveContext<'a> {
    pub op: &'a SpectralOperator,
    pub set: &'a CoefficientSet,
    pub marks: &'a MarkSpace,
    pub noise: &'a NoiseRealization,
    cell_factor: Vec<u32>,
    unique_factors: Vec<Vec<f64>>,
    jump_at: Vec<Option<f64>>,
}

impl<'a> SolveContext<'a> {
    pub fn new(
        op: &'a SpectralOperator,
        set: &'a CoefficientSet,
        marks: &'a MarkSpace,
        noise: &'a NoiseRealization,
    ) -> Result<Self, SolverError> {
        if set.dim() != op.dim() {
            return Err(SolverError::DimensionMismatch(format!(
                "operator dimension {} vs coefficient dimension {}",
                op.dim(),
                set.dim()
            )));
        }
        let d_w = noise.wiener_increments.first().map_or(0, Vec::len);
        if d_w != set.wiener_dim() {
            return Err(SolverError::DimensionMismatch(format!(
                "noise has d_W = {d_w}, coefficients expect {}",
                set.wiener_dim()
            )));
        }
        let cells = noise.grid.len() - 1;
        let mut cell_factor = Vec::with_capacity(cells);
        let mut widths: Vec<f64> = Vec::new();
        let mut unique_factors: Vec<Vec<f64>> = Vec::new();
        for i in 0..cells {
            let w = noise.grid[i + 1] - noise.grid[i];
            let idx = match widths.iter().position(|&x| x == w) {
                Some(k) => k,
                None => {
                    widths.push(w);
                    unique_factors.push(op.semigroup_factors(w)?);
                    widths.len() - 1
                }
            };
            cell_factor.push(idx as u32);
        }
        let mut jump_at = vec![None; noise.grid.len()];
        for (k, &(_, z)) in noise.jump_events.iter().enumerate() {
            jump_at[noise.jump_grid_indices[k]] = Some(z);
        }
        Ok(SolveContext {
            op,
            set,
            marks,
            noise,
            cell_factor,
            unique_factors,
            jump_at,
        })
    }

    fn factors(&self, cell: usize) -> &[f64] {
        &self.unique_factors[self.cell_factor[cell] as usize]
    }

    fn flag(v: &StateVector) -> bool {
        v.coeffs()
            .iter()
            .any(|x| !x.is_finite() || x.abs() > BLOWUP_THRESHOLD)
    }

    fn apply_factors(factors: &[f64], v: &StateVector) -> StateVector {
        StateVector::new(
            factors
                .iter()
                .zip(v.coeffs())
                .map(|(f, x)| f * x)
                .collect(),
        )
    }

    /// Solve the state equation from `u0` along this context's noise.
    pub fn solve_mild(&self, u0: &StateVector) -> Result<PathSample, SolverError> {
        let d = self.op.dim();
        if u0.dim() != d {
            return Err(SolverError::DimensionMismatch(format!(
                "initial datum dimension {} vs {}",
                u0.dim(),
                d
            )));
        }
        let grid = &self.noise.grid;
        let cells = grid.len() - 1;
        let mut values = Vec::with_capacity(grid.len());
        let mut pre_jump = vec![None; grid.len()];
        let mut blowup = if Self::flag(u0) { Some(0) } else { None };
        values.push(u0.clone());

        for i in 0..cells {
            if blowup.is_some() {
                let held = values[i].clone();
                values.push(held);
                continue;
            }
            let t = grid[i];
            let dtau = grid[i + 1] - grid[i];
            let x = &values[i];

            let mut bracket = x.clone();
            bracket.axpy(dtau, &self.set.f(t, x));
            let b = self.set.b(t, x);
            bracket.add_assign(&b.matvec_slice(&self.noise.wiener_increments[i]));
            if self.marks.intensity > 0.0 {
                let mut comp = StateVector::zeros(d);
                for &(z, w) in self.marks.quadrature() {
                    comp.axpy(w, &self.set.g(t, z, x));
                }
                bracket.axpy(-dtau * self.marks.intensity, &comp);
            }

            let mut next = Self::apply_factors(self.factors(i), &bracket);
            if let Some(z) = self.jump_at[i + 1] {
                let tau = grid[i + 1];
                let jump = self.set.g(tau, z, &next);
                pre_jump[i + 1] = Some(next.clone());
                next.add_assign(&jump);
            }
            if Self::flag(&next) {
                blowup = Some(i + 1);
            }
            values.push(next);
        }

        Ok(PathSample {
            times: grid.clone(),
            values,
            pre_jump,
            blowup,
        })
    }

    /// Solve the order-`|subset|` variational equation for the given
    /// direction subset, on top of an under-construction system that
    /// already holds the base path and all lower-order subset paths.
    pub fn solve_variational(
        &self,
        system: &SensitivitySystem,
        subset: u32,
    ) -> Result<PathSample, SolverError> {
        let d = self.op.dim();
        let n = subset.count_ones() as usize;
        if n == 0 {
            return Err(SolverError::DimensionMismatch(
                "empty direction subset".into(),
            ));
        }
        if n > self.set.n_max() {
            return Err(SolverError::OrderExceedsNMax {
                requested: n,
                n_max: self.set.n_max(),
            });
        }
        let elements: Vec<usize> = (0..32u32)
            .filter(|b| subset & (1 << b) != 0)
            .map(|b| b as usize)
            .collect();
        // every strict nonempty sub-subset must already be solved
        let mut sub = (subset - 1) & subset;
        while sub != 0 {
            if system.path(sub).is_none() {
                return Err(SolverError::MissingLowerOrder(elements_display(sub)));
            }
            sub = (sub - 1) & subset;
        }
        let partitions: Vec<MaskedPartition> = faadibruno::masked_partitions(&elements)?;

        let base = &system.base;
        let grid = &self.noise.grid;
        let cells = grid.len() - 1;
        let mut pre_jump = vec![None; grid.len()];

        if base.is_blowup() {
            // the linearisation is meaningless past a blowup; carry the flag
            return Ok(PathSample {
                times: grid.clone(),
                values: vec![StateVector::zeros(d); grid.len()],
                pre_jump,
                blowup: base.blowup_index(),
            });
        }

        let y0 = if n == 1 {
            system.directions[elements[0]].clone()
        } else {
            StateVector::zeros(d)
        };
        let mut values = Vec::with_capacity(grid.len());
        let mut blowup = if Self::flag(&y0) { Some(0) } else { None };
        values.push(y0);

        for i in 0..cells {
            if blowup.is_some() {
                let held = values[i].clone();
                values.push(held);
                continue;
            }
            let t = grid[i];
            let dtau = grid[i + 1] - grid[i];
            let x = base.value(i);
            let y = &values[i];
            let lookup = |mask: u32| system.path(mask).map(|p| p.value(i));

            let mut bracket = y.clone();
            // drift: Df(u)y + Ψ_n
            bracket.axpy(dtau, &self.set.df(1, t, x, &[y])?);
            bracket.axpy(
                dtau,
                &drift_correction(self.set, t, x, &partitions, &lookup)?,
            );
            // diffusion: (DB(u)y + Φ_n) ΔW
            let mut db = self.set.db(1, t, x, &[y])?;
            db.add_assign(&diffusion_correction(self.set, t, x, &partitions, &lookup)?);
            bracket.add_assign(&db.matvec_slice(&self.noise.wiener_increments[i]));
            // compensator: -λΔ ∫ [DG(u)y + Θ_n] m(dz)
            if self.marks.intensity > 0.0 {
                let mut comp = StateVector::zeros(d);
                for &(z, w) in self.marks.quadrature() {
                    let mut term = self.set.dg(1, t, z, x, &[y])?;
                    term.add_assign(&jump_correction(self.set, t, z, x, &partitions, &lookup)?);
                    comp.axpy(w, &term);
                }
                bracket.axpy(-dtau * self.marks.intensity, &comp);
            }

            let mut next = Self::apply_factors(self.factors(i), &bracket);
            if let Some(z) = self.jump_at[i + 1] {
                // jump linearisation at the base left limit
                let tau = grid[i + 1];
                let xl = base.left_limit(i + 1);
                let lookup_left = |mask: u32| system.path(mask).map(|p| p.left_limit(i + 1));
                let mut add = self.set.dg(1, tau, z, xl, &[&next])?;
                add.add_assign(&jump_correction(
                    self.set,
                    tau,
                    z,
                    xl,
                    &partitions,
                    &lookup_left,
                )?);
                pre_jump[i + 1] = Some(next.clone());
                next.add_assign(&add);
            }
            if Self::flag(&next) {
                blowup = Some(i + 1);
            }
            values.push(next);
        }

        Ok(PathSample {
            times: grid.clone(),
            values,
            pre_jump,
            blowup,
        })
    }

    /// Base path plus all subset sensitivity paths for the direction
    /// tuple, in order of increasing subset size.
    pub fn solve_system(
        &self,
        u0: &StateVector,
        directions: &[StateVector],
    ) -> Result<SensitivitySystem, SolverError> {
        let n = directions.len();
        if n > MAX_SYSTEM_ORDER {
            return Err(SolverError::OrderTooHigh(n));
        }
        if n > self.set.n_max() {
            return Err(SolverError::OrderExceedsNMax {
                requested: n,
                n_max: self.set.n_max(),
            });
        }
        for h in directions {
            if h.dim() != self.op.dim() {
                return Err(SolverError::DimensionMismatch(format!(
                    "direction dimension {} vs {}",
                    h.dim(),
                    self.op.dim()
                )));
            }
        }
        let base = self.solve_mild(u0)?;
        let mut system = SensitivitySystem::from_base(base, directions.to_vec());
        for size in 1..=n {
            for mask in 1u32..(1 << n) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let path = self.solve_variational(&system, mask)?;
                system.insert_path(mask, path);
            }
        }
        Ok(system)
    }

    /// One application of the mild fixed-point map: evaluate the
    /// coefficients along the frozen path, keep `u0` as the initial
    /// datum.  Iterating this map is the contraction whose fixed point
    /// the stepper computes; the diagnostic in `verify` measures its
    /// empirical contraction factor.
    pub fn fixed_point_map(
        &self,
        u0: &StateVector,
        frozen: &PathSample,
    ) -> Result<PathSample, SolverError> {
        let d = self.op.dim();
        if frozen.len() != self.noise.grid.len() {
            return Err(SolverError::DimensionMismatch(
                "frozen path grid differs from noise grid".into(),
            ));
        }
        let grid = &self.noise.grid;
        let cells = grid.len() - 1;
        let mut values = Vec::with_capacity(grid.len());
        let mut pre_jump = vec![None; grid.len()];
        values.push(u0.clone());
        for i in 0..cells {
            let t = grid[i];
            let dtau = grid[i + 1] - grid[i];
            let x = frozen.value(i);
            let mut bracket = values[i].clone();
            bracket.axpy(dtau, &self.set.f(t, x));
            let b = self.set.b(t, x);
            bracket.add_assign(&b.matvec_slice(&self.noise.wiener_increments[i]));
            if self.marks.intensity > 0.0 {
                let mut comp = StateVector::zeros(d);
                for &(z, w) in self.marks.quadrature() {
                    comp.axpy(w, &self.set.g(t, z, x));
                }
                bracket.axpy(-dtau * self.marks.intensity, &comp);
            }
            let mut next = Self::apply_factors(self.factors(i), &bracket);
            if let Some(z) = self.jump_at[i + 1] {
                let tau = grid[i + 1];
                let jump = self.set.g(tau, z, frozen.left_limit(i + 1));
                pre_jump[i + 1] = Some(next.clone());
                next.add_assign(&jump);
            }
            values.push(next);
        }
        Ok(PathSample {
            times: grid.clone(),
            values,
            pre_jump,
            blowup: None,
        })
    }
}

fn elements_display(mask: u32) -> String {
    (0..32)
        .filter(|b| mask & (1 << b) != 0)
        .map(|b| (b + 1).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Convenience wrapper: solve the state equation for one path.
pub fn solve_mild(
    op: &SpectralOperator,
    set: &CoefficientSet,
    marks: &MarkSpace,
    u0: &StateVector,
    noise: &NoiseRealization,
) -> Result<PathSample, SolverError> {
    SolveContext::new(op, set, marks, noise)?.solve_mild(u0)
}

/// Convenience wrapper: solve the full sensitivity system for one path.
pub fn solve_system(
    op: &SpectralOperator,
    set: &CoefficientSet,
    marks: &MarkSpace,
    u0: &StateVector,
    directions: &[StateVector],
    noise: &NoiseRealization,
) -> Result<SensitivitySystem, SolverError> {
    SolveContext::new(op, set, marks, noise)?.solve_system(u0, directions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Drift, GammaFunction, Jump};
    use crate::linalg::Matrix;
    use crate::noise::sample_noise;
    use std::sync::Arc;

    fn zero_set(d: usize, d_w: usize) -> CoefficientSet {
        CoefficientSet::new(Drift::Zero, Diffusion::Zero, Jump::Zero, 2, d, d_w).unwrap()
    }

    fn no_jumps() -> MarkSpace {
        MarkSpace::finite(vec![(1.0, 1.0)], 0.0).unwrap()
    }

    #[test]
    fn free_flow_is_exact_at_every_grid_point() {
        let d = 4;
        let op = SpectralOperator::quadratic(d, 1.0).unwrap();
        let set = zero_set(d, 0);
        let marks = no_jumps();
        let noise = sample_noise(&marks, 0, 1.0, 1.0 / 64.0, 5, 0).unwrap();
        let u0 = StateVector::new(vec![1.0, -0.5, 0.25, 2.0]);
        let path = solve_mild(&op, &set, &marks, &u0, &noise).unwrap();
        for (i, &t) in path.times().iter().enumerate() {
            for k in 0..d {
                let exact = (-op.eigenvalues()[k] * t).exp() * u0.coeffs()[k];
                let got = path.value(i).coeffs()[k];
                let scale = exact.abs().max(1e-300);
                assert!(
                    ((got - exact) / scale).abs() <= 1e-12,
                    "t = {t}, k = {k}: {got} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let op = SpectralOperator::quadratic(3, 1.0).unwrap();
        let set = zero_set(3, 2);
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 2.0).unwrap();
        let noise = sample_noise(&marks, 2, 1.0, 0.125, 9, 3).unwrap();
        let path = solve_mild(&op, &set, &marks, &StateVector::zeros(3), &noise).unwrap();
        assert_eq!(path.sup_norm(), 0.0);
        assert!(!path.is_blowup());
    }

    fn linear_set(d: usize, d_w: usize, seed: u64) -> CoefficientSet {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut rnd = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.random::<f64>() - 0.5) * scale)
                .collect()
        };
        let f1 = Matrix::from_rows(d, d, rnd(d * d, 0.6));
        let f0 = StateVector::new(rnd(d, 0.4));
        let b = Matrix::from_rows(d, d_w, rnd(d * d_w, 0.5));
        let g1 = Matrix::from_rows(d, d, rnd(d * d, 0.2));
        let g0 = StateVector::new(rnd(d, 0.3));
        CoefficientSet::new(
            Drift::affine(f0, f1).unwrap(),
            Diffusion::Constant(b),
            Jump::mark_affine(g0, g1).unwrap(),
            3,
            d,
            d_w,
        )
        .unwrap()
    }

    #[test]
    fn linear_flow_difference_equals_scaled_first_variation() {
        // fully linear coefficients: solve(u0 + εh) - solve(u0) = ε y exactly
        let d = 3;
        let op = SpectralOperator::quadratic(d, 0.5).unwrap();
        let set = linear_set(d, 2, 77);
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 1.5).unwrap();
        let noise = sample_noise(&marks, 2, 1.0, 0.0625, 13, 2).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let u0 = StateVector::new(vec![0.4, -0.2, 1.0]);
        let h = StateVector::new(vec![0.5, 1.0, -0.25]);
        let eps = 0.037;

        let system = ctx.solve_system(&u0, std::slice::from_ref(&h)).unwrap();
        let mut shifted = u0.clone();
        shifted.axpy(eps, &h);
        let path_eps = ctx.solve_mild(&shifted).unwrap();

        // sup over grid of |(u_eps - u)/eps - y|
        let r = combo_sup_window(
            &[
                (1.0 / eps, &path_eps),
                (-1.0 / eps, system.base()),
                (-1.0, system.full_order()),
            ],
            0.0,
            1.0,
        );
        assert!(r <= 1e-12, "linearity residual {r}");
    }

    #[test]
    fn first_variation_with_zero_direction_is_zero() {
        let d = 2;
        let op = SpectralOperator::quadratic(d, 1.0).unwrap();
        let set = linear_set(d, 1, 3);
        let marks = no_jumps();
        let noise = sample_noise(&marks, 1, 0.5, 0.0625, 21, 0).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let sys = ctx
            .solve_system(&StateVector::new(vec![1.0, 2.0]), &[StateVector::zeros(d)])
            .unwrap();
        assert_eq!(sys.full_order().sup_norm(), 0.0);
    }

    #[test]
    fn affine_set_second_order_path_vanishes() {
        let d = 2;
        let op = SpectralOperator::quadratic(d, 0.3).unwrap();
        let set = linear_set(d, 1, 8);
        let marks = MarkSpace::finite(vec![(1.0, 1.0)], 1.0).unwrap();
        let noise = sample_noise(&marks, 1, 1.0, 0.125, 4, 1).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let sys = ctx
            .solve_system(
                &StateVector::new(vec![0.5, -0.5]),
                &[
                    StateVector::new(vec![1.0, 0.0]),
                    StateVector::new(vec![0.0, 1.0]),
                ],
            )
            .unwrap();
        assert_eq!(
            sys.full_order().sup_norm(),
            0.0,
            "second derivatives of an affine set vanish"
        );
    }

    fn nemytskii_set(d: usize, d_w: usize, seed: u64, norm: f64) -> CoefficientSet {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(d * d);
        for _ in 0..d * d {
            data.push(rng.random::<f64>() - 0.5);
        }
        let mut l = Matrix::from_rows(d, d, data);
        let s = norm / l.operator_norm();
        l = l.scale(s);
        let gamma = Arc::new(GammaFunction::new(4));
        let mut bdata = Vec::with_capacity(d * d_w);
        for _ in 0..d * d_w {
            bdata.push((rng.random::<f64>() - 0.5) * 0.5);
        }
        let b = Matrix::from_rows(d, d_w, bdata);
        let mut g1 = Vec::with_capacity(d * d);
        for _ in 0..d * d {
            g1.push((rng.random::<f64>() - 0.5) * 0.15);
        }
        CoefficientSet::new(
            Drift::nemytskii(l, gamma).unwrap(),
            Diffusion::Constant(b),
            Jump::mark_affine(StateVector::zeros(d), Matrix::from_rows(d, d, g1)).unwrap(),
            4,
            d,
            d_w,
        )
        .unwrap()
    }

    #[test]
    fn second_order_system_symmetric_in_directions() {
        let d = 3;
        let op = SpectralOperator::quadratic(d, 0.25).unwrap();
        let set = nemytskii_set(d, 2, 19, 0.5);
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 1.0).unwrap();
        let noise = sample_noise(&marks, 2, 0.5, 1.0 / 64.0, 33, 7).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let u0 = StateVector::new(vec![0.6, -0.3, 0.2]);
        let h = StateVector::new(vec![1.0, 0.5, 0.0]);
        let k = StateVector::new(vec![-0.2, 0.7, 1.0]);
        let sys_hk = ctx.solve_system(&u0, &[h.clone(), k.clone()]).unwrap();
        let sys_kh = ctx.solve_system(&u0, &[k, h]).unwrap();
        let diff = combo_sup_window(
            &[(1.0, sys_hk.full_order()), (-1.0, sys_kh.full_order())],
            0.0,
            0.5,
        );
        let scale = sys_hk.full_order().sup_norm().max(1e-30);
        assert!(
            diff / scale <= 1e-12,
            "direction swap residual {}",
            diff / scale
        );
    }

    #[test]
    fn fourth_order_system_solves_and_stays_symmetric() {
        // depth-4 corrections in the stepper: permuting the direction
        // tuple (and hence every subset path) must leave the top path
        // unchanged up to rounding
        let d = 2;
        let op = SpectralOperator::quadratic(d, 0.2).unwrap();
        let set = nemytskii_set(d, 1, 91, 0.6);
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 1.0).unwrap();
        let noise = sample_noise(&marks, 1, 0.25, 1.0 / 64.0, 13, 0).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let u0 = StateVector::new(vec![0.5, -0.3]);
        let dirs = [
            StateVector::new(vec![1.0, 0.2]),
            StateVector::new(vec![-0.4, 0.8]),
            StateVector::new(vec![0.3, 0.3]),
            StateVector::new(vec![0.7, -0.6]),
        ];
        let sys = ctx.solve_system(&u0, &dirs).unwrap();
        assert!(!sys.full_order().is_blowup());
        assert!(sys.full_order().sup_norm() > 0.0);
        let mut permuted = dirs.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 2);
        let sys_p = ctx.solve_system(&u0, &permuted).unwrap();
        let diff = combo_sup_window(
            &[(1.0, sys.full_order()), (-1.0, sys_p.full_order())],
            0.0,
            0.25,
        );
        let scale = sys.full_order().sup_norm();
        assert!(diff / scale <= 1e-12, "relative asymmetry {}", diff / scale);
    }

    #[test]
    fn interval_marks_drive_the_compensator() {
        // uniform marks on [0,1], G = c z (constant in x): the
        // compensated convolution must be centred even though the mark
        // mean is 0.5, exercising the table-quadrature compensator
        let op = SpectralOperator::new(vec![1.0]).unwrap();
        let set = CoefficientSet::new(
            Drift::Zero,
            Diffusion::Zero,
            Jump::mark_affine(StateVector::new(vec![0.8]), Matrix::zeros(1, 1)).unwrap(),
            2,
            1,
            0,
        )
        .unwrap();
        let nodes: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
        let density = vec![1.0; 33];
        let marks = MarkSpace::interval_table(nodes, density, 2.0).unwrap();
        let m = 1500u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for path in 0..m {
            let noise = sample_noise(&marks, 0, 1.0, 1.0 / 256.0, 4321, path).unwrap();
            let p = solve_mild(&op, &set, &marks, &StateVector::zeros(1), &noise).unwrap();
            let v = p.final_value().coeffs()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / m as f64;
        let sd = (sumsq / m as f64 - mean * mean).sqrt();
        let se = sd / (m as f64).sqrt();
        assert!(
            mean.abs() <= 3.5 * se,
            "compensated mean {mean} vs 3.5 SE {}",
            3.5 * se
        );
    }

    #[test]
    fn missing_lower_order_is_reported() {
        let d = 2;
        let op = SpectralOperator::quadratic(d, 0.2).unwrap();
        let set = nemytskii_set(d, 1, 2, 0.4);
        let marks = no_jumps();
        let noise = sample_noise(&marks, 1, 0.25, 0.0625, 1, 0).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let base = ctx.solve_mild(&StateVector::new(vec![0.1, 0.2])).unwrap();
        let system = SensitivitySystem::from_base(
            base,
            vec![
                StateVector::new(vec![1.0, 0.0]),
                StateVector::new(vec![0.0, 1.0]),
            ],
        );
        let err = ctx.solve_variational(&system, 0b11).unwrap_err();
        assert!(matches!(err, SolverError::MissingLowerOrder(_)));
    }

    #[test]
    fn order_guards() {
        let d = 2;
        let op = SpectralOperator::quadratic(d, 0.2).unwrap();
        let set = nemytskii_set(d, 1, 2, 0.4); // n_max = 4
        let marks = no_jumps();
        let noise = sample_noise(&marks, 1, 0.25, 0.0625, 1, 0).unwrap();
        let ctx = SolveContext::new(&op, &set, &marks, &noise).unwrap();
        let h = StateVector::new(vec![1.0, 0.0]);
        let dirs: Vec<StateVector> = (0..5).map(|_| h.clone()).collect();
        assert!(matches!(
            ctx.solve_system(&StateVector::zeros(d), &dirs),
            Err(SolverError::OrderExceedsNMax {
                requested: 5,
                n_max: 4
            })
        ));
        let dirs6: Vec<StateVector> = (0..6).map(|_| h.clone()).collect();
        assert!(matches!(
            ctx.solve_system(&StateVector::zeros(d), &dirs6),
            Err(SolverError::OrderTooHigh(6))
        ));
    }

    #[test]
    fn ou_with_jumps_moments_match_closed_form() {
        // d=1, du + u dt = σ dW + c z dμ̄ with marks ±1:
        // E u(T) = e^{-T} u0,
        // Var u(T) = (σ² + λ c²)(1 - e^{-2T})/2.
        let op = SpectralOperator::new(vec![1.0]).unwrap();
        let sigma = 0.3;
        let c = 0.4;
        let lambda = 2.0;
        let set = CoefficientSet::new(
            Drift::Zero,
            Diffusion::Constant(Matrix::from_rows(1, 1, vec![sigma])),
            Jump::mark_affine(StateVector::new(vec![c]), Matrix::zeros(1, 1)).unwrap(),
            2,
            1,
            1,
        )
        .unwrap();
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], lambda).unwrap();
        let t_final = 1.0;
        let dt = 1e-3;
        let u0 = StateVector::new(vec![1.5]);
        let m = 4000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for path in 0..m {
            let noise = sample_noise(&marks, 1, t_final, dt, 2718, path).unwrap();
            let p = solve_mild(&op, &set, &marks, &u0, &noise).unwrap();
            let v = p.final_value().coeffs()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / m as f64;
        let var = sumsq / m as f64 - mean * mean;
        let exact_mean = (-1.0f64).exp() * 1.5;
        let exact_var = (sigma * sigma + lambda * c * c) * (1.0 - (-2.0f64).exp()) / 2.0;
        let se_mean = (exact_var / m as f64).sqrt();
        assert!(
            (mean - exact_mean).abs() <= 3.5 * se_mean,
            "mean {mean} vs {exact_mean} (3.5 SE = {})",
            3.5 * se_mean
        );
        let se_var = exact_var * (2.0 / m as f64).sqrt();
        assert!(
            (var - exact_var).abs() <= 3.5 * se_var,
            "var {var} vs {exact_var} (3.5 SE = {})",
            3.5 * se_var
        );
    }

    #[test]
    fn pathwise_self_convergence_order_one() {
        // common Brownian increments at three resolutions; the
        // coarse/fine error at T should halve when dt halves
        let d = 3;
        let op = SpectralOperator::quadratic(d, 0.25).unwrap();
        let set = nemytskii_set(d, 2, 55, 0.5);
        let marks = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 1.0).unwrap();
        let u0 = StateVector::new(vec![0.8, -0.4, 0.3]);
        let dt = 1.0 / 64.0;
        let mut err_coarse = 0.0;
        let mut err_fine = 0.0;
        let paths = 100u64;
        for path in 0..paths {
            let fine = sample_noise(&marks, 2, 1.0, dt / 4.0, 4242, path).unwrap();
            let mid = fine.coarsened(dt / 2.0, dt / 4.0).unwrap();
            let coarse = fine.coarsened(dt, dt / 4.0).unwrap();
            let u_c = solve_mild(&op, &set, &marks, &u0, &coarse).unwrap();
            let u_m = solve_mild(&op, &set, &marks, &u0, &mid).unwrap();
            let u_f = solve_mild(&op, &set, &marks, &u0, &fine).unwrap();
            err_coarse += u_c.final_value().sub(u_m.final_value()).norm();
            err_fine += u_m.final_value().sub(u_f.final_value()).norm();
        }
        let ratio = err_coarse / err_fine;
        assert!(
            (1.6..=2.4).contains(&ratio),
            "self-convergence ratio {ratio} outside [1.6, 2.4]"
        );
    }

    #[test]
    fn compensated_jump_convolution_is_centred() {
        // f = B = 0, G deterministic in x: u(T) is the compensated
        // jump convolution, whose mean must vanish
        let op = SpectralOperator::new(vec![1.0]).unwrap();
        let set = CoefficientSet::new(
            Drift::Zero,
            Diffusion::Zero,
            Jump::mark_affine(StateVector::new(vec![0.5]), Matrix::zeros(1, 1)).unwrap(),
            2,
            1,
            0,
        )
        .unwrap();
        // asymmetric marks so the compensator drift is genuinely active
        let marks = MarkSpace::finite(vec![(1.0, 0.7), (-1.0, 0.3)], 2.0).unwrap();
        let m = 2000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for path in 0..m {
            let noise = sample_noise(&marks, 0, 1.0, 1.0 / 256.0, 909, path).unwrap();
            let p = solve_mild(&op, &set, &marks, &StateVector::zeros(1), &noise).unwrap();
            let v = p.final_value().coeffs()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / m as f64;
        let sd = (sumsq / m as f64 - mean * mean).sqrt();
        let se = sd / (m as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} vs 3 SE {}", 3.0 * se);
    }

    #[test]
    fn blowup_is_flagged_not_fatal() {
        // exponential growth via affine drift with a huge coefficient
        let op = SpectralOperator::new(vec![0.0]).unwrap();
        let set = CoefficientSet::new(
            Drift::affine(StateVector::zeros(1), Matrix::from_rows(1, 1, vec![1e4])).unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            2,
            1,
            0,
        )
        .unwrap();
        let marks = no_jumps();
        let noise = sample_noise(&marks, 0, 4.0, 0.5, 3, 0).unwrap();
        let p = solve_mild(&op, &set, &marks, &StateVector::new(vec![1.0]), &noise).unwrap();
        assert!(p.is_blowup());
        assert!(p.blowup_index().unwrap() > 0);
        assert_eq!(p.sup_norm(), f64::INFINITY);
    }
}
