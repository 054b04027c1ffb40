//! Set partitions of `{1..n}` and the chain-rule correction terms they
//! index.
//!
//! Differentiating `t ↦ F(u(t))` n times in the initial datum produces
//! one term per set partition of the direction indices: a partition
//! with blocks `B_1..B_j` contributes
//! `D^j F(u)(u^(|B_1|)(h_{B_1}), …, u^(|B_j|)(h_{B_j}))`.  The single
//! top-order term (the one-block partition, `DF(u) u^(n)`) is kept
//! separate by the variational solver, so the correction assembled here
//! sums over partitions with at least two blocks only.  Enumeration is
//! by restricted-growth strings in canonical order; grouped closed
//! forms (equal block-size multisets collected with a multiplicity) are
//! used only by tests.

use thiserror::Error;

use crate::coefficients::{CoefficientError, CoefficientSet};
use crate::linalg::Matrix;
use crate::spectral::StateVector;

pub const MAX_PARTITION_ORDER: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum FaaDiBrunoError {
    #[error("partition order {0} outside the supported range 1..=8")]
    OrderOutOfRange(usize),
    #[error("missing sensitivity for direction subset {{{0}}}")]
    MissingSubset(String),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
}

/// A set partition of `{0..n-1}` in canonical form: blocks ordered by
/// smallest element, elements sorted within each block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Human-readable 1-based rendering, e.g. `{1,3}|{2}`.
    pub fn display_one_based(&self) -> String {
        self.blocks
            .iter()
            .map(|b| {
                let inner = b
                    .iter()
                    .map(|e| (e + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                format!("{{{inner}}}")
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// All set partitions of an `n`-element set, enumerated by
/// restricted-growth strings.  The count is the Bell number `B(n)`.
pub fn set_partitions(n: usize) -> Result<Vec<SetPartition>, FaaDiBrunoError> {
    if n == 0 || n > MAX_PARTITION_ORDER {
        return Err(FaaDiBrunoError::OrderOutOfRange(n));
    }
    let mut out = Vec::with_capacity(bell_number(n) as usize);
    // rgs[i] = block label of element i; labels satisfy
    // rgs[i] <= 1 + max(rgs[0..i]).
    let mut rgs = vec![0usize; n];
    loop {
        let blocks_n = rgs.iter().copied().max().unwrap() + 1;
        let mut blocks = vec![Vec::new(); blocks_n];
        for (elem, &label) in rgs.iter().enumerate() {
            blocks[label].push(elem);
        }
        out.push(SetPartition { blocks });

        // next restricted-growth string in lexicographic order
        let mut i = n;
        loop {
            if i == 1 {
                return Ok(out);
            }
            i -= 1;
            let max_prefix = rgs[..i].iter().copied().max().unwrap();
            if rgs[i] <= max_prefix {
                rgs[i] += 1;
                for slot in rgs.iter_mut().skip(i + 1) {
                    *slot = 0;
                }
                break;
            }
        }
    }
}

/// Bell numbers via the Bell triangle; supports the desk-scale range.
pub fn bell_number(n: usize) -> u64 {
    let mut row = vec![1u64];
    for _ in 1..=n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

/// Number of correction terms at order `n`: all partitions except the
/// single-block one.
pub fn term_count(n: usize) -> Result<u64, FaaDiBrunoError> {
    if n == 0 || n > MAX_PARTITION_ORDER {
        return Err(FaaDiBrunoError::OrderOutOfRange(n));
    }
    Ok(bell_number(n) - 1)
}

/// Sensitivity values for the nonempty subsets of the direction set,
/// keyed by bitmask over the direction indices.
#[derive(Debug, Clone)]
pub struct SubsetValues {
    values: Vec<Option<StateVector>>,
}

impl SubsetValues {
    pub fn new(direction_count: usize) -> Self {
        SubsetValues {
            values: vec![None; 1usize << direction_count],
        }
    }

    pub fn insert(&mut self, mask: u32, value: StateVector) {
        self.values[mask as usize] = Some(value);
    }

    pub fn get(&self, mask: u32) -> Option<&StateVector> {
        self.values.get(mask as usize).and_then(|v| v.as_ref())
    }
}

fn mask_display(mask: u32) -> String {
    let mut parts = Vec::new();
    for bit in 0..32 {
        if mask & (1 << bit) != 0 {
            parts.push((bit + 1).to_string());
        }
    }
    parts.join(",")
}

/// Partition of the direction set pre-translated to subset masks, so
/// the per-step assembly only does lookups.
#[derive(Debug, Clone)]
pub struct MaskedPartition {
    pub block_masks: Vec<u32>,
}

/// Translate all partitions with >= 2 blocks of the set `elements`
/// (global direction indices, ascending) into subset masks.
pub fn masked_partitions(elements: &[usize]) -> Result<Vec<MaskedPartition>, FaaDiBrunoError> {
    let n = elements.len();
    let parts = set_partitions(n)?;
    Ok(parts
        .into_iter()
        .filter(|p| p.block_count() >= 2)
        .map(|p| MaskedPartition {
            block_masks: p
                .blocks()
                .iter()
                .map(|b| b.iter().fold(0u32, |m, &pos| m | (1 << elements[pos])))
                .collect(),
        })
        .collect())
}

fn gather<'a, F>(masks: &[u32], lookup: &F) -> Result<Vec<&'a StateVector>, FaaDiBrunoError>
where
    F: Fn(u32) -> Option<&'a StateVector>,
{
    masks
        .iter()
        .map(|&m| lookup(m).ok_or_else(|| FaaDiBrunoError::MissingSubset(mask_display(m))))
        .collect()
}

/// Sum over the pre-translated partitions of
/// `D^j f(base)(u^(..), …)`, i.e. the drift correction `Ψ_n`.
pub fn drift_correction<'a, F>(
    set: &CoefficientSet,
    t: f64,
    base: &StateVector,
    partitions: &[MaskedPartition],
    lookup: &F,
) -> Result<StateVector, FaaDiBrunoError>
where
    F: Fn(u32) -> Option<&'a StateVector>,
{
    let mut acc = StateVector::zeros(set.dim());
    for part in partitions {
        let dirs = gather(&part.block_masks, lookup)?;
        let term = set.df(part.block_masks.len(), t, base, &dirs)?;
        acc.add_assign(&term);
    }
    Ok(acc)
}

/// The diffusion correction `Φ_n` (a `d x d_W` matrix).
pub fn diffusion_correction<'a, F>(
    set: &CoefficientSet,
    t: f64,
    base: &StateVector,
    partitions: &[MaskedPartition],
    lookup: &F,
) -> Result<Matrix, FaaDiBrunoError>
where
    F: Fn(u32) -> Option<&'a StateVector>,
{
    let mut acc = Matrix::zeros(set.dim(), set.wiener_dim());
    for part in partitions {
        let dirs = gather(&part.block_masks, lookup)?;
        let term = set.db(part.block_masks.len(), t, base, &dirs)?;
        acc.add_assign(&term);
    }
    Ok(acc)
}

/// The jump correction `Θ_n` at mark `z`.
pub fn jump_correction<'a, F>(
    set: &CoefficientSet,
    t: f64,
    z: f64,
    base: &StateVector,
    partitions: &[MaskedPartition],
    lookup: &F,
) -> Result<StateVector, FaaDiBrunoError>
where
    F: Fn(u32) -> Option<&'a StateVector>,
{
    let mut acc = StateVector::zeros(set.dim());
    for part in partitions {
        let dirs = gather(&part.block_masks, lookup)?;
        let term = set.dg(part.block_masks.len(), t, z, base, &dirs)?;
        acc.add_assign(&term);
    }
    Ok(acc)
}

/// One evaluated correction term: the partition indexing it and the
/// value `D^{#blocks}F(base)(u^(|B_1|), …)`.  Only partitions with at
/// least two blocks occur; the one-block term belongs to the linear
/// part of the variational equation, not to the correction.
#[derive(Debug, Clone)]
pub struct CorrectionTerm {
    pub partition: SetPartition,
    pub value: crate::coefficients::CoeffValue,
}

/// Enumerate the individual correction terms (the summands of
/// [`assemble_correction`]) for inspection and testing.
pub fn correction_terms(
    set: &CoefficientSet,
    target: crate::coefficients::CoeffTarget,
    n: usize,
    t: f64,
    z: Option<f64>,
    base: &StateVector,
    sensitivities: &SubsetValues,
) -> Result<Vec<CorrectionTerm>, FaaDiBrunoError> {
    use crate::coefficients::CoeffTarget;
    let parts = set_partitions(n)?;
    let mut out = Vec::new();
    for partition in parts.into_iter().filter(|p| p.block_count() >= 2) {
        let masks: Vec<u32> = partition
            .blocks()
            .iter()
            .map(|b| b.iter().fold(0u32, |m, &e| m | (1 << e)))
            .collect();
        let dirs = gather(&masks, &|mask| sensitivities.get(mask))?;
        let value = match target {
            CoeffTarget::Drift => {
                crate::coefficients::CoeffValue::Vector(set.df(masks.len(), t, base, &dirs)?)
            }
            CoeffTarget::Diffusion => {
                crate::coefficients::CoeffValue::Matrix(set.db(masks.len(), t, base, &dirs)?)
            }
            CoeffTarget::Jump => crate::coefficients::CoeffValue::Vector(set.dg(
                masks.len(),
                t,
                z.unwrap_or(0.0),
                base,
                &dirs,
            )?),
        };
        out.push(CorrectionTerm { partition, value });
    }
    Ok(out)
}

/// Public assembly entry point mirroring the per-operation surface:
/// computes the order-`n` correction for the chosen coefficient from a
/// [`SubsetValues`] table holding the needed sub-tuple sensitivities.
/// Order 1 returns zero (there is no partition with two blocks).
pub fn assemble_correction(
    set: &CoefficientSet,
    target: crate::coefficients::CoeffTarget,
    n: usize,
    t: f64,
    z: Option<f64>,
    base: &StateVector,
    sensitivities: &SubsetValues,
) -> Result<crate::coefficients::CoeffValue, FaaDiBrunoError> {
    use crate::coefficients::{CoeffTarget, CoeffValue};
    let elements: Vec<usize> = (0..n).collect();
    let partitions = masked_partitions(&elements)?;
    let lookup = |mask: u32| sensitivities.get(mask);
    match target {
        CoeffTarget::Drift => {
            drift_correction(set, t, base, &partitions, &lookup).map(CoeffValue::Vector)
        }
        CoeffTarget::Diffusion => {
            diffusion_correction(set, t, base, &partitions, &lookup).map(CoeffValue::Matrix)
        }
        CoeffTarget::Jump => {
            jump_correction(set, t, z.unwrap_or(0.0), base, &partitions, &lookup)
                .map(CoeffValue::Vector)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoeffTarget, CoeffValue, Diffusion, Drift, GammaFunction, Jump};
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn partitions_order_one() {
        let parts = set_partitions(1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].blocks(), &[vec![0]]);
    }

    #[test]
    fn partition_counts_match_bell_numbers() {
        // oracle: independent Bell values from the recurrence
        // B(n+1) = sum_k C(n,k) B(k), computed here directly
        fn bell_oracle(n: usize) -> u64 {
            let mut b = vec![1u64]; // B(0)
            for m in 0..n {
                let mut next = 0u64;
                let mut binom = 1u64;
                for (k, bk) in b.iter().enumerate() {
                    next += binom * bk;
                    binom = binom * (m as u64 - k as u64) / (k as u64 + 1);
                }
                b.push(next);
            }
            b[n]
        }
        for n in 1..=6 {
            let parts = set_partitions(n).unwrap();
            assert_eq!(parts.len() as u64, bell_oracle(n), "n = {n}");
            assert_eq!(bell_number(n), bell_oracle(n));
            // duplicate-free in canonical form
            let rendered: HashSet<String> =
                parts.iter().map(|p| p.display_one_based()).collect();
            assert_eq!(rendered.len(), parts.len());
            // canonical ordering: blocks by smallest element, sorted inside
            for p in &parts {
                let mut seen = Vec::new();
                for b in p.blocks() {
                    assert!(b.windows(2).all(|w| w[0] < w[1]));
                    seen.push(b[0]);
                }
                assert!(seen.windows(2).all(|w| w[0] < w[1]));
            }
        }
        assert_eq!(set_partitions(3).unwrap().len(), 5);
        assert_eq!(set_partitions(4).unwrap().len(), 15);
    }

    #[test]
    fn term_counts() {
        assert_eq!(term_count(2).unwrap(), 1);
        assert_eq!(term_count(3).unwrap(), 4);
        assert_eq!(term_count(5).unwrap(), 51);
        assert!(matches!(
            term_count(9),
            Err(FaaDiBrunoError::OrderOutOfRange(9))
        ));
        assert!(matches!(
            set_partitions(0),
            Err(FaaDiBrunoError::OrderOutOfRange(0))
        ));
    }

    fn nemytskii_diffusion_set(d: usize, d_w: usize, n_max: usize) -> CoefficientSet {
        let gamma = Arc::new(GammaFunction::new(n_max));
        let mut l = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                l.set(i, j, 0.3 * ((i + 2 * j + 1) as f64 * 0.4).sin());
            }
        }
        let mut w = Matrix::zeros(d, d_w);
        for i in 0..d {
            for j in 0..d_w {
                w.set(i, j, ((i * d_w + j + 1) as f64 * 0.9).cos());
            }
        }
        CoefficientSet::new(
            Drift::Zero,
            Diffusion::nemytskii(l, w, gamma).unwrap(),
            Jump::Zero,
            n_max,
            d,
            d_w,
        )
        .unwrap()
    }

    fn vec_of(d: usize, seed: f64) -> StateVector {
        StateVector::new((0..d).map(|k| ((k as f64 + 1.0) * seed).sin() * 0.8).collect())
    }

    #[test]
    fn order_one_correction_vanishes() {
        let set = nemytskii_diffusion_set(3, 2, 3);
        let base = vec_of(3, 0.7);
        let mut sens = SubsetValues::new(1);
        sens.insert(0b1, vec_of(3, 1.3));
        let out = assemble_correction(&set, CoeffTarget::Diffusion, 1, 0.0, None, &base, &sens)
            .unwrap();
        match out {
            CoeffValue::Matrix(m) => assert_eq!(m, Matrix::zeros(3, 2)),
            _ => panic!("expected matrix"),
        }
    }

    #[test]
    fn phi2_closed_form() {
        // Φ₂ = D²B(u)(u', u')
        let set = nemytskii_diffusion_set(3, 2, 3);
        let base = vec_of(3, 0.5);
        let u1 = vec_of(3, 1.1);
        let mut sens = SubsetValues::new(2);
        sens.insert(0b01, u1.clone());
        sens.insert(0b10, u1.clone());
        let out = assemble_correction(&set, CoeffTarget::Diffusion, 2, 0.0, None, &base, &sens)
            .unwrap();
        let expected = set.db(2, 0.0, &base, &[&u1, &u1]).unwrap();
        match out {
            CoeffValue::Matrix(m) => {
                let mut diff = m.clone();
                diff.add_assign(&expected.scale(-1.0));
                assert!(diff.frobenius_norm() <= 1e-14 * expected.frobenius_norm().max(1.0));
            }
            _ => panic!("expected matrix"),
        }
    }

    #[test]
    fn phi3_grouped_closed_form() {
        // equal directions: Φ₃ = D³B(u)(u',u',u') + 3 D²B(u)(u⁽²⁾, u')
        let set = nemytskii_diffusion_set(3, 2, 4);
        let base = vec_of(3, 0.4);
        let u1 = vec_of(3, 0.9);
        let u2 = vec_of(3, 1.7);
        let mut sens = SubsetValues::new(3);
        for mask in [0b001u32, 0b010, 0b100] {
            sens.insert(mask, u1.clone());
        }
        for mask in [0b011u32, 0b101, 0b110] {
            sens.insert(mask, u2.clone());
        }
        let out = assemble_correction(&set, CoeffTarget::Diffusion, 3, 0.0, None, &base, &sens)
            .unwrap();
        let mut expected = set.db(3, 0.0, &base, &[&u1, &u1, &u1]).unwrap();
        expected.add_assign(&set.db(2, 0.0, &base, &[&u2, &u1]).unwrap().scale(3.0));
        match out {
            CoeffValue::Matrix(m) => {
                let mut diff = m.clone();
                diff.add_assign(&expected.scale(-1.0));
                assert!(
                    diff.frobenius_norm() <= 1e-14 * expected.frobenius_norm().max(1.0),
                    "difference {}",
                    diff.frobenius_norm()
                );
            }
            _ => panic!("expected matrix"),
        }
    }

    #[test]
    fn affine_second_order_correction_vanishes() {
        let set = CoefficientSet::new(
            Drift::affine(
                StateVector::new(vec![0.1, 0.2]),
                Matrix::from_rows(2, 2, vec![0.5, 0.1, 0.0, -0.3]),
            )
            .unwrap(),
            Diffusion::Zero,
            Jump::Zero,
            3,
            2,
            0,
        )
        .unwrap();
        let base = vec_of(2, 0.8);
        let mut sens = SubsetValues::new(2);
        sens.insert(0b01, vec_of(2, 1.0));
        sens.insert(0b10, vec_of(2, 2.0));
        let out =
            assemble_correction(&set, CoeffTarget::Drift, 2, 0.0, None, &base, &sens).unwrap();
        match out {
            CoeffValue::Vector(v) => assert_eq!(v, StateVector::zeros(2)),
            _ => panic!("expected vector"),
        }
    }

    #[test]
    fn missing_subset_is_reported_by_name() {
        let set = nemytskii_diffusion_set(2, 1, 3);
        let base = vec_of(2, 0.3);
        let mut sens = SubsetValues::new(2);
        sens.insert(0b01, vec_of(2, 1.0));
        // {2} missing
        let err = assemble_correction(&set, CoeffTarget::Diffusion, 2, 0.0, None, &base, &sens)
            .unwrap_err();
        assert_eq!(err, FaaDiBrunoError::MissingSubset("2".into()));
    }

    #[test]
    fn permutation_equivariance() {
        // permuting directions and relabelling the subset table leaves
        // the assembled value unchanged
        let set = nemytskii_diffusion_set(3, 2, 4);
        let base = vec_of(3, 0.45);
        let n = 3usize;
        // distinct sub-tuple values: key by mask, value depends on mask
        let value_for = |mask: u32| vec_of(3, mask as f64 * 0.31 + 0.2);
        let mut sens = SubsetValues::new(n);
        for mask in 1u32..(1 << n) {
            sens.insert(mask, value_for(mask));
        }
        // permutation sigma = (0 1 2) -> (2 0 1): direction i of the
        // permuted problem is direction sigma(i) of the original
        let sigma = [2usize, 0, 1];
        let mut permuted = SubsetValues::new(n);
        for mask in 1u32..(1 << n) {
            let mut orig_mask = 0u32;
            for bit in 0..n {
                if mask & (1 << bit) != 0 {
                    orig_mask |= 1 << sigma[bit];
                }
            }
            permuted.insert(mask, value_for(orig_mask));
        }
        let a = assemble_correction(&set, CoeffTarget::Diffusion, n, 0.0, None, &base, &sens)
            .unwrap();
        let b = assemble_correction(&set, CoeffTarget::Diffusion, n, 0.0, None, &base, &permuted)
            .unwrap();
        match (a, b) {
            (CoeffValue::Matrix(ma), CoeffValue::Matrix(mb)) => {
                let mut diff = ma.clone();
                diff.add_assign(&mb.scale(-1.0));
                assert!(diff.frobenius_norm() <= 1e-12 * ma.frobenius_norm().max(1e-30));
            }
            _ => panic!("expected matrices"),
        }
    }

    #[test]
    fn scalar_chain_rule_against_finite_differences() {
        // d = 1: full n-th derivative of x -> F(phi(x)) must equal
        // correction + DF(phi) phi^{(n)} with the sub-derivatives of
        // phi supplied exactly.
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
        let phi = |x: f64| 0.4 * x + 0.3 * (1.3 * x).sin();
        let phi_deriv = |x: f64, j: usize| -> f64 {
            let a: f64 = 1.3;
            match j {
                1 => 0.4 + 0.3 * a * (a * x).cos(),
                2 => -0.3 * a * a * (a * x).sin(),
                3 => -0.3 * a * a * a * (a * x).cos(),
                4 => 0.3 * a * a * a * a * (a * x).sin(),
                _ => unreachable!(),
            }
        };
        let x0 = 0.45;
        let composite = |x: f64| set.f(0.0, &StateVector::new(vec![phi(x)])).coeffs()[0];

        for n in 2..=4usize {
            let mut sens = SubsetValues::new(n);
            for mask in 1u32..(1 << n) {
                let size = mask.count_ones() as usize;
                sens.insert(mask, StateVector::new(vec![phi_deriv(x0, size)]));
            }
            let base = StateVector::new(vec![phi(x0)]);
            let corr = match assemble_correction(
                &set,
                CoeffTarget::Drift,
                n,
                0.0,
                None,
                &base,
                &sens,
            )
            .unwrap()
            {
                CoeffValue::Vector(v) => v.coeffs()[0],
                _ => unreachable!(),
            };
            let top = set.df(1, 0.0, &base, &[&StateVector::new(vec![phi_deriv(x0, n)])])
                .unwrap()
                .coeffs()[0];
            let full = corr + top;

            // central finite differences of the composite, Richardson
            // extrapolated so the n = 3, 4 stencils reach O(h⁴)
            let stencil = |h: f64| match n {
                2 => (composite(x0 + h) - 2.0 * composite(x0) + composite(x0 - h)) / (h * h),
                3 => {
                    (composite(x0 + 2.0 * h) - 2.0 * composite(x0 + h)
                        + 2.0 * composite(x0 - h)
                        - composite(x0 - 2.0 * h))
                        / (2.0 * h * h * h)
                }
                _ => {
                    (composite(x0 + 2.0 * h) - 4.0 * composite(x0 + h) + 6.0 * composite(x0)
                        - 4.0 * composite(x0 - h)
                        + composite(x0 - 2.0 * h))
                        / (h * h * h * h)
                }
            };
            let h = match n {
                2 => 1e-4,
                3 => 2e-2,
                _ => 4e-2,
            };
            let fd = if n == 2 {
                stencil(h)
            } else {
                (4.0 * stencil(h / 2.0) - stencil(h)) / 3.0
            };
            let scale = fd.abs().max(1e-3);
            assert!(
                (full - fd).abs() / scale <= 1e-4,
                "n = {n}: assembled {full} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn term_enumeration_sums_to_the_assembled_correction() {
        let set = nemytskii_diffusion_set(3, 2, 4);
        let base = vec_of(3, 0.45);
        let n = 3usize;
        let mut sens = SubsetValues::new(n);
        for mask in 1u32..(1 << n) {
            sens.insert(mask, vec_of(3, mask as f64 * 0.31 + 0.2));
        }
        let terms =
            correction_terms(&set, CoeffTarget::Diffusion, n, 0.0, None, &base, &sens).unwrap();
        assert_eq!(terms.len() as u64, term_count(n).unwrap());
        assert!(terms.iter().all(|t| t.partition.block_count() >= 2));
        let mut sum = Matrix::zeros(3, 2);
        for term in &terms {
            match &term.value {
                CoeffValue::Matrix(m) => sum.add_assign(m),
                _ => panic!("expected matrix"),
            }
        }
        let total = match assemble_correction(
            &set,
            CoeffTarget::Diffusion,
            n,
            0.0,
            None,
            &base,
            &sens,
        )
        .unwrap()
        {
            CoeffValue::Matrix(m) => m,
            _ => unreachable!(),
        };
        let mut diff = sum.clone();
        diff.add_assign(&total.scale(-1.0));
        assert!(diff.frobenius_norm() <= 1e-13 * total.frobenius_norm().max(1e-30));
    }

    #[test]
    fn subset_table_roundtrip() {
        let mut sens = SubsetValues::new(3);
        assert!(sens.get(0b101).is_none());
        sens.insert(0b101, StateVector::new(vec![1.0]));
        assert_abs_diff_eq!(sens.get(0b101).unwrap().coeffs()[0], 1.0);
    }
}
