//! Per-path driving noise: truncated Wiener increments on a grid and
//! marked Poisson events on `(0, T] x Z`, with counter-based seeding so
//! a realization is a pure function of `(master_seed, path_index)` and
//! can be regenerated identically from any worker.
//!
//! The grid is jump-adapted: exact jump times are merged into the
//! uniform base grid, so the stepper never has to locate a jump inside
//! a step and the compensated-martingale checks are sharp.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("mark weights sum to {0}, expected 1 within 1e-12")]
    WeightsNotNormalized(f64),
    #[error("mark space invalid: {0}")]
    InvalidMarkSpace(String),
    #[error("intensity too large for desk scale: lambda * T = {0} expected events (limit 1e7)")]
    IntensityTooLarge(f64),
    #[error("invalid horizon or step: T = {t}, dt = {dt}")]
    InvalidGrid { t: f64, dt: f64 },
}

/// Mark space `Z` with its (time-homogeneous, deterministic)
/// compensator `ν(dt, dz) = λ dt ⊗ m(dz)`.
#[derive(Debug, Clone)]
pub enum MarkDistribution {
    /// Finite set `{(z_i, m_i)}` with probability weights `m_i`.
    Finite(Vec<(f64, f64)>),
    /// Marks on `[0, 1]` with a tabulated density (piecewise linear
    /// between the nodes); sampling is by inverse CDF.
    IntervalTable { nodes: Vec<f64>, density: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct MarkSpace {
    pub intensity: f64,
    distribution: MarkDistribution,
    /// Quadrature nodes `(z, weight)` for `∫_Z φ(z) m(dz)`; exact for
    /// finite mark sets, trapezoid-rule weights for interval tables.
    quad: Vec<(f64, f64)>,
    /// Cumulative weights for inverse-CDF sampling.
    cdf: Vec<f64>,
}

impl MarkSpace {
    pub fn finite(marks: Vec<(f64, f64)>, intensity: f64) -> Result<Self, NoiseError> {
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(NoiseError::InvalidMarkSpace(format!(
                "intensity {intensity} must be finite and >= 0"
            )));
        }
        if marks.is_empty() {
            return Err(NoiseError::InvalidMarkSpace("empty mark set".into()));
        }
        if marks
            .iter()
            .any(|(z, w)| !z.is_finite() || !w.is_finite() || *w < 0.0)
        {
            return Err(NoiseError::InvalidMarkSpace(
                "marks and weights must be finite, weights nonnegative".into(),
            ));
        }
        let total: f64 = marks.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(NoiseError::WeightsNotNormalized(total));
        }
        let mut cdf = Vec::with_capacity(marks.len());
        let mut acc = 0.0;
        for (_, w) in &marks {
            acc += w;
            cdf.push(acc);
        }
        Ok(MarkSpace {
            intensity,
            quad: marks.clone(),
            distribution: MarkDistribution::Finite(marks),
            cdf,
        })
    }

    /// Tabulated density on `[0, 1]`; the table is normalized to total
    /// mass 1 (trapezoid rule), so only the shape matters.
    pub fn interval_table(
        nodes: Vec<f64>,
        density: Vec<f64>,
        intensity: f64,
    ) -> Result<Self, NoiseError> {
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(NoiseError::InvalidMarkSpace(format!(
                "intensity {intensity} must be finite and >= 0"
            )));
        }
        if nodes.len() < 2 || nodes.len() != density.len() {
            return Err(NoiseError::InvalidMarkSpace(
                "density table needs >= 2 nodes and matching lengths".into(),
            ));
        }
        if nodes.iter().any(|z| !z.is_finite() || *z < 0.0 || *z > 1.0) {
            return Err(NoiseError::InvalidMarkSpace(
                "interval marks must lie in [0, 1]".into(),
            ));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NoiseError::InvalidMarkSpace(
                "density nodes must be strictly increasing".into(),
            ));
        }
        if density.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NoiseError::InvalidMarkSpace(
                "density values must be finite and >= 0".into(),
            ));
        }
        // trapezoid mass per cell, then normalize
        let mut mass = 0.0;
        for i in 0..nodes.len() - 1 {
            mass += 0.5 * (density[i] + density[i + 1]) * (nodes[i + 1] - nodes[i]);
        }
        if mass <= 0.0 {
            return Err(NoiseError::InvalidMarkSpace(
                "density table has zero total mass".into(),
            ));
        }
        let density: Vec<f64> = density.iter().map(|v| v / mass).collect();
        // node quadrature weights (trapezoid): w_i = density_i * cell_i
        let n = nodes.len();
        let mut quad = Vec::with_capacity(n);
        for i in 0..n {
            let left = if i == 0 { nodes[0] } else { nodes[i - 1] };
            let right = if i == n - 1 { nodes[n - 1] } else { nodes[i + 1] };
            quad.push((nodes[i], density[i] * 0.5 * (right - left)));
        }
        // exact CDF of the piecewise-linear density at the nodes
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 0..n - 1 {
            acc += 0.5 * (density[i] + density[i + 1]) * (nodes[i + 1] - nodes[i]);
            cdf.push(acc);
        }
        Ok(MarkSpace {
            intensity,
            distribution: MarkDistribution::IntervalTable { nodes, density },
            quad,
            cdf,
        })
    }

    /// Nodes and weights for `∫_Z φ(z) m(dz)`.
    pub fn quadrature(&self) -> &[(f64, f64)] {
        &self.quad
    }

    pub fn distribution(&self) -> &MarkDistribution {
        &self.distribution
    }

    fn sample_mark<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match &self.distribution {
            MarkDistribution::Finite(marks) => {
                let idx = self
                    .cdf
                    .iter()
                    .position(|&c| u <= c)
                    .unwrap_or(marks.len() - 1);
                marks[idx].0
            }
            MarkDistribution::IntervalTable { nodes, density } => {
                // invert the piecewise-quadratic CDF cell by cell
                let idx = match self.cdf.windows(2).position(|w| u <= w[1]) {
                    Some(i) => i,
                    None => nodes.len() - 2,
                };
                let (z0, z1) = (nodes[idx], nodes[idx + 1]);
                let (d0, d1) = (density[idx], density[idx + 1]);
                let rem = u - self.cdf[idx];
                let h = z1 - z0;
                let slope = (d1 - d0) / h;
                // solve d0 s + slope s²/2 = rem for s in [0, h]
                let s = if slope.abs() < 1e-14 * d0.abs().max(1e-300) {
                    if d0 > 0.0 {
                        rem / d0
                    } else {
                        0.5 * h
                    }
                } else {
                    let disc = (d0 * d0 + 2.0 * slope * rem).max(0.0);
                    (disc.sqrt() - d0) / slope
                };
                (z0 + s.clamp(0.0, h)).min(1.0)
            }
        }
    }
}

/// One path's driving noise, reusable across initial data (common
/// random numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    /// Strictly increasing grid `0 = t_0 < … < t_N = T`, containing
    /// every jump time.
    pub grid: Vec<f64>,
    /// `N x d_W` increments; entry `i` covers `[t_i, t_{i+1}]` and was
    /// drawn with variance `t_{i+1} - t_i`.
    pub wiener_increments: Vec<Vec<f64>>,
    /// Ordered jump events `(time, mark)`, times in `(0, T]`.
    pub jump_events: Vec<(f64, f64)>,
    /// Grid index of each jump time (`grid[jump_grid_indices[k]] ==
    /// jump_events[k].0`).
    pub jump_grid_indices: Vec<usize>,
    pub master_seed: u64,
    pub path_index: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-(seed, index, stream) generator.  Mixing the
/// inputs through SplitMix64 decorrelates nearby indices before they
/// seed the ChaCha stream.
pub fn derived_rng(master_seed: u64, path_index: u64, stream: u64) -> ChaCha12Rng {
    let mut state = master_seed
        ^ path_index.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ stream.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

const NOISE_STREAM: u64 = 1;

/// Draw one path's noise.  Pure in `(mark_space, d_w, t_final,
/// base_dt, master_seed, path_index)`: call order and worker count do
/// not enter.
pub fn sample_noise(
    mark_space: &MarkSpace,
    d_w: usize,
    t_final: f64,
    base_dt: f64,
    master_seed: u64,
    path_index: u64,
) -> Result<NoiseRealization, NoiseError> {
    if !(t_final > 0.0) || !(base_dt > 0.0) || t_final / base_dt > 1e7 {
        return Err(NoiseError::InvalidGrid {
            t: t_final,
            dt: base_dt,
        });
    }
    let expected_events = mark_space.intensity * t_final;
    if expected_events > 1e7 {
        return Err(NoiseError::IntensityTooLarge(expected_events));
    }

    let mut rng = derived_rng(master_seed, path_index, NOISE_STREAM);

    // exact jump simulation: exponential interarrivals, i.i.d. marks
    let mut jump_events: Vec<(f64, f64)> = Vec::new();
    if mark_space.intensity > 0.0 {
        let exp = Exp::new(mark_space.intensity)
            .map_err(|e| NoiseError::InvalidMarkSpace(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if !(t <= t_final) {
                break;
            }
            let mark = mark_space.sample_mark(&mut rng);
            jump_events.push((t, mark));
        }
    }
    // ν is non-atomic, so coincident times have probability zero; drop
    // duplicates defensively so the grid stays strictly increasing.
    jump_events.dedup_by(|a, b| a.0 == b.0);

    // uniform base grid merged with the jump times; base points are
    // kept strictly below T so the grid always ends exactly at T even
    // when T/dt rounds just past an integer
    let steps = (t_final / base_dt).ceil() as usize;
    let mut grid = Vec::with_capacity(steps + jump_events.len() + 1);
    for i in 0..steps {
        let t = i as f64 * base_dt;
        if t < t_final {
            grid.push(t);
        }
    }
    grid.push(t_final);
    for &(tau, _) in &jump_events {
        grid.push(tau);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    // guard against a base point landing on T twice through rounding
    debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));

    let jump_grid_indices = jump_events
        .iter()
        .map(|&(tau, _)| grid.binary_search_by(|t| t.partial_cmp(&tau).unwrap()).unwrap())
        .collect();

    // Wiener increments per grid cell, variance = cell width
    let cells = grid.len() - 1;
    let mut wiener_increments = Vec::with_capacity(cells);
    for i in 0..cells {
        let sd = (grid[i + 1] - grid[i]).sqrt();
        let mut inc = Vec::with_capacity(d_w);
        for _ in 0..d_w {
            let z: f64 = StandardNormal.sample(&mut rng);
            inc.push(sd * z);
        }
        wiener_increments.push(inc);
    }

    Ok(NoiseRealization {
        grid,
        wiener_increments,
        jump_events,
        jump_grid_indices,
        master_seed,
        path_index,
    })
}

impl NoiseRealization {
    /// The common-random-numbers pairing: hand back the identical
    /// realization for reuse with a perturbed initial datum.  Paired
    /// runs must share this object (or its clone) — never resample
    /// between the members of a difference quotient.
    pub fn paired(&self) -> NoiseRealization {
        self.clone()
    }

    /// Restrict to a coarser uniform base step, keeping the jump times
    /// and summing the Wiener increments inside each coarse cell.  The
    /// coarse step must be an integer multiple of the fine one so the
    /// coarse base grid is a subset of the fine grid.
    pub fn coarsened(&self, coarse_dt: f64, fine_dt: f64) -> Result<NoiseRealization, NoiseError> {
        let ratio = coarse_dt / fine_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(NoiseError::InvalidGrid {
                t: coarse_dt,
                dt: fine_dt,
            });
        }
        let t_final = *self.grid.last().unwrap();
        let steps = (t_final / coarse_dt).ceil() as usize;
        let mut keep: Vec<f64> = (0..steps)
            .map(|i| i as f64 * coarse_dt)
            .filter(|&t| t < t_final)
            .collect();
        keep.push(t_final);
        for &(tau, _) in &self.jump_events {
            keep.push(tau);
        }
        keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
        keep.dedup();

        let d_w = self.wiener_increments.first().map_or(0, Vec::len);
        let mut wiener = Vec::with_capacity(keep.len() - 1);
        let mut fine_idx = 0usize;
        for w in keep.windows(2) {
            let mut acc = vec![0.0; d_w];
            while fine_idx < self.grid.len() - 1 && self.grid[fine_idx + 1] <= w[1] {
                if self.grid[fine_idx] >= w[0] {
                    for (a, b) in acc.iter_mut().zip(&self.wiener_increments[fine_idx]) {
                        *a += b;
                    }
                }
                fine_idx += 1;
            }
            wiener.push(acc);
        }
        let jump_grid_indices = self
            .jump_events
            .iter()
            .map(|&(tau, _)| {
                keep.binary_search_by(|t| t.partial_cmp(&tau).unwrap())
                    .expect("jump time must survive coarsening")
            })
            .collect();
        Ok(NoiseRealization {
            grid: keep,
            wiener_increments: wiener,
            jump_events: self.jump_events.clone(),
            jump_grid_indices,
            master_seed: self.master_seed,
            path_index: self.path_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_marks() -> MarkSpace {
        MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 2.0).unwrap()
    }

    #[test]
    fn zero_intensity_gives_uniform_grid() {
        let ms = MarkSpace::finite(vec![(1.0, 1.0)], 0.0).unwrap();
        let n = sample_noise(&ms, 2, 1.0, 0.25, 42, 0).unwrap();
        assert!(n.jump_events.is_empty());
        assert_eq!(n.grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(n.wiener_increments.len(), 4);
    }

    #[test]
    fn determinism_same_inputs_bitwise_identical() {
        let ms = unit_marks();
        let a = sample_noise(&ms, 3, 1.0, 0.1, 7, 123).unwrap();
        let b = sample_noise(&ms, 3, 1.0, 0.1, 7, 123).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&ms, 3, 1.0, 0.1, 7, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pairing_returns_identical_realization() {
        let ms = unit_marks();
        let a = sample_noise(&ms, 1, 1.0, 0.1, 11, 5).unwrap();
        assert_eq!(a.paired(), a);
    }

    #[test]
    fn grid_contains_every_jump_time() {
        let ms = MarkSpace::finite(vec![(0.5, 1.0)], 5.0).unwrap();
        let n = sample_noise(&ms, 1, 2.0, 0.125, 3, 9).unwrap();
        for (k, &(tau, _)) in n.jump_events.iter().enumerate() {
            assert!(tau > 0.0 && tau <= 2.0);
            assert_eq!(n.grid[n.jump_grid_indices[k]], tau);
        }
        // strictly increasing, starts at 0, ends at T
        assert_eq!(n.grid[0], 0.0);
        assert_eq!(*n.grid.last().unwrap(), 2.0);
        assert!(n.grid.windows(2).all(|w| w[0] < w[1]));
        // distinct jump times
        assert!(n.jump_events.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn intensity_guard() {
        let ms = MarkSpace::finite(vec![(1.0, 1.0)], 2e7).unwrap();
        assert!(matches!(
            sample_noise(&ms, 0, 1.0, 0.1, 1, 0),
            Err(NoiseError::IntensityTooLarge(_))
        ));
    }

    #[test]
    fn weight_normalization_guard() {
        assert!(matches!(
            MarkSpace::finite(vec![(1.0, 0.6), (-1.0, 0.6)], 1.0),
            Err(NoiseError::WeightsNotNormalized(_))
        ));
    }

    #[test]
    fn poisson_count_mean_three_sigma() {
        // λ = 2, T = 1 over 1e5 paths: mean count within 3 sqrt(2/M)
        let ms = unit_marks();
        let m = 100_000u64;
        let mut total = 0usize;
        for path in 0..m {
            total += sample_noise(&ms, 0, 1.0, 0.5, 2024, path).unwrap().jump_events.len();
        }
        let mean = total as f64 / m as f64;
        let tol = 3.0 * (2.0f64 / m as f64).sqrt();
        assert!((mean - 2.0).abs() <= tol, "mean {mean} not within {tol} of 2");
    }

    #[test]
    fn poisson_count_chi_square_goodness_of_fit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let ms = unit_marks();
        let m = 100_000u64;
        let max_bin = 8usize; // counts 0..=7 plus pooled tail
        let mut observed = vec![0u64; max_bin + 1];
        for path in 0..m {
            let k = sample_noise(&ms, 0, 1.0, 0.5, 4711, path).unwrap().jump_events.len();
            observed[k.min(max_bin)] += 1;
        }
        // Poisson(2) pmf
        let lambda_t: f64 = 2.0;
        let mut pmf = Vec::with_capacity(max_bin + 1);
        let mut p = (-lambda_t).exp();
        let mut tail = 1.0;
        for k in 0..max_bin {
            pmf.push(p);
            tail -= p;
            p *= lambda_t / (k as f64 + 1.0);
        }
        pmf.push(tail.max(0.0));
        let chi2: f64 = observed
            .iter()
            .zip(&pmf)
            .map(|(&o, &pk)| {
                let e = pk * m as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let crit = ChiSquared::new(max_bin as f64).unwrap().inverse_cdf(0.999);
        assert!(chi2 <= crit, "chi2 {chi2} exceeds critical value {crit}");
    }

    #[test]
    fn wiener_increment_moments() {
        let ms = MarkSpace::finite(vec![(1.0, 1.0)], 0.0).unwrap();
        let m = 100_000u64;
        let dt = 0.02;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for path in 0..m {
            let n = sample_noise(&ms, 1, dt, dt, 99, path).unwrap();
            let w = n.wiener_increments[0][0];
            sum += w;
            sumsq += w * w;
        }
        let mean = sum / m as f64;
        let var = sumsq / m as f64 - mean * mean;
        assert!(mean.abs() <= 4.0 * (dt / m as f64).sqrt(), "mean {mean}");
        let var_tol = dt * 5.0 / (m as f64).sqrt();
        assert!((var - dt).abs() <= var_tol, "variance {var} vs {dt}");
    }

    #[test]
    fn interval_table_sampling_matches_density() {
        // triangular density on [0,1]: f(z) = 2z
        let nodes: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let density: Vec<f64> = nodes.iter().map(|z| 2.0 * z).collect();
        let ms = MarkSpace::interval_table(nodes, density, 1.0).unwrap();
        let mut rng = derived_rng(5, 0, 0);
        let m = 200_000;
        let mut mean = 0.0;
        for _ in 0..m {
            mean += ms.sample_mark(&mut rng);
        }
        mean /= m as f64;
        // E z = 2/3 for the triangular density
        assert!((mean - 2.0 / 3.0).abs() < 0.005, "mean {mean}");
        // quadrature integrates z against m(dz) to the same value
        let q: f64 = ms.quadrature().iter().map(|(z, w)| z * w).sum();
        assert!((q - 2.0 / 3.0).abs() < 0.01, "quadrature mean {q}");
    }

    #[test]
    fn grid_invariants_under_awkward_horizons() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &(1e-4f64..10.0, 1u32..2000, 0u64..50),
                |(dt, cells_hint, path)| {
                    // horizons that do and do not divide evenly
                    let t_final = dt * cells_hint as f64 * 0.9973 + dt * 0.31;
                    let ms = MarkSpace::finite(vec![(1.0, 0.5), (-1.0, 0.5)], 1.5).unwrap();
                    let n = sample_noise(&ms, 1, t_final, dt, 99, path).unwrap();
                    prop_assert_eq!(n.grid[0], 0.0);
                    prop_assert_eq!(*n.grid.last().unwrap(), t_final);
                    prop_assert!(n.grid.windows(2).all(|w| w[0] < w[1]));
                    prop_assert_eq!(n.wiener_increments.len(), n.grid.len() - 1);
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn coarsening_preserves_jumps_and_total_increment() {
        let ms = unit_marks();
        let fine = sample_noise(&ms, 2, 1.0, 0.0625, 31, 4).unwrap();
        let coarse = fine.coarsened(0.25, 0.0625).unwrap();
        assert_eq!(coarse.jump_events, fine.jump_events);
        for (k, &(tau, _)) in coarse.jump_events.iter().enumerate() {
            assert_eq!(coarse.grid[coarse.jump_grid_indices[k]], tau);
        }
        // totals of the Wiener increments agree per component
        let total = |n: &NoiseRealization, c: usize| -> f64 {
            n.wiener_increments.iter().map(|inc| inc[c]).sum()
        };
        for c in 0..2 {
            let a = total(&fine, c);
            let b = total(&coarse, c);
            assert!((a - b).abs() < 1e-12, "component {c}: {a} vs {b}");
        }
    }
}
