//! Executable regularity checks for the solution map: Lipschitz
//! dependence on the initial datum, the first-order directional
//! (Gateaux) limit, uniformity of that limit over direction balls
//! (Frechet), higher-order difference quotients, the chain-rule
//! recursion between consecutive correction orders, the contraction
//! diagnostic for the fixed-point map, and the exponent bookkeeping.
//!
//! Every driver enforces common random numbers: all solves for one
//! path index reuse one noise realization, so difference quotients are
//! exact pathwise quantities and verdicts are deterministic functions
//! of `(problem, seed)`.  The quotient drivers share one per-tuple
//! worker, which makes the advertised reductions (a singleton
//! direction set, or order one) bitwise identities rather than
//! approximate ones.
//!
//! Acceptance is by ratio bands rather than absolute error bars: the
//! regularity statements being checked are limit statements without
//! rates, but the built-in fixtures are twice differentiable with
//! polynomially growing second derivatives, so their remainders scale
//! like `O(ε)` and halving `ε` should halve them.  Linear fixtures are
//! the exception: their remainders sit at rounding level and are held
//! to an absolute tolerance instead.

pub mod plan;

use rayon::prelude::*;
use thiserror::Error;

use crate::coefficients::{CoeffTarget, CoeffValue, CoefficientError, CoefficientSet};
use crate::faadibruno::{assemble_correction, FaaDiBrunoError, SubsetValues};
use crate::noise::{derived_rng, MarkSpace, NoiseError, NoiseRealization};
use crate::norms::{sp_norm_from_sups, EnsembleStatistic, NormsError};
use crate::solver::{combo_sup_window, PathSample, SolveContext, SolverError};
use crate::spectral::{SpectralOperator, StateVector};
use rand_distr::{Distribution, StandardNormal};

const DIRECTION_STREAM: u64 = 0x6469; // "di"

/// Default absolute tolerance for fixtures whose remainder must vanish
/// identically (linear coefficient sets).
pub const TOL_LINEAR: f64 = 1e-12;

/// Ratio band for the `O(ε)` regime of a single-direction quotient.
pub const RATIO_BAND: (f64, f64) = (1.5, 2.5);

/// Widened band for max-over-directions tables.
pub const RATIO_BAND_WIDE: (f64, f64) = (1.4, 2.6);

/// Fraction of blown-up paths beyond which a verification run fails
/// outright.
pub const BLOWUP_FAIL_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("epsilon list invalid: {0}")]
    InvalidEpsilons(String),
    #[error("direction set is empty")]
    NoDirections,
    #[error("direction {index} has norm {norm}, expected <= 1")]
    DirectionNotInBall { index: usize, norm: f64 },
    #[error("uniformity requires q > p, got q = {q}, p = {p}")]
    QNotAboveP { q: f64, p: f64 },
    #[error("exponent plan violated: {0}")]
    PlanViolation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Norms(#[from] NormsError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Correction(#[from] FaaDiBrunoError),
}

/// Everything needed to simulate one ensemble: operator, coefficients,
/// mark space, horizon/grid, initial datum and the master seed.
#[derive(Debug, Clone)]
pub struct Problem {
    pub op: SpectralOperator,
    pub set: CoefficientSet,
    pub marks: MarkSpace,
    pub t_final: f64,
    pub base_dt: f64,
    pub u0: StateVector,
    pub seed: u64,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn window(&self) -> (f64, f64) {
        (0.0, self.t_final)
    }

    pub fn noise_for(&self, path: u64) -> Result<NoiseRealization, NoiseError> {
        crate::noise::sample_noise(
            &self.marks,
            self.set.wiener_dim(),
            self.t_final,
            self.base_dt,
            self.seed,
            path,
        )
    }
}

/// Deterministic unit directions: coordinate axes first when
/// `include_axes`, then seeded Gaussian directions normalised to the
/// unit sphere.
pub fn unit_directions(
    d: usize,
    count: usize,
    seed: u64,
    include_axes: bool,
) -> Vec<StateVector> {
    let mut out = Vec::with_capacity(count);
    if include_axes {
        for k in 0..d.min(count) {
            out.push(StateVector::basis(d, k));
        }
    }
    let mut idx = 0u64;
    while out.len() < count {
        let mut rng = derived_rng(seed, idx, DIRECTION_STREAM);
        let v = StateVector::new(
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect(),
        );
        if v.norm() > 1e-9 {
            out.push(v.normalized());
        }
        idx += 1;
    }
    out
}

fn validate_epsilons(eps: &[f64]) -> Result<(), VerifyError> {
    if eps.is_empty() {
        return Err(VerifyError::InvalidEpsilons("empty list".into()));
    }
    if eps.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(VerifyError::InvalidEpsilons(
            "entries must be positive and finite".into(),
        ));
    }
    if eps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(VerifyError::InvalidEpsilons(
            "entries must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// One row of a remainder table.
#[derive(Debug, Clone)]
pub struct RemainderRow {
    pub epsilon: f64,
    pub remainder: EnsembleStatistic,
    /// `r(previous ε) / r(this ε)`; `None` on the first row.
    pub ratio_to_prev: Option<f64>,
}

/// Remainder-vs-ε table with its verdict.
#[derive(Debug, Clone)]
pub struct RemainderTable {
    pub rows: Vec<RemainderRow>,
    pub direction: String,
    pub p: f64,
    pub q: Option<f64>,
    pub pass: bool,
    pub note: String,
}

impl RemainderTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("epsilon,remainder,std_error,ratio_to_prev,paths\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.epsilon,
                row.remainder.estimate,
                row.remainder.std_error,
                row.ratio_to_prev.map_or(String::new(), |r| r.to_string()),
                row.remainder.paths
            ));
        }
        out.push_str(&format!("# pass={} note={}\n", self.pass, self.note));
        out
    }
}

fn ratios_of(estimates: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None; estimates.len()];
    for k in 1..estimates.len() {
        out[k] = Some(estimates[k - 1] / estimates[k]);
    }
    out
}

/// Shared verdict logic: either the remainders sit below `tol_abs`
/// (exactly-differentiable fixtures, where only rounding noise is
/// left), or they decrease to below it, or every consecutive ratio
/// sits in the band (the `O(ε)` regime).
fn band_verdict(estimates: &[f64], tol_abs: f64, band: (f64, f64)) -> (bool, String) {
    let monotone = estimates.windows(2).all(|w| w[1] <= w[0]);
    let last = *estimates.last().unwrap();
    if estimates.iter().all(|&e| e <= tol_abs) {
        return (true, format!("all remainders below tol_abs {tol_abs}"));
    }
    if monotone && last <= tol_abs {
        return (true, format!("remainder below tol_abs {tol_abs}"));
    }
    let ratios: Vec<f64> = estimates
        .windows(2)
        .map(|w| w[0] / w[1])
        .collect();
    let in_band = !ratios.is_empty()
        && ratios
            .iter()
            .all(|&r| r.is_finite() && r >= band.0 && r <= band.1);
    if in_band {
        (
            true,
            format!("ratios within [{}, {}]", band.0, band.1),
        )
    } else {
        (
            false,
            format!(
                "neither tolerance ({last} > {tol_abs}) nor band: ratios {:?}",
                ratios
            ),
        )
    }
}

/// Per-path worker shared by all quotient drivers.
///
/// For the direction tuple `(h_1..h_n)` it returns, for each `ε`, the
/// windowed sup of
///
/// ```text
/// ε⁻¹ [ u^(n-1)(u0 + ε h_n)(h_1..h_{n-1}) - u^(n-1)(u0)(h_1..h_{n-1}) ] - u^(n)(u0)(h_1..h_n)
/// ```
///
/// (order `n = 1` reads `u^(0) = u`, i.e. the plain Gateaux quotient).
fn quotient_sups_for_tuple(
    problem: &Problem,
    noise: &NoiseRealization,
    tuple: &[StateVector],
    eps: &[f64],
) -> Result<Vec<f64>, VerifyError> {
    let n = tuple.len();
    let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, noise)?;
    let sys = ctx.solve_system(&problem.u0, tuple)?;
    let target = sys.full_order();
    let lower_mask = (1u32 << (n - 1)) - 1;
    let base_sub: &PathSample = if n == 1 {
        sys.base()
    } else {
        sys.path(lower_mask).expect("lower subset solved")
    };
    let (w0, w1) = problem.window();
    let h_last = &tuple[n - 1];
    let mut out = Vec::with_capacity(eps.len());
    for &e in eps {
        let mut shifted_u0 = problem.u0.clone();
        shifted_u0.axpy(e, h_last);
        let shifted: PathSample = if n == 1 {
            ctx.solve_mild(&shifted_u0)?
        } else {
            ctx.solve_system(&shifted_u0, &tuple[..n - 1])?
                .full_order()
                .clone()
        };
        let sup = combo_sup_window(
            &[(1.0 / e, &shifted), (-1.0 / e, base_sub), (-1.0, target)],
            w0,
            w1,
        );
        out.push(sup);
    }
    Ok(out)
}

/// Run the per-path worker over the ensemble for several direction
/// tuples; returns `sups[tuple][eps][path]`.
fn ensemble_quotient_sups(
    problem: &Problem,
    tuples: &[Vec<StateVector>],
    eps: &[f64],
    m_paths: u64,
) -> Result<Vec<Vec<Vec<f64>>>, VerifyError> {
    let per_path: Vec<Vec<Vec<f64>>> = (0..m_paths)
        .into_par_iter()
        .map(|path| -> Result<Vec<Vec<f64>>, VerifyError> {
            let noise = problem.noise_for(path)?;
            tuples
                .iter()
                .map(|tuple| quotient_sups_for_tuple(problem, &noise, tuple, eps))
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    // reorder to [tuple][eps][path]; the path axis stays in ascending
    // order, so reductions are independent of the worker count
    let mut out = vec![vec![vec![0.0; m_paths as usize]; eps.len()]; tuples.len()];
    for (pi, per_tuple) in per_path.iter().enumerate() {
        for (ti, per_eps) in per_tuple.iter().enumerate() {
            for (ei, &s) in per_eps.iter().enumerate() {
                out[ti][ei][pi] = s;
            }
        }
    }
    Ok(out)
}

fn blowup_note(rows: &[RemainderRow]) -> Option<String> {
    let worst = rows
        .iter()
        .map(|r| r.remainder.blowup_fraction)
        .fold(0.0f64, f64::max);
    (worst > BLOWUP_FAIL_FRACTION).then(|| format!("blowup fraction {worst} exceeds 1%"))
}

fn table_from_sups(
    sups_per_eps: &[Vec<f64>],
    eps: &[f64],
    p: f64,
    q: Option<f64>,
    direction: String,
    tol_abs: f64,
    band: (f64, f64),
    seed: u64,
) -> Result<RemainderTable, VerifyError> {
    let mut stats = Vec::with_capacity(eps.len());
    for (ei, sups) in sups_per_eps.iter().enumerate() {
        stats.push(sp_norm_from_sups(sups, p, seed.wrapping_add(ei as u64))?);
    }
    let estimates: Vec<f64> = stats.iter().map(|s| s.estimate).collect();
    let ratios = ratios_of(&estimates);
    let rows: Vec<RemainderRow> = eps
        .iter()
        .zip(stats)
        .zip(ratios)
        .map(|((&epsilon, remainder), ratio_to_prev)| RemainderRow {
            epsilon,
            remainder,
            ratio_to_prev,
        })
        .collect();
    let (mut pass, mut note) = band_verdict(&estimates, tol_abs, band);
    if let Some(diag) = blowup_note(&rows) {
        pass = false;
        note = format!("{note}; {diag}");
    }
    Ok(RemainderTable {
        rows,
        direction,
        p,
        q,
        pass,
        note,
    })
}

/// First-order directional quotient with common random numbers:
/// `r(ε) = |ε⁻¹(u_ε - u) - y|_{S^p}` per `ε`.  PASS when the
/// remainders sit below (or decrease to below) the absolute tolerance,
/// or when every halving ratio lies in the `O(ε)` band.
pub fn gateaux_test(
    problem: &Problem,
    direction: &StateVector,
    eps: &[f64],
    p: f64,
    m_paths: u64,
    tol_abs: f64,
) -> Result<RemainderTable, VerifyError> {
    validate_epsilons(eps)?;
    if m_paths == 0 {
        return Err(VerifyError::InvalidParameter("paths = 0".into()));
    }
    let tuples = vec![vec![direction.clone()]];
    let sups = ensemble_quotient_sups(problem, &tuples, eps, m_paths)?;
    table_from_sups(
        &sups[0],
        eps,
        p,
        None,
        format!("|h| = {}", direction.norm()),
        tol_abs,
        RATIO_BAND,
        problem.seed,
    )
}

/// Uniform version of the directional quotient: the per-`ε` value is
/// the max over the direction set of the per-direction remainder, and
/// the verdict additionally requires monotone decrease of that max.
pub fn frechet_test(
    problem: &Problem,
    directions: &[StateVector],
    eps: &[f64],
    p: f64,
    q: f64,
    m_paths: u64,
    tol_abs: f64,
) -> Result<RemainderTable, VerifyError> {
    validate_epsilons(eps)?;
    if directions.is_empty() {
        return Err(VerifyError::NoDirections);
    }
    for (index, h) in directions.iter().enumerate() {
        let norm = h.norm();
        if norm > 1.0 + 1e-9 {
            return Err(VerifyError::DirectionNotInBall { index, norm });
        }
    }
    if !(q > p) {
        return Err(VerifyError::QNotAboveP { q, p });
    }
    let tuples: Vec<Vec<StateVector>> = directions.iter().map(|h| vec![h.clone()]).collect();
    let sups = ensemble_quotient_sups(problem, &tuples, eps, m_paths)?;
    // per-direction estimates, then the max per ε
    let mut max_rows: Vec<Vec<f64>> = vec![Vec::new(); eps.len()];
    let mut per_eps_stats: Vec<EnsembleStatistic> = Vec::with_capacity(eps.len());
    for ei in 0..eps.len() {
        let mut best: Option<EnsembleStatistic> = None;
        for (ti, per_tuple) in sups.iter().enumerate() {
            let stat = sp_norm_from_sups(
                &per_tuple[ei],
                p,
                problem.seed.wrapping_add((ei * directions.len() + ti) as u64),
            )?;
            if best
                .as_ref()
                .map(|b| stat.estimate > b.estimate)
                .unwrap_or(true)
            {
                best = Some(stat);
            }
        }
        let best = best.unwrap();
        max_rows[ei] = vec![best.estimate];
        per_eps_stats.push(best);
    }
    let estimates: Vec<f64> = per_eps_stats.iter().map(|s| s.estimate).collect();
    let ratios = ratios_of(&estimates);
    let rows: Vec<RemainderRow> = eps
        .iter()
        .zip(per_eps_stats)
        .zip(ratios)
        .map(|((&epsilon, remainder), ratio_to_prev)| RemainderRow {
            epsilon,
            remainder,
            ratio_to_prev,
        })
        .collect();
    let (mut pass, mut note) = band_verdict(&estimates, tol_abs, RATIO_BAND_WIDE);
    let at_floor = estimates.iter().all(|&e| e <= tol_abs);
    if !at_floor && !estimates.windows(2).all(|w| w[1] <= w[0]) {
        pass = false;
        note = format!("{note}; max-remainder not monotone decreasing");
    }
    if let Some(diag) = blowup_note(&rows) {
        pass = false;
        note = format!("{note}; {diag}");
    }
    Ok(RemainderTable {
        rows,
        direction: format!("max over {} directions", directions.len()),
        p,
        q: Some(q),
        pass,
        note,
    })
}

/// Order-`n` quotient: differences of the order-`n-1` sensitivity at a
/// shifted datum against the order-`n` path.  The exponent `q` must
/// clear the factorial gate for `(n, m, p)`.
pub fn higher_order_test(
    problem: &Problem,
    directions: &[StateVector],
    eps: &[f64],
    p: f64,
    q: f64,
    m_paths: u64,
    tol_abs: f64,
) -> Result<RemainderTable, VerifyError> {
    validate_epsilons(eps)?;
    let n = directions.len();
    if n == 0 {
        return Err(VerifyError::NoDirections);
    }
    let m_growth = problem.set.growth_degree();
    let gate: f64 = plan::factorial_ratio(n as u32, m_growth)
        .to_string()
        .parse()
        .unwrap_or(f64::INFINITY);
    if !(q > gate * p) {
        return Err(VerifyError::PlanViolation(format!(
            "q > (m+n)!/(m+1)! p requires q > {} * {p} = {}, got q = {q} (n = {n}, m = {m_growth})",
            gate,
            gate * p
        )));
    }
    let tuples = vec![directions.to_vec()];
    let sups = ensemble_quotient_sups(problem, &tuples, eps, m_paths)?;
    table_from_sups(
        &sups[0],
        eps,
        p,
        Some(q),
        format!("order {n} tuple"),
        tol_abs,
        RATIO_BAND,
        problem.seed,
    )
}

/// One row of the Lipschitz quotient table.
#[derive(Debug, Clone)]
pub struct LipschitzRow {
    pub direction: usize,
    pub delta_norm: f64,
    pub distance: f64,
    pub quotient: f64,
}

#[derive(Debug, Clone)]
pub struct LipschitzTable {
    pub rows: Vec<LipschitzRow>,
    pub p: f64,
    /// max quotient / min quotient across all rows
    pub spread: f64,
    pub pass: bool,
}

impl LipschitzTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("direction,delta_norm,distance,quotient\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.direction, r.delta_norm, r.distance, r.quotient
            ));
        }
        out.push_str(&format!("# spread={} pass={}\n", self.spread, self.pass));
        out
    }
}

/// Lipschitz surrogate: distances `d_p(u(u0), u(u0 + δh))` across a
/// magnitude ladder, with common noise inside each pair.  PASS when
/// the quotient `distance / |δ|^{1∧p}` varies by at most a factor 10.
pub fn lipschitz_test(
    problem: &Problem,
    direction_count: usize,
    magnitudes: &[f64],
    p: f64,
    m_paths: u64,
) -> Result<LipschitzTable, VerifyError> {
    if magnitudes.is_empty() || magnitudes.iter().any(|&m| !(m > 0.0)) {
        return Err(VerifyError::InvalidParameter(
            "magnitudes must be positive".into(),
        ));
    }
    if direction_count == 0 {
        return Err(VerifyError::NoDirections);
    }
    let dirs = unit_directions(problem.dim(), direction_count, problem.seed, false);
    let (w0, w1) = problem.window();
    // sups[dir][mag][path]
    let per_path: Vec<Vec<Vec<f64>>> = (0..m_paths)
        .into_par_iter()
        .map(|path| -> Result<Vec<Vec<f64>>, VerifyError> {
            let noise = problem.noise_for(path)?;
            let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)?;
            let base = ctx.solve_mild(&problem.u0)?;
            dirs.iter()
                .map(|h| -> Result<Vec<f64>, VerifyError> {
                    magnitudes
                        .iter()
                        .map(|&mag| -> Result<f64, VerifyError> {
                            let mut shifted = problem.u0.clone();
                            shifted.axpy(mag, h);
                            let other = ctx.solve_mild(&shifted)?;
                            Ok(combo_sup_window(&[(1.0, &other), (-1.0, &base)], w0, w1))
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let exponent = p.min(1.0);
    for (di, _) in dirs.iter().enumerate() {
        for (mi, &mag) in magnitudes.iter().enumerate() {
            let sups: Vec<f64> = (0..m_paths as usize)
                .map(|pi| per_path[pi][di][mi])
                .collect();
            let stat = sp_norm_from_sups(&sups, p, problem.seed.wrapping_add((di * 31 + mi) as u64))?;
            let distance = stat.estimate.powf(exponent);
            rows.push(LipschitzRow {
                direction: di,
                delta_norm: mag,
                distance,
                quotient: distance / mag.powf(exponent),
            });
        }
    }
    let max_q = rows.iter().map(|r| r.quotient).fold(f64::MIN, f64::max);
    let min_q = rows.iter().map(|r| r.quotient).fold(f64::MAX, f64::min);
    let spread = max_q / min_q;
    Ok(LipschitzTable {
        rows,
        p,
        spread,
        pass: spread.is_finite() && spread <= 10.0,
    })
}

#[derive(Debug, Clone)]
pub struct ContractionRow {
    pub t0: f64,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct ContractionTable {
    pub rows: Vec<ContractionRow>,
    pub pass: bool,
}

impl ContractionTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("t0,factor\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.t0, r.factor));
        }
        out.push_str(&format!("# pass={}\n", self.pass));
        out
    }
}

/// Empirical contraction factor of the mild fixed-point map on one
/// frozen noise path: apply the map to two constant starts and report
/// `d_p` of the images over `[0, T0]` relative to `d_p` of the starts.
/// PASS when the factor is below one at the smallest window and does
/// not decrease as the window grows.
pub fn contraction_diagnostic(
    problem: &Problem,
    t0_ladder: &[f64],
    p: f64,
) -> Result<ContractionTable, VerifyError> {
    if t0_ladder.is_empty()
        || t0_ladder
            .iter()
            .any(|&t| !(t > 0.0) || t > problem.t_final)
    {
        return Err(VerifyError::InvalidParameter(
            "window ladder must lie in (0, T]".into(),
        ));
    }
    let noise = problem.noise_for(0)?;
    let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)?;
    let h = unit_directions(problem.dim(), 1, problem.seed ^ 0x5ca1e, false)
        .pop()
        .unwrap();
    let times = noise.grid.clone();
    let start_a = PathSample::from_values(
        times.clone(),
        times.iter().map(|_| problem.u0.clone()).collect(),
    );
    let mut shifted = problem.u0.clone();
    shifted.add_assign(&h);
    let start_b =
        PathSample::from_values(times.clone(), times.iter().map(|_| shifted.clone()).collect());
    let image_a = ctx.fixed_point_map(&problem.u0, &start_a)?;
    let image_b = ctx.fixed_point_map(&problem.u0, &start_b)?;

    let exponent = p.min(1.0);
    let mut ladder: Vec<f64> = t0_ladder.to_vec();
    ladder.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rows: Vec<ContractionRow> = ladder
        .iter()
        .map(|&t0| {
            let num = combo_sup_window(&[(1.0, &image_a), (-1.0, &image_b)], 0.0, t0)
                .powf(exponent);
            let den = combo_sup_window(&[(1.0, &start_a), (-1.0, &start_b)], 0.0, t0)
                .powf(exponent);
            ContractionRow {
                t0,
                factor: num / den,
            }
        })
        .collect();
    let pass = rows[0].factor < 1.0
        && rows
            .windows(2)
            .all(|w| w[1].factor >= w[0].factor - 1e-12);
    Ok(ContractionTable { rows, pass })
}

/// Evaluate the order-`n` correction for `target` from the paths of a
/// sensitivity system at one grid index (post-jump values).
fn correction_at(
    set: &CoefficientSet,
    target: CoeffTarget,
    system: &crate::solver::SensitivitySystem,
    n: usize,
    index: usize,
    t: f64,
    z: Option<f64>,
) -> Result<CoeffValue, VerifyError> {
    let mut table = SubsetValues::new(n);
    for mask in 1u32..(1 << n) {
        if let Some(p) = system.path(mask) {
            table.insert(mask, p.value(index).clone());
        }
    }
    Ok(assemble_correction(
        set,
        target,
        n,
        t,
        z,
        system.base().value(index),
        &table,
    )?)
}

/// Chain-rule recursion check: the `ε`-difference of the order-`n`
/// correction along the shifted flow, minus its predicted derivative
/// (the order-`n+1` correction less the second-derivative coupling
/// term), measured at the final time.  The remainder must scale like
/// `O(ε)`; for affine sets everything vanishes identically.
pub fn chainrule_test(
    problem: &Problem,
    directions: &[StateVector],
    eps: &[f64],
    target: CoeffTarget,
    p: f64,
    m_paths: u64,
    tol_abs: f64,
) -> Result<RemainderTable, VerifyError> {
    validate_epsilons(eps)?;
    let total = directions.len();
    if total < 2 {
        return Err(VerifyError::InvalidParameter(
            "chain-rule check needs n + 1 >= 2 directions".into(),
        ));
    }
    let n = total - 1;
    let z0 = problem.marks.quadrature().first().map(|&(z, _)| z);
    let (_, t_star) = problem.window();

    let per_path: Vec<Vec<f64>> = (0..m_paths)
        .into_par_iter()
        .map(|path| -> Result<Vec<f64>, VerifyError> {
            let noise = problem.noise_for(path)?;
            let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)?;
            let sys = ctx.solve_system(&problem.u0, directions)?;
            let last = sys.base().len() - 1;

            // A(0): order-n correction from the unshifted flow
            let a0 = correction_at(&problem.set, target, &sys, n, last, t_star, z0)?;
            // RHS: order-(n+1) correction minus the D²F coupling term
            let full = correction_at(&problem.set, target, &sys, total, last, t_star, z0)?;
            let top = sys.path(1 << n).expect("first-order top path").value(last);
            let lower_mask = (1u32 << n) - 1;
            let un = sys.path(lower_mask).expect("order-n path").value(last);
            let coupling = problem.set.eval_derivative(
                target,
                2,
                t_star,
                z0,
                sys.base().value(last),
                &[top, un],
            )?;
            let rhs = full.sub(&coupling);

            let h_last = &directions[n];
            let mut sups = Vec::with_capacity(eps.len());
            for &e in eps {
                let mut shifted_u0 = problem.u0.clone();
                shifted_u0.axpy(e, h_last);
                let sys_e = ctx.solve_system(&shifted_u0, &directions[..n])?;
                let ae = correction_at(&problem.set, target, &sys_e, n, last, t_star, z0)?;
                let quotient = ae.sub(&a0).scale(1.0 / e);
                sups.push(quotient.sub(&rhs).norm());
            }
            Ok(sups)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_eps: Vec<Vec<f64>> = vec![vec![0.0; m_paths as usize]; eps.len()];
    for (pi, sups) in per_path.iter().enumerate() {
        for (ei, &s) in sups.iter().enumerate() {
            per_eps[ei][pi] = s;
        }
    }
    table_from_sups(
        &per_eps,
        eps,
        p,
        None,
        format!("chain-rule order {n} -> {}", n + 1),
        tol_abs,
        RATIO_BAND,
        problem.seed,
    )
}
