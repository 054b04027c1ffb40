//! Exponent bookkeeping for higher-order differentiability, in exact
//! rational arithmetic.
//!
//! Three constraints are tracked for an order-`n` plan with growth
//! degree `m` and exponents `p`, `q`:
//!
//! - the recursion budget
//!   `(n-1)/p₀ + 1/p₁ + … + 1/p_n ≤ 1/p` for a chain `p₀, p₁..p_n`
//!   (`p₀ = ∞` contributes zero);
//! - the simplified sufficient condition `q > (n + nm - m) p`;
//! - the differentiability gate `q > (m+n)!/(m+1)! · p`, the one the
//!   higher-order drivers enforce.

use num::{BigInt, BigRational, One, Signed, Zero};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("cannot parse '{0}' as a decimal rational")]
    Parse(String),
    #[error("exponent must be positive: {0}")]
    NonPositive(String),
    #[error("chain must have exactly n = {expected} entries, got {got}")]
    ChainLength { expected: usize, got: usize },
    #[error("order n must be at least 1")]
    ZeroOrder,
}

/// Parse a decimal string (optional sign, fraction, exponent) into an
/// exact rational, e.g. `1.5 -> 3/2`, `2e-3 -> 1/500`.
pub fn parse_rational(s: &str) -> Result<BigRational, PlanError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(PlanError::Parse(s.into()));
    }
    let (mantissa, exponent) = match s.split_once(['e', 'E']) {
        Some((m, e)) => {
            let exp: i64 = e.parse().map_err(|_| PlanError::Parse(s.into()))?;
            (m, exp)
        }
        None => (s, 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if frac_part.contains(['+', '-']) {
        return Err(PlanError::Parse(s.into()));
    }
    let digits = format!(
        "{}{}",
        if int_part.is_empty() || int_part == "-" || int_part == "+" {
            format!("{int_part}0")
        } else {
            int_part.to_string()
        },
        frac_part
    );
    let numer: BigInt = digits.parse().map_err(|_| PlanError::Parse(s.into()))?;
    let shift = frac_part.len() as i64 - exponent;
    let ten = BigInt::from(10);
    let rational = if shift >= 0 {
        BigRational::new(numer, ten.pow(shift as u32))
    } else {
        BigRational::from(numer * ten.pow((-shift) as u32))
    };
    Ok(rational)
}

fn positive(s: &BigRational, what: &str) -> Result<(), PlanError> {
    if s.is_positive() {
        Ok(())
    } else {
        Err(PlanError::NonPositive(format!("{what} = {s}")))
    }
}

/// `(m+n)!/(m+1)!` as an exact integer.
pub fn factorial_ratio(n: u32, m: u32) -> BigInt {
    let mut acc = BigInt::one();
    for k in (m + 2)..=(m + n) {
        acc *= BigInt::from(k);
    }
    acc
}

/// An exponent plan under scrutiny.
#[derive(Debug, Clone)]
pub struct ExponentPlan {
    pub n: u32,
    pub m: u32,
    pub p: BigRational,
    pub q: BigRational,
    /// `None` encodes `p₀ = +∞`.
    pub p0: Option<BigRational>,
    /// Optional chain `p₁..p_n`.
    pub chain: Option<Vec<BigRational>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionCheck {
    pub lhs: BigRational,
    pub rhs: BigRational,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanCheck {
    /// `(m+n)!/(m+1)! · p`
    pub factorial_threshold: BigRational,
    pub factorial_holds: bool,
    /// `(n + nm - m) p`
    pub remark_threshold: BigRational,
    pub remark_holds: bool,
    /// Present when a chain was supplied.
    pub recursion: Option<RecursionCheck>,
    pub pass: bool,
    /// Human-readable statement of the constraint that decides PASS,
    /// or of the first violated one on FAIL.
    pub binding: String,
}

impl PlanCheck {
    pub fn csv(&self) -> String {
        let mut out = String::from("constraint,threshold_or_lhs,holds\n");
        out.push_str(&format!(
            "factorial_gate,{},{}\n",
            self.factorial_threshold, self.factorial_holds
        ));
        out.push_str(&format!(
            "remark_threshold,{},{}\n",
            self.remark_threshold, self.remark_holds
        ));
        if let Some(rec) = &self.recursion {
            out.push_str(&format!("recursion_budget,{},{}\n", rec.lhs, rec.holds));
        }
        out.push_str(&format!("pass,,{}\n", self.pass));
        out
    }
}

/// Evaluate all exponent constraints of a plan.
pub fn exponent_plan_check(plan: &ExponentPlan) -> Result<PlanCheck, PlanError> {
    if plan.n == 0 {
        return Err(PlanError::ZeroOrder);
    }
    positive(&plan.p, "p")?;
    positive(&plan.q, "q")?;
    if let Some(p0) = &plan.p0 {
        positive(p0, "p0")?;
    }

    let factorial_threshold = BigRational::from(factorial_ratio(plan.n, plan.m)) * &plan.p;
    let factorial_holds = plan.q > factorial_threshold;

    let remark_coeff = BigInt::from(plan.n + plan.n * plan.m - plan.m);
    let remark_threshold = BigRational::from(remark_coeff) * &plan.p;
    let remark_holds = plan.q > remark_threshold;

    let recursion = match &plan.chain {
        None => None,
        Some(chain) => {
            if chain.len() != plan.n as usize {
                return Err(PlanError::ChainLength {
                    expected: plan.n as usize,
                    got: chain.len(),
                });
            }
            for (i, pi) in chain.iter().enumerate() {
                positive(pi, &format!("p{}", i + 1))?;
            }
            let mut lhs = BigRational::zero();
            if plan.n > 1 {
                match &plan.p0 {
                    Some(p0) => {
                        lhs += BigRational::from(BigInt::from(plan.n - 1)) / p0;
                    }
                    None => {} // p0 = ∞ contributes nothing
                }
            }
            for pi in chain {
                lhs += BigRational::one() / pi;
            }
            let rhs = BigRational::one() / &plan.p;
            let holds = lhs <= rhs;
            Some(RecursionCheck { lhs, rhs, holds })
        }
    };

    let mut pass = factorial_holds;
    let mut binding = format!(
        "q > (m+n)!/(m+1)! p  i.e.  {} > {}",
        plan.q, factorial_threshold
    );
    if !factorial_holds {
        binding = format!(
            "VIOLATED: q > (m+n)!/(m+1)! p  requires  {} > {}",
            plan.q, factorial_threshold
        );
    } else if let Some(rec) = &recursion {
        if !rec.holds {
            pass = false;
            binding = format!(
                "VIOLATED: (n-1)/p0 + sum 1/p_i <= 1/p  fails: {} > {}",
                rec.lhs, rec.rhs
            );
        }
    }

    Ok(PlanCheck {
        factorial_threshold,
        factorial_holds,
        remark_threshold,
        remark_holds,
        recursion,
        pass,
        binding,
    })
}
