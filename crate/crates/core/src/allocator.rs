//! Multi-armed-bandit allocation of aggregation weights.
//!
//! One allocation step is a mirror-ascent step under the negative-entropy
//! mirror map followed by a Bregman (KL) projection onto the ball
//! `{ p on the simplex : sum_i p_i log(N p_i) <= rho }`.
//!
//! The projection of a dual point `q` onto that ball is the tempered
//! normalization `p_i(lambda) ∝ q_i^{1/(1+lambda)}`, where `lambda >= 0` is the
//! multiplier of the KL constraint. The multiplier is the root of the
//! constraint residual [`kernel_f`], found by bracket doubling plus bisection.
//! All dual arithmetic stays in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries below this are lifted before taking logarithms.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that a vector lies on the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A point on the simplex, or its image in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    log_space: bool,
}

impl WeightVector {
    /// Validates and wraps a probability vector.
    pub fn probabilities(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension {
                expected: 1,
                actual: 0,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::DegenerateWeight { index, value });
            }
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            values,
            log_space: false,
        })
    }

    /// Wraps log-weights (unnormalized dual point). Entries must be finite.
    pub fn log_weights(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension {
                expected: 1,
                actual: 0,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log weight {i} = {}", values[i])));
        }
        Ok(Self {
            values,
            log_space: true,
        })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "uniform weights need at least one entry");
        Self {
            values: vec![1.0 / n as f64; n],
            log_space: false,
        }
    }

    /// Normalizes arbitrary nonnegative masses onto the simplex.
    pub fn normalized(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(format!("cannot normalize total mass {total}")));
        }
        Self::probabilities(masses.iter().map(|m| m / total).collect())
    }

    /// Lifts every entry to at least [`WEIGHT_FLOOR`] and renormalizes.
    pub fn floored(&self) -> Self {
        debug_assert!(!self.log_space);
        if self.values.iter().all(|&v| v >= WEIGHT_FLOOR) {
            return self.clone();
        }
        let lifted: Vec<f64> = self.values.iter().map(|v| v.max(WEIGHT_FLOOR)).collect();
        let total: f64 = lifted.iter().sum();
        Self {
            values: lifted.iter().map(|v| v / total).collect(),
            log_space: false,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_log_space(&self) -> bool {
        self.log_space
    }
}

/// The feasible set `{ p : sum_i p_i log(n_total p_i) <= rho }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlBallConstraint {
    pub rho: f64,
    pub n_total: usize,
}

impl KlBallConstraint {
    pub fn new(rho: f64, n_total: usize) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::config("rho", format!("must be finite and >= 0, got {rho}")));
        }
        if n_total == 0 {
            return Err(Error::config("n_total", "must be >= 1"));
        }
        Ok(Self { rho, n_total })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorConfig {
    /// Bandit step size in the dual space.
    pub eta_b: f64,
    pub rho: f64,
    pub lambda_max_initial: f64,
    pub lambda_tolerance: f64,
    pub max_bracket_doublings: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            eta_b: 0.5,
            rho: 1.0,
            lambda_max_initial: 1.0,
            lambda_tolerance: 1e-6,
            max_bracket_doublings: 60,
        }
    }
}

impl AllocatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_b > 0.0) || !self.eta_b.is_finite() {
            return Err(Error::config("eta_b", format!("must be > 0, got {}", self.eta_b)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::config("rho", format!("must be >= 0, got {}", self.rho)));
        }
        if !(self.lambda_max_initial > 0.0) {
            return Err(Error::config(
                "lambda_max_initial",
                format!("must be > 0, got {}", self.lambda_max_initial),
            ));
        }
        if !(self.lambda_tolerance > 0.0) {
            return Err(Error::config(
                "lambda_tolerance",
                format!("must be > 0, got {}", self.lambda_tolerance),
            ));
        }
        Ok(())
    }
}

/// Mirror-ascent step in the dual space: `log q_i = log p_i + eta_b * F_i`.
///
/// The `-1` offsets of the exponential form cancel under normalization and
/// are dropped.
pub fn dual_step(p: &WeightVector, losses: &[f64], eta_b: f64) -> Result<WeightVector> {
    if p.is_log_space() {
        return Err(Error::Domain("dual step expects probability weights".into()));
    }
    if p.len() != losses.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: losses.len(),
        });
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss {i} = {}", losses[i])));
    }
    let mut log_q = Vec::with_capacity(p.len());
    for (index, (&pi, &fi)) in p.as_slice().iter().zip(losses).enumerate() {
        if pi <= 0.0 {
            return Err(Error::DegenerateWeight { index, value: pi });
        }
        log_q.push(pi.ln() + eta_b * fi);
    }
    WeightVector::log_weights(log_q)
}

/// Tempered log-weights `t * log q_i` shifted by their maximum, with
/// `t = 1/(1+lambda)`. Returns the shifted values and `ln sum exp(shifted)`.
fn tempered(log_q: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let t = 1.0 / (1.0 + lambda);
    let scaled: Vec<f64> = log_q.iter().map(|l| t * l).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scaled.iter().map(|s| s - max).collect();
    let sum: f64 = shifted.iter().map(|s| s.exp()).sum();
    (shifted, sum.ln())
}

fn require_log_space(log_q: &WeightVector) -> Result<()> {
    if log_q.is_log_space() {
        Ok(())
    } else {
        Err(Error::Domain("expected a log-space dual point".into()))
    }
}

/// Constraint residual at multiplier `lambda`:
///
/// `f(lambda) = sum_i log(q_i) q_i^t / ((1+lambda) sum_i q_i^t) - log sum_i q_i^t + log N - rho`
///
/// with `t = 1/(1+lambda)`. This equals `sum_i p_i log(N p_i) - rho` for the
/// tempered weights `p(lambda)`, and is nonincreasing in `lambda`.
pub fn kernel_f(log_q: &WeightVector, lambda: f64, constraint: &KlBallConstraint) -> Result<f64> {
    require_log_space(log_q)?;
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let (shifted, log_sum) = tempered(log_q.as_slice(), lambda);
    // sum_i w_i (a_i - m) - ln s, with w the normalized tempered weights.
    let sum: f64 = log_sum.exp();
    let entropy_term: f64 = shifted.iter().map(|s| s * s.exp()).sum::<f64>() / sum;
    Ok(entropy_term - log_sum + (constraint.n_total as f64).ln() - constraint.rho)
}

/// Root of [`kernel_f`] in `lambda >= 0`.
///
/// Returns `0` when the unconstrained step already lies in the ball. With
/// `rho == 0` and a non-uniform dual point the only feasible point is the
/// uniform vector, which corresponds to `lambda = +inf`.
pub fn solve_lambda(
    log_q: &WeightVector,
    constraint: &KlBallConstraint,
    config: &AllocatorConfig,
) -> Result<f64> {
    let f0 = kernel_f(log_q, 0.0, constraint)?;
    if f0 <= 0.0 {
        return Ok(0.0);
    }
    if constraint.rho == 0.0 {
        return Ok(f64::INFINITY);
    }

    let mut lo = 0.0;
    let mut hi = config.lambda_max_initial;
    let mut f_hi = kernel_f(log_q, hi, constraint)?;
    let mut doublings = 0;
    while f_hi >= 0.0 {
        if doublings >= config.max_bracket_doublings {
            return Err(Error::BracketFailure {
                doublings,
                upper: hi,
                value: f_hi,
            });
        }
        lo = hi;
        hi *= 2.0;
        f_hi = kernel_f(log_q, hi, constraint)?;
        doublings += 1;
    }

    while hi - lo > config.lambda_tolerance {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kernel_f(log_q, mid, constraint)? >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // hi is always on the feasible side.
    Ok(hi)
}

/// Maps a dual point back to the simplex: `p_i ∝ exp(log q_i / (1+lambda))`.
pub fn project(log_q: &WeightVector, lambda_star: f64) -> Result<WeightVector> {
    require_log_space(log_q)?;
    if !(lambda_star >= 0.0) {
        return Err(Error::Domain(format!(
            "lambda must be >= 0, got {lambda_star}"
        )));
    }
    let (shifted, _) = tempered(log_q.as_slice(), lambda_star);
    let masses: Vec<f64> = shifted.iter().map(|s| s.exp()).collect();
    let total: f64 = masses.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite(format!("projection mass {total}")));
    }
    Ok(WeightVector {
        values: masses.iter().map(|m| m / total).collect(),
        log_space: false,
    })
}

/// One full allocation step: dual step, multiplier search, projection.
///
/// The ball radius comes from `config.rho` and `N` is the length of `p`.
pub fn update_weights(
    p: &WeightVector,
    losses: &[f64],
    config: &AllocatorConfig,
) -> Result<(WeightVector, f64)> {
    config.validate()?;
    let p = p.floored();
    let constraint = KlBallConstraint::new(config.rho, p.len())?;
    let log_q = dual_step(&p, losses, config.eta_b)?;
    let lambda_star = solve_lambda(&log_q, &constraint, config)?;
    let next = project(&log_q, lambda_star)?;
    Ok((next, lambda_star))
}

/// `sum_i p_i log(N p_i)`: KL divergence from the uniform distribution.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (n * x).ln())
        .sum()
}
