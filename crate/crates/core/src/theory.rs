//! Independent oracles and diagnostics for the allocator and the
//! generalization / convergence quantities.
//!
//! The projection oracle never calls into [`crate::allocator`]'s root search:
//! it scans the tempered family on a dense grid and, separately, brute-forces
//! a barycentric grid of the simplex.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::allocator::{self, AllocatorConfig, KlBallConstraint, WeightVector};
use crate::engine::RoundRecord;
use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const ORACLE_MAX_CLIENTS: usize = 4;
pub const ORACLE_LAMBDA_MAX: f64 = 64.0;
const SWEEP_COARSE_STEP: f64 = 1e-3;
const SWEEP_FINE_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub weights: WeightVector,
    /// `KL(weights || normalized q)`.
    pub objective_value: f64,
    pub feasible: bool,
    /// Best point of the tempered-family sweep, with its multiplier.
    pub sweep: Option<(Candidate, f64)>,
    /// Best feasible point of the barycentric grid.
    pub grid: Option<Candidate>,
}

struct Problem {
    log_qn: Vec<f64>,
    rho: f64,
}

impl Problem {
    fn new(log_q: &[f64], rho: f64) -> Self {
        let max = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + log_q.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Self {
            log_qn: log_q.iter().map(|l| l - lse).collect(),
            rho,
        }
    }

    fn objective(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(&self.log_qn)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, lq)| pi * (pi.ln() - lq))
            .sum()
    }

    fn kl_uniform(p: &[f64]) -> f64 {
        let n = p.len() as f64;
        let mut total = 0.0;
        for &pi in p {
            if pi > 0.0 {
                total += pi * (pi.ln() + n.ln());
            }
        }
        total
    }

    fn candidate(&self, p: Vec<f64>) -> Candidate {
        Candidate {
            objective: self.objective(&p),
            feasible: Self::kl_uniform(&p) <= self.rho,
            weights: p,
        }
    }

    /// `qn_i^t / sum_j qn_j^t` with `t = 1/(1+lambda)`.
    fn tempered(&self, lambda: f64) -> Vec<f64> {
        let t = 1.0 / (1.0 + lambda);
        let powered: Vec<f64> = self.log_qn.iter().map(|l| (t * l).exp()).collect();
        let total: f64 = powered.iter().sum();
        powered.into_iter().map(|x| x / total).collect()
    }

    fn best_on_line(&self, start: f64, end: f64, step: f64) -> Option<(Candidate, f64)> {
        let steps = ((end - start) / step).round() as usize;
        let mut best: Option<(Candidate, f64)> = None;
        for k in 0..=steps {
            let lambda = start + k as f64 * step;
            let c = self.candidate(self.tempered(lambda));
            if c.feasible && best.as_ref().is_none_or(|(b, _)| c.objective < b.objective) {
                best = Some((c, lambda));
            }
        }
        best
    }

    fn sweep(&self) -> Option<(Candidate, f64)> {
        let (_, coarse) = self.best_on_line(0.0, ORACLE_LAMBDA_MAX, SWEEP_COARSE_STEP)?;
        let start = (coarse - SWEEP_COARSE_STEP).max(0.0);
        self.best_on_line(start, coarse, SWEEP_FINE_STEP)
    }

    fn grid(&self, resolution: usize) -> Option<Candidate> {
        let n = self.log_qn.len();
        let mut best: Option<Candidate> = None;
        let mut counts = vec![0usize; n];
        self.grid_rec(&mut counts, 0, resolution, resolution, &mut best);
        let _ = n;
        best
    }

    fn grid_rec(
        &self,
        counts: &mut Vec<usize>,
        pos: usize,
        remaining: usize,
        resolution: usize,
        best: &mut Option<Candidate>,
    ) {
        if pos + 1 == counts.len() {
            counts[pos] = remaining;
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / resolution as f64).collect();
            let c = self.candidate(p);
            if c.feasible && best.as_ref().is_none_or(|b| c.objective < b.objective) {
                *best = Some(c);
            }
            return;
        }
        for k in 0..=remaining {
            counts[pos] = k;
            self.grid_rec(counts, pos + 1, remaining - k, resolution, best);
        }
    }
}

/// Brute-force KL projection of a dual point onto the KL ball.
///
/// Minimizes `sum_i p_i log(p_i / q_i)` over the feasible set by scanning the
/// tempered family on `lambda in [0, 64]` (coarse pass at 1e-3, then a 1e-6
/// pass around the best coarse point) and over a barycentric grid with
/// `grid_resolution` subdivisions. Returns the better feasible point.
pub fn bregman_projection_oracle(
    log_q: &WeightVector,
    constraint: &KlBallConstraint,
    grid_resolution: usize,
) -> Result<OracleSolution> {
    if !log_q.is_log_space() {
        return Err(Error::Domain("oracle expects a log-space dual point".into()));
    }
    if log_q.len() > ORACLE_MAX_CLIENTS {
        return Err(Error::OracleScope(format!(
            "{} entries, oracle supports at most {ORACLE_MAX_CLIENTS}",
            log_q.len()
        )));
    }
    if grid_resolution < 100 {
        return Err(Error::OracleScope(format!(
            "grid resolution {grid_resolution} below 100"
        )));
    }
    if constraint.n_total != log_q.len() {
        return Err(Error::Dimension {
            expected: log_q.len(),
            actual: constraint.n_total,
        });
    }
    let problem = Problem::new(log_q.as_slice(), constraint.rho);
    let sweep = problem.sweep();
    let grid = problem.grid(grid_resolution);

    let chosen = match (&sweep, &grid) {
        (Some((s, _)), Some(g)) if g.objective < s.objective => g.clone(),
        (Some((s, _)), _) => s.clone(),
        (None, Some(g)) => g.clone(),
        (None, None) => {
            // No feasible point found: report the closest-to-uniform one.
            problem.candidate(vec![1.0 / log_q.len() as f64; log_q.len()])
        }
    };
    Ok(OracleSolution {
        weights: WeightVector::probabilities(chosen.weights.clone())?,
        objective_value: chosen.objective,
        feasible: chosen.feasible,
        sweep,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub value: f64,
    /// Zero for exact enumeration.
    pub std_error: f64,
    pub exact: bool,
}

/// Largest sample count handled by exhaustive sign enumeration.
pub const RADEMACHER_EXACT_MAX: usize = 12;

fn check_table(table: &[Vec<f64>]) -> Result<usize> {
    let n = table.first().map_or(0, Vec::len);
    if table.is_empty() || n == 0 {
        return Err(Error::Metric("loss table must be non-empty".into()));
    }
    if table.iter().any(|row| row.len() != n) {
        return Err(Error::Metric("ragged loss table".into()));
    }
    Ok(n)
}

fn sup_correlation(table: &[Vec<f64>], signs: impl Fn(usize) -> f64, n: usize) -> f64 {
    table
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, v)| signs(j) * v).sum::<f64>() / n as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `E_tau sup_h (1/n) sum_j tau_j loss[h][j]` by enumerating all `2^n` signs.
pub fn rademacher_exact(table: &[Vec<f64>]) -> Result<f64> {
    let n = check_table(table)?;
    if n > 24 {
        return Err(Error::Metric(format!("{n} samples too many to enumerate")));
    }
    let patterns = 1u64 << n;
    let at = |mask: u64| sup_correlation(table, |j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }, n);
    // pair each pattern with its complement so a single hypothesis cancels exactly
    let total: f64 = (0..patterns / 2)
        .map(|mask| at(mask) + at(mask ^ (patterns - 1)))
        .sum();
    Ok(total / patterns as f64)
}

/// Monte-Carlo estimate with its standard error.
pub fn rademacher_monte_carlo<R: Rng + ?Sized>(
    table: &[Vec<f64>],
    n_draws: usize,
    rng: &mut R,
) -> Result<RademacherEstimate> {
    let n = check_table(table)?;
    if n_draws < 2 {
        return Err(Error::Metric("need at least two draws".into()));
    }
    let mut signs = vec![0.0; n];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_draws {
        for s in signs.iter_mut() {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let v = sup_correlation(table, |j| signs[j], n);
        sum += v;
        sum_sq += v * v;
    }
    let m = n_draws as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok(RademacherEstimate {
        value: mean,
        std_error: (var / m).sqrt(),
        exact: false,
    })
}

/// Exact for `n <= 12`, Monte-Carlo otherwise.
pub fn rademacher_estimate<R: Rng + ?Sized>(
    table: &[Vec<f64>],
    n_draws: usize,
    rng: &mut R,
) -> Result<RademacherEstimate> {
    let n = check_table(table)?;
    if n <= RADEMACHER_EXACT_MAX {
        Ok(RademacherEstimate {
            value: rademacher_exact(table)?,
            std_error: 0.0,
            exact: true,
        })
    } else {
        rademacher_monte_carlo(table, n_draws, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub min_grad_norm_sq: f64,
    /// Log-log least-squares slope of the running minimum against `t`.
    pub decay_slope: Option<f64>,
    pub n_points: usize,
    pub insufficient_data: bool,
}

/// Convergence diagnostic from `(t, ||grad||^2)` pairs with `t >= 1`.
pub fn convergence_from_series(series: &[(f64, f64)]) -> ConvergenceReport {
    let mut running = f64::INFINITY;
    let mut points = Vec::with_capacity(series.len());
    for &(t, g) in series {
        running = running.min(g);
        if t > 0.0 && running > 0.0 {
            points.push((t.ln(), running.ln()));
        }
    }
    let min = series.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    if points.len() < 3 {
        return ConvergenceReport {
            min_grad_norm_sq: min,
            decay_slope: None,
            n_points: points.len(),
            insufficient_data: true,
        };
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    ConvergenceReport {
        min_grad_norm_sq: min,
        decay_slope: (sxx > 0.0).then(|| sxy / sxx),
        n_points: points.len(),
        insufficient_data: false,
    }
}

/// [`convergence_from_series`] over the evaluated rounds, with `t = round + 1`.
pub fn convergence_report(records: &[RoundRecord]) -> ConvergenceReport {
    let series: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.eval.as_ref().map(|e| ((r.round + 1) as f64, e.grad_norm_sq)))
        .collect();
    convergence_from_series(&series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random allocator instance: weights, losses, step size, radius.
pub fn random_instance(rng: &mut SimRng, n: usize) -> (WeightVector, Vec<f64>, f64, f64) {
    let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let p = WeightVector::normalized(&masses).expect("positive masses");
    let losses = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let eta_b = rng.random_range(0.1..=1.0);
    let rho = rng.random_range(0.01..=1.0);
    (p, losses, eta_b, rho)
}

/// Allocator vs oracle on `count` random instances with `N in {2,3,4}`.
/// Returns the per-entry gaps (max over entries, one per instance).
pub fn oracle_gaps(count: usize, seed: u64, grid_resolution: usize) -> Result<Vec<f64>> {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut gaps = Vec::with_capacity(count);
    for k in 0..count {
        let n = 2 + k % 3;
        let (p, losses, eta_b, rho) = random_instance(&mut rng, n);
        let config = AllocatorConfig {
            eta_b,
            rho,
            ..AllocatorConfig::default()
        };
        let (ours, _) = allocator::update_weights(&p, &losses, &config)?;
        let log_q = allocator::dual_step(&p, &losses, eta_b)?;
        let oracle = bregman_projection_oracle(&log_q, &KlBallConstraint::new(rho, n)?, grid_resolution)?;
        let gap = ours
            .as_slice()
            .iter()
            .zip(oracle.weights.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        gaps.push(gap);
    }
    Ok(gaps)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Theory-harness checks run by the `verify` subcommand.
pub fn verify_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    match oracle_gaps(200, seed, 100) {
        Ok(gaps) => {
            let max = gaps.iter().copied().fold(0.0, f64::max);
            let med = median(&gaps);
            out.push(CheckOutcome {
                name: "allocator-oracle agreement",
                passed: max <= 1e-3 && med <= 1e-5,
                detail: format!("200 instances, max gap {max:.3e}, median {med:.3e}"),
            });
        }
        Err(e) => out.push(CheckOutcome {
            name: "allocator-oracle agreement",
            passed: false,
            detail: e.to_string(),
        }),
    }

    let mut rng = SimRng::seed_from_u64(seed ^ 0x5EED);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_slack = f64::NEG_INFINITY;
    let mut failure = None;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let (p, losses, eta_b, rho) = random_instance(&mut rng, n);
        let config = AllocatorConfig {
            eta_b,
            rho,
            ..AllocatorConfig::default()
        };
        match allocator::update_weights(&p, &losses, &config) {
            Ok((next, lambda)) => {
                let residual = allocator::kl_from_uniform(next.as_slice()) - rho;
                worst_excess = worst_excess.max(residual);
                if lambda > 1e-6 {
                    worst_slack = worst_slack.max(-residual);
                }
            }
            Err(e) => failure = Some(e.to_string()),
        }
    }
    out.push(CheckOutcome {
        name: "constraint feasibility",
        passed: failure.is_none() && worst_excess <= 1e-6 && worst_slack <= 1e-4,
        detail: failure.unwrap_or_else(|| {
            format!("1000 calls, max residual {worst_excess:.3e}, max active slack {worst_slack:.3e}")
        }),
    });

    let table = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]];
    let exact = rademacher_exact(&table).unwrap_or(f64::NAN);
    let mut rng = SimRng::seed_from_u64(seed ^ 0xAADE);
    let mc = rademacher_monte_carlo(&table, 100_000, &mut rng);
    out.push(match mc {
        Ok(mc) => CheckOutcome {
            name: "rademacher exact vs monte-carlo",
            passed: (mc.value - exact).abs() <= 3.0 * mc.std_error,
            detail: format!(
                "exact {exact:.6}, monte-carlo {:.6} +/- {:.6}",
                mc.value, mc.std_error
            ),
        },
        Err(e) => CheckOutcome {
            name: "rademacher exact vs monte-carlo",
            passed: false,
            detail: e.to_string(),
        },
    });

    out
}
