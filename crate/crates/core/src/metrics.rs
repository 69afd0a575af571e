//! Fairness and performance metrics, weight divergences and the
//! generalization-bound terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{WeightVector, WEIGHT_FLOOR};
use crate::error::{Error, Result};

/// Per-client and global evaluation of one server model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvalSet {
    pub client_accuracy: Vec<f64>,
    pub client_loss: Vec<f64>,
    pub global_accuracy: f64,
    pub global_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Population variance of per-client accuracy, in percentage points squared.
    pub variance: f64,
    pub worst_5pct_mean: f64,
    pub best_5pct_mean: f64,
    /// Population standard deviation of per-client loss.
    pub loss_std: f64,
}

impl FairnessReport {
    pub fn from_eval(eval: &ClientEvalSet) -> Result<Self> {
        let percent: Vec<f64> = eval.client_accuracy.iter().map(|a| 100.0 * a).collect();
        let (worst, best) = tail_means(&eval.client_accuracy, 0.05)?;
        Ok(Self {
            variance: variance_fairness(&percent)?,
            worst_5pct_mean: worst,
            best_5pct_mean: best,
            loss_std: variance_fairness(&eval.client_loss)?.sqrt(),
        })
    }
}

fn require_nonempty(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        Err(Error::Metric("empty input".into()))
    } else {
        Ok(())
    }
}

/// Population variance (divides by N).
pub fn variance_fairness(values: &[f64]) -> Result<f64> {
    require_nonempty(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Means of the lowest and highest `max(1, floor(fraction * N))` values.
pub fn tail_means(values: &[f64], tail_fraction: f64) -> Result<(f64, f64)> {
    require_nonempty(values)?;
    let mut sorted: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = ((tail_fraction * values.len() as f64).floor() as usize).clamp(1, values.len());
    let mean = |s: &[(f64, usize)]| s.iter().map(|v| v.0).sum::<f64>() / k as f64;
    Ok((mean(&sorted[..k]), mean(&sorted[sorted.len() - k..])))
}

/// `sum_i (p_ref_i - p_i)^2 / p_i` with `p` floored like the allocator does.
pub fn chi_square_divergence(p_ref: &WeightVector, p: &WeightVector) -> Result<f64> {
    if p_ref.len() != p.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} vs {}",
            p_ref.len(),
            p.len()
        )));
    }
    Ok(p_ref
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(r, q)| (r - q).powi(2) / q.max(WEIGHT_FLOOR))
        .sum())
}

/// `2 sqrt(popvar(losses)) + 4 c sqrt(2 ln(2/delta) / N)`.
pub fn generalization_bound_rhs(
    per_client_losses: &[f64],
    c: f64,
    delta: f64,
    n_clients: usize,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Metric(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Metric(format!("c must be > 0, got {c}")));
    }
    if n_clients == 0 {
        return Err(Error::Metric("n_clients must be >= 1".into()));
    }
    let spread = variance_fairness(per_client_losses)?.sqrt();
    Ok(2.0 * spread + 4.0 * c * (2.0 * (2.0 / delta).ln() / n_clients as f64).sqrt())
}

/// Client gradients needed by [`estimate_gradient_stats`].
pub trait GradientSource: Sync {
    fn n_clients(&self) -> usize;
    fn dim(&self) -> usize;
    /// Gradient of client `i`'s full empirical loss at `params`.
    fn full_gradient(&self, client: usize, params: &[f64]) -> Result<Vec<f64>>;
    /// Gradient on one random minibatch of client `i`.
    fn minibatch_gradient(&self, client: usize, params: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    /// Mean squared deviation of minibatch gradients from full-slice gradients.
    pub sigma_sq: f64,
    /// Slope of the dissimilarity fit, clamped to >= 1.
    pub gamma_sq: f64,
    /// Intercept of the dissimilarity fit, clamped to >= 0.
    pub a_sq: f64,
    /// Max chi-square divergence of logged weights from uniform.
    pub kappa: f64,
    /// Largest observed gradient Lipschitz ratio of the weighted objective.
    pub lipschitz: f64,
    /// Set when the dissimilarity fit had no spread to regress on.
    pub degenerate_fit: bool,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn weighted_gradient(grads: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grads[0].len()];
    for (g, &w) in grads.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(g) {
            *o += w * x;
        }
    }
    out
}

/// Diagnostic estimates of the smoothness, variance, dissimilarity and
/// weight-divergence constants around `params`.
///
/// Probe points are `params` plus Gaussian perturbations of scale
/// `probe_scale`. `p_history` holds logged weight vectors for the divergence
/// constant; `weights` is the aggregation vector used in the weighted sums.
pub fn estimate_gradient_stats<S: GradientSource, R: Rng>(
    source: &S,
    params: &[f64],
    weights: &WeightVector,
    p_history: &[WeightVector],
    n_probes: usize,
    probe_scale: f64,
    rng: &mut R,
) -> Result<GradientStats> {
    if n_probes < 2 {
        return Err(Error::Metric("need at least two probes".into()));
    }
    let n = source.n_clients();
    if weights.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: weights.len(),
        });
    }
    let p = weights.as_slice();
    let normal = rand_distr::Normal::new(0.0, probe_scale)
        .map_err(|e| Error::Metric(format!("probe scale: {e}")))?;

    let probe = |rng: &mut R| -> Vec<f64> {
        params
            .iter()
            .map(|w| w + rand_distr::Distribution::sample(&normal, rng))
            .collect()
    };

    let mut sigma_total = 0.0;
    let mut sigma_count = 0usize;
    let mut xs = Vec::with_capacity(n_probes);
    let mut ys = Vec::with_capacity(n_probes);
    let mut lipschitz: f64 = 0.0;

    for k in 0..n_probes {
        let point = if k == 0 { params.to_vec() } else { probe(rng) };
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|i| source.full_gradient(i, &point))
            .collect::<Result<_>>()?;
        for (i, g) in grads.iter().enumerate() {
            let mb = source.minibatch_gradient(i, &point, rng)?;
            sigma_total += mb.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            sigma_count += 1;
        }
        let mixed = weighted_gradient(&grads, p);
        xs.push(norm_sq(&mixed));
        ys.push(grads.iter().zip(p).map(|(g, w)| w * norm_sq(g)).sum::<f64>());

        let other = probe(rng);
        let other_grads: Vec<Vec<f64>> = (0..n)
            .map(|i| source.full_gradient(i, &other))
            .collect::<Result<_>>()?;
        let other_mixed = weighted_gradient(&other_grads, p);
        let dx = point.iter().zip(&other).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx > 0.0 {
            let dg = mixed
                .iter()
                .zip(&other_mixed)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            lipschitz = lipschitz.max(dg / dx);
        }
    }

    let (gamma_sq, a_sq, degenerate_fit) = fit_dissimilarity(&xs, &ys);
    let uniform = WeightVector::uniform(n);
    let mut kappa: f64 = 0.0;
    for p_t in p_history {
        kappa = kappa.max(chi_square_divergence(&uniform, p_t)?);
    }

    Ok(GradientStats {
        sigma_sq: sigma_total / sigma_count as f64,
        gamma_sq,
        a_sq,
        kappa,
        lipschitz,
        degenerate_fit,
    })
}

/// Least squares `y = slope * x + intercept`, slope clamped to >= 1 and the
/// intercept refit (and clamped to >= 0) after clamping.
fn fit_dissimilarity(xs: &[f64], ys: &[f64]) -> (f64, f64, bool) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let degenerate = sxx <= 1e-300;
    let slope = if degenerate { 1.0 } else { (sxy / sxx).max(1.0) };
    let intercept = (my - slope * mx).max(0.0);
    (slope, intercept, degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        assert_eq!(variance_fairness(&[3.0; 7]).unwrap(), 0.0);
        assert!((variance_fairness(&[70.0, 80.0, 90.0]).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(variance_fairness(&[]).is_err());
    }

    #[test]
    fn tail_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(tail_means(&v, 0.05).unwrap(), (3.0, 98.0));
        let v: Vec<f64> = (0..20).map(|i| f64::from((i * 7) % 20)).collect();
        assert_eq!(tail_means(&v, 0.05).unwrap(), (0.0, 19.0));
    }

    #[test]
    fn chi_square_examples() {
        let a = WeightVector::probabilities(vec![0.5, 0.5]).unwrap();
        let b = WeightVector::probabilities(vec![0.25, 0.75]).unwrap();
        assert_eq!(chi_square_divergence(&a, &a).unwrap(), 0.0);
        assert!((chi_square_divergence(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = WeightVector::uniform(3);
        assert!(chi_square_divergence(&a, &c).is_err());
    }

    #[test]
    fn bound_examples() {
        let v = generalization_bound_rhs(&[0.3; 100], 1.0, 0.05, 100).unwrap();
        assert!((v - 4.0 * (2.0 * 40f64.ln() / 100.0).sqrt()).abs() < 1e-12);
        assert!((v - 1.0865).abs() < 1e-4);
        // a negligible loss bound leaves only the spread term
        let v = generalization_bound_rhs(&[0.0, 2.0], 1e-12, 0.5, 2).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
        assert!(generalization_bound_rhs(&[1.0], 1.0, 1.0, 2).is_err());
        assert!(generalization_bound_rhs(&[1.0], 1.0, 0.0, 2).is_err());
    }

    #[test]
    fn dissimilarity_fit_identity() {
        let (s, a, d) = fit_dissimilarity(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]);
        assert_eq!((s, a, d), (1.0, 0.0, false));
        let (s, a, _) = fit_dissimilarity(&[1.0, 2.0, 3.0], &[4.0, 7.0, 10.0]);
        assert!((s - 3.0).abs() < 1e-12 && (a - 1.0).abs() < 1e-12);
    }
}
