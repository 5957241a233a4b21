//! Checkers for the hypotheses placed on the example systems: average
//! contractivity, probability-field Lipschitz bounds, flow expansion,
//! the spectral balance r + kappa/gamma < 1, and the concave moduli
//! pair (r, omega).
//!
//! Sampled maxima are evidence, not proof; where an analytic bound is
//! available it is reported alongside.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{distance, Point};
use crate::system::{DiscreteIFS, FlowSpec, ProbabilityField};

fn random_point<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Point {
    Point::new((0..dim).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect())
        .expect("finite coords")
}

/// Result of sampling sum_i p_i(x) rho(w_i x, w_i y) / rho(x, y).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    /// Max observed ratio over the sampled pairs.
    pub max_ratio: f64,
    /// sum_i sup p_i * Lip(w_i), available for constant fields.
    pub analytic_bound: Option<f64>,
    /// max_ratio < 1 (and analytic bound < 1 when present).
    pub contractive: bool,
    pub pairs: usize,
}

/// Average-contraction condition: there exists r < 1 with
/// sum p_i(x) rho(w_i x, w_i y) <= r rho(x, y).
pub fn check_avg_contraction(
    ifs: &DiscreteIFS,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContractionReport> {
    if pairs < 1 {
        return Err(CoreError::Input("need at least one sample pair".into()));
    }
    let dim = ifs.dim();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..pairs {
        let x = random_point(rng, dim, 3.0);
        let y = random_point(rng, dim, 3.0);
        let d = distance(&ifs.metric, &x, &y)?;
        if d <= 1e-12 {
            continue;
        }
        let probs = ifs.probs.probs(&x);
        let mut num = 0.0;
        for (map, p) in ifs.maps.iter().zip(&probs) {
            num += p * distance(&ifs.metric, &map.apply(&x)?, &map.apply(&y)?)?;
        }
        max_ratio = max_ratio.max(num / d);
    }
    let analytic_bound = match &ifs.probs {
        ProbabilityField::Constant { weights } => Some(
            ifs.maps
                .iter()
                .zip(weights)
                .map(|(m, p)| p * m.lipschitz_bound(&ifs.metric))
                .sum(),
        ),
        ProbabilityField::Softmax { .. } => None,
    };
    let contractive = max_ratio < 1.0 && analytic_bound.map_or(true, |b| b < 1.0);
    Ok(ContractionReport {
        max_ratio,
        analytic_bound,
        contractive,
        pairs,
    })
}

/// Result of sampling sum_i |p_i(x) - p_i(y)| / rho(x, y).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    /// Conservative closed-form bound from the field parameters.
    pub analytic_bound: f64,
    pub pairs: usize,
}

/// Probability-field Lipschitz condition: sum |p_i(x) - p_i(y)| <= a rho(x,y).
pub fn check_prob_lipschitz(
    ifs: &DiscreteIFS,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LipschitzReport> {
    if pairs < 1 {
        return Err(CoreError::Input("need at least one sample pair".into()));
    }
    let analytic_bound = ifs.probs.lipschitz_bound();
    if matches!(ifs.probs, ProbabilityField::Constant { .. }) {
        return Ok(LipschitzReport {
            max_ratio: 0.0,
            analytic_bound: 0.0,
            pairs: 0,
        });
    }
    let dim = ifs.dim();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..pairs {
        let x = random_point(rng, dim, 3.0);
        let y = random_point(rng, dim, 3.0);
        let d = distance(&ifs.metric, &x, &y)?;
        if d <= 1e-12 {
            continue;
        }
        let px = ifs.probs.probs(&x);
        let py = ifs.probs.probs(&y);
        let num: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).abs()).sum();
        max_ratio = max_ratio.max(num / d);
    }
    Ok(LipschitzReport {
        max_ratio,
        analytic_bound,
        pairs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowExpansionReport {
    /// Max observed log(rho(S(t)x, S(t)y) / rho(x, y)) / t.
    pub kappa_estimate: f64,
    /// Exact exponent for diagonal flows: max_i lambda_i.
    pub kappa_bound: f64,
}

/// Flow expansion condition: rho(S(t)x, S(t)y) <= e^{kappa t} rho(x,y).
pub fn check_flow_expansion(
    flow: &FlowSpec,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FlowExpansionReport> {
    if samples < 1 {
        return Err(CoreError::Input("need at least one sample".into()));
    }
    let dim = flow.lambda.len();
    let metric = crate::geometry::MetricSpec::Euclidean;
    let mut kappa_estimate = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = random_point(rng, dim, 2.0);
        let y = random_point(rng, dim, 2.0);
        let d0 = distance(&metric, &x, &y)?;
        if d0 <= 1e-12 {
            continue;
        }
        let t = 0.1 + rng.gen::<f64>() * 3.0;
        let dt = distance(&metric, &flow.apply(t, &x)?, &flow.apply(t, &y)?)?;
        kappa_estimate = kappa_estimate.max((dt / d0).ln() / t);
    }
    let kappa_bound = flow.kappa();
    if kappa_estimate > kappa_bound + 1e-9 {
        return Err(CoreError::Numeric(format!(
            "observed expansion {kappa_estimate} exceeds diagonal bound {kappa_bound}"
        )));
    }
    Ok(FlowExpansionReport {
        kappa_estimate,
        kappa_bound,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralGapReport {
    pub value: f64,
    pub pass: bool,
}

/// The balance condition r + kappa/gamma < 1.
pub fn check_spectral_gap_condition(r: f64, kappa: f64, gamma: f64) -> SpectralGapReport {
    let value = r + kappa / gamma;
    SpectralGapReport {
        value,
        pass: value < 1.0,
    }
}

/// A modulus of the form coef * t^exponent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Modulus {
    pub coef: f64,
    pub exponent: f64,
}

impl Modulus {
    pub fn eval(&self, t: f64) -> f64 {
        self.coef * t.powf(self.exponent)
    }
}

/// The couple (r, omega): r controls average contraction, omega the
/// probability-field modulus; membership in the admissible class
/// requires sum_n omega(r^n(t)) < infinity and r(t) < t.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModulusPair {
    pub r_modulus: Modulus,
    pub omega_modulus: Modulus,
}

impl ModulusPair {
    pub fn new(r_modulus: Modulus, omega_modulus: Modulus) -> Result<ModulusPair> {
        let r = &r_modulus;
        let supported = (r.exponent == 1.0 && r.coef < 1.0 && r.coef > 0.0)
            || (r.exponent < 1.0 && r.exponent > 0.0 && r.coef > 0.0);
        // r(t) = t is explicitly representable so the checker can
        // exhibit the violation witness instead of refusing input.
        let boundary = r.exponent == 1.0 && r.coef == 1.0;
        if !supported && !boundary {
            return Err(CoreError::Input(format!(
                "unsupported r modulus: coef {} exponent {}",
                r.coef, r.exponent
            )));
        }
        let w = &omega_modulus;
        if !(w.coef > 0.0 && w.exponent > 0.0 && w.exponent <= 1.0) {
            return Err(CoreError::Input(format!(
                "unsupported omega modulus: coef {} exponent {}",
                w.coef, w.exponent
            )));
        }
        Ok(ModulusPair {
            r_modulus,
            omega_modulus,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuliReport {
    /// Partial sum S_N(t) per grid point.
    pub partial_sums: Vec<(f64, f64)>,
    /// Tail bound per grid point (analytic for linear r, ratio-based
    /// otherwise; infinite when the terms do not decay).
    pub tails: Vec<(f64, f64)>,
    /// Grid points where r(t) >= t, violating the class condition.
    pub r_violations: Vec<f64>,
    pub pass: bool,
}

/// Partial sums of sum_{n>=1} omega(r^n(t)) with a tail bound; pass iff
/// the tail is below 1e-9 and r(t) < t on the whole grid.
pub fn check_moduli_pair(pair: &ModulusPair, grid: &[f64], partial_len: usize) -> Result<ModuliReport> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
        return Err(CoreError::Input("grid must be positive".into()));
    }
    if partial_len < 1 {
        return Err(CoreError::Input("partial-sum length must be >= 1".into()));
    }
    let r = &pair.r_modulus;
    let w = &pair.omega_modulus;
    let mut partial_sums = Vec::new();
    let mut tails = Vec::new();
    let mut r_violations = Vec::new();
    for &t in grid {
        if r.eval(t) >= t {
            r_violations.push(t);
        }
        let mut s = 0.0;
        let mut rt = t;
        let mut last_term = f64::INFINITY;
        let mut ratio: f64 = 1.0;
        for _ in 0..partial_len {
            rt = r.eval(rt);
            let term = w.eval(rt);
            if last_term.is_finite() && last_term > 0.0 {
                ratio = term / last_term;
            }
            last_term = term;
            s += term;
        }
        partial_sums.push((t, s));
        let tail = if r.exponent == 1.0 && r.coef < 1.0 {
            // omega(r^n t) = coef * (c^beta)^n * t^beta: geometric
            let q = r.coef.powf(w.exponent);
            w.coef * q.powi(partial_len as i32 + 1) * t.powf(w.exponent) / (1.0 - q)
        } else if ratio < 1.0 {
            last_term * ratio / (1.0 - ratio)
        } else {
            f64::INFINITY
        };
        tails.push((t, tail));
    }
    let pass = r_violations.is_empty() && tails.iter().all(|(_, tail)| *tail < 1e-9);
    Ok(ModuliReport {
        partial_sums,
        tails,
        r_violations,
        pass,
    })
}
