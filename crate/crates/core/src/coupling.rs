//! Coupling constructions verified exactly on finite-state chains:
//! sigma schedules, ball splits, the k-step Cesaro decomposition
//! identity, the telescoping decomposition with its eps + 2(1-alpha)^k
//! bound, and the small-epsilon margin inequality with its bisection
//! threshold.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{distance, in_ball, Ball, MetricSpec};
use crate::measure::FiniteMeasure;
use crate::semigroup::chain_cesaro;
use crate::system::{chain_dual_step, ExactChain};
use crate::util::l1_diff;

/// Mass schedule sigma_k = (1-eps)(1-eps^{1/2})...(1-eps^{1/k}) * alpha.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub alpha: f64,
    pub epsilon: f64,
    pub sigmas: Vec<f64>,
}

pub fn sigma_schedule(alpha: f64, epsilon: f64, k: usize) -> Result<SigmaSchedule> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::Input(format!("alpha {alpha} not in (0,1)")));
    }
    if !(0.0 < epsilon && epsilon < 1.0) {
        return Err(CoreError::Input(format!("epsilon {epsilon} not in (0,1)")));
    }
    if k < 1 {
        return Err(CoreError::Input("schedule length must be >= 1".into()));
    }
    let mut sigmas = Vec::with_capacity(k);
    let mut product = alpha;
    for j in 1..=k {
        product *= 1.0 - epsilon.powf(1.0 / j as f64);
        if product <= 0.0 {
            return Err(CoreError::Numeric(format!(
                "sigma_{j} underflowed to {product}"
            )));
        }
        sigmas.push(product);
    }
    // strictly decreasing in exact arithmetic; at float precision the
    // factors can round to exactly 1 for tiny epsilon, so only an
    // increase is an error
    for w in sigmas.windows(2) {
        if w[1] > w[0] {
            return Err(CoreError::Numeric("schedule not non-increasing".into()));
        }
    }
    Ok(SigmaSchedule {
        alpha,
        epsilon,
        sigmas,
    })
}

/// margin(alpha, k, eps) =
///   (1 - alpha(1+eps)) / (1 - alpha(1-eps^{1/k})^k) - (1 - eps^{1/(k+1)}).
/// Positive for all sufficiently small eps > 0; this is the inequality
/// that lets the schedule keep capturing mass at step k+1.
pub fn lemma_ineq_margin(alpha: f64, k: usize, epsilon: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::Input(format!("alpha {alpha} not in (0,1)")));
    }
    if k < 1 {
        return Err(CoreError::Input("k must be >= 1".into()));
    }
    if !(0.0 < epsilon && epsilon < 1.0) {
        return Err(CoreError::Input(format!("epsilon {epsilon} not in (0,1)")));
    }
    let denom = 1.0 - alpha * (1.0 - epsilon.powf(1.0 / k as f64)).powi(k as i32);
    if denom <= 0.0 {
        return Err(CoreError::Domain(format!(
            "denominator {denom} not positive for alpha={alpha}, k={k}, eps={epsilon}"
        )));
    }
    let lhs = (1.0 - alpha * (1.0 + epsilon)) / denom;
    Ok(lhs - (1.0 - epsilon.powf(1.0 / (k + 1) as f64)))
}

/// Bisection (60 iterations) for the largest epsilon below which the
/// margin stays positive. Returns 0.5 when the margin is positive on
/// the whole bracket. The nominal lower bracket is 1e-12; for large
/// alpha * k the crossing sits far below it (the two competing roots
/// eps^{1/(k+1)} and eps^{1/k} separate extremely slowly), so the
/// bracket extends downward by squaring until the margin turns
/// positive, and the bisection runs on log(eps) to keep resolution.
pub fn lemma_threshold(alpha: f64, k: usize) -> Result<f64> {
    let at = |e: f64| lemma_ineq_margin(alpha, k, e).unwrap_or(-1.0);
    let mut lo = 1e-12;
    while at(lo) <= 0.0 {
        lo *= lo;
        if lo < 1e-290 {
            return Err(CoreError::Domain(format!(
                "no positive-margin epsilon found above 1e-290 for alpha={alpha}, k={k}"
            )));
        }
    }
    // The margin can recover positivity again at large eps (the
    // denominator swings), so the threshold is the FIRST sign change
    // above lo. Locate it on a log grid, then bisect.
    let llo = lo.ln();
    let lhi = 0.5f64.ln();
    let grid = 400;
    let mut bracket = None;
    let mut prev = llo;
    for i in 1..=grid {
        let le = llo + (lhi - llo) * i as f64 / grid as f64;
        if at(le.exp()) <= 0.0 {
            bracket = Some((prev, le));
            break;
        }
        prev = le;
    }
    let (mut a, mut b) = match bracket {
        None => return Ok(0.5),
        Some(pair) => pair,
    };
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if at(mid.exp()) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(a.exp())
}

/// m = sigma * nu + (1 - sigma) * mu_rem with nu the normalized
/// restriction of m to the ball. Requires m(ball) > sigma, which also
/// guarantees mu_rem is nonnegative.
pub fn ball_split(
    m: &FiniteMeasure,
    ball: &Ball,
    sigma: f64,
    metric: &MetricSpec,
) -> Result<(FiniteMeasure, FiniteMeasure)> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(CoreError::Input(format!("sigma {sigma} not in [0,1)")));
    }
    let b = m.ball_mass(metric, ball)?;
    if b <= sigma {
        return Err(CoreError::InadmissibleSplit {
            step: 0,
            ball_mass: b,
            sigma,
            deficit: sigma - b,
        });
    }
    let mut nu_atoms = Vec::new();
    let mut rem_atoms = Vec::new();
    for (p, w) in m.atoms() {
        if in_ball(metric, ball, p)? {
            nu_atoms.push((p.clone(), w / b));
            let r = (w - sigma * w / b) / (1.0 - sigma);
            if r > 0.0 {
                rem_atoms.push((p.clone(), r));
            }
        } else {
            rem_atoms.push((p.clone(), w / (1.0 - sigma)));
        }
    }
    Ok((
        FiniteMeasure::from_atoms(nu_atoms)?,
        FiniteMeasure::from_atoms(rem_atoms)?,
    ))
}

/// Chain analog of `ball_split` on an explicit state subset.
fn subset_split(
    dist: &[f64],
    ball_states: &[usize],
    sigma: f64,
    step: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut inside = vec![false; dist.len()];
    for &s in ball_states {
        if s >= dist.len() {
            return Err(CoreError::Input(format!("ball state {s} out of range")));
        }
        inside[s] = true;
    }
    let b: f64 = dist
        .iter()
        .enumerate()
        .filter(|(i, _)| inside[*i])
        .map(|(_, w)| *w)
        .sum();
    if b <= sigma {
        return Err(CoreError::InadmissibleSplit {
            step,
            ball_mass: b,
            sigma,
            deficit: sigma - b,
        });
    }
    let mut nu = vec![0.0; dist.len()];
    let mut rem = vec![0.0; dist.len()];
    for (i, &w) in dist.iter().enumerate() {
        if inside[i] {
            nu[i] = w / b;
            rem[i] = ((w - sigma * w / b) / (1.0 - sigma)).max(0.0);
        } else {
            rem[i] = w / (1.0 - sigma);
        }
    }
    Ok((nu, rem))
}

/// Resolve a metric ball into the chain-state subset it covers, via
/// the chain's embedding.
pub fn ball_states_from_embedding(
    chain: &ExactChain,
    ball: &Ball,
    metric: &MetricSpec,
) -> Result<Vec<usize>> {
    let points = chain
        .embedding
        .as_ref()
        .ok_or_else(|| CoreError::Input("chain has no embedding".into()))?;
    let mut states = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if in_ball(metric, ball, p)? {
            states.push(i);
        }
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermTag {
    Nu,
    MuRemainder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionTerm {
    pub coefficient: f64,
    pub vector: Vec<f64>,
    pub tag: TermTag,
}

/// Exact witness of a decomposition identity: the raw terms (each nu
/// fully supported in the ball), the residual between the evolved
/// mixture and the directly computed target, and the in-ball masses of
/// the nu terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionCertificate {
    pub terms: Vec<DecompositionTerm>,
    pub reconstruction_residual: f64,
    pub ball_mass_witnesses: Vec<f64>,
}

impl DecompositionCertificate {
    pub fn coefficient_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient).sum()
    }
}

fn subset_mass(dist: &[f64], ball_states: &[usize]) -> f64 {
    ball_states.iter().map(|&s| dist[s]).sum()
}

fn chain_power(chain: &ExactChain, dist: &[f64], t: usize) -> Result<Vec<f64>> {
    let mut cur = dist.to_vec();
    for _ in 0..t {
        cur = chain_dual_step(chain, &cur)?;
    }
    Ok(cur)
}

/// The k-step identity
///   Q_{t_K}..Q_{t_1} mu
///     = sum_k sigma_k prod_{s<k}(1-sigma_s) Q_{t_K}..Q_{t_{k+1}} nu^k
///       + prod_s (1-sigma_s) mu^K,
/// built inductively: after each Cesaro block, split off sigma_k of the
/// mass sitting in the ball. Terms hold the raw (unevolved) nu^k; the
/// residual compares the evolved mixture against the composed Cesaro
/// vector computed directly.
pub fn chain_decomposition(
    chain: &ExactChain,
    start: &[f64],
    ball_states: &[usize],
    schedule: &SigmaSchedule,
    times: &[usize],
) -> Result<DecompositionCertificate> {
    let k = schedule.sigmas.len();
    if times.len() != k {
        return Err(CoreError::Input(format!(
            "need {k} times, got {}",
            times.len()
        )));
    }
    if times.iter().any(|t| *t < 1) {
        return Err(CoreError::Input("all times must be >= 1".into()));
    }

    let mut terms = Vec::new();
    let mut witnesses = Vec::new();
    let mut survivor = 1.0; // prod_{s<k} (1 - sigma_s)
    let mut mu = start.to_vec();
    for (step_idx, (&sigma, &t)) in schedule.sigmas.iter().zip(times).enumerate() {
        let v = chain_cesaro(chain, &mu, t)?;
        let (nu, rem) = subset_split(&v, ball_states, sigma, step_idx + 1)?;
        witnesses.push(subset_mass(&nu, ball_states));
        terms.push(DecompositionTerm {
            coefficient: sigma * survivor,
            vector: nu,
            tag: TermTag::Nu,
        });
        survivor *= 1.0 - sigma;
        mu = rem;
    }
    terms.push(DecompositionTerm {
        coefficient: survivor,
        vector: mu,
        tag: TermTag::MuRemainder,
    });

    // Evolve each nu^k through the Cesaro blocks it has not yet seen
    // and compare the mixture against the direct composition.
    let direct = {
        let mut cur = start.to_vec();
        for &t in times {
            cur = chain_cesaro(chain, &cur, t)?;
        }
        cur
    };
    let mut mixture = vec![0.0; chain.n()];
    for (idx, term) in terms.iter().enumerate() {
        let evolved = if term.tag == TermTag::Nu {
            let mut cur = term.vector.clone();
            for &t in &times[idx + 1..] {
                cur = chain_cesaro(chain, &cur, t)?;
            }
            cur
        } else {
            term.vector.clone()
        };
        for (m, e) in mixture.iter_mut().zip(&evolved) {
            *m += term.coefficient * e;
        }
    }
    Ok(DecompositionCertificate {
        reconstruction_residual: l1_diff(&mixture, &direct),
        terms,
        ball_mass_witnesses: witnesses,
    })
}

/// The telescoping identity
///   P^{t_1+..+t_k} mu
///     = sum_j alpha (1-alpha)^{j-1} P^{t_{j+1}+..+t_k} nu^j
///       + (1-alpha)^k mu^k,
/// applied to both input distributions with the same ball, so that each
/// pair (nu_1^j, nu_2^j) lives in the ball and the bounded difference
/// argument goes through.
pub fn telescoping_decomposition(
    chain: &ExactChain,
    mu1: &[f64],
    mu2: &[f64],
    alpha: f64,
    ball_states: &[usize],
    times: &[usize],
) -> Result<(DecompositionCertificate, DecompositionCertificate)> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::Input(format!("alpha {alpha} not in (0,1)")));
    }
    if times.is_empty() {
        return Err(CoreError::Input("need at least one time".into()));
    }
    let one = telescope_one(chain, mu1, alpha, ball_states, times)?;
    let two = telescope_one(chain, mu2, alpha, ball_states, times)?;
    Ok((one, two))
}

fn telescope_one(
    chain: &ExactChain,
    mu0: &[f64],
    alpha: f64,
    ball_states: &[usize],
    times: &[usize],
) -> Result<DecompositionCertificate> {
    let mut terms = Vec::new();
    let mut witnesses = Vec::new();
    let mut survivor = 1.0;
    let mut mu = mu0.to_vec();
    for (j, &t) in times.iter().enumerate() {
        let v = chain_power(chain, &mu, t)?;
        let (nu, rem) = subset_split(&v, ball_states, alpha, j + 1)?;
        witnesses.push(subset_mass(&nu, ball_states));
        terms.push(DecompositionTerm {
            coefficient: alpha * survivor,
            vector: nu,
            tag: TermTag::Nu,
        });
        survivor *= 1.0 - alpha;
        mu = rem;
    }
    terms.push(DecompositionTerm {
        coefficient: survivor,
        vector: mu,
        tag: TermTag::MuRemainder,
    });

    let total: usize = times.iter().sum();
    let direct = chain_power(chain, mu0, total)?;
    let mut mixture = vec![0.0; chain.n()];
    for (idx, term) in terms.iter().enumerate() {
        let evolved = if term.tag == TermTag::Nu {
            let remaining: usize = times[idx + 1..].iter().sum();
            chain_power(chain, &term.vector, remaining)?
        } else {
            term.vector.clone()
        };
        for (m, e) in mixture.iter_mut().zip(&evolved) {
            *m += term.coefficient * e;
        }
    }
    Ok(DecompositionCertificate {
        reconstruction_residual: l1_diff(&mixture, &direct),
        terms,
        ball_mass_witnesses: witnesses,
    })
}

/// Result of checking |<phi, P^T mu1 - P^T mu2>| <= eps_phi + 2(1-a)^k
/// over a dictionary of test vectors with sup norm <= 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub eps_phi: f64,
    pub k: usize,
    pub pass: bool,
}

/// The decomposition pairs each captured nu_1^j with nu_2^j inside the
/// ball, then lets both evolve for the remaining time s_j; the bound
/// they contribute is therefore the oscillation of P^{s_j} phi over the
/// ball, not of phi itself. eps_phi is the max of that oscillation over
/// the dictionary and over the realized offsets s_j, computed exactly.
pub fn coupling_bound_check(
    chain: &ExactChain,
    mu1: &[f64],
    mu2: &[f64],
    alpha: f64,
    ball_states: &[usize],
    times: &[usize],
    dictionary: &[Vec<f64>],
) -> Result<CouplingCheck> {
    for (i, phi) in dictionary.iter().enumerate() {
        if phi.len() != chain.n() {
            return Err(CoreError::DimensionMismatch {
                expected: chain.n(),
                got: phi.len(),
            });
        }
        if phi.iter().any(|v| v.abs() > 1.0 + 1e-12) {
            return Err(CoreError::Input(format!(
                "dictionary entry {i} exceeds sup norm 1"
            )));
        }
    }
    // Admissibility of the telescoping construction is a precondition;
    // run it so inadmissible inputs surface as the structured error.
    telescoping_decomposition(chain, mu1, mu2, alpha, ball_states, times)?;

    let k = times.len();
    let total: usize = times.iter().sum();
    let p1 = chain_power(chain, mu1, total)?;
    let p2 = chain_power(chain, mu2, total)?;

    let mut lhs: f64 = 0.0;
    let mut eps_phi: f64 = 0.0;
    for phi in dictionary {
        let a: f64 = phi.iter().zip(&p1).map(|(f, w)| f * w).sum();
        let b: f64 = phi.iter().zip(&p2).map(|(f, w)| f * w).sum();
        lhs = lhs.max((a - b).abs());

        // P^s phi as a function vector, iterated one primal step at a
        // time; record the ball oscillation at each realized offset
        // s_j = t_{j+1} + .. + t_k.
        let offsets: std::collections::HashSet<usize> = times
            .iter()
            .scan(total, |acc, &t| {
                *acc -= t;
                Some(*acc)
            })
            .collect();
        let max_offset = offsets.iter().copied().max().unwrap_or(0);
        let mut cur = phi.clone();
        for s in 0..=max_offset {
            if offsets.contains(&s) {
                let vals: Vec<f64> = ball_states.iter().map(|&i| cur[i]).collect();
                let osc = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - vals.iter().cloned().fold(f64::INFINITY, f64::min);
                eps_phi = eps_phi.max(osc);
            }
            if s < max_offset {
                // primal step: (P phi)(i) = sum_j p_ij phi(j)
                let mut stepped = vec![0.0; chain.n()];
                for (i, row) in chain.matrix().iter().enumerate() {
                    stepped[i] = row.iter().zip(&cur).map(|(p, f)| p * f).sum();
                }
                cur = stepped;
            }
        }
    }
    let rhs = eps_phi + 2.0 * (1.0 - alpha).powi(k as i32);
    Ok(CouplingCheck {
        lhs,
        rhs,
        eps_phi,
        k,
        pass: lhs <= rhs + 1e-12,
    })
}

/// Doubling search for Cesaro times: grow t until the composed-Cesaro
/// vertex gap at horizon `t_final` drops below `threshold`, then reuse
/// that t for every block. Returns the times found.
pub fn select_times_by_doubling(
    chain: &ExactChain,
    k: usize,
    t_final: usize,
    threshold: f64,
    t_cap: usize,
) -> Result<Vec<usize>> {
    let mut t = 1usize;
    loop {
        let times = vec![t; k];
        let gap = crate::semigroup::composed_cesaro_vertex_gap(chain, &times, t_final)?;
        if gap < threshold {
            return Ok(times);
        }
        if t >= t_cap {
            return Err(CoreError::Resource(format!(
                "doubling search exceeded cap {t_cap} (gap {gap:.3e} >= {threshold:.3e})"
            )));
        }
        t *= 2;
    }
}

/// Unused-parameter guard for the embedded-ball path in tests.
pub fn embedded_ball_oscillation(
    chain: &ExactChain,
    ball: &Ball,
    metric: &MetricSpec,
) -> Result<f64> {
    let states = ball_states_from_embedding(chain, ball, metric)?;
    let points = chain.embedding.as_ref().unwrap();
    let mut diam: f64 = 0.0;
    for &i in &states {
        for &j in &states {
            diam = diam.max(distance(metric, &points[i], &points[j])?);
        }
    }
    Ok(diam)
}
