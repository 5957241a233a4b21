//! Concrete Markov systems: place-dependent iterated function systems,
//! the jump-flow process (deterministic semi-flow interrupted by an
//! exponential clock), and exact finite-state chains, together with
//! checkers for the hypotheses placed on them.

mod chain;
mod checks;

pub use chain::{chain_dual_step, chain_stationary, ExactChain};
pub use checks::{
    check_avg_contraction, check_flow_expansion, check_moduli_pair, check_prob_lipschitz,
    check_spectral_gap_condition, ContractionReport, FlowExpansionReport, LipschitzReport,
    ModuliReport, Modulus, ModulusPair, SpectralGapReport,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{MetricSpec, Point};
use crate::measure::{FiniteMeasure, TestFunction};
use crate::rng::{sample_exponential, sample_index};

/// Default cap on support size times branch count in one exact dual step.
pub const DEFAULT_DUAL_STEP_CAP: usize = 8_388_608;

/// x -> A x + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<AffineMap> {
        let d = b.len();
        if a.len() != d || a.iter().any(|row| row.len() != d) {
            return Err(CoreError::Input("affine map matrix/vector shape mismatch".into()));
        }
        if a.iter().flatten().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::Input("non-finite affine map entry".into()));
        }
        Ok(AffineMap { a, b })
    }

    /// 1-D convenience: x -> slope * x + offset.
    pub fn scalar(slope: f64, offset: f64) -> AffineMap {
        AffineMap {
            a: vec![vec![slope]],
            b: vec![offset],
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn apply(&self, x: &Point) -> Result<Point> {
        if x.dim() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        let coords: Vec<f64> = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| {
                row.iter()
                    .zip(x.coords())
                    .map(|(aij, xj)| aij * xj)
                    .sum::<f64>()
                    + bi
            })
            .collect();
        Point::new(coords)
    }

    /// Operator-norm bound of A with respect to the active metric:
    /// spectral norm (power iteration) for euclidean/truncated, max
    /// absolute row sum for chebyshev.
    pub fn lipschitz_bound(&self, metric: &MetricSpec) -> f64 {
        match metric {
            MetricSpec::Chebyshev => self
                .a
                .iter()
                .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            MetricSpec::Euclidean | MetricSpec::Truncated { .. } => self.spectral_norm(),
        }
    }

    fn spectral_norm(&self) -> f64 {
        let d = self.dim();
        if d == 1 {
            return self.a[0][0].abs();
        }
        // power iteration on A^T A from a fixed deterministic start
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 0.3).collect();
        let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut sigma = 0.0;
        for _ in 0..200 {
            // u = A v
            let u: Vec<f64> = self
                .a
                .iter()
                .map(|row| row.iter().zip(&v).map(|(a, x)| a * x).sum())
                .collect();
            // w = A^T u
            let mut w = vec![0.0; d];
            for (i, row) in self.a.iter().enumerate() {
                for (j, a) in row.iter().enumerate() {
                    w[j] += a * u[i];
                }
            }
            let n = norm(&w);
            if n == 0.0 {
                return 0.0;
            }
            for x in &mut w {
                *x /= n;
            }
            let next = n.sqrt();
            if (next - sigma).abs() <= 1e-14 * next.max(1.0) {
                return next;
            }
            sigma = next;
            v = w;
        }
        sigma
    }
}

/// Place-dependent selection probabilities p_i(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbabilityField {
    Constant { weights: Vec<f64> },
    Softmax { theta: Vec<Vec<f64>>, offsets: Vec<f64> },
}

impl ProbabilityField {
    pub fn validate(&self, n_maps: usize, dim: usize) -> Result<()> {
        match self {
            ProbabilityField::Constant { weights } => {
                if weights.len() != n_maps {
                    return Err(CoreError::Input(format!(
                        "probability field has {} weights for {} maps",
                        weights.len(),
                        n_maps
                    )));
                }
                if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                    return Err(CoreError::Input("negative probability weight".into()));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(CoreError::Input(format!("weights sum to {s}, expected 1")));
                }
            }
            ProbabilityField::Softmax { theta, offsets } => {
                if theta.len() != n_maps || offsets.len() != n_maps {
                    return Err(CoreError::Input("softmax parameter count mismatch".into()));
                }
                if theta.iter().any(|t| t.len() != dim) {
                    return Err(CoreError::Input("softmax theta dimension mismatch".into()));
                }
            }
        }
        Ok(())
    }

    /// p_1(x), ..., p_N(x); sums to 1 by construction.
    pub fn probs(&self, x: &Point) -> Vec<f64> {
        match self {
            ProbabilityField::Constant { weights } => weights.clone(),
            ProbabilityField::Softmax { theta, offsets } => {
                let logits: Vec<f64> = theta
                    .iter()
                    .zip(offsets)
                    .map(|(t, c)| {
                        t.iter().zip(x.coords()).map(|(a, b)| a * b).sum::<f64>() + c
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            }
        }
    }

    /// Conservative Lipschitz bound on x -> sum_i |p_i(x) - p_i(y)|.
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            ProbabilityField::Constant { .. } => 0.0,
            ProbabilityField::Softmax { theta, .. } => {
                2.0 * theta
                    .iter()
                    .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Discrete-time place-dependent IFS: Pf(x) = sum_i f(w_i(x)) p_i(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteIFS {
    pub maps: Vec<AffineMap>,
    pub probs: ProbabilityField,
    pub metric: MetricSpec,
}

impl DiscreteIFS {
    pub fn new(maps: Vec<AffineMap>, probs: ProbabilityField, metric: MetricSpec) -> Result<Self> {
        if maps.is_empty() {
            return Err(CoreError::Input("IFS needs at least one map".into()));
        }
        let dim = maps[0].dim();
        if maps.iter().any(|m| m.dim() != dim) {
            return Err(CoreError::Input("IFS maps have inconsistent dimensions".into()));
        }
        metric.validate()?;
        probs.validate(maps.len(), dim)?;
        Ok(DiscreteIFS { maps, probs, metric })
    }

    /// The two halving maps on [0,1] with equal weights; the workhorse
    /// test system (invariant measure is Lebesgue on [0,1]).
    pub fn binary_halving() -> DiscreteIFS {
        DiscreteIFS::new(
            vec![AffineMap::scalar(0.5, 0.0), AffineMap::scalar(0.5, 0.5)],
            ProbabilityField::Constant {
                weights: vec![0.5, 0.5],
            },
            MetricSpec::Euclidean,
        )
        .expect("static system")
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim()
    }
}

/// Diagonal exponential semi-flow S(t)x = (e^{lambda_i t} x_i)_i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSpec {
    pub lambda: Vec<f64>,
}

impl FlowSpec {
    pub fn new(lambda: Vec<f64>) -> Result<FlowSpec> {
        if lambda.is_empty() || lambda.iter().any(|l| !l.is_finite()) {
            return Err(CoreError::Input("flow exponents must be finite, d >= 1".into()));
        }
        Ok(FlowSpec { lambda })
    }

    /// Exact expansion exponent: rho(S(t)x, S(t)y) <= e^{kappa t} rho(x,y)
    /// for euclidean and chebyshev metrics.
    pub fn kappa(&self) -> f64 {
        self.lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn apply(&self, t: f64, x: &Point) -> Result<Point> {
        if x.dim() != self.lambda.len() {
            return Err(CoreError::DimensionMismatch {
                expected: self.lambda.len(),
                got: x.dim(),
            });
        }
        let coords: Vec<f64> = self
            .lambda
            .iter()
            .zip(x.coords())
            .map(|(l, xi)| (l * t).exp() * xi)
            .collect();
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::Numeric(format!(
                "flow overflow at t={t} from {:?}",
                x.coords()
            )));
        }
        Point::new(coords)
    }
}

/// Jump-flow process: flow along S between jumps of an Exp(gamma) clock,
/// then jump through a randomly selected map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpFlowSystem {
    pub flow: FlowSpec,
    pub gamma: f64,
    pub maps: Vec<AffineMap>,
    pub probs: ProbabilityField,
    pub metric: MetricSpec,
}

impl JumpFlowSystem {
    pub fn new(
        flow: FlowSpec,
        gamma: f64,
        maps: Vec<AffineMap>,
        probs: ProbabilityField,
        metric: MetricSpec,
    ) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(CoreError::Input(format!("gamma must be positive, got {gamma}")));
        }
        let ifs = DiscreteIFS::new(maps, probs, metric)?;
        if flow.lambda.len() != ifs.dim() {
            return Err(CoreError::Input("flow dimension differs from maps".into()));
        }
        Ok(JumpFlowSystem {
            flow,
            gamma,
            maps: ifs.maps,
            probs: ifs.probs,
            metric: ifs.metric,
        })
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim()
    }
}

/// A sampleable system: either branch drives the same estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dynamics {
    Ifs(DiscreteIFS),
    JumpFlow(JumpFlowSystem),
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::Ifs(s) => s.dim(),
            Dynamics::JumpFlow(s) => s.dim(),
        }
    }

    pub fn metric(&self) -> &MetricSpec {
        match self {
            Dynamics::Ifs(s) => &s.metric,
            Dynamics::JumpFlow(s) => &s.metric,
        }
    }
}

/// One application of the transition kernel along a keyed rng stream.
pub fn step_sample(system: &Dynamics, x: &Point, rng: &mut ChaCha8Rng) -> Result<Point> {
    match system {
        Dynamics::Ifs(ifs) => {
            let probs = ifs.probs.probs(x);
            let i = sample_index(rng, &probs);
            ifs.maps[i].apply(x)
        }
        Dynamics::JumpFlow(jf) => {
            let dt = sample_exponential(rng, jf.gamma);
            let xi = jf.flow.apply(dt, x)?;
            let probs = jf.probs.probs(&xi);
            let i = sample_index(rng, &probs);
            jf.maps[i].apply(&xi)
        }
    }
}

/// Exact dual step P* mu: atoms (w_i(x_j), p_i(x_j) w_j), merged.
pub fn dual_step_exact(ifs: &DiscreteIFS, m: &FiniteMeasure) -> Result<FiniteMeasure> {
    dual_step_exact_capped(ifs, m, DEFAULT_DUAL_STEP_CAP)
}

pub fn dual_step_exact_capped(
    ifs: &DiscreteIFS,
    m: &FiniteMeasure,
    cap: usize,
) -> Result<FiniteMeasure> {
    let branches = m.support_size() * ifs.maps.len();
    if branches > cap {
        return Err(CoreError::Resource(format!(
            "dual step would create {branches} atoms (cap {cap}); prune first"
        )));
    }
    let mut atoms = Vec::with_capacity(branches);
    for (x, w) in m.atoms() {
        let probs = ifs.probs.probs(x);
        for (map, p) in ifs.maps.iter().zip(&probs) {
            if *p > 0.0 {
                atoms.push((map.apply(x)?, p * w));
            }
        }
    }
    Ok(FiniteMeasure::from_atoms_unchecked(m.dim(), atoms))
}

/// Pf(x). Exact finite sum for a discrete IFS; adaptive Simpson
/// quadrature over the exponential clock for a jump-flow system.
pub fn apply_p(system: &Dynamics, f: &TestFunction, x: &Point) -> Result<f64> {
    match system {
        Dynamics::Ifs(ifs) => apply_p_ifs(ifs, f, x),
        Dynamics::JumpFlow(jf) => apply_p_jumpflow(jf, f, x),
    }
}

fn apply_p_ifs(ifs: &DiscreteIFS, f: &TestFunction, x: &Point) -> Result<f64> {
    let probs = ifs.probs.probs(x);
    let mut acc = 0.0;
    for (map, p) in ifs.maps.iter().zip(&probs) {
        if *p > 0.0 {
            acc += p * f.eval(&ifs.metric, &map.apply(x)?)?;
        }
    }
    Ok(acc)
}

const QUAD_TOL: f64 = 1e-9;
const QUAD_TAIL: f64 = 1e-10;

fn apply_p_jumpflow(jf: &JumpFlowSystem, f: &TestFunction, x: &Point) -> Result<f64> {
    let t_cut = -(QUAD_TAIL.ln()) / jf.gamma;
    let integrand = |t: f64| -> Result<f64> {
        let xi = jf.flow.apply(t, x)?;
        let probs = jf.probs.probs(&xi);
        let mut acc = 0.0;
        for (map, p) in jf.maps.iter().zip(&probs) {
            if *p > 0.0 {
                acc += p * f.eval(&jf.metric, &map.apply(&xi)?)?;
            }
        }
        Ok(jf.gamma * (-jf.gamma * t).exp() * acc)
    };
    adaptive_simpson(&integrand, 0.0, t_cut, QUAD_TOL)
}

fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn rec<F>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64>
    where
        F: Fn(f64) -> Result<f64>,
    {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = left + right - whole;
        if err.abs() <= 15.0 * tol {
            return Ok(left + right + err / 15.0);
        }
        if depth == 0 {
            return Err(CoreError::Numeric(format!(
                "quadrature tolerance not met: achieved {:.3e} on [{a}, {b}]",
                err.abs() / 15.0
            )));
        }
        Ok(rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = simpson(fa, fm, fb, b - a);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{dirac, integrate, tv_distance};
    use crate::rng::SeedKey;

    fn pt(x: f64) -> Point {
        Point::scalar(x).unwrap()
    }

    #[test]
    fn single_branch_deterministic() {
        let ifs = DiscreteIFS::new(
            vec![AffineMap::scalar(0.5, 0.0)],
            ProbabilityField::Constant { weights: vec![1.0] },
            MetricSpec::Euclidean,
        )
        .unwrap();
        let sys = Dynamics::Ifs(ifs);
        let mut rng = SeedKey(0).stream(0, 0);
        let y = step_sample(&sys, &pt(1.0), &mut rng).unwrap();
        assert_eq!(y.coords()[0], 0.5);
    }

    #[test]
    fn degenerate_sampler_only_picks_first_map() {
        let ifs = DiscreteIFS::new(
            vec![AffineMap::scalar(1.0, 1.0), AffineMap::scalar(1.0, -1.0)],
            ProbabilityField::Constant {
                weights: vec![1.0, 0.0],
            },
            MetricSpec::Euclidean,
        )
        .unwrap();
        let sys = Dynamics::Ifs(ifs);
        let key = SeedKey(11);
        for t in 0..10_000u64 {
            let mut rng = key.stream(t, 0);
            let y = step_sample(&sys, &pt(0.0), &mut rng).unwrap();
            assert_eq!(y.coords()[0], 1.0);
        }
    }

    #[test]
    fn frozen_jumpflow_is_identity() {
        let jf = JumpFlowSystem::new(
            FlowSpec::new(vec![0.0]).unwrap(),
            1.0,
            vec![AffineMap::scalar(1.0, 0.0)],
            ProbabilityField::Constant { weights: vec![1.0] },
            MetricSpec::Euclidean,
        )
        .unwrap();
        let sys = Dynamics::JumpFlow(jf);
        let mut rng = SeedKey(5).stream(0, 0);
        let y = step_sample(&sys, &pt(0.75), &mut rng).unwrap();
        assert_eq!(y.coords()[0], 0.75);
    }

    #[test]
    fn dual_step_identity_and_halving() {
        let id = DiscreteIFS::new(
            vec![AffineMap::scalar(1.0, 0.0)],
            ProbabilityField::Constant { weights: vec![1.0] },
            MetricSpec::Euclidean,
        )
        .unwrap();
        let m = dirac(pt(0.3));
        let out = dual_step_exact(&id, &m).unwrap();
        assert_eq!(tv_distance(&m, &out).unwrap(), 0.0);

        let half = DiscreteIFS::binary_halving();
        let out = dual_step_exact(&half, &dirac(pt(0.0))).unwrap();
        assert_eq!(out.atoms().len(), 2);
        assert_eq!(out.atoms()[0].0.coords()[0], 0.0);
        assert_eq!(out.atoms()[1].0.coords()[0], 0.5);
        assert_eq!(out.atoms()[0].1, 0.5);
    }

    #[test]
    fn halving_moment_recursion() {
        // m' = m/2 + 1/4, so <x, P*^n delta_0> = (1 - 2^-n)/2
        let half = DiscreteIFS::binary_halving();
        let mut m = dirac(pt(0.0));
        for n in 1..=10u32 {
            m = dual_step_exact(&half, &m).unwrap();
            let expect = 0.5 * (1.0 - 0.5f64.powi(n as i32));
            assert!((m.coordinate_mean(0) - expect).abs() <= 1e-14);
        }
    }

    #[test]
    fn apply_p_markov_normalization() {
        let half = Dynamics::Ifs(DiscreteIFS::binary_halving());
        let one = TestFunction::constant(1.0);
        assert!((apply_p(&half, &one, &pt(0.37)).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn apply_p_halving_tent() {
        let half = Dynamics::Ifs(DiscreteIFS::binary_halving());
        let tent = TestFunction::Tent {
            center: pt(0.0),
            scale: 1.0,
        };
        let v = apply_p(&half, &tent, &pt(0.0)).unwrap();
        assert!((v - 0.75).abs() <= 1e-15);
    }

    #[test]
    fn jumpflow_frozen_flow_matches_discrete_sum() {
        // lambda = 0 freezes the flow so the quadrature must reproduce
        // the plain IFS sum
        let ifs = DiscreteIFS::binary_halving();
        let jf = JumpFlowSystem::new(
            FlowSpec::new(vec![0.0]).unwrap(),
            1.0,
            ifs.maps.clone(),
            ifs.probs.clone(),
            ifs.metric,
        )
        .unwrap();
        let tent = TestFunction::Tent {
            center: pt(0.5),
            scale: 0.5,
        };
        for x in [0.0, 0.3, 0.9] {
            let exact = apply_p(&Dynamics::Ifs(ifs.clone()), &tent, &pt(x)).unwrap();
            let quad = apply_p(&Dynamics::JumpFlow(jf.clone()), &tent, &pt(x)).unwrap();
            assert!(
                (exact - quad).abs() <= 1e-9,
                "x={x}: exact {exact} vs quad {quad}"
            );
        }
    }

    #[test]
    fn adjointness_on_random_measure() {
        // <phi, P* mu> == <P phi, mu> along the exact path
        let half = DiscreteIFS::binary_halving();
        let m = crate::measure::mixture(&[
            (0.25, dirac(pt(0.0))),
            (0.5, dirac(pt(0.3))),
            (0.25, dirac(pt(1.0))),
        ])
        .unwrap();
        let tent = TestFunction::Tent {
            center: pt(0.25),
            scale: 0.7,
        };
        let lhs = integrate(
            &dual_step_exact(&half, &m).unwrap(),
            &tent,
            &MetricSpec::Euclidean,
        )
        .unwrap();
        let sys = Dynamics::Ifs(half);
        let rhs: f64 = m
            .atoms()
            .iter()
            .map(|(x, w)| w * apply_p(&sys, &tent, x).unwrap())
            .sum();
        assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn dual_step_mass_exact() {
        let half = DiscreteIFS::binary_halving();
        let mut m = dirac(pt(0.0));
        for _ in 0..12 {
            m = dual_step_exact(&half, &m).unwrap();
        }
        assert!((m.total_mass() - 1.0).abs() <= 1e-13);
    }

    #[test]
    fn dual_step_cap() {
        let half = DiscreteIFS::binary_halving();
        let m = dirac(pt(0.0));
        assert!(matches!(
            dual_step_exact_capped(&half, &m, 1),
            Err(CoreError::Resource(_))
        ));
    }

    #[test]
    fn flow_overflow_is_reported() {
        let flow = FlowSpec::new(vec![1.0]).unwrap();
        let big = Point::scalar(1e300).unwrap();
        assert!(matches!(
            flow.apply(500.0, &big),
            Err(CoreError::Numeric(_))
        ));
    }
}
