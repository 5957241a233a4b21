//! Multi-step evolution of measures under the dual operator, Cesaro
//! averaging Q_n, composed Cesaro operators on exact chains, and the
//! telescoping total-variation residual bound 2/n.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::measure::{mixture, prune, FiniteMeasure};
use crate::rng::SeedKey;
use crate::system::{
    chain_dual_step, dual_step_exact, step_sample, DiscreteIFS, Dynamics, ExactChain,
};
use crate::util::l1_diff;

/// Support-control policy applied after each exact dual step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrunePolicy {
    pub mass_floor: f64,
    pub merge_radius: f64,
    /// Total dropped mass allowed over the whole evolution.
    pub budget: f64,
}

impl PrunePolicy {
    pub fn disabled() -> PrunePolicy {
        PrunePolicy {
            mass_floor: 0.0,
            merge_radius: 0.0,
            budget: 0.0,
        }
    }
}

impl Default for PrunePolicy {
    fn default() -> PrunePolicy {
        PrunePolicy {
            mass_floor: 1e-12,
            merge_radius: 0.0,
            budget: 1e-9,
        }
    }
}

/// Which steps a particle evolution materializes as measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordPolicy {
    All,
    Last,
    Every(usize),
}

impl RecordPolicy {
    fn records(&self, step: usize, total: usize) -> bool {
        match self {
            RecordPolicy::All => true,
            RecordPolicy::Last => step == 0 || step == total,
            RecordPolicy::Every(k) => step % (*k).max(1) == 0 || step == total,
        }
    }
}

/// The orbit of a measure under repeated dual steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionTrace {
    /// Step index of each recorded entry (always starts at 0).
    pub steps: Vec<usize>,
    pub measures: Vec<FiniteMeasure>,
    /// Cumulative dropped mass up to each recorded step; the TV
    /// deviation from the unpruned orbit is at most twice this.
    pub prune_loss: Vec<f64>,
    /// Seed key of the sampling run; None for exact evolution.
    pub seed: Option<u64>,
}

impl EvolutionTrace {
    pub fn measure_at(&self, step: usize) -> Option<&FiniteMeasure> {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map(|i| &self.measures[i])
    }
}

/// trace[k] = P*^k m0, with the prune policy applied after each step.
pub fn evolve_exact(
    ifs: &DiscreteIFS,
    m0: &FiniteMeasure,
    steps: usize,
    policy: &PrunePolicy,
) -> Result<EvolutionTrace> {
    let mut measures = vec![m0.clone()];
    let mut prune_loss = vec![0.0];
    let mut current = m0.clone();
    let mut dropped = 0.0;
    for step in 1..=steps {
        current = dual_step_exact(ifs, &current).map_err(|e| match e {
            CoreError::Resource(msg) => {
                CoreError::Resource(format!("at step {step}: {msg}"))
            }
            other => other,
        })?;
        if policy.mass_floor > 0.0 || policy.merge_radius > 0.0 {
            let (pruned, rep) = prune(
                &current,
                policy.mass_floor,
                policy.merge_radius,
                &ifs.metric,
            )?;
            dropped += rep.dropped_mass;
            if dropped > policy.budget {
                return Err(CoreError::Resource(format!(
                    "prune budget exhausted at step {step}: dropped {dropped:.3e} > {:.3e}",
                    policy.budget
                )));
            }
            current = pruned;
        }
        measures.push(current.clone());
        prune_loss.push(dropped);
    }
    Ok(EvolutionTrace {
        steps: (0..=steps).collect(),
        measures,
        prune_loss,
        seed: None,
    })
}

/// Initial condition for a particle evolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Start {
    Point(Point),
    /// Each particle draws its start from this measure.
    Measure(FiniteMeasure),
}

/// Empirical-measure trace of `particles` independent trajectories.
/// Trajectory j transitions from step s to s+1 using the rng stream
/// keyed (seed, j, s+1); stream (seed, j, 0) draws the start when the
/// initial condition is a measure. Deterministic given the seed,
/// independent of thread count.
pub fn evolve_particles(
    system: &Dynamics,
    start: &Start,
    steps: usize,
    particles: usize,
    seed: SeedKey,
    record: RecordPolicy,
) -> Result<EvolutionTrace> {
    if particles < 1 {
        return Err(CoreError::Input("need at least one particle".into()));
    }
    let recorded: Vec<usize> = (0..=steps).filter(|&s| record.records(s, steps)).collect();

    let paths: Vec<Result<Vec<Point>>> = (0..particles)
        .into_par_iter()
        .map(|j| {
            let mut x = match start {
                Start::Point(p) => p.clone(),
                Start::Measure(m) => {
                    let mut rng = seed.stream(j as u64, 0);
                    let weights: Vec<f64> = m.atoms().iter().map(|(_, w)| *w).collect();
                    let idx = crate::rng::sample_index(&mut rng, &weights);
                    m.atoms()[idx].0.clone()
                }
            };
            let mut snapshots = Vec::with_capacity(recorded.len());
            if recorded.contains(&0) {
                snapshots.push(x.clone());
            }
            for s in 1..=steps {
                let mut rng = seed.stream(j as u64, s as u64);
                x = step_sample(system, &x, &mut rng).map_err(|e| {
                    CoreError::Numeric(format!("trajectory {j}, step {s}: {e}"))
                })?;
                if recorded.contains(&s) {
                    snapshots.push(x.clone());
                }
            }
            Ok(snapshots)
        })
        .collect();

    let mut paths_ok = Vec::with_capacity(particles);
    for p in paths {
        paths_ok.push(p?);
    }

    let w = 1.0 / particles as f64;
    let mut measures = Vec::with_capacity(recorded.len());
    for slot in 0..recorded.len() {
        let atoms: Vec<(Point, f64)> = paths_ok
            .iter()
            .map(|path| (path[slot].clone(), w))
            .collect();
        measures.push(FiniteMeasure::from_atoms(atoms)?);
    }
    let prune_loss = vec![0.0; measures.len()];
    Ok(EvolutionTrace {
        steps: recorded,
        measures,
        prune_loss,
        seed: Some(seed.0),
    })
}

/// Q_n mu = (1/n) sum_{k=1..n} P*^k mu: uniform mixture over the slice,
/// which must hold steps 1..n (step 0 excluded).
pub fn cesaro_average(slice: &[FiniteMeasure]) -> Result<FiniteMeasure> {
    if slice.is_empty() {
        return Err(CoreError::Input("cesaro average of empty slice".into()));
    }
    let c = 1.0 / slice.len() as f64;
    let terms: Vec<(f64, FiniteMeasure)> = slice.iter().map(|m| (c, m.clone())).collect();
    mixture(&terms)
}

/// Exact Cesaro vector (1/n) sum_{k=1..n} dist . P^k on a chain.
pub fn chain_cesaro(chain: &ExactChain, dist: &[f64], n: usize) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(CoreError::Input("cesaro horizon must be >= 1".into()));
    }
    let mut acc = vec![0.0f64; chain.n()];
    let mut cur = dist.to_vec();
    for _ in 0..n {
        cur = chain_dual_step(chain, &cur)?;
        for (a, c) in acc.iter_mut().zip(&cur) {
            *a += c;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(acc)
}

/// Exact value of ||P* Q_n delta_z - Q_n delta_z||_TV on a chain; the
/// telescoping identity guarantees it is at most 2/n.
pub fn cesaro_tv_residual(chain: &ExactChain, z: usize, n: usize) -> Result<f64> {
    if z >= chain.n() {
        return Err(CoreError::Input(format!("state {z} out of range")));
    }
    let mut delta = vec![0.0; chain.n()];
    delta[z] = 1.0;
    let q = chain_cesaro(chain, &delta, n)?;
    let pq = chain_dual_step(chain, &q)?;
    let residual = l1_diff(&pq, &q);
    debug_assert!(residual <= 2.0 / n as f64 + 1e-12);
    Ok(residual)
}

/// Q_T Q_{t_k} ... Q_{t_1} dist, all times integer.
pub fn composed_cesaro(
    chain: &ExactChain,
    dist: &[f64],
    times: &[usize],
    t_final: usize,
) -> Result<Vec<f64>> {
    if times.iter().any(|t| *t < 1) {
        return Err(CoreError::Input("all cesaro times must be >= 1".into()));
    }
    let mut cur = dist.to_vec();
    for &t in times {
        cur = chain_cesaro(chain, &cur, t)?;
    }
    chain_cesaro(chain, &cur, t_final)
}

/// Max over simplex vertices of ||Q_{T,t_k..t_1} e_i - Q_T e_i||_TV.
/// The TV distance of two linear images is convex in the input measure,
/// so the sup over the whole simplex is attained at a vertex; this makes
/// the composed-Cesaro convergence checkable exactly.
pub fn composed_cesaro_vertex_gap(
    chain: &ExactChain,
    times: &[usize],
    t_final: usize,
) -> Result<f64> {
    let mut max_gap: f64 = 0.0;
    for i in 0..chain.n() {
        let mut e = vec![0.0; chain.n()];
        e[i] = 1.0;
        let composed = composed_cesaro(chain, &e, times, t_final)?;
        let plain = chain_cesaro(chain, &e, t_final)?;
        max_gap = max_gap.max(l1_diff(&composed, &plain));
    }
    Ok(max_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MetricSpec;
    use crate::measure::{dirac, tv_distance};
    use crate::system::{AffineMap, ProbabilityField};

    fn pt(x: f64) -> Point {
        Point::scalar(x).unwrap()
    }

    fn identity_ifs() -> DiscreteIFS {
        DiscreteIFS::new(
            vec![AffineMap::scalar(1.0, 0.0)],
            ProbabilityField::Constant { weights: vec![1.0] },
            MetricSpec::Euclidean,
        )
        .unwrap()
    }

    fn two_state() -> ExactChain {
        ExactChain::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn zero_steps_is_initial() {
        let m0 = dirac(pt(0.25));
        let tr = evolve_exact(
            &DiscreteIFS::binary_halving(),
            &m0,
            0,
            &PrunePolicy::disabled(),
        )
        .unwrap();
        assert_eq!(tr.measures.len(), 1);
        assert_eq!(tv_distance(&tr.measures[0], &m0).unwrap(), 0.0);
    }

    #[test]
    fn identity_trace_constant() {
        let m0 = dirac(pt(0.5));
        let tr = evolve_exact(&identity_ifs(), &m0, 5, &PrunePolicy::disabled()).unwrap();
        for m in &tr.measures {
            assert_eq!(tv_distance(m, &m0).unwrap(), 0.0);
        }
    }

    #[test]
    fn halving_trace_is_uniform_dyadic() {
        let tr = evolve_exact(
            &DiscreteIFS::binary_halving(),
            &dirac(pt(0.0)),
            10,
            &PrunePolicy::disabled(),
        )
        .unwrap();
        for k in 0..=10usize {
            let m = &tr.measures[k];
            let count = 1usize << k;
            assert_eq!(m.support_size(), count);
            let w = 1.0 / count as f64;
            for (j, (p, wt)) in m.atoms().iter().enumerate() {
                assert_eq!(p.coords()[0], j as f64 / count as f64);
                assert!((wt - w).abs() <= 1e-15);
            }
            assert!((m.total_mass() - 1.0).abs() <= 1e-13);
        }
    }

    #[test]
    fn particle_deterministic_map() {
        let sys = Dynamics::Ifs(DiscreteIFS::new(
            vec![AffineMap::scalar(0.5, 0.0)],
            ProbabilityField::Constant { weights: vec![1.0] },
            MetricSpec::Euclidean,
        )
        .unwrap());
        let tr = evolve_particles(
            &sys,
            &Start::Point(pt(1.0)),
            4,
            16,
            SeedKey(3),
            RecordPolicy::All,
        )
        .unwrap();
        for (k, m) in tr.steps.iter().zip(&tr.measures) {
            assert_eq!(m.support_size(), 1);
            assert_eq!(m.atoms()[0].0.coords()[0], 0.5f64.powi(*k as i32));
        }
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let sys = Dynamics::Ifs(DiscreteIFS::binary_halving());
        let a = evolve_particles(
            &sys,
            &Start::Point(pt(0.0)),
            10,
            64,
            SeedKey(77),
            RecordPolicy::All,
        )
        .unwrap();
        let b = evolve_particles(
            &sys,
            &Start::Point(pt(0.0)),
            10,
            64,
            SeedKey(77),
            RecordPolicy::All,
        )
        .unwrap();
        for (ma, mb) in a.measures.iter().zip(&b.measures) {
            assert_eq!(tv_distance(ma, mb).unwrap(), 0.0);
        }
    }

    #[test]
    fn cesaro_base_cases() {
        let m1 = dirac(pt(0.0));
        let q = cesaro_average(std::slice::from_ref(&m1)).unwrap();
        assert_eq!(tv_distance(&q, &m1).unwrap(), 0.0);
        assert!(cesaro_average(&[]).is_err());
    }

    #[test]
    fn cesaro_linearity() {
        // Q_n commutes with mixtures along the exact path
        let half = DiscreteIFS::binary_halving();
        let a = dirac(pt(0.0));
        let b = dirac(pt(1.0));
        let mix = mixture(&[(0.3, a.clone()), (0.7, b.clone())]).unwrap();
        let n = 6;
        let qa = cesaro_average(&evolve_exact(&half, &a, n, &PrunePolicy::disabled()).unwrap().measures[1..]).unwrap();
        let qb = cesaro_average(&evolve_exact(&half, &b, n, &PrunePolicy::disabled()).unwrap().measures[1..]).unwrap();
        let qmix = cesaro_average(&evolve_exact(&half, &mix, n, &PrunePolicy::disabled()).unwrap().measures[1..]).unwrap();
        let recomposed = mixture(&[(0.3, qa), (0.7, qb)]).unwrap();
        assert!(tv_distance(&qmix, &recomposed).unwrap() <= 1e-12);
    }

    #[test]
    fn chain_cesaro_converges_to_stationary() {
        let c = two_state();
        let q = chain_cesaro(&c, &[1.0, 0.0], 5000).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() <= 1e-3);
        assert!((q[1] - 1.0 / 3.0).abs() <= 1e-3);
    }

    #[test]
    fn residual_identity_chain_zero() {
        let c = ExactChain::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cesaro_tv_residual(&c, 0, 100).unwrap(), 0.0);
    }

    #[test]
    fn residual_periodic_two_cycle() {
        // (1/n)(P^{n+1} - P) delta_z telescopes: 0 for even n, 2/n for odd
        let c = ExactChain::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        for n in [2usize, 10, 100] {
            assert!(cesaro_tv_residual(&c, 0, n).unwrap() <= 1e-15);
        }
        for n in [1usize, 9, 99] {
            let r = cesaro_tv_residual(&c, 0, n).unwrap();
            assert!((r - 2.0 / n as f64).abs() <= 1e-12, "n={n} r={r}");
        }
    }

    #[test]
    fn composed_cesaro_base_cases() {
        let c = two_state();
        let d = [0.4, 0.6];
        let plain = chain_cesaro(&c, &d, 50).unwrap();
        let composed = composed_cesaro(&c, &d, &[], 50).unwrap();
        assert_eq!(plain, composed);

        let id = ExactChain::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = composed_cesaro(&id, &d, &[3, 5], 10).unwrap();
        assert!(l1_diff(&out, &d) <= 1e-15);
    }

    #[test]
    fn vertex_gap_shrinks_with_t() {
        let c = two_state();
        let g100 = composed_cesaro_vertex_gap(&c, &[3, 5], 100).unwrap();
        let g10000 = composed_cesaro_vertex_gap(&c, &[3, 5], 10_000).unwrap();
        assert!(g10000 < g100, "gap {g10000} !< {g100}");
        // slope ~ 1/T
        assert!(g10000 <= g100 / 50.0);
    }
}
