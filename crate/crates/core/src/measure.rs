//! Finite-support probability measures and the exact measure algebra the
//! coupling constructions manipulate: mixtures, pushforwards, restriction
//! to a ball, total variation, and integration <phi, mu>.
//!
//! Atom identity uses a fixed tolerance: points whose coordinates agree
//! within 1e-12 are the same atom. Exact-identity tests use dyadic
//! rational coordinates so the tolerance never creates ambiguity.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{CoreError, Result};
use crate::geometry::{distance, in_ball, Ball, MetricSpec, Point};
use crate::util::{pairwise_sum, pairwise_sum_by};

/// Coordinate tolerance under which two support points are one atom.
pub const ATOM_TOL: f64 = 1e-12;

/// Drift threshold beyond which the weight sum is renormalized.
const NORM_REPAIR_TOL: f64 = 1e-12;

/// Slack allowed on the weight sum at construction.
const NORM_INPUT_TOL: f64 = 1e-9;

/// A probability measure with finite support: a list of (point, weight)
/// atoms in canonical order (lexicographic by coordinates, merged).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteMeasure {
    dim: usize,
    atoms: Vec<(Point, f64)>,
}

fn cmp_coords(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).expect("finite coords") {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn same_atom(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= ATOM_TOL)
}

impl FiniteMeasure {
    /// Builds a measure from raw atoms: merges duplicate support points,
    /// drops zero weights, checks nonnegativity and total mass 1 (within
    /// 1e-9), and repairs rounding drift by renormalizing.
    pub fn from_atoms(atoms: Vec<(Point, f64)>) -> Result<FiniteMeasure> {
        if atoms.is_empty() {
            return Err(CoreError::Degenerate("measure with no atoms".into()));
        }
        let dim = atoms[0].0.dim();
        for (p, w) in &atoms {
            if p.dim() != dim {
                return Err(CoreError::DimensionMismatch {
                    expected: dim,
                    got: p.dim(),
                });
            }
            if !w.is_finite() || *w < -NORM_INPUT_TOL {
                return Err(CoreError::Input(format!("invalid atom weight {w}")));
            }
        }
        let total = pairwise_sum_by(atoms.len(), |i| atoms[i].1);
        if (total - 1.0).abs() > NORM_INPUT_TOL {
            return Err(CoreError::Input(format!(
                "atom weights sum to {total}, expected 1"
            )));
        }
        let mut m = FiniteMeasure { dim, atoms };
        m.canonicalize();
        if m.atoms.is_empty() {
            return Err(CoreError::Degenerate("all atoms had zero weight".into()));
        }
        Ok(m)
    }

    /// Internal constructor for callers that already guarantee mass 1
    /// up to rounding (dual steps, mixtures). Skips the input checks.
    pub(crate) fn from_atoms_unchecked(dim: usize, atoms: Vec<(Point, f64)>) -> FiniteMeasure {
        let mut m = FiniteMeasure { dim, atoms };
        m.canonicalize();
        m
    }

    fn canonicalize(&mut self) {
        self.atoms
            .sort_by(|a, b| cmp_coords(a.0.coords(), b.0.coords()));
        let mut merged: Vec<(Point, f64)> = Vec::with_capacity(self.atoms.len());
        for (p, w) in self.atoms.drain(..) {
            let w = if w < 0.0 { 0.0 } else { w }; // clamp -1e-18 style residue
            match merged.last_mut() {
                Some((q, wq)) if same_atom(q.coords(), p.coords()) => *wq += w,
                _ => merged.push((p, w)),
            }
        }
        merged.retain(|(_, w)| *w > 0.0);
        self.atoms = merged;
        let total = pairwise_sum_by(self.atoms.len(), |i| self.atoms[i].1);
        if total > 0.0 && (total - 1.0).abs() > NORM_REPAIR_TOL {
            for (_, w) in &mut self.atoms {
                *w /= total;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[(Point, f64)] {
        &self.atoms
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum_by(self.atoms.len(), |i| self.atoms[i].1)
    }

    /// Mass inside an open ball.
    pub fn ball_mass(&self, metric: &MetricSpec, ball: &Ball) -> Result<f64> {
        let mut hits = Vec::new();
        for (p, w) in &self.atoms {
            if in_ball(metric, ball, p)? {
                hits.push(*w);
            }
        }
        Ok(pairwise_sum(&hits))
    }

    /// Mean of the i-th coordinate (unclipped; test oracle helper).
    pub fn coordinate_mean(&self, i: usize) -> f64 {
        pairwise_sum_by(self.atoms.len(), |j| {
            self.atoms[j].1 * self.atoms[j].0.coords()[i]
        })
    }

    /// Checks the type invariants; used by tests after operation chains.
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(CoreError::Degenerate("empty measure".into()));
        }
        for (p, w) in &self.atoms {
            if p.dim() != self.dim || !w.is_finite() || *w < 0.0 {
                return Err(CoreError::Input("invalid atom".into()));
            }
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > NORM_INPUT_TOL {
            return Err(CoreError::Input(format!("mass {total} != 1")));
        }
        for pair in self.atoms.windows(2) {
            if same_atom(pair[0].0.coords(), pair[1].0.coords()) {
                return Err(CoreError::Input("duplicate support point".into()));
            }
        }
        Ok(())
    }
}

/// Bounded test functions: |f| <= 1 everywhere, with a computable
/// Lipschitz constant where the form admits one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// x -> max(0, 1 - rho(x, center)/scale); Lipschitz 1/scale.
    Tent { center: Point, scale: f64 },
    /// x -> clamp(x_i, lo, hi) with [lo, hi] inside [-1, 1]; Lipschitz 1.
    ClippedCoordinate { index: usize, lo: f64, hi: f64 },
    /// x -> clamp(poly(x_0), -clip, clip) with clip <= 1.
    ClippedPolynomial { coeffs: Vec<f64>, clip: f64 },
}

impl TestFunction {
    pub fn constant(c: f64) -> TestFunction {
        TestFunction::ClippedPolynomial {
            coeffs: vec![c],
            clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TestFunction::Tent { scale, .. } => {
                if !(*scale > 0.0) {
                    return Err(CoreError::Input("tent scale must be positive".into()));
                }
            }
            TestFunction::ClippedCoordinate { lo, hi, .. } => {
                if !(lo <= hi && *lo >= -1.0 && *hi <= 1.0) {
                    return Err(CoreError::Input(
                        "clipped coordinate needs -1 <= lo <= hi <= 1".into(),
                    ));
                }
            }
            TestFunction::ClippedPolynomial { clip, .. } => {
                if !(*clip > 0.0 && *clip <= 1.0) {
                    return Err(CoreError::Input("clip bound must be in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, metric: &MetricSpec, x: &Point) -> Result<f64> {
        let v = match self {
            TestFunction::Tent { center, scale } => {
                let d = distance(metric, center, x)?;
                (1.0 - d / scale).max(0.0)
            }
            TestFunction::ClippedCoordinate { index, lo, hi } => {
                let c = *x.coords().get(*index).ok_or_else(|| {
                    CoreError::Input(format!("coordinate index {index} out of range"))
                })?;
                c.clamp(*lo, *hi)
            }
            TestFunction::ClippedPolynomial { coeffs, clip } => {
                let t = x.coords()[0];
                let mut acc = 0.0;
                for c in coeffs.iter().rev() {
                    acc = acc * t + c;
                }
                acc.clamp(-clip, *clip)
            }
        };
        Ok(v)
    }

    /// Global Lipschitz constant where computable from the parameters.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match self {
            TestFunction::Tent { scale, .. } => Some(1.0 / scale),
            TestFunction::ClippedCoordinate { .. } => Some(1.0),
            TestFunction::ClippedPolynomial { .. } => None,
        }
    }
}

/// Point mass at p.
pub fn dirac(p: Point) -> FiniteMeasure {
    let dim = p.dim();
    FiniteMeasure::from_atoms_unchecked(dim, vec![(p, 1.0)])
}

/// Convex combination of measures: sum of coef * m over the terms.
pub fn mixture(terms: &[(f64, FiniteMeasure)]) -> Result<FiniteMeasure> {
    if terms.is_empty() {
        return Err(CoreError::Input("mixture of zero terms".into()));
    }
    let dim = terms[0].1.dim();
    let coef_sum = pairwise_sum_by(terms.len(), |i| terms[i].0);
    if (coef_sum - 1.0).abs() > NORM_INPUT_TOL {
        return Err(CoreError::Input(format!(
            "mixture coefficients sum to {coef_sum}, expected 1"
        )));
    }
    let mut atoms = Vec::new();
    for (c, m) in terms {
        if *c < 0.0 {
            return Err(CoreError::Input("negative mixture coefficient".into()));
        }
        if m.dim() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
        for (p, w) in m.atoms() {
            atoms.push((p.clone(), c * w));
        }
    }
    Ok(FiniteMeasure::from_atoms_unchecked(dim, atoms))
}

/// Image measure under a point map; total mass is preserved exactly,
/// colliding images merge.
pub fn pushforward<F>(m: &FiniteMeasure, map: F) -> Result<FiniteMeasure>
where
    F: Fn(&Point) -> Result<Point>,
{
    let mut atoms = Vec::with_capacity(m.support_size());
    for (p, w) in m.atoms() {
        let q = map(p)?;
        if q.coords().iter().any(|c| !c.is_finite()) {
            return Err(CoreError::Numeric(format!(
                "pushforward produced non-finite point from {:?}",
                p.coords()
            )));
        }
        atoms.push((q, *w));
    }
    Ok(FiniteMeasure::from_atoms_unchecked(m.dim(), atoms))
}

/// Conditional restriction to an open ball: returns (mass, normalized
/// restriction). Zero mass is signaled by `None`, not an error.
pub fn restrict_normalize(
    m: &FiniteMeasure,
    ball: &Ball,
    metric: &MetricSpec,
) -> Result<(f64, Option<FiniteMeasure>)> {
    let mut inside = Vec::new();
    for (p, w) in m.atoms() {
        if in_ball(metric, ball, p)? {
            inside.push((p.clone(), *w));
        }
    }
    let mass = pairwise_sum_by(inside.len(), |i| inside[i].1);
    if mass <= 0.0 {
        return Ok((0.0, None));
    }
    for (_, w) in &mut inside {
        *w /= mass;
    }
    Ok((mass, Some(FiniteMeasure::from_atoms_unchecked(m.dim(), inside))))
}

/// Total variation distance as the sum over the union support of
/// absolute weight differences. Range [0, 2].
pub fn tv_distance(m1: &FiniteMeasure, m2: &FiniteMeasure) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: m1.dim(),
            got: m2.dim(),
        });
    }
    let a = m1.atoms();
    let b = m2.atoms();
    let mut terms = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if same_atom(a[i].0.coords(), b[j].0.coords()) {
            terms.push((a[i].1 - b[j].1).abs());
            i += 1;
            j += 1;
        } else if cmp_coords(a[i].0.coords(), b[j].0.coords()) == Ordering::Less {
            terms.push(a[i].1);
            i += 1;
        } else {
            terms.push(b[j].1);
            j += 1;
        }
    }
    terms.extend(a[i..].iter().map(|(_, w)| *w));
    terms.extend(b[j..].iter().map(|(_, w)| *w));
    Ok(pairwise_sum(&terms))
}

/// <f, m> = sum of w_j f(x_j).
pub fn integrate(m: &FiniteMeasure, f: &TestFunction, metric: &MetricSpec) -> Result<f64> {
    let vals: Result<Vec<f64>> = m
        .atoms()
        .iter()
        .map(|(p, w)| Ok(w * f.eval(metric, p)?))
        .collect();
    Ok(pairwise_sum(&vals?))
}

/// What prune removed and how far the merge moved mass.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PruneReport {
    /// Mass dropped below the floor; TV deviation is at most twice this.
    pub dropped_mass: f64,
    /// Mass moved times maximum displacement: a bound on the
    /// Lipschitz-metric (FM) slack introduced by merging.
    pub merge_slack: f64,
}

/// Greedy support reduction: atoms within `merge_radius` of a heavier
/// atom are absorbed into a mass-weighted centroid (descending weight
/// order, ties broken by lexicographic coordinates), then atoms below
/// `mass_floor` are dropped and the rest renormalized.
pub fn prune(
    m: &FiniteMeasure,
    mass_floor: f64,
    merge_radius: f64,
    metric: &MetricSpec,
) -> Result<(FiniteMeasure, PruneReport)> {
    if !(0.0..=1e-6).contains(&mass_floor) {
        return Err(CoreError::Input(format!(
            "mass_floor must be in [0, 1e-6], got {mass_floor}"
        )));
    }
    if merge_radius < 0.0 {
        return Err(CoreError::Input("merge_radius must be >= 0".into()));
    }
    if mass_floor == 0.0 && merge_radius == 0.0 {
        return Ok((m.clone(), PruneReport::default()));
    }

    // Descending weight, lexicographic tie-break: deterministic.
    let mut order: Vec<usize> = (0..m.support_size()).collect();
    order.sort_by(|&i, &j| {
        let (pi, wi) = &m.atoms()[i];
        let (pj, wj) = &m.atoms()[j];
        wj.partial_cmp(wi)
            .unwrap()
            .then_with(|| cmp_coords(pi.coords(), pj.coords()))
    });

    let mut used = vec![false; m.support_size()];
    let mut clusters: Vec<(Point, f64)> = Vec::new();
    let mut merge_slack = 0.0;
    for &i in &order {
        if used[i] {
            continue;
        }
        used[i] = true;
        let (seed, w0) = &m.atoms()[i];
        let mut total = *w0;
        let mut centroid: Vec<f64> = seed.coords().iter().map(|c| c * w0).collect();
        if merge_radius > 0.0 {
            for &j in &order {
                if used[j] {
                    continue;
                }
                let (p, w) = &m.atoms()[j];
                let d = distance(metric, seed, p)?;
                if d <= merge_radius {
                    used[j] = true;
                    total += w;
                    for (c, x) in centroid.iter_mut().zip(p.coords()) {
                        *c += x * w;
                    }
                    merge_slack += w * d;
                }
            }
        }
        let pt = Point::new(centroid.iter().map(|c| c / total).collect())?;
        clusters.push((pt, total));
    }

    let mut dropped = 0.0;
    clusters.retain(|(_, w)| {
        if *w < mass_floor {
            dropped += *w;
            false
        } else {
            true
        }
    });
    if clusters.is_empty() {
        return Err(CoreError::Degenerate(
            "prune removed all mass (total below floor)".into(),
        ));
    }
    let kept = pairwise_sum_by(clusters.len(), |i| clusters[i].1);
    for (_, w) in &mut clusters {
        *w /= kept;
    }
    let out = FiniteMeasure::from_atoms_unchecked(m.dim(), clusters);
    Ok((
        out,
        PruneReport {
            dropped_mass: dropped,
            merge_slack,
        },
    ))
}
