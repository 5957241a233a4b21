//! Points of the state space, the metric rho, and open balls B(z, eps).
//!
//! The state space is R^d with one of three metrics: euclidean,
//! chebyshev, or truncated euclidean rho'(x,y) = min(rho(x,y), cap).
//! Balls are open: membership is strict inequality on the distance.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A point of the state space R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    /// Rejects NaN/inf coordinates at construction.
    pub fn new(coords: Vec<f64>) -> Result<Point> {
        if coords.is_empty() {
            return Err(CoreError::Input("point must have dimension >= 1".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::Input(format!(
                "non-finite coordinate in point {coords:?}"
            )));
        }
        Ok(Point { coords })
    }

    pub fn scalar(x: f64) -> Result<Point> {
        Point::new(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Which metric realizes rho.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricSpec {
    Euclidean,
    Chebyshev,
    /// min(euclidean, cap); cap > 0.
    Truncated { cap: f64 },
}

impl MetricSpec {
    pub fn validate(&self) -> Result<()> {
        if let MetricSpec::Truncated { cap } = self {
            if !(*cap > 0.0) {
                return Err(CoreError::Input(format!(
                    "truncated metric requires cap > 0, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Open ball B(center, radius).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point, radius: f64) -> Result<Ball> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(CoreError::Input(format!(
                "ball radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Ball { center, radius })
    }
}

fn check_dims(p: &Point, q: &Point) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

/// rho(p, q) under the given metric.
pub fn distance(metric: &MetricSpec, p: &Point, q: &Point) -> Result<f64> {
    check_dims(p, q)?;
    let d = match metric {
        MetricSpec::Euclidean => euclidean(p, q),
        MetricSpec::Chebyshev => p
            .coords()
            .iter()
            .zip(q.coords())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        MetricSpec::Truncated { cap } => euclidean(p, q).min(*cap),
    };
    Ok(d)
}

fn euclidean(p: &Point, q: &Point) -> f64 {
    p.coords()
        .iter()
        .zip(q.coords())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Strict (open-ball) membership, bit-exact with `distance`.
pub fn in_ball(metric: &MetricSpec, ball: &Ball, p: &Point) -> Result<bool> {
    Ok(distance(metric, &ball.center, p)? < ball.radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(xs: &[f64]) -> Point {
        Point::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn three_four_five() {
        let d = distance(&MetricSpec::Euclidean, &pt(&[0.0, 0.0]), &pt(&[3.0, 4.0])).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn identity_is_zero() {
        let p = pt(&[1.5, -2.0, 0.25]);
        for m in [
            MetricSpec::Euclidean,
            MetricSpec::Chebyshev,
            MetricSpec::Truncated { cap: 2.0 },
        ] {
            assert_eq!(distance(&m, &p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn truncation_caps() {
        let d = distance(
            &MetricSpec::Truncated { cap: 2.0 },
            &pt(&[0.0]),
            &pt(&[7.0]),
        )
        .unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let e = distance(&MetricSpec::Euclidean, &pt(&[0.0]), &pt(&[0.0, 1.0]));
        assert!(matches!(e, Err(CoreError::DimensionMismatch { .. })));
    }

    #[test]
    fn nan_rejected_at_construction() {
        assert!(Point::new(vec![f64::NAN]).is_err());
        assert!(Point::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn open_ball_membership() {
        let b = Ball::new(pt(&[0.0]), 1.0).unwrap();
        let m = MetricSpec::Euclidean;
        assert!(in_ball(&m, &b, &pt(&[0.0])).unwrap());
        assert!(!in_ball(&m, &b, &pt(&[1.0])).unwrap());
        assert!(in_ball(&m, &b, &pt(&[0.999])).unwrap());
    }

    fn arb_point(d: usize) -> impl Strategy<Value = Point> {
        prop::collection::vec(-100.0f64..100.0, d).prop_map(|v| Point::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn metric_axioms(
            p in arb_point(3), q in arb_point(3), r in arb_point(3),
            which in 0usize..3,
        ) {
            let m = match which {
                0 => MetricSpec::Euclidean,
                1 => MetricSpec::Chebyshev,
                _ => MetricSpec::Truncated { cap: 5.0 },
            };
            let dpq = distance(&m, &p, &q).unwrap();
            let dqp = distance(&m, &q, &p).unwrap();
            let dpr = distance(&m, &p, &r).unwrap();
            let dqr = distance(&m, &q, &r).unwrap();
            prop_assert!((dpq - dqp).abs() <= 1e-12);
            prop_assert!(dpq <= dpr + dqr + 1e-12);
        }

        #[test]
        fn truncated_agrees_below_cap(p in arb_point(2), q in arb_point(2)) {
            let cap = 5.0;
            let base = distance(&MetricSpec::Euclidean, &p, &q).unwrap();
            let trunc = distance(&MetricSpec::Truncated { cap }, &p, &q).unwrap();
            prop_assert!(trunc <= cap);
            if base < cap {
                prop_assert_eq!(trunc, base);
            }
        }

        #[test]
        fn in_ball_consistent_with_distance(p in arb_point(2), c in arb_point(2), r in 0.1f64..50.0) {
            let m = MetricSpec::Euclidean;
            let b = Ball::new(c.clone(), r).unwrap();
            let inside = in_ball(&m, &b, &p).unwrap();
            prop_assert_eq!(inside, distance(&m, &c, &p).unwrap() < r);
        }
    }
}
