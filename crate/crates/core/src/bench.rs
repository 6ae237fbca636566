//! Benchmark objectives and the affine map between their native boxes and
//! the unit cube.
//!
//! All learning, pool construction and acquisition happen in `[0, 1]^d`;
//! native coordinates are only used to evaluate the objective and for
//! display.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("{name}: point {point:?} outside the domain")]
    Domain { name: String, point: Vec<f64> },
    #[error("{name}: expected {expected} coordinates, got {got}")]
    Dimension {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown benchmark '{0}'")]
    Unknown(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

// Slack for round-off when mapping back from the unit cube.
const DOMAIN_SLACK: f64 = 1e-9;

fn check_box(name: &str, point: &[f64], bounds: &[(f64, f64)]) -> Result<()> {
    if point.len() != bounds.len() {
        return Err(BenchError::Dimension {
            name: name.into(),
            expected: bounds.len(),
            got: point.len(),
        });
    }
    let inside = point.iter().zip(bounds).all(|(&v, &(lo, hi))| {
        let slack = DOMAIN_SLACK * (hi - lo);
        v >= lo - slack && v <= hi + slack
    });
    if inside {
        Ok(())
    } else {
        Err(BenchError::Domain {
            name: name.into(),
            point: point.to_vec(),
        })
    }
}

/// `(6x - 2)^2 sin(12x - 4)` on `[0, 1]`.
pub fn forrester(x: f64) -> Result<f64> {
    check_box("forrester", &[x], &[(0.0, 1.0)])?;
    Ok((6.0 * x - 2.0).powi(2) * (12.0 * x - 4.0).sin())
}

/// Branin-Hoo on `[-5, 10] x [0, 15]`.
pub fn branin(x1: f64, x2: f64) -> Result<f64> {
    check_box("branin", &[x1, x2], &[(-5.0, 10.0), (0.0, 15.0)])?;
    Ok(branin_unchecked(x1, x2))
}

fn branin_unchecked(x1: f64, x2: f64) -> f64 {
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

fn six_hump_unchecked(x1: f64, x2: f64) -> f64 {
    let x1sq = x1 * x1;
    (4.0 - 2.1 * x1sq + x1sq * x1sq / 3.0) * x1sq + x1 * x2 + (-4.0 + 4.0 * x2 * x2) * x2 * x2
}

/// Six-hump camel on the optimization box `[-3, 3] x [-2, 2]`.
pub fn six_hump_camel(x1: f64, x2: f64) -> Result<f64> {
    check_box("six_hump_camel", &[x1, x2], &[(-3.0, 3.0), (-2.0, 2.0)])?;
    Ok(six_hump_unchecked(x1, x2))
}

/// Three-hump camel on `[-2, 2]^2`.
pub fn three_hump_camel(x1: f64, x2: f64) -> Result<f64> {
    check_box("three_hump_camel", &[x1, x2], &[(-2.0, 2.0), (-2.0, 2.0)])?;
    Ok(three_hump_unchecked(x1, x2))
}

fn three_hump_unchecked(x1: f64, x2: f64) -> f64 {
    let x1sq = x1 * x1;
    2.0 * x1sq - 1.05 * x1sq * x1sq + x1sq.powi(3) / 6.0 + x1 * x2 + x2 * x2
}

/// Levy function on `[-2, 2]^d`.
pub fn levy(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(BenchError::Dimension {
            name: "levy".into(),
            expected: 1,
            got: 0,
        });
    }
    check_box("levy", x, &vec![(-2.0, 2.0); x.len()])?;
    Ok(levy_unchecked(x))
}

fn levy_unchecked(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|&v| 1.0 + (v - 1.0) / 4.0).collect();
    let d = w.len();
    let mut total = (PI * w[0]).sin().powi(2);
    for &wi in &w[..d - 1] {
        total += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    let wd = w[d - 1];
    total + (wd - 1.0).powi(2) * (1.0 + (2.0 * PI * wd).sin().powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchKind {
    Forrester,
    Branin,
    SixHumpCamel,
    ThreeHumpCamel,
    Levy,
}

/// A named objective with its native box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub kind: BenchKind,
    pub bounds: Vec<(f64, f64)>,
    /// Known global minimizers (native coordinates) and the minimum value.
    pub minimizers: Vec<Vec<f64>>,
    pub minimum: f64,
}

/// Objective evaluated on unit-cube points.
pub trait Objective {
    fn dim(&self) -> usize;

    fn evaluate(&self, u: &[f64]) -> Result<f64>;
}

impl Benchmark {
    pub fn forrester1d() -> Self {
        Self {
            name: "forrester1d".into(),
            kind: BenchKind::Forrester,
            bounds: vec![(0.0, 1.0)],
            minimizers: vec![vec![0.757_248_758_523_3]],
            minimum: -6.020_740_055_767_082,
        }
    }

    pub fn branin2d() -> Self {
        Self {
            name: "branin2d".into(),
            kind: BenchKind::Branin,
            bounds: vec![(-5.0, 10.0), (0.0, 15.0)],
            minimizers: vec![
                vec![-PI, 12.275],
                vec![PI, 2.275],
                vec![9.424_777_960_769_38, 2.475],
            ],
            minimum: 0.397_887_357_729_738_2,
        }
    }

    /// Six-hump camel on the optimization box `[-3, 3] x [-2, 2]`.
    pub fn camel6_2d() -> Self {
        Self {
            name: "camel6_2d".into(),
            kind: BenchKind::SixHumpCamel,
            bounds: vec![(-3.0, 3.0), (-2.0, 2.0)],
            minimizers: vec![
                vec![0.089_842_011_817_429, -0.712_656_405_622_467],
                vec![-0.089_842_011_817_429, 0.712_656_405_622_467],
            ],
            minimum: -1.031_628_453_489_877,
        }
    }

    /// Six-hump camel on the smaller display box `[-2, 2] x [-1, 1]`.
    pub fn camel6_2d_display() -> Self {
        Self {
            name: "camel6_2d_display".into(),
            bounds: vec![(-2.0, 2.0), (-1.0, 1.0)],
            ..Self::camel6_2d()
        }
    }

    pub fn camel3_2d() -> Self {
        Self {
            name: "camel3_2d".into(),
            kind: BenchKind::ThreeHumpCamel,
            bounds: vec![(-2.0, 2.0), (-2.0, 2.0)],
            minimizers: vec![vec![0.0, 0.0]],
            minimum: 0.0,
        }
    }

    pub fn levy(d: usize) -> Self {
        Self {
            name: format!("levy{d}d"),
            kind: BenchKind::Levy,
            bounds: vec![(-2.0, 2.0); d],
            minimizers: vec![vec![1.0; d]],
            minimum: 0.0,
        }
    }

    /// Looks a benchmark up by its registry name (`forrester1d`, `branin2d`,
    /// `camel6_2d`, `camel6_2d_display`, `camel3_2d`, `levy10d`, `levy<d>d`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "forrester1d" => Ok(Self::forrester1d()),
            "branin2d" => Ok(Self::branin2d()),
            "camel6_2d" => Ok(Self::camel6_2d()),
            "camel6_2d_display" => Ok(Self::camel6_2d_display()),
            "camel3_2d" => Ok(Self::camel3_2d()),
            other => other
                .strip_prefix("levy")
                .and_then(|rest| rest.strip_suffix('d'))
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&d| d >= 1)
                .map(Self::levy)
                .ok_or_else(|| BenchError::Unknown(other.into())),
        }
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "forrester1d",
            "branin2d",
            "camel6_2d",
            "camel6_2d_display",
            "camel3_2d",
            "levy10d",
        ]
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Evaluates at a native-domain point.
    pub fn evaluate_native(&self, x: &[f64]) -> Result<f64> {
        check_box(&self.name, x, &self.bounds)?;
        Ok(match self.kind {
            BenchKind::Forrester => (6.0 * x[0] - 2.0).powi(2) * (12.0 * x[0] - 4.0).sin(),
            BenchKind::Branin => branin_unchecked(x[0], x[1]),
            BenchKind::SixHumpCamel => six_hump_unchecked(x[0], x[1]),
            BenchKind::ThreeHumpCamel => three_hump_unchecked(x[0], x[1]),
            BenchKind::Levy => levy_unchecked(x),
        })
    }

    /// `lo + u * (hi - lo)` per coordinate.
    pub fn to_native(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_unit(u)?;
        Ok(u.iter()
            .zip(&self.bounds)
            .map(|(&v, &(lo, hi))| lo + v * (hi - lo))
            .collect())
    }

    pub fn from_native(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_box(&self.name, x, &self.bounds)?;
        Ok(x.iter()
            .zip(&self.bounds)
            .map(|(&v, &(lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect())
    }

    fn check_unit(&self, u: &[f64]) -> Result<()> {
        check_box(&self.name, u, &vec![(0.0, 1.0); self.dim()])
    }
}

impl Objective for Benchmark {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn evaluate(&self, u: &[f64]) -> Result<f64> {
        self.evaluate_native(&self.to_native(u)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense grid followed by golden-section refinement around the best cell.
    fn grid_minimum_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
        let n = 100_000;
        let (mut best_x, mut best) = (lo, f(lo));
        for i in 0..=n {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            let v = f(x);
            if v < best {
                best = v;
                best_x = x;
            }
        }
        let h = (hi - lo) / n as f64;
        let (mut a, mut b) = ((best_x - h).max(lo), (best_x + h).min(hi));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let x = 0.5 * (a + b);
        (x, f(x))
    }

    #[test]
    fn forrester_values() {
        assert!(forrester(1.0 / 3.0).unwrap().abs() < 1e-14);
        assert_relative_eq!(forrester(0.0).unwrap(), 4.0 * (-4f64).sin(), epsilon = 1e-14);
        assert_relative_eq!(forrester(0.0).unwrap(), 3.0272, epsilon = 1e-4);
        let (x, v) = grid_minimum_1d(|x| forrester(x).unwrap(), 0.0, 1.0);
        assert_relative_eq!(x, 0.7572, epsilon = 1e-4);
        assert_relative_eq!(v, -6.0207, epsilon = 1e-4);
        let b = Benchmark::forrester1d();
        assert_relative_eq!(b.minimum, v, epsilon = 1e-10);
        assert_relative_eq!(b.minimizers[0][0], x, epsilon = 1e-6);
        assert!(forrester(1.5).is_err());
    }

    /// Branin written out independently of the benchmark implementation.
    fn branin_reference(x1: f64, x2: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let inner = x2 - 5.1 * x1 * x1 / (4.0 * pi * pi) + 5.0 * x1 / pi - 6.0;
        inner * inner + 10.0 * (1.0 - 1.0 / (8.0 * pi)) * x1.cos() + 10.0
    }

    #[test]
    fn branin_values() {
        let b = Benchmark::branin2d();
        for m in &b.minimizers {
            assert_relative_eq!(branin(m[0], m[1]).unwrap(), 0.3979, epsilon = 1e-4);
            assert_relative_eq!(branin(m[0], m[1]).unwrap(), b.minimum, epsilon = 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x1 = rng.random_range(-5.0..10.0);
            let x2 = rng.random_range(0.0..15.0);
            assert_relative_eq!(branin(x1, x2).unwrap(), branin_reference(x1, x2), max_relative = 1e-12);
        }
        assert!(branin(-6.0, 1.0).is_err());
    }

    #[test]
    fn six_hump_values() {
        assert_eq!(six_hump_camel(0.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(six_hump_camel(0.0898, -0.7126).unwrap(), -1.0316, epsilon = 1e-4);
        assert_relative_eq!(
            six_hump_camel(0.3, -1.1).unwrap(),
            six_hump_camel(-0.3, 1.1).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn three_hump_values() {
        assert_eq!(three_hump_camel(0.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(three_hump_camel(1.0, 1.0).unwrap(), 3.116_666_666_666_667, epsilon = 1e-12);
        assert_relative_eq!(
            three_hump_camel(0.7, -1.2).unwrap(),
            three_hump_camel(-0.7, 1.2).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn levy_values() {
        assert!(levy(&[1.0; 10]).unwrap().abs() < 1e-14);
        assert!(matches!(levy(&[-3.0]), Err(BenchError::Domain { .. })));
        // w = (0.75, 0.75)
        let w: f64 = 0.75;
        let expected = (PI * w).sin().powi(2)
            + (w - 1.0).powi(2) * (1.0 + 10.0 * (PI * w + 1.0).sin().powi(2))
            + (w - 1.0).powi(2) * (1.0 + (2.0 * PI * w).sin().powi(2));
        assert_relative_eq!(levy(&[0.0, 0.0]).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(expected, 0.5 + 0.0625 * (1.0 + 10.0 * (0.75 * PI + 1.0).sin().powi(2)) + 0.125, epsilon = 1e-12);
    }

    #[test]
    fn listed_minimizers_beat_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in Benchmark::names() {
            let b = Benchmark::by_name(name).unwrap();
            let best = b
                .minimizers
                .iter()
                .map(|m| b.evaluate_native(m).unwrap())
                .fold(f64::INFINITY, f64::min);
            for _ in 0..10_000 {
                let u: Vec<f64> = (0..b.dim()).map(|_| rng.random()).collect();
                assert!(best <= b.evaluate(&u).unwrap() + 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn registry_and_corners() {
        assert_eq!(Benchmark::by_name("levy10d").unwrap().dim(), 10);
        assert_eq!(Benchmark::by_name("levy3d").unwrap().dim(), 3);
        assert!(Benchmark::by_name("rosenbrock").is_err());
        let b = Benchmark::branin2d();
        assert_eq!(b.to_native(&[0.0, 0.0]).unwrap(), vec![-5.0, 0.0]);
        assert_eq!(b.to_native(&[1.0, 1.0]).unwrap(), vec![10.0, 15.0]);
        assert!(b.to_native(&[1.2, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_round_trip(u1 in 0.0f64..=1.0, u2 in 0.0f64..=1.0) {
            for b in [Benchmark::branin2d(), Benchmark::camel6_2d(), Benchmark::camel3_2d()] {
                let back = b.from_native(&b.to_native(&[u1, u2]).unwrap()).unwrap();
                prop_assert!((back[0] - u1).abs() < 1e-12 && (back[1] - u2).abs() < 1e-12);
            }
        }
    }
}
