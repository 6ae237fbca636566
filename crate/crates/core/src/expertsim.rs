//! Simulated experts whose beliefs are the objective plus a smooth random bias.
//!
//! The expert's utility is `g = f + delta`, with `delta` a zero-mean Gaussian
//! process draw under a squared-exponential kernel of lengthscale 0.1 on the
//! unit cube. `delta` is drawn jointly at the candidate-pool points, so the
//! expert can only be asked about pool points.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchError, Objective};
use crate::SeededRng;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("kernel matrix not positive definite even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },
    #[error("point {0:?} is not a pool anchor of this expert")]
    Lookup(Vec<f64>),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error(
        "target accuracy {target} unreachable: sigma {sigma_lo:e} gives {acc_lo:.4}, sigma {sigma_hi:e} gives {acc_hi:.4}"
    )]
    Calibration {
        target: f64,
        sigma_lo: f64,
        acc_lo: f64,
        sigma_hi: f64,
        acc_hi: f64,
    },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("calibration table: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExpertError>;

pub const DEFAULT_LENGTHSCALE: f64 = 0.1;
const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Simulated,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMetadata {
    pub kind: ExpertKind,
    pub target_accuracy: Option<f64>,
    pub sigma_delta: Option<f64>,
    pub seed: Option<u64>,
}

/// Anything that answers "is `x` at least as large as `x_prime`?".
pub trait ExpertOracle {
    fn answer(&mut self, x: &[f64], x_prime: &[f64]) -> Result<bool>;

    fn metadata(&self) -> ExpertMetadata;
}

/// Squared-exponential correlation `exp(-|a - b|^2 / (2 l^2))`.
pub fn se_kernel(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (lengthscale * lengthscale)).exp()
}

/// Lower Cholesky factor of `K + jitter I` for the unit-variance kernel,
/// escalating the jitter from 1e-8 up to 1e-4 as needed.
pub fn kernel_cholesky(points: &[Vec<f64>], lengthscale: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = points.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&points[i], &points[j], lengthscale));
    for &jitter in &JITTER_LADDER {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
    }
    Err(ExpertError::Conditioning {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// `delta` sampled jointly at the anchor points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDraw {
    pub anchors: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub lengthscale: f64,
    pub sigma_delta: f64,
    /// Diagonal jitter that made the factorization succeed.
    pub jitter: f64,
}

/// Draws `delta = sigma_delta * L z` with `L L^T = K + jitter I`.
pub fn gp_draw(points: &[Vec<f64>], lengthscale: f64, sigma_delta: f64, seed: u64) -> Result<GpDraw> {
    check_draw_args(points, lengthscale, sigma_delta)?;
    if sigma_delta == 0.0 {
        return Ok(GpDraw {
            anchors: points.to_vec(),
            values: vec![0.0; points.len()],
            lengthscale,
            sigma_delta,
            jitter: 0.0,
        });
    }
    let (chol, jitter) = kernel_cholesky(points, lengthscale)?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let unit = unit_draw(&chol, &mut rng);
    Ok(GpDraw {
        anchors: points.to_vec(),
        values: unit.iter().map(|v| sigma_delta * v).collect(),
        lengthscale,
        sigma_delta,
        jitter,
    })
}

fn check_draw_args(points: &[Vec<f64>], lengthscale: f64, sigma_delta: f64) -> Result<()> {
    if points.is_empty() {
        return Err(ExpertError::Domain("no anchor points".into()));
    }
    if !(lengthscale > 0.0) {
        return Err(ExpertError::Domain(format!("lengthscale must be positive, got {lengthscale}")));
    }
    if !(sigma_delta >= 0.0) || !sigma_delta.is_finite() {
        return Err(ExpertError::Domain(format!("sigma_delta must be finite and >= 0, got {sigma_delta}")));
    }
    Ok(())
}

fn unit_draw<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let n = chol.nrows();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (chol * z).iter().copied().collect()
}

fn point_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Expert answering from `g = f + delta` at pool anchors.
pub struct SimulatedExpert<F: Objective> {
    objective: F,
    draw: GpDraw,
    index: HashMap<Vec<u64>, usize>,
    /// `g` at every anchor, in native objective units.
    utilities: Vec<f64>,
    target_accuracy: Option<f64>,
    seed: Option<u64>,
}

impl<F: Objective> SimulatedExpert<F> {
    pub fn new(objective: F, draw: GpDraw) -> Result<Self> {
        let mut index = HashMap::with_capacity(draw.anchors.len());
        let mut utilities = Vec::with_capacity(draw.anchors.len());
        for (i, (a, d)) in draw.anchors.iter().zip(&draw.values).enumerate() {
            index.entry(point_key(a)).or_insert(i);
            utilities.push(objective.evaluate(a)? + d);
        }
        Ok(Self {
            objective,
            draw,
            index,
            utilities,
            target_accuracy: None,
            seed: None,
        })
    }

    /// Draws a fresh bias over `points` and wraps it.
    pub fn sample(
        objective: F,
        points: &[Vec<f64>],
        sigma_delta: f64,
        seed: u64,
        target_accuracy: Option<f64>,
    ) -> Result<Self> {
        let draw = gp_draw(points, DEFAULT_LENGTHSCALE, sigma_delta, seed)?;
        let mut expert = Self::new(objective, draw)?;
        expert.seed = Some(seed);
        expert.target_accuracy = target_accuracy;
        Ok(expert)
    }

    pub fn draw(&self) -> &GpDraw {
        &self.draw
    }

    pub fn objective(&self) -> &F {
        &self.objective
    }

    /// `g` at an anchor point.
    pub fn utility(&self, x: &[f64]) -> Result<f64> {
        self.index
            .get(&point_key(x))
            .map(|&i| self.utilities[i])
            .ok_or_else(|| ExpertError::Lookup(x.to_vec()))
    }

    /// Fraction of the given anchor-index pairs on which the expert's ordering
    /// agrees with the true objective.
    pub fn agreement(&self, pairs: &[(usize, usize)]) -> Result<f64> {
        let truth: Vec<f64> = self
            .draw
            .anchors
            .iter()
            .map(|a| self.objective.evaluate(a))
            .collect::<std::result::Result<_, _>>()?;
        let hits = pairs
            .iter()
            .filter(|&&(i, j)| (self.utilities[i] >= self.utilities[j]) == (truth[i] >= truth[j]))
            .count();
        Ok(hits as f64 / pairs.len().max(1) as f64)
    }
}

impl<F: Objective> ExpertOracle for SimulatedExpert<F> {
    fn answer(&mut self, x: &[f64], x_prime: &[f64]) -> Result<bool> {
        Ok(self.utility(x)? >= self.utility(x_prime)?)
    }

    fn metadata(&self) -> ExpertMetadata {
        ExpertMetadata {
            kind: ExpertKind::Simulated,
            target_accuracy: self.target_accuracy,
            sigma_delta: Some(self.draw.sigma_delta),
            seed: self.seed,
        }
    }
}

/// Settings for the accuracy calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub lengthscale: f64,
    pub draws: usize,
    pub pairs: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lengthscale: DEFAULT_LENGTHSCALE,
            draws: 200,
            pairs: 100_000,
            tolerance: 0.02,
            seed: 0,
        }
    }
}

/// Common random numbers for accuracy-versus-sigma evaluations: fixed unit
/// bias draws at the anchors and fixed anchor pairs. With these held fixed the
/// measured accuracy is non-increasing in sigma.
pub struct AgreementEstimator {
    truth: Vec<f64>,
    unit_draws: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
}

impl AgreementEstimator {
    pub fn new<F: Objective>(objective: &F, points: &[Vec<f64>], config: &CalibrationConfig) -> Result<Self> {
        if points.len() < 2 {
            return Err(ExpertError::Domain("need at least two anchor points".into()));
        }
        if config.draws == 0 || config.pairs == 0 {
            return Err(ExpertError::Domain("need at least one draw and one pair".into()));
        }
        check_draw_args(points, config.lengthscale, 1.0)?;
        let truth: Vec<f64> = points
            .iter()
            .map(|p| objective.evaluate(p))
            .collect::<std::result::Result<_, _>>()?;
        let (chol, _) = kernel_cholesky(points, config.lengthscale)?;
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let unit_draws = (0..config.draws).map(|_| unit_draw(&chol, &mut rng)).collect();
        let n = points.len();
        let pairs = (0..config.pairs)
            .map(|_| loop {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i != j {
                    break (i, j);
                }
            })
            .collect();
        Ok(Self {
            truth,
            unit_draws,
            pairs,
        })
    }

    /// Mean agreement over the fixed draws and pairs at scale `sigma`.
    pub fn accuracy(&self, sigma: f64) -> f64 {
        let mut hits = 0usize;
        for u in &self.unit_draws {
            for &(i, j) in &self.pairs {
                let (fi, fj) = (self.truth[i], self.truth[j]);
                let g = fi + sigma * u[i] >= fj + sigma * u[j];
                if g == (fi >= fj) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (self.unit_draws.len() * self.pairs.len()) as f64
    }

    /// Largest spread of the objective over the anchors.
    fn range(&self) -> f64 {
        let lo = self.truth.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    pub sigma_delta: f64,
    pub measured_accuracy: f64,
}

/// Bisection for the bias scale whose expected agreement with the objective
/// is within `config.tolerance` of `target`.
pub fn calibrate_sigma<F: Objective>(
    objective: &F,
    points: &[Vec<f64>],
    target: f64,
    config: &CalibrationConfig,
) -> Result<Calibration> {
    if !(0.5..1.0).contains(&target) {
        return Err(ExpertError::Domain(format!("target accuracy must lie in [0.5, 1), got {target}")));
    }
    let est = AgreementEstimator::new(objective, points, config)?;
    calibrate_with(&est, target, config.tolerance)
}

/// Bisection against a prepared estimator (lets sweeps share the draws).
pub fn calibrate_with(est: &AgreementEstimator, target: f64, tolerance: f64) -> Result<Calibration> {
    let scale = est.range().max(f64::MIN_POSITIVE);
    let mut lo = 0.0;
    let mut acc_lo = est.accuracy(lo);
    let mut hi = 1e-3 * scale;
    let mut acc_hi = est.accuracy(hi);
    let mut expansions = 0;
    while acc_hi > target && expansions < 60 {
        lo = hi;
        acc_lo = acc_hi;
        hi *= 2.0;
        acc_hi = est.accuracy(hi);
        expansions += 1;
    }
    let fail = |lo: f64, acc_lo: f64, hi: f64, acc_hi: f64| ExpertError::Calibration {
        target,
        sigma_lo: lo,
        acc_lo,
        sigma_hi: hi,
        acc_hi,
    };
    if acc_hi > target {
        // Even a dominating bias keeps agreement above the target.
        return if acc_hi - target <= tolerance {
            Ok(Calibration {
                target,
                sigma_delta: hi,
                measured_accuracy: acc_hi,
            })
        } else {
            Err(fail(lo, acc_lo, hi, acc_hi))
        };
    }
    // Invariant: acc(lo) > target >= acc(hi).
    for _ in 0..100 {
        let gap = (acc_lo - target).abs().min((acc_hi - target).abs());
        if gap <= tolerance / 4.0 || hi - lo <= 1e-12 * scale {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let acc_mid = est.accuracy(mid);
        if acc_mid > target {
            lo = mid;
            acc_lo = acc_mid;
        } else {
            hi = mid;
            acc_hi = acc_mid;
        }
    }
    let (sigma, acc) = if (acc_lo - target).abs() <= (acc_hi - target).abs() {
        (lo, acc_lo)
    } else {
        (hi, acc_hi)
    };
    if (acc - target).abs() <= tolerance {
        Ok(Calibration {
            target,
            sigma_delta: sigma,
            measured_accuracy: acc,
        })
    } else {
        Err(fail(lo, acc_lo, hi, acc_hi))
    }
}

/// One cached calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub benchmark: String,
    pub target: f64,
    pub sigma_delta: f64,
    pub measured_accuracy: f64,
    pub draws: usize,
    pub pairs: usize,
    pub lengthscale: f64,
    pub seed: u64,
}

/// CSV-backed cache of calibrations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    pub records: Vec<CalibrationRecord>,
}

impl CalibrationTable {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn lookup(&self, benchmark: &str, target: f64, config: &CalibrationConfig) -> Option<&CalibrationRecord> {
        self.records.iter().find(|r| {
            r.benchmark == benchmark
                && r.target == target
                && r.draws == config.draws
                && r.pairs == config.pairs
                && r.lengthscale == config.lengthscale
                && r.seed == config.seed
        })
    }

    /// Cached value, or a fresh calibration that is then recorded.
    pub fn get_or_calibrate<F: Objective>(
        &mut self,
        benchmark: &str,
        objective: &F,
        points: &[Vec<f64>],
        target: f64,
        config: &CalibrationConfig,
    ) -> Result<CalibrationRecord> {
        if let Some(r) = self.lookup(benchmark, target, config) {
            return Ok(r.clone());
        }
        let c = calibrate_sigma(objective, points, target, config)?;
        let record = CalibrationRecord {
            benchmark: benchmark.to_string(),
            target,
            sigma_delta: c.sigma_delta,
            measured_accuracy: c.measured_accuracy,
            draws: config.draws,
            pairs: config.pairs,
            lengthscale: config.lengthscale,
            seed: config.seed,
        };
        self.records.push(record.clone());
        Ok(record)
    }
}
