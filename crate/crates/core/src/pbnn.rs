//! Preferential Bayesian neural network.
//!
//! A Siamese network: both points of a query go through the same weights,
//! and the preference probability is the sigmoid of the difference of the two
//! scalar outputs,
//!
//! ```text
//! p(y = 1 | x, x', w) = sigmoid(g(x; w) - g(x'; w))
//! ```
//!
//! The scalar output is read as the expert's latent utility. Only its order
//! is identified by pairwise labels, so every quality measure in this module
//! is rank-based.

use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{NetError, NetSpec, Tape};
use crate::varnet::{
    self, bbb_step, elbo_with_noise, sigmoid, CosineAnnealing, ElboEstimate, KlReduction, PosteriorInit,
    SampledObjective, VarError, VariationalAdam, VariationalParams,
};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PbnnError {
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("empty preference dataset")]
    EmptyDataset,
    #[error("dimension mismatch: dataset has d = {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {detail}")]
    CsvRow { row: usize, detail: String },
    #[error(transparent)]
    Var(#[from] VarError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, PbnnError>;

/// One answered comparison. `label == true` encodes `y = 1`, i.e. the
/// expert judged `g(x) >= g(x_prime)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub label: bool,
}

impl PreferencePair {
    pub fn new(x: Vec<f64>, x_prime: Vec<f64>, label: bool) -> Result<Self> {
        if x.len() != x_prime.len() {
            return Err(PbnnError::InvalidPair(format!(
                "points have dimensions {} and {}",
                x.len(),
                x_prime.len()
            )));
        }
        if x == x_prime {
            return Err(PbnnError::InvalidPair("identical points".into()));
        }
        if let Some(v) = x.iter().chain(&x_prime).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PbnnError::InvalidPair(format!(
                "coordinate {v} outside the unit cube"
            )));
        }
        Ok(Self { x, x_prime, label })
    }

    /// The same comparison stated the other way round.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.x_prime.clone(),
            x_prime: self.x.clone(),
            label: !self.label,
        }
    }

    pub fn target(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    d: usize,
    pairs: Vec<PreferencePair>,
}

impl PreferenceDataset {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            pairs: Vec::new(),
        }
    }

    pub fn from_pairs(d: usize, pairs: Vec<PreferencePair>) -> Result<Self> {
        let mut ds = Self::new(d);
        for p in pairs {
            ds.push(p)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, pair: PreferencePair) -> Result<()> {
        if pair.x.len() != self.d {
            return Err(PbnnError::Dimension {
                expected: self.d,
                got: pair.x.len(),
            });
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `x_1..x_d, xp_1..xp_d, label` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.d).map(|i| format!("x_{i}")).collect();
        header.extend((1..=self.d).map(|i| format!("xp_{i}")));
        header.push("label".into());
        w.write_record(&header)?;
        for p in &self.pairs {
            let mut rec: Vec<String> = p.x.iter().chain(&p.x_prime).map(|v| v.to_string()).collect();
            rec.push(if p.label { "1" } else { "0" }.into());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r.headers()?.len();
        if width < 3 || width % 2 == 0 {
            return Err(PbnnError::CsvRow {
                row: 0,
                detail: format!("expected 2d + 1 columns, found {width}"),
            });
        }
        let d = (width - 1) / 2;
        let mut ds = Self::new(d);
        for (i, rec) in r.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            let values: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let values = values.map_err(|e| PbnnError::CsvRow {
                row,
                detail: e.to_string(),
            })?;
            let label = match values[2 * d] {
                1.0 => true,
                0.0 => false,
                v => {
                    return Err(PbnnError::CsvRow {
                        row,
                        detail: format!("label must be 0 or 1, got {v}"),
                    })
                }
            };
            let pair = PreferencePair::new(values[..d].to_vec(), values[d..2 * d].to_vec(), label)
                .map_err(|e| PbnnError::CsvRow {
                    row,
                    detail: e.to_string(),
                })?;
            ds.push(pair)?;
        }
        Ok(ds)
    }
}

/// `sigmoid(latent_a - latent_b)`: probability that the first point is preferred.
#[inline]
pub fn connection(latent_a: f64, latent_b: f64) -> f64 {
    sigmoid(latent_a - latent_b)
}

/// Clamped binary cross-entropy of one prediction and its derivative with
/// respect to the latent difference.
#[inline]
fn bce_point(p: f64, target: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let nll = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    let slope = if pc == p { p - target } else { 0.0 };
    (nll, slope)
}

/// Negative log-likelihood of the labels under concrete weights.
pub fn preference_nll(spec: &NetSpec, params: &[f64], data: &PreferenceDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(PbnnError::EmptyDataset);
    }
    let mut total = 0.0;
    for pair in data.pairs() {
        let p = connection(spec.forward(params, &pair.x)?, spec.forward(params, &pair.x_prime)?);
        total += bce_point(p, pair.target()).0;
    }
    Ok(total)
}

/// Minibatch preference likelihood for a network whose scalar output is the
/// latent utility.
pub struct PreferenceObjective<'a> {
    spec: &'a NetSpec,
    batch: Vec<&'a PreferencePair>,
    kl: Vec<(Range<usize>, f64)>,
    tape: Tape,
    tape_prime: Tape,
}

impl<'a> PreferenceObjective<'a> {
    pub fn new(spec: &'a NetSpec, batch: Vec<&'a PreferencePair>, kl_scale: f64) -> Self {
        Self {
            kl: vec![(0..spec.param_count(), kl_scale)],
            spec,
            batch,
            tape: Tape::new(),
            tape_prime: Tape::new(),
        }
    }
}

impl SampledObjective for PreferenceObjective<'_> {
    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn nll_grad(&mut self, weights: &[f64], grad: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for pair in &self.batch {
            self.spec.forward_tape(weights, &pair.x, &mut self.tape);
            let a = self.tape.output()[0];
            self.spec.forward_tape(weights, &pair.x_prime, &mut self.tape_prime);
            let b = self.tape_prime.output()[0];
            let (nll, slope) = bce_point(connection(a, b), pair.target());
            total += nll;
            if slope != 0.0 {
                self.spec.backward_tape(weights, &mut self.tape, &[slope], grad);
                self.spec.backward_tape(weights, &mut self.tape_prime, &[-slope], grad);
            }
        }
        total
    }

    fn kl_weights(&self) -> Vec<(Range<usize>, f64)> {
        self.kl.clone()
    }
}

/// Negative ELBO on a minibatch with frozen noise draws: `kl_scale * KL` plus
/// the mean over draws of the preference NLL.
pub fn elicit_elbo_loss(
    vp: &VariationalParams,
    spec: &NetSpec,
    batch: &[PreferencePair],
    noises: &[Vec<f64>],
    kl_scale: f64,
) -> Result<ElboEstimate> {
    let mut obj = PreferenceObjective::new(spec, batch.iter().collect(), kl_scale);
    Ok(elbo_with_noise(vp, &mut obj, noises)?)
}

/// Training settings for the elicitation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElicitationConfig {
    /// Hidden widths (tanh); a scalar identity head is appended.
    pub hidden: Vec<usize>,
    pub prior_sigma: f64,
    pub init: PosteriorInit,
    pub lr: f64,
    /// Floor of the cosine schedule; `None` keeps the learning rate constant.
    pub lr_min: Option<f64>,
    pub schedule_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    /// Multiplier on the KL term of the negative ELBO.
    pub kl_weight: f64,
    pub kl_reduction: KlReduction,
}

impl Default for ElicitationConfig {
    fn default() -> Self {
        Self::accuracy_runs()
    }
}

impl ElicitationConfig {
    /// Settings for stand-alone preference-accuracy runs: widths [100, 10],
    /// batch 2, 20 epochs per acquisition.
    pub fn accuracy_runs() -> Self {
        Self {
            hidden: vec![100, 10],
            prior_sigma: 0.1,
            init: PosteriorInit::default(),
            lr: 1e-3,
            lr_min: Some(1e-4),
            schedule_period: 20,
            epochs: 20,
            batch_size: 2,
            mc_samples: 1,
            kl_weight: 1.0,
            kl_reduction: KlReduction::Mean,
        }
    }

    /// Settings for the elicitation stage preceding optimization: the shared
    /// trunk [100, 30, 15], batch 10, 100 epochs per acquisition.
    pub fn bo_stage() -> Self {
        Self {
            hidden: vec![100, 30, 15],
            epochs: 100,
            batch_size: 10,
            ..Self::accuracy_runs()
        }
    }

    fn schedule(&self) -> Option<CosineAnnealing> {
        self.lr_min.map(|lr_min| CosineAnnealing {
            lr_max: self.lr,
            lr_min,
            period: self.schedule_period.max(1),
        })
    }
}

/// Anything that can draw posterior samples of the latent utility.
pub trait LatentSampler {
    fn dim(&self) -> usize;

    /// `t` joint posterior draws of the latent at `points`; row `s` holds the
    /// latents under weight sample `s`.
    fn sample_latents<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Vec<Vec<f64>>;
}

/// Draws `t` weight vectors and evaluates `spec` on all `points` for each.
pub fn batched_latents<R: Rng + ?Sized>(
    spec: &NetSpec,
    vp: &VariationalParams,
    points: &[Vec<f64>],
    t: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let n = points.len();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    (0..t)
        .map(|_| {
            let w = vp.draw(rng);
            spec.forward_batch(&w, &flat, n).expect("points match the network input")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub mean: f64,
    pub std: f64,
}

/// Per-point Monte Carlo mean and (population) standard deviation.
pub fn summarize_draws(draws: &[Vec<f64>]) -> Vec<LatentSummary> {
    let t = draws.len() as f64;
    let n = draws.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mean = draws.iter().map(|row| row[i]).sum::<f64>() / t;
            let var = draws.iter().map(|row| (row[i] - mean).powi(2)).sum::<f64>() / t;
            LatentSummary {
                mean,
                std: var.max(0.0).sqrt(),
            }
        })
        .collect()
}

/// The Siamese Bayesian network together with its optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pbnn {
    pub spec: NetSpec,
    pub vp: VariationalParams,
    pub config: ElicitationConfig,
    optimizer: VariationalAdam,
    iterations: usize,
}

/// Loss trace of one training call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch sums of the minibatch negative-ELBO estimates.
    pub epoch_losses: Vec<f64>,
}

impl Pbnn {
    pub fn new<R: Rng + ?Sized>(d: usize, config: ElicitationConfig, rng: &mut R) -> Result<Self> {
        let spec = NetSpec::mlp(d, &config.hidden)?;
        let vp = VariationalParams::init(spec.param_count(), config.prior_sigma, config.init, rng);
        Ok(Self::from_parts(spec, vp, config))
    }

    pub fn from_parts(spec: NetSpec, vp: VariationalParams, config: ElicitationConfig) -> Self {
        let optimizer = VariationalAdam::new(vp.len());
        Self {
            spec,
            vp,
            config,
            optimizer,
            iterations: 0,
        }
    }

    /// Total optimizer steps taken so far.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Runs `config.epochs` epochs of Bayes-by-Backprop on `data`, continuing
    /// from the current posterior. Minibatches are reshuffled every epoch and
    /// each carries `kl_weight * batch / |data|` of the KL.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &PreferenceDataset,
        rng: &mut R,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(PbnnError::EmptyDataset);
        }
        if data.dim() != self.spec.in_width() {
            return Err(PbnnError::Dimension {
                expected: self.spec.in_width(),
                got: data.dim(),
            });
        }
        let n = data.len();
        let schedule = self.config.schedule();
        let mut order: Vec<usize> = (0..n).collect();
        let mut report = TrainReport::default();
        for epoch in 0..self.config.epochs {
            let lr = schedule.map_or(self.config.lr, |s| s.lr(epoch));
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &data.pairs()[i]).collect();
                let kl_scale = self.config.kl_weight
                    * self.config.kl_reduction.factor(self.vp.len())
                    * chunk.len() as f64
                    / n as f64;
                let mut obj = PreferenceObjective::new(&self.spec, batch, kl_scale);
                let est = bbb_step(
                    &mut self.vp,
                    &mut obj,
                    &mut self.optimizer,
                    lr,
                    self.config.mc_samples,
                    self.iterations,
                    rng,
                )?;
                self.iterations += 1;
                epoch_loss += est.loss;
            }
            report.epoch_losses.push(epoch_loss);
        }
        Ok(report)
    }

    /// Posterior mean and standard deviation of the latent at every grid point.
    pub fn latent_curve<R: Rng + ?Sized>(
        &self,
        grid: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<LatentSummary>> {
        if grid.is_empty() {
            return Err(PbnnError::EmptyDataset);
        }
        if let Some(p) = grid.iter().find(|p| p.len() != self.spec.in_width()) {
            return Err(PbnnError::Dimension {
                expected: self.spec.in_width(),
                got: p.len(),
            });
        }
        Ok(summarize_draws(&self.sample_latents(grid, t.max(1), rng)))
    }

    /// Monte Carlo predictive probability `p(y = 1)` for each pair.
    pub fn predict_proba<R: Rng + ?Sized>(
        &self,
        pairs: &[PreferencePair],
        t: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let points: Vec<Vec<f64>> = pairs
            .iter()
            .flat_map(|p| [p.x.clone(), p.x_prime.clone()])
            .collect();
        let draws = self.sample_latents(&points, t, rng);
        (0..pairs.len())
            .map(|i| {
                draws
                    .iter()
                    .map(|row| connection(row[2 * i], row[2 * i + 1]))
                    .sum::<f64>()
                    / t as f64
            })
            .collect()
    }

    /// Fraction of pairs whose predictive probability falls on the side of
    /// the observed label (`p >= 0.5` predicts `y = 1`).
    pub fn accuracy<R: Rng + ?Sized>(
        &self,
        data: &PreferenceDataset,
        t: usize,
        rng: &mut R,
    ) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let probs = self.predict_proba(data.pairs(), t, rng);
        let hits = probs
            .iter()
            .zip(data.pairs())
            .filter(|(&p, pair)| (p >= 0.5) == pair.label)
            .count();
        hits as f64 / data.len() as f64
    }

    pub fn checkpoint(&self) -> varnet::Result<varnet::Checkpoint> {
        let mut ckpt = varnet::Checkpoint::new(vec![("pbnn".into(), self.spec.clone())], self.vp.clone())?;
        ckpt.config = serde_json::to_value(&self.config)?;
        Ok(ckpt)
    }
}

impl LatentSampler for Pbnn {
    fn dim(&self) -> usize {
        self.spec.in_width()
    }

    fn sample_latents<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Vec<Vec<f64>> {
        batched_latents(&self.spec, &self.vp, points, t, rng)
    }
}
