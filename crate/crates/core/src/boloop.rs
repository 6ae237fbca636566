//! Expert-augmented Bayesian optimization: elicitation with PBALD, then
//! expected-improvement acquisitions on the multi-task surrogate.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::active::{self, random_unasked, select_query, uniform_points, ActiveError, CandidatePool};
use crate::bench::{BenchError, Objective};
use crate::expertsim::{ExpertError, ExpertOracle};
use crate::mtl::{combined_weights, mtl_train_round, MtlConfig, MtlError, MtlModel};
use crate::pbnn::{ElicitationConfig, Pbnn, PbnnError, PreferenceDataset, PreferencePair};
use crate::varnet::EvalDataset;
use crate::{derive_seed, SeededRng};

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error(transparent)]
    Pbnn(#[from] PbnnError),
    #[error(transparent)]
    Mtl(#[from] MtlError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("history i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("history json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BoError>;

// Seed streams derived from the run seed.
const STREAM_POOL: u64 = 1;
const STREAM_ELICIT: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_ROUND: u64 = 1_000;

/// Anything that can draw joint posterior samples of the objective.
pub trait Surrogate {
    fn dim(&self) -> usize;

    /// `t` joint draws at `points` in native objective units; row `s` is draw `s`.
    fn sample_objective<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>>;
}

impl Surrogate for MtlModel {
    fn dim(&self) -> usize {
        MtlModel::dim(self)
    }

    fn sample_objective<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.sample_f_native(points, t, rng)?)
    }
}

/// Monte Carlo expected improvement `mean(max(y_best - s, 0))` over samples.
pub fn ei_from_samples(samples: &[f64], y_best: f64) -> f64 {
    samples.iter().map(|&s| (y_best - s).max(0.0)).sum::<f64>() / samples.len() as f64
}

/// Monte Carlo expected improvement at `x` with `t` posterior draws.
pub fn ei_mc<S: Surrogate, R: Rng + ?Sized>(
    model: &S,
    x: &[f64],
    y_best: f64,
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    if t == 0 {
        return Err(BoError::Domain("need at least one posterior draw".into()));
    }
    let draws = model.sample_objective(&[x.to_vec()], t, rng)?;
    let samples: Vec<f64> = draws.iter().map(|row| row[0]).collect();
    Ok(ei_from_samples(&samples, y_best))
}

/// Closed-form expected improvement for a Gaussian predictive `N(mu, s^2)`.
pub fn ei_analytic(mu: f64, s: f64, y_best: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(BoError::Domain(format!("predictive scale must be positive, got {s}")));
    }
    let n = Normal::standard();
    let gamma = (y_best - mu) / s;
    Ok(s * (gamma * n.cdf(gamma) + n.pdf(gamma)))
}

/// Result of one acquisition-function maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub index: usize,
    /// `None` when `y_best` is still infinite and the posterior-mean
    /// minimizer was taken instead.
    pub ei: Option<f64>,
}

/// Candidate with the largest Monte Carlo EI, all candidates scored with the
/// same `t` weight draws; ties go to the lowest index. While no objective
/// value is known (`y_best` infinite) this is the posterior-mean minimizer.
pub fn acquire_next<S: Surrogate, R: Rng + ?Sized>(
    model: &S,
    candidates: &[Vec<f64>],
    y_best: f64,
    t: usize,
    rng: &mut R,
) -> Result<Acquisition> {
    if candidates.is_empty() {
        return Err(BoError::Domain("empty candidate set".into()));
    }
    if t == 0 {
        return Err(BoError::Domain("need at least one posterior draw".into()));
    }
    if candidates.len() == 1 {
        return Ok(Acquisition { index: 0, ei: None });
    }
    let draws = model.sample_objective(candidates, t, rng)?;
    if y_best == f64::INFINITY {
        return Ok(Acquisition {
            index: argmin(&posterior_mean(&draws)),
            ei: None,
        });
    }
    let mut best = 0;
    let mut best_ei = f64::NEG_INFINITY;
    for c in 0..candidates.len() {
        let ei = draws.iter().map(|row| (y_best - row[c]).max(0.0)).sum::<f64>() / t as f64;
        if ei > best_ei {
            best_ei = ei;
            best = c;
        }
    }
    Ok(Acquisition {
        index: best,
        ei: Some(best_ei),
    })
}

fn posterior_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws[0].len();
    let mut mean = vec![0.0; n];
    for row in draws {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= draws.len() as f64);
    mean
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v < xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalKind {
    Acquisition,
    IncumbentAssessment,
}

/// One true objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub x: Vec<f64>,
    pub y: f64,
    pub kind: EvalKind,
}

fn evaluate<F: Objective + ?Sized>(f: &F, x: &[f64], kind: EvalKind) -> Result<EvalRecord> {
    let y = f.evaluate(x)?;
    if !y.is_finite() {
        return Err(BoError::Domain(format!("objective returned {y} at {x:?}")));
    }
    Ok(EvalRecord { x: x.to_vec(), y, kind })
}

/// Evaluates the objective at the posterior-mean minimizer over `candidates`
/// and folds the value into `y_best`.
pub fn update_incumbent<S: Surrogate, F: Objective + ?Sized, R: Rng + ?Sized>(
    model: &S,
    candidates: &[Vec<f64>],
    f: &F,
    y_best: f64,
    t: usize,
    rng: &mut R,
) -> Result<(f64, EvalRecord)> {
    if candidates.is_empty() {
        return Err(BoError::Domain("empty candidate set".into()));
    }
    if t == 0 {
        return Err(BoError::Domain("need at least one posterior draw".into()));
    }
    let draws = model.sample_objective(candidates, t, rng)?;
    let x = &candidates[argmin(&posterior_mean(&draws))];
    let record = evaluate(f, x, EvalKind::IncumbentAssessment)?;
    Ok((y_best.min(record.y), record))
}

/// Settings for a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub elicitation: ElicitationConfig,
    pub mtl: MtlConfig,
    pub pool_points: usize,
    pub pool_pairs: usize,
    pub pbald_samples: usize,
    pub candidates: usize,
    pub ei_samples: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            elicitation: ElicitationConfig::bo_stage(),
            mtl: MtlConfig::default(),
            pool_points: 2000,
            pool_pairs: 2000,
            pbald_samples: 100,
            candidates: 2000,
            ei_samples: 30,
        }
    }
}

impl BoConfig {
    /// The query pool for run `seed`; a simulated expert must be drawn over
    /// its points.
    pub fn pool(&self, d: usize, seed: u64) -> Result<CandidatePool> {
        Ok(active::build_pool(
            d,
            self.pool_points,
            self.pool_pairs,
            derive_seed(seed, STREAM_POOL),
        )?)
    }
}

/// One answered elicitation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationStep {
    pub round: usize,
    pub pair_index: usize,
    pub label: bool,
}

/// Incremental elicitation: pick a pool pair, record the answer, retrain.
#[derive(Debug, Clone)]
pub struct Elicitation {
    pub net: Pbnn,
    pub data: PreferenceDataset,
    pub asked: HashSet<usize>,
    pub steps: Vec<ElicitationStep>,
}

impl Elicitation {
    pub fn new(net: Pbnn) -> Self {
        let d = net.spec.in_width();
        Self {
            net,
            data: PreferenceDataset::new(d),
            asked: HashSet::new(),
            steps: Vec::new(),
        }
    }

    /// Random unasked pair for the first query, the PBALD maximizer after.
    pub fn next_query<R: Rng + ?Sized>(
        &self,
        pool: &CandidatePool,
        pbald_samples: usize,
        rng: &mut R,
    ) -> Result<usize> {
        if self.data.is_empty() {
            Ok(random_unasked(pool, &self.asked, rng)?)
        } else {
            Ok(select_query(&self.net, pool, &self.asked, pbald_samples, rng)?)
        }
    }

    /// Adds the answer for pool pair `k` and continues training.
    pub fn record<R: Rng + ?Sized>(
        &mut self,
        pool: &CandidatePool,
        k: usize,
        label: bool,
        rng: &mut R,
    ) -> Result<()> {
        if k >= pool.len() {
            return Err(BoError::Domain(format!("pair index {k} outside a pool of {}", pool.len())));
        }
        if self.asked.contains(&k) {
            return Err(BoError::Domain(format!("pair {k} was already asked")));
        }
        let (a, b) = pool.pair_points(k);
        self.data.push(PreferencePair::new(a.to_vec(), b.to_vec(), label)?)?;
        self.asked.insert(k);
        self.steps.push(ElicitationStep {
            round: self.steps.len(),
            pair_index: k,
            label,
        });
        self.net.train(&self.data, rng)?;
        Ok(())
    }

    /// Chooses a query, asks `expert`, records the answer.
    pub fn step<E: ExpertOracle + ?Sized, R: Rng + ?Sized>(
        &mut self,
        pool: &CandidatePool,
        expert: &mut E,
        pbald_samples: usize,
        rng: &mut R,
    ) -> Result<ElicitationStep> {
        let k = self.next_query(pool, pbald_samples, rng)?;
        let (a, b) = pool.pair_points(k);
        let label = expert.answer(a, b)?;
        self.record(pool, k, label, rng)?;
        Ok(self.steps[self.steps.len() - 1].clone())
    }
}

/// One optimization round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub j: usize,
    pub acquisition: EvalRecord,
    /// EI at the acquired point; absent in round 1.
    pub ei: Option<f64>,
    pub incumbent: EvalRecord,
    pub y_best: f64,
    pub weights: (f64, f64),
    pub round_seed: u64,
    pub final_loss: f64,
}

/// Everything a run produced, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoHistory {
    pub seed: u64,
    pub elicitation: Vec<ElicitationStep>,
    pub iterations: Vec<IterationRecord>,
}

/// `(seed, j, y_best)` row of the summary table with both evaluation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub j: usize,
    pub y_best: f64,
    pub acquisitions: usize,
    pub evaluations: usize,
}

impl BoHistory {
    pub fn y_best(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.y_best)
    }

    /// `y_best` after `j` acquisitions.
    pub fn y_best_at(&self, j: usize) -> Option<f64> {
        self.iterations.iter().find(|r| r.j == j).map(|r| r.y_best)
    }

    /// Every true objective evaluation in call order.
    pub fn evaluations(&self) -> Vec<&EvalRecord> {
        self.iterations
            .iter()
            .flat_map(|r| [&r.acquisition, &r.incumbent])
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.iterations
            .iter()
            .map(|r| SummaryRow {
                seed: self.seed,
                j: r.j,
                y_best: r.y_best,
                acquisitions: r.j,
                evaluations: 2 * r.j,
            })
            .collect()
    }

    /// One JSON object per optimization round.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.iterations {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(seed: u64, reader: R) -> Result<Self> {
        let mut iterations = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                iterations.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self {
            seed,
            elicitation: Vec::new(),
            iterations,
        })
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for row in self.summary() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone)]
pub struct BoRun {
    pub history: BoHistory,
    pub model: MtlModel,
    pub d_g: PreferenceDataset,
    pub d_f: EvalDataset,
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("run stopped after {} rounds: {error}", history.iterations.len())]
pub struct RunFailure {
    #[source]
    pub error: BoError,
    pub history: BoHistory,
}

fn fail(error: impl Into<BoError>, history: &BoHistory) -> Box<RunFailure> {
    Box::new(RunFailure {
        error: error.into(),
        history: history.clone(),
    })
}

/// Full run: `m` elicitation queries answered by `expert` over `pool`,
/// followed by `j_total` acquisitions. With `m == 0` the expert is never
/// asked and the surrogate is a fresh network trained on the objective alone.
pub fn run_algorithm1<F, E>(
    f: &F,
    expert: Option<&mut E>,
    pool: &CandidatePool,
    m: usize,
    j_total: usize,
    config: &BoConfig,
    seed: u64,
) -> std::result::Result<BoRun, Box<RunFailure>>
where
    F: Objective + ?Sized,
    E: ExpertOracle + ?Sized,
{
    let mut history = BoHistory {
        seed,
        ..BoHistory::default()
    };
    let d = f.dim();
    if pool.dim() != d {
        return Err(fail(
            BoError::Domain(format!("pool has d = {}, objective has d = {d}", pool.dim())),
            &history,
        ));
    }
    if m == 0 {
        let mut rng = SeededRng::seed_from_u64(derive_seed(seed, STREAM_INIT));
        let e = &config.elicitation;
        let model = MtlModel::fresh(d, &e.hidden, e.prior_sigma, e.init, &mut rng).map_err(|e| fail(e, &history))?;
        return run_bo_phase(f, model, PreferenceDataset::new(d), j_total, config, history);
    }
    let Some(expert) = expert else {
        return Err(fail(BoError::Domain("elicitation needs an expert".into()), &history));
    };
    let mut rng = SeededRng::seed_from_u64(derive_seed(seed, STREAM_ELICIT));
    let net = Pbnn::new(d, config.elicitation.clone(), &mut rng).map_err(|e| fail(e, &history))?;
    let mut el = Elicitation::new(net);
    // The initial random pair plus `m` actively chosen ones.
    for _ in 0..=m {
        if let Err(e) = el.step(pool, expert, config.pbald_samples, &mut rng) {
            history.elicitation = el.steps;
            return Err(fail(e, &history));
        }
    }
    history.elicitation = el.steps.clone();
    let model = MtlModel::from_pbnn(&el.net).map_err(|e| fail(e, &history))?;
    run_bo_phase(f, model, el.data, j_total, config, history)
}

/// Rebuilds an elicited network from a recorded answer log, retraining after
/// each answer in order as the live loop does.
pub fn replay_elicitation(d_g: &PreferenceDataset, config: &BoConfig, seed: u64) -> Result<Pbnn> {
    let mut rng = SeededRng::seed_from_u64(derive_seed(seed, STREAM_ELICIT));
    let mut net = Pbnn::new(d_g.dim(), config.elicitation.clone(), &mut rng)?;
    let mut prefix = PreferenceDataset::new(d_g.dim());
    for pair in d_g.pairs() {
        prefix.push(pair.clone())?;
        net.train(&prefix, &mut rng)?;
    }
    Ok(net)
}

/// Optimization run whose surrogate is elicited from a recorded answer log
/// rather than a live expert.
pub fn run_from_preferences<F: Objective + ?Sized>(
    f: &F,
    d_g: PreferenceDataset,
    j_total: usize,
    config: &BoConfig,
    seed: u64,
) -> std::result::Result<BoRun, Box<RunFailure>> {
    let history = BoHistory {
        seed,
        ..BoHistory::default()
    };
    if d_g.is_empty() {
        return Err(fail(BoError::Domain("the answer log is empty".into()), &history));
    }
    if d_g.dim() != f.dim() {
        return Err(fail(
            BoError::Domain(format!("answers have d = {}, objective has d = {}", d_g.dim(), f.dim())),
            &history,
        ));
    }
    let net = replay_elicitation(&d_g, config, seed).map_err(|e| fail(e, &history))?;
    let model = MtlModel::from_pbnn(&net).map_err(|e| fail(e, &history))?;
    run_bo_phase(f, model, d_g, j_total, config, history)
}

/// The optimization half of a run, starting from an elicited (or fresh)
/// surrogate. An empty `d_g` trains the objective head alone.
pub fn run_bo_phase<F: Objective + ?Sized>(
    f: &F,
    mut model: MtlModel,
    d_g: PreferenceDataset,
    j_total: usize,
    config: &BoConfig,
    mut history: BoHistory,
) -> std::result::Result<BoRun, Box<RunFailure>> {
    if j_total == 0 {
        return Err(fail(BoError::Domain("need at least one acquisition".into()), &history));
    }
    if model.dim() != f.dim() {
        return Err(fail(
            BoError::Domain(format!("model has d = {}, objective has d = {}", model.dim(), f.dim())),
            &history,
        ));
    }
    let expert_weighted = !d_g.is_empty();
    let base = model.clone();
    let mut d_f = EvalDataset::new();
    let mut y_best = f64::INFINITY;
    for j in 1..=j_total {
        let round_seed = derive_seed(history.seed, STREAM_ROUND + j as u64);
        let mut rng = SeededRng::seed_from_u64(round_seed);
        let round = (|| -> Result<IterationRecord> {
            let candidates = uniform_points(f.dim(), config.candidates, &mut rng);
            let acq = acquire_next(&model, &candidates, y_best, config.ei_samples, &mut rng)?;
            let acquisition = evaluate(f, &candidates[acq.index], EvalKind::Acquisition)?;
            d_f.push(acquisition.x.clone(), acquisition.y);
            y_best = y_best.min(acquisition.y);
            let weights = if expert_weighted {
                combined_weights(j, config.mtl.alpha)?
            } else {
                (0.0, 1.0)
            };
            if config.mtl.from_scratch {
                model = base.clone();
            }
            let report = mtl_train_round(&mut model, &d_g, &d_f, weights, &config.mtl, &mut rng)?;
            let (best, incumbent) = update_incumbent(&model, &candidates, f, y_best, config.ei_samples, &mut rng)?;
            y_best = best;
            Ok(IterationRecord {
                j,
                acquisition,
                ei: acq.ei,
                incumbent,
                y_best,
                weights,
                round_seed,
                final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            })
        })();
        match round {
            Ok(record) => history.iterations.push(record),
            Err(e) => return Err(fail(e, &history)),
        }
    }
    Ok(BoRun {
        history,
        model,
        d_g,
        d_f,
    })
}
