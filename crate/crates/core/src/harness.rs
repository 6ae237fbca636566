//! Experiment drivers and data ingestion.
//!
//! * [`ingest_csv`] and [`to_preferences`] turn a regression table into
//!   pairwise-comparison data.
//! * [`run_elicitation_experiment`] measures hold-out preference accuracy
//!   after a number of active queries.
//! * [`run_shape_experiment`] tracks how well the learned latent ranks the
//!   objective under noiseless answers.
//! * [`run_bo_experiment`] compares expert-augmented optimization against the
//!   plain network baseline on paired seeds.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{sample_pairs, uniform_points, ActiveError, CandidatePool};
use crate::bench::{BenchError, Benchmark, Objective};
use crate::boloop::{run_algorithm1, BoConfig, BoError, BoHistory, Elicitation};
use crate::expertsim::{
    CalibrationConfig, CalibrationTable, ExpertError, ExpertKind, ExpertMetadata, ExpertOracle, SimulatedExpert,
};
use crate::pbnn::{ElicitationConfig, Pbnn, PbnnError, PreferenceDataset, PreferencePair};
use crate::stats::MeanStd;
use crate::{derive_seed, SeededRng};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("target column {0:?} not found")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?}")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}, column {column:?}: value is not finite")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Pbnn(#[from] PbnnError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error("replication {replication}: {source}")]
    Run {
        replication: usize,
        #[source]
        source: Box<crate::boloop::RunFailure>,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-column affine map onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: f64,
    pub max: f64,
}

impl ColumnScale {
    pub fn scale(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }

    pub fn unscale(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Features scaled to the unit cube with their targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTable {
    pub columns: Vec<String>,
    pub target: String,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub scales: Vec<ColumnScale>,
    pub warnings: Vec<String>,
}

impl RegressionTable {
    /// Min-max scales raw feature rows. Constant columns map to 0.
    pub fn from_raw(columns: Vec<String>, target: String, raw: Vec<Vec<f64>>, targets: Vec<f64>) -> Self {
        let d = columns.len();
        let mut scales = vec![
            ColumnScale {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            };
            d
        ];
        for row in &raw {
            for (s, &v) in scales.iter_mut().zip(row) {
                s.min = s.min.min(v);
                s.max = s.max.max(v);
            }
        }
        let mut warnings = Vec::new();
        for (c, s) in columns.iter().zip(&scales) {
            if !raw.is_empty() && s.max == s.min {
                let msg = format!("column {c:?} is constant; scaled to 0");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let features = raw
            .iter()
            .map(|row| row.iter().zip(&scales).map(|(&v, s)| s.scale(v)).collect())
            .collect();
        Self {
            columns,
            target,
            features,
            targets,
            scales,
            warnings,
        }
    }

    /// Table of `rows` uniform unit-cube points labeled by `objective`.
    pub fn from_objective<F: Objective + ?Sized>(objective: &F, rows: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let features = uniform_points(objective.dim(), rows, &mut rng);
        let targets = features
            .iter()
            .map(|x| objective.evaluate(x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            columns: (0..objective.dim()).map(|i| format!("x{i}")).collect(),
            target: "y".into(),
            scales: vec![ColumnScale { min: 0.0, max: 1.0 }; objective.dim()],
            features,
            targets,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Maps a scaled feature row back to the original units.
    pub fn unscale(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.scales).map(|(&v, s)| s.unscale(v)).collect()
    }
}

/// Reads a headed CSV; every column other than `target` is a feature.
pub fn ingest_csv(path: &Path, target: &str) -> Result<RegressionTable> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_table(file, target)
}

/// [`ingest_csv`] over any reader. Row numbers count data rows from 1.
pub fn read_table<R: std::io::Read>(reader: R, target: &str) -> Result<RegressionTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let t_idx = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| HarnessError::MissingColumn(target.to_string()))?;
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut raw = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(HarnessError::Ragged {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let mut features = Vec::with_capacity(columns.len());
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| HarnessError::Parse {
                row,
                column: header[i].clone(),
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(HarnessError::NonFinite {
                    row,
                    column: header[i].clone(),
                });
            }
            if i == t_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
        raw.push(features);
    }
    Ok(RegressionTable::from_raw(columns, target.to_string(), raw, targets))
}

/// Disjoint training pool and hold-out pairs built from a table.
#[derive(Debug, Clone)]
pub struct PreferenceSplit {
    /// Table rows as points; pairs are the training queries.
    pub pool: CandidatePool,
    pub train: PreferenceDataset,
    pub test: PreferenceDataset,
}

fn labeled(table: &RegressionTable, i: usize, j: usize) -> Result<PreferencePair> {
    Ok(PreferencePair::new(
        table.features[i].clone(),
        table.features[j].clone(),
        table.targets[i] >= table.targets[j],
    )?)
}

/// Labels `y = 1` iff `target_i >= target_j`; the two pair sets are disjoint.
pub fn to_preferences(table: &RegressionTable, n_train: usize, n_test: usize, seed: u64) -> Result<PreferenceSplit> {
    if table.len() < 2 {
        return Err(HarnessError::Config("need at least two rows".into()));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut pairs = sample_pairs(table.len(), n_train + n_test, &mut rng)?;
    let test_idx = pairs.split_off(n_train);
    let d = table.dim();
    let mut train = PreferenceDataset::new(d);
    for &(i, j) in &pairs {
        train.push(labeled(table, i, j)?)?;
    }
    let mut test = PreferenceDataset::new(d);
    for &(i, j) in &test_idx {
        test.push(labeled(table, i, j)?)?;
    }
    let pool = CandidatePool::new(table.features.clone(), pairs, seed)?;
    Ok(PreferenceSplit { pool, train, test })
}

/// Number of answers agreeing with the objective's own ordering, where
/// `label == true` claims `f(x) >= f(x_prime)`.
pub fn answer_agreement<F: Objective + ?Sized>(f: &F, answers: &[PreferencePair]) -> Result<usize> {
    let mut hits = 0;
    for p in answers {
        if p.label == (f.evaluate(&p.x)? >= f.evaluate(&p.x_prime)?) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Expert that answers from a table's recorded targets.
pub struct TableExpert<'a> {
    table: &'a RegressionTable,
    index: HashMap<Vec<u64>, usize>,
}

impl<'a> TableExpert<'a> {
    pub fn new(table: &'a RegressionTable) -> Self {
        let mut index = HashMap::with_capacity(table.len());
        for (i, x) in table.features.iter().enumerate() {
            index.entry(x.iter().map(|v| v.to_bits()).collect()).or_insert(i);
        }
        Self { table, index }
    }

    fn target(&self, x: &[f64]) -> crate::expertsim::Result<f64> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        self.index
            .get(&key)
            .map(|&i| self.table.targets[i])
            .ok_or_else(|| ExpertError::Lookup(x.to_vec()))
    }
}

impl ExpertOracle for TableExpert<'_> {
    fn answer(&mut self, x: &[f64], x_prime: &[f64]) -> crate::expertsim::Result<bool> {
        Ok(self.target(x)? >= self.target(x_prime)?)
    }

    fn metadata(&self) -> ExpertMetadata {
        ExpertMetadata {
            kind: ExpertKind::Simulated,
            target_accuracy: Some(1.0),
            sigma_delta: Some(0.0),
            seed: None,
        }
    }
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Uniform points labeled by a registered benchmark.
    Benchmark { name: String, rows: usize },
    /// A headed CSV file.
    Csv { path: PathBuf, target: String },
}

impl Default for Source {
    fn default() -> Self {
        Source::Benchmark {
            name: "branin2d".into(),
            rows: 2000,
        }
    }
}

/// Everything that defines an experiment; missing TOML fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub replications: usize,
    /// Data for elicitation-accuracy runs.
    pub source: Source,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Query counts after which hold-out accuracy is recorded.
    pub budgets: Vec<usize>,
    pub pbald_samples: usize,
    pub predict_samples: usize,
    pub elicitation: ElicitationConfig,
    /// Objective for optimization runs.
    pub benchmark: String,
    /// Simulated-expert accuracies; each gets its own curve.
    pub expert_targets: Vec<f64>,
    /// Elicitation budgets for augmented runs.
    pub m: Vec<usize>,
    pub j: usize,
    pub baseline: bool,
    pub bo: BoConfig,
    pub calibration: CalibrationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            replications: 20,
            source: Source::default(),
            train_pairs: 2000,
            test_pairs: 1000,
            budgets: vec![50, 100],
            pbald_samples: 100,
            predict_samples: 100,
            elicitation: ElicitationConfig::accuracy_runs(),
            benchmark: "forrester1d".into(),
            expert_targets: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            m: vec![100],
            j: 50,
            baseline: true,
            bo: BoConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(HarnessError::Config("replications must be at least 1".into()));
        }
        if self.j == 0 {
            return Err(HarnessError::Config("j must be at least 1".into()));
        }
        if let Some(t) = self.expert_targets.iter().find(|t| !(0.5..1.0).contains(*t)) {
            return Err(HarnessError::Config(format!("expert target {t} outside [0.5, 1)")));
        }
        Ok(())
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, r as u64)
    }
}

/// Written next to every experiment's results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub calibrations: Vec<crate::expertsim::CalibrationRecord>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(manifest)?)
}

/// Hold-out accuracy of one replication after each budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub replication: usize,
    pub seed: u64,
    pub budget: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub budget: usize,
    pub mean: f64,
    pub std: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub summary: Vec<AccuracySummary>,
}

impl AccuracyTable {
    pub fn mean_at(&self, budget: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.budget == budget).map(|s| s.mean)
    }
}

fn load_table(source: &Source, seed: u64) -> Result<RegressionTable> {
    match source {
        Source::Benchmark { name, rows } => RegressionTable::from_objective(&Benchmark::by_name(name)?, *rows, seed),
        Source::Csv { path, target } => ingest_csv(path, target),
    }
}

/// Hold-out accuracy after each query budget, starting from one random pair.
pub fn run_elicitation_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<AccuracyTable> {
    config.validate()?;
    let mut budgets = config.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = budgets.last().copied().unwrap_or(0);
    let seeds: Vec<u64> = (0..config.replications).map(|r| config.replication_seed(r)).collect();
    if let Some(dir) = out {
        write_manifest(
            dir,
            &Manifest {
                kind: "elicitation".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: config.clone(),
                seeds: seeds.clone(),
                calibrations: Vec::new(),
            },
        )?;
    }
    let mut rows = Vec::new();
    for (r, &seed) in seeds.iter().enumerate() {
        let table = load_table(&config.source, derive_seed(seed, 1))?;
        let split = to_preferences(&table, config.train_pairs, config.test_pairs, derive_seed(seed, 2))?;
        let mut expert = TableExpert::new(&table);
        let mut rng = SeededRng::seed_from_u64(derive_seed(seed, 3));
        let net = Pbnn::new(table.dim(), config.elicitation.clone(), &mut rng)?;
        let mut el = Elicitation::new(net);
        let mut rep_rows = Vec::new();
        // The initial random pair is not counted against the budget.
        el.step(&split.pool, &mut expert, config.pbald_samples, &mut rng)?;
        for n in 0..=max_budget {
            if budgets.contains(&n) {
                let accuracy = el.net.accuracy(&split.test, config.predict_samples, &mut rng);
                rep_rows.push(AccuracyRow {
                    replication: r,
                    seed,
                    budget: n,
                    accuracy,
                });
            }
            if n < max_budget {
                el.step(&split.pool, &mut expert, config.pbald_samples, &mut rng)?;
            }
        }
        if let Some(dir) = out {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rep_rows {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
            write_atomic(&dir.join(format!("accuracy_rep{r:03}.csv")), &bytes)?;
        }
        rows.extend(rep_rows);
    }
    let summary: Vec<AccuracySummary> = budgets
        .iter()
        .map(|&b| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.budget == b).map(|r| r.accuracy).collect();
            let ms = MeanStd::of(&accs);
            AccuracySummary {
                budget: b,
                mean: ms.mean,
                std: ms.std,
                replications: accs.len(),
            }
        })
        .collect();
    let result = AccuracyTable { rows, summary };
    if let Some(dir) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &result.summary {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        write_atomic(&dir.join("summary.csv"), &bytes)?;
    }
    Ok(result)
}

/// Rank agreement between the learned latent and the true objective after a
/// number of noiseless queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub replication: usize,
    pub seed: u64,
    pub budget: usize,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub budget: usize,
    pub mean: f64,
    pub std: f64,
    /// Share of replications with rank correlation at least 0.9.
    pub recovered: f64,
    pub replications: usize,
}

/// Latent mean and spread on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCurveRow {
    pub budget: usize,
    pub point: usize,
    pub truth: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
    pub summary: Vec<ShapeSummary>,
}

impl ShapeTable {
    /// Share of replications reaching rank correlation 0.9 at `budget`.
    pub fn recovered_at(&self, budget: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.budget == budget).map(|s| s.recovered)
    }
}

/// Grid size for shape comparisons.
pub const SHAPE_GRID: usize = 200;

fn shape_grid(d: usize, seed: u64) -> Vec<Vec<f64>> {
    if d == 1 {
        (0..SHAPE_GRID).map(|i| vec![i as f64 / (SHAPE_GRID - 1) as f64]).collect()
    } else {
        uniform_points(d, SHAPE_GRID, &mut SeededRng::seed_from_u64(seed))
    }
}

/// Noiseless elicitation on `config.benchmark`: after each of
/// `config.budgets` active queries, the Spearman correlation between the
/// posterior-mean latent and the objective on an evaluation grid (evenly
/// spaced in 1-D, uniform otherwise).
pub fn run_shape_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ShapeTable> {
    config.validate()?;
    let f = Benchmark::by_name(&config.benchmark)?;
    let d = f.dim();
    let mut budgets = config.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = budgets.last().copied().unwrap_or(0);
    let seeds: Vec<u64> = (0..config.replications).map(|r| config.replication_seed(r)).collect();
    if let Some(dir) = out {
        write_manifest(
            dir,
            &Manifest {
                kind: "shape".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: config.clone(),
                seeds: seeds.clone(),
                calibrations: Vec::new(),
            },
        )?;
    }
    let mut rows = Vec::new();
    for (r, &seed) in seeds.iter().enumerate() {
        let grid = shape_grid(d, derive_seed(seed, 4));
        let truth = grid.iter().map(|x| f.evaluate(x)).collect::<std::result::Result<Vec<_>, _>>()?;
        let pool = crate::active::build_pool(d, config.bo.pool_points, config.bo.pool_pairs, derive_seed(seed, 1))?;
        let mut expert = SimulatedExpert::sample(f.clone(), pool.points(), 0.0, derive_seed(seed, 2), None)?;
        let mut rng = SeededRng::seed_from_u64(derive_seed(seed, 3));
        let net = Pbnn::new(d, config.elicitation.clone(), &mut rng)?;
        let mut el = Elicitation::new(net);
        let mut curve_rows = Vec::new();
        el.step(&pool, &mut expert, config.pbald_samples, &mut rng)?;
        for n in 0..=max_budget {
            if budgets.contains(&n) {
                let curve = el.net.latent_curve(&grid, config.predict_samples, &mut rng)?;
                let means: Vec<f64> = curve.iter().map(|s| s.mean).collect();
                rows.push(ShapeRow {
                    replication: r,
                    seed,
                    budget: n,
                    spearman: crate::stats::spearman(&means, &truth),
                });
                curve_rows.extend(curve.iter().zip(&truth).enumerate().map(|(i, (s, &t))| ShapeCurveRow {
                    budget: n,
                    point: i,
                    truth: t,
                    mean: s.mean,
                    std: s.std,
                }));
            }
            if n < max_budget {
                el.step(&pool, &mut expert, config.pbald_samples, &mut rng)?;
            }
        }
        if let Some(dir) = out {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &curve_rows {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
            write_atomic(&dir.join(format!("shape_rep{r:03}.csv")), &bytes)?;
        }
    }
    let summary = budgets
        .iter()
        .map(|&b| {
            let rhos: Vec<f64> = rows.iter().filter(|r| r.budget == b).map(|r| r.spearman).collect();
            let ms = MeanStd::of(&rhos);
            ShapeSummary {
                budget: b,
                mean: ms.mean,
                std: ms.std,
                recovered: rhos.iter().filter(|&&v| v >= 0.9).count() as f64 / rhos.len().max(1) as f64,
                replications: rhos.len(),
            }
        })
        .collect::<Vec<_>>();
    if let Some(dir) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &summary {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        write_atomic(&dir.join("summary.csv"), &bytes)?;
    }
    Ok(ShapeTable { rows, summary })
}

/// Identifies one arm of an optimization comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub m: usize,
    pub target: Option<f64>,
}

/// Mean and spread of `y_best` after each acquisition for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    pub j: usize,
    pub mean: f64,
    pub std: f64,
    pub replications: usize,
}

#[derive(Debug, Clone)]
pub struct BoExperimentResult {
    pub arms: Vec<Arm>,
    /// `histories[a][r]` is arm `a`, replication `r`.
    pub histories: Vec<Vec<BoHistory>>,
    pub curves: Vec<CurvePoint>,
    pub calibrations: Vec<crate::expertsim::CalibrationRecord>,
}

impl BoExperimentResult {
    pub fn arm(&self, label: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.label == label)
    }

    /// Mean `y_best` of an arm after `j` acquisitions.
    pub fn mean_at(&self, label: &str, j: usize) -> Option<f64> {
        self.curves.iter().find(|c| c.label == label && c.j == j).map(|c| c.mean)
    }
}

fn arms_of(config: &ExperimentConfig) -> Vec<Arm> {
    let mut arms = Vec::new();
    if config.baseline {
        arms.push(Arm {
            label: "BNN".into(),
            m: 0,
            target: None,
        });
    }
    for &t in &config.expert_targets {
        for &m in &config.m {
            let label = if config.m.len() > 1 {
                format!("PBNN-{:.0}%-M{m}", 100.0 * t)
            } else {
                format!("PBNN-{:.0}%", 100.0 * t)
            };
            arms.push(Arm {
                label,
                m,
                target: Some(t),
            });
        }
    }
    arms
}

/// Plain baseline plus one arm per (expert accuracy, elicitation budget). All
/// arms of a replication share its query pool and round seeds.
pub fn run_bo_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<BoExperimentResult> {
    config.validate()?;
    let f = Benchmark::by_name(&config.benchmark)?;
    let d = f.dim();
    let arms = arms_of(config);
    if arms.is_empty() {
        return Err(HarnessError::Config("no baseline and no expert targets".into()));
    }

    let mut table = CalibrationTable::default();
    let cache_path = out.map(|dir| dir.join("calibration.csv"));
    if let Some(p) = cache_path.as_ref().filter(|p| p.exists()) {
        table = CalibrationTable::read_csv(fs::File::open(p).map_err(io_err(p))?)?;
    }
    let mut sigmas = Vec::new();
    if !config.expert_targets.is_empty() {
        let mut rng = SeededRng::seed_from_u64(derive_seed(config.seed, 0xCA1));
        let points = uniform_points(d, config.bo.pool_points, &mut rng);
        for &t in &config.expert_targets {
            let rec = table.get_or_calibrate(&f.name, &f, &points, t, &config.calibration)?;
            sigmas.push(rec.sigma_delta);
        }
        if let Some(p) = &cache_path {
            fs::create_dir_all(out.unwrap()).map_err(io_err(p))?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            write_atomic(p, &buf)?;
        }
    }

    let seeds: Vec<u64> = (0..config.replications).map(|r| config.replication_seed(r)).collect();
    if let Some(dir) = out {
        write_manifest(
            dir,
            &Manifest {
                kind: "bo".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: config.clone(),
                seeds: seeds.clone(),
                calibrations: table.records.clone(),
            },
        )?;
        fs::create_dir_all(dir.join("histories")).map_err(io_err(dir))?;
    }

    let mut histories: Vec<Vec<BoHistory>> = vec![Vec::new(); arms.len()];
    for (r, &seed) in seeds.iter().enumerate() {
        let pool = config.bo.pool(d, seed)?;
        for (a, arm) in arms.iter().enumerate() {
            let run = match arm.target {
                None => run_algorithm1::<_, dyn ExpertOracle>(&f, None, &pool, 0, config.j, &config.bo, seed),
                Some(t) => {
                    let k = config.expert_targets.iter().position(|&x| x == t).unwrap_or(0);
                    let mut expert =
                        SimulatedExpert::sample(f.clone(), pool.points(), sigmas[k], derive_seed(seed, 0xE0), Some(t))?;
                    run_algorithm1(&f, Some(&mut expert), &pool, arm.m, config.j, &config.bo, seed)
                }
            };
            let history = match run {
                Ok(run) => run.history,
                Err(failure) => {
                    if let Some(dir) = out {
                        let mut buf = Vec::new();
                        failure.history.write_jsonl(&mut buf)?;
                        write_atomic(&dir.join("histories").join(format!("{}_rep{r:03}.partial.jsonl", arm.label)), &buf)?;
                    }
                    return Err(HarnessError::Run {
                        replication: r,
                        source: failure,
                    });
                }
            };
            if let Some(dir) = out {
                let mut buf = Vec::new();
                history.write_jsonl(&mut buf)?;
                write_atomic(&dir.join("histories").join(format!("{}_rep{r:03}.jsonl", arm.label)), &buf)?;
            }
            histories[a].push(history);
        }
    }

    let mut curves = Vec::new();
    for (arm, hs) in arms.iter().zip(&histories) {
        for j in 1..=config.j {
            let ys: Vec<f64> = hs.iter().filter_map(|h| h.y_best_at(j)).collect();
            let ms = MeanStd::of(&ys);
            curves.push(CurvePoint {
                label: arm.label.clone(),
                j,
                mean: ms.mean,
                std: ms.std,
                replications: ys.len(),
            });
        }
    }
    if let Some(dir) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &curves {
            w.serialize(c)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        write_atomic(&dir.join("curves.csv"), &bytes)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "seed", "j", "y_best", "acquisitions", "evaluations"])?;
        for (arm, hs) in arms.iter().zip(&histories) {
            for h in hs {
                for row in h.summary() {
                    w.write_record([
                        arm.label.clone(),
                        row.seed.to_string(),
                        row.j.to_string(),
                        row.y_best.to_string(),
                        row.acquisitions.to_string(),
                        row.evaluations.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        write_atomic(&dir.join("summary.csv"), &bytes)?;
    }
    Ok(BoExperimentResult {
        arms,
        histories,
        curves,
        calibrations: table.records,
    })
}
