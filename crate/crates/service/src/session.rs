//! Session state machine and its journal.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use prefbo_core::active::{build_pool, CandidatePool};
use prefbo_core::bench::Benchmark;
use prefbo_core::boloop::{BoConfig, Elicitation};
use prefbo_core::harness::answer_agreement;
use prefbo_core::pbnn::{Pbnn, PreferenceDataset, PreferencePair};
use prefbo_core::{derive_seed, rng_for, SeededRng};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::SCHEMA_VERSION;

const STREAM_POOL: u64 = 1;
const STREAM_ELICIT: u64 = 2;
const STREAM_MODEL_GRID: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Memorize,
    Question,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Memorize => "memorize",
            Phase::Question => "question",
            Phase::Done => "done",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
}

/// Journal entry; one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Created {
        schema: u32,
        id: String,
        benchmark: String,
        budget: usize,
        seed: u64,
        created_ms: u64,
        deadline_ms: u64,
    },
    Phase {
        phase: Phase,
        at_ms: u64,
    },
    Asked {
        round: usize,
        pair_index: usize,
    },
    Answered {
        round: usize,
        pair_index: usize,
        choice: Choice,
        correct: bool,
    },
    BoStarted {
        handle: String,
        runs: usize,
        iterations: usize,
    },
}

/// Dense native-coordinate grid; `values[iy][ix]` belongs to `(xs[ix], ys[iy])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

fn unit_axis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Native x axis, native y axis, and unit-cube points in `values[iy][ix]` order.
type GridPoints = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

fn grid_points(benchmark: &Benchmark, n: usize) -> Result<GridPoints> {
    let axis = unit_axis(n);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for &u in &axis {
        xs.push(benchmark.to_native(&[u, 0.0])?[0]);
        ys.push(benchmark.to_native(&[0.0, u])?[1]);
    }
    let points = axis
        .iter()
        .flat_map(|&v| axis.iter().map(move |&u| vec![u, v]))
        .collect();
    Ok((xs, ys, points))
}

fn reshape(values: Vec<f64>, n: usize) -> Vec<Vec<f64>> {
    values.chunks(n).map(<[f64]>::to_vec).collect()
}

pub fn function_grid(benchmark: &Benchmark, n: usize) -> Result<Grid> {
    let (xs, ys, _) = grid_points(benchmark, n)?;
    let values = ys
        .iter()
        .map(|&y| xs.iter().map(|&x| benchmark.evaluate_native(&[x, y])).collect())
        .collect::<std::result::Result<_, _>>()?;
    Ok(Grid { xs, ys, values })
}

/// Session settings fixed at creation.
#[derive(Debug, Clone)]
pub struct SessionParams {
    pub id: String,
    pub benchmark: Benchmark,
    pub budget: usize,
    pub seed: u64,
    pub created_ms: u64,
    pub deadline_ms: u64,
}

/// Append-only journal file.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn create(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|source| ServiceError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    pub fn reopen(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| ServiceError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| ServiceError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub fn read(path: &Path) -> Result<Vec<Event>> {
        let io = |source| ServiceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| ServiceError::Journal {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Ok(events)
    }
}

/// One participant's elicitation session.
#[derive(Debug)]
pub struct Session {
    pub params: SessionParams,
    phase: Phase,
    pool: CandidatePool,
    elicitation: Elicitation,
    rng: SeededRng,
    pbald_samples: usize,
    outstanding: Option<usize>,
    correct: usize,
    bo_runs: Vec<String>,
    model_grid: Option<Grid>,
    journal: Option<Journal>,
}

/// An outstanding question in native coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub pair_id: usize,
    pub round: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Accuracy of the answer log against the true objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub answered: usize,
    pub accuracy: f64,
}

impl Session {
    /// A fresh session in the memorize phase. The journal, if any, receives
    /// the creation event.
    pub fn create(params: SessionParams, config: &BoConfig, journal: Option<Journal>) -> Result<Self> {
        let mut s = Self::build(params, config)?;
        s.journal = journal;
        let p = &s.params;
        let created = Event::Created {
            schema: SCHEMA_VERSION,
            id: p.id.clone(),
            benchmark: p.benchmark.name.clone(),
            budget: p.budget,
            seed: p.seed,
            created_ms: p.created_ms,
            deadline_ms: p.deadline_ms,
        };
        s.log(&created)?;
        Ok(s)
    }

    fn build(params: SessionParams, config: &BoConfig) -> Result<Self> {
        let d = params.benchmark.dim();
        if d != 2 {
            return Err(ServiceError::UnsupportedBenchmark {
                name: params.benchmark.name.clone(),
                dim: d,
            });
        }
        if params.budget == 0 {
            return Err(ServiceError::BadRequest("the question budget must be positive".into()));
        }
        let pool = build_pool(
            d,
            config.pool_points,
            config.pool_pairs.max(params.budget),
            derive_seed(params.seed, STREAM_POOL),
        )
        .map_err(prefbo_core::boloop::BoError::from)?;
        let mut rng = SeededRng::seed_from_u64(derive_seed(params.seed, STREAM_ELICIT));
        let net = Pbnn::new(d, config.elicitation.clone(), &mut rng)?;
        Ok(Self {
            params,
            phase: Phase::Memorize,
            pool,
            elicitation: Elicitation::new(net),
            rng,
            pbald_samples: config.pbald_samples,
            outstanding: None,
            correct: 0,
            bo_runs: Vec::new(),
            model_grid: None,
            journal: None,
        })
    }

    /// Rebuilds a session by re-running every journaled step.
    pub fn replay(events: &[Event], config: &BoConfig, journal: Option<Journal>) -> Result<Self> {
        let bad = |detail: String| ServiceError::Internal(format!("journal replay: {detail}"));
        let Some(Event::Created {
            schema,
            id,
            benchmark,
            budget,
            seed,
            created_ms,
            deadline_ms,
        }) = events.first()
        else {
            return Err(bad("the first event is not a creation".into()));
        };
        if *schema != SCHEMA_VERSION {
            return Err(bad(format!("schema {schema} is not supported")));
        }
        let params = SessionParams {
            id: id.clone(),
            benchmark: Benchmark::by_name(benchmark)?,
            budget: *budget,
            seed: *seed,
            created_ms: *created_ms,
            deadline_ms: *deadline_ms,
        };
        let mut s = Self::build(params, config)?;
        for event in &events[1..] {
            match event {
                Event::Created { .. } => return Err(bad("a second creation event".into())),
                Event::Phase { phase, .. } => {
                    if *phase < s.phase {
                        return Err(bad(format!("phase moves back from {} to {phase}", s.phase)));
                    }
                    s.phase = *phase;
                }
                Event::Asked { pair_index, .. } => {
                    let k = s.choose()?;
                    if k != *pair_index {
                        return Err(bad(format!("journal asked pair {pair_index}, replay chose {k}")));
                    }
                    s.outstanding = Some(k);
                }
                Event::Answered { pair_index, choice, .. } => {
                    s.apply_answer(*pair_index, *choice)?;
                }
                Event::BoStarted { handle, .. } => s.bo_runs.push(handle.clone()),
            }
        }
        s.journal = journal;
        Ok(s)
    }

    fn log(&mut self, event: &Event) -> Result<()> {
        match &mut self.journal {
            Some(j) => j.append(event),
            None => Ok(()),
        }
    }

    /// Moves from memorize to question once the deadline has passed.
    pub fn sync(&mut self, now_ms: u64) -> Result<Phase> {
        if self.phase == Phase::Memorize && now_ms >= self.params.deadline_ms {
            self.phase = Phase::Question;
            self.log(&Event::Phase {
                phase: Phase::Question,
                at_ms: now_ms,
            })?;
        }
        Ok(self.phase)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn answered(&self) -> usize {
        self.elicitation.steps.len()
    }

    pub fn outstanding(&self) -> Option<usize> {
        self.outstanding
    }

    pub fn bo_runs(&self) -> &[String] {
        &self.bo_runs
    }

    pub fn answers(&self) -> &PreferenceDataset {
        &self.elicitation.data
    }

    pub fn model(&self) -> &Pbnn {
        &self.elicitation.net
    }

    pub fn remaining_ms(&self, now_ms: u64) -> u64 {
        self.params.deadline_ms.saturating_sub(now_ms)
    }

    fn phase_error(&self, detail: &str) -> ServiceError {
        ServiceError::Phase {
            phase: self.phase,
            detail: detail.into(),
        }
    }

    /// The objective on the display grid; only before the deadline.
    pub fn grid(&mut self, now_ms: u64, n: usize) -> Result<Grid> {
        if self.sync(now_ms)? != Phase::Memorize {
            return Err(self.phase_error("the function plots are no longer available"));
        }
        function_grid(&self.params.benchmark, n)
    }

    fn choose(&mut self) -> Result<usize> {
        Ok(self
            .elicitation
            .next_query(&self.pool, self.pbald_samples, &mut self.rng)?)
    }

    fn question(&self, k: usize) -> Result<Question> {
        let (a, b) = self.pool.pair_points(k);
        Ok(Question {
            pair_id: k,
            round: self.answered(),
            first: self.params.benchmark.to_native(a)?,
            second: self.params.benchmark.to_native(b)?,
        })
    }

    /// The outstanding question, choosing one if none is pending. `None`
    /// once the budget is used up.
    pub fn next_question(&mut self, now_ms: u64) -> Result<Option<Question>> {
        match self.sync(now_ms)? {
            Phase::Memorize => Err(self.phase_error("questions start after the memorize deadline")),
            Phase::Done => Ok(None),
            Phase::Question => {
                let k = match self.outstanding {
                    Some(k) => k,
                    None => {
                        let k = self.choose()?;
                        self.log(&Event::Asked {
                            round: self.answered(),
                            pair_index: k,
                        })?;
                        self.outstanding = Some(k);
                        k
                    }
                };
                self.question(k).map(Some)
            }
        }
    }

    fn apply_answer(&mut self, k: usize, choice: Choice) -> Result<bool> {
        if self.outstanding != Some(k) {
            return Err(ServiceError::Conflict {
                got: k,
                outstanding: self.outstanding,
            });
        }
        let (a, b) = self.pool.pair_points(k);
        let pair = PreferencePair::new(a.to_vec(), b.to_vec(), choice == Choice::First)?;
        let correct = answer_agreement(&self.params.benchmark, std::slice::from_ref(&pair))? == 1;
        self.elicitation
            .record(&self.pool, k, pair.label, &mut self.rng)?;
        self.outstanding = None;
        if correct {
            self.correct += 1;
        }
        if self.answered() >= self.params.budget {
            self.phase = Phase::Done;
        }
        Ok(correct)
    }

    /// Records the answer to the outstanding question and retrains.
    pub fn submit(&mut self, now_ms: u64, pair_id: usize, choice: Choice) -> Result<Phase> {
        match self.sync(now_ms)? {
            Phase::Question => {}
            _ => return Err(self.phase_error("no question is open")),
        }
        let round = self.answered();
        let correct = self.apply_answer(pair_id, choice)?;
        self.log(&Event::Answered {
            round,
            pair_index: pair_id,
            choice,
            correct,
        })?;
        if self.phase == Phase::Done {
            self.log(&Event::Phase {
                phase: Phase::Done,
                at_ms: now_ms,
            })?;
        }
        Ok(self.phase)
    }

    /// Agreement of the answer log with the true ordering.
    pub fn accuracy(&self) -> Result<Accuracy> {
        let answered = self.answered();
        let correct = answer_agreement(&self.params.benchmark, self.answers().pairs())?;
        debug_assert_eq!(correct, self.correct);
        Ok(Accuracy {
            correct,
            answered,
            accuracy: if answered == 0 { 0.0 } else { correct as f64 / answered as f64 },
        })
    }

    /// Posterior-mean latent on the display grid; only once done.
    pub fn model_grid(&mut self, n: usize, samples: usize) -> Result<Grid> {
        if self.phase != Phase::Done {
            return Err(self.phase_error("the model is shown after the last answer"));
        }
        if let Some(g) = self.model_grid.as_ref().filter(|g| g.xs.len() == n) {
            return Ok(g.clone());
        }
        let (xs, ys, points) = grid_points(&self.params.benchmark, n)?;
        let mut rng = rng_for(self.params.seed, STREAM_MODEL_GRID);
        let means = self
            .model()
            .latent_curve(&points, samples, &mut rng)?
            .into_iter()
            .map(|s| s.mean)
            .collect();
        let grid = Grid {
            xs,
            ys,
            values: reshape(means, n),
        };
        self.model_grid = Some(grid.clone());
        Ok(grid)
    }

    /// Registers an optimization run started from this session's answers.
    pub fn start_bo(&mut self, handle: &str, runs: usize, iterations: usize) -> Result<PreferenceDataset> {
        if self.phase != Phase::Done {
            return Err(self.phase_error("optimization starts after the last answer"));
        }
        self.log(&Event::BoStarted {
            handle: handle.into(),
            runs,
            iterations,
        })?;
        self.bo_runs.push(handle.into());
        Ok(self.answers().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> BoConfig {
        let mut c = BoConfig {
            pool_points: 40,
            pool_pairs: 40,
            pbald_samples: 5,
            ..BoConfig::default()
        };
        c.elicitation.epochs = 1;
        c
    }

    fn params(budget: usize) -> SessionParams {
        SessionParams {
            id: "s".into(),
            benchmark: Benchmark::branin2d(),
            budget,
            seed: 3,
            created_ms: 0,
            deadline_ms: 100,
        }
    }

    #[test]
    fn function_grid_layout() {
        let b = Benchmark::branin2d();
        let g = function_grid(&b, 5).unwrap();
        assert_eq!(g.xs, [-5.0, -1.25, 2.5, 6.25, 10.0]);
        assert_eq!(g.ys, [0.0, 3.75, 7.5, 11.25, 15.0]);
        assert_eq!(g.values[1][3], b.evaluate_native(&[6.25, 3.75]).unwrap());
        assert!(function_grid(&Benchmark::forrester1d(), 5).is_err());
    }

    #[test]
    fn only_two_dimensional_benchmarks() {
        let p = SessionParams {
            benchmark: Benchmark::levy(3),
            ..params(2)
        };
        assert!(matches!(
            Session::create(p, &tiny(), None),
            Err(ServiceError::UnsupportedBenchmark { dim: 3, .. })
        ));
        assert!(Session::create(params(0), &tiny(), None).is_err());
    }

    #[test]
    fn replay_rejects_inconsistent_journals() {
        let mut s = Session::create(params(3), &tiny(), None).unwrap();
        let q = s.next_question(100).unwrap().unwrap();
        let created = Event::Created {
            schema: SCHEMA_VERSION,
            id: "s".into(),
            benchmark: "branin2d".into(),
            budget: 3,
            seed: 3,
            created_ms: 0,
            deadline_ms: 100,
        };
        let question = Event::Phase {
            phase: Phase::Question,
            at_ms: 100,
        };
        let asked = |k| Event::Asked {
            round: 0,
            pair_index: k,
        };
        let ok = [created.clone(), question.clone(), asked(q.pair_id)];
        assert_eq!(Session::replay(&ok, &tiny(), None).unwrap().outstanding(), Some(q.pair_id));
        let wrong = [created.clone(), question.clone(), asked(q.pair_id + 1)];
        assert!(Session::replay(&wrong, &tiny(), None).is_err());
        let back = [
            created.clone(),
            question,
            Event::Phase {
                phase: Phase::Memorize,
                at_ms: 101,
            },
        ];
        assert!(Session::replay(&back, &tiny(), None).is_err());
        assert!(Session::replay(&ok[1..], &tiny(), None).is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Wait(u64),
        Grid,
        Ask,
        Answer(Option<usize>, bool),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..80).prop_map(Op::Wait),
            Just(Op::Grid),
            Just(Op::Ask),
            (proptest::option::of(0usize..40), any::<bool>()).prop_map(|(k, c)| Op::Answer(k, c)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn phases_only_move_forward_and_answers_stay_within_budget(
            budget in 1usize..4,
            ops in proptest::collection::vec(op(), 1..30),
        ) {
            let mut s = Session::create(params(budget), &tiny(), None).unwrap();
            let mut now = 0;
            let mut last = s.phase();
            let mut pending: Option<usize> = None;
            for op in ops {
                match op {
                    Op::Wait(ms) => now += ms,
                    Op::Grid => {
                        let served = s.grid(now, 4).is_ok();
                        prop_assert_eq!(served, now < 100);
                    }
                    Op::Ask => {
                        let before = s.phase();
                        match s.next_question(now) {
                            Ok(Some(q)) => {
                                prop_assert_eq!(s.phase(), Phase::Question);
                                if let Some(k) = pending {
                                    prop_assert_eq!(q.pair_id, k);
                                }
                                pending = Some(q.pair_id);
                            }
                            Ok(None) => prop_assert_eq!(s.phase(), Phase::Done),
                            Err(_) => prop_assert!(before == Phase::Memorize && now < 100),
                        }
                    }
                    Op::Answer(k, first) => {
                        let k = k.or(pending).unwrap_or(0);
                        let choice = if first { Choice::First } else { Choice::Second };
                        let n = s.answered();
                        if s.submit(now, k, choice).is_ok() {
                            prop_assert_eq!(Some(k), pending);
                            prop_assert_eq!(s.answered(), n + 1);
                            pending = None;
                        } else {
                            prop_assert_eq!(s.answered(), n);
                        }
                    }
                }
                prop_assert!(s.phase() >= last);
                prop_assert!(s.answered() <= budget);
                prop_assert_eq!(s.phase() == Phase::Done, s.answered() == budget);
                last = s.phase();
            }
            let acc = s.accuracy().unwrap();
            prop_assert_eq!(acc.answered, s.answered());
        }
    }
}
