//! Candidate pools and mutual-information query selection for pairwise
//! elicitation.
//!
//! For a candidate pair the score is the BALD disagreement estimated from
//! `T` posterior weight draws:
//!
//! ```text
//! score = h(mean_t p_t) - mean_t h(p_t),   p_t = sigmoid(g_t(x) - g_t(x'))
//! ```
//!
//! where `h` is the binary entropy in nats. One set of draws is shared by
//! every pair scored in a selection round.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pbnn::{connection, LatentSampler};
use crate::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActiveError {
    #[error("requested {requested} pairs but only {available} distinct unordered pairs exist")]
    Capacity { requested: usize, available: usize },
    #[error("probability {0} outside [0, 1]")]
    Domain(f64),
    #[error("candidate pool exhausted: every pair has been asked")]
    Exhausted,
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, ActiveError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolGeometry {
    /// Independent uniform draws in the unit cube.
    #[default]
    Uniform,
    /// Halton low-discrepancy sequence, offset by the seed.
    Halton,
}

/// Base points in the unit cube and the unordered pairs that can be queried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    points: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
    seed: u64,
}

impl CandidatePool {
    pub fn new(points: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>, seed: u64) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(ActiveError::InvalidPool(
                "points must share one dimension and lie in the unit cube".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i == j || i >= points.len() || j >= points.len() {
                return Err(ActiveError::InvalidPool(format!("bad pair ({i}, {j})")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(ActiveError::InvalidPool(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(Self {
            points,
            pairs,
            seed,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The two points of pair `idx`.
    pub fn pair_points(&self, idx: usize) -> (&[f64], &[f64]) {
        let (i, j) = self.pairs[idx];
        (&self.points[i], &self.points[j])
    }

    /// Points as CSV (`u_1..u_d`, header row).
    pub fn write_points_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((1..=self.dim()).map(|i| format!("u_{i}")))?;
        for p in &self.points {
            w.write_record(p.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Pair index list as CSV (`pair,first,second`).
    pub fn write_pairs_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pair", "first", "second"])?;
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            w.write_record([k.to_string(), i.to_string(), j.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform pool of `n_points` base points and `n_pairs` distinct unordered pairs.
pub fn build_pool(d: usize, n_points: usize, n_pairs: usize, seed: u64) -> Result<CandidatePool> {
    build_pool_with(d, n_points, n_pairs, seed, PoolGeometry::Uniform)
}

pub fn build_pool_with(
    d: usize,
    n_points: usize,
    n_pairs: usize,
    seed: u64,
    geometry: PoolGeometry,
) -> Result<CandidatePool> {
    if d == 0 || n_points < 2 || n_pairs == 0 {
        return Err(ActiveError::Precondition(
            "need d >= 1, n_points >= 2 and n_pairs >= 1".into(),
        ));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let points = match geometry {
        PoolGeometry::Uniform => uniform_points(d, n_points, &mut rng),
        PoolGeometry::Halton => halton_points(d, n_points, 1 + seed % 4096),
    };
    let pairs = sample_pairs(n_points, n_pairs, &mut rng)?;
    Ok(CandidatePool {
        points,
        pairs,
        seed,
    })
}

pub fn uniform_points<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Distinct unordered index pairs `(i, j)` with `i < j`, sampled without
/// replacement.
pub fn sample_pairs<R: Rng + ?Sized>(
    n_points: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let available = n_points * (n_points - 1) / 2;
    if n_pairs > available {
        return Err(ActiveError::Capacity {
            requested: n_pairs,
            available,
        });
    }
    if 2 * n_pairs >= available {
        let all: Vec<(usize, usize)> = (0..n_points)
            .flat_map(|i| (i + 1..n_points).map(move |j| (i, j)))
            .collect();
        let picked = index::sample(rng, available, n_pairs);
        let out = picked.iter().map(|k| all[k]).collect();
        return Ok(out);
    }
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let i = rng.random_range(0..n_points);
        let j = rng.random_range(0..n_points);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push(key);
        }
    }
    Ok(out)
}

fn halton_points(d: usize, n: usize, start: u64) -> Vec<Vec<f64>> {
    let primes = first_primes(d);
    (0..n as u64)
        .map(|k| primes.iter().map(|&b| radical_inverse(start + k, b)).collect())
        .collect()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Binary entropy in nats, with `h(0) = h(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ActiveError::Domain(p));
    }
    Ok(entropy_unchecked(p))
}

#[inline]
fn entropy_unchecked(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Disagreement score from per-draw predictive probabilities.
pub fn pbald_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(ActiveError::Precondition("need at least two draws".into()));
    }
    if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(ActiveError::Domain(p));
    }
    let t = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / t;
    let mean_h = probs.iter().map(|&p| entropy_unchecked(p)).sum::<f64>() / t;
    Ok(entropy_unchecked(mean) - mean_h)
}

/// Scores one pair with `t` fresh posterior draws.
pub fn pbald_score<M: LatentSampler, R: Rng + ?Sized>(
    model: &M,
    pair: (&[f64], &[f64]),
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    if t < 2 {
        return Err(ActiveError::Precondition("T must be at least 2".into()));
    }
    let draws = model.sample_latents(&[pair.0.to_vec(), pair.1.to_vec()], t, rng);
    let probs: Vec<f64> = draws.iter().map(|row| connection(row[0], row[1])).collect();
    pbald_from_probs(&probs)
}

/// Latent draws at every pool point, shared by all pairs in one round.
#[derive(Debug, Clone)]
pub struct PbaldRound {
    latents: Vec<Vec<f64>>,
}

impl PbaldRound {
    pub fn draw<M: LatentSampler, R: Rng + ?Sized>(
        model: &M,
        pool: &CandidatePool,
        t: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if t < 2 {
            return Err(ActiveError::Precondition("T must be at least 2".into()));
        }
        Ok(Self {
            latents: model.sample_latents(pool.points(), t, rng),
        })
    }

    /// Score of the pair of pool points `(i, j)`.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        let t = self.latents.len() as f64;
        let mut mean = 0.0;
        let mut mean_h = 0.0;
        for row in &self.latents {
            let p = connection(row[i], row[j]);
            mean += p;
            mean_h += entropy_unchecked(p);
        }
        entropy_unchecked(mean / t) - mean_h / t
    }

    /// Scores of every pool pair in index order.
    pub fn score_pool(&self, pool: &CandidatePool) -> Vec<f64> {
        pool.pairs().iter().map(|&(i, j)| self.score(i, j)).collect()
    }
}

/// Scores closer than this count as tied, so rounding noise cannot override
/// the lowest-index rule.
const SCORE_TIE_TOL: f64 = 1e-12;

/// Index of the unasked pair with maximal score; ties go to the lowest index.
pub fn select_query<M: LatentSampler, R: Rng + ?Sized>(
    model: &M,
    pool: &CandidatePool,
    asked: &HashSet<usize>,
    t: usize,
    rng: &mut R,
) -> Result<usize> {
    let remaining: Vec<usize> = (0..pool.len()).filter(|k| !asked.contains(k)).collect();
    match remaining.as_slice() {
        [] => Err(ActiveError::Exhausted),
        [only] => Ok(*only),
        _ => {
            let round = PbaldRound::draw(model, pool, t, rng)?;
            let mut best = remaining[0];
            let mut best_score = f64::NEG_INFINITY;
            for &k in &remaining {
                let (i, j) = pool.pairs()[k];
                let s = round.score(i, j);
                if s > best_score + SCORE_TIE_TOL {
                    best_score = s;
                    best = k;
                }
            }
            Ok(best)
        }
    }
}

/// Uniformly random unasked pair (used for the initial query).
pub fn random_unasked<R: Rng + ?Sized>(
    pool: &CandidatePool,
    asked: &HashSet<usize>,
    rng: &mut R,
) -> Result<usize> {
    let remaining: Vec<usize> = (0..pool.len()).filter(|k| !asked.contains(k)).collect();
    remaining.choose(rng).copied().ok_or(ActiveError::Exhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pbnn::{ElicitationConfig, Pbnn};
    use crate::varnet::VariationalParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Latent sampler returning scripted draws, cycling through `rows`.
    struct Scripted {
        rows: Vec<Vec<f64>>,
    }

    impl LatentSampler for Scripted {
        fn dim(&self) -> usize {
            1
        }

        fn sample_latents<R: Rng + ?Sized>(
            &self,
            points: &[Vec<f64>],
            t: usize,
            _rng: &mut R,
        ) -> Vec<Vec<f64>> {
            (0..t)
                .map(|s| self.rows[s % self.rows.len()][..points.len()].to_vec())
                .collect()
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn forced_single_pair_pool() {
        let pool = build_pool(1, 2, 1, 3).unwrap();
        assert_eq!(pool.pairs(), &[(0, 1)]);
    }

    #[test]
    fn pool_is_deterministic_and_in_range() {
        let a = build_pool(3, 200, 500, 42).unwrap();
        let b = build_pool(3, 200, 500, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.points().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let unique: HashSet<_> = a.pairs().iter().collect();
        assert_eq!(unique.len(), 500);
        let h = build_pool_with(2, 64, 100, 5, PoolGeometry::Halton).unwrap();
        assert!(h.points().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dense_pool_enumerates_without_duplicates() {
        let pool = build_pool(1, 10, 45, 1).unwrap();
        let unique: HashSet<_> = pool.pairs().iter().collect();
        assert_eq!(unique.len(), 45);
        assert_eq!(
            build_pool(1, 10, 46, 1),
            Err(ActiveError::Capacity {
                requested: 46,
                available: 45
            })
        );
    }

    #[test]
    fn entropy_values() {
        assert_relative_eq!(binary_entropy(0.5).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_relative_eq!(binary_entropy(0.2).unwrap(), binary_entropy(0.8).unwrap(), epsilon = 1e-15);
        assert_eq!(binary_entropy(1.5), Err(ActiveError::Domain(1.5)));
    }

    #[test]
    fn hand_computed_split_score() {
        let s = pbald_from_probs(&[0.2, 0.8]).unwrap();
        let expected = 2f64.ln() + 0.2 * 0.2f64.ln() + 0.8 * 0.8f64.ln();
        assert_relative_eq!(s, expected, epsilon = 1e-15);
        assert_relative_eq!(s, 0.1927, epsilon = 1e-4);

        let model = Scripted {
            rows: vec![vec![logit(0.2), 0.0], vec![logit(0.8), 0.0]],
        };
        let mut rng = SeededRng::seed_from_u64(0);
        let via_model = pbald_score(&model, (&[0.1], &[0.9]), 2, &mut rng).unwrap();
        assert_relative_eq!(via_model, expected, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_posterior_scores_zero_and_picks_lowest_index() {
        let mut rng = SeededRng::seed_from_u64(1);
        let mut net = Pbnn::new(1, ElicitationConfig::accuracy_runs(), &mut rng).unwrap();
        net.vp = VariationalParams::deterministic(net.vp.mu.clone(), 0.1);
        let pool = build_pool(1, 50, 100, 7).unwrap();
        let round = PbaldRound::draw(&net, &pool, 10, &mut rng).unwrap();
        assert!(round.score_pool(&pool).iter().all(|&s| s.abs() < 1e-15));
        let asked: HashSet<usize> = [0, 1, 2].into_iter().collect();
        assert_eq!(select_query(&net, &pool, &asked, 10, &mut rng).unwrap(), 3);
    }

    #[test]
    fn selects_the_split_pair() {
        // points 0..4; pair 1 = (2, 3) sees probabilities {0.1, 0.9}, others constant.
        let pool = CandidatePool::new(
            vec![vec![0.0], vec![0.2], vec![0.5], vec![0.7]],
            vec![(0, 1), (2, 3), (0, 3)],
            0,
        )
        .unwrap();
        let model = Scripted {
            rows: vec![
                vec![0.3, 0.3, logit(0.1), 0.0],
                vec![0.3, 0.3, logit(0.9), 0.0],
            ],
        };
        let mut rng = SeededRng::seed_from_u64(0);
        let round = PbaldRound::draw(&model, &pool, 2, &mut rng).unwrap();
        let scores = round.score_pool(&pool);
        assert_eq!(scores[0], 0.0);
        // h(0.5) - h(0.1)
        assert_relative_eq!(scores[1], 2f64.ln() - binary_entropy(0.1).unwrap(), epsilon = 1e-12);
        assert_eq!(select_query(&model, &pool, &HashSet::new(), 2, &mut rng).unwrap(), 1);
    }

    #[test]
    fn single_remaining_and_exhausted() {
        let pool = build_pool(1, 5, 3, 2).unwrap();
        let model = Scripted {
            rows: vec![vec![0.0; 5]],
        };
        let mut rng = SeededRng::seed_from_u64(0);
        let asked: HashSet<usize> = [0, 2].into_iter().collect();
        assert_eq!(select_query(&model, &pool, &asked, 2, &mut rng).unwrap(), 1);
        let all: HashSet<usize> = (0..3).collect();
        assert_eq!(select_query(&model, &pool, &all, 2, &mut rng), Err(ActiveError::Exhausted));
    }

    #[test]
    fn shared_draws_give_identical_rescoring() {
        let mut rng = SeededRng::seed_from_u64(4);
        let net = Pbnn::new(2, ElicitationConfig::accuracy_runs(), &mut rng).unwrap();
        let pool = build_pool(2, 40, 60, 9).unwrap();
        let round = PbaldRound::draw(&net, &pool, 20, &mut rng).unwrap();
        assert_eq!(round.score_pool(&pool), round.score_pool(&pool));
    }

    proptest! {
        #[test]
        fn score_nonnegative_and_order_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 2..30),
            b in prop::collection::vec(-5.0f64..5.0, 2..30),
        ) {
            let t = a.len().min(b.len());
            let rows: Vec<Vec<f64>> = (0..t).map(|s| vec![a[s], b[s]]).collect();
            let round = PbaldRound { latents: rows };
            let forward = round.score(0, 1);
            let backward = round.score(1, 0);
            prop_assert!(forward >= -1e-12);
            prop_assert!((forward - backward).abs() < 1e-12);
        }
    }
}
