//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release -p prefbo-core --test acceptance`;
//! pass criterion names (e.g. `-- shape bo`) to run a subset.

use std::cell::Cell;
use std::collections::HashSet;
use std::time::Instant;

use prefbo_core::active::{binary_entropy, build_pool, pbald_from_probs, pbald_score};
use prefbo_core::bench::{forrester, BenchError, Benchmark, Objective};
use prefbo_core::boloop::{
    ei_analytic, ei_from_samples, ei_mc, run_algorithm1, BoConfig, BoHistory, Elicitation, Surrogate,
};
use prefbo_core::expertsim::{
    calibrate_sigma, AgreementEstimator, CalibrationConfig, ExpertOracle, SimulatedExpert,
};
use prefbo_core::harness::{run_bo_experiment, run_elicitation_experiment, ExperimentConfig, Source};
use prefbo_core::netcore::{Activation, LayerSpec, NetSpec};
use prefbo_core::pbnn::{elicit_elbo_loss, ElicitationConfig, Pbnn, PreferencePair};
use prefbo_core::stats::spearman;
use prefbo_core::varnet::{softplus_inv, VariationalParams};
use prefbo_core::SeededRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_spec(rng: &mut SeededRng) -> NetSpec {
    let d = rng.random_range(1..=3);
    let depth = rng.random_range(1..=3);
    let mut layers = Vec::new();
    let mut prev = d;
    for _ in 0..depth {
        let w = rng.random_range(1..=5);
        layers.push(LayerSpec::new(prev, w, Activation::Tanh));
        prev = w;
    }
    layers.push(LayerSpec::new(prev, 1, Activation::Identity));
    NetSpec::new(layers).unwrap()
}

fn gradients() -> Outcome {
    let mut rng = SeededRng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst_net: f64 = 0.0;
    for _ in 0..25 {
        let spec = random_spec(&mut rng);
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..spec.in_width()).map(|_| rng.random()).collect();
        let grad = spec.backward(&params, &x, 1.0).unwrap();
        for i in 0..params.len() {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (spec.forward(&up, &x).unwrap() - spec.forward(&down, &x).unwrap()) / (2.0 * h);
            worst_net = worst_net.max(rel_err(fd, grad[i]));
        }
    }

    let mut worst_elbo: f64 = 0.0;
    for _ in 0..20 {
        let spec = random_spec(&mut rng);
        let d = spec.in_width();
        let n = spec.param_count();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rho: Vec<f64> = (0..n).map(|_| softplus_inv(rng.random_range(0.02..0.3))).collect();
        let vp = VariationalParams::new(mu, rho, 0.1).unwrap();
        let batch: Vec<PreferencePair> = (0..3)
            .map(|_| {
                let a: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                let b: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                PreferencePair::new(a, b, rng.random()).unwrap()
            })
            .collect();
        let noises: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let kl_scale = 0.3;
        let est = elicit_elbo_loss(&vp, &spec, &batch, &noises, kl_scale).unwrap();
        let loss = |v: &VariationalParams| elicit_elbo_loss(v, &spec, &batch, &noises, kl_scale).unwrap().loss;
        for i in 0..n {
            let mut up = vp.clone();
            let mut down = vp.clone();
            up.mu[i] += h;
            down.mu[i] -= h;
            worst_elbo = worst_elbo.max(rel_err((loss(&up) - loss(&down)) / (2.0 * h), est.grad_mu[i]));
            let mut up = vp.clone();
            let mut down = vp.clone();
            up.rho[i] += h;
            down.rho[i] -= h;
            worst_elbo = worst_elbo.max(rel_err((loss(&up) - loss(&down)) / (2.0 * h), est.grad_rho[i]));
        }
    }
    outcome(
        worst_net <= 1e-4 && worst_elbo <= 1e-4,
        format!("25 nets worst rel err {worst_net:.2e}; 20 ELBOs worst rel err {worst_elbo:.2e} (limit 1e-4)"),
    )
}

fn identities() -> Outcome {
    let prior = 0.1;
    let n = 7;
    let at_prior = VariationalParams::new(vec![0.0; n], vec![softplus_inv(prior); n], prior).unwrap();
    let kl0 = at_prior.kl_to_prior();

    let mut rng = SeededRng::seed_from_u64(7);
    let mu = vec![0.05, -0.2, 0.13];
    let sig = [0.04, 0.15, 0.1];
    let vp = VariationalParams::new(mu.clone(), sig.iter().map(|&s| softplus_inv(s)).collect(), prior).unwrap();
    let kl = vp.kl_to_prior();
    let samples = 1_000_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let mut lr = 0.0;
        for i in 0..mu.len() {
            let z: f64 = rng.sample(StandardNormal);
            let w = mu[i] + sig[i] * z;
            let log_q = -sig[i].ln() - 0.5 * z * z;
            let log_p = -prior.ln() - 0.5 * (w / prior).powi(2);
            lr += log_q - log_p;
        }
        sum += lr;
        sum2 += lr * lr;
    }
    let mean = sum / samples as f64;
    let se = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
    let kl_ok = (kl - mean).abs() <= 3.0 * se;

    let h = binary_entropy(0.5).unwrap();
    let hand = pbald_from_probs(&[0.2, 0.8]).unwrap();

    let mut net = Pbnn::new(1, ElicitationConfig::accuracy_runs(), &mut rng).unwrap();
    net.vp = VariationalParams::deterministic(net.vp.mu.clone(), prior);
    let det = pbald_score(&net, (&[0.2], &[0.7]), 50, &mut rng).unwrap();

    let pass = kl0.abs() < 1e-12
        && kl_ok
        && (h - std::f64::consts::LN_2).abs() < 1e-15
        && det.abs() < 1e-12
        && (hand - 0.1927).abs() <= 1e-4;
    outcome(
        pass,
        format!(
            "KL at prior {kl0:.1e}; KL {kl:.5} vs MC {mean:.5} (SE {se:.1e}); h(0.5)={h:.6}; deterministic PBALD {det:.1e}; hand PBALD {hand:.4}"
        ),
    )
}

/// `f(x) = w x + b` with independent Gaussian weights.
struct LinearGaussian {
    spec: NetSpec,
    vp: VariationalParams,
}

impl Surrogate for LinearGaussian {
    fn dim(&self) -> usize {
        1
    }

    fn sample_objective<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> prefbo_core::boloop::Result<Vec<Vec<f64>>> {
        Ok((0..t)
            .map(|_| {
                let w = self.vp.draw(rng);
                points.iter().map(|p| self.spec.forward(&w, p).unwrap()).collect()
            })
            .collect())
    }
}

fn expected_improvement() -> Outcome {
    let mut rng = SeededRng::seed_from_u64(11);
    let spec = NetSpec::new(vec![LayerSpec::new(1, 1, Activation::Identity)]).unwrap();
    let t = 100_000;
    let mut within = 0;
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let mw = rng.random_range(-2.0..2.0);
        let mb = rng.random_range(-2.0..2.0);
        let sw: f64 = rng.random_range(0.1..1.5);
        let sb: f64 = rng.random_range(0.1..1.5);
        let x: f64 = rng.random();
        let mu = mw * x + mb;
        let s = (sw * sw * x * x + sb * sb).sqrt();
        let y_best = mu + rng.random_range(-1.5..1.5) * s;
        let model = LinearGaussian {
            spec: spec.clone(),
            vp: VariationalParams::new(vec![mw, mb], vec![softplus_inv(sw), softplus_inv(sb)], 1.0).unwrap(),
        };
        let seed = 100 + k;
        let mc = ei_mc(&model, &[x], y_best, t, &mut SeededRng::seed_from_u64(seed)).unwrap();
        let draws = model
            .sample_objective(&[vec![x]], t, &mut SeededRng::seed_from_u64(seed))
            .unwrap();
        let imp: Vec<f64> = draws.iter().map(|r| (y_best - r[0]).max(0.0)).collect();
        let m = imp.iter().sum::<f64>() / t as f64;
        let se = (imp.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t as f64 - 1.0) / t as f64).sqrt();
        let exact = ei_analytic(mu, s, y_best).unwrap();
        let z = (mc - exact).abs() / se;
        worst = worst.max(z);
        if z <= 3.0 {
            within += 1;
        }
    }
    let hand = ei_from_samples(&[0.5, 1.5, 0.9], 1.0);
    outcome(
        within == 20 && (hand - 0.2).abs() <= 1e-16,
        format!("{within}/20 triples within 3 SE (worst {worst:.2} SE); hand case {hand}"),
    )
}

fn shape_recovery() -> Outcome {
    let seeds = 20;
    let f = Benchmark::forrester1d();
    let grid: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 199.0]).collect();
    let truth: Vec<f64> = grid.iter().map(|x| forrester(x[0]).unwrap()).collect();
    let config = BoConfig::default();
    let mut rhos = Vec::new();
    for seed in 0..seeds {
        let pool = build_pool(1, config.pool_points, config.pool_pairs, seed).unwrap();
        let mut expert = SimulatedExpert::sample(f.clone(), pool.points(), 0.0, seed, None).unwrap();
        let mut rng = SeededRng::seed_from_u64(seed);
        let net = Pbnn::new(1, config.elicitation.clone(), &mut rng).unwrap();
        let mut el = Elicitation::new(net);
        for _ in 0..=50 {
            el.step(&pool, &mut expert, config.pbald_samples, &mut rng).unwrap();
        }
        let curve = el.net.latent_curve(&grid, 100, &mut rng).unwrap();
        let means: Vec<f64> = curve.iter().map(|s| s.mean).collect();
        rhos.push(spearman(&means, &truth));
    }
    let good = rhos.iter().filter(|&&r| r >= 0.9).count();
    let listed: Vec<String> = rhos.iter().map(|r| format!("{r:.2}")).collect();
    outcome(
        good * 5 >= seeds as usize * 4,
        format!("{good}/{seeds} seeds with rho >= 0.9 (need 80%); rho = [{}]", listed.join(", ")),
    )
}

fn elicitation_accuracy() -> Outcome {
    let config = ExperimentConfig {
        replications: 10,
        source: Source::Benchmark {
            name: "branin2d".into(),
            rows: 2000,
        },
        train_pairs: 2000,
        test_pairs: 1000,
        budgets: vec![50, 100],
        ..ExperimentConfig::default()
    };
    let table = run_elicitation_experiment(&config, None).unwrap();
    let a50 = table.mean_at(50).unwrap();
    let a100 = table.mean_at(100).unwrap();
    outcome(
        a50 >= 0.75 && a100 >= a50 - 0.01,
        format!("Branin2D hold-out accuracy: N_AL=50 {a50:.3}, N_AL=100 {a100:.3} over 10 seeds"),
    )
}

fn calibration() -> Outcome {
    let f = Benchmark::forrester1d();
    let mut rng = SeededRng::seed_from_u64(5);
    let points = prefbo_core::active::uniform_points(1, 2000, &mut rng);
    let config = CalibrationConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for target in [0.6, 0.7, 0.8, 0.9] {
        match calibrate_sigma(&f, &points, target, &config) {
            Ok(c) => {
                ok &= (c.measured_accuracy - target).abs() <= 0.02;
                parts.push(format!("{target}: sigma {:.3} acc {:.4}", c.sigma_delta, c.measured_accuracy));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{target}: {e}"));
            }
        }
    }
    let est = AgreementEstimator::new(&f, &points, &config).unwrap();
    let grid: Vec<f64> = (0..30).map(|k| 0.01 * 1.4f64.powi(k)).collect();
    let accs: Vec<f64> = grid.iter().map(|&s| est.accuracy(s)).collect();
    let monotone = accs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        ok && monotone,
        format!(
            "{}; monotone over {} sigmas: {monotone}",
            parts.join("; "),
            grid.len()
        ),
    )
}

fn bo_speedup() -> Outcome {
    let config = ExperimentConfig {
        name: "forrester-speedup".into(),
        replications: 20,
        benchmark: "forrester1d".into(),
        expert_targets: vec![0.9],
        m: vec![100],
        j: 20,
        baseline: true,
        ..ExperimentConfig::default()
    };
    let r = run_bo_experiment(&config, None).unwrap();
    let grid_min = (0..=1_000_000)
        .map(|i| forrester(i as f64 / 1e6).unwrap())
        .fold(f64::INFINITY, f64::min);
    let base10 = r.mean_at("BNN", 10).unwrap();
    let aug10 = r.mean_at("PBNN-90%", 10).unwrap();
    let aug_final = r.mean_at("PBNN-90%", 20).unwrap();
    let base_final = r.mean_at("BNN", 20).unwrap();
    outcome(
        aug10 <= base10 && (aug_final - grid_min).abs() <= 0.5,
        format!(
            "mean y_best at j=10: PBNN-90% {aug10:.3} vs BNN {base10:.3}; final PBNN-90% {aug_final:.3} (BNN {base_final:.3}), grid minimum {grid_min:.4}"
        ),
    )
}

/// Objective wrapper counting true evaluations.
struct Counting<'a> {
    inner: &'a Benchmark,
    calls: Cell<usize>,
}

impl Objective for Counting<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, u: &[f64]) -> Result<f64, BenchError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.evaluate(u)
    }
}

fn accounting() -> Outcome {
    let f = Benchmark::forrester1d();
    let config = BoConfig::default();
    let pool = config.pool(1, 3).unwrap();
    let run = |seed| {
        let counting = Counting {
            inner: &f,
            calls: Cell::new(0),
        };
        let out = run_algorithm1::<_, dyn ExpertOracle>(&counting, None, &pool, 0, 5, &config, seed).unwrap();
        (out.history, counting.calls.get())
    };
    let (a, calls) = run(3);
    let (b, _) = run(3);
    let ys: Vec<f64> = a.iterations.iter().map(|r| r.y_best).collect();
    let monotone = ys.windows(2).all(|w| w[1] <= w[0]);
    let bytes = |h: &BoHistory| {
        let mut v = Vec::new();
        h.write_jsonl(&mut v).unwrap();
        v
    };
    let same = a == b && bytes(&a) == bytes(&b);
    let recorded: HashSet<usize> = a.iterations.iter().map(|r| r.j).collect();
    outcome(
        calls == 10 && a.evaluations().len() == 10 && recorded.len() == 5 && monotone && same,
        format!("{calls} objective calls; y_best monotone: {monotone}; reproducible: {same}"),
    )
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 8] = [
        ("gradients", "Gradient correctness", gradients),
        ("identities", "KL and entropy identities", identities),
        ("ei", "EI oracle agreement", expected_improvement),
        ("shape", "Shape recovery", shape_recovery),
        ("accuracy", "Elicitation accuracy", elicitation_accuracy),
        ("calibration", "Expert calibration", calibration),
        ("bo", "BO speedup", bo_speedup),
        ("accounting", "Run accounting and determinism", accounting),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (key, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name} ({:.0}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
}
