//! Hard parameter sharing between the expert surrogate and the objective
//! surrogate.
//!
//! Both tasks read the same tanh trunk `phi`; each has its own scalar head:
//! `g(x) = beta_g . phi(x)` and `f(x) = beta_f . phi(x)`. The variational
//! parameters live in one vector laid out as `[trunk | head_g | head_f]`, so a
//! task's weights are the trunk slice followed by its head slice.
//!
//! Round `j` of optimization minimizes `w_g L_g + w_f L_f` with
//! `w_g = a / (a + 1)`, `w_f = 1 / (a + 1)` and `a = alpha^(j - 1)`.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{NetError, NetSpec, Tape};
use crate::pbnn::{connection, LatentSampler, Pbnn, PreferenceDataset, PreferencePair};
use crate::varnet::{
    bbb_step, gaussian_nll_point, EvalDataset, KlReduction, PosteriorInit, SampledObjective, VarError,
    VariationalAdam, VariationalParams,
};

#[derive(Debug, Error)]
pub enum MtlError {
    #[error("invalid loss weighting: {0}")]
    Weights(String),
    #[error("objective dataset is empty")]
    EmptyObjectiveData,
    #[error("expert dataset is empty while its loss weight is positive")]
    EmptyExpertData,
    #[error("dimension mismatch: model takes {expected} inputs, data has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("elicitation network has no hidden layer to share")]
    NoTrunk,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training failed: {0}")]
    Var(#[from] VarError),
}

pub type Result<T> = std::result::Result<T, MtlError>;

/// Loss weights `(w_g, w_f)` for acquisition round `j`.
pub fn combined_weights(j: usize, alpha: f64) -> Result<(f64, f64)> {
    if j == 0 {
        return Err(MtlError::Weights("round index j starts at 1".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MtlError::Weights(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let a = alpha.powi((j - 1).min(i32::MAX as usize) as i32);
    let w_f = 1.0 / (a + 1.0);
    Ok((1.0 - w_f, w_f))
}

/// Training settings for one optimization round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlConfig {
    pub epochs: usize,
    pub lr: f64,
    pub pref_batch: usize,
    pub reg_batch: usize,
    pub mc_samples: usize,
    pub kl_weight: f64,
    pub kl_reduction: KlReduction,
    /// Observation noise on standardized objective values.
    pub noise_sigma: f64,
    pub alpha: f64,
    /// Restart every round from the post-elicitation model instead of
    /// continuing from the previous round.
    pub from_scratch: bool,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            pref_batch: 10,
            reg_batch: 5,
            mc_samples: 1,
            kl_weight: 1.0,
            kl_reduction: KlReduction::Mean,
            noise_sigma: 0.1,
            alpha: 0.95,
            from_scratch: false,
        }
    }
}

/// Mean and scale used to standardize objective values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    /// Sample mean and standard deviation of `ys`; the scale falls back to 1
    /// for fewer than two values or a constant sample.
    pub fn fit(ys: &[f64]) -> Self {
        if ys.is_empty() {
            return Self::identity();
        }
        let mean = crate::stats::mean(ys);
        let sd = crate::stats::std_dev(ys);
        Self {
            mean,
            scale: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            scale: 1.0,
        }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.mean + self.scale * z
    }
}

/// The shared-trunk two-head Bayesian network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MtlModel {
    trunk: NetSpec,
    /// Trunk followed by a scalar head; the layout of either task's weights.
    task_net: NetSpec,
    pub vp: VariationalParams,
    optimizer: VariationalAdam,
    /// Scaling of objective values seen by the f head.
    pub standardizer: Standardizer,
}

impl MtlModel {
    /// Copies the trained elicitation network: its hidden layers become the
    /// trunk, its output layer becomes `beta_g`, and `beta_f` starts as a copy
    /// of `beta_g`.
    pub fn from_pbnn(net: &Pbnn) -> Result<Self> {
        let layers = net.spec.layers();
        if layers.len() < 2 {
            return Err(MtlError::NoTrunk);
        }
        let trunk = NetSpec::new(layers[..layers.len() - 1].to_vec())?;
        let task_net = net.spec.clone();
        let t = trunk.param_count();
        let mut mu = net.vp.mu.clone();
        let mut rho = net.vp.rho.clone();
        mu.extend_from_within(t..);
        rho.extend_from_within(t..);
        let vp = VariationalParams::new(mu, rho, net.vp.prior_sigma)?;
        Ok(Self {
            optimizer: VariationalAdam::new(vp.len()),
            trunk,
            task_net,
            vp,
            standardizer: Standardizer::identity(),
        })
    }

    /// Untrained model with tanh trunk `hidden`.
    pub fn fresh<R: Rng + ?Sized>(
        d: usize,
        hidden: &[usize],
        prior_sigma: f64,
        init: PosteriorInit,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(MtlError::NoTrunk);
        }
        let trunk = NetSpec::trunk(d, hidden)?;
        let task_net = NetSpec::mlp(d, hidden)?;
        let len = task_net.param_count() + (task_net.param_count() - trunk.param_count());
        let vp = VariationalParams::init(len, prior_sigma, init, rng);
        Ok(Self {
            optimizer: VariationalAdam::new(len),
            trunk,
            task_net,
            vp,
            standardizer: Standardizer::identity(),
        })
    }

    pub fn dim(&self) -> usize {
        self.trunk.in_width()
    }

    pub fn trunk_spec(&self) -> &NetSpec {
        &self.trunk
    }

    /// Layout of either task's weight vector (trunk then head).
    pub fn task_spec(&self) -> &NetSpec {
        &self.task_net
    }

    pub fn trunk_range(&self) -> Range<usize> {
        0..self.trunk.param_count()
    }

    pub fn head_g_range(&self) -> Range<usize> {
        let t = self.trunk.param_count();
        t..self.task_net.param_count()
    }

    pub fn head_f_range(&self) -> Range<usize> {
        let n = self.task_net.param_count();
        n..self.vp.len()
    }

    /// Task-g weights extracted from a full sample.
    pub fn g_weights(&self, full: &[f64]) -> Vec<f64> {
        full[..self.task_net.param_count()].to_vec()
    }

    /// Task-f weights extracted from a full sample.
    pub fn f_weights(&self, full: &[f64]) -> Vec<f64> {
        let mut w = full[self.trunk_range()].to_vec();
        w.extend_from_slice(&full[self.head_f_range()]);
        w
    }

    /// `g(x)` under `t` weight samples.
    pub fn predict_g<R: Rng + ?Sized>(&self, x: &[f64], t: usize, rng: &mut R) -> Result<Vec<f64>> {
        (0..t)
            .map(|_| {
                let w = self.vp.draw(rng);
                Ok(self.task_net.forward(&self.g_weights(&w), x)?)
            })
            .collect()
    }

    /// Standardized `f(x)` under `t` weight samples.
    pub fn predict_f<R: Rng + ?Sized>(&self, x: &[f64], t: usize, rng: &mut R) -> Result<Vec<f64>> {
        (0..t)
            .map(|_| {
                let w = self.vp.draw(rng);
                Ok(self.task_net.forward(&self.f_weights(&w), x)?)
            })
            .collect()
    }

    /// `t` joint draws of `f` at every point in native units; row `s` is draw `s`.
    pub fn sample_f_native<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        (0..t)
            .map(|_| {
                let w = self.f_weights(&self.vp.draw(rng));
                let mut out = self.task_net.forward_batch(&w, &flat, points.len())?;
                out.iter_mut().for_each(|v| *v = self.standardizer.inverse(*v));
                Ok(out)
            })
            .collect()
    }
}

impl LatentSampler for MtlModel {
    fn dim(&self) -> usize {
        self.trunk.in_width()
    }

    fn sample_latents<R: Rng + ?Sized>(&self, points: &[Vec<f64>], t: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        (0..t)
            .map(|_| {
                let w = self.g_weights(&self.vp.draw(rng));
                self.task_net
                    .forward_batch(&w, &flat, points.len())
                    .expect("points match the model input")
            })
            .collect()
    }
}

/// One combined minibatch: preference pairs for the g head, standardized
/// objective values for the f head.
pub struct CombinedObjective<'a> {
    model: &'a MtlModel,
    pairs: Vec<&'a PreferencePair>,
    points: Vec<(&'a [f64], f64)>,
    /// Multipliers turning minibatch sums into the per-step share of each task loss.
    g_scale: f64,
    f_scale: f64,
    noise_sigma: f64,
    kl: Vec<(Range<usize>, f64)>,
    tape: Tape,
    tape_prime: Tape,
    task_w: Vec<f64>,
    task_grad: Vec<f64>,
}

impl<'a> CombinedObjective<'a> {
    /// `g_scale` and `f_scale` multiply the minibatch NLL sums; `kl_trunk`,
    /// `kl_g` and `kl_f` multiply the KL of each parameter segment.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a MtlModel,
        pairs: Vec<&'a PreferencePair>,
        points: Vec<(&'a [f64], f64)>,
        g_scale: f64,
        f_scale: f64,
        noise_sigma: f64,
        kl_trunk: f64,
        kl_g: f64,
        kl_f: f64,
    ) -> Self {
        let n = model.task_net.param_count();
        Self {
            kl: vec![
                (model.trunk_range(), kl_trunk),
                (model.head_g_range(), kl_g),
                (model.head_f_range(), kl_f),
            ],
            model,
            pairs,
            points,
            g_scale,
            f_scale,
            noise_sigma,
            tape: Tape::new(),
            tape_prime: Tape::new(),
            task_w: vec![0.0; n],
            task_grad: vec![0.0; n],
        }
    }

    fn scatter(&self, grad: &mut [f64], head: Range<usize>) {
        let t = self.model.trunk.param_count();
        for (g, d) in grad[..t].iter_mut().zip(&self.task_grad[..t]) {
            *g += d;
        }
        for (g, d) in grad[head].iter_mut().zip(&self.task_grad[t..]) {
            *g += d;
        }
    }
}

impl SampledObjective for CombinedObjective<'_> {
    fn param_count(&self) -> usize {
        self.model.vp.len()
    }

    fn nll_grad(&mut self, weights: &[f64], grad: &mut [f64]) -> f64 {
        let net = &self.model.task_net;
        let t = self.model.trunk.param_count();
        let mut total = 0.0;

        if self.g_scale != 0.0 && !self.pairs.is_empty() {
            self.task_w.copy_from_slice(&weights[..net.param_count()]);
            self.task_grad.iter_mut().for_each(|g| *g = 0.0);
            for pair in &self.pairs {
                net.forward_tape(&self.task_w, &pair.x, &mut self.tape);
                let a = self.tape.output()[0];
                net.forward_tape(&self.task_w, &pair.x_prime, &mut self.tape_prime);
                let b = self.tape_prime.output()[0];
                let p = connection(a, b);
                let target = pair.target();
                let pc = p.clamp(crate::pbnn::PROB_EPS, 1.0 - crate::pbnn::PROB_EPS);
                total += -self.g_scale * (target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
                if pc == p {
                    let slope = self.g_scale * (p - target);
                    net.backward_tape(&self.task_w, &mut self.tape, &[slope], &mut self.task_grad);
                    net.backward_tape(&self.task_w, &mut self.tape_prime, &[-slope], &mut self.task_grad);
                }
            }
            self.scatter(grad, self.model.head_g_range());
        }

        if self.f_scale != 0.0 && !self.points.is_empty() {
            self.task_w[..t].copy_from_slice(&weights[..t]);
            self.task_w[t..].copy_from_slice(&weights[self.model.head_f_range()]);
            self.task_grad.iter_mut().for_each(|g| *g = 0.0);
            for &(x, y) in &self.points {
                net.forward_tape(&self.task_w, x, &mut self.tape);
                let (nll, slope) = gaussian_nll_point(self.tape.output()[0], y, self.noise_sigma);
                total += self.f_scale * nll;
                net.backward_tape(&self.task_w, &mut self.tape, &[self.f_scale * slope], &mut self.task_grad);
            }
            self.scatter(grad, self.model.head_f_range());
        }
        total
    }

    fn kl_weights(&self) -> Vec<(Range<usize>, f64)> {
        self.kl.clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub epoch_losses: Vec<f64>,
    pub weights: (f64, f64),
}

/// Runs `config.epochs` epochs of combined updates with loss weights
/// `(w_g, w_f)`. Objective values are re-standardized over `d_f` first.
///
/// An epoch has `S = max(ceil(|D_g| / b_g), ceil(|D_f| / b_f))` steps; the
/// smaller dataset's minibatches wrap around. Each step's loss is an unbiased
/// estimate of `L_j / S`.
pub fn mtl_train_round<R: Rng + ?Sized>(
    model: &mut MtlModel,
    d_g: &PreferenceDataset,
    d_f: &EvalDataset,
    weights: (f64, f64),
    config: &MtlConfig,
    rng: &mut R,
) -> Result<RoundReport> {
    let (w_g, w_f) = weights;
    if !(w_g >= 0.0 && w_f >= 0.0 && w_g.is_finite() && w_f.is_finite()) {
        return Err(MtlError::Weights(format!("({w_g}, {w_f})")));
    }
    if d_f.is_empty() {
        return Err(MtlError::EmptyObjectiveData);
    }
    let use_g = w_g > 0.0;
    if use_g && d_g.is_empty() {
        return Err(MtlError::EmptyExpertData);
    }
    if use_g && d_g.dim() != model.dim() {
        return Err(MtlError::Dimension {
            expected: model.dim(),
            got: d_g.dim(),
        });
    }
    if let Some(x) = d_f.xs.iter().find(|x| x.len() != model.dim()) {
        return Err(MtlError::Dimension {
            expected: model.dim(),
            got: x.len(),
        });
    }

    model.standardizer = Standardizer::fit(&d_f.ys);
    let targets: Vec<f64> = d_f.ys.iter().map(|&y| model.standardizer.forward(y)).collect();

    let bg = config.pref_batch.max(1);
    let bf = config.reg_batch.max(1);
    let n_g = if use_g { d_g.len() } else { 0 };
    let n_f = d_f.len();
    let chunks_g = n_g.div_ceil(bg);
    let chunks_f = n_f.div_ceil(bf);
    let steps = chunks_g.max(chunks_f);
    let kl_base = config.kl_weight * config.kl_reduction.factor(model.vp.len()) / steps as f64;

    let mut order_g: Vec<usize> = (0..n_g).collect();
    let mut order_f: Vec<usize> = (0..n_f).collect();
    let mut report = RoundReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        weights,
    };
    let mut optimizer = std::mem::replace(&mut model.optimizer, VariationalAdam::new(0));
    let mut vp = model.vp.clone();
    let mut result = Ok(());
    'epochs: for _ in 0..config.epochs {
        order_g.shuffle(rng);
        order_f.shuffle(rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let (pairs, g_scale) = if use_g {
                let chunk = order_g.chunks(bg).nth(step % chunks_g).unwrap_or(&[]);
                let pairs: Vec<&PreferencePair> = chunk.iter().map(|&i| &d_g.pairs()[i]).collect();
                let scale = w_g * n_g as f64 / (pairs.len() as f64 * steps as f64);
                (pairs, scale)
            } else {
                (Vec::new(), 0.0)
            };
            let chunk = order_f.chunks(bf).nth(step % chunks_f).unwrap_or(&[]);
            let points: Vec<(&[f64], f64)> = chunk.iter().map(|&i| (d_f.xs[i].as_slice(), targets[i])).collect();
            let f_scale = w_f * n_f as f64 / (points.len() as f64 * steps as f64);
            let mut obj = CombinedObjective::new(
                model,
                pairs,
                points,
                g_scale,
                f_scale,
                config.noise_sigma,
                kl_base,
                kl_base * w_g,
                kl_base * w_f,
            );
            // The objective borrows `model`; the live posterior is `vp`.
            match bbb_step(&mut vp, &mut obj, &mut optimizer, config.lr, config.mc_samples, step, rng) {
                Ok(est) => epoch_loss += est.loss,
                Err(e) => {
                    result = Err(e);
                    break 'epochs;
                }
            }
        }
        report.epoch_losses.push(epoch_loss);
    }
    model.vp = vp;
    model.optimizer = optimizer;
    result?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::forrester;
    use crate::netcore::{Activation, LayerSpec};
    use crate::pbnn::ElicitationConfig;
    use crate::varnet::elbo_with_noise;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> MtlModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MtlModel::fresh(1, &[6, 4], 0.1, PosteriorInit { mu_std: 0.5, sigma: 0.05 }, &mut rng).unwrap()
    }

    #[test]
    fn weights_examples() {
        assert_eq!(combined_weights(1, 0.3).unwrap(), (0.5, 0.5));
        let (g, f) = combined_weights(2, 0.95).unwrap();
        assert_relative_eq!(g, 0.4872, epsilon = 1e-4);
        assert_relative_eq!(f, 0.5128, epsilon = 1e-4);
        for j in 1..50 {
            assert_eq!(combined_weights(j, 1.0).unwrap(), (0.5, 0.5));
        }
        assert!(combined_weights(0, 0.9).is_err());
        assert!(combined_weights(3, 0.0).is_err());
        assert!(combined_weights(3, 1.2).is_err());
    }

    #[test]
    fn layout_ranges_partition_the_vector() {
        let m = small_model(0);
        assert_eq!(m.trunk_range().end, m.head_g_range().start);
        assert_eq!(m.head_g_range().end, m.head_f_range().start);
        assert_eq!(m.head_f_range().end, m.vp.len());
        assert_eq!(m.head_g_range().len(), m.head_f_range().len());
        assert_eq!(m.head_g_range().len(), 5);
    }

    #[test]
    fn zero_heads_predict_zero() {
        let mut m = small_model(1);
        for i in m.head_g_range().chain(m.head_f_range()) {
            m.vp.mu[i] = 0.0;
            m.vp.rho[i] = f64::NEG_INFINITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in [0.0, 0.3, 1.0] {
            assert!(m.predict_g(&[x], 5, &mut rng).unwrap().iter().all(|&v| v == 0.0));
            assert!(m.predict_f(&[x], 5, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn warm_start_is_bit_exact_and_heads_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Pbnn::new(1, ElicitationConfig::bo_stage(), &mut rng).unwrap();
        let m = MtlModel::from_pbnn(&net).unwrap();
        let grid: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0]).collect();
        // The first draw consumes the same leading noise in both models.
        let a = net.sample_latents(&grid, 1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = m.sample_latents(&grid, 1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let spec = m.task_spec();
        for x in &grid {
            let g = spec.forward(&m.g_weights(&m.vp.mu), x).unwrap();
            assert_eq!(g, net.spec.forward(&net.vp.mu, x).unwrap());
            assert_eq!(g, spec.forward(&m.f_weights(&m.vp.mu), x).unwrap());
        }
    }

    #[test]
    fn identity_trunk_hand_case() {
        // trunk: 2 -> 2 identity (W = I, b = 0); heads (1, 1 | 0).
        let trunk = NetSpec::new(vec![LayerSpec::new(2, 2, Activation::Identity)]).unwrap();
        let head = NetSpec::new(vec![LayerSpec::new(2, 1, Activation::Identity)]).unwrap();
        let task_net = trunk.then(&head).unwrap();
        let mu = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let m = MtlModel {
            optimizer: VariationalAdam::new(mu.len()),
            vp: VariationalParams::deterministic(mu, 0.1),
            trunk,
            task_net,
            standardizer: Standardizer::identity(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.predict_f(&[0.25, 0.5], 1, &mut rng).unwrap(), vec![0.75]);
    }

    #[test]
    fn trunk_perturbation_moves_both_heads() {
        let m = small_model(4);
        let mut moved = m.clone();
        moved.vp.mu[0] += 0.7;
        let spec = m.task_spec();
        let x = [0.4];
        let g0 = spec.forward(&m.g_weights(&m.vp.mu), &x).unwrap();
        let f0 = spec.forward(&m.f_weights(&m.vp.mu), &x).unwrap();
        let g1 = spec.forward(&moved.g_weights(&moved.vp.mu), &x).unwrap();
        let f1 = spec.forward(&moved.f_weights(&moved.vp.mu), &x).unwrap();
        assert_ne!(g0, g1);
        assert_ne!(f0, f1);
    }

    fn toy_data(rng: &mut ChaCha8Rng) -> (PreferenceDataset, EvalDataset) {
        let mut d_g = PreferenceDataset::new(1);
        for _ in 0..12 {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            d_g.push(PreferencePair::new(vec![a], vec![b], forrester(a).unwrap() >= forrester(b).unwrap()).unwrap())
                .unwrap();
        }
        let mut d_f = EvalDataset::default();
        for i in 0..6 {
            let x = i as f64 / 5.0;
            d_f.push(vec![x], forrester(x).unwrap());
        }
        (d_g, d_f)
    }

    #[test]
    fn task_gradients_touch_only_their_head() {
        let m = small_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d_g, d_f) = toy_data(&mut rng);
        let pairs: Vec<&PreferencePair> = d_g.pairs().iter().collect();
        let points: Vec<(&[f64], f64)> = d_f.xs.iter().map(|x| x.as_slice()).zip(d_f.ys.iter().copied()).collect();
        let noise: Vec<f64> = (0..m.vp.len()).map(|_| rng.random::<f64>() - 0.5).collect();

        let mut g_only = CombinedObjective::new(&m, pairs.clone(), points.clone(), 1.0, 0.0, 0.1, 0.0, 0.0, 0.0);
        let est = elbo_with_noise(&m.vp, &mut g_only, std::slice::from_ref(&noise)).unwrap();
        assert!(m.head_f_range().all(|i| est.grad_mu[i] == 0.0 && est.grad_rho[i] == 0.0));
        assert!(m.head_g_range().any(|i| est.grad_mu[i] != 0.0));
        assert!(m.trunk_range().any(|i| est.grad_mu[i] != 0.0));

        let mut f_only = CombinedObjective::new(&m, pairs, points, 0.0, 1.0, 0.1, 0.0, 0.0, 0.0);
        let est = elbo_with_noise(&m.vp, &mut f_only, std::slice::from_ref(&noise)).unwrap();
        assert!(m.head_g_range().all(|i| est.grad_mu[i] == 0.0 && est.grad_rho[i] == 0.0));
        assert!(m.head_f_range().any(|i| est.grad_mu[i] != 0.0));
        assert!(m.trunk_range().any(|i| est.grad_mu[i] != 0.0));
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let m = small_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d_g, d_f) = toy_data(&mut rng);
        let pairs: Vec<&PreferencePair> = d_g.pairs().iter().collect();
        let points: Vec<(&[f64], f64)> =
            d_f.xs.iter().map(|x| x.as_slice()).zip(d_f.ys.iter().map(|y| y / 5.0)).collect();
        let noise: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..m.vp.len()).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let loss = |vp: &VariationalParams| {
            let mut obj = CombinedObjective::new(&m, pairs.clone(), points.clone(), 0.7, 0.3, 0.5, 0.01, 0.004, 0.006);
            elbo_with_noise(vp, &mut obj, &noise).unwrap()
        };
        let est = loss(&m.vp);
        let h = 1e-6;
        for i in (0..m.vp.len()).step_by(3) {
            let mut up = m.vp.clone();
            let mut down = m.vp.clone();
            up.mu[i] += h;
            down.mu[i] -= h;
            let fd = (loss(&up).loss - loss(&down).loss) / (2.0 * h);
            assert!((fd - est.grad_mu[i]).abs() <= 1e-4 * fd.abs().max(1.0), "mu {i}: {fd} vs {}", est.grad_mu[i]);
        }
    }

    #[test]
    fn zero_f_weight_reduces_to_elicitation_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (d_g, d_f) = toy_data(&mut rng);
        let mut m = small_model(11);
        let before = m.vp.clone();
        let config = MtlConfig {
            epochs: 5,
            ..MtlConfig::default()
        };
        mtl_train_round(&mut m, &d_g, &d_f, (1.0, 0.0), &config, &mut rng).unwrap();
        for i in m.head_f_range() {
            assert_eq!(m.vp.mu[i], before.mu[i]);
        }
        assert!(m.head_g_range().any(|i| m.vp.mu[i] != before.mu[i]));
    }

    #[test]
    fn combined_loss_decreases_on_toy_data() {
        let mut decreasing = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (d_g, d_f) = toy_data(&mut rng);
            let mut m = small_model(200 + seed);
            let config = MtlConfig {
                epochs: 60,
                ..MtlConfig::default()
            };
            let report = mtl_train_round(&mut m, &d_g, &d_f, (0.5, 0.5), &config, &mut rng).unwrap();
            assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
            let head: f64 = report.epoch_losses[..10].iter().sum();
            let tail: f64 = report.epoch_losses[50..].iter().sum();
            if tail < head {
                decreasing += 1;
            }
        }
        assert!(decreasing >= 3, "{decreasing} of 5 seeds decreased");
    }

    #[test]
    fn errors() {
        let mut m = small_model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d_g, d_f) = toy_data(&mut rng);
        let cfg = MtlConfig::default();
        assert!(matches!(
            mtl_train_round(&mut m, &d_g, &EvalDataset::default(), (0.5, 0.5), &cfg, &mut rng),
            Err(MtlError::EmptyObjectiveData)
        ));
        assert!(matches!(
            mtl_train_round(&mut m, &PreferenceDataset::new(1), &d_f, (0.5, 0.5), &cfg, &mut rng),
            Err(MtlError::EmptyExpertData)
        ));
        assert!(mtl_train_round(&mut m, &PreferenceDataset::new(1), &d_f, (0.0, 1.0), &cfg, &mut rng).is_ok());
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit(&[1.0, 3.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.scale, 2.0);
        assert_relative_eq!(s.inverse(s.forward(4.2)), 4.2, epsilon = 1e-14);
        assert_eq!(Standardizer::fit(&[7.0]).scale, 1.0);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(j in 1usize..10_000, alpha in 1e-6f64..=1.0) {
            let (g, f) = combined_weights(j, alpha).unwrap();
            prop_assert_eq!(g + f, 1.0);
            prop_assert!(g <= f);
        }
    }
}
