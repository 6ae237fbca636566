//! Diagonal-Gaussian variational posteriors over network weights.
//!
//! Weights are reparameterized as `w = mu + softplus(rho) * eps` with
//! `eps ~ N(0, I)`, and trained with Bayes by Backprop: the likelihood term of
//! the negative ELBO is estimated by Monte Carlo over `eps`, while the KL to
//! the isotropic Gaussian prior is computed in closed form.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{FlatParams, NetError, NetSpec, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum VarError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VarError>;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
#[inline]
fn softplus_and_slope(x: f64) -> (f64, f64) {
    if x > 30.0 {
        (x, sigmoid(x))
    } else {
        let e = x.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Variational posterior `q(w) = N(mu, diag(softplus(rho)^2))` with an
/// isotropic Gaussian prior `N(0, prior_sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior_sigma: f64,
}

/// How the closed-form KL enters the negative ELBO.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    /// Summed over all weights.
    Sum,
    /// Averaged over the weights, as torchbnn's KL loss does by default.
    #[default]
    Mean,
}

impl KlReduction {
    /// Multiplier turning the summed KL of `n_params` weights into the penalty.
    pub fn factor(self, n_params: usize) -> f64 {
        match self {
            Self::Sum => 1.0,
            Self::Mean => 1.0 / n_params.max(1) as f64,
        }
    }
}

/// Initialization of a fresh posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorInit {
    /// Standard deviation of the random posterior means.
    pub mu_std: f64,
    /// Initial posterior standard deviation, `softplus(rho)`.
    pub sigma: f64,
}

impl Default for PosteriorInit {
    fn default() -> Self {
        Self {
            mu_std: 1.0,
            sigma: 0.05,
        }
    }
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>, prior_sigma: f64) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(VarError::Shape {
                expected: mu.len(),
                got: rho.len(),
            });
        }
        if !(prior_sigma > 0.0) {
            return Err(VarError::Precondition(format!(
                "prior sigma must be positive, got {prior_sigma}"
            )));
        }
        Ok(Self {
            mu,
            rho,
            prior_sigma,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        len: usize,
        prior_sigma: f64,
        init: PosteriorInit,
        rng: &mut R,
    ) -> Self {
        let mu = (0..len)
            .map(|_| init.mu_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            mu,
            rho: vec![softplus_inv(init.sigma); len],
            prior_sigma,
        }
    }

    /// A posterior with zero variance centred on `mu`.
    pub fn deterministic(mu: Vec<f64>, prior_sigma: f64) -> Self {
        let len = mu.len();
        Self {
            mu,
            rho: vec![f64::NEG_INFINITY; len],
            prior_sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// Copy of the parameters in `range`.
    pub fn segment(&self, range: Range<usize>) -> Self {
        Self {
            mu: self.mu[range.clone()].to_vec(),
            rho: self.rho[range].to_vec(),
            prior_sigma: self.prior_sigma,
        }
    }

    /// `mu + softplus(rho) * noise`.
    pub fn sample_weights(&self, noise: &[f64]) -> Result<FlatParams> {
        if noise.len() != self.len() {
            return Err(VarError::Shape {
                expected: self.len(),
                got: noise.len(),
            });
        }
        Ok(FlatParams(
            self.mu
                .iter()
                .zip(&self.rho)
                .zip(noise)
                .map(|((&m, &r), &e)| reparam(m, softplus(r), e))
                .collect(),
        ))
    }

    /// Draws one weight vector from the posterior.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> FlatParams {
        FlatParams(
            self.mu
                .iter()
                .zip(&self.rho)
                .map(|(&m, &r)| reparam(m, softplus(r), rng.sample(StandardNormal)))
                .collect(),
        )
    }

    /// Closed-form `KL[q || p]` summed over all weights.
    pub fn kl_to_prior(&self) -> f64 {
        self.kl_range(0..self.len())
    }

    pub fn kl_range(&self, range: Range<usize>) -> f64 {
        let ps = self.prior_sigma;
        let inv_2ps2 = 0.5 / (ps * ps);
        self.mu[range.clone()]
            .iter()
            .zip(&self.rho[range])
            .map(|(&m, &r)| {
                let s = softplus(r);
                (ps / s).ln() + (s * s + m * m) * inv_2ps2 - 0.5
            })
            .sum()
    }

    fn check_finite(&self) -> bool {
        self.mu.iter().chain(&self.rho).all(|v| v.is_finite())
    }
}

// Keeps `mu` exact when the scale underflows to zero and noise is finite.
#[inline]
fn reparam(mu: f64, sigma: f64, eps: f64) -> f64 {
    if sigma == 0.0 {
        mu
    } else {
        mu + sigma * eps
    }
}

/// Gaussian observation model on (standardized) regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionLikelihood {
    pub noise_sigma: f64,
}

impl Default for RegressionLikelihood {
    fn default() -> Self {
        Self { noise_sigma: 0.1 }
    }
}

/// Observed `(x, y)` pairs of the objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalDataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

impl EvalDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.xs.push(x);
        self.ys.push(y);
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Negative Gaussian log-likelihood of `data` under the network output.
pub fn regression_nll(
    spec: &NetSpec,
    params: &[f64],
    data: &EvalDataset,
    lik: RegressionLikelihood,
) -> Result<f64> {
    if data.is_empty() {
        return Err(VarError::Precondition("empty regression dataset".into()));
    }
    let mut total = 0.0;
    for (x, &y) in data.xs.iter().zip(&data.ys) {
        let r = (y - spec.forward(params, x)?) / lik.noise_sigma;
        total += 0.5 * r * r + lik.noise_sigma.ln() + 0.5 * LN_2PI;
    }
    Ok(total)
}

/// Per-point Gaussian NLL and its derivative with respect to the prediction.
#[inline]
pub fn gaussian_nll_point(prediction: f64, target: f64, noise_sigma: f64) -> (f64, f64) {
    let r = (target - prediction) / noise_sigma;
    (
        0.5 * r * r + noise_sigma.ln() + 0.5 * LN_2PI,
        -r / noise_sigma,
    )
}

/// A data term that can be evaluated for a concrete weight sample.
pub trait SampledObjective {
    /// Number of network parameters the objective expects.
    fn param_count(&self) -> usize;

    /// Negative log-likelihood at `weights`; adds `d nll / d weights` into `grad`.
    fn nll_grad(&mut self, weights: &[f64], grad: &mut [f64]) -> f64;

    /// KL multipliers for parameter segments; parameters outside every segment
    /// carry no KL penalty.
    fn kl_weights(&self) -> Vec<(Range<usize>, f64)>;
}

/// Monte Carlo negative ELBO and its gradients for fixed noise draws.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// Evaluates the reparameterized negative ELBO using the supplied noise
/// realizations (one per Monte Carlo sample).
pub fn elbo_with_noise<O: SampledObjective + ?Sized>(
    vp: &VariationalParams,
    objective: &mut O,
    noises: &[Vec<f64>],
) -> Result<ElboEstimate> {
    let n = vp.len();
    if objective.param_count() != n {
        return Err(VarError::Shape {
            expected: objective.param_count(),
            got: n,
        });
    }
    if noises.is_empty() {
        return Err(VarError::Precondition("at least one Monte Carlo sample".into()));
    }
    let (sigmas, slopes): (Vec<f64>, Vec<f64>) =
        vp.rho.iter().map(|&r| softplus_and_slope(r)).unzip();
    let mut grad_mu = vec![0.0; n];
    let mut grad_rho = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut gw = vec![0.0; n];
    let inv_s = 1.0 / noises.len() as f64;
    let mut nll = 0.0;
    for eps in noises {
        if eps.len() != n {
            return Err(VarError::Shape {
                expected: n,
                got: eps.len(),
            });
        }
        for i in 0..n {
            weights[i] = reparam(vp.mu[i], sigmas[i], eps[i]);
        }
        gw.iter_mut().for_each(|g| *g = 0.0);
        nll += objective.nll_grad(&weights, &mut gw) * inv_s;
        for i in 0..n {
            let g = gw[i] * inv_s;
            grad_mu[i] += g;
            if slopes[i] != 0.0 {
                grad_rho[i] += g * eps[i] * slopes[i];
            }
        }
    }

    let ps = vp.prior_sigma;
    let ps2 = ps * ps;
    let ln_ps = ps.ln();
    let mut kl = 0.0;
    for (range, weight) in objective.kl_weights() {
        if weight == 0.0 {
            continue;
        }
        let mut seg = 0.0;
        for i in range {
            let (m, sg) = (vp.mu[i], sigmas[i]);
            seg += ln_ps - sg.ln() + 0.5 * (sg * sg + m * m) / ps2 - 0.5;
            grad_mu[i] += weight * m / ps2;
            grad_rho[i] += weight * (-1.0 / sg + sg / ps2) * slopes[i];
        }
        kl += weight * seg;
    }
    Ok(ElboEstimate {
        loss: kl + nll,
        kl,
        nll,
        grad_mu,
        grad_rho,
    })
}

/// ADAM moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Optimizer state for `(mu, rho)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalAdam {
    pub mu: Adam,
    pub rho: Adam,
}

impl VariationalAdam {
    pub fn new(len: usize) -> Self {
        Self {
            mu: Adam::new(len),
            rho: Adam::new(len),
        }
    }
}

/// Cosine annealing between `lr_max` and `lr_min` with half-period `period`
/// epochs (the curve continues periodically past `period`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineAnnealing {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: usize,
}

impl CosineAnnealing {
    pub fn lr(&self, epoch: usize) -> f64 {
        let phase = std::f64::consts::PI * epoch as f64 / self.period as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

/// One ADAM update of `(mu, rho)` from a fresh `mc_samples`-draw estimate of
/// the negative ELBO gradient. Returns the estimate used for the update.
pub fn bbb_step<O, R>(
    vp: &mut VariationalParams,
    objective: &mut O,
    optimizer: &mut VariationalAdam,
    lr: f64,
    mc_samples: usize,
    iteration: usize,
    rng: &mut R,
) -> Result<ElboEstimate>
where
    O: SampledObjective + ?Sized,
    R: Rng + ?Sized,
{
    if mc_samples == 0 {
        return Err(VarError::Precondition("mc_samples must be at least 1".into()));
    }
    let noises: Vec<Vec<f64>> = (0..mc_samples)
        .map(|_| (0..vp.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let est = elbo_with_noise(vp, objective, &noises)?;
    // A collapsed posterior (sigma = 0) has no usable scale gradient.
    let collapsed = vp.rho.iter().any(|r| !r.is_finite());
    let finite = est.loss.is_finite()
        && est.grad_mu.iter().all(|g| g.is_finite())
        && (collapsed || est.grad_rho.iter().all(|g| g.is_finite()));
    if !finite {
        return Err(VarError::Diverged {
            iteration,
            detail: format!("non-finite loss or gradient (loss = {})", est.loss),
        });
    }
    optimizer.mu.step(&mut vp.mu, &est.grad_mu, lr);
    if !collapsed {
        optimizer.rho.step(&mut vp.rho, &est.grad_rho, lr);
    }
    if !collapsed && !vp.check_finite() {
        return Err(VarError::Diverged {
            iteration,
            detail: "non-finite variational parameters after update".into(),
        });
    }
    Ok(est)
}

/// `t` forward passes, each through freshly sampled weights.
pub fn predictive_samples<R: Rng + ?Sized>(
    vp: &VariationalParams,
    spec: &NetSpec,
    x: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    spec.forward(&vp.mu, x)?;
    Ok((0..t)
        .map(|_| {
            let w = vp.draw(rng);
            spec.forward_tape(&w, x, &mut tape);
            tape.output()[0]
        })
        .collect())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing posterior checkpoint: network segments with their layer
/// specs, the flat variational parameters and the prior scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layout_version: u32,
    /// Named network segments in parameter order.
    pub segments: Vec<(String, NetSpec)>,
    pub posterior: VariationalParams,
    /// Free-form model configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(segments: Vec<(String, NetSpec)>, posterior: VariationalParams) -> Result<Self> {
        let expected: usize = segments.iter().map(|(_, s)| s.param_count()).sum();
        if expected != posterior.len() {
            return Err(VarError::Shape {
                expected,
                got: posterior.len(),
            });
        }
        Ok(Self {
            layout_version: CHECKPOINT_VERSION,
            segments,
            posterior,
            config: serde_json::Value::Null,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.layout_version != CHECKPOINT_VERSION {
            return Err(VarError::Precondition(format!(
                "unsupported checkpoint layout version {}",
                ckpt.layout_version
            )));
        }
        let expected: usize = ckpt.segments.iter().map(|(_, s)| s.param_count()).sum();
        if expected != ckpt.posterior.len() {
            return Err(VarError::Shape {
                expected,
                got: ckpt.posterior.len(),
            });
        }
        Ok(ckpt)
    }
}
