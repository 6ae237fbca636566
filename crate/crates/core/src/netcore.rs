//! Deterministic feed-forward networks with exact reverse-mode gradients.
//!
//! Every Bayesian layer in the crate samples a concrete weight vector and
//! pushes it through the routines here. Parameters live in one flat `f64`
//! buffer with a fixed layout:
//!
//! ```text
//! layer 0: W0 (out0 x in0, row-major) | b0 (out0)
//! layer 1: W1 (out1 x in1, row-major) | b1 (out1)
//! ...
//! ```
//!
//! Because the layout is layer-major, the parameters of a network built by
//! concatenating a trunk and a head are exactly the trunk buffer followed by
//! the head buffer. The multi-task model relies on this to address the shared
//! hidden weights and the two output heads as slices of one vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input shape mismatch: expected {expected} features, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    ParamShape { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_width: usize, out_width: usize, activation: Activation) -> Self {
        Self {
            in_width,
            out_width,
            activation,
        }
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        (self.in_width + 1) * self.out_width
    }
}

/// A validated list of dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct NetSpec {
    layers: Vec<LayerSpec>,
}

impl TryFrom<Vec<LayerSpec>> for NetSpec {
    type Error = NetError;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        Self::new(layers)
    }
}

impl From<NetSpec> for Vec<LayerSpec> {
    fn from(spec: NetSpec) -> Self {
        spec.layers
    }
}

/// Concrete weights for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for FlatParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-layer activations recorded during a forward pass, reused across calls.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    // values[0] is the input; values[l + 1] is the post-activation output of layer l.
    values: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Output of the last forward pass.
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetError::InvalidSpec("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_width == 0 || layer.out_width == 0 {
                return Err(NetError::InvalidSpec(format!("layer {i} has zero width")));
            }
            if i > 0 && layers[i - 1].out_width != layer.in_width {
                return Err(NetError::InvalidSpec(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.in_width,
                    i - 1,
                    layers[i - 1].out_width
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Tanh hidden layers followed by a scalar identity output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let trunk_widths = Self::chain(input_dim, hidden, Activation::Tanh);
        let last = hidden.last().copied().unwrap_or(input_dim);
        let mut layers = trunk_widths;
        layers.push(LayerSpec::new(last, 1, Activation::Identity));
        Self::new(layers)
    }

    /// Tanh hidden layers only; the output is the feature vector of the last one.
    pub fn trunk(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        Self::new(Self::chain(input_dim, hidden, Activation::Tanh))
    }

    fn chain(input_dim: usize, widths: &[usize], activation: Activation) -> Vec<LayerSpec> {
        let mut prev = input_dim;
        widths
            .iter()
            .map(|&w| {
                let layer = LayerSpec::new(prev, w, activation);
                prev = w;
                layer
            })
            .collect()
    }

    /// The network that applies `self` and then `next`.
    pub fn then(&self, next: &NetSpec) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.extend_from_slice(&next.layers);
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if x.len() != self.in_width() {
            return Err(NetError::InputShape {
                expected: self.in_width(),
                got: x.len(),
            });
        }
        self.check_params(params)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NetError::ParamShape {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        if self.out_width() != 1 {
            return Err(NetError::InvalidSpec(format!(
                "expected a scalar output, network produces {}",
                self.out_width()
            )));
        }
        Ok(())
    }

    /// Scalar network output.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check_scalar()?;
        self.check(params, x)?;
        let mut tape = Tape::new();
        self.forward_tape(params, x, &mut tape);
        Ok(tape.output()[0])
    }

    /// Output vector of the last layer (the feature map for a trunk).
    pub fn forward_features(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let mut tape = Tape::new();
        self.forward_tape(params, x, &mut tape);
        Ok(tape.output().to_vec())
    }

    /// `upstream * d(output)/d(params)` for a scalar network.
    pub fn backward(&self, params: &[f64], x: &[f64], upstream: f64) -> Result<Vec<f64>> {
        self.check_scalar()?;
        self.check(params, x)?;
        let mut tape = Tape::new();
        self.forward_tape(params, x, &mut tape);
        let mut grad = vec![0.0; params.len()];
        self.backward_tape(params, &mut tape, &[upstream], &mut grad);
        Ok(grad)
    }

    /// Unchecked forward pass recording activations into `tape`.
    ///
    /// Callers must have validated the shapes; panics on mismatch.
    pub fn forward_tape(&self, params: &[f64], x: &[f64], tape: &mut Tape) {
        assert_eq!(x.len(), self.in_width(), "input width");
        assert_eq!(params.len(), self.param_count(), "parameter count");
        tape.values.resize_with(self.layers.len() + 1, Vec::new);
        tape.values[0].clear();
        tape.values[0].extend_from_slice(x);
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.in_width, layer.out_width);
            let weights = &params[offset..offset + n_in * n_out];
            let biases = &params[offset + n_in * n_out..offset + layer.param_count()];
            offset += layer.param_count();

            let (head, tail) = tape.values.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let z = dot(row, input) + biases[o];
                out.push(match layer.activation {
                    Activation::Tanh => tanh(z),
                    Activation::Identity => z,
                });
            }
        }
    }

    /// Accumulates `upstream^T d(output)/d(params)` into `grad` and returns the
    /// gradient with respect to the network input.
    ///
    /// `tape` must hold the forward pass for the same `params`.
    pub fn backward_tape(
        &self,
        params: &[f64],
        tape: &mut Tape,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        assert_eq!(upstream.len(), self.out_width(), "upstream width");
        assert_eq!(grad.len(), params.len(), "gradient buffer");
        let Tape {
            values,
            delta,
            next_delta,
        } = tape;
        delta.clear();
        delta.extend_from_slice(upstream);

        let mut end = params.len();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (n_in, n_out) = (layer.in_width, layer.out_width);
            let start = end - layer.param_count();
            let w_end = start + n_in * n_out;
            end = start;

            // d(loss)/dz through the activation.
            if layer.activation == Activation::Tanh {
                for (d, &y) in delta.iter_mut().zip(&values[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &values[l];
            for o in 0..n_out {
                let d = delta[o];
                let g_row = &mut grad[start + o * n_in..start + (o + 1) * n_in];
                for (g, &xi) in g_row.iter_mut().zip(input) {
                    *g += d * xi;
                }
                grad[w_end + o] += d;
            }
            next_delta.clear();
            next_delta.resize(n_in, 0.0);
            for o in 0..n_out {
                let d = delta[o];
                let row = &params[start + o * n_in..start + (o + 1) * n_in];
                for (nd, &w) in next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            std::mem::swap(delta, next_delta);
        }
        delta.clone()
    }

    /// Evaluates the network on `n` inputs stored row-major in `xs`.
    ///
    /// Returns an `n x out_width` row-major buffer. Uses blocked matrix
    /// products, so results may differ from [`NetSpec::forward`] in the last
    /// bits.
    pub fn forward_batch(&self, params: &[f64], xs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if xs.len() != n * self.in_width() {
            return Err(NetError::InputShape {
                expected: n * self.in_width(),
                got: xs.len(),
            });
        }
        let mut current = xs.to_vec();
        let mut offset = 0;
        for layer in &self.layers {
            let (n_in, n_out) = (layer.in_width, layer.out_width);
            let weights = &params[offset..offset + n_in * n_out];
            let biases = &params[offset + n_in * n_out..offset + layer.param_count()];
            offset += layer.param_count();

            let mut next = vec![0.0; n * n_out];
            for row in next.chunks_exact_mut(n_out) {
                row.copy_from_slice(biases);
            }
            // next (n x out) += current (n x in) * W^T (in x out)
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    n_in,
                    n_out,
                    1.0,
                    current.as_ptr(),
                    n_in as isize,
                    1,
                    weights.as_ptr(),
                    1,
                    n_in as isize,
                    1.0,
                    next.as_mut_ptr(),
                    n_out as isize,
                    1,
                );
            }
            if layer.activation == Activation::Tanh {
                next.iter_mut().for_each(|v| *v = tanh(*v));
            }
            current = next;
        }
        Ok(current)
    }
}

// About twice as fast as `f64::tanh`; absolute error below 1e-15.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_differences(spec: &NetSpec, params: &[f64], x: &[f64], step: f64) -> Vec<f64> {
        let mut p = params.to_vec();
        (0..p.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + step;
                let up = spec.forward(&p, x).unwrap();
                p[i] = orig - step;
                let down = spec.forward(&p, x).unwrap();
                p[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(1e-8, f64::max);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = NetSpec::mlp(3, &[4, 2]).unwrap();
        let params = vec![0.0; spec.param_count()];
        assert_eq!(spec.forward(&params, &[0.2, -1.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = NetSpec::new(vec![LayerSpec::new(1, 1, Activation::Identity)]).unwrap();
        assert_eq!(spec.forward(&[1.0, 0.0], &[0.3]).unwrap(), 0.3);
    }

    #[test]
    fn hand_computed_two_layer_net() {
        // 1 -> 2 (tanh) -> 1
        let spec = NetSpec::mlp(1, &[2]).unwrap();
        // W0 = [0.5, -1.0], b0 = [0.1, 0.2], W1 = [2.0, 3.0], b1 = -0.5
        let params = [0.5, -1.0, 0.1, 0.2, 2.0, 3.0, -0.5];
        let x = 0.8_f64;
        let h1 = (0.5 * x + 0.1_f64).tanh();
        let h2 = (-1.0 * x + 0.2_f64).tanh();
        let expected = 2.0 * h1 + 3.0 * h2 - 0.5;
        assert_relative_eq!(spec.forward(&params, &[x]).unwrap(), expected, epsilon = 1e-15);
        // Spot value for x = 0.8: tanh(0.5) = 0.46211715726, tanh(-0.6) = -0.53704956700
        assert_relative_eq!(expected, -1.18691439, epsilon = 1e-8);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = NetSpec::mlp(2, &[3]).unwrap();
        let params: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.1).collect();
        let grad = spec.backward(&params, &[0.1, 0.2], 0.0).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_input_and_one() {
        let spec = NetSpec::new(vec![LayerSpec::new(3, 1, Activation::Identity)]).unwrap();
        let params = [0.3, -0.2, 0.9, 0.4];
        let x = [0.5, 0.25, -1.0];
        let grad = spec.backward(&params, &x, 1.0).unwrap();
        assert_eq!(grad, vec![0.5, 0.25, -1.0, 1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let d = rng.random_range(1..=3);
            let hidden: Vec<usize> = (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(1..=5))
                .collect();
            let spec = NetSpec::mlp(d, &hidden).unwrap();
            let params: Vec<f64> = (0..spec.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let grad = spec.backward(&params, &x, 1.0).unwrap();
            let fd = central_differences(&spec, &params, &x, 1e-5);
            assert!(max_rel_err(&grad, &fd) <= 1e-5, "{grad:?} vs {fd:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let spec = NetSpec::mlp(2, &[3]).unwrap();
        let params = vec![0.0; spec.param_count()];
        assert_eq!(
            spec.forward(&params, &[1.0]),
            Err(NetError::InputShape {
                expected: 2,
                got: 1
            })
        );
        assert!(matches!(
            spec.forward(&params[1..], &[1.0, 2.0]),
            Err(NetError::ParamShape { .. })
        ));
        assert!(NetSpec::new(vec![
            LayerSpec::new(2, 3, Activation::Tanh),
            LayerSpec::new(4, 1, Activation::Identity)
        ])
        .is_err());
    }

    #[test]
    fn trunk_then_head_layout_is_concatenation() {
        let trunk = NetSpec::trunk(2, &[4, 3]).unwrap();
        let head = NetSpec::new(vec![LayerSpec::new(3, 1, Activation::Identity)]).unwrap();
        let full = trunk.then(&head).unwrap();
        assert_eq!(full.param_count(), trunk.param_count() + head.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = (0..full.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = [0.3, 0.9];
        let (tp, hp) = params.split_at(trunk.param_count());
        let features = trunk.forward_features(tp, &x).unwrap();
        let composed = head.forward(hp, &features).unwrap();
        assert_eq!(composed.to_bits(), full.forward(&params, &x).unwrap().to_bits());
    }

    #[test]
    fn batch_forward_agrees_with_single() {
        let spec = NetSpec::mlp(2, &[7, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let batch = spec.forward_batch(&params, &xs, 10).unwrap();
        for (i, x) in xs.chunks(2).enumerate() {
            assert_relative_eq!(batch[i], spec.forward(&params, x).unwrap(), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn backward_matches_finite_differences(
            seed in any::<u64>(),
            d in 1usize..4,
            h1 in 1usize..6,
            h2 in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = NetSpec::mlp(d, &[h1, h2]).unwrap();
            let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let grad = spec.backward(&params, &x, 1.3).unwrap();
            let fd: Vec<f64> = central_differences(&spec, &params, &x, 1e-5).iter().map(|g| g * 1.3).collect();
            prop_assert!(max_rel_err(&grad, &fd) <= 1e-4);
        }

        #[test]
        fn forward_is_pure(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = NetSpec::mlp(2, &[5]).unwrap();
            let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let a = spec.forward(&params, &x).unwrap();
            let b = spec.forward(&params, &x).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
