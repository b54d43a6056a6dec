//! Dense feed-forward network with exact reverse-mode gradients.
//!
//! Hidden layers use `tanh`; the last layer is always linear. Weight matrices
//! are row-major with shape `(out, in)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_widths,
            hidden_activation: Activation::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "a network needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.depth() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Row-major `(out, in)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: Vec<Dense>,
}

impl Weights {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense {
                weight: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec);
        for (layer, dims) in w.layers.iter_mut().zip(spec.layer_widths.windows(2)) {
            let limit = 1.0 / (dims[0] as f64).sqrt();
            for v in &mut layer.weight {
                *v = rng.random_range(-limit..limit);
            }
        }
        w
    }

    pub fn check_shape(&self, spec: &NetSpec) -> Result<()> {
        check_len("weights layer count", spec.depth(), self.layers.len())?;
        for (layer, dims) in self.layers.iter().zip(spec.layer_widths.windows(2)) {
            check_len("weights matrix", dims[0] * dims[1], layer.weight.len())?;
            check_len("weights bias", dims[1], layer.bias.len())?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in layer order (weights then bias per layer).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat weights", self.len(), flat.len())?;
        for (dst, src) in self.iter_mut().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        for (dst, src) in self.iter_mut().zip(other.iter()) {
            *dst += alpha * src;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.iter_mut() {
            *v = 0.0;
        }
    }
}

/// Values retained by [`forward`] for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[depth]` the output.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty trace")
    }
}

pub fn forward(spec: &NetSpec, w: &Weights, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
    check_len("network input", spec.input_width(), input.len())?;
    w.check_shape(spec)?;
    let trace = forward_unchecked(spec, w, input);
    Ok((trace.output().to_vec(), trace))
}

pub(crate) fn forward_unchecked(spec: &NetSpec, w: &Weights, input: &[f64]) -> ForwardTrace {
    let depth = spec.depth();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);
    activations.push(input.to_vec());
    for (l, layer) in w.layers.iter().enumerate() {
        let n_in = spec.layer_widths[l];
        let x = &activations[l];
        let pre: Vec<f64> = layer
            .weight
            .chunks_exact(n_in)
            .zip(&layer.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect();
        let act = spec.activation(l);
        let out = pre.iter().map(|&v| act.apply(v)).collect();
        pre_activations.push(pre);
        activations.push(out);
    }
    ForwardTrace {
        activations,
        pre_activations,
    }
}

/// Output only, without keeping the trace.
pub(crate) fn forward_output(spec: &NetSpec, w: &Weights, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for (l, layer) in w.layers.iter().enumerate() {
        let n_in = spec.layer_widths[l];
        let act = spec.activation(l);
        x = layer
            .weight
            .chunks_exact(n_in)
            .zip(&layer.bias)
            .map(|(row, b)| act.apply(b + dot(row, &x)))
            .collect();
    }
    x
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_trace(spec: &NetSpec, trace: &ForwardTrace) -> Result<()> {
    check_len("trace depth", spec.depth() + 1, trace.activations.len())?;
    check_len("trace depth", spec.depth(), trace.pre_activations.len())?;
    for (a, &width) in trace.activations.iter().zip(&spec.layer_widths) {
        check_len("trace activation", width, a.len())?;
    }
    Ok(())
}

/// Gradients of a scalar loss w.r.t. the weights and the network input, given
/// the loss gradient at the output.
pub fn backward(
    spec: &NetSpec,
    w: &Weights,
    trace: &ForwardTrace,
    d_output: &[f64],
) -> Result<(Weights, Vec<f64>)> {
    w.check_shape(spec)?;
    check_trace(spec, trace)?;
    check_len("output gradient", spec.output_width(), d_output.len())?;
    let mut grad = Weights::zeros(spec);
    let d_in = backward_accumulate(spec, w, trace, d_output, Some(&mut grad));
    Ok((grad, d_in))
}

/// Adds the weight gradient into `grad_acc` (if given) and returns the input
/// gradient. Shapes must already be validated.
pub(crate) fn backward_accumulate(
    spec: &NetSpec,
    w: &Weights,
    trace: &ForwardTrace,
    d_output: &[f64],
    mut grad_acc: Option<&mut Weights>,
) -> Vec<f64> {
    let mut delta = d_output.to_vec();
    for l in (0..spec.depth()).rev() {
        let act = spec.activation(l);
        let out = &trace.activations[l + 1];
        for (d, &y) in delta.iter_mut().zip(out) {
            *d *= act.derivative_from_output(y);
        }
        let n_in = spec.layer_widths[l];
        let x = &trace.activations[l];
        let layer = &w.layers[l];
        if let Some(acc) = grad_acc.as_deref_mut() {
            let g = &mut acc.layers[l];
            for ((row, gb), &d) in g.weight.chunks_exact_mut(n_in).zip(&mut g.bias).zip(&delta) {
                *gb += d;
                if d != 0.0 {
                    for (gw, &xi) in row.iter_mut().zip(x) {
                        *gw += d * xi;
                    }
                }
            }
        }
        let mut prev = vec![0.0; n_in];
        for (row, &d) in layer.weight.chunks_exact(n_in).zip(&delta) {
            if d != 0.0 {
                for (p, &wij) in prev.iter_mut().zip(row) {
                    *p += d * wij;
                }
            }
        }
        delta = prev;
    }
    delta
}

/// Pushes input tangents (`in_width x k`) through the layers recorded in
/// `trace`, returning output tangents (`out_width x k`).
pub(crate) fn push_tangents(
    spec: &NetSpec,
    w: &Weights,
    trace: &ForwardTrace,
    tangents: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut t = tangents.clone();
    for (l, layer) in w.layers.iter().enumerate() {
        let n_in = spec.layer_widths[l];
        let n_out = spec.layer_widths[l + 1];
        let wm = DMatrix::from_row_slice(n_out, n_in, &layer.weight);
        let mut next = wm * &t;
        let act = spec.activation(l);
        for (r, &y) in trace.activations[l + 1].iter().enumerate() {
            let s = act.derivative_from_output(y);
            if s != 1.0 {
                next.row_mut(r).scale_mut(s);
            }
        }
        t = next;
    }
    t
}

/// Matrix of partial derivatives `d output[out_channels[i]] / d input[in_channels[j]]`.
pub fn jacobian(
    spec: &NetSpec,
    w: &Weights,
    input: &[f64],
    out_channels: &[usize],
    in_channels: &[usize],
) -> Result<DMatrix<f64>> {
    if out_channels.is_empty() || in_channels.is_empty() {
        return Err(Error::Empty("jacobian channel selection".into()));
    }
    let (_, trace) = forward(spec, w, input)?;
    for &c in in_channels {
        if c >= spec.input_width() {
            return Err(Error::Dimension {
                context: "jacobian input channel",
                expected: spec.input_width(),
                got: c,
            });
        }
    }
    for &c in out_channels {
        if c >= spec.output_width() {
            return Err(Error::Dimension {
                context: "jacobian output channel",
                expected: spec.output_width(),
                got: c,
            });
        }
    }
    let mut seed = DMatrix::zeros(spec.input_width(), in_channels.len());
    for (j, &c) in in_channels.iter().enumerate() {
        seed[(c, j)] = 1.0;
    }
    let full = push_tangents(spec, w, &trace, &seed);
    Ok(full.select_rows(out_channels.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(n: usize) -> (NetSpec, Weights) {
        let spec = NetSpec::new(vec![n, n]).unwrap();
        let mut w = Weights::zeros(&spec);
        for i in 0..n {
            w.layers[0].weight[i * n + i] = 1.0;
        }
        (spec, w)
    }

    /// Straight-line reimplementation used as an oracle.
    fn reference_forward(w: &Weights, widths: &[usize], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let depth = widths.len() - 1;
        for l in 0..depth {
            let mut next = vec![0.0; widths[l + 1]];
            for i in 0..widths[l + 1] {
                let mut s = w.layers[l].bias[i];
                for j in 0..widths[l] {
                    s += w.layers[l].weight[i * widths[l] + j] * cur[j];
                }
                next[i] = if l + 1 == depth { s } else { s.tanh() };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_forward_passes_input_through() {
        let (spec, w) = identity_net(2);
        let (out, _) = forward(&spec, &w, &[0.3, -0.2]).unwrap();
        assert_eq!(out, vec![0.3, -0.2]);
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = NetSpec::new(vec![3, 4, 2]).unwrap();
        let mut w = Weights::zeros(&spec);
        w.layers[1].bias = vec![0.7, -1.5];
        let (out, _) = forward(&spec, &w, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.7, -1.5]);
    }

    #[test]
    fn seeded_net_matches_reference_chain() {
        let spec = NetSpec::new(vec![3, 4, 2]).unwrap();
        let w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(7));
        let x = [0.4, -0.9, 0.25];
        let (out, _) = forward(&spec, &w, &x).unwrap();
        let expect = reference_forward(&w, &spec.layer_widths, &x);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let spec = NetSpec::new(vec![3, 2]).unwrap();
        let w = Weights::zeros(&spec);
        assert!(matches!(
            forward(&spec, &w, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identity_at_minimum_has_zero_input_gradient() {
        let (spec, w) = identity_net(3);
        let x = [0.1, 0.2, -0.3];
        let (out, trace) = forward(&spec, &w, &x).unwrap();
        let d: Vec<f64> = out.iter().zip(&x).map(|(o, t)| 2.0 * (o - t)).collect();
        let (_, gi) = backward(&spec, &w, &trace, &d).unwrap();
        assert!(gi.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let spec = NetSpec::new(vec![3, 5, 2]).unwrap();
        let w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        let (_, trace) = forward(&spec, &w, &[0.5, 0.1, -0.4]).unwrap();
        let (g1, i1) = backward(&spec, &w, &trace, &[0.3, -1.1]).unwrap();
        let (g2, i2) = backward(&spec, &w, &trace, &[0.6, -2.2]).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in i1.iter().zip(&i2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn stale_trace_rejected() {
        let spec = NetSpec::new(vec![3, 5, 2]).unwrap();
        let other = NetSpec::new(vec![3, 4, 2]).unwrap();
        let w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        let wo = Weights::init(&other, &mut ChaCha8Rng::seed_from_u64(3));
        let (_, trace) = forward(&other, &wo, &[0.5, 0.1, -0.4]).unwrap();
        assert!(backward(&spec, &w, &trace, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn identity_jacobian_selects_submatrix() {
        let (spec, w) = identity_net(4);
        let j = jacobian(&spec, &w, &[0.1, 0.2, 0.3, 0.4], &[1, 3], &[1, 2, 3]).unwrap();
        assert_eq!(j.shape(), (2, 3));
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(1, 2)], 1.0);
    }

    #[test]
    fn jacobian_rows_are_consistent() {
        let spec = NetSpec::new(vec![3, 6, 4]).unwrap();
        let w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        let x = [0.2, -0.5, 0.9];
        let all = jacobian(&spec, &w, &x, &[0, 1, 2, 3], &[0, 1, 2]).unwrap();
        let sub = jacobian(&spec, &w, &x, &[1, 3], &[0, 1, 2]).unwrap();
        assert_eq!(sub.row(0), all.row(1));
        assert_eq!(sub.row(1), all.row(3));
    }

    #[test]
    fn empty_jacobian_selection_is_error() {
        let (spec, w) = identity_net(2);
        assert!(jacobian(&spec, &w, &[0.0, 0.0], &[], &[0]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![3]).is_err());
        assert!(NetSpec::new(vec![3, 0, 2]).is_err());
        assert_eq!(
            NetSpec::new(vec![3, 4, 2]).unwrap().parameter_count(),
            16 + 10
        );
    }

    #[test]
    fn trace_replay_reproduces_trace() {
        let spec = NetSpec::new(vec![2, 5, 5, 3]).unwrap();
        let w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        let (_, t1) = forward(&spec, &w, &[0.3, 0.7]).unwrap();
        let (_, t2) = forward(&spec, &w, t1.input()).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(forward_output(&spec, &w, &[0.3, 0.7]), t1.output());
    }
}
