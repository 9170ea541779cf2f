//! Differentiable binary classifiers with analytic gradients.
//!
//! Two reference models are provided: logistic regression and a
//! one-hidden-layer MLP with a single output unit. Both are trained with
//! mean binary cross-entropy on `sigmoid(output)`, with probabilities
//! clamped to `[1e-12, 1 - 1e-12]` so the loss stays finite.
//!
//! Parameter layout (fixed, row-major weights then biases, layer by layer):
//!
//! * logistic: `w[0..d]`, `b`
//! * mlp: `W1[h][d]` (row j holds the weights into hidden unit j), `b1[h]`,
//!   `w2[h]`, `b2`
//!
//! The hidden-layer post-activation vector is what [`features`] exposes to
//! the inversion attack.

mod checkpoint;

pub use checkpoint::Checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ParamVector, RandomSource};

/// Lower clamp on predicted probabilities; the upper clamp is `1 - PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-12;

/// One labelled example. Features live in `[0, 1]`, labels are 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: u8,
}

impl Example {
    pub fn new(x: Vec<f64>, y: u8) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// Hidden-layer nonlinearity. `Identity` exists for tests that need a
/// linear feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Zero for logistic models.
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            activation: Activation::Tanh,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        match self.kind {
            ModelKind::Logistic if self.hidden_dim != 0 => {
                Err(Error::invalid("hidden_dim", "logistic models have no hidden layer"))
            }
            ModelKind::Mlp if self.hidden_dim == 0 => Err(Error::invalid("hidden_dim", "must be at least 1 for mlp")),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_dim);
        match self.kind {
            ModelKind::Logistic => d + 1,
            ModelKind::Mlp => (d + 1) * h + (h + 1),
        }
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: theta.dim(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Borrowed views into an MLP parameter vector.
struct MlpParams<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: f64,
}

impl<'a> MlpParams<'a> {
    fn split(spec: &ModelSpec, theta: &'a [f64]) -> Self {
        let (d, h) = (spec.input_dim, spec.hidden_dim);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        Self {
            w1,
            b1,
            w2,
            b2: rest[0],
        }
    }

    fn hidden(&self, spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; spec.hidden_dim];
        self.hidden_into(spec, x, &mut out);
        out
    }

    fn hidden_into(&self, spec: &ModelSpec, x: &[f64], out: &mut [f64]) {
        let d = spec.input_dim;
        for ((o, row), b) in out.iter_mut().zip(self.w1.chunks_exact(d)).zip(self.b1) {
            *o = spec.activation.apply(dot(row, x) + b);
        }
    }

    fn logit_with(&self, spec: &ModelSpec, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.hidden_into(spec, x, scratch);
        dot(self.w2, scratch) + self.b2
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped cross-entropy and its derivative with respect to the logit.
/// The derivative is zero wherever the clamp is active.
fn cross_entropy(z: f64, y: u8) -> (f64, f64) {
    let p = sigmoid(z);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        // The probability assigned to the true label is pinned at either
        // PROB_CLAMP or 1 - PROB_CLAMP.
        let true_label_unlikely = (p < 0.5) == (y == 1);
        let loss = if true_label_unlikely {
            -PROB_CLAMP.ln()
        } else {
            -(-PROB_CLAMP).ln_1p()
        };
        return (loss, 0.0);
    }
    // ln(sigmoid(z)) = -softplus(-z), ln(1 - sigmoid(z)) = -softplus(z)
    let loss = if y == 1 { softplus(-z) } else { softplus(z) };
    (loss, p - f64::from(y))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Model logit for one input.
pub fn logit(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<f64> {
    spec.check_theta(theta)?;
    spec.check_input(x)?;
    Ok(logit_unchecked(spec, theta.as_slice(), x))
}

fn logit_unchecked(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> f64 {
    match spec.kind {
        ModelKind::Logistic => {
            let d = spec.input_dim;
            dot(&theta[..d], x) + theta[d]
        }
        ModelKind::Mlp => {
            let p = MlpParams::split(spec, theta);
            dot(p.w2, &p.hidden(spec, x)) + p.b2
        }
    }
}

pub fn predict_proba(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<f64> {
    logit(spec, theta, x).map(sigmoid)
}

/// Running sums of loss and gradient over a stream of examples.
struct Accumulator {
    loss: f64,
    grad: Option<Vec<f64>>,
    count: usize,
    correct: usize,
}

fn accumulate<'a, I>(spec: &ModelSpec, theta: &ParamVector, examples: I, want_grad: bool) -> Result<Accumulator>
where
    I: IntoIterator<Item = &'a Example>,
{
    spec.check_theta(theta)?;
    let theta = theta.as_slice();
    let mut acc = Accumulator {
        loss: 0.0,
        grad: want_grad.then(|| vec![0.0; theta.len()]),
        count: 0,
        correct: 0,
    };
    let d = spec.input_dim;
    let mut hidden = vec![0.0; spec.hidden_dim];
    for ex in examples {
        spec.check_input(&ex.x)?;
        acc.count += 1;
        match spec.kind {
            ModelKind::Logistic => {
                let z = dot(&theta[..d], &ex.x) + theta[d];
                let (l, dz) = cross_entropy(z, ex.y);
                acc.loss += l;
                acc.correct += usize::from(u8::from(z > 0.0) == ex.y);
                if let Some(g) = acc.grad.as_mut() {
                    for (gk, xk) in g[..d].iter_mut().zip(&ex.x) {
                        *gk += dz * xk;
                    }
                    g[d] += dz;
                }
            }
            ModelKind::Mlp => {
                let p = MlpParams::split(spec, theta);
                let z = p.logit_with(spec, &ex.x, &mut hidden);
                let (l, dz) = cross_entropy(z, ex.y);
                acc.loss += l;
                acc.correct += usize::from(u8::from(z > 0.0) == ex.y);
                if let Some(g) = acc.grad.as_mut() {
                    backprop_mlp(spec, &p, &ex.x, &hidden, dz, g);
                }
            }
        }
    }
    if acc.count == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(acc)
}

fn backprop_mlp(spec: &ModelSpec, p: &MlpParams<'_>, x: &[f64], hidden: &[f64], dz: f64, g: &mut [f64]) {
    if dz == 0.0 {
        return;
    }
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let (gw1, rest) = g.split_at_mut(h * d);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(h);
    gb2[0] += dz;
    for j in 0..h {
        gw2[j] += dz * hidden[j];
        let da = dz * p.w2[j] * spec.activation.derivative_from_output(hidden[j]);
        gb1[j] += da;
        for (gw, xk) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
            *gw += da * xk;
        }
    }
}

/// Mean clamped binary cross-entropy over `batch`.
pub fn loss(spec: &ModelSpec, theta: &ParamVector, batch: &[Example]) -> Result<f64> {
    mean_loss(spec, theta, batch)
}

/// Mean loss over any stream of examples (e.g. all examples of several
/// patients without copying them into one batch).
pub fn mean_loss<'a, I>(spec: &ModelSpec, theta: &ParamVector, examples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Example>,
{
    let acc = accumulate(spec, theta, examples, false)?;
    Ok(acc.loss / acc.count as f64)
}

/// Analytic gradient of [`loss`] with respect to `theta`.
pub fn grad(spec: &ModelSpec, theta: &ParamVector, batch: &[Example]) -> Result<ParamVector> {
    loss_and_grad(spec, theta, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(spec: &ModelSpec, theta: &ParamVector, batch: &[Example]) -> Result<(f64, ParamVector)> {
    mean_loss_and_grad(spec, theta, batch)
}

/// Mean loss and gradient over any stream of examples.
pub fn mean_loss_and_grad<'a, I>(spec: &ModelSpec, theta: &ParamVector, examples: I) -> Result<(f64, ParamVector)>
where
    I: IntoIterator<Item = &'a Example>,
{
    let acc = accumulate(spec, theta, examples, true)?;
    let n = acc.count as f64;
    let g = acc.grad.unwrap_or_default().into_iter().map(|v| v / n).collect();
    Ok((acc.loss / n, ParamVector::new(g)?))
}

/// Mean loss and accuracy in a single pass.
pub fn evaluate<'a, I>(spec: &ModelSpec, theta: &ParamVector, examples: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a Example>,
{
    let acc = accumulate(spec, theta, examples, false)?;
    let n = acc.count as f64;
    Ok((acc.loss / n, acc.correct as f64 / n))
}

/// Fraction of examples whose thresholded prediction matches the label.
pub fn accuracy<'a, I>(spec: &ModelSpec, theta: &ParamVector, examples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Example>,
{
    spec.check_theta(theta)?;
    let theta = theta.as_slice();
    let (mut correct, mut total) = (0usize, 0usize);
    let mut hidden = vec![0.0; spec.hidden_dim];
    for ex in examples {
        spec.check_input(&ex.x)?;
        let z = match spec.kind {
            ModelKind::Logistic => logit_unchecked(spec, theta, &ex.x),
            ModelKind::Mlp => MlpParams::split(spec, theta).logit_with(spec, &ex.x, &mut hidden),
        };
        let predicted = u8::from(z > 0.0);
        correct += usize::from(predicted == ex.y);
        total += 1;
    }
    if total == 0 {
        return Err(Error::Empty("examples"));
    }
    Ok(correct as f64 / total as f64)
}

/// Hidden-layer activations for input `x` (MLP only).
pub fn features(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    if spec.kind != ModelKind::Mlp {
        return Err(Error::NoHiddenLayer("features"));
    }
    spec.check_theta(theta)?;
    spec.check_input(x)?;
    Ok(MlpParams::split(spec, theta.as_slice()).hidden(spec, x))
}

/// Gradient with respect to `x` of `<features(x), cotangent>`.
pub fn feature_grad_x(spec: &ModelSpec, theta: &ParamVector, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
    let hidden = features(spec, theta, x)?;
    if cotangent.len() != spec.hidden_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.hidden_dim,
            actual: cotangent.len(),
        });
    }
    let p = MlpParams::split(spec, theta.as_slice());
    let d = spec.input_dim;
    let mut out = vec![0.0; d];
    for (j, row) in p.w1.chunks_exact(d).enumerate() {
        let scale = cotangent[j] * spec.activation.derivative_from_output(hidden[j]);
        if scale == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(row) {
            *o += scale * w;
        }
    }
    Ok(out)
}

/// Random initial parameters: weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RandomSource) -> Result<ParamVector> {
    spec.validate()?;
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let mut theta = vec![0.0; spec.param_count()];
    match spec.kind {
        ModelKind::Logistic => {
            let s = 1.0 / (d as f64).sqrt();
            theta[..d].iter_mut().for_each(|w| *w = s * rng.standard_normal());
        }
        ModelKind::Mlp => {
            let s1 = 1.0 / (d as f64).sqrt();
            theta[..h * d].iter_mut().for_each(|w| *w = s1 * rng.standard_normal());
            let s2 = 1.0 / (h as f64).sqrt();
            let w2 = h * d + h;
            theta[w2..w2 + h]
                .iter_mut()
                .for_each(|w| *w = s2 * rng.standard_normal());
        }
    }
    ParamVector::new(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_grad;

    fn pv(v: Vec<f64>) -> ParamVector {
        ParamVector::new(v).unwrap()
    }

    fn random_batch(rng: &mut RandomSource, d: usize, n: usize) -> Vec<Example> {
        (0..n)
            .map(|_| Example::new((0..d).map(|_| rng.uniform()).collect(), u8::from(rng.bernoulli(0.5))))
            .collect()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::logistic(7).param_count(), 8);
        assert_eq!(ModelSpec::mlp(4, 3).param_count(), 5 * 3 + 4);
        assert!(ModelSpec::mlp(4, 0).validate().is_err());
        assert!(ModelSpec::logistic(0).validate().is_err());
    }

    #[test]
    fn zero_logistic_gives_ln2() {
        let spec = ModelSpec::logistic(3);
        let mut rng = RandomSource::new(1);
        let batch = random_batch(&mut rng, 3, 17);
        let l = loss(&spec, &ParamVector::zeros(4), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_logistic_loss() {
        let spec = ModelSpec::logistic(1);
        let l = loss(&spec, &pv(vec![10.0, 0.0]), &[Example::new(vec![1.0], 1)]).unwrap();
        // -ln(sigmoid(10)) = ln(1 + e^-10)
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12 * expected);
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn degenerate_mlp_depends_on_output_bias_only() {
        let spec = ModelSpec::mlp(3, 4);
        let mut theta = vec![0.0; spec.param_count()];
        *theta.last_mut().unwrap() = 0.7;
        // Output weights are irrelevant when hidden activations are zero.
        theta[3 * 4 + 4] = 2.5;
        let batch = vec![
            Example::new(vec![0.2, 0.9, 0.4], 1),
            Example::new(vec![0.5, 0.1, 0.3], 0),
        ];
        let p = sigmoid(0.7);
        let expected = (-(p.ln()) - (1.0 - p).ln()) / 2.0;
        let l = loss(&spec, &pv(theta), &batch).unwrap();
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_errors() {
        let spec = ModelSpec::logistic(2);
        assert!(matches!(loss(&spec, &ParamVector::zeros(3), &[]), Err(Error::Empty(_))));
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(4), &[Example::new(vec![0.0, 0.0], 0)]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(3), &[Example::new(vec![0.0], 0)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn clamped_loss_is_finite() {
        let spec = ModelSpec::logistic(1);
        let theta = pv(vec![1e6, 0.0]);
        let l = loss(&spec, &theta, &[Example::new(vec![1.0], 0)]).unwrap();
        assert!((l + (PROB_CLAMP).ln()).abs() < 1e-9);
        let g = grad(&spec, &theta, &[Example::new(vec![1.0], 0)]).unwrap();
        assert_eq!(g, ParamVector::zeros(2));
    }

    #[test]
    fn symmetric_batch_has_zero_bias_gradient() {
        let spec = ModelSpec::logistic(2);
        let batch = vec![
            Example::new(vec![0.3, 0.8], 1),
            Example::new(vec![-0.3, -0.8], 1),
            Example::new(vec![0.1, 0.6], 0),
            Example::new(vec![-0.1, -0.6], 0),
        ];
        let g = grad(&spec, &ParamVector::zeros(3), &batch).unwrap();
        assert!(g.as_slice()[2].abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RandomSource::new(7);
        for spec in [
            ModelSpec::logistic(5),
            ModelSpec::mlp(5, 4),
            ModelSpec::mlp(3, 6).with_activation(Activation::Identity),
        ] {
            for _ in 0..10 {
                let theta = init_params(&spec, &mut rng).unwrap();
                let batch = random_batch(&mut rng, spec.input_dim, 6);
                let analytic = grad(&spec, &theta, &batch).unwrap();
                let numeric = finite_diff_grad(|t| loss(&spec, t, &batch).unwrap(), &theta, 1e-5);
                let err = analytic.sub(&numeric).unwrap().l2_norm();
                let scale = analytic.l2_norm() + numeric.l2_norm();
                assert!(err / scale < 1e-7, "{spec:?}: rel err {}", err / scale);
            }
        }
    }

    #[test]
    fn gradient_descent_reaches_stationary_point() {
        // One example with a bounded minimizer: an L2 term is not available,
        // so use a pair of conflicting labels at the same input.
        let spec = ModelSpec::logistic(1);
        let batch = vec![
            Example::new(vec![1.0], 1),
            Example::new(vec![1.0], 1),
            Example::new(vec![1.0], 0),
        ];
        let mut theta = ParamVector::zeros(2);
        for _ in 0..20_000 {
            let g = grad(&spec, &theta, &batch).unwrap();
            if g.l2_norm() < 1e-9 {
                break;
            }
            theta = theta.axpy(-1.0, &g).unwrap();
        }
        assert!(grad(&spec, &theta, &batch).unwrap().l2_norm() < 1e-6);
        // Fitted probability equals the label frequency 2/3.
        let p = predict_proba(&spec, &theta, &[1.0]).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn features_examples() {
        let spec = ModelSpec::mlp(3, 3);
        let zeros = ParamVector::zeros(spec.param_count());
        assert_eq!(features(&spec, &zeros, &[0.4, 0.1, 0.9]).unwrap(), vec![0.0; 3]);

        let mut theta = vec![0.0; spec.param_count()];
        for j in 0..3 {
            theta[j * 3 + j] = 1.0;
        }
        assert_eq!(features(&spec, &pv(theta), &[0.0; 3]).unwrap(), vec![0.0; 3]);

        let logistic = ModelSpec::logistic(3);
        assert!(matches!(
            features(&logistic, &ParamVector::zeros(4), &[0.0; 3]),
            Err(Error::NoHiddenLayer(_))
        ));
    }

    #[test]
    fn features_match_scalar_forward_pass() {
        let spec = ModelSpec::mlp(4, 3);
        let mut rng = RandomSource::new(21);
        let theta = init_params(&spec, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let t = theta.as_slice();
        let mut expected = Vec::new();
        for j in 0..3 {
            let mut a = t[12 + j];
            for k in 0..4 {
                a += t[j * 4 + k] * x[k];
            }
            expected.push(a.tanh());
        }
        let got = features(&spec, &theta, &x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_grad_examples() {
        let spec = ModelSpec::mlp(3, 2);
        let mut rng = RandomSource::new(4);
        let theta = init_params(&spec, &mut rng).unwrap();
        assert_eq!(
            feature_grad_x(&spec, &theta, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap(),
            vec![0.0; 3]
        );
        assert!(feature_grad_x(&spec, &theta, &[0.1, 0.2, 0.3], &[1.0]).is_err());

        // Linear activation: the adjoint is W^T c.
        let lin = spec.with_activation(Activation::Identity);
        let c = [0.5, -2.0];
        let g = feature_grad_x(&lin, &theta, &[0.1, 0.2, 0.3], &c).unwrap();
        let t = theta.as_slice();
        for k in 0..3 {
            let expected = t[k] * c[0] + t[3 + k] * c[1];
            assert!((g[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_grad_matches_finite_differences() {
        let spec = ModelSpec::mlp(6, 5);
        let mut rng = RandomSource::new(8);
        for _ in 0..10 {
            let theta = init_params(&spec, &mut rng).unwrap();
            let x = pv((0..6).map(|_| rng.uniform()).collect());
            let c: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
            let f = |v: &ParamVector| dot(&features(&spec, &theta, v.as_slice()).unwrap(), &c);
            let numeric = finite_diff_grad(f, &x, 1e-5);
            let analytic = pv(feature_grad_x(&spec, &theta, x.as_slice(), &c).unwrap());
            let err = analytic.sub(&numeric).unwrap().l2_norm() / (analytic.l2_norm() + numeric.l2_norm());
            assert!(err < 1e-7, "rel err {err}");
        }
    }

    #[test]
    fn accuracy_counts_thresholded_predictions() {
        let spec = ModelSpec::logistic(1);
        let theta = pv(vec![1.0, -0.5]);
        let data = vec![
            Example::new(vec![1.0], 1),
            Example::new(vec![0.0], 0),
            Example::new(vec![0.0], 1),
            Example::new(vec![0.9], 0),
        ];
        assert_eq!(accuracy(&spec, &theta, &data).unwrap(), 0.5);
        assert!(accuracy(&spec, &theta, &[]).is_err());
    }

    #[test]
    fn evaluate_matches_separate_passes() {
        let spec = ModelSpec::mlp(3, 5);
        let mut rng = RandomSource::new(4);
        let theta = init_params(&spec, &mut rng).unwrap();
        let data: Vec<Example> = (0..40)
            .map(|i| Example::new(vec![rng.uniform(), rng.uniform(), rng.uniform()], (i % 2) as u8))
            .collect();
        let (l, a) = evaluate(&spec, &theta, &data).unwrap();
        assert_eq!(l, mean_loss(&spec, &theta, &data).unwrap());
        assert_eq!(a, accuracy(&spec, &theta, &data).unwrap());
    }
}
