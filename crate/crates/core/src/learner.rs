//! Frozen featurizer plus trainable softmax head.
//!
//! The featurizer `phi(x) = relu(W_f x + b_f)` is drawn once from a seed and never
//! updated; it plays the role of a frozen pretrained backbone. Only the linear
//! head `(W, b)` is trained, by minibatch SGD on mean cross-entropy.
//!
//! Checkpoint layout (little endian): `b"BERHEAD1" | classes u64 | width u64`
//! followed by `W` row-major and then `b`, all as f64.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::stream::LabeledExample;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BERHEAD1";
pub const CHECKPOINT_HEADER_BYTES: u64 = 24;
pub const DEFAULT_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeaturizer {
    input_dim: usize,
    width: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    seed: u64,
}

impl FrozenFeaturizer {
    /// Gaussian weights with standard deviation `1 / sqrt(input_dim)`, zero bias.
    pub fn new(input_dim: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "featurizer", &[input_dim as u64, width as u64]);
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let weights = (0..input_dim * width)
            .map(|_| {
                scale * {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z
                }
            })
            .collect();
        Self {
            input_dim,
            width,
            weights,
            bias: vec![0.0; width],
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_bytes(&self) -> u64 {
        8 * (self.weights.len() + self.bias.len()) as u64
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                context: "featurizer input",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input feature".into()));
        }
        Ok(self
            .weights
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
                z.max(0.0)
            })
            .collect())
    }
}

/// Trainable head parameters: `C × h` weights (row-major) and `C` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams {
    classes: usize,
    width: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LearnerParams {
    pub fn zeros(classes: usize, width: usize) -> Self {
        Self {
            classes,
            width,
            weights: vec![0.0; classes * width],
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_bytes(&self) -> u64 {
        8 * (self.weights.len() + self.bias.len()) as u64
    }

    pub fn checkpoint_bytes(&self) -> u64 {
        CHECKPOINT_HEADER_BYTES + self.param_bytes()
    }

    pub fn logits(&self, phi: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.width)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<u64> {
        let mut buf = Vec::with_capacity(self.checkpoint_bytes() as usize);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.classes as u64).to_le_bytes());
        buf.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        Ok(buf.len() as u64)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let bad = |m: &str| Error::Format {
            kind: "checkpoint",
            message: m.into(),
        };
        if bytes.len() < CHECKPOINT_HEADER_BYTES as usize || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let classes = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let width = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let n = classes * (width + 1);
        if bytes.len() != CHECKPOINT_HEADER_BYTES as usize + 8 * n {
            return Err(bad("length does not match header"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            classes,
            width,
            weights: vals[..classes * width].to_vec(),
            bias: vals[classes * width..].to_vec(),
        })
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward(params: &LearnerParams, feat: &FrozenFeaturizer, x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(params, feat)?;
    let p = softmax(&params.logits(&feat.features(x)?));
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite probabilities".into()));
    }
    Ok(p)
}

pub fn predict(params: &LearnerParams, feat: &FrozenFeaturizer, x: &[f64]) -> Result<usize> {
    Ok(argmax(&params.logits(&feat.features(x)?)))
}

fn check_shapes(params: &LearnerParams, feat: &FrozenFeaturizer) -> Result<()> {
    if params.width != feat.width {
        return Err(Error::Dimension {
            context: "head width vs featurizer width",
            expected: feat.width,
            actual: params.width,
        });
    }
    Ok(())
}

/// Gradient of the mean cross-entropy with respect to the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Analytic gradient and mean loss over a minibatch:
/// `dW = mean (p - y) phi(x)^T`, `db = mean (p - y)`.
pub fn gradient(
    params: &LearnerParams,
    feat: &FrozenFeaturizer,
    minibatch: &[&LabeledExample],
) -> Result<(Gradient, f64)> {
    check_shapes(params, feat)?;
    if minibatch.is_empty() {
        return Err(Error::Empty("gradient of an empty minibatch"));
    }
    let (c, h) = (params.classes, params.width);
    let mut g = Gradient {
        weights: vec![0.0; c * h],
        bias: vec![0.0; c],
    };
    let mut loss = 0.0;
    for ex in minibatch {
        if ex.label >= c {
            return Err(Error::Dimension {
                context: "label vs head classes",
                expected: c,
                actual: ex.label + 1,
            });
        }
        let phi = feat.features(ex.features.as_vector()?)?;
        let logits = params.logits(&phi);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - logits[ex.label];
        for (k, z) in logits.iter().enumerate() {
            let mut delta = (z - log_sum).exp();
            if k == ex.label {
                delta -= 1.0;
            }
            g.bias[k] += delta;
            for (gw, p) in g.weights[k * h..(k + 1) * h].iter_mut().zip(&phi) {
                *gw += delta * p;
            }
        }
    }
    let n = minibatch.len() as f64;
    g.weights
        .iter_mut()
        .chain(g.bias.iter_mut())
        .for_each(|v| *v /= n);
    Ok((g, loss / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_sz: usize,
    /// Heavy-ball momentum; 0 gives plain SGD. Velocity is reset every pass.
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, batch_sz: usize) -> Self {
        Self {
            lr,
            batch_sz,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_sz == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One shuffled pass of minibatch SGD over `data`. Returns the mean of the
/// per-minibatch losses (measured before each step).
pub fn sgd_epoch<R: Rng + ?Sized>(
    params: &mut LearnerParams,
    feat: &FrozenFeaturizer,
    data: &[LabeledExample],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("sgd_epoch over an empty dataset"));
    }
    let mut order: Vec<&LabeledExample> = data.iter().collect();
    order.shuffle(rng);
    let mut velocity: Option<Gradient> = None;
    let mut total = 0.0;
    let mut batches = 0usize;
    for (i, mb) in order.chunks(cfg.batch_sz).enumerate() {
        let (g, loss) = gradient(params, feat, mb)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at minibatch {i}"
            )));
        }
        let step = if cfg.momentum > 0.0 {
            let v = velocity.get_or_insert_with(|| Gradient {
                weights: vec![0.0; g.weights.len()],
                bias: vec![0.0; g.bias.len()],
            });
            for (vv, gv) in v.weights.iter_mut().zip(&g.weights) {
                *vv = cfg.momentum * *vv + gv;
            }
            for (vv, gv) in v.bias.iter_mut().zip(&g.bias) {
                *vv = cfg.momentum * *vv + gv;
            }
            &*v
        } else {
            &g
        };
        for (w, d) in params.weights.iter_mut().zip(&step.weights) {
            *w -= cfg.lr * d;
        }
        for (b, d) in params.bias.iter_mut().zip(&step.bias) {
            *b -= cfg.lr * d;
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Mean cross-entropy over `data`.
pub fn mean_loss(
    params: &LearnerParams,
    feat: &FrozenFeaturizer,
    data: &[LabeledExample],
) -> Result<f64> {
    let refs: Vec<&LabeledExample> = data.iter().collect();
    gradient(params, feat, &refs).map(|(_, l)| l)
}

/// Fraction of `data` whose argmax prediction equals its label.
pub fn evaluate(
    params: &LearnerParams,
    feat: &FrozenFeaturizer,
    data: &[LabeledExample],
) -> Result<f64> {
    check_shapes(params, feat)?;
    if data.is_empty() {
        return Err(Error::Empty("evaluate over an empty dataset"));
    }
    let correct = data
        .par_iter()
        .map(|ex| {
            Ok(usize::from(
                predict(params, feat, ex.features.as_vector()?)? == ex.label,
            ))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// A featurizer drawn from the shared backbone seed and a zero-initialised head.
pub fn fresh_learner(
    input_dim: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> (FrozenFeaturizer, LearnerParams) {
    (
        FrozenFeaturizer::new(input_dim, width, seed),
        LearnerParams::zeros(classes, width),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: Vec<f64>, label: usize) -> LabeledExample {
        LabeledExample::vector(x, label, 0)
    }

    #[test]
    fn zero_head_is_uniform() {
        let (feat, params) = fresh_learner(4, 8, 5, 1);
        let p = forward(&params, &feat, &[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (feat, params) = fresh_learner(2, 3, 2, 1);
        assert!(matches!(
            forward(&params, &feat, &[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            forward(&params, &feat, &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn uniform_prediction_bias_gradient() {
        let (feat, params) = fresh_learner(3, 4, 4, 2);
        let e = ex(vec![0.1, 0.2, 0.3], 2);
        let (g, loss) = gradient(&params, &feat, &[&e]).unwrap();
        assert_eq!(g.bias, vec![0.25, 0.25, -0.75, 0.25]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_zero_gradient() {
        let (feat, mut params) = fresh_learner(3, 4, 3, 2);
        params.bias[1] = 1000.0;
        let e = ex(vec![0.5, -0.2, 0.1], 1);
        let (g, _) = gradient(&params, &feat, &[&e]).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|v| v.abs() < 1e-12));
        let before = params.clone();
        let mut r = rng::stream(0, "t", &[]);
        sgd_epoch(&mut params, &feat, &[e], &SgdConfig::new(0.5, 1), &mut r).unwrap();
        for (a, b) in params
            .weights
            .iter()
            .chain(&params.bias)
            .zip(before.weights.iter().chain(&before.bias))
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (feat, mut params) = fresh_learner(2, 3, 2, 4);
        let data = vec![ex(vec![1.0, 0.0], 0), ex(vec![0.0, 1.0], 1)];
        let mut r = rng::stream(0, "t", &[]);
        sgd_epoch(&mut params, &feat, &data, &SgdConfig::new(0.0, 1), &mut r).unwrap();
        assert_eq!(params, LearnerParams::zeros(2, 3));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let (feat, mut params) = fresh_learner(2, 3, 2, 4);
        let mut r = rng::stream(0, "t", &[]);
        assert!(matches!(
            evaluate(&params, &feat, &[]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            sgd_epoch(&mut params, &feat, &[], &SgdConfig::new(0.1, 1), &mut r),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn label_outside_head_is_rejected() {
        let (feat, params) = fresh_learner(2, 3, 2, 4);
        let e = ex(vec![1.0, 1.0], 2);
        assert!(matches!(
            gradient(&params, &feat, &[&e]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn nan_step_reports_minibatch() {
        let (feat, mut params) = fresh_learner(2, 3, 2, 4);
        params.bias[0] = f64::NAN;
        let data = vec![ex(vec![1.0, 1.0], 0); 4];
        let mut r = rng::stream(0, "t", &[]);
        let err =
            sgd_epoch(&mut params, &feat, &data, &SgdConfig::new(0.1, 2), &mut r).unwrap_err();
        assert!(err.to_string().contains("minibatch 0"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut params = LearnerParams::zeros(3, 2);
        params.weights = vec![1.0, -2.0, 3.5, 0.25, 1e-300, -0.0];
        params.bias = vec![0.1, 0.2, 0.3];
        let mut buf = Vec::new();
        assert_eq!(
            params.write_checkpoint(&mut buf).unwrap(),
            params.checkpoint_bytes()
        );
        assert_eq!(
            LearnerParams::read_checkpoint(&mut buf.as_slice()).unwrap(),
            params
        );
        assert!(LearnerParams::read_checkpoint(&mut &buf[..10]).is_err());
    }

    #[test]
    fn momentum_config_validation() {
        let mut c = SgdConfig::new(0.1, 4);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.9;
        assert!(c.validate().is_ok());
        assert!(SgdConfig::new(0.1, 0).validate().is_err());
    }
}
