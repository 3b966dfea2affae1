//! Lightweight benefit-aware predictor.
//!
//! A 10→64→32→1 perceptron reads the early-exit probability vector and estimates the
//! probability that the early prediction is wrong while the final exit is right.

mod train;

use rand::{Rng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{AmcModel, BackboneError};
use crate::iqgen::{Dataset, Split};
use crate::tensornet::{
    bce, bce_logit_grad, dropout_mask, relu, relu_backward_inplace, sigmoid, visit_child,
    visit_child_mut, zeros_like, Checkpoint, Dense, Fragment, Parameters, ProbVector, Tensor,
    TensorError,
};
use crate::NUM_CLASSES;

pub use train::{mean_bce, train_lbap, LbapEpoch, LbapTrainConfig, LbapTrainLog};

pub const LBAP_HIDDEN: [usize; 2] = [64, 32];
pub const LBAP_DROPOUT: f64 = 0.2;
pub const CHECKPOINT_PREFIX: &str = "lbap";

#[derive(Debug, Error)]
pub enum LbapError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {scores} scores vs {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("LBAP training diverged at epoch {0}")]
    Diverged(usize),
    #[error("frozen parameters changed during {0}")]
    FrozenDrift(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Whether deeper inference turns a wrong early prediction into a right one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecovLabel(bool);

impl RecovLabel {
    pub fn new(recoverable: bool) -> Self {
        Self(recoverable)
    }

    pub fn is_recoverable(self) -> bool {
        self.0
    }

    pub fn value(self) -> u8 {
        u8::from(self.0)
    }
}

pub fn recoverability_label(yhat_e: usize, yhat_f: usize, y: usize) -> RecovLabel {
    RecovLabel(yhat_e != y && yhat_f == y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbapModel {
    pub dense1: Dense,
    pub dense2: Dense,
    pub dense3: Dense,
    pub dropout_rate: f64,
    trained: bool,
}

impl Parameters for LbapModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("dense1", &self.dense1, f);
        visit_child("dense2", &self.dense2, f);
        visit_child("dense3", &self.dense3, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("dense1", &mut self.dense1, f);
        visit_child_mut("dense2", &mut self.dense2, f);
        visit_child_mut("dense3", &mut self.dense3, f);
    }
}

/// Forward activations kept for backpropagation.
struct LbapTrace {
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    mask1: Option<Vec<f64>>,
    mask2: Option<Vec<f64>>,
    score: f64,
}

fn apply_mask(a: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => a.iter().zip(m).map(|(x, k)| x * k).collect(),
        None => a.to_vec(),
    }
}

impl LbapModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dense1: Dense::he_uniform(NUM_CLASSES, LBAP_HIDDEN[0], rng),
            dense2: Dense::he_uniform(LBAP_HIDDEN[0], LBAP_HIDDEN[1], rng),
            dense3: Dense::he_uniform(LBAP_HIDDEN[1], 1, rng),
            dropout_rate: LBAP_DROPOUT,
            trained: false,
        }
    }

    pub fn zeros() -> Self {
        Self {
            dense1: Dense::zeros(NUM_CLASSES, LBAP_HIDDEN[0]),
            dense2: Dense::zeros(LBAP_HIDDEN[0], LBAP_HIDDEN[1]),
            dense3: Dense::zeros(LBAP_HIDDEN[1], 1),
            dropout_rate: LBAP_DROPOUT,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn trace(
        &self,
        p: &[f64],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LbapTrace, TensorError> {
        let a1 = relu(&self.dense1.forward(p)?);
        let (mask1, mask2) = match rng {
            Some(rng) if self.dropout_rate > 0.0 => (
                Some(dropout_mask(a1.len(), self.dropout_rate, rng)),
                Some(dropout_mask(self.dense2.output_dim(), self.dropout_rate, rng)),
            ),
            _ => (None, None),
        };
        let h1 = apply_mask(&a1, &mask1);
        let a2 = relu(&self.dense2.forward(&h1)?);
        let h2 = apply_mask(&a2, &mask2);
        let score = sigmoid(self.dense3.forward(&h2)?[0]);
        Ok(LbapTrace {
            a1,
            h1,
            a2,
            h2,
            mask1,
            mask2,
            score,
        })
    }

    /// Benefit score. Dropout is applied only when `training` is set and an RNG is given.
    pub fn forward(
        &self,
        p: &ProbVector,
        training: bool,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<f64, TensorError> {
        let rng = if training { rng } else { None };
        Ok(self.trace(p.as_slice(), rng)?.score)
    }

    /// Inference-mode benefit score.
    pub fn score(&self, p: &ProbVector) -> Result<f64, TensorError> {
        self.forward(p, false, None)
    }

    /// BCE of one sample; parameter gradients are accumulated into `grad`. Returns the
    /// loss and the input gradient.
    pub(crate) fn loss_and_grad(
        &self,
        p: &[f64],
        label: bool,
        rng: Option<&mut dyn RngCore>,
        grad: &mut LbapModel,
    ) -> Result<(f64, Vec<f64>), TensorError> {
        let t = self.trace(p, rng)?;
        let loss = bce(t.score, label);
        let gz = [bce_logit_grad(t.score, label)];
        let mut g2 = apply_mask(&self.dense3.backward(&t.h2, &gz, &mut grad.dense3)?, &t.mask2);
        relu_backward_inplace(&t.a2, &mut g2);
        let mut g1 = apply_mask(&self.dense2.backward(&t.h1, &g2, &mut grad.dense2)?, &t.mask1);
        relu_backward_inplace(&t.a1, &mut g1);
        let gx = self.dense1.backward(p, &g1, &mut grad.dense1)?;
        Ok((loss, gx))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self, CHECKPOINT_PREFIX)
    }

    /// Restores the canonical architecture from `lbap.dense1/2/3` blocks.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TensorError> {
        let mut m = Self::zeros();
        ck.restore(&mut m, CHECKPOINT_PREFIX)?;
        m.trained = true;
        Ok(m)
    }

    pub fn macs(&self) -> u64 {
        self.dense1.macs() + self.dense2.macs() + self.dense3.macs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LbapOverhead {
    pub macs: u64,
    pub params: usize,
    /// False when the layer widths differ from 10→64→32→1.
    pub canonical: bool,
}

pub fn lbap_overhead(model: &LbapModel) -> LbapOverhead {
    let dims = [
        (model.dense1.input_dim(), model.dense1.output_dim()),
        (model.dense2.input_dim(), model.dense2.output_dim()),
        (model.dense3.input_dim(), model.dense3.output_dim()),
    ];
    let canonical = dims
        == [
            (NUM_CLASSES, LBAP_HIDDEN[0]),
            (LBAP_HIDDEN[0], LBAP_HIDDEN[1]),
            (LBAP_HIDDEN[1], 1),
        ];
    LbapOverhead {
        macs: model.macs(),
        params: model.num_params(),
        canonical,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub avg_predicted: f64,
    pub true_ratio: f64,
    pub abs_gap: f64,
}

pub fn calibration_report(scores: &[f64], labels: &[RecovLabel]) -> Result<Calibration, LbapError> {
    if scores.len() != labels.len() {
        return Err(LbapError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(LbapError::Empty("calibration"));
    }
    let n = scores.len() as f64;
    let avg_predicted = scores.iter().sum::<f64>() / n;
    let true_ratio = labels.iter().filter(|l| l.is_recoverable()).count() as f64 / n;
    Ok(Calibration {
        avg_predicted,
        true_ratio,
        abs_gap: (avg_predicted - true_ratio).abs(),
    })
}

/// Early-exit probabilities with recoverability labels from full forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct LbapSample {
    pub p_e: ProbVector,
    pub label: RecovLabel,
}

/// Runs both exits on every frame of `split`; the model is only read.
pub fn lbap_samples(
    model: &AmcModel,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<LbapSample>, LbapError> {
    let mut out = Vec::new();
    for i in dataset.indices(split) {
        let frame = &dataset.frames[i];
        let pair = model.forward_full(&frame.iq)?;
        let yhat_f = pair.yhat_f.expect("full forward has a final exit");
        out.push(LbapSample {
            label: recoverability_label(pair.yhat_e, yhat_f, frame.label.index()),
            p_e: pair.p_e,
        });
    }
    Ok(out)
}

/// LBAP loss on one input, with the input itself exposed for gradient checking.
#[derive(Debug, Clone)]
pub struct LbapProbe {
    pub model: LbapModel,
    pub input: Tensor,
    label: bool,
}

impl LbapProbe {
    /// Random model and input, redrawn until every hidden pre-activation is clear of the
    /// ReLU kink; a finite-difference step across a kink is not a gradient error.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        const MARGIN: f64 = 1e-3;
        loop {
            let probe = Self::draw(rng);
            let m = &probe.model;
            let z1 = m.dense1.forward(probe.input.data()).expect("shape");
            let z2 = m.dense2.forward(&relu(&z1)).expect("shape");
            if z1.iter().chain(&z2).all(|z| z.abs() > MARGIN) {
                return probe;
            }
        }
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut model = LbapModel::new(rng);
        model.visit_mut(&mut |name, t| {
            if name.ends_with("bias") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        });
        let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        Self {
            model,
            input: Tensor::from_vec(&[NUM_CLASSES], raw.iter().map(|v| v / sum).collect())
                .expect("shape"),
            label: rng.random_bool(0.5),
        }
    }
}

impl Parameters for LbapProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("lbap", &self.model, f);
        f("input", &self.input);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("lbap", &mut self.model, f);
        f("input", &mut self.input);
    }
}

impl Fragment for LbapProbe {
    fn loss(&self) -> f64 {
        let t = self.model.trace(self.input.data(), None).expect("shape");
        bce(t.score, self.label)
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        let (_, gx) = self
            .model
            .loss_and_grad(self.input.data(), self.label, None, &mut g.model)
            .expect("shape");
        g.input.data_mut().copy_from_slice(&gx);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::{gradcheck, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overhead_is_exact() {
        let m = LbapModel::zeros();
        let o = lbap_overhead(&m);
        assert_eq!((o.macs, o.params), (2720, 2817));
        assert!(o.canonical);
        assert_eq!(
            [m.dense1.num_params(), m.dense2.num_params(), m.dense3.num_params()],
            [704, 2080, 33]
        );
        assert_eq!([m.dense1.macs(), m.dense2.macs(), m.dense3.macs()], [640, 2048, 32]);
        let mut odd = LbapModel::zeros();
        odd.dense2 = Dense::zeros(64, 16);
        odd.dense3 = Dense::zeros(16, 1);
        let o = lbap_overhead(&odd);
        assert!(!o.canonical);
        assert_eq!(o.macs, 640 + 1024 + 16);
    }

    #[test]
    fn label_examples() {
        assert!(recoverability_label(2, 5, 5).is_recoverable());
        assert!(!recoverability_label(5, 5, 5).is_recoverable());
        assert!(!recoverability_label(2, 3, 5).is_recoverable());
        assert!(!recoverability_label(5, 3, 5).is_recoverable());
        assert_eq!(recoverability_label(2, 5, 5).value(), 1);
    }

    #[test]
    fn zero_model_scores_one_half() {
        let m = LbapModel::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [ProbVector::uniform(10), ProbVector::one_hot(10, 3)] {
            assert_eq!(m.score(&p).unwrap(), 0.5);
            assert_eq!(m.forward(&p, true, Some(&mut rng)).unwrap(), 0.5);
        }
    }

    #[test]
    fn inference_is_deterministic_and_training_uses_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LbapModel::new(&mut rng);
        let p = ProbVector::new(vec![0.3, 0.2, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05])
            .unwrap();
        let s = m.score(&p).unwrap();
        assert_eq!(s, m.score(&p).unwrap());
        assert_eq!(s, m.forward(&p, false, Some(&mut rng)).unwrap());
        let noisy: Vec<f64> = (0..20)
            .map(|_| m.forward(&p, true, Some(&mut rng)).unwrap())
            .collect();
        assert!(noisy.iter().any(|&v| v != s));
        assert!(noisy.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn full_lbap_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let r = gradcheck(&LbapProbe::random(&mut rng), &GradCheckConfig::default());
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.checked, 2817 + 10);
        }
    }

    #[test]
    fn calibration_examples() {
        let c = calibration_report(
            &[0.2, 0.8],
            &[RecovLabel::new(false), RecovLabel::new(true)],
        )
        .unwrap();
        assert_eq!((c.avg_predicted, c.true_ratio, c.abs_gap), (0.5, 0.5, 0.0));
        let c = calibration_report(&[0.1; 3], &[RecovLabel::new(false); 3]).unwrap();
        assert!((c.avg_predicted - 0.1).abs() < 1e-12 && (c.abs_gap - 0.1).abs() < 1e-12);
        assert_eq!(c.true_ratio, 0.0);
        assert!(matches!(calibration_report(&[], &[]), Err(LbapError::Empty(_))));
        assert!(calibration_report(&[0.1], &[]).is_err());
    }

    #[test]
    fn checkpoint_block_names() {
        let m = LbapModel::new(&mut ChaCha8Rng::seed_from_u64(4));
        let ck = m.to_checkpoint();
        let names: Vec<&str> = ck.blocks.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "lbap.dense1.weight",
                "lbap.dense1.bias",
                "lbap.dense2.weight",
                "lbap.dense2.bias",
                "lbap.dense3.weight",
                "lbap.dense3.bias"
            ]
        );
        let mut snapped = m.clone();
        snapped.round_to_f32();
        let back =
            LbapModel::from_checkpoint(&Checkpoint::from_bytes(&snapped.to_checkpoint().to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back.checksum(), snapped.checksum());
        assert!(back.is_trained());
    }
}
