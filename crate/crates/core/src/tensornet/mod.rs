//! Minimal deterministic CPU neural-network engine.
//!
//! Layers expose explicit `forward`/`backward` functions. A layer's gradient has the
//! same type as the layer itself (a zero-initialised copy that backward passes
//! accumulate into), so optimizers and checkpoints only need the [`Parameters`]
//! visitor.

mod activation;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod optim;
mod tensor;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::BinError;

pub use activation::{relu, relu_backward_inplace, sigmoid, softmax, ProbVector};
pub use checkpoint::Checkpoint;
pub use gradcheck::{
    gradcheck, ConvProbe, DenseProbe, Fragment, GradCheckConfig, GradReport, ResidualProbe,
    SoftmaxHeadProbe,
};
pub use layers::{dropout_mask, gap, gap_backward, Conv1d, Dense, ResidualBlock, ResidualCache};
pub use loss::{bce, bce_logit_grad, cross_entropy, cross_entropy_logit_grad, LOG_CLAMP};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerKind, TrainHyper};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("checkpoint is missing parameter block {0:?}")]
    MissingBlock(String),
    #[error("checkpoint: {0}")]
    Format(#[from] BinError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Named visitation over every trainable tensor, in a fixed canonical order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all parameters from a flat buffer laid out as by [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.num_params() {
            return Err(TensorError::Shape(format!(
                "flat buffer has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.data_mut().fill(value));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.data().iter().all(|v| v.is_finite()));
        ok
    }

    /// SHA-256 over parameter names, shapes and the exact f64 bit patterns.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Rounds every parameter to the nearest f32 so checkpoints reload bit-exactly.
    fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64)
        });
    }
}

/// A zero-filled copy with the same layout, used as a gradient accumulator.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}

pub(crate) fn visit_child(
    prefix: &str,
    child: &dyn Parameters,
    f: &mut dyn FnMut(&str, &Tensor),
) {
    child.visit(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub(crate) fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Parameters,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    child.visit_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}
