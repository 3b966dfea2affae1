//! Decoupled training: trunk and final head first, then the early-exit head on the frozen
//! trunk.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_tensor, AmcModel, ArchConfig, BackboneError};
use crate::iqgen::{augment, Dataset, Split};
use crate::tensornet::{
    cross_entropy, cross_entropy_logit_grad, softmax, zeros_like, Dense, Optimizer, Parameters,
    TrainHyper,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTrainConfig {
    pub hyper: TrainHyper,
    pub augment: bool,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper {
                epochs: 30,
                batch_size: 32,
                ..TrainHyper::default()
            },
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitTrainConfig {
    pub hyper: TrainHyper,
    /// Augmented copies of each training frame added to the cached feature set.
    pub augment_views: usize,
}

impl Default for ExitTrainConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper {
                learning_rate: 3e-3,
                epochs: 150,
                batch_size: 64,
                rng_seed: 2,
                ..TrainHyper::default()
            },
            augment_views: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainLog {
    fn record(&mut self, epoch: usize, train_loss: f64, val_accuracy: f64) -> bool {
        self.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
        });
        let improved = self.best_epoch == 0 || val_accuracy > self.best_val_accuracy;
        if improved {
            self.best_epoch = epoch;
            self.best_val_accuracy = val_accuracy;
        }
        improved
    }
}

fn scale(p: &mut dyn Parameters, k: f64) {
    p.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
}

/// Early-exit and final-exit accuracy over `indices`.
pub fn evaluate_accuracy(
    model: &AmcModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, f64), BackboneError> {
    if indices.is_empty() {
        return Err(BackboneError::EmptySplit("evaluation"));
    }
    let (mut ee, mut fe) = (0usize, 0usize);
    for &i in indices {
        let frame = &dataset.frames[i];
        let pair = model.forward_full(&frame.iq)?;
        let y = frame.label.index();
        ee += usize::from(pair.yhat_e == y);
        fe += usize::from(pair.yhat_f == Some(y));
    }
    let n = indices.len() as f64;
    Ok((ee as f64 / n, fe as f64 / n))
}

fn final_accuracy(model: &AmcModel, dataset: &Dataset, indices: &[usize]) -> Result<f64, BackboneError> {
    let mut hits = 0usize;
    for &i in indices {
        let frame = &dataset.frames[i];
        hits += usize::from(model.predict_final(&frame.iq)?.argmax() == frame.label.index());
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Trains stem, stages and the final head with cross-entropy on (augmented) training
/// frames. The weights of the epoch with the best validation accuracy are returned,
/// rounded to f32 so that checkpoints reload exactly.
pub fn train_backbone(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &BackboneTrainConfig,
) -> Result<(AmcModel, TrainLog), BackboneError> {
    let hyper = &cfg.hyper;
    hyper.validate()?;
    let mut train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(BackboneError::EmptySplit("train"));
    }
    if val_idx.is_empty() {
        return Err(BackboneError::EmptySplit("val"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.rng_seed);
    let mut model = AmcModel::new(arch.clone(), &mut rng)?;
    let mut trunk = model.trunk().clone();
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate, trunk.num_params());
    let mut log = TrainLog::default();
    let mut best = trunk.clone();

    for epoch in 1..=hyper.epochs {
        train_idx.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in train_idx.chunks(hyper.batch_size) {
            let mut grad = zeros_like(&trunk);
            for &i in batch {
                let frame = &dataset.frames[i];
                let x = if cfg.augment {
                    frame_tensor(&augment(frame, &mut rng).iq)?
                } else {
                    frame_tensor(&frame.iq)?
                };
                let (loss, _) = trunk.fe_loss_and_grad(&x, frame.label.index(), &mut grad)?;
                if !loss.is_finite() {
                    return Err(BackboneError::Diverged { epoch, loss });
                }
                total_loss += loss;
            }
            scale(&mut grad, 1.0 / batch.len() as f64);
            opt.step(&mut trunk, &grad)?;
        }
        if !trunk.all_finite() {
            return Err(BackboneError::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        *model.trunk_mut() = trunk.clone();
        let train_loss = total_loss / train_idx.len() as f64;
        let val_acc = final_accuracy(&model, dataset, &val_idx)?;
        if log.record(epoch, train_loss, val_acc) {
            best = trunk.clone();
        }
        info!("backbone epoch {epoch}: train loss {train_loss:.4}, val acc {val_acc:.4}");
    }

    *model.trunk_mut() = best;
    model.round_to_f32();
    Ok((model, log))
}

/// Trains only the early-exit head on pooled exit-point features of the frozen trunk.
///
/// The trunk checksum is compared before and after; any change is an error.
pub fn train_exit_branch(
    model: &AmcModel,
    dataset: &Dataset,
    cfg: &ExitTrainConfig,
) -> Result<(AmcModel, TrainLog), BackboneError> {
    let hyper = &cfg.hyper;
    hyper.validate()?;
    let frozen = model.trunk().checksum();
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(BackboneError::EmptySplit("train"));
    }
    if val_idx.is_empty() {
        return Err(BackboneError::EmptySplit("val"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.rng_seed);
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    for &i in &train_idx {
        let frame = &dataset.frames[i];
        train.push((model.exit_features(&frame.iq)?, frame.label.index()));
        for _ in 0..cfg.augment_views {
            let view = augment(frame, &mut rng);
            train.push((model.exit_features(&view.iq)?, frame.label.index()));
        }
    }
    let val: Vec<(Vec<f64>, usize)> = val_idx
        .iter()
        .map(|&i| {
            let f = &dataset.frames[i];
            Ok((model.exit_features(&f.iq)?, f.label.index()))
        })
        .collect::<Result<_, BackboneError>>()?;

    let mut head = model.ee_head().clone();
    let mut best = head.clone();
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate, head.num_params());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grad = zeros_like(&head);
            for &j in batch {
                let (x, y) = &train[j];
                let p = softmax(&head.forward(x)?);
                let loss = cross_entropy(&p, *y);
                if !loss.is_finite() {
                    return Err(BackboneError::Diverged { epoch, loss });
                }
                total_loss += loss;
                head.backward(x, &cross_entropy_logit_grad(&p, *y), &mut grad)?;
            }
            scale(&mut grad, 1.0 / batch.len() as f64);
            opt.step(&mut head, &grad)?;
        }
        let val_acc = head_accuracy(&head, &val)?;
        let train_loss = total_loss / train.len() as f64;
        if log.record(epoch, train_loss, val_acc) {
            best = head.clone();
        }
        if epoch % 25 == 0 || epoch == hyper.epochs {
            info!("exit head epoch {epoch}: train loss {train_loss:.4}, val acc {val_acc:.4}");
        }
    }

    let mut out = model.clone();
    *out.ee_head_mut() = best;
    out.ee_head_mut().round_to_f32();
    if out.trunk().checksum() != frozen {
        warn!("trunk checksum changed while training the exit head");
        return Err(BackboneError::FrozenDrift("exit-branch training"));
    }
    Ok((out, log))
}

fn head_accuracy(head: &Dense, data: &[(Vec<f64>, usize)]) -> Result<f64, BackboneError> {
    let mut hits = 0usize;
    for (x, y) in data {
        hits += usize::from(softmax(&head.forward(x)?).argmax() == *y);
    }
    Ok(hits as f64 / data.len() as f64)
}
