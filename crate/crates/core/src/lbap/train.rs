use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LbapError, LbapModel, LbapSample};
use crate::tensornet::{bce, zeros_like, Optimizer, Parameters, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbapTrainConfig {
    pub hyper: TrainHyper,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for LbapTrainConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper {
                learning_rate: 1e-3,
                epochs: 300,
                batch_size: 256,
                dropout_rate: super::LBAP_DROPOUT,
                rng_seed: 3,
                ..TrainHyper::default()
            },
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbapEpoch {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LbapTrainLog {
    pub epochs: Vec<LbapEpoch>,
    pub best_epoch: usize,
    pub best_val_bce: f64,
    /// Constant predictor at the training base rate, evaluated on validation.
    pub base_rate_val_bce: f64,
    pub stopped_early: bool,
}

/// Mean BCE in inference mode.
pub fn mean_bce(model: &LbapModel, data: &[LbapSample]) -> Result<f64, LbapError> {
    if data.is_empty() {
        return Err(LbapError::Empty("bce"));
    }
    let mut total = 0.0;
    for s in data {
        total += bce(model.score(&s.p_e)?, s.label.is_recoverable());
    }
    Ok(total / data.len() as f64)
}

/// Minimizes mean BCE with mini-batch updates and early stopping on validation BCE.
/// The weights from the best validation epoch are kept and rounded to f32.
pub fn train_lbap(
    train: &[LbapSample],
    val: &[LbapSample],
    cfg: &LbapTrainConfig,
) -> Result<(LbapModel, LbapTrainLog), LbapError> {
    let hyper = &cfg.hyper;
    hyper.validate()?;
    if train.is_empty() {
        return Err(LbapError::Empty("LBAP training set"));
    }
    if val.is_empty() {
        return Err(LbapError::Empty("LBAP validation set"));
    }
    let positives = train.iter().filter(|s| s.label.is_recoverable()).count();
    if positives == 0 || positives == train.len() {
        warn!(
            "degenerate recoverability labels: {positives} of {} positive",
            train.len()
        );
    }
    let base_rate = positives as f64 / train.len() as f64;
    let base_rate_val_bce =
        val.iter().map(|s| bce(base_rate, s.label.is_recoverable())).sum::<f64>() / val.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.rng_seed);
    let mut model = LbapModel::new(&mut rng);
    model.dropout_rate = hyper.dropout_rate;
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate, model.num_params());
    let mut best = model.clone();
    let mut log = LbapTrainLog {
        best_val_bce: f64::INFINITY,
        base_rate_val_bce,
        ..LbapTrainLog::default()
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grad = zeros_like(&model);
            for &i in batch {
                let s = &train[i];
                let (loss, _) = model.loss_and_grad(
                    s.p_e.as_slice(),
                    s.label.is_recoverable(),
                    Some(&mut dropout_rng),
                    &mut grad,
                )?;
                total += loss;
            }
            let k = 1.0 / batch.len() as f64;
            grad.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            opt.step(&mut model, &grad)?;
        }
        if !total.is_finite() || !model.all_finite() {
            return Err(LbapError::Diverged(epoch));
        }
        let train_bce = total / train.len() as f64;
        let val_bce = mean_bce(&model, val)?;
        log.epochs.push(LbapEpoch {
            epoch,
            train_bce,
            val_bce,
        });
        if val_bce < log.best_val_bce {
            log.best_val_bce = val_bce;
            log.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = true;
                info!("LBAP early stop at epoch {epoch}, best {}", log.best_epoch);
                break;
            }
        }
    }
    best.round_to_f32();
    best.mark_trained();
    log.best_val_bce = mean_bce(&best, val)?;
    info!(
        "LBAP val BCE {:.5} (base rate {:.5})",
        log.best_val_bce, log.base_rate_val_bce
    );
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbap::RecovLabel;
    use crate::tensornet::ProbVector;

    fn sample<R: Rng>(rng: &mut R) -> ProbVector {
        let raw: Vec<f64> = (0..10).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
    }

    fn separable(n: usize, seed: u64) -> Vec<LbapSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p_e = sample(&mut rng);
                LbapSample {
                    label: RecovLabel::new(p_e.argmax() == 4),
                    p_e,
                }
            })
            .collect()
    }

    #[test]
    fn learns_a_separable_task() {
        let train = separable(3000, 1);
        let val = separable(600, 2);
        let cfg = LbapTrainConfig {
            hyper: TrainHyper {
                learning_rate: 3e-3,
                batch_size: 64,
                ..LbapTrainConfig::default().hyper
            },
            ..LbapTrainConfig::default()
        };
        let (m, log) = train_lbap(&train, &val, &cfg).unwrap();
        let hits = val
            .iter()
            .filter(|s| (m.score(&s.p_e).unwrap() >= 0.5) == s.label.is_recoverable())
            .count();
        assert!(hits as f64 / val.len() as f64 > 0.95, "{hits}/{}", val.len());
        assert!(log.best_val_bce < log.base_rate_val_bce);
        assert!(m.is_trained());
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let train = separable(300, 3);
        let val = separable(100, 4);
        let cfg = LbapTrainConfig {
            hyper: TrainHyper {
                epochs: 5,
                ..LbapTrainConfig::default().hyper
            },
            ..LbapTrainConfig::default()
        };
        let (a, la) = train_lbap(&train, &val, &cfg).unwrap();
        let (b, lb) = train_lbap(&train, &val, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(la, lb);
    }

    #[test]
    fn degenerate_labels_still_train() {
        let mut train = separable(200, 5);
        train.iter_mut().for_each(|s| s.label = RecovLabel::new(false));
        let val = train[..50].to_vec();
        let cfg = LbapTrainConfig {
            hyper: TrainHyper {
                epochs: 20,
                ..LbapTrainConfig::default().hyper
            },
            ..LbapTrainConfig::default()
        };
        let (m, _) = train_lbap(&train, &val, &cfg).unwrap();
        assert!(m.score(&val[0].p_e).unwrap() < 0.5);
    }
}
