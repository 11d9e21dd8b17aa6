//! Supervised box-prompted training with best-validation selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::data::{box_from_mask, dihedral, jitter_rng, MaskPair};
use crate::error::{Error, Result};
use crate::metrics::{seg_loss, BinaryMask, LossWeights, MetricReport};
use crate::model::MaskPredictor;
use crate::optim::{Adam, ExponentialDecay};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub loss: LossWeights,
    /// Set by the caller; not part of the JSON schema.
    #[serde(skip)]
    pub seed: u64,
    /// Fresh box jitter per epoch, up to this many pixels; 0 keeps the
    /// stored boxes.
    pub box_jitter: usize,
    /// Random flips and transposes of each training sample per epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 1e-4,
            lr_decay: 0.98,
            loss: LossWeights::default(),
            seed: 7,
            box_jitter: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("bad learning-rate schedule {} x {}^k", self.lr, self.lr_decay)));
        }
        Ok(())
    }
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, name: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed(seed, name, epoch as u64));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_dice: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub rows: Vec<EpochRow>,
    /// Epoch whose parameters were kept (1-based; 0 means untrained).
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
}

impl FitOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_dice,val_dice\n");
        for r in &self.rows {
            let val = r.val_dice.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9e},{:.9e},{:.9e},{val}\n", r.epoch, r.lr, r.train_loss, r.train_dice));
        }
        s
    }
}

fn restore(store: &mut ParamStore, snap: &[(String, Vec<f64>)]) {
    for (p, (name, values)) in store.iter_mut().zip(snap) {
        debug_assert_eq!(&p.name, name);
        p.tensor.data_mut().copy_from_slice(values);
    }
}

/// Mean Dice of thresholded predictions over `pairs`.
pub fn mean_dice<M: MaskPredictor>(model: &M, store: &ParamStore, pairs: &[MaskPair]) -> Result<f64> {
    let reports = evaluate(model, store, pairs)?;
    Ok(reports.iter().map(|(_, r)| r.dice).sum::<f64>() / reports.len().max(1) as f64)
}

/// Per-image metrics with the stored boxes.
pub fn evaluate<M: MaskPredictor>(model: &M, store: &ParamStore, pairs: &[MaskPair]) -> Result<Vec<(String, MetricReport)>> {
    pairs
        .iter()
        .map(|p| {
            let z = model.predict(store, &p.image, &p.bbox)?;
            let pred = BinaryMask::from_logits(&z)?;
            Ok((p.id.clone(), MetricReport::compute(&pred, &p.mask)?))
        })
        .collect()
}

/// Adam over mini-batches with per-epoch shuffling and decay. When `val` is
/// non-empty the parameters of the best validation epoch are restored at
/// the end (ties go to the later epoch).
pub fn fit<M: MaskPredictor>(
    model: &M,
    store: &mut ParamStore,
    train: &[MaskPair],
    val: &[MaskPair],
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let size = model.image_size();
    if let Some(p) = train.iter().chain(val).find(|p| p.mask.height() != size || p.mask.width() != size) {
        return Err(Error::Validation(format!("{} is {}x{}, model expects {size}", p.id, p.mask.height(), p.mask.width())));
    }
    let schedule = ExponentialDecay {
        base: cfg.lr,
        factor: cfg.lr_decay,
    };
    let mut adam = Adam::new(store);
    store.zero_grads();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<(String, Vec<f64>)>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let order = epoch_order(train.len(), cfg.seed, "train-order", epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &train[i];
                let bbox = if cfg.box_jitter > 0 {
                    box_from_mask(&p.mask, cfg.box_jitter, &mut jitter_rng(cfg.seed, &p.id, epoch as u64 + 1))?
                } else {
                    p.bbox
                };
                let k = if cfg.augment {
                    rng::indexed(cfg.seed, &format!("augment:{}", p.id), epoch as u64).random_range(0..8u8)
                } else {
                    0
                };
                let (image, mask, bbox) = dihedral(&p.image, &p.mask, &bbox, k)?;
                let mut tape = Tape::new();
                let z = model.logits(&mut tape, store, &image, &bbox)?;
                let loss = seg_loss(&mut tape, z.var, &mask, &cfg.loss)?;
                loss_sum += tape.value(loss).data()[0];
                let scaled = tape.scale(loss, scale);
                tape.backward_into(scaled, store)?;
            }
            store.fill_missing_grads();
            adam.step(store, lr)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Contract(format!("training loss diverged at epoch {}", epoch + 1)));
        }
        let train_dice = mean_dice(model, store, train)?;
        let val_dice = if val.is_empty() {
            None
        } else {
            Some(mean_dice(model, store, val)?)
        };
        log::info!("epoch {} lr {lr:.3e} loss {train_loss:.5} train dice {train_dice:.4} val dice {val_dice:?}", epoch + 1);
        if let Some(v) = val_dice {
            if best.as_ref().is_none_or(|(b, _, _)| v >= *b) {
                best = Some((v, epoch + 1, store.snapshot()));
            }
        }
        rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss,
            train_dice,
            val_dice,
        });
    }

    let (best_epoch, best_val_dice) = match best {
        Some((v, e, snap)) => {
            restore(store, &snap);
            (e, Some(v))
        }
        None => (cfg.epochs, None),
    };
    Ok(FitOutcome {
        rows,
        best_epoch,
        best_val_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_reproducible_permutation() {
        let a = epoch_order(20, 3, "x", 1);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(20, 3, "x", 1));
        assert_ne!(a, epoch_order(20, 3, "x", 2));
    }

    #[test]
    fn config_rejects_bad_schedule() {
        let bad = TrainConfig {
            lr_decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
