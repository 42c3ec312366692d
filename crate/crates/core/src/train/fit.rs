use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, OptimizerConfig, RmsProp, TrainConfig};
use crate::data::{MaskVolume, TileSet, Volume};
use crate::error::{Error, Result};
use crate::eval::{argmax_classes, evaluate_testset};
use crate::nn::ForwardCtx;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::topology::Model;

pub const LOG_HEADER: &str = "epoch,loss,val_miou,lr,seconds";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let miou = self.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!("{},{:.9},{miou},{},{:.3}", self.epoch, self.loss, self.lr, self.seconds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped early; the best checkpoint so far is kept.
    Diverged {
        epoch: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
    /// Model after the last completed step.
    pub last: Model<T>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn log_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        self.log
            .iter()
            .for_each(|r| writeln!(out, "{}", r.csv_row()).expect("string write"));
        out
    }
}

/// Slices scored for model selection.
pub struct Validation<'a> {
    pub volume: &'a Volume,
    pub masks: &'a MaskVolume,
    pub slices: &'a [usize],
    pub tile_h: usize,
    pub tile_w: usize,
}

/// Index of the highest score; the earliest wins ties.
pub fn select_best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Stacks the indexed tiles into an `N x H x W x 1` batch and flat labels.
pub fn batch_tensors<T: Scalar>(tiles: &TileSet, idx: &[usize]) -> Result<(Tensor<T>, Vec<u8>)> {
    let per = tiles.tile_h * tiles.tile_w;
    let mut x = Vec::with_capacity(idx.len() * per);
    let mut y = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        let t = &tiles.tiles[i];
        x.extend(t.image.iter().map(|&v| T::of(v as f64)));
        y.extend_from_slice(&t.mask);
    }
    Ok((Tensor::new(&[idx.len(), tiles.tile_h, tiles.tile_w, 1], x)?, y))
}

/// One forward/backward/update on a batch. Returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut RmsProp<T>,
    x: Tensor<T>,
    labels: &[u8],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut ctx = ForwardCtx::train();
    let logits = model.forward(&mut tape, xv, &mut ctx)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss became {value} at step {}", opt.steps)));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = ctx
        .params
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    model.commit_batch_stats(&ctx.batch_stats)?;
    opt.step(&mut model.params_mut(), &grads, lr)?;
    Ok(value)
}

/// Fraction of tile pixels whose inference-mode argmax matches the mask.
pub fn pixel_accuracy<T: Scalar>(model: &Model<T>, tiles: &TileSet) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    let idx: Vec<usize> = (0..tiles.len()).collect();
    for chunk in idx.chunks(16) {
        let (x, y) = batch_tensors::<T>(tiles, chunk)?;
        let scores = model.predict(&x)?.cast::<f32>();
        let pred = argmax_classes(scores.data(), model.num_classes());
        hit += pred.iter().zip(&y).filter(|(p, g)| p == g).count();
        total += y.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Divergence(_))
}

/// Seeded-shuffle minibatch RMSProp with per-epoch validation and
/// best-mIOU checkpoint retention.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    tiles: &TileSet,
    val: &Validation<'_>,
    cfg: &TrainConfig,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    opt_cfg.validate()?;
    if tiles.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if val.slices.is_empty() {
        return Err(Error::config("at least one validation slice is required"));
    }
    model
        .check_input(&[1, tiles.tile_h, tiles.tile_w, model.spec().input_channels])
        .map_err(|e| Error::config(format!("training tiles do not fit the model: {e}")))?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
    let mut opt = RmsProp::<T>::new(opt_cfg.clone(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = batch_tensors::<T>(tiles, batch)?;
            match train_step(&mut model, &mut opt, x, &y, lr) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(e) if is_divergence(&e) => {
                    log::error!("epoch {epoch}: {e}");
                    status = TrainStatus::Diverged {
                        epoch,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = loss_sum / tiles.len() as f64;
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs;
        let val_miou = if evaluate {
            let report = evaluate_testset(&model, val.volume, val.masks, val.slices, val.tile_h, val.tile_w)?;
            Some(report.mmiou)
        } else {
            None
        };
        if let Some(m) = val_miou {
            if best.as_ref().is_none_or(|b| m > b.val_miou) {
                best = Some(Checkpoint {
                    model: model.cast(),
                    optimizer: opt.cast(),
                    epoch,
                    val_miou: m,
                    rng: rng.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch,
            loss,
            val_miou,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.csv_row());
        log.push(record);
    }
    Ok(TrainOutcome {
        best,
        log,
        status,
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_earliest_max() {
        assert_eq!(select_best_epoch(&[0.5, 0.9, 0.7]), Some(1));
        assert_eq!(select_best_epoch(&[0.5, 0.9, 0.9]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn csv_row_leaves_missing_miou_blank() {
        let r = EpochRecord {
            epoch: 3,
            loss: 0.5,
            val_miou: None,
            lr: 0.01,
            seconds: 1.0,
        };
        assert_eq!(r.csv_row(), "3,0.500000000,,0.01,1.000");
    }
}
