//! Initialisation, the optimizer, the learning-rate schedule, checkpoints
//! and the epoch loop.

mod checkpoint;
mod fit;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use fit::{
    batch_tensors, pixel_accuracy, select_best_epoch, train, train_step, EpochRecord, TrainOutcome, TrainStatus,
    Validation, LOG_HEADER,
};
pub use optim::{rmsprop_update, OptimizerConfig, RmsProp};

/// Half-width of the Xavier-uniform range for a `Kh x Kw x A x B` kernel.
pub fn xavier_limit(shape: &[usize]) -> f64 {
    let area: usize = shape[..shape.len().saturating_sub(2)].iter().product();
    let fan_in = area * shape[shape.len() - 2];
    let fan_out = area * shape[shape.len() - 1];
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform samples on `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    assert!(shape.len() >= 2, "kernel shape needs at least two axes");
    let limit = xavier_limit(shape);
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Seeded Xavier-uniform kernel.
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    if shape.len() != 4 || shape.contains(&0) {
        return Err(Error::dim(format!(
            "xavier_init needs a rank-4 kernel shape, got {shape:?}"
        )));
    }
    Ok(xavier_uniform(shape, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `(first epoch, learning rate)` pairs with increasing epochs.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Epochs between validation passes.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 200,
            lr_schedule: vec![(0, 0.01), (50, 0.001), (100, 5e-4), (150, 1e-5)],
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every must be >= 1"));
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::config("train.lr_schedule must start at epoch 0")),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("train.lr_schedule epochs must be strictly increasing"));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("train.lr_schedule rates must be positive"));
        }
        Ok(())
    }

    /// Learning rate of the largest threshold `<= epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(epoch, &self.lr_schedule)
    }
}

pub fn lr_at_epoch(epoch: usize, schedule: &[(usize, f64)]) -> f64 {
    schedule
        .iter()
        .take_while(|&&(start, _)| start <= epoch)
        .last()
        .or(schedule.first())
        .map(|&(_, lr)| lr)
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_limits() {
        assert!((xavier_limit(&[3, 3, 1, 1]) - 0.57735).abs() < 1e-5);
        assert!((xavier_limit(&[5, 5, 1, 64]) - 0.06076).abs() < 1e-5);
        let t: Tensor<f64> = xavier_init(&[3, 3, 1, 1], 4).unwrap();
        let l = (6.0f64 / 18.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= l));
    }

    #[test]
    fn xavier_is_seeded() {
        let a: Tensor<f32> = xavier_init(&[5, 5, 1, 64], 7).unwrap();
        let b: Tensor<f32> = xavier_init(&[5, 5, 1, 64], 7).unwrap();
        assert_eq!(a, b);
        assert!(xavier_init::<f32>(&[3, 3], 0).is_err());
    }

    #[test]
    fn schedule_boundaries_are_inclusive() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 0.01);
        assert_eq!(cfg.lr_at_epoch(49), 0.01);
        assert_eq!(cfg.lr_at_epoch(50), 0.001);
        assert_eq!(cfg.lr_at_epoch(149), 5e-4);
        assert_eq!(cfg.lr_at_epoch(150), 1e-5);
        assert_eq!(cfg.lr_at_epoch(199), 1e-5);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        let mut cfg = TrainConfig {
            lr_schedule: vec![(0, 0.1), (10, 0.01), (10, 0.001)],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.lr_schedule = vec![(0, -0.1)];
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
