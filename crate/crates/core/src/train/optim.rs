use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamMut};
use crate::tensor::{Scalar, Tensor};

/// RMSProp hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Mean-square decay.
    pub decay: f64,
    pub momentum: f64,
    /// Added inside the square root.
    pub epsilon: f64,
    /// L2 coefficient, applied to convolution kernels only.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            decay: 0.9,
            momentum: 0.9,
            epsilon: 1.0,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config(format!(
                "optimizer.decay must be in [0, 1), got {}",
                self.decay
            )));
        }
        if self.momentum < 0.0 {
            return Err(Error::config("optimizer.momentum must be >= 0"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("optimizer.epsilon must be > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// One RMSProp element update; returns the new `(w, ms, mom)`.
pub fn rmsprop_update(
    w: f64,
    g: f64,
    ms: f64,
    mom: f64,
    cfg: &OptimizerConfig,
    lr: f64,
    decay_weight: bool,
) -> (f64, f64, f64) {
    let g = if decay_weight { g + cfg.weight_decay * w } else { g };
    let ms = cfg.decay * ms + (1.0 - cfg.decay) * g * g;
    let mom = cfg.momentum * mom + lr * g / (ms + cfg.epsilon).sqrt();
    (w - mom, ms, mom)
}

/// RMSProp with per-parameter mean-square and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T: Scalar = f32> {
    pub cfg: OptimizerConfig,
    pub ms: Vec<Vec<T>>,
    pub mom: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(cfg: OptimizerConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            ms: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            mom: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> RmsProp<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter()
                .map(|x| x.iter().map(|&e| U::of(e.to_f64().unwrap_or(f64::NAN))).collect())
                .collect()
        };
        RmsProp {
            cfg: self.cfg.clone(),
            ms: conv(&self.ms),
            mom: conv(&self.mom),
            steps: self.steps,
        }
    }

    /// Applies one update. Gradients are checked for non-finite values
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.ms.len() {
            return Err(Error::contract(format!(
                "{} parameters, {} gradients, optimizer state for {}",
                params.len(),
                grads.len(),
                self.ms.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient of `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    param: p.name.clone(),
                    step: self.steps,
                });
            }
        }
        let c = &self.cfg;
        let (nu, phi, eps) = (T::of(c.decay), T::of(c.momentum), T::of(c.epsilon));
        let (lambda, lr) = (T::of(c.weight_decay), T::of(lr));
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay_weight = p.kind == ParamKind::Kernel;
            let (ms, mom) = (&mut self.ms[i], &mut self.mom[i]);
            for (j, (w, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = if decay_weight { gj + lambda * *w } else { gj };
                ms[j] = nu * ms[j] + (one - nu) * g * g;
                mom[j] = phi * mom[j] + lr * g / (ms[j] + eps).sqrt();
                *w = *w - mom[j];
            }
            if !p.tensor.all_finite() {
                return Err(Error::NonFinite {
                    param: p.name.clone(),
                    step: self.steps,
                });
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_by_hand() {
        let (w, ms, mom) = rmsprop_update(0.5, 1.0, 0.0, 0.0, &no_decay(), 0.01, true);
        assert!((ms - 0.1).abs() < 1e-15);
        assert!((mom - 0.01 / 1.1f64.sqrt()).abs() < 1e-15);
        assert!((mom - 0.0095346).abs() < 1e-7);
        assert!((w - 0.4904654).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        assert_eq!(
            rmsprop_update(0.5, 0.0, 0.0, 0.0, &no_decay(), 0.01, true),
            (0.5, 0.0, 0.0)
        );
    }

    #[test]
    fn momentum_decays_after_gradient_stops() {
        let cfg = no_decay();
        let (w1, ms1, m1) = rmsprop_update(0.5, 1.0, 0.0, 0.0, &cfg, 0.01, true);
        let (w2, ms2, m2) = rmsprop_update(w1, 0.0, ms1, m1, &cfg, 0.01, true);
        let (w3, _, m3) = rmsprop_update(w2, 0.0, ms2, m2, &cfg, 0.01, true);
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
        assert!((m3 - 0.9 * m2).abs() < 1e-15);
        assert!((w2 - (w1 - m2)).abs() < 1e-15);
        assert!((w3 - (w2 - m3)).abs() < 1e-15);
    }

    #[test]
    fn optimizer_matches_scalar_recurrence() {
        let mut kernel = Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let mut opt = RmsProp::<f64>::new(OptimizerConfig::default(), &[1]);
        let (mut w, mut ms, mut mom) = (0.5, 0.0, 0.0);
        for g in [1.0, -0.3, 0.0] {
            let mut params = vec![ParamMut {
                name: "k".into(),
                kind: ParamKind::Kernel,
                tensor: &mut kernel,
            }];
            opt.step(&mut params, &[Tensor::new(&[1, 1, 1, 1], vec![g]).unwrap()], 0.01)
                .unwrap();
            (w, ms, mom) = rmsprop_update(w, g, ms, mom, &OptimizerConfig::default(), 0.01, true);
            assert_eq!(kernel[0], w);
        }
    }

    #[test]
    fn weight_decay_skips_batch_norm_parameters() {
        let run = |lambda: f64| {
            let mut gamma = Tensor::<f64>::new(&[2], vec![1.0, 0.7]).unwrap();
            let cfg = OptimizerConfig {
                weight_decay: lambda,
                ..Default::default()
            };
            let mut opt = RmsProp::<f64>::new(cfg, &[2]);
            let mut params = vec![ParamMut {
                name: "bn.gamma".into(),
                kind: ParamKind::Gamma,
                tensor: &mut gamma,
            }];
            opt.step(&mut params, &[Tensor::new(&[2], vec![0.2, -0.1]).unwrap()], 0.01)
                .unwrap();
            gamma
        };
        assert_eq!(run(0.0), run(5e-4));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut k = Tensor::<f64>::zeros(&[1]);
        let mut opt = RmsProp::<f64>::new(OptimizerConfig::default(), &[1]);
        let mut params = vec![ParamMut {
            name: "layer3.conv.kernel".into(),
            kind: ParamKind::Kernel,
            tensor: &mut k,
        }];
        let err = opt
            .step(&mut params, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()], 0.01)
            .unwrap_err();
        match err {
            Error::NonFinite { param, step } => {
                assert_eq!(param, "layer3.conv.kernel");
                assert_eq!(step, 0);
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(k[0], 0.0);
    }

    #[test]
    fn convex_quadratic_decreases_monotonically() {
        // f(w) = 0.5 * a * w^2 with plain gradient steps (nu = phi = 0).
        let cfg = OptimizerConfig {
            decay: 0.0,
            momentum: 0.0,
            epsilon: 1.0,
            weight_decay: 0.0,
        };
        let a = 3.0;
        let mut w: f64 = 2.0;
        let (mut ms, mut mom) = (0.0, 0.0);
        let mut loss = 0.5 * a * w * w;
        for _ in 0..200 {
            (w, ms, mom) = rmsprop_update(w, a * w, ms, mom, &cfg, 0.3, false);
            let next = 0.5 * a * w * w;
            assert!(next <= loss);
            loss = next;
        }
        assert!(loss < 1e-6);
    }
}
