use crate::error::{Error, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

fn channels_of<T: Scalar>(x: &Tensor<T>) -> usize {
    *x.shape().last().expect("tensor has rank >= 1")
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = channels_of(x);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "batch norm over {c} channels got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

struct BatchNormTrainBack<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for BatchNormTrainBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let m = T::from_usize(g.len() / c).expect("count fits");
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (gp, xp) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] = sum_g[ch] + gp[ch];
                sum_gx[ch] = sum_gx[ch] + gp[ch] * xp[ch];
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = Vec::with_capacity(g.len());
            for (gp, xp) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch] / m;
                    gx.push(scale * (m * gp[ch] - sum_g[ch] - xp[ch] * sum_gx[ch]));
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

struct BatchNormInferBack<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for BatchNormInferBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (gp, xp) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] = sum_g[ch] + gp[ch];
                sum_gx[ch] = sum_gx[ch] + gp[ch] * xp[ch];
            }
        }
        let gx = needs[0].then(|| {
            g.chunks_exact(c)
                .flat_map(|gp| (0..c).map(move |ch| gp[ch] * gamma[ch] * self.inv_std[ch]))
                .collect()
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalises each channel with statistics of the batch (all axes but
    /// the last), then applies `gamma * xhat + beta`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xt = self.value(x);
        let c = check_affine(xt, self.value(gamma), self.value(beta))?;
        let count = xt.len() / c;
        if count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let m = T::from_usize(count).expect("count fits");
        let mut mean = vec![T::zero(); c];
        for px in xt.data().chunks_exact(c) {
            for ch in 0..c {
                mean[ch] = mean[ch] + px[ch];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        let mut var = vec![T::zero(); c];
        for px in xt.data().chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] - mean[ch];
                var[ch] = var[ch] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for px in xt.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gm[ch] * h + bt[ch]);
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        let y = self.record(&[x, gamma, beta], out, BatchNormTrainBack { xhat, inv_std })?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Normalises with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let xt = self.value(x);
        let c = check_affine(xt, self.value(gamma), self.value(beta))?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim(format!(
                "running statistics have {} / {} entries for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for px in xt.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gm[ch] * h + bt[ch]);
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        self.record(&[x, gamma, beta], out, BatchNormInferBack { xhat, inv_std })
    }
}
