use crate::error::{Error, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

struct SoftmaxCrossEntropyBack<T> {
    probs: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> Backward<T> for SoftmaxCrossEntropyBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let pixels = self.labels.len();
        let c = self.probs.len() / pixels;
        let scale = g[0] / T::from_usize(pixels).expect("count fits");
        let mut grad = self.probs.clone();
        for (p, &label) in self.labels.iter().enumerate() {
            let row = &mut grad[p * c..(p + 1) * c];
            row[label as usize] = row[label as usize] - T::one();
            row.iter_mut().for_each(|v| *v = *v * scale);
        }
        vec![Some(grad)]
    }
}

/// Row-wise softmax over the last axis, computed stably.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / total);
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Mean over pixels of `-log softmax(logits)[label]`.
    ///
    /// `labels` holds one class index per `N x H x W` pixel of the
    /// `N x H x W x C` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, h, w, c) = lt.nhwc()?;
        if labels.len() != n * h * w {
            return Err(Error::dim(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                lt.shape()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= c) {
            let (b, rest) = (i / (h * w), i % (h * w));
            return Err(Error::Label {
                value: labels[i],
                num_classes: c,
                position: format!("(n={b}, row={}, col={})", rest / w, rest % w),
            });
        }
        let mut total = T::zero();
        for (row, &label) in lt.data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[label as usize]);
        }
        let loss = total / T::from_usize(labels.len()).expect("count fits");
        let probs = softmax(lt.data(), c);
        self.record(
            &[logits],
            Tensor::scalar(loss),
            SoftmaxCrossEntropyBack {
                probs,
                labels: labels.to_vec(),
            },
        )
    }
}
