use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, TopologySpec};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, BatchStats, Conv2d, ConvBlock, Direction, ForwardCtx, ParamMut, ParamRef, Parameterized, ResidualUnit,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T: Scalar> {
    Block(ConvBlock<T>),
    Unit(ResidualUnit<T>),
    Classifier(Conv2d<T>),
}

impl<T: Scalar> Layer<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        match self {
            Layer::Block(b) => b.forward(tape, x, ctx),
            Layer::Unit(u) => u.forward(tape, x, ctx),
            Layer::Classifier(c) => c.forward(tape, x, ctx),
        }
    }

    fn as_params(&self) -> &dyn Parameterized<T> {
        match self {
            Layer::Block(b) => b,
            Layer::Unit(u) => u,
            Layer::Classifier(c) => c,
        }
    }

    fn as_params_mut(&mut self) -> &mut dyn Parameterized<T> {
        match self {
            Layer::Block(b) => b,
            Layer::Unit(u) => u,
            Layer::Classifier(c) => c,
        }
    }
}

/// A network instantiated from a [`TopologySpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    spec: TopologySpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// Xavier-initialised kernels, zero biases, unit gamma, zero beta.
    pub fn build(spec: &TopologySpec, seed: u64) -> Result<Self> {
        let spec = TopologySpec::new(spec.name.clone(), spec.layers.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = spec.input_channels;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let (k, s, n) = (l.kernel, l.stride, l.channels);
            let layer = match l.kind {
                LayerKind::Conv | LayerKind::TConv => {
                    let dir = if l.kind == LayerKind::Conv {
                        Direction::Forward
                    } else {
                        Direction::Transposed
                    };
                    Layer::Block(ConvBlock {
                        conv: Conv2d::xavier(k, cin, n, s, dir, &mut rng),
                        bn: BatchNorm::new(n),
                    })
                }
                LayerKind::Ru => Layer::Unit(ResidualUnit::new(cin, n, s, Direction::Forward, &mut rng)),
                LayerKind::Tru => Layer::Unit(ResidualUnit::new(cin, n, s, Direction::Transposed, &mut rng)),
                LayerKind::Classifier => Layer::Classifier(Conv2d::xavier(1, cin, n, 1, Direction::Forward, &mut rng)),
            };
            layers.push(layer);
            cin = n;
        }
        Ok(Self { spec, layers })
    }

    /// Sets the running-statistics momentum of every batch norm.
    pub fn set_bn_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!(
                "batch-norm momentum must be in (0, 1), got {momentum}"
            )));
        }
        let mut bns = Vec::new();
        for layer in &mut self.layers {
            layer.as_params_mut().batch_norms_mut(&mut bns);
        }
        bns.into_iter().for_each(|bn| bn.momentum = T::of(momentum));
        Ok(())
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Checks an `N x H x W x C` input against the topology.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let stride = self.spec.total_stride();
        match shape {
            [_, h, w, c] if *c == self.spec.input_channels && h % stride == 0 && w % stride == 0 => Ok(()),
            [_, h, w, c] if *c == self.spec.input_channels => Err(Error::dim(format!(
                "input {h}x{w} is not a multiple of the total stride {stride} of `{}`",
                self.spec.name
            ))),
            _ => Err(Error::dim(format!(
                "expected N x H x W x {} input, got {shape:?}",
                self.spec.input_channels
            ))),
        }
    }

    /// Logits `N x H x W x classes`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut y = x;
        for layer in &self.layers {
            y = layer.forward(tape, y, ctx)?;
        }
        Ok(y)
    }

    /// Folds the statistics a training-mode forward collected into the
    /// running averages.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let mut bns = Vec::new();
        for layer in &mut self.layers {
            layer.as_params_mut().batch_norms_mut(&mut bns);
        }
        if bns.len() != stats.len() {
            return Err(Error::contract(format!(
                "{} batch statistics for {} batch norms",
                stats.len(),
                bns.len()
            )));
        }
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    /// Inference-mode logits for a plain tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::infer();
        let y = self.forward(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    /// Learnable tensors in forward registration order.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.as_params().params(&format!("layer{i}"), &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.as_params_mut().params_mut(&format!("layer{i}"), &mut out);
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.as_params().buffers(&format!("layer{i}"), &mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.as_params_mut().buffers_mut(&format!("layer{i}"), &mut out);
        }
        out
    }

    /// Same network with every tensor converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.spec, 0).expect("spec already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst.tensor = src.tensor.cast();
        }
        for ((_, dst), (_, src)) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.cast();
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Learnable parameters as little-endian f32, in registration order.
    pub fn param_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.num_parameters());
        for p in self.params() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{count_parameters, count_running_stats, parse_topology};

    #[test]
    fn tiny_model_shapes_and_counts() {
        let spec = parse_topology("c3 s2 4\nru s2 6\ntru s2 6\ntc3 s2 4\nout 3").unwrap();
        let model = Model::<f64>::build(&spec, 1).unwrap();
        let x = Tensor::from_fn(&[2, 8, 12, 1], |i| (i as f64 * 0.37).sin());
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 12, 3]);
        assert_eq!(model.num_parameters() as u64, count_parameters(&spec));
        let running: usize = model.buffers().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(running as u64, count_running_stats(&spec));
        assert_eq!(model.param_blob().len() as u64, 4 * count_parameters(&spec));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = parse_topology("c3 s2 4\ntru s2 4\nout 2").unwrap();
        let a = Model::<f32>::build(&spec, 9).unwrap();
        let b = Model::<f32>::build(&spec, 9).unwrap();
        let c = Model::<f32>::build(&spec, 10).unwrap();
        assert_eq!(a.param_blob(), b.param_blob());
        assert_ne!(a.param_blob(), c.param_blob());
    }

    #[test]
    fn odd_input_is_rejected() {
        let spec = parse_topology("c3 s2 4\ntru s2 4\nout 2").unwrap();
        let model = Model::<f64>::build(&spec, 0).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(&[1, 5, 4, 1])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            model.predict(&Tensor::zeros(&[1, 4, 4, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn batch_stats_commit_moves_running_mean() {
        let spec = parse_topology("c3 s2 2\ntc3 s2 2\nout 2").unwrap();
        let mut model = Model::<f64>::build(&spec, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 4, 1], |i| i as f64));
        let mut ctx = ForwardCtx::train();
        model.forward(&mut tape, x, &mut ctx).unwrap();
        assert_eq!(ctx.batch_stats.len(), 2);
        let before = model.buffers()[0].1.clone();
        model.commit_batch_stats(&ctx.batch_stats).unwrap();
        assert_ne!(model.buffers()[0].1, &before);
        assert!(model.commit_batch_stats(&ctx.batch_stats[..1]).is_err());
    }
}
