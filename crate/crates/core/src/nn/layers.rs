use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BatchStats;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::xavier_uniform;

/// Whether a layer convolves or applies the transposed (adjoint) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Transposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing updated.
    Infer,
}

/// State threaded through a forward pass: the mode, and the leaves
/// registered for every learnable tensor in visiting order.
pub struct ForwardCtx<T: Scalar> {
    pub mode: Mode,
    pub track_grads: bool,
    pub params: Vec<Var>,
    /// Batch statistics of every training-mode batch norm, in call order.
    pub batch_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn new(mode: Mode, track_grads: bool) -> Self {
        Self {
            mode,
            track_grads,
            params: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train, true)
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer, false)
    }

    fn register(&mut self, tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
        let v = tape.leaf(t.clone(), self.track_grads);
        self.params.push(v);
        v
    }
}

/// A named learnable tensor.
pub struct ParamRef<'a, T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor<T>,
}

/// A named learnable tensor, mutably.
pub struct ParamMut<'a, T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor<T>,
}

/// Layers that own learnable tensors and non-learnable buffers.
///
/// Visiting order matches the order in which `forward` registers leaves.
pub trait Parameterized<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Tensor<T>)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut Tensor<T>)>) {}
    /// Batch norms in the order a forward pass calls them.
    fn batch_norms_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut BatchNorm<T>>) {}
}

/// Convolution parameters: kernel, bias and stride under half padding.
///
/// Forward kernels are `Kh x Kw x Cin x Cout`; transposed kernels are stored
/// as `Kh x Kw x Cout x Cin`, the kernel of the forward convolution whose
/// adjoint they apply.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub direction: Direction,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, direction: Direction) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::dim(format!("kernel must be rank 4, got {:?}", kernel.shape())));
        }
        if stride == 0 {
            return Err(Error::contract("stride must be at least 1"));
        }
        let conv = Self {
            kernel,
            bias,
            stride,
            direction,
        };
        if conv.bias.shape() != [conv.out_channels()] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {} output channels",
                conv.bias.shape(),
                conv.out_channels()
            )));
        }
        Ok(conv)
    }

    fn kernel_shape(k: usize, cin: usize, cout: usize, direction: Direction) -> [usize; 4] {
        match direction {
            Direction::Forward => [k, k, cin, cout],
            Direction::Transposed => [k, k, cout, cin],
        }
    }

    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize, direction: Direction) -> Self {
        Self {
            kernel: Tensor::zeros(&Self::kernel_shape(k, cin, cout, direction)),
            bias: Tensor::zeros(&[cout]),
            stride,
            direction,
        }
    }

    /// Xavier-uniform kernel, zero bias.
    pub fn xavier<R: Rng>(k: usize, cin: usize, cout: usize, stride: usize, direction: Direction, rng: &mut R) -> Self {
        Self {
            kernel: xavier_uniform(&Self::kernel_shape(k, cin, cout, direction), rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            direction,
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[0], self.kernel.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        match self.direction {
            Direction::Forward => self.kernel.shape()[2],
            Direction::Transposed => self.kernel.shape()[3],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.direction {
            Direction::Forward => self.kernel.shape()[3],
            Direction::Transposed => self.kernel.shape()[2],
        }
    }

    /// Spatial extent produced from an input extent.
    pub fn output_extent(&self, input: usize) -> usize {
        match self.direction {
            Direction::Forward => input.div_ceil(self.stride),
            Direction::Transposed => input * self.stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let k = ctx.register(tape, &self.kernel);
        let b = ctx.register(tape, &self.bias);
        match self.direction {
            Direction::Forward => tape.conv2d(x, k, b, self.stride),
            Direction::Transposed => tape.conv2d_transposed(x, k, b, self.stride),
        }
    }

    /// Applies the layer to a plain tensor.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = match self.direction {
            Direction::Forward => super::conv2d_forward(x, &self.kernel, &self.bias, self.stride)?,
            Direction::Transposed => super::conv2d_transposed_forward(x, &self.kernel, &self.bias, self.stride)?,
        };
        Ok(out)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.kernel"),
            kind: ParamKind::Kernel,
            tensor: &self.kernel,
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            kind: ParamKind::Bias,
            tensor: &self.bias,
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.kernel"),
            kind: ParamKind::Kernel,
            tensor: &mut self.kernel,
        });
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            kind: ParamKind::Bias,
            tensor: &mut self.bias,
        });
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.997;

/// Batch normalisation with learnable affine transform and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let mu = self.momentum;
        let keep = T::one() - mu;
        for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = mu * *r + keep * *s;
        }
        for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = mu * *r + keep * *s;
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let g = ctx.register(tape, &self.gamma);
        let b = ctx.register(tape, &self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                ctx.batch_stats.push(stats);
                Ok(y)
            }
            Mode::Infer => tape.batch_norm_infer(x, g, b, self.running_mean.data(), self.running_var.data(), self.eps),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::Gamma,
            tensor: &self.gamma,
        });
        out.push(ParamRef {
            name: format!("{prefix}.beta"),
            kind: ParamKind::Beta,
            tensor: &self.beta,
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::Gamma,
            tensor: &mut self.gamma,
        });
        out.push(ParamMut {
            name: format!("{prefix}.beta"),
            kind: ParamKind::Beta,
            tensor: &mut self.beta,
        });
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), &self.running_mean));
        out.push((format!("{prefix}.running_var"), &self.running_var));
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean));
        out.push((format!("{prefix}.running_var"), &mut self.running_var));
    }

    fn batch_norms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNorm<T>>) {
        out.push(self);
    }
}

/// Convolution (or transposed convolution) followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let y = self.conv.forward(tape, x, ctx)?;
        let y = self.bn.forward(tape, y, ctx)?;
        tape.relu(y)
    }
}

impl<T: Scalar> Parameterized<T> for ConvBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.bn.params(&format!("{prefix}.bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&format!("{prefix}.conv"), out);
        self.bn.params_mut(&format!("{prefix}.bn"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.bn.buffers(&format!("{prefix}.bn"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn.buffers_mut(&format!("{prefix}.bn"), out);
    }

    fn batch_norms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNorm<T>>) {
        out.push(&mut self.bn);
    }
}

/// `y = ReLU(h(x) + F(x))` with `F = conv3(s) -> BN -> ReLU -> conv3 -> BN`.
///
/// `h` is the identity when the unit keeps the shape, otherwise a 1x1
/// projection with the unit's stride. The transposed unit uses transposed
/// convolutions throughout and so upsamples by the stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnit<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub direction: Direction,
}

impl<T: Scalar> ResidualUnit<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, stride: usize, direction: Direction, rng: &mut R) -> Self {
        let conv1 = Conv2d::xavier(3, cin, cout, stride, direction, rng);
        let conv2 = Conv2d::xavier(3, cout, cout, 1, direction, rng);
        let shortcut = (cin != cout || stride != 1).then(|| Conv2d::xavier(1, cin, cout, stride, direction, rng));
        Self {
            conv1,
            bn1: BatchNorm::new(cout),
            conv2,
            bn2: BatchNorm::new(cout),
            shortcut,
            direction,
        }
    }

    /// Assembles a unit from explicit parts, checking that the main path and
    /// the shortcut produce the same shape.
    pub fn from_parts(
        conv1: Conv2d<T>,
        bn1: BatchNorm<T>,
        conv2: Conv2d<T>,
        bn2: BatchNorm<T>,
        shortcut: Option<Conv2d<T>>,
        direction: Direction,
    ) -> Result<Self> {
        let mismatch = |what: String| Err(Error::dim(format!("residual unit: {what}")));
        if conv1.direction != direction || conv2.direction != direction {
            return mismatch("convolution directions differ from the unit's".into());
        }
        let (cin, cout) = (conv1.in_channels(), conv1.out_channels());
        if conv2.in_channels() != cout || conv2.out_channels() != cout {
            return mismatch(format!(
                "second conv maps {} -> {}, expected {cout} -> {cout}",
                conv2.in_channels(),
                conv2.out_channels()
            ));
        }
        if conv2.stride != 1 {
            return mismatch("second conv must have stride 1".into());
        }
        if bn1.channels() != cout || bn2.channels() != cout {
            return mismatch(format!("batch norms must have {cout} channels"));
        }
        match &shortcut {
            None if cin != cout || conv1.stride != 1 => {
                return mismatch(format!(
                    "identity shortcut cannot match a {cin} -> {cout}, stride {} main path",
                    conv1.stride
                ))
            }
            Some(s)
                if s.direction != direction
                    || s.in_channels() != cin
                    || s.out_channels() != cout
                    || s.stride != conv1.stride =>
            {
                return mismatch(format!(
                    "projection maps {} -> {} with stride {}, main path {cin} -> {cout} with stride {}",
                    s.in_channels(),
                    s.out_channels(),
                    s.stride,
                    conv1.stride
                ))
            }
            _ => {}
        }
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            direction,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let f = self.conv1.forward(tape, x, ctx)?;
        let f = self.bn1.forward(tape, f, ctx)?;
        let f = tape.relu(f)?;
        let f = self.conv2.forward(tape, f, ctx)?;
        let f = self.bn2.forward(tape, f, ctx)?;
        let h = match &self.shortcut {
            Some(proj) => proj.forward(tape, x, ctx)?,
            None => x,
        };
        let sum = tape.add(h, f)?;
        tape.relu(sum)
    }
}

/// Forward residual unit; rejects transposed parameters.
pub fn residual_unit<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    unit: &ResidualUnit<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var> {
    if unit.direction != Direction::Forward {
        return Err(Error::contract("residual_unit needs a forward unit"));
    }
    unit.forward(tape, x, ctx)
}

/// Transposed residual unit; rejects forward parameters.
pub fn transposed_residual_unit<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    unit: &ResidualUnit<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var> {
    if unit.direction != Direction::Transposed {
        return Err(Error::contract("transposed_residual_unit needs a transposed unit"));
    }
    unit.forward(tape, x, ctx)
}

impl<T: Scalar> Parameterized<T> for ResidualUnit<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.bn1.params(&format!("{prefix}.bn1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.bn2.params(&format!("{prefix}.bn2"), out);
        if let Some(s) = &self.shortcut {
            s.params(&format!("{prefix}.shortcut"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv1.params_mut(&format!("{prefix}.conv1"), out);
        self.bn1.params_mut(&format!("{prefix}.bn1"), out);
        self.conv2.params_mut(&format!("{prefix}.conv2"), out);
        self.bn2.params_mut(&format!("{prefix}.bn2"), out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(&format!("{prefix}.shortcut"), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.bn1.buffers(&format!("{prefix}.bn1"), out);
        self.bn2.buffers(&format!("{prefix}.bn2"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn1.buffers_mut(&format!("{prefix}.bn1"), out);
        self.bn2.buffers_mut(&format!("{prefix}.bn2"), out);
    }

    fn batch_norms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNorm<T>>) {
        out.push(&mut self.bn1);
        out.push(&mut self.bn2);
    }
}
