use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, TopologySpec};

/// How multiply-accumulates are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpMode {
    /// One op per multiply-accumulate.
    Mac,
    /// Two ops per multiply-accumulate (multiply and add separately).
    MulAdd,
}

impl OpMode {
    pub fn ops_per_mac(self) -> u64 {
        match self {
            OpMode::Mac => 1,
            OpMode::MulAdd => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpMode::Mac => "mac",
            OpMode::MulAdd => "muladd",
        }
    }
}

impl std::str::FromStr for OpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mac" => Ok(OpMode::Mac),
            "muladd" => Ok(OpMode::MulAdd),
            other => Err(format!("unknown op mode `{other}` (expected mac or muladd)")),
        }
    }
}

/// Kernel plus bias of a single convolution.
pub fn conv_parameters(kh: usize, kw: usize, cin: usize, cout: usize) -> u64 {
    (kh * kw * cin * cout + cout) as u64
}

/// Multiply-accumulate ops of one convolution producing `hout x wout`.
/// A transposed convolution is counted on its forward geometry, i.e. with
/// the input extent of the transposed layer as `hout x wout`.
pub fn conv_operations(kh: usize, kw: usize, cin: usize, cout: usize, hout: usize, wout: usize, mode: OpMode) -> u64 {
    mode.ops_per_mac() * (kh * kw * cin * cout * hout * wout) as u64
}

/// Learnable parameters of one layer given its input channel count.
pub fn layer_parameters(layer: &LayerSpec, cin: usize) -> u64 {
    let (k, n) = (layer.kernel, layer.channels);
    let bn = 2 * n as u64;
    match layer.kind {
        LayerKind::Conv | LayerKind::TConv => conv_parameters(k, k, cin, n) + bn,
        LayerKind::Ru | LayerKind::Tru => {
            let mut p = conv_parameters(3, 3, cin, n) + bn + conv_parameters(3, 3, n, n) + bn;
            if has_projection(layer, cin) {
                p += conv_parameters(1, 1, cin, n);
            }
            p
        }
        LayerKind::Classifier => conv_parameters(1, 1, cin, n),
    }
}

fn has_projection(layer: &LayerSpec, cin: usize) -> bool {
    cin != layer.channels || layer.stride != 1
}

/// Learnable parameters of the whole network (kernels, biases, BN affine).
pub fn count_parameters(spec: &TopologySpec) -> u64 {
    let mut cin = spec.input_channels;
    let mut total = 0;
    for l in &spec.layers {
        total += layer_parameters(l, cin);
        cin = l.channels;
    }
    total
}

/// Non-learnable batch-norm running statistics (mean and variance).
pub fn count_running_stats(spec: &TopologySpec) -> u64 {
    spec.layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv | LayerKind::TConv => 2 * l.channels as u64,
            LayerKind::Ru | LayerKind::Tru => 4 * l.channels as u64,
            LayerKind::Classifier => 0,
        })
        .sum()
}

/// Ops of one layer on an `h x w` input. Returns the ops and the output extent.
pub fn layer_operations(layer: &LayerSpec, cin: usize, h: usize, w: usize, mode: OpMode) -> (u64, usize, usize) {
    let (k, s, n) = (layer.kernel, layer.stride, layer.channels);
    let (ho, wo) = match layer.kind {
        LayerKind::Conv | LayerKind::Ru => (h.div_ceil(s), w.div_ceil(s)),
        LayerKind::TConv | LayerKind::Tru => (h * s, w * s),
        LayerKind::Classifier => (h, w),
    };
    let out_elems = (n * ho * wo) as u64;
    // Spatial grid of the strided (forward-geometry) side of the first conv.
    let (sh, sw) = if layer.kind.upsamples() { (h, w) } else { (ho, wo) };
    let ops = match layer.kind {
        LayerKind::Conv | LayerKind::TConv => conv_operations(k, k, cin, n, sh, sw, mode) + 2 * out_elems,
        LayerKind::Ru | LayerKind::Tru => {
            let mut ops = conv_operations(3, 3, cin, n, sh, sw, mode)
                + conv_operations(3, 3, n, n, ho, wo, mode)
                // BN, ReLU, BN, add, ReLU
                + 5 * out_elems;
            if has_projection(layer, cin) {
                ops += conv_operations(1, 1, cin, n, sh, sw, mode);
            }
            ops
        }
        LayerKind::Classifier => conv_operations(1, 1, cin, n, ho, wo, mode),
    };
    (ops, ho, wo)
}

/// Total ops of a forward pass on one `h x w` input.
pub fn count_operations(spec: &TopologySpec, h: usize, w: usize, mode: OpMode) -> u64 {
    let (mut h, mut w, mut cin) = (h, w, spec.input_channels);
    let mut total = 0;
    for l in &spec.layers {
        let (ops, ho, wo) = layer_operations(l, cin, h, w, mode);
        total += ops;
        (h, w, cin) = (ho, wo, l.channels);
    }
    total
}
