//! Line-oriented layer notation: `c5 s2 64` is a 5x5 convolution with
//! stride 2 and 64 filters.
//!
//! ```text
//! name danet-fcn2        # optional, names the topology
//! c<k> [s<s>] <n>        # conv -> BN -> ReLU
//! tc<k> [s<s>] <n>       # transposed conv -> BN -> ReLU
//! ru [s<s>] <n>          # residual unit
//! tru [s<s>] <n>         # transposed residual unit
//! out <n>                # 1x1 classifier convolution
//! ```
//!
//! An omitted stride means 1; `#` starts a comment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    TConv,
    Ru,
    Tru,
    Classifier,
}

impl LayerKind {
    /// True for layers that shrink the spatial grid by their stride.
    pub fn downsamples(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Ru)
    }

    /// True for layers that grow the spatial grid by their stride.
    pub fn upsamples(self) -> bool {
        matches!(self, LayerKind::TConv | LayerKind::Tru)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride,
            channels,
        }
    }

    pub fn tconv(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kind: LayerKind::TConv,
            kernel,
            stride,
            channels,
        }
    }

    pub fn ru(stride: usize, channels: usize) -> Self {
        Self {
            kind: LayerKind::Ru,
            kernel: 3,
            stride,
            channels,
        }
    }

    pub fn tru(stride: usize, channels: usize) -> Self {
        Self {
            kind: LayerKind::Tru,
            kernel: 3,
            stride,
            channels,
        }
    }

    pub fn classifier(channels: usize) -> Self {
        Self {
            kind: LayerKind::Classifier,
            kernel: 1,
            stride: 1,
            channels,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::Topology(format!("`{self}`: kernel must be >= 1")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Topology(format!("`{self}`: stride must be 1 or 2")));
        }
        if self.channels == 0 {
            return Err(Error::Topology(format!("`{self}`: channels must be >= 1")));
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stride = |f: &mut fmt::Formatter<'_>| {
            if self.stride != 1 {
                write!(f, " s{}", self.stride)
            } else {
                Ok(())
            }
        };
        match self.kind {
            LayerKind::Conv => write!(f, "c{} s{} {}", self.kernel, self.stride, self.channels),
            LayerKind::TConv => write!(f, "tc{} s{} {}", self.kernel, self.stride, self.channels),
            LayerKind::Ru => {
                write!(f, "ru")?;
                stride(f)?;
                write!(f, " {}", self.channels)
            }
            LayerKind::Tru => {
                write!(f, "tru")?;
                stride(f)?;
                write!(f, " {}", self.channels)
            }
            LayerKind::Classifier => write!(f, "out {}", self.channels),
        }
    }
}

/// A validated network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl TopologySpec {
    /// Validates the layer list: non-empty, sane layer fields, a final
    /// classifier, and encoder strides cancelling decoder strides.
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Topology("empty topology".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        let last = layers.last().expect("non-empty");
        if last.kind != LayerKind::Classifier {
            return Err(Error::Topology(format!(
                "last layer must be an `out` classifier, got `{last}`"
            )));
        }
        if let Some(i) = layers[..layers.len() - 1]
            .iter()
            .position(|l| l.kind == LayerKind::Classifier)
        {
            return Err(Error::Topology(format!(
                "classifier allowed only as the last layer (found at layer {i})"
            )));
        }
        let down: usize = layers
            .iter()
            .filter(|l| l.kind.downsamples())
            .map(|l| l.stride)
            .product();
        let up: usize = layers.iter().filter(|l| l.kind.upsamples()).map(|l| l.stride).product();
        if down != up {
            return Err(Error::Topology(format!(
                "strides do not cancel: encoder downsamples by {down}, decoder upsamples by {up}"
            )));
        }
        Ok(Self {
            name: name.into(),
            num_classes: last.channels,
            layers,
            input_channels: 1,
        })
    }

    /// Product of the encoder strides; inputs should be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind.downsamples())
            .map(|l| l.stride)
            .product()
    }

    /// Spatial output extent for a given input extent.
    pub fn output_extent(&self, mut extent: usize) -> usize {
        for l in &self.layers {
            extent = if l.kind.downsamples() {
                extent.div_ceil(l.stride)
            } else if l.kind.upsamples() {
                extent * l.stride
            } else {
                extent
            };
        }
        extent
    }

    /// Same topology with every non-classifier width divided by `divisor`
    /// (at least `min_channels`).
    pub fn with_width_divisor(&self, divisor: usize, min_channels: usize) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Classifier => *l,
                _ => LayerSpec {
                    channels: (l.channels / divisor.max(1)).max(min_channels.max(1)),
                    ..*l
                },
            })
            .collect();
        Self {
            name: format!("{}-w{divisor}", self.name),
            layers,
            ..self.clone()
        }
    }

    /// DSL text that [`parse_topology`] maps back to this spec.
    pub fn render(&self) -> String {
        let mut out = format!("name {}\n", self.name);
        for l in &self.layers {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }
}

fn parse_number(tok: &str, what: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| Error::Parse {
        line,
        message: format!("expected {what}, got `{tok}`"),
    })
}

fn parse_line(tokens: &[&str], line: usize) -> Result<LayerSpec> {
    let head = tokens[0];
    let (kind, kernel) = if let Some(k) = head.strip_prefix("tc") {
        (LayerKind::TConv, parse_number(k, "kernel size", line)?)
    } else if head == "tru" {
        (LayerKind::Tru, 3)
    } else if head == "ru" {
        (LayerKind::Ru, 3)
    } else if head == "out" {
        (LayerKind::Classifier, 1)
    } else if let Some(k) = head.strip_prefix('c') {
        (LayerKind::Conv, parse_number(k, "kernel size", line)?)
    } else {
        return Err(Error::Parse {
            line,
            message: format!("unknown layer `{head}`"),
        });
    };
    let (stride, rest) = match tokens.get(1).and_then(|t| t.strip_prefix('s')) {
        Some(s) if kind != LayerKind::Classifier => (parse_number(s, "stride", line)?, &tokens[2..]),
        _ => (1, &tokens[1..]),
    };
    let channels = match rest {
        [n] => parse_number(n, "channel count", line)?,
        [] => {
            return Err(Error::Parse {
                line,
                message: "missing channel count".into(),
            })
        }
        [_, extra, ..] => {
            return Err(Error::Parse {
                line,
                message: format!("unexpected token `{extra}`"),
            })
        }
    };
    Ok(LayerSpec {
        kind,
        kernel,
        stride,
        channels,
    })
}

/// Grammar-level parse: returns the optional name and the layers without
/// checking the topology as a whole.
pub fn parse_layers(text: &str) -> Result<(Option<String>, Vec<LayerSpec>)> {
    let mut name = None;
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens[0] == "name" {
            match tokens[1..] {
                [n] => name = Some(n.to_string()),
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: "`name` takes exactly one identifier".into(),
                    })
                }
            }
            continue;
        }
        layers.push(parse_line(&tokens, line)?);
    }
    Ok((name, layers))
}

/// Parses and validates a topology description.
pub fn parse_topology(text: &str) -> Result<TopologySpec> {
    let (name, layers) = parse_layers(text)?;
    TopologySpec::new(name.unwrap_or_else(|| "custom".into()), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_entry() {
        let (_, layers) = parse_layers("c5 s2 64").unwrap();
        assert_eq!(layers, vec![LayerSpec::conv(5, 2, 64)]);
    }

    #[test]
    fn three_layer_topology_cancels() {
        let spec = parse_topology("c3 s2 32\ntru s2 32\nout 7").unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.layers[1], LayerSpec::tru(2, 32));
        assert_eq!(spec.num_classes, 7);
        assert_eq!(spec.total_stride(), 2);
    }

    #[test]
    fn empty_and_comment_only_text_is_rejected() {
        assert!(matches!(parse_topology(""), Err(Error::Topology(_))));
        assert!(matches!(parse_topology("# nothing\n\n"), Err(Error::Topology(_))));
    }

    #[test]
    fn unknown_token_reports_line() {
        let err = parse_topology("c3 s2 8\n\nxx 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_topology("c3 s2 8 9"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_topology("ru s2"), Err(Error::Parse { .. })));
    }

    #[test]
    fn non_cancelling_strides_are_rejected() {
        assert!(matches!(parse_topology("c5 s2 64\nout 7"), Err(Error::Topology(_))));
        assert!(matches!(
            parse_topology("c3 s2 8\nru s2 8\ntru s2 8\nout 7"),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn stride_must_be_one_or_two() {
        assert!(matches!(
            parse_topology("c3 s3 8\ntc3 s3 8\nout 2"),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn omitted_stride_means_one_and_comments_are_ignored() {
        let spec = parse_topology("name t  # a name\nru 16 # unit\nout 3\n").unwrap();
        assert_eq!(spec.name, "t");
        assert_eq!(spec.layers[0], LayerSpec::ru(1, 16));
    }
}
