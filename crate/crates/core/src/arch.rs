//! Text architecture descriptions.
//!
//! One layer per line, `kind key=value ...`; blank lines and `#` comments
//! are ignored. An optional leading `input shape=CxHxW` (or `shape=F`)
//! line fixes the per-example input shape; without it the first layer
//! must be `dense` and the input is taken to be flat.
//!
//! ```text
//! input shape=1x8x8
//! conv2d in=1 out=4 kernel=3 stride=1
//! relu
//! avgpool size=2
//! flatten
//! dense in=36 out=10
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
}

impl LayerKind {
    /// Only layers with a linear map can run in low precision.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Dense { inputs, outputs } => write!(f, "dense in={inputs} out={outputs}"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(
                f,
                "conv2d in={in_channels} out={out_channels} kernel={kernel} stride={stride}"
            ),
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::AvgPool { size } => write!(f, "avgpool size={size}"),
            LayerKind::Flatten => f.write_str("flatten"),
        }
    }
}

/// A layer with its resolved per-example input and output shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl LayerSpec {
    pub fn in_size(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Multiply-accumulates of one forward pass for a single example.
    pub fn forward_macs(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => self.out_size() * in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Parsed architecture: input shape plus shape-checked layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn parse_shape(text: &str, line: usize) -> Result<Vec<usize>> {
    text.split('x')
        .map(|d| match d.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Arch {
                line,
                message: format!("bad shape `{text}`"),
            }),
        })
        .collect()
}

struct Args<'a> {
    line: usize,
    kind: &'a str,
    values: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn parse(line: usize, kind: &'a str, tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Arch {
                line,
                message: format!("expected key=value, got `{tok}`"),
            })?;
            if values.insert(k, v).is_some() {
                return Err(Error::Arch {
                    line,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { line, kind, values })
    }

    fn take(&mut self, key: &str) -> Result<usize> {
        let raw = self.values.remove(key).ok_or_else(|| Error::Arch {
            line: self.line,
            message: format!("{} needs `{key}=`", self.kind),
        })?;
        match raw.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Arch {
                line: self.line,
                message: format!("`{key}` must be a positive integer, got `{raw}`"),
            }),
        }
    }

    fn take_or(&mut self, key: &str, default: usize) -> Result<usize> {
        if self.values.contains_key(key) {
            self.take(key)
        } else {
            Ok(default)
        }
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::Arch {
                line: self.line,
                message: format!("unknown key `{k}` for {}", self.kind),
            }),
            None => Ok(()),
        }
    }
}

/// Parses and shape-checks an architecture description.
pub fn parse_architecture(text: &str) -> Result<Architecture> {
    let mut input_shape: Option<Vec<usize>> = None;
    let mut kinds: Vec<(usize, LayerKind)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let kind = tokens.next().unwrap();
        let mut args = Args::parse(line_no, kind, tokens)?;
        let layer = match kind {
            "input" => {
                if input_shape.is_some() || !kinds.is_empty() {
                    return Err(Error::Arch {
                        line: line_no,
                        message: "`input` must appear once, before any layer".into(),
                    });
                }
                let shape = args.values.remove("shape").ok_or_else(|| Error::Arch {
                    line: line_no,
                    message: "input needs `shape=`".into(),
                })?;
                input_shape = Some(parse_shape(shape, line_no)?);
                args.finish()?;
                continue;
            }
            "dense" => LayerKind::Dense {
                inputs: args.take("in")?,
                outputs: args.take("out")?,
            },
            "conv2d" => LayerKind::Conv2d {
                in_channels: args.take("in")?,
                out_channels: args.take("out")?,
                kernel: args.take("kernel")?,
                stride: args.take_or("stride", 1)?,
            },
            "relu" => LayerKind::Relu,
            "avgpool" => LayerKind::AvgPool {
                size: args.take("size")?,
            },
            "flatten" => LayerKind::Flatten,
            other => {
                return Err(Error::Arch {
                    line: line_no,
                    message: format!("unknown layer kind `{other}`"),
                })
            }
        };
        args.finish()?;
        kinds.push((line_no, layer));
    }

    if kinds.is_empty() {
        return Err(Error::Config("architecture has no layers".into()));
    }
    let input_shape = match input_shape {
        Some(s) => s,
        None => match kinds[0].1 {
            LayerKind::Dense { inputs, .. } => vec![inputs],
            _ => {
                return Err(Error::Arch {
                    line: kinds[0].0,
                    message: "an `input shape=` line is required unless the first layer is dense"
                        .into(),
                })
            }
        },
    };

    let mut layers = Vec::with_capacity(kinds.len());
    let mut shape = input_shape.clone();
    for (id, &(line, kind)) in kinds.iter().enumerate() {
        let out_shape = propagate(&shape, kind, id, line, &layers)?;
        layers.push(LayerSpec {
            id,
            kind,
            in_shape: shape,
            out_shape: out_shape.clone(),
        });
        shape = out_shape;
    }
    Ok(Architecture {
        input_shape,
        layers,
    })
}

fn propagate(
    shape: &[usize],
    kind: LayerKind,
    id: usize,
    line: usize,
    previous: &[LayerSpec],
) -> Result<Vec<usize>> {
    // Mismatches name layers by 1-based position in the description.
    let mismatch = |prev_out: usize, next_in: usize| match previous.last() {
        Some(_) => Error::LayerMismatch {
            prev: id,
            prev_out,
            next: id + 1,
            next_in,
        },
        None => Error::Arch {
            line,
            message: format!("input size {prev_out} \u{2260} layer 1 input {next_in}"),
        },
    };
    match kind {
        LayerKind::Dense { inputs, outputs } => {
            if shape.len() != 1 {
                return Err(Error::Arch {
                    line,
                    message: format!("dense expects a flat input, got shape {shape:?}; add `flatten`"),
                });
            }
            if shape[0] != inputs {
                return Err(mismatch(shape[0], inputs));
            }
            Ok(vec![outputs])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            if shape.len() != 3 {
                return Err(Error::Arch {
                    line,
                    message: format!("conv2d expects a CxHxW input, got shape {shape:?}"),
                });
            }
            if shape[0] != in_channels {
                return Err(mismatch(shape[0], in_channels));
            }
            if shape[1] < kernel || shape[2] < kernel {
                return Err(Error::Arch {
                    line,
                    message: format!("kernel {kernel} larger than input {shape:?}"),
                });
            }
            Ok(vec![
                out_channels,
                (shape[1] - kernel) / stride + 1,
                (shape[2] - kernel) / stride + 1,
            ])
        }
        LayerKind::Relu => Ok(shape.to_vec()),
        LayerKind::AvgPool { size } => {
            if shape.len() != 3 || shape[1] < size || shape[2] < size {
                return Err(Error::Arch {
                    line,
                    message: format!("avgpool size {size} does not fit input {shape:?}"),
                });
            }
            Ok(vec![shape[0], shape[1] / size, shape[2] / size])
        }
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
    }
}
