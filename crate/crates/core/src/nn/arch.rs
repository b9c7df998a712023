//! Declarative model architectures and closed-form parameter counting.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::kernels::{Padding, KERNEL_EDGE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    /// Frames flattened to vectors and fed straight to the LSTM stack.
    PureLstm,
    /// Time-distributed 3-D CNN feeding the LSTM stack.
    Rcnn,
}

/// `layers` back-to-back 3x3x3 convolutions with `filters` output channels,
/// followed by one 2x2x2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvBlock {
    pub layers: usize,
    pub filters: usize,
}

/// Which voxels of a frame form the pure-LSTM input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FlattenScope {
    /// In-mask voxels only, in scan order.
    #[default]
    Mask,
    /// The full X*Y*Z grid.
    Grid,
}

impl FlattenScope {
    pub fn name(self) -> &'static str {
        match self {
            FlattenScope::Mask => "mask",
            FlattenScope::Grid => "grid",
        }
    }
}

impl FromStr for FlattenScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(FlattenScope::Mask),
            "grid" => Ok(FlattenScope::Grid),
            other => Err(Error::Config(format!(
                "flatten_scope must be `mask` or `grid`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub conv_blocks: Vec<ConvBlock>,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub padding: Padding,
    pub flatten_scope: FlattenScope,
}

/// Names accepted by [`ArchitectureSpec::named`].
pub const NAMED_ARCHITECTURES: [&str; 4] = ["lstm", "rcnn-2-1", "rcnn-1-2", "rcnn-2-2-1"];

impl ArchitectureSpec {
    /// Two-layer, 32-unit LSTM stack with no convolutional front end.
    pub fn lstm() -> Self {
        ArchitectureSpec {
            kind: ArchKind::PureLstm,
            conv_blocks: Vec::new(),
            lstm_layers: 2,
            lstm_hidden: 32,
            dropout: 0.5,
            num_classes: 2,
            padding: Padding::Same,
            flatten_scope: FlattenScope::Mask,
        }
    }

    /// R-CNN with the given `(layers, filters)` blocks and the standard LSTM stack.
    pub fn rcnn(blocks: &[(usize, usize)]) -> Self {
        ArchitectureSpec {
            kind: ArchKind::Rcnn,
            conv_blocks: blocks
                .iter()
                .map(|&(layers, filters)| ConvBlock { layers, filters })
                .collect(),
            ..Self::lstm()
        }
    }

    /// One of the four reference models: `lstm`, `rcnn-2-1`, `rcnn-1-2`,
    /// `rcnn-2-2-1`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "lstm" => Ok(Self::lstm()),
            "rcnn-2-1" => Ok(Self::rcnn(&[(2, 16), (1, 32)])),
            "rcnn-1-2" => Ok(Self::rcnn(&[(1, 16), (2, 32)])),
            "rcnn-2-2-1" => Ok(Self::rcnn(&[(2, 16), (2, 32), (1, 32)])),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected one of {})",
                NAMED_ARCHITECTURES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ArchKind::Rcnn if self.conv_blocks.is_empty() => {
                return Err(Error::Config("rcnn needs at least one conv block".into()))
            }
            ArchKind::PureLstm if !self.conv_blocks.is_empty() => {
                return Err(Error::Config("pure lstm takes no conv blocks".into()))
            }
            _ => {}
        }
        if self
            .conv_blocks
            .iter()
            .any(|b| b.layers == 0 || b.filters == 0)
        {
            return Err(Error::Config("conv blocks need >= 1 layer and >= 1 filter".into()));
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("lstm needs >= 1 layer and >= 1 unit".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of every conv layer in order.
    pub fn conv_layers(&self) -> Vec<(usize, usize)> {
        let mut c_in = 1;
        let mut out = Vec::new();
        for block in &self.conv_blocks {
            for _ in 0..block.layers {
                out.push((c_in, block.filters));
                c_in = block.filters;
            }
        }
        out
    }

    /// Per-frame feature map shapes `(C, X, Y, Z)` after each conv layer and
    /// each pool, in forward order, for an rcnn on the given grid.
    pub fn feature_shapes(&self, grid: [usize; 3]) -> Result<Vec<[usize; 4]>> {
        let mut dims = grid;
        let mut shapes = Vec::new();
        for block in &self.conv_blocks {
            for _ in 0..block.layers {
                for d in &mut dims {
                    *d = self.padding.output_dim(*d).ok_or_else(|| {
                        Error::Shape(format!("grid {grid:?} too small for architecture"))
                    })?;
                }
                shapes.push([block.filters, dims[0], dims[1], dims[2]]);
            }
            if dims.iter().any(|&d| d < 2) {
                return Err(Error::Shape(format!(
                    "grid {grid:?} collapses below the 2x2x2 pool window"
                )));
            }
            dims = dims.map(|d| d / 2);
            shapes.push([block.filters, dims[0], dims[1], dims[2]]);
        }
        Ok(shapes)
    }

    /// Length of the per-time-step vector fed to the first LSTM layer.
    pub fn lstm_input_dim(&self, input: &InputShape) -> Result<usize> {
        match self.kind {
            ArchKind::Rcnn => {
                let last = self
                    .feature_shapes(input.grid)?
                    .last()
                    .copied()
                    .ok_or_else(|| Error::Config("rcnn without conv blocks".into()))?;
                Ok(last.iter().product())
            }
            ArchKind::PureLstm => match self.flatten_scope {
                FlattenScope::Grid => Ok(input.grid.iter().product()),
                FlattenScope::Mask => input.mask_voxels.ok_or_else(|| {
                    Error::Config("flatten_scope = mask needs a mask voxel count".into())
                }),
            },
        }
    }

    /// Serialized `key=value` lines; the inverse of [`ArchitectureSpec::from_text`].
    pub fn to_text(&self) -> String {
        let blocks = self
            .conv_blocks
            .iter()
            .map(|b| format!("{}x{}", b.layers, b.filters))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "kind={}\nconv_blocks={}\nlstm_layers={}\nlstm_hidden={}\ndropout={}\nnum_classes={}\npadding={}\nflatten_scope={}\n",
            match self.kind {
                ArchKind::PureLstm => "lstm",
                ArchKind::Rcnn => "rcnn",
            },
            blocks,
            self.lstm_layers,
            self.lstm_hidden,
            self.dropout,
            self.num_classes,
            self.padding.name(),
            self.flatten_scope.name(),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::lstm();
        let mut kind = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad architecture line `{line}`")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("`{k}` expects an integer, got `{v}`")))
            };
            match k {
                "kind" => {
                    kind = Some(match v {
                        "lstm" => ArchKind::PureLstm,
                        "rcnn" => ArchKind::Rcnn,
                        _ => return Err(Error::Config(format!("unknown kind `{v}`"))),
                    })
                }
                "conv_blocks" => spec.conv_blocks = parse_blocks(v)?,
                "lstm_layers" => spec.lstm_layers = num(v)?,
                "lstm_hidden" => spec.lstm_hidden = num(v)?,
                "dropout" => {
                    spec.dropout = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dropout `{v}`")))?
                }
                "num_classes" => spec.num_classes = num(v)?,
                "padding" => spec.padding = v.parse()?,
                "flatten_scope" => spec.flatten_scope = v.parse()?,
                other => return Err(Error::Config(format!("unknown architecture key `{other}`"))),
            }
        }
        spec.kind = kind.ok_or_else(|| Error::Config("architecture text lacks `kind`".into()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses block syntax such as `2x16,1x32` (layers x filters).
pub fn parse_blocks(s: &str) -> Result<Vec<ConvBlock>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| {
            let (l, f) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("conv block `{part}` is not LAYERSxFILTERS")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("conv block `{part}` is not LAYERSxFILTERS")))
            };
            Ok(ConvBlock {
                layers: parse(l)?,
                filters: parse(f)?,
            })
        })
        .collect()
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ArchKind::PureLstm => write!(f, "LSTM")?,
            ArchKind::Rcnn => {
                let layers: Vec<String> = self.conv_blocks.iter().map(|b| b.layers.to_string()).collect();
                write!(f, "RCNN ({})", layers.join(", "))?
            }
        }
        write!(f, " + {}x{} LSTM", self.lstm_layers, self.lstm_hidden)
    }
}

/// Spatial extent of the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub grid: [usize; 3],
    /// In-mask voxel count; needed only for masked pure-LSTM input.
    pub mask_voxels: Option<usize>,
}

impl InputShape {
    pub fn grid(grid: [usize; 3]) -> Self {
        InputShape {
            grid,
            mask_voxels: None,
        }
    }
}

pub fn conv_param_count(c_in: usize, c_out: usize) -> usize {
    KERNEL_EDGE.pow(3) * c_in * c_out + c_out
}

pub fn dense_param_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Input weights, recurrent weights and bias for the four stacked gates.
pub fn lstm_param_count(d_in: usize, d_h: usize) -> usize {
    4 * (d_in * d_h + d_h * d_h + d_h)
}

/// Closed-form number of trainable scalars.
pub fn param_count(spec: &ArchitectureSpec, input: &InputShape) -> Result<usize> {
    spec.validate()?;
    let conv: usize = spec
        .conv_layers()
        .iter()
        .map(|&(i, o)| conv_param_count(i, o))
        .sum();
    let mut d_in = spec.lstm_input_dim(input)?;
    let mut lstm = 0;
    for _ in 0..spec.lstm_layers {
        lstm += lstm_param_count(d_in, spec.lstm_hidden);
        d_in = spec.lstm_hidden;
    }
    Ok(conv + lstm + dense_param_count(spec.lstm_hidden, spec.num_classes))
}
