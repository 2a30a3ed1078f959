//! Static model descriptions.
//!
//! A [`ModelSpec`] is an ordered list of layer descriptors plus the input
//! shape and class count. It carries no parameters; the trainer
//! instantiates state from it, the accountant prices it, and the
//! converter rewrites it. Residual groups (the WRN family) nest
//! two-convolution pre-activation blocks inside a single descriptor so
//! the top level stays a plain sequence.
//!
//! [`ModelSpec::units`] walks the description with shape inference and
//! yields every parameterised unit (conv / harmonic / bn / fc) in
//! execution order with a stable hierarchical name. Those names key
//! parameter stores, cost reports, compression plans and the container
//! file, so they must not change between releases.

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::dct::{BasisNorm, SpectrumSelection};
use crate::error::{Error, Result};

/// How a harmonic layer picks its frequency subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSpec {
    /// All `K*K` frequency pairs.
    Full,
    /// Pairs with `u + v <= lambda - 1`.
    Lambda(usize),
    /// An explicit pair list (canonicalised on resolve).
    Pairs(Vec<(usize, usize)>),
}

impl SpectrumSpec {
    pub fn resolve(&self, k: usize) -> Result<SpectrumSelection> {
        match self {
            SpectrumSpec::Full => SpectrumSelection::full(k),
            SpectrumSpec::Lambda(l) => SpectrumSelection::from_lambda(k, *l),
            SpectrumSpec::Pairs(ps) => SpectrumSelection::from_pairs(k, ps),
        }
    }
}

/// Frequency-domain options of one harmonic slot inside a residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSlot {
    pub spectrum: SpectrumSpec,
    pub spectrum_bn: bool,
    pub norm: BasisNorm,
}

impl HarmonicSlot {
    pub fn full() -> HarmonicSlot {
        HarmonicSlot {
            spectrum: SpectrumSpec::Full,
            spectrum_bn: false,
            norm: BasisNorm::Orthonormal,
        }
    }
}

/// One pre-activation residual block: BN-ReLU-conv3x3(stride)-BN-ReLU-conv3x3,
/// plus an optional 1x1 projection on the shortcut. When `harmonic` is set
/// the two 3x3 slots are harmonic blocks with their own frequency options
/// (a depth-graded truncation may treat them differently); the projection
/// always stays an ordinary convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub out: usize,
    pub stride: usize,
    pub projection: bool,
    pub harmonic: Option<[HarmonicSlot; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Harmonic {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        spectrum: SpectrumSpec,
        spectrum_bn: bool,
        norm: BasisNorm,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Average over whatever spatial extent arrives (kernel = input size).
    GlobalAvgPool,
    Dropout {
        p: f64,
    },
    Fc {
        out: usize,
        bias: bool,
    },
    Residual {
        blocks: Vec<ResBlock>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: &str, kind: LayerKind) -> Layer {
        Layer {
            name: name.to_string(),
            kind,
        }
    }
}

/// A complete static model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Input shape `[channels, height, width]` of one sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// A parameterised unit discovered by the shape walk.
#[derive(Debug, Clone)]
pub enum Unit {
    Conv {
        n: usize,
        m: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Harmonic {
        n: usize,
        m: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        selection: SpectrumSelection,
        spectrum_bn: bool,
        norm: BasisNorm,
    },
    Bn {
        channels: usize,
    },
    Fc {
        input: usize,
        output: usize,
        bias: bool,
    },
}

/// One row of the shape trace: a unit, its name, and its input/output
/// shapes as `[channels, height, width]`.
#[derive(Debug, Clone)]
pub struct UnitInfo {
    pub name: String,
    pub unit: Unit,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

fn conv_shape(shape: [usize; 3], out: usize, geom: &ConvGeometry) -> Result<[usize; 3]> {
    Ok([out, geom.out_dim(shape[1])?, geom.out_dim(shape[2])?])
}

impl ModelSpec {
    /// Walk the layers with shape inference and collect every
    /// parameterised unit. Errors on inconsistent shapes, duplicate
    /// names, or unresolvable frequency selections.
    pub fn units(&self) -> Result<Vec<UnitInfo>> {
        let mut shape = self.input;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("model input shape has a zero dimension"));
        }
        let mut out = Vec::new();
        let mut names = std::collections::HashSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate layer name {:?}",
                    layer.name
                )));
            }
            shape = walk_layer(&layer.name, &layer.kind, shape, &mut out)?;
        }
        Ok(out)
    }

    /// Shape of the model output for one sample.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let mut shape = self.input;
        let mut sink = Vec::new();
        for layer in &self.layers {
            shape = walk_layer(&layer.name, &layer.kind, shape, &mut sink)?;
        }
        Ok(shape)
    }

    /// Full consistency check; returns the unit trace.
    pub fn validate(&self) -> Result<Vec<UnitInfo>> {
        self.units()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<ModelSpec> {
        let spec: ModelSpec =
            serde_json::from_str(s).map_err(|e| Error::format(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn walk_layer(
    name: &str,
    kind: &LayerKind,
    shape: [usize; 3],
    out: &mut Vec<UnitInfo>,
) -> Result<[usize; 3]> {
    let fail = |e: Error| Error::invalid(format!("layer {name:?}: {e}"));
    match kind {
        LayerKind::Conv {
            out: m,
            kernel,
            stride,
            pad,
            bias,
        } => {
            let geom = ConvGeometry::new(*kernel, *stride, *pad).map_err(fail)?;
            let next = conv_shape(shape, *m, &geom).map_err(fail)?;
            out.push(UnitInfo {
                name: name.to_string(),
                unit: Unit::Conv {
                    n: shape[0],
                    m: *m,
                    k: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                },
                in_shape: shape,
                out_shape: next,
            });
            Ok(next)
        }
        LayerKind::Harmonic {
            out: m,
            kernel,
            stride,
            pad,
            bias,
            spectrum,
            spectrum_bn,
            norm,
        } => {
            let geom = ConvGeometry::new(*kernel, *stride, *pad).map_err(fail)?;
            let selection = spectrum.resolve(*kernel).map_err(fail)?;
            let next = conv_shape(shape, *m, &geom).map_err(fail)?;
            out.push(UnitInfo {
                name: name.to_string(),
                unit: Unit::Harmonic {
                    n: shape[0],
                    m: *m,
                    k: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                    selection,
                    spectrum_bn: *spectrum_bn,
                    norm: *norm,
                },
                in_shape: shape,
                out_shape: next,
            });
            Ok(next)
        }
        LayerKind::BatchNorm => {
            out.push(UnitInfo {
                name: name.to_string(),
                unit: Unit::Bn { channels: shape[0] },
                in_shape: shape,
                out_shape: shape,
            });
            Ok(shape)
        }
        LayerKind::Relu | LayerKind::Dropout { .. } => {
            if let LayerKind::Dropout { p } = kind {
                if !(0.0..1.0).contains(p) {
                    return Err(fail(Error::invalid("dropout probability outside [0, 1)")));
                }
            }
            Ok(shape)
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        }
        | LayerKind::AvgPool {
            kernel,
            stride,
            pad,
        } => {
            let geom = ConvGeometry::new(*kernel, *stride, *pad).map_err(fail)?;
            conv_shape(shape, shape[0], &geom).map_err(fail)
        }
        LayerKind::GlobalAvgPool => Ok([shape[0], 1, 1]),
        LayerKind::Fc { out: m, bias } => {
            let input = shape[0] * shape[1] * shape[2];
            out.push(UnitInfo {
                name: name.to_string(),
                unit: Unit::Fc {
                    input,
                    output: *m,
                    bias: *bias,
                },
                in_shape: shape,
                out_shape: [*m, 1, 1],
            });
            Ok([*m, 1, 1])
        }
        LayerKind::Residual { blocks } => {
            if blocks.is_empty() {
                return Err(fail(Error::invalid("residual group has no blocks")));
            }
            let mut cur = shape;
            for (j, block) in blocks.iter().enumerate() {
                cur = walk_res_block(&format!("{name}.b{j}"), block, cur, out)
                    .map_err(|e| Error::invalid(format!("layer {name:?} block {j}: {e}")))?;
            }
            Ok(cur)
        }
    }
}

fn walk_res_block(
    prefix: &str,
    block: &ResBlock,
    shape: [usize; 3],
    out: &mut Vec<UnitInfo>,
) -> Result<[usize; 3]> {
    let needs_proj = block.stride != 1 || block.out != shape[0];
    if needs_proj != block.projection {
        return Err(Error::invalid(format!(
            "projection flag {} does not match shapes (in {}, out {}, stride {})",
            block.projection, shape[0], block.out, block.stride
        )));
    }
    let geom3 = ConvGeometry::new(3, block.stride, 1)?;
    let mid = conv_shape(shape, block.out, &geom3)?;
    out.push(UnitInfo {
        name: format!("{prefix}.bn1"),
        unit: Unit::Bn { channels: shape[0] },
        in_shape: shape,
        out_shape: shape,
    });
    let push_slot = |out: &mut Vec<UnitInfo>,
                     name: String,
                     which: usize,
                     n: usize,
                     m: usize,
                     stride: usize,
                     in_shape: [usize; 3],
                     out_shape: [usize; 3]|
     -> Result<()> {
        let unit = match &block.harmonic {
            Some(slots) => {
                let slot = &slots[which];
                Unit::Harmonic {
                    n,
                    m,
                    k: 3,
                    stride,
                    pad: 1,
                    bias: false,
                    selection: slot.spectrum.resolve(3)?,
                    spectrum_bn: slot.spectrum_bn,
                    norm: slot.norm,
                }
            }
            None => Unit::Conv {
                n,
                m,
                k: 3,
                stride,
                pad: 1,
                bias: false,
            },
        };
        out.push(UnitInfo {
            name,
            unit,
            in_shape,
            out_shape,
        });
        Ok(())
    };
    push_slot(
        out,
        format!("{prefix}.conv1"),
        0,
        shape[0],
        block.out,
        block.stride,
        shape,
        mid,
    )?;
    out.push(UnitInfo {
        name: format!("{prefix}.bn2"),
        unit: Unit::Bn {
            channels: block.out,
        },
        in_shape: mid,
        out_shape: mid,
    });
    push_slot(out, format!("{prefix}.conv2"), 1, block.out, block.out, 1, mid, mid)?;
    if block.projection {
        out.push(UnitInfo {
            name: format!("{prefix}.proj"),
            unit: Unit::Conv {
                n: shape[0],
                m: block.out,
                k: 1,
                stride: block.stride,
                pad: 0,
                bias: false,
            },
            in_shape: shape,
            out_shape: mid,
        });
    }
    Ok(mid)
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Adjustable knobs of the named presets. `Default` gives each preset its
/// published configuration.
#[derive(Debug, Clone)]
pub struct PresetOptions {
    /// Input channels (stereo image pairs use 2).
    pub in_channels: Option<usize>,
    pub classes: Option<usize>,
    /// Width of the penultimate fully-connected stage (or of the
    /// fc-replacing harmonic block in the four-block net).
    pub fc_width: Option<usize>,
    /// Input spatial size (square).
    pub input_hw: Option<usize>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            in_channels: None,
            classes: None,
            fc_width: None,
            input_hw: None,
        }
    }
}

/// Names accepted by [`preset_with`]; WRN names follow `wrn-<depth>-<width>`
/// with an optional `-harm` suffix and accept any depth with
/// `(depth - 4) % 6 == 0`.
pub const PRESET_NAMES: &[&str] = &[
    "cnn2",
    "cnn3",
    "harmnet2",
    "harmnet3",
    "harmnet4",
    "wrn-28-10",
    "wrn-28-10-harm",
    "wrn-16-8",
    "wrn-16-8-harm",
    "toy-cnn",
    "toy-harm",
    "toy-harm-nobn",
    "toy-harm-nodc",
];

pub fn preset(name: &str) -> Result<ModelSpec> {
    preset_with(name, &PresetOptions::default())
}

pub fn preset_with(name: &str, opts: &PresetOptions) -> Result<ModelSpec> {
    if let Some(rest) = name.strip_prefix("wrn-") {
        return wrn_from_suffix(name, rest, opts);
    }
    match name {
        "cnn2" => Ok(cnn2(opts)),
        "cnn3" => Ok(cnn3(opts)),
        "harmnet2" => Ok(harmnet(2, opts)),
        "harmnet3" => Ok(harmnet(3, opts)),
        "harmnet4" => Ok(harmnet(4, opts)),
        "toy-cnn" => Ok(toy(name, ToyKind::Conv, opts)),
        "toy-harm" => Ok(toy(name, ToyKind::Harm { dc: true, sbn: true }, opts)),
        "toy-harm-nobn" => Ok(toy(name, ToyKind::Harm { dc: true, sbn: false }, opts)),
        "toy-harm-nodc" => Ok(toy(name, ToyKind::Harm { dc: false, sbn: true }, opts)),
        _ => Err(Error::invalid(format!(
            "unknown preset {name:?}; known: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn conv(out: usize, kernel: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv {
        out,
        kernel,
        stride,
        pad,
        bias: false,
    }
}

fn harm(out: usize, kernel: usize, stride: usize, pad: usize, spectrum_bn: bool) -> LayerKind {
    LayerKind::Harmonic {
        out,
        kernel,
        stride,
        pad,
        bias: false,
        spectrum: SpectrumSpec::Full,
        spectrum_bn,
        norm: BasisNorm::Orthonormal,
    }
}

fn bn_relu(layers: &mut Vec<Layer>, stem: &str) {
    layers.push(Layer::new(&format!("{stem}_bn"), LayerKind::BatchNorm));
    layers.push(Layer::new(&format!("{stem}_relu"), LayerKind::Relu));
}

/// Classifier tail shared by the Table-style nets: fc -> BN -> ReLU ->
/// dropout -> fc. The first fc carries no bias because BN follows it.
fn fc_tail(layers: &mut Vec<Layer>, fc_width: usize, classes: usize) {
    layers.push(Layer::new(
        "fc1",
        LayerKind::Fc {
            out: fc_width,
            bias: false,
        },
    ));
    bn_relu(layers, "fc1");
    layers.push(Layer::new("drop", LayerKind::Dropout { p: 0.5 }));
    layers.push(Layer::new(
        "fc2",
        LayerKind::Fc {
            out: classes,
            bias: true,
        },
    ));
}

fn cnn2(opts: &PresetOptions) -> ModelSpec {
    let (inc, classes) = (opts.in_channels.unwrap_or(2), opts.classes.unwrap_or(5));
    let hw = opts.input_hw.unwrap_or(96);
    let mut layers = Vec::new();
    layers.push(Layer::new("conv1", conv(32, 5, 2, 2)));
    bn_relu(&mut layers, "conv1");
    layers.push(Layer::new(
        "pool1",
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ));
    layers.push(Layer::new("conv2", conv(64, 3, 2, 1)));
    bn_relu(&mut layers, "conv2");
    layers.push(Layer::new(
        "pool2",
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ));
    fc_tail(&mut layers, opts.fc_width.unwrap_or(1024), classes);
    ModelSpec {
        name: "cnn2".into(),
        input: [inc, hw, hw],
        classes,
        layers,
    }
}

fn cnn3(opts: &PresetOptions) -> ModelSpec {
    let (inc, classes) = (opts.in_channels.unwrap_or(2), opts.classes.unwrap_or(5));
    let hw = opts.input_hw.unwrap_or(96);
    let mut layers = Vec::new();
    layers.push(Layer::new("conv1", conv(32, 5, 2, 2)));
    bn_relu(&mut layers, "conv1");
    layers.push(Layer::new("conv2", conv(64, 3, 2, 1)));
    bn_relu(&mut layers, "conv2");
    layers.push(Layer::new(
        "pool1",
        LayerKind::MaxPool {
            kernel: 2,
            stride: 2,
            pad: 0,
        },
    ));
    layers.push(Layer::new("conv3", conv(128, 3, 2, 1)));
    bn_relu(&mut layers, "conv3");
    layers.push(Layer::new(
        "pool2",
        LayerKind::MaxPool {
            kernel: 2,
            stride: 2,
            pad: 0,
        },
    ));
    fc_tail(&mut layers, opts.fc_width.unwrap_or(1024), classes);
    ModelSpec {
        name: "cnn3".into(),
        input: [inc, hw, hw],
        classes,
        layers,
    }
}

/// The two/three/four-block harmonic nets. All share the first two
/// harmonic blocks and the overlapping average pool; the four-block net
/// replaces the wide fc stage with a final harmonic block that consumes
/// the whole remaining 3x3 extent at once.
fn harmnet(depth: usize, opts: &PresetOptions) -> ModelSpec {
    let (inc, classes) = (opts.in_channels.unwrap_or(2), opts.classes.unwrap_or(5));
    let hw = opts.input_hw.unwrap_or(96);
    let fc_width = opts.fc_width.unwrap_or(1024);
    let mut layers = Vec::new();
    layers.push(Layer::new("harm1", harm(32, 4, 4, 0, true)));
    bn_relu(&mut layers, "harm1");
    layers.push(Layer::new("harm2", harm(64, 3, 2, 1, false)));
    bn_relu(&mut layers, "harm2");
    layers.push(Layer::new(
        "pool1",
        LayerKind::AvgPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ));
    if depth >= 3 {
        layers.push(Layer::new("harm3", harm(128, 3, 2, 1, false)));
        bn_relu(&mut layers, "harm3");
    }
    if depth == 4 {
        layers.push(Layer::new("harm4", harm(fc_width, 3, 3, 0, false)));
        bn_relu(&mut layers, "harm4");
        layers.push(Layer::new("drop", LayerKind::Dropout { p: 0.5 }));
        layers.push(Layer::new(
            "fc2",
            LayerKind::Fc {
                out: classes,
                bias: true,
            },
        ));
    } else {
        fc_tail(&mut layers, fc_width, classes);
    }
    ModelSpec {
        name: format!("harmnet{depth}"),
        input: [inc, hw, hw],
        classes,
        layers,
    }
}

fn wrn_from_suffix(full: &str, rest: &str, opts: &PresetOptions) -> Result<ModelSpec> {
    let (rest, harmonic) = match rest.strip_suffix("-harm") {
        Some(r) => (r, true),
        None => (rest, false),
    };
    let parts: Vec<&str> = rest.split('-').collect();
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad WRN preset name {full:?}")))
    };
    if parts.len() != 2 {
        return Err(Error::invalid(format!("bad WRN preset name {full:?}")));
    }
    wrn(full, parse(parts[0])?, parse(parts[1])?, harmonic, opts)
}

/// Wide residual network: an initial 3x3 stem to 16 channels, three
/// residual groups of `(depth - 4) / 6` blocks at widths `16w/32w/64w`
/// with strides 1/2/2, then BN-ReLU, global average pooling and a
/// classifier. With `harmonic` every 3x3 slot (stem included) is a
/// full-spectrum harmonic block without spectrum normalization, which
/// keeps the parameter count identical to the plain version.
pub fn wrn(
    name: &str,
    depth: usize,
    width: usize,
    harmonic: bool,
    opts: &PresetOptions,
) -> Result<ModelSpec> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(Error::invalid(format!(
            "WRN depth must be 6n + 4 with n >= 1, got {depth}"
        )));
    }
    if width == 0 {
        return Err(Error::invalid("WRN width must be positive"));
    }
    let n = (depth - 4) / 6;
    let (inc, classes) = (opts.in_channels.unwrap_or(3), opts.classes.unwrap_or(10));
    let hw = opts.input_hw.unwrap_or(32);
    let slot = || harmonic.then(|| [HarmonicSlot::full(), HarmonicSlot::full()]);
    let mut layers = Vec::new();
    layers.push(Layer::new(
        "conv1",
        if harmonic {
            harm(16, 3, 1, 1, false)
        } else {
            conv(16, 3, 1, 1)
        },
    ));
    let mut channels = 16;
    for (gi, (w, stride)) in [(16 * width, 1), (32 * width, 2), (64 * width, 2)]
        .into_iter()
        .enumerate()
    {
        let mut blocks = Vec::new();
        for b in 0..n {
            let s = if b == 0 { stride } else { 1 };
            blocks.push(ResBlock {
                out: w,
                stride: s,
                projection: b == 0 && (s != 1 || channels != w),
                harmonic: slot(),
            });
            channels = w;
        }
        layers.push(Layer::new(
            &format!("g{}", gi + 1),
            LayerKind::Residual { blocks },
        ));
    }
    layers.push(Layer::new("bn_final", LayerKind::BatchNorm));
    layers.push(Layer::new("relu_final", LayerKind::Relu));
    layers.push(Layer::new("pool", LayerKind::GlobalAvgPool));
    layers.push(Layer::new(
        "fc",
        LayerKind::Fc {
            out: classes,
            bias: true,
        },
    ));
    Ok(ModelSpec {
        name: name.into(),
        input: [inc, hw, hw],
        classes,
        layers,
    })
}

enum ToyKind {
    Conv,
    Harm { dc: bool, sbn: bool },
}

/// Small two-block nets for desk-scale training runs (32x32 single-channel
/// inputs). The no-DC variant drops the constant filter from the first
/// block, which makes the whole net invariant to a global additive
/// brightness shift of the input (the first block has no padding, so
/// every window sees the shift uniformly).
fn toy(name: &str, kind: ToyKind, opts: &PresetOptions) -> ModelSpec {
    let (inc, classes) = (opts.in_channels.unwrap_or(1), opts.classes.unwrap_or(5));
    let hw = opts.input_hw.unwrap_or(32);
    let mut layers = Vec::new();
    match kind {
        ToyKind::Conv => {
            layers.push(Layer::new("block1", conv(16, 4, 4, 0)));
            bn_relu(&mut layers, "block1");
            layers.push(Layer::new("block2", conv(32, 3, 2, 1)));
            bn_relu(&mut layers, "block2");
        }
        ToyKind::Harm { dc, sbn } => {
            let spectrum = if dc {
                SpectrumSpec::Full
            } else {
                let pairs: Vec<(usize, usize)> = (0..4)
                    .flat_map(|u| (0..4).map(move |v| (u, v)))
                    .filter(|&(u, v)| u + v != 0)
                    .collect();
                SpectrumSpec::Pairs(pairs)
            };
            layers.push(Layer::new(
                "block1",
                LayerKind::Harmonic {
                    out: 16,
                    kernel: 4,
                    stride: 4,
                    pad: 0,
                    bias: false,
                    spectrum,
                    spectrum_bn: sbn,
                    norm: BasisNorm::Orthonormal,
                },
            ));
            bn_relu(&mut layers, "block1");
            layers.push(Layer::new("block2", harm(32, 3, 2, 1, false)));
            bn_relu(&mut layers, "block2");
        }
    }
    layers.push(Layer::new(
        "pool",
        LayerKind::AvgPool {
            kernel: 4,
            stride: 4,
            pad: 0,
        },
    ));
    layers.push(Layer::new(
        "fc",
        LayerKind::Fc {
            out: classes,
            bias: true,
        },
    ));
    ModelSpec {
        name: name.into(),
        input: [inc, hw, hw],
        classes,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_named<'a>(units: &'a [UnitInfo], name: &str) -> &'a UnitInfo {
        units
            .iter()
            .find(|u| u.name == name)
            .unwrap_or_else(|| panic!("no unit {name}"))
    }

    #[test]
    fn cnn2_shapes() {
        let spec = preset("cnn2").unwrap();
        let units = spec.validate().unwrap();
        let fc1 = unit_named(&units, "fc1");
        match fc1.unit {
            Unit::Fc { input, output, .. } => {
                assert_eq!(input, 64 * 6 * 6);
                assert_eq!(output, 1024);
            }
            _ => panic!("fc1 is not fc"),
        }
        assert_eq!(spec.output_shape().unwrap(), [5, 1, 1]);
    }

    #[test]
    fn harmnet_shapes() {
        for (name, fc_in) in [("harmnet2", 64 * 6 * 6), ("harmnet3", 128 * 3 * 3)] {
            let spec = preset(name).unwrap();
            let units = spec.validate().unwrap();
            match unit_named(&units, "fc1").unit {
                Unit::Fc { input, .. } => assert_eq!(input, fc_in, "{name}"),
                _ => panic!("fc1 is not fc"),
            }
        }
        // The four-block net ends in a 1x1 extent before its classifier.
        let spec = preset_with(
            "harmnet4",
            &PresetOptions {
                fc_width: Some(32),
                ..Default::default()
            },
        )
        .unwrap();
        let units = spec.validate().unwrap();
        let h4 = unit_named(&units, "harm4");
        assert_eq!(h4.in_shape, [128, 3, 3]);
        assert_eq!(h4.out_shape, [32, 1, 1]);
    }

    #[test]
    fn wrn_structure() {
        let spec = preset("wrn-28-10").unwrap();
        let units = spec.validate().unwrap();
        // 25 convs of 3x3 (1 stem + 24 in blocks), 3 projections, 25 bns, 1 fc.
        let mut convs3 = 0;
        let mut projs = 0;
        let mut bns = 0;
        for u in &units {
            match u.unit {
                Unit::Conv { k: 3, .. } => convs3 += 1,
                Unit::Conv { k: 1, .. } => projs += 1,
                Unit::Bn { .. } => bns += 1,
                _ => {}
            }
        }
        assert_eq!(convs3, 25);
        assert_eq!(projs, 3);
        assert_eq!(bns, 25);
        assert_eq!(spec.output_shape().unwrap(), [10, 1, 1]);

        let harm = preset("wrn-16-8-harm").unwrap();
        let hunits = harm.validate().unwrap();
        let slots = hunits
            .iter()
            .filter(|u| matches!(u.unit, Unit::Harmonic { .. }))
            .count();
        assert_eq!(slots, 13); // stem + 12 block slots
    }

    #[test]
    fn json_round_trip_covers_every_kind() {
        for name in ["cnn2", "harmnet4", "wrn-16-8-harm", "toy-harm-nodc"] {
            let spec = preset(name).unwrap();
            let back = ModelSpec::from_json(&spec.to_json()).unwrap();
            assert_eq!(spec, back, "{name}");
        }
    }

    #[test]
    fn nodc_first_block_drops_exactly_dc() {
        let spec = preset("toy-harm-nodc").unwrap();
        let units = spec.validate().unwrap();
        match &unit_named(&units, "block1").unit {
            Unit::Harmonic { selection, .. } => {
                assert_eq!(selection.len(), 15);
                assert!(!selection.contains(0, 0));
            }
            _ => panic!("block1 is not harmonic"),
        }
    }

    #[test]
    fn bad_names_and_shapes_rejected() {
        assert!(preset("wrn-29-10").is_err());
        assert!(preset("nope").is_err());
        let mut spec = preset("cnn2").unwrap();
        spec.layers[0] = Layer::new("conv1", conv(32, 120, 2, 2));
        assert!(spec.validate().is_err());
        let mut dup = preset("cnn2").unwrap();
        let second = dup.layers[1].clone();
        dup.layers[2] = Layer {
            name: second.name.clone(),
            kind: dup.layers[2].kind.clone(),
        };
        assert!(dup.validate().is_err());
    }
}
