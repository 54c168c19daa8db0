use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::init::InitDist;

/// One layer of an architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Fully connected: `[inputs] -> [outputs]`, weight stored `[outputs, inputs]`.
    Dense { inputs: usize, outputs: usize },
    /// 2-D convolution over `[C, H, W]`, weight stored `[out, in, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// Non-overlapping max pooling with a square window.
    MaxPool { size: usize },
    /// Global average pooling, `[C, H, W] -> [C]`.
    AvgPool,
    Relu,
    BatchNorm { channels: usize },
    /// `main(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        main: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Whether the layer's weight tensor is covered by pruning masks.
    pub prunable: bool,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { inputs, outputs },
            prunable: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad: kernel / 2,
                bias: false,
            },
            prunable: true,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::fixed(LayerKind::BatchNorm { channels })
    }

    pub fn relu() -> Self {
        Self::fixed(LayerKind::Relu)
    }

    pub fn maxpool(size: usize) -> Self {
        Self::fixed(LayerKind::MaxPool { size })
    }

    pub fn avgpool() -> Self {
        Self::fixed(LayerKind::AvgPool)
    }

    pub fn flatten() -> Self {
        Self::fixed(LayerKind::Flatten)
    }

    pub fn residual(main: Vec<LayerSpec>, shortcut: Vec<LayerSpec>) -> Self {
        Self::fixed(LayerKind::Residual { main, shortcut })
    }

    pub fn non_prunable(mut self) -> Self {
        self.prunable = false;
        self
    }

    fn fixed(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            prunable: false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Residual { .. } => "residual-block",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Output shape (without batch dimension) for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Error::Architecture(format!("{}: {why}", self.kind_name()));
        if self.prunable && !matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. }) {
            return Err(bad("only dense and conv2d layers may be prunable".into()));
        }
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(bad(format!("expects [{inputs}], got {input:?}")));
                }
                if *outputs == 0 {
                    return Err(bad("zero outputs".into()));
                }
                Ok(vec![*outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let [c, h, w] = chw(input).ok_or_else(|| bad(format!("expects [C,H,W], got {input:?}")))?;
                if c != *in_channels {
                    return Err(bad(format!("expects {in_channels} channels, got {c}")));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(bad("zero kernel, stride or channels".into()));
                }
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(bad(format!("kernel {kernel} larger than padded input {h}x{w}")));
                }
                Ok(vec![
                    *out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::MaxPool { size } => {
                let [c, h, w] = chw(input).ok_or_else(|| bad(format!("expects [C,H,W], got {input:?}")))?;
                if *size == 0 || h < *size || w < *size {
                    return Err(bad(format!("window {size} does not fit {h}x{w}")));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerKind::AvgPool => {
                let [c, _, _] = chw(input).ok_or_else(|| bad(format!("expects [C,H,W], got {input:?}")))?;
                Ok(vec![c])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::BatchNorm { channels } => {
                if input.first() != Some(channels) {
                    return Err(bad(format!("expects {channels} channels, got {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Residual { main, shortcut } => {
                let a = infer_shapes(main, input)?;
                let b = infer_shapes(shortcut, input)?;
                if a != b {
                    return Err(bad(format!("branch shapes differ: {a:?} vs {b:?}")));
                }
                Ok(a)
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn chw(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

/// Runs shape inference through a layer list.
pub fn infer_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for layer in layers {
        shape = layer.output_shape(&shape)?;
    }
    Ok(shape)
}

/// What a parameter tensor is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    DenseWeight,
    DenseBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }

    /// Conv kernels, conv biases and all batchnorm tensors.
    pub fn is_conv_side(self) -> bool {
        !matches!(self, ParamRole::DenseWeight | ParamRole::DenseBias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Section {
    Body,
    Head,
}

/// Static description of one parameter tensor of an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub section: Section,
    pub prunable: bool,
    pub fan_in: usize,
}

/// A named network: a feature body followed by a classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub body: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub init: InitDist,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Architecture("need at least two classes".into()));
        }
        if self.head.is_empty() {
            return Err(Error::Architecture("architecture has no head".into()));
        }
        let features = self.feature_shape()?;
        let out = infer_shapes(&self.head, &features)?;
        if out != [self.num_classes] {
            return Err(Error::Architecture(format!(
                "head produces {out:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Shape of the body output that feeds the head.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        infer_shapes(&self.body, &self.input_shape)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        match self.feature_shape()?.as_slice() {
            [d] => Ok(*d),
            other => Err(Error::Architecture(format!("body output {other:?} is not flat"))),
        }
    }

    /// Every parameter tensor in execution order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        collect_params(&self.body, "body", Section::Body, &mut out);
        collect_params(&self.head, "head", Section::Head, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|p| p.role.is_trainable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn count_by(&self, pred: impl Fn(&ParamSpec) -> bool) -> usize {
        self.param_specs()
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

fn collect_params(layers: &[LayerSpec], prefix: &str, section: Section, out: &mut Vec<ParamSpec>) {
    for (i, layer) in layers.iter().enumerate() {
        let base = format!("{prefix}.{i}");
        let mut push = |suffix: &str, shape: Vec<usize>, role: ParamRole, prunable: bool, fan_in: usize| {
            out.push(ParamSpec {
                name: format!("{base}.{suffix}"),
                shape,
                role,
                section,
                prunable,
                fan_in,
            })
        };
        match &layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                push("weight", vec![*outputs, *inputs], ParamRole::DenseWeight, layer.prunable, *inputs);
                push("bias", vec![*outputs], ParamRole::DenseBias, false, *inputs);
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                push(
                    "weight",
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    ParamRole::ConvWeight,
                    layer.prunable,
                    fan_in,
                );
                if *bias {
                    push("bias", vec![*out_channels], ParamRole::ConvBias, false, fan_in);
                }
            }
            LayerKind::BatchNorm { channels } => {
                let c = *channels;
                push("gamma", vec![c], ParamRole::BnScale, false, 1);
                push("beta", vec![c], ParamRole::BnShift, false, 1);
                push("running_mean", vec![c], ParamRole::BnRunningMean, false, 1);
                push("running_var", vec![c], ParamRole::BnRunningVar, false, 1);
            }
            LayerKind::Residual { main, shortcut } => {
                collect_params(main, &format!("{base}.main"), section, out);
                collect_params(shortcut, &format!("{base}.skip"), section, out);
            }
            LayerKind::MaxPool { .. } | LayerKind::AvgPool | LayerKind::Relu | LayerKind::Flatten => {}
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 4] = ["fc-small", "fc-large", "micro-resnet", "micro-vgg"];

/// Builds a named architecture for the given input shape and class count.
///
/// | preset | body | head |
/// |---|---|---|
/// | `fc-small` | flatten, dense 1024, relu | dense |
/// | `fc-large` | flatten, dense 1024, relu, dense 100, relu | dense |
/// | `micro-resnet` | conv 16, 3x[16,16], 3x[32,32], 3x[64,64], avg-pool | dense |
/// | `micro-vgg` | 2x16, pool, 2x32, pool, 2x64, pool, avg-pool | dense |
///
/// Every conv is 3x3 followed by batchnorm and relu. Residual stages that
/// change width or stride use a 1x1 projection shortcut with batchnorm.
pub fn preset(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Architecture> {
    let [c, h, w] = input_shape;
    let flat = c * h * w;
    let (body, head) = match name {
        "fc-small" => (
            vec![LayerSpec::flatten(), LayerSpec::dense(flat, 1024), LayerSpec::relu()],
            vec![LayerSpec::dense(1024, num_classes)],
        ),
        "fc-large" => (
            vec![
                LayerSpec::flatten(),
                LayerSpec::dense(flat, 1024),
                LayerSpec::relu(),
                LayerSpec::dense(1024, 100),
                LayerSpec::relu(),
            ],
            vec![LayerSpec::dense(100, num_classes)],
        ),
        "micro-resnet" => (resnet_body(c, 16, &[16, 32, 64], 3), vec![conv_net_head(64, num_classes)]),
        "micro-vgg" => (vgg_body(c, &[16, 32, 64]), vec![conv_net_head(64, num_classes)]),
        other => {
            return Err(Error::Architecture(format!(
                "unknown preset `{other}` (expected one of {PRESET_NAMES:?})"
            )))
        }
    };
    let arch = Architecture {
        name: name.to_string(),
        input_shape,
        num_classes,
        body,
        head,
        init: InitDist::FanInUniform,
    };
    arch.validate()?;
    Ok(arch)
}

// Conv nets keep their classifier dense, so pruning only touches kernels.
fn conv_net_head(features: usize, num_classes: usize) -> LayerSpec {
    LayerSpec::dense(features, num_classes).non_prunable()
}

fn conv_bn_relu(cin: usize, cout: usize, stride: usize) -> [LayerSpec; 3] {
    [LayerSpec::conv(cin, cout, 3, stride), LayerSpec::batchnorm(cout), LayerSpec::relu()]
}

fn resnet_body(in_channels: usize, stem: usize, widths: &[usize], blocks: usize) -> Vec<LayerSpec> {
    let mut layers: Vec<LayerSpec> = conv_bn_relu(in_channels, stem, 1).into();
    let mut cin = stem;
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let main = vec![
                LayerSpec::conv(cin, width, 3, stride),
                LayerSpec::batchnorm(width),
                LayerSpec::relu(),
                LayerSpec::conv(width, width, 3, 1),
                LayerSpec::batchnorm(width),
            ];
            let shortcut = if stride != 1 || cin != width {
                vec![LayerSpec::conv(cin, width, 1, stride), LayerSpec::batchnorm(width)]
            } else {
                Vec::new()
            };
            layers.push(LayerSpec::residual(main, shortcut));
            layers.push(LayerSpec::relu());
            cin = width;
        }
    }
    layers.push(LayerSpec::avgpool());
    layers
}

fn vgg_body(in_channels: usize, widths: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cin = in_channels;
    for &width in widths {
        layers.extend(conv_bn_relu(cin, width, 1));
        layers.extend(conv_bn_relu(width, width, 1));
        layers.push(LayerSpec::maxpool(2));
        cin = width;
    }
    layers.push(LayerSpec::avgpool());
    layers
}
