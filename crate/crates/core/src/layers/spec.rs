//! Layer specifications, model configuration and its text format.
//!
//! The config file is line oriented. Blank lines and `#` comments are
//! ignored. A header of `key = value` lines comes first, then a `[layers]`
//! marker followed by one layer per line in execution order:
//!
//! ```text
//! input_shape = 1,32,24,24
//! classes = term,preterm
//! [layers]
//! conv3d in=1 out=16 kernel=3 stride=1 pad=1
//! batchnorm channels=16 epsilon=0.00001 momentum=0.1
//! relu
//! avgpool3d kernel=2 stride=2
//! flatten
//! dense in=256 out=2
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    AvgPool3d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool3d { .. } => "avgpool3d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Conv3d { .. } | LayerSpec::Dense { .. })
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err("channel counts must be positive".into());
                }
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(format!("kernel must be odd and >= 1, got {kernel}"));
                }
                if stride == 0 {
                    return Err("stride must be >= 1".into());
                }
            }
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => {
                if channels == 0 {
                    return Err("channel count must be positive".into());
                }
                if !(epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(format!("epsilon must be > 0, got {epsilon}"));
                }
                if !(0.0..=1.0).contains(&momentum) {
                    return Err(format!("momentum must lie in [0, 1], got {momentum}"));
                }
            }
            LayerSpec::AvgPool3d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err("kernel and stride must be >= 1".into());
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err("feature counts must be positive".into());
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        self.validate()?;
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let [c, d, h, w] = spatial(input)?;
                if c != in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                let out = |n: usize| -> std::result::Result<usize, String> {
                    let padded = n + 2 * pad;
                    if padded < kernel {
                        return Err(format!("padded extent {padded} smaller than kernel {kernel}"));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                Ok(vec![out_channels, out(d)?, out(h)?, out(w)?])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.is_empty() || input[0] != channels {
                    return Err(format!("expects {channels} channels, got shape {input:?}"));
                }
                if input.len() != 1 && input.len() != 4 {
                    return Err(format!("expects a C or C×D×H×W input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool3d { kernel, stride } => {
                let [c, d, h, w] = spatial(input)?;
                let out = |n: usize| -> std::result::Result<usize, String> {
                    if n < kernel {
                        return Err(format!("spatial extent {n} smaller than pool kernel {kernel}"));
                    }
                    Ok((n - kernel) / stride + 1)
                };
                Ok(vec![c, out(d)?, out(h)?, out(w)?])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(format!("expects a flat input of {in_features}, got {input:?}"));
                }
                Ok(vec![out_features])
            }
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 4], String> {
    match *input {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(format!("expects a C×D×H×W input, got {input:?}")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "conv3d in={in_channels} out={out_channels} kernel={kernel} stride={stride} pad={pad}"
            ),
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => write!(f, "batchnorm channels={channels} epsilon={epsilon} momentum={momentum}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::AvgPool3d { kernel, stride } => {
                write!(f, "avgpool3d kernel={kernel} stride={stride}")
            }
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => write!(f, "dense in={in_features} out={out_features}"),
        }
    }
}

/// Network input shape, ordered layers, and class names (index = logit index).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_names: Vec<String>,
}

pub fn default_class_names() -> Vec<String> {
    vec!["term".to_string(), "preterm".to_string()]
}

impl ModelConfig {
    /// Builds and validates a config.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, class_names: Vec<String>) -> Result<Self> {
        let config = Self {
            input_shape,
            layers,
            class_names,
        };
        config.validate()?;
        Ok(config)
    }

    /// Repeated `conv3d → batchnorm → relu → avgpool3d` blocks, one per entry
    /// of `channels`, then `flatten → dense(hidden) → relu → dense(classes)`.
    pub fn blocks(
        input_shape: [usize; 4],
        channels: &[usize],
        hidden: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut in_ch = input_shape[0];
        for &out_ch in channels {
            layers.push(LayerSpec::Conv3d {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm {
                channels: out_ch,
                epsilon: DEFAULT_BN_EPSILON,
                momentum: DEFAULT_BN_MOMENTUM,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool3d { kernel: 2, stride: 2 });
            in_ch = out_ch;
        }
        layers.push(LayerSpec::Flatten);
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|m| layer_error(i, layer, m))?;
        }
        let flat = shape[0];
        layers.push(LayerSpec::Dense {
            in_features: flat,
            out_features: hidden,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense {
            in_features: hidden,
            out_features: class_names.len(),
        });
        Self::new(input_shape.to_vec(), layers, class_names)
    }

    /// The default architecture: four blocks with 16, 32, 64 and 128
    /// channels and a 128-wide hidden dense layer.
    pub fn standard(input_shape: [usize; 4]) -> Result<Self> {
        Self::blocks(input_shape, &[16, 32, 64, 128], 128, default_class_names())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        self.infer_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Dense { out_features, .. }) if *out_features == self.num_classes() => Ok(()),
            Some(LayerSpec::Dense { out_features, .. }) => Err(Error::Config(format!(
                "final dense layer has {out_features} outputs but there are {} classes",
                self.num_classes()
            ))),
            _ => Err(Error::Config("final layer must be dense".into())),
        }
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|m| layer_error(i, layer, m))?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Input shape of every layer, in order.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outs = self.infer_shapes()?;
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(self.input_shape.clone());
        ins.extend(outs.into_iter().take(self.layers.len() - 1));
        Ok(ins)
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let mut out = String::new();
        out.push_str(&format!("input_shape = {}\n", dims.join(",")));
        out.push_str(&format!("classes = {}\n", self.class_names.join(",")));
        out.push_str("[layers]\n");
        for layer in &self.layers {
            out.push_str(&layer.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut classes = None;
        let mut layers = Vec::new();
        let mut in_layers = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let field = format!("model config line {}", lineno + 1);
            if line == "[layers]" {
                in_layers = true;
                continue;
            }
            if !in_layers {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(&field, "expected `key = value`"))?;
                match key.trim() {
                    "input_shape" => {
                        let dims = value
                            .split([',', 'x'])
                            .map(|d| d.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| Error::parse(&field, format!("input_shape: {e}")))?;
                        input_shape = Some(dims);
                    }
                    "classes" => {
                        classes = Some(
                            value
                                .split(',')
                                .map(|c| c.trim().to_string())
                                .filter(|c| !c.is_empty())
                                .collect::<Vec<_>>(),
                        );
                    }
                    other => return Err(Error::parse(&field, format!("unknown key `{other}`"))),
                }
            } else {
                layers.push(parse_layer(line).map_err(|m| Error::parse(&field, m))?);
            }
        }
        let input_shape = input_shape.ok_or_else(|| Error::parse("model config", "missing input_shape"))?;
        let class_names = classes.unwrap_or_else(default_class_names);
        Self::new(input_shape, layers, class_names)
    }
}

fn layer_error(index: usize, layer: &LayerSpec, message: String) -> Error {
    Error::Config(format!("layer {index} ({}): {message}", layer.kind()))
}

fn parse_layer(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut parts = line.split_whitespace();
    let kind = parts.next().ok_or("empty layer line")?;
    let mut args = BTreeMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
        if args.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("duplicate argument `{k}`"));
        }
    }
    let mut take_usize = |key: &str, default: Option<usize>| -> std::result::Result<usize, String> {
        match args.remove(key) {
            Some(v) => v.parse().map_err(|e| format!("{kind}.{key}: {e}")),
            None => default.ok_or_else(|| format!("{kind} requires `{key}`")),
        }
    };
    let layer = match kind {
        "conv3d" => LayerSpec::Conv3d {
            in_channels: take_usize("in", None)?,
            out_channels: take_usize("out", None)?,
            kernel: take_usize("kernel", Some(3))?,
            stride: take_usize("stride", Some(1))?,
            pad: take_usize("pad", Some(1))?,
        },
        "batchnorm" => {
            let channels = take_usize("channels", None)?;
            let mut take_f64 = |key: &str, default: f64| -> std::result::Result<f64, String> {
                match args.remove(key) {
                    Some(v) => v.parse().map_err(|e| format!("batchnorm.{key}: {e}")),
                    None => Ok(default),
                }
            };
            LayerSpec::BatchNorm {
                channels,
                epsilon: take_f64("epsilon", DEFAULT_BN_EPSILON)?,
                momentum: take_f64("momentum", DEFAULT_BN_MOMENTUM)?,
            }
        }
        "relu" => LayerSpec::Relu,
        "avgpool3d" => LayerSpec::AvgPool3d {
            kernel: take_usize("kernel", Some(2))?,
            stride: take_usize("stride", Some(2))?,
        },
        "flatten" => LayerSpec::Flatten,
        "dense" => LayerSpec::Dense {
            in_features: take_usize("in", None)?,
            out_features: take_usize("out", None)?,
        },
        other => return Err(format!("unknown layer type `{other}`")),
    };
    if let Some(k) = args.keys().next() {
        return Err(format!("unknown argument `{k}` for {kind}"));
    }
    layer.validate()?;
    Ok(layer)
}
