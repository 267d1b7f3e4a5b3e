use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkError;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid stride-1 convolution with `kernels` square filters of side `size`.
    Conv {
        kernels: usize,
        size: usize,
    },
    Maxpool,
    Relu,
    /// Normalizes the preceding conv or dense output.
    Batchnorm,
    Dropout {
        keep_prob: f64,
    },
    Dense {
        width: usize,
    },
    /// Dense projection to the class count followed by softmax.
    SoftmaxClassifier,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::Batchnorm | LayerSpec::SoftmaxClassifier
        )
    }

    /// Conv and dense layers each open a freeze unit; batch norm joins the
    /// unit of the layer it normalizes.
    pub fn opens_unit(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    fn short_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Maxpool => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Batchnorm => "bn",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxClassifier => "classifier",
        }
    }
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchId {
    /// Character net: convs of 20, 20, 50 kernels (5x5), pooling after the
    /// second and third, dropout 0.5 into the softmax classifier.
    Char3conv,
    /// Image net: five batch-normalized convs (20, 20, 50, 50, 50), pooling
    /// after the last, an 1800-wide batch-normalized dense layer with dropout.
    Img5conv,
}

impl ArchId {
    pub fn name(self) -> &'static str {
        match self {
            ArchId::Char3conv => "char3conv",
            ArchId::Img5conv => "img5conv",
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            ArchId::Char3conv => vec![
                Conv { kernels: 20, size: 5 },
                Relu,
                Conv { kernels: 20, size: 5 },
                Relu,
                Maxpool,
                Conv { kernels: 50, size: 5 },
                Relu,
                Maxpool,
                Dropout { keep_prob: 0.5 },
                SoftmaxClassifier,
            ],
            ArchId::Img5conv => {
                let mut layers = Vec::new();
                for kernels in [20, 20, 50, 50, 50] {
                    layers.extend([Conv { kernels, size: 5 }, Batchnorm, Relu]);
                }
                layers.extend([
                    Maxpool,
                    Dense { width: 1800 },
                    Batchnorm,
                    Relu,
                    Dropout { keep_prob: 0.5 },
                    SoftmaxClassifier,
                ]);
                layers
            }
        }
    }
}

impl std::str::FromStr for ArchId {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char3conv" => Ok(ArchId::Char3conv),
            "img5conv" => Ok(ArchId::Img5conv),
            other => Err(NetworkError::InvalidSpec(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Full description of a network: layers, input image shape, class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: String,
    pub layers: Vec<LayerSpec>,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn preset(arch: ArchId, num_classes: usize, input_shape: [usize; 3]) -> Self {
        NetworkSpec {
            arch: arch.name().to_string(),
            layers: arch.layers(),
            input_shape,
            num_classes,
        }
    }

    pub fn custom(layers: Vec<LayerSpec>, num_classes: usize, input_shape: [usize; 3]) -> Self {
        NetworkSpec {
            arch: "custom".to_string(),
            layers,
            input_shape,
            num_classes,
        }
    }

    /// Human-readable layer names: `conv1`, `relu2`, `classifier`, ...
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts = std::collections::HashMap::new();
        self.layers
            .iter()
            .map(|l| {
                if matches!(l, LayerSpec::SoftmaxClassifier) {
                    return "classifier".to_string();
                }
                let n = counts.entry(l.short_name()).or_insert(0);
                *n += 1;
                format!("{}{}", l.short_name(), n)
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        hex_string(&self.digest())
    }

    /// Checks layer ordering rules and propagates shapes, returning the
    /// output shape (without batch axis) of every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>, NetworkError> {
        let names = self.layer_names();
        let classifiers = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxClassifier))
            .count();
        if classifiers != 1 || !matches!(self.layers.last(), Some(LayerSpec::SoftmaxClassifier)) {
            return Err(NetworkError::InvalidSpec(
                "exactly one softmax_classifier is required and it must be last".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(NetworkError::InvalidSpec("num_classes must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(NetworkError::InvalidSpec(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.to_vec();
        let mut seen_unit = false;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let name = &names[i];
            shape = match *layer {
                LayerSpec::Conv { kernels, size } => {
                    seen_unit = true;
                    if kernels == 0 || size == 0 {
                        return Err(NetworkError::InvalidSpec(format!("{name}: zero kernels or size")));
                    }
                    if shape.len() != 3 {
                        return Err(NetworkError::InvalidSpec(format!(
                            "{name}: convolution after a flattening layer"
                        )));
                    }
                    if size > shape[1] || size > shape[2] {
                        return Err(NetworkError::SpatialUnderflow {
                            layer: name.clone(),
                            kernel: size,
                            height: shape[1],
                            width: shape[2],
                        });
                    }
                    vec![kernels, shape[1] - size + 1, shape[2] - size + 1]
                }
                LayerSpec::Maxpool => {
                    if shape.len() != 3
                        || !shape[1].is_multiple_of(2)
                        || !shape[2].is_multiple_of(2)
                        || shape[1] < 2
                        || shape[2] < 2
                    {
                        return Err(NetworkError::InvalidSpec(format!(
                            "{name}: 2x2 pooling needs even spatial extent, got {shape:?}"
                        )));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Batchnorm => {
                    let follows_unit = self.layers[..i]
                        .iter()
                        .rev()
                        .find(|l| l.has_params())
                        .is_some_and(|l| l.opens_unit());
                    if !follows_unit {
                        return Err(NetworkError::InvalidSpec(format!(
                            "{name}: batch norm must follow a conv or dense layer"
                        )));
                    }
                    shape
                }
                LayerSpec::Dropout { keep_prob } => {
                    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                        return Err(NetworkError::InvalidSpec(format!(
                            "{name}: keep probability {keep_prob} outside (0, 1]"
                        )));
                    }
                    shape
                }
                LayerSpec::Dense { width } => {
                    seen_unit = true;
                    if width == 0 {
                        return Err(NetworkError::InvalidSpec(format!("{name}: zero width")));
                    }
                    vec![width]
                }
                LayerSpec::SoftmaxClassifier => vec![self.num_classes],
            };
            out.push(shape.clone());
        }
        let _ = seen_unit;
        Ok(out)
    }

    /// Unit index per layer. Parameterless layers inherit the unit of the
    /// most recent conv/dense; layers before any unit, and the classifier,
    /// get `None`.
    pub fn units(&self) -> Vec<Option<usize>> {
        let mut current = None;
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| {
                if matches!(l, LayerSpec::SoftmaxClassifier) {
                    return None;
                }
                if l.opens_unit() {
                    current = Some(next);
                    next += 1;
                }
                current
            })
            .collect()
    }

    /// Number of freezable (parametrized, non-classifier) layers.
    pub fn freezable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.opens_unit()).count()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
