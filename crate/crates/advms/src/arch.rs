//! Network architectures.
//!
//! Three canonical stacks are built by [`build_architecture`]; custom stacks
//! can be assembled through [`Architecture::from_layers`] for tests. All convs
//! are stride-1 valid (no padding); pooling is non-overlapping max; every conv
//! and dense layer is followed by ReLU except the output layer.

use crate::error::{Error, Result};

/// Identifies one of the canonical dataset/architecture pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Synthetic => "synthetic",
        }
    }

    /// Stable one-byte tag used in the checkpoint header.
    pub fn tag(self) -> u8 {
        match self {
            DatasetId::Mnist => 0,
            DatasetId::Cifar10 => 1,
            DatasetId::Synthetic => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DatasetId::Mnist),
            1 => Ok(DatasetId::Cifar10),
            2 => Ok(DatasetId::Synthetic),
            other => Err(Error::Format(format!("unknown architecture tag {other}"))),
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::Config(format!("unknown dataset id \"{other}\""))),
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One layer of a feed-forward stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// Stride-1 valid convolution with `filters` output channels and a
    /// `kh` x `kw` kernel.
    Conv { filters: usize, kh: usize, kw: usize },
    /// Non-overlapping max pooling with window `ph` x `pw` (stride equals
    /// the window).
    MaxPool { ph: usize, pw: usize },
    Relu,
    /// Fully connected layer with `units` outputs; flattens 3-d input.
    Dense { units: usize },
    /// Final fully connected layer producing `units` logits. No ReLU.
    Output { units: usize },
}

/// Feature shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    /// Channels, height, width.
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(self) -> usize {
        match self {
            FeatureShape::Spatial(c, h, w) => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }
}

/// A validated layer stack with a fixed input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    id: Option<DatasetId>,
    input: (usize, usize, usize),
    layers: Vec<Layer>,
}

/// Builds the canonical architecture for a dataset.
///
/// mnist: Conv32-Conv32-Pool-Conv64-Conv64-Pool-Dense200-Dense200-Output10
/// on 1x28x28 input; cifar10 is the same pattern with 64/128 filters,
/// Dense256, and 3x32x32 input; synthetic is a small conv net on 1x8x8
/// with four classes.
pub fn build_architecture(id: DatasetId) -> Architecture {
    match id {
        DatasetId::Mnist => Architecture::conv_stack(
            Some(DatasetId::Mnist),
            (1, 28, 28),
            &[(32, 2), (64, 2)],
            &[200, 200],
            10,
        ),
        DatasetId::Cifar10 => Architecture::conv_stack(
            Some(DatasetId::Cifar10),
            (3, 32, 32),
            &[(64, 2), (128, 2)],
            &[256, 256],
            10,
        ),
        DatasetId::Synthetic => Architecture::synthetic((1, 8, 8), 4)
            .expect("canonical synthetic architecture is valid"),
    }
}

impl Architecture {
    /// Stack of conv blocks (each `reps` convs of `filters` 3x3 kernels then
    /// a 2x2 pool), then dense layers, then the output layer.
    fn conv_stack(
        id: Option<DatasetId>,
        input: (usize, usize, usize),
        blocks: &[(usize, usize)],
        dense: &[usize],
        classes: usize,
    ) -> Architecture {
        let mut layers = Vec::new();
        for &(filters, reps) in blocks {
            for _ in 0..reps {
                layers.push(Layer::Conv { filters, kh: 3, kw: 3 });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool { ph: 2, pw: 2 });
        }
        for &units in dense {
            layers.push(Layer::Dense { units });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Output { units: classes });
        let arch = Architecture { id, input, layers };
        arch.validate().expect("canonical stack must validate");
        arch
    }

    /// Small synthetic-data network: Conv8(3x3)-Relu-Pool(2x2)-Dense32-Relu-
    /// Output. The input side must be even and at least 4 so the conv/pool
    /// geometry is reconstructible from parameter shapes alone when loading
    /// checkpoints.
    pub fn synthetic(input: (usize, usize, usize), classes: usize) -> Result<Architecture> {
        let (_, h, w) = input;
        if h != w || h < 4 || h % 2 != 0 {
            return Err(Error::Argument(format!(
                "synthetic input must be square with even side >= 4, got {h}x{w}"
            )));
        }
        if classes < 2 {
            return Err(Error::Argument(format!(
                "synthetic architecture needs >= 2 classes, got {classes}"
            )));
        }
        let layers = vec![
            Layer::Conv { filters: 8, kh: 3, kw: 3 },
            Layer::Relu,
            Layer::MaxPool { ph: 2, pw: 2 },
            Layer::Dense { units: 32 },
            Layer::Relu,
            Layer::Output { units: classes },
        ];
        let arch = Architecture {
            id: Some(DatasetId::Synthetic),
            input,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Custom stack for tests and experiments. Not checkpointable.
    pub fn from_layers(input: (usize, usize, usize), layers: Vec<Layer>) -> Result<Architecture> {
        let arch = Architecture {
            id: None,
            input,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn id(&self) -> Option<DatasetId> {
        self.id
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Walks the shape chain, checking every transition. Errors name the
    /// offending layer.
    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("degenerate input shape {:?}", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("architecture has no layers".into()));
        }
        let shapes = self.feature_shapes()?;
        match self.layers.last() {
            Some(Layer::Output { .. }) => {}
            _ => return Err(Error::Shape("last layer must be the output layer".into())),
        }
        if self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Output { .. }))
            .count()
            != 1
        {
            return Err(Error::Shape("exactly one output layer is required".into()));
        }
        debug_assert_eq!(shapes.len(), self.layers.len() + 1);
        Ok(())
    }

    /// Feature shape before each layer plus the final output shape
    /// (`len == layers.len() + 1`).
    pub fn feature_shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut cur = FeatureShape::Spatial(self.input.0, self.input.1, self.input.2);
        let mut shapes = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (Layer::Conv { filters, kh, kw }, FeatureShape::Spatial(_, h, w)) => {
                    if h < kh || w < kw {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv kernel {kh}x{kw} larger than input {h}x{w}"
                        )));
                    }
                    FeatureShape::Spatial(filters, h - kh + 1, w - kw + 1)
                }
                (Layer::MaxPool { ph, pw }, FeatureShape::Spatial(c, h, w)) => {
                    if h < ph || w < pw {
                        return Err(Error::Shape(format!(
                            "layer {i}: pool window {ph}x{pw} larger than input {h}x{w}"
                        )));
                    }
                    FeatureShape::Spatial(c, h / ph, w / pw)
                }
                (Layer::Relu, s) => s,
                (Layer::Dense { units }, _) | (Layer::Output { units }, _) => {
                    if units == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero-width dense layer")));
                    }
                    FeatureShape::Flat(units)
                }
                (l, FeatureShape::Flat(_)) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: {l:?} needs spatial input but gets flat features"
                    )));
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Number of classes (width of the output layer).
    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Output { units }) => *units,
            _ => unreachable!("validated architecture ends with output"),
        }
    }

    /// Shapes of each parameterized layer's weight and bias tensors, in
    /// stack order. Conv weights are (filters, in_c, kh, kw); dense weights
    /// are (units, fan_in); biases are (units,).
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let shapes = self.feature_shapes().expect("architecture is validated");
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match (*layer, shapes[i]) {
                (Layer::Conv { filters, kh, kw }, FeatureShape::Spatial(c, _, _)) => {
                    out.push((vec![filters, c, kh, kw], vec![filters]));
                }
                (Layer::Dense { units }, s) | (Layer::Output { units }, s) => {
                    out.push((vec![units, s.numel()], vec![units]));
                }
                _ => {}
            }
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Stable fingerprint of the stack; pool members must agree on it.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut desc = format!("in={}x{}x{};", self.input.0, self.input.1, self.input.2);
        for layer in &self.layers {
            match *layer {
                Layer::Conv { filters, kh, kw } => {
                    desc.push_str(&format!("conv{filters}:{kh}x{kw};"))
                }
                Layer::MaxPool { ph, pw } => desc.push_str(&format!("pool{ph}x{pw};")),
                Layer::Relu => desc.push_str("relu;"),
                Layer::Dense { units } => desc.push_str(&format!("dense{units};")),
                Layer::Output { units } => desc.push_str(&format!("out{units};")),
            }
        }
        let digest = Sha256::digest(desc.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
