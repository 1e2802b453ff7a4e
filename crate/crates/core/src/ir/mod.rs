//! Typed graph IR for sequential/residual CNNs plus its weight store.

mod arch;
mod io;
mod rewrite;

pub use arch::{build_arch, ArchName};
pub use io::{deserialize, encode, serialize, serialized_size, write_atomic, MANIFEST_FILE, WEIGHTS_FILE};
pub use rewrite::{replace_layer, BlockLayers, DecomposedBlock};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(h, w)`
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
    pub has_bias: bool,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: [k, k],
            stride,
            padding,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel[0] * self.kernel[1]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_ch,
            self.in_ch / self.groups.max(1),
            self.kernel[0],
            self.kernel[1],
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel[0] || pw < self.kernel[1] {
            return None;
        }
        Some((
            (ph - self.kernel[0]) / self.stride + 1,
            (pw - self.kernel[1]) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOp {
    Input,
    Output,
    Conv2d(ConvSpec),
    Linear(LinearSpec),
    Batchnorm { channels: usize, eps: f64 },
    Relu,
    Maxpool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    /// Residual join: elementwise sum of all predecessors.
    Add,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Output => "output",
            LayerOp::Conv2d(_) => "conv2d",
            LayerOp::Linear(_) => "linear",
            LayerOp::Batchnorm { .. } => "batchnorm",
            LayerOp::Relu => "relu",
            LayerOp::Maxpool { .. } => "maxpool",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::Add => "add",
        }
    }

    /// Parameter tensors this op owns, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerOp::Conv2d(c) => {
                let mut v = vec![("weight", c.weight_dims().to_vec())];
                if c.has_bias {
                    v.push(("bias", vec![c.out_ch]));
                }
                v
            }
            LayerOp::Linear(l) => {
                let mut v = vec![("weight", vec![l.out_features, l.in_features])];
                if l.has_bias {
                    v.push(("bias", vec![l.out_features]));
                }
                v
            }
            LayerOp::Batchnorm { channels, .. } => ["gamma", "beta", "mean", "var"]
                .into_iter()
                .map(|n| (n, vec![*channels]))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Learnable parameter count (batchnorm running statistics excluded).
    pub fn param_count(&self) -> usize {
        match self {
            LayerOp::Conv2d(c) => {
                c.weight_dims().iter().product::<usize>() + if c.has_bias { c.out_ch } else { 0 }
            }
            LayerOp::Linear(l) => {
                l.in_features * l.out_features + if l.has_bias { l.out_features } else { 0 }
            }
            LayerOp::Batchnorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: LayerOp,
    #[serde(default)]
    pub predecessors: Vec<String>,
    /// Set on the sub-layers produced by a decomposition; such layers are
    /// never decomposition candidates themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposed_from: Option<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, op: LayerOp, predecessors: &[&str]) -> Self {
        Self {
            id: id.into(),
            op,
            predecessors: predecessors.iter().map(|s| s.to_string()).collect(),
            decomposed_from: None,
        }
    }

    pub fn conv(&self) -> Option<&ConvSpec> {
        match &self.op {
            LayerOp::Conv2d(c) => Some(c),
            _ => None,
        }
    }

    pub fn linear(&self) -> Option<&LinearSpec> {
        match &self.op {
            LayerOp::Linear(l) => Some(l),
            _ => None,
        }
    }

    /// Conv (ungrouped) or linear layer that has not already been decomposed.
    pub fn is_decomposable(&self) -> bool {
        self.decomposed_from.is_none()
            && match &self.op {
                LayerOp::Conv2d(c) => c.groups == 1,
                LayerOp::Linear(_) => true,
                _ => false,
            }
    }
}

/// A weight tensor as stored: 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::arg(format!(
                "weight dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, v: f32) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![v; n],
        }
    }

    /// Round 64-bit values to the stored precision.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter tensors of one layer.
pub type ParamSet = BTreeMap<String, WeightTensor>;

/// Activation shape for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(f) => f,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(f) => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelIR {
    pub name: String,
    /// `(C, H, W)`
    pub input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, ParamSet>,
}

impl ModelIR {
    /// Build and validate a model; see [`ModelIR::validate`].
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, ParamSet>,
    ) -> Result<Self> {
        let m = Self {
            name: name.into(),
            input_shape,
            layers,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, ParamSet> {
        &self.weights
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn params(&self, id: &str) -> Option<&ParamSet> {
        self.weights.get(id)
    }

    pub fn param(&self, id: &str, name: &str) -> Result<&WeightTensor> {
        self.weights
            .get(id)
            .and_then(|p| p.get(name))
            .ok_or_else(|| Error::malformed(Some(id), format!("missing parameter `{name}`")))
    }

    /// Sum of learnable parameters over all layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.op.param_count()).sum()
    }

    /// Total stored tensor elements (includes batchnorm running statistics).
    pub fn stored_elements(&self) -> usize {
        self.weights
            .values()
            .flat_map(|p| p.values())
            .map(WeightTensor::len)
            .sum()
    }

    /// Layers eligible for decomposition, in graph order.
    pub fn decomposable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_decomposable())
    }

    /// Per-layer output shapes (single sample), aligned with `layers()`.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let mut by_id: HashMap<&str, Shape> = HashMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<Shape> = layer
                .predecessors
                .iter()
                .map(|p| {
                    by_id.get(p.as_str()).copied().ok_or_else(|| {
                        Error::Graph(format!(
                            "layer `{}` reads `{p}` which is not an earlier layer",
                            layer.id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let shape = self.layer_shape(layer, &ins)?;
            by_id.insert(&layer.id, shape);
            out.push(shape);
        }
        Ok(out)
    }

    fn layer_shape(&self, layer: &LayerSpec, ins: &[Shape]) -> Result<Shape> {
        let id = &layer.id;
        let single = || -> Result<Shape> {
            match ins {
                [s] => Ok(*s),
                _ => Err(Error::Graph(format!(
                    "layer `{id}` expects exactly one predecessor, has {}",
                    ins.len()
                ))),
            }
        };
        let spatial = |s: Shape| -> Result<(usize, usize, usize)> {
            match s {
                Shape::Spatial { c, h, w } => Ok((c, h, w)),
                Shape::Flat(_) => Err(Error::shape(id.clone(), "expects a spatial (C,H,W) input")),
            }
        };
        match &layer.op {
            LayerOp::Input => {
                if !ins.is_empty() {
                    return Err(Error::Graph(format!("input layer `{id}` has predecessors")));
                }
                let [c, h, w] = self.input_shape;
                Ok(Shape::Spatial { c, h, w })
            }
            LayerOp::Output | LayerOp::Relu => single(),
            LayerOp::Conv2d(c) => {
                if c.in_ch == 0 || c.out_ch == 0 || c.kernel.contains(&0) || c.stride == 0 {
                    return Err(Error::shape(id.clone(), "conv dims, kernel and stride must be >= 1"));
                }
                if c.groups == 0 || c.in_ch % c.groups != 0 || c.out_ch % c.groups != 0 {
                    return Err(Error::shape(id.clone(), "groups must divide both channel counts"));
                }
                let (ch, h, w) = spatial(single()?)?;
                if ch != c.in_ch {
                    return Err(Error::shape(
                        id.clone(),
                        format!("expects {} input channels, got {ch}", c.in_ch),
                    ));
                }
                let (oh, ow) = c
                    .output_hw(h, w)
                    .ok_or_else(|| Error::shape(id.clone(), format!("kernel larger than padded {h}x{w} input")))?;
                Ok(Shape::Spatial { c: c.out_ch, h: oh, w: ow })
            }
            LayerOp::Linear(l) => match single()? {
                Shape::Flat(f) if f == l.in_features => Ok(Shape::Flat(l.out_features)),
                other => Err(Error::shape(
                    id.clone(),
                    format!("expects flat input of {} features, got {other:?}", l.in_features),
                )),
            },
            LayerOp::Batchnorm { channels, .. } => {
                let s = single()?;
                if s.channels() != *channels {
                    return Err(Error::shape(
                        id.clone(),
                        format!("expects {channels} channels, got {}", s.channels()),
                    ));
                }
                Ok(s)
            }
            LayerOp::Maxpool { kernel, stride, padding } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::shape(id.clone(), "pool kernel and stride must be >= 1"));
                }
                let (c, h, w) = spatial(single()?)?;
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < *kernel || pw < *kernel {
                    return Err(Error::shape(id.clone(), "pool window larger than input"));
                }
                Ok(Shape::Spatial {
                    c,
                    h: (ph - kernel) / stride + 1,
                    w: (pw - kernel) / stride + 1,
                })
            }
            LayerOp::GlobalAvgPool => {
                let (c, _, _) = spatial(single()?)?;
                Ok(Shape::Flat(c))
            }
            LayerOp::Add => {
                if ins.len() < 2 {
                    return Err(Error::Graph(format!("add layer `{id}` needs at least two predecessors")));
                }
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(Error::shape(id.clone(), format!("residual join of unequal shapes {ins:?}")));
                }
                Ok(ins[0])
            }
        }
    }

    /// Check graph structure, channel agreement along every edge, and that
    /// every parameterized layer carries weights of exactly the implied shape.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::Graph("input shape must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.id.as_str()) {
                return Err(Error::Graph(format!("duplicate layer id `{}`", l.id)));
            }
        }
        let inputs = self.layers.iter().filter(|l| l.op == LayerOp::Input).count();
        let outputs = self.layers.iter().filter(|l| l.op == LayerOp::Output).count();
        if inputs != 1 || outputs != 1 {
            return Err(Error::Graph(format!(
                "expected exactly one input and one output layer, found {inputs} and {outputs}"
            )));
        }
        if self.layers.first().map(|l| &l.op) != Some(&LayerOp::Input) {
            return Err(Error::Graph("first layer must be the input".into()));
        }
        if self.layers.last().map(|l| &l.op) != Some(&LayerOp::Output) {
            return Err(Error::Graph("last layer must be the output".into()));
        }
        self.infer_shapes()?;

        for l in &self.layers {
            let expected = l.op.param_shapes();
            let got = self.weights.get(&l.id);
            if expected.is_empty() {
                if got.is_some_and(|p| !p.is_empty()) {
                    return Err(Error::malformed(Some(&l.id), "parameter-free layer carries weights"));
                }
                continue;
            }
            let got = got.ok_or_else(|| Error::malformed(Some(&l.id), "missing weights"))?;
            if got.len() != expected.len() {
                return Err(Error::shape(
                    l.id.clone(),
                    format!("expected parameters {:?}, found {:?}", expected.iter().map(|e| e.0).collect::<Vec<_>>(), got.keys().collect::<Vec<_>>()),
                ));
            }
            for (name, dims) in expected {
                let t = got
                    .get(name)
                    .ok_or_else(|| Error::malformed(Some(&l.id), format!("missing parameter `{name}`")))?;
                if t.dims != dims || t.data.len() != dims.iter().product::<usize>() {
                    return Err(Error::shape(
                        l.id.clone(),
                        format!("parameter `{name}` has dims {:?}, expected {dims:?}", t.dims),
                    ));
                }
            }
        }
        if let Some(stray) = self.weights.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::malformed(Some(stray), "weights for a layer that does not exist"));
        }
        Ok(())
    }

    pub(crate) fn into_parts(self) -> (String, [usize; 3], Vec<LayerSpec>, BTreeMap<String, ParamSet>) {
        (self.name, self.input_shape, self.layers, self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single_conv(in_ch: usize, out_ch: usize, k: usize) -> ModelIR {
        let conv = ConvSpec::new(in_ch, out_ch, k, 1, k / 2);
        let layers = vec![
            LayerSpec::new("input", LayerOp::Input, &[]),
            LayerSpec::new("conv", LayerOp::Conv2d(conv.clone()), &["input"]),
            LayerSpec::new("output", LayerOp::Output, &["conv"]),
        ];
        let mut weights = BTreeMap::new();
        let mut p = ParamSet::new();
        p.insert("weight".into(), WeightTensor::filled(conv.weight_dims().to_vec(), 0.5));
        weights.insert("conv".to_string(), p);
        ModelIR::new("single", [in_ch, 8, 8], layers, weights).unwrap()
    }

    #[test]
    fn single_conv_param_count() {
        assert_eq!(single_conv(32, 64, 3).param_count(), 18432);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let m = single_conv(4, 4, 3);
        let (name, shape, mut layers, weights) = m.into_parts();
        if let LayerOp::Conv2d(c) = &mut layers[1].op {
            c.in_ch = 5;
        }
        assert!(matches!(
            ModelIR::new(name, shape, layers, weights),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_wrong_weight_dims_and_duplicates() {
        let (name, shape, layers, mut weights) = single_conv(4, 4, 3).into_parts();
        let mut bad = weights.clone();
        bad.get_mut("conv").unwrap().insert("weight".into(), WeightTensor::filled(vec![4, 4, 1, 1], 0.0));
        assert!(matches!(
            ModelIR::new(name.clone(), shape, layers.clone(), bad),
            Err(Error::Shape { layer, .. }) if layer == "conv"
        ));
        let mut dup = layers.clone();
        dup.insert(2, dup[1].clone());
        assert!(matches!(ModelIR::new(name.clone(), shape, dup, weights.clone()), Err(Error::Graph(_))));
        weights.insert("ghost".into(), ParamSet::new());
        assert!(ModelIR::new(name, shape, layers, weights).is_err());
    }

    #[test]
    fn forward_reference_is_rejected() {
        let (name, shape, mut layers, weights) = single_conv(4, 4, 3).into_parts();
        layers[1].predecessors = vec!["output".into()];
        assert!(matches!(ModelIR::new(name, shape, layers, weights), Err(Error::Graph(_))));
    }

    #[test]
    fn conv_output_shape_arithmetic() {
        let c = ConvSpec::new(1, 1, 3, 2, 1);
        assert_eq!(c.output_hw(7, 8), Some((4, 4)));
        assert_eq!(ConvSpec::new(1, 1, 5, 1, 0).output_hw(3, 3), None);
    }
}
