//! Reference architectures: ResNet-18, the STResNet pico/micro/tiny family and
//! a small CIFAR-shaped test network.
//!
//! Every conv is followed by batchnorm + relu (the last conv of a residual
//! branch gets its relu after the join), heads are global-avg-pool + linear.
//! Weights are He-uniform (fan-in), biases zero, batchnorm set to identity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_xoshiro::SplitMix64;

use super::{ConvSpec, LayerOp, LayerSpec, LinearSpec, ModelIR, ParamSet, WeightTensor};
use crate::error::{Error, Result};
use crate::rng;

/// Side length of the square calibration inputs the builders declare.
pub const DEFAULT_RESOLUTION: usize = 32;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchName {
    Resnet18,
    StresnetPico,
    StresnetMicro,
    StresnetTiny,
    TestnetSmall,
}

impl ArchName {
    pub const ALL: [ArchName; 5] = [
        ArchName::Resnet18,
        ArchName::StresnetPico,
        ArchName::StresnetMicro,
        ArchName::StresnetTiny,
        ArchName::TestnetSmall,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::Resnet18 => "resnet18",
            ArchName::StresnetPico => "stresnet_pico",
            ArchName::StresnetMicro => "stresnet_micro",
            ArchName::StresnetTiny => "stresnet_tiny",
            ArchName::TestnetSmall => "testnet_small",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown architecture `{s}`")))
    }
}

pub fn build_arch(name: ArchName, num_classes: usize, seed: u64) -> Result<ModelIR> {
    if num_classes < 2 {
        return Err(Error::arg("num_classes must be at least 2"));
    }
    let mut g = Builder::new(seed);
    match name {
        ArchName::Resnet18 => resnet18(&mut g, num_classes),
        ArchName::StresnetPico => stresnet(&mut g, num_classes, &PICO),
        ArchName::StresnetMicro => stresnet(&mut g, num_classes, &MICRO),
        ArchName::StresnetTiny => stresnet(&mut g, num_classes, &TINY),
        ArchName::TestnetSmall => testnet_small(&mut g, num_classes),
    }
    g.finish(name.as_str(), [3, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION])
}

struct Builder {
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, ParamSet>,
    rng: SplitMix64,
}

impl Builder {
    fn new(seed: u64) -> Self {
        let mut b = Self {
            layers: Vec::new(),
            weights: BTreeMap::new(),
            rng: rng::seeded(seed),
        };
        b.push(LayerSpec::new("input", LayerOp::Input, &[]));
        b
    }

    fn push(&mut self, layer: LayerSpec) -> String {
        let id = layer.id.clone();
        self.layers.push(layer);
        id
    }

    fn conv(&mut self, id: &str, from: &str, spec: ConvSpec) -> String {
        let dims = spec.weight_dims();
        let fan_in = dims[1] * dims[2] * dims[3];
        let mut p = ParamSet::new();
        p.insert(
            "weight".into(),
            WeightTensor {
                dims: dims.to_vec(),
                data: rng::he_uniform(&mut self.rng, dims.iter().product(), fan_in),
            },
        );
        if spec.has_bias {
            p.insert("bias".into(), WeightTensor::filled(vec![spec.out_ch], 0.0));
        }
        self.weights.insert(id.to_string(), p);
        self.push(LayerSpec::new(id, LayerOp::Conv2d(spec), &[from]))
    }

    fn bn(&mut self, id: &str, from: &str, channels: usize) -> String {
        let mut p = ParamSet::new();
        for (name, v) in [("gamma", 1.0), ("beta", 0.0), ("mean", 0.0), ("var", 1.0)] {
            p.insert(name.into(), WeightTensor::filled(vec![channels], v));
        }
        self.weights.insert(id.to_string(), p);
        self.push(LayerSpec::new(id, LayerOp::Batchnorm { channels, eps: BN_EPS }, &[from]))
    }

    fn relu(&mut self, id: &str, from: &str) -> String {
        self.push(LayerSpec::new(id, LayerOp::Relu, &[from]))
    }

    fn conv_bn(&mut self, prefix: &str, from: &str, spec: ConvSpec) -> String {
        let ch = spec.out_ch;
        let c = self.conv(&format!("{prefix}.conv"), from, spec);
        self.bn(&format!("{prefix}.bn"), &c, ch)
    }

    fn conv_bn_relu(&mut self, prefix: &str, from: &str, spec: ConvSpec) -> String {
        let b = self.conv_bn(prefix, from, spec);
        self.relu(&format!("{prefix}.relu"), &b)
    }

    fn head(&mut self, from: &str, channels: usize, num_classes: usize) {
        let pool = self.push(LayerSpec::new("pool", LayerOp::GlobalAvgPool, &[from]));
        let spec = LinearSpec {
            in_features: channels,
            out_features: num_classes,
            has_bias: true,
        };
        let mut p = ParamSet::new();
        p.insert(
            "weight".into(),
            WeightTensor {
                dims: vec![num_classes, channels],
                data: rng::he_uniform(&mut self.rng, num_classes * channels, channels),
            },
        );
        p.insert("bias".into(), WeightTensor::filled(vec![num_classes], 0.0));
        self.weights.insert("fc".into(), p);
        let fc = self.push(LayerSpec::new("fc", LayerOp::Linear(spec), &[&pool]));
        self.push(LayerSpec::new("output", LayerOp::Output, &[&fc]));
    }

    fn finish(self, name: &str, input_shape: [usize; 3]) -> Result<ModelIR> {
        ModelIR::new(name, input_shape, self.layers, self.weights)
    }
}

fn resnet18(g: &mut Builder, num_classes: usize) {
    let stem = g.conv_bn_relu("stem", "input", ConvSpec::new(3, 64, 7, 2, 3));
    let mut x = g.push(LayerSpec::new(
        "stem.pool",
        LayerOp::Maxpool { kernel: 3, stride: 2, padding: 1 },
        &[&stem],
    ));
    let mut ch = 64;
    for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("layer{}.{block}", stage + 1);
            let a = g.conv_bn_relu(&format!("{p}.c1"), &x, ConvSpec::new(ch, width, 3, stride, 1));
            let b = g.conv_bn(&format!("{p}.c2"), &a, ConvSpec::new(width, width, 3, 1, 1));
            let shortcut = if stride != 1 || ch != width {
                g.conv_bn(&format!("{p}.downsample"), &x, ConvSpec::new(ch, width, 1, stride, 0))
            } else {
                x.clone()
            };
            let sum = g.push(LayerSpec::new(format!("{p}.add"), LayerOp::Add, &[&b, &shortcut]));
            x = g.relu(&format!("{p}.relu"), &sum);
            ch = width;
        }
    }
    g.head(&x, ch, num_classes);
}

/// One 3×3 slot of a basic block.
#[derive(Clone, Copy)]
enum Slot {
    /// plain 3×3 conv
    Plain,
    /// 1×1 reduce → 3×3 core (rank→rank) → 1×1 expand
    Tucker(usize),
}

struct StresnetLayout {
    /// output channels of the stem's 7×7 core
    stem_core: usize,
    /// `[stage][block] = (first slot, second slot)`; widths 64/128/256/512
    stages: [[(Slot, Slot); 2]; 4],
}

use Slot::{Plain as P, Tucker as T};

const PICO: StresnetLayout = StresnetLayout {
    stem_core: 8,
    stages: [
        [(T(24), T(16)), (T(24), T(8))],
        [(T(24), T(8)), (T(8), T(8))],
        [(T(8), T(8)), (T(8), T(8))],
        [(T(8), T(8)), (T(8), T(8))],
    ],
};

const MICRO: StresnetLayout = StresnetLayout {
    stem_core: 8,
    stages: [
        [(T(64), T(64)), (T(64), T(64))],
        [(T(40), T(32)), (T(88), T(32))],
        [(T(88), T(72)), (T(80), T(32))],
        [(T(80), T(8)), (T(72), T(64))],
    ],
};

const TINY: StresnetLayout = StresnetLayout {
    stem_core: 16,
    stages: [
        [(P, P), (P, P)],
        [(P, T(96)), (P, T(80))],
        [(P, T(192)), (P, T(96))],
        [(T(208), T(88)), (T(192), T(112))],
    ],
};

/// Rank of the low-rank 1×1 projection on channel-changing shortcuts.
const SHORTCUT_RANK: usize = 8;

fn slot(g: &mut Builder, prefix: &str, from: &str, s: Slot, cin: usize, cout: usize, stride: usize) -> String {
    match s {
        Slot::Plain => g.conv(&format!("{prefix}.conv"), from, ConvSpec::new(cin, cout, 3, stride, 1)),
        Slot::Tucker(r) => {
            let a = g.conv(&format!("{prefix}.reduce"), from, ConvSpec::new(cin, r, 1, 1, 0));
            let b = g.conv(&format!("{prefix}.core"), &a, ConvSpec::new(r, r, 3, stride, 1));
            g.conv(&format!("{prefix}.expand"), &b, ConvSpec::new(r, cout, 1, 1, 0))
        }
    }
}

fn stresnet(g: &mut Builder, num_classes: usize, layout: &StresnetLayout) {
    let a = g.conv("stem.reduce", "input", ConvSpec::new(3, 3, 1, 1, 0));
    let b = g.conv("stem.core", &a, ConvSpec::new(3, layout.stem_core, 7, 2, 3));
    let c = g.conv("stem.expand", &b, ConvSpec::new(layout.stem_core, 32, 1, 1, 0));
    let c = g.bn("stem.bn", &c, 32);
    let c = g.relu("stem.relu", &c);
    let d = g.conv_bn_relu("stem.proj", &c, ConvSpec::new(32, 64, 1, 1, 0));
    let mut x = g.push(LayerSpec::new(
        "stem.pool",
        LayerOp::Maxpool { kernel: 3, stride: 2, padding: 1 },
        &[&d],
    ));
    let mut ch = 64;
    for (stage, blocks) in layout.stages.iter().enumerate() {
        let width = 64 << stage;
        for (block, &(s1, s2)) in blocks.iter().enumerate() {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("layer{}.{block}", stage + 1);
            let y = slot(g, &format!("{p}.c1"), &x, s1, ch, width, stride);
            let y = g.bn(&format!("{p}.c1.bn"), &y, width);
            let y = g.relu(&format!("{p}.c1.relu"), &y);
            let y = slot(g, &format!("{p}.c2"), &y, s2, width, width, 1);
            let y = g.bn(&format!("{p}.c2.bn"), &y, width);
            let shortcut = if stride != 1 || ch != width {
                let r = g.conv(
                    &format!("{p}.downsample.reduce"),
                    &x,
                    ConvSpec::new(ch, SHORTCUT_RANK, 1, stride, 0),
                );
                let e = g.conv(
                    &format!("{p}.downsample.expand"),
                    &r,
                    ConvSpec::new(SHORTCUT_RANK, width, 1, 1, 0),
                );
                g.bn(&format!("{p}.downsample.bn"), &e, width)
            } else {
                x.clone()
            };
            let sum = g.push(LayerSpec::new(format!("{p}.add"), LayerOp::Add, &[&y, &shortcut]));
            x = g.relu(&format!("{p}.relu"), &sum);
            ch = width;
        }
    }
    g.head(&x, ch, num_classes);
}

/// Six 3×3 convs, one residual join, 32×32 input.
fn testnet_small(g: &mut Builder, num_classes: usize) {
    let x = g.conv_bn_relu("conv1", "input", ConvSpec::new(3, 16, 3, 1, 1));
    let x = g.conv_bn_relu("conv2", &x, ConvSpec::new(16, 32, 3, 2, 1));
    let x = g.conv_bn_relu("conv3", &x, ConvSpec::new(32, 32, 3, 1, 1));
    let skip = g.conv_bn_relu("conv4", &x, ConvSpec::new(32, 64, 3, 2, 1));
    let y = g.conv_bn_relu("conv5", &skip, ConvSpec::new(64, 64, 3, 1, 1));
    let y = g.conv_bn("conv6", &y, ConvSpec::new(64, 64, 3, 1, 1));
    let sum = g.push(LayerSpec::new("block.add", LayerOp::Add, &[&y, &skip]));
    let x = g.relu("block.relu", &sum);
    g.head(&x, 64, num_classes);
}
