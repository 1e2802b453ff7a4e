//! Rank proposals and concrete weights for decomposed conv/linear layers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::delta_flash_analytic;
use crate::ir::{BlockLayers, DecomposedBlock, LayerSpec, ModelIR, ParamSet, WeightTensor};
use crate::tensor::{svd, tucker2_hooi, tucker2_hosvd, HooiOptions, Matrix, SvdResult, Tensor4, TuckerFactors};

/// Candidate ranks along one channel axis: `start`, then the steps in order,
/// with the last step repeating (`start 4, steps [2, 4, 8]` gives
/// 4, 6, 10, 18, 26, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalGrid {
    pub start: usize,
    pub steps: Vec<usize>,
}

impl Default for ProposalGrid {
    fn default() -> Self {
        Self { start: 8, steps: vec![8] }
    }
}

impl ProposalGrid {
    pub fn new(start: usize, steps: Vec<usize>) -> Result<Self> {
        let g = Self { start, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start == 0 {
            return Err(Error::arg("grid start must be at least 1"));
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(Error::arg("grid steps must be a non-empty list of positive integers"));
        }
        Ok(())
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let last = *self.steps.last().expect("validated grid");
        let steps = self.steps.iter().copied().chain(std::iter::repeat(last));
        std::iter::once(self.start).chain(steps.scan(self.start, |v, s| {
            *v += s;
            Some(*v)
        }))
    }

    /// Grid values in `[1, bound]`, strictly increasing.
    pub fn values(&self, bound: usize) -> Vec<usize> {
        self.iter().take_while(|&v| v <= bound).collect()
    }

    /// Grid value closest to `x`; ties go to the larger value.
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = self.start;
        for v in self.iter() {
            if (v as f64 - x).abs() <= (best as f64 - x).abs() {
                best = v;
            }
            if v as f64 >= x {
                break;
            }
        }
        best
    }
}

/// Input-mode rank `r1` and output-mode rank `r2` for one layer. Linear
/// layers use `r1 == r2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankProposal {
    pub layer_id: String,
    pub r1: usize,
    pub r2: usize,
}

impl RankProposal {
    pub fn new(layer_id: impl Into<String>, r1: usize, r2: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            r1,
            r2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hosvd,
    #[default]
    Hooi,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Hosvd => "hosvd",
            Method::Hooi => "hooi",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hosvd" => Ok(Method::Hosvd),
            "hooi" => Ok(Method::Hooi),
            _ => Err(Error::arg(format!("unknown method `{s}` (expected hosvd or hooi)"))),
        }
    }
}

/// Proposals for one layer, keeping only those that shrink it.
pub fn propose_layer(layer: &LayerSpec, grid: &ProposalGrid) -> Vec<RankProposal> {
    if !layer.is_decomposable() || layer.decomposed_from.is_some() {
        return Vec::new();
    }
    let pairs: Vec<(usize, usize)> = if let Some(c) = layer.conv() {
        grid.values(c.out_ch)
            .into_iter()
            .map(|r2| {
                let r1 = grid.nearest(r2 as f64 * c.in_ch as f64 / c.out_ch as f64).clamp(1, c.in_ch);
                (r1, r2)
            })
            .collect()
    } else if let Some(l) = layer.linear() {
        grid.values(l.in_features.min(l.out_features))
            .into_iter()
            .map(|r| (r, r))
            .collect()
    } else {
        Vec::new()
    };
    pairs
        .into_iter()
        .map(|(r1, r2)| RankProposal::new(&layer.id, r1, r2))
        .filter(|p| delta_flash_analytic(layer, p).is_ok_and(|d| d < 0))
        .collect()
}

/// Proposals for every candidate layer, in layer order then ascending rank.
pub fn propose_ranks(m: &ModelIR, grid: &ProposalGrid) -> Vec<RankProposal> {
    m.layers().iter().flat_map(|l| propose_layer(l, grid)).collect()
}

/// Conv kernel of `layer_id` widened to f64.
pub fn kernel_of(m: &ModelIR, layer_id: &str) -> Result<Tensor4> {
    let t = m.param(layer_id, "weight")?;
    let dims: [usize; 4] = t
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::shape(layer_id, format!("conv weight must be 4-D, got {:?}", t.dims)))?;
    Tensor4::new(dims, t.to_f64())
}

/// Linear weight (`out × in`) of `layer_id` widened to f64.
pub fn matrix_of(m: &ModelIR, layer_id: &str) -> Result<Matrix> {
    let t = m.param(layer_id, "weight")?;
    match t.dims[..] {
        [r, c] => Matrix::new(r, c, t.to_f64()),
        _ => Err(Error::shape(layer_id, format!("linear weight must be 2-D, got {:?}", t.dims))),
    }
}

pub fn bias_of(m: &ModelIR, layer_id: &str) -> Option<Vec<f64>> {
    m.params(layer_id)?.get("bias").map(WeightTensor::to_f64)
}

fn single(name: &str, t: WeightTensor) -> ParamSet {
    ParamSet::from([(name.to_string(), t)])
}

fn with_bias(mut p: ParamSet, bias: Option<&[f64]>) -> Result<ParamSet> {
    if let Some(b) = bias {
        p.insert("bias".into(), WeightTensor::from_f64(vec![b.len()], b)?);
    }
    Ok(p)
}

/// Block weights from already computed Tucker-2 factors.
pub fn conv_block_from_factors(spec: &LayerSpec, f: &TuckerFactors, bias: Option<&[f64]>) -> Result<DecomposedBlock> {
    let (r1, r2) = f.ranks();
    let layers = BlockLayers::conv(spec, r1, r2)?;
    let c = spec.conv().expect("checked by BlockLayers::conv");
    if f.kernel_dims() != c.weight_dims() {
        return Err(Error::shape(
            spec.id.clone(),
            format!("factors describe {:?}, layer expects {:?}", f.kernel_dims(), c.weight_dims()),
        ));
    }
    if c.has_bias != bias.is_some() {
        return Err(Error::arg(format!("bias presence disagrees with layer `{}`", spec.id)));
    }
    let BlockLayers::Conv { reduce, core, expand } = &layers else {
        unreachable!()
    };
    let reduce_w = WeightTensor::from_f64(vec![r1, c.in_ch, 1, 1], f.u_in.transpose().data())?;
    let core_w = WeightTensor::from_f64(f.core.dims().to_vec(), f.core.data())?;
    let expand_w = WeightTensor::from_f64(vec![c.out_ch, r2, 1, 1], f.u_out.data())?;
    let weights = BTreeMap::from([
        (reduce.id.clone(), single("weight", reduce_w)),
        (core.id.clone(), single("weight", core_w)),
        (expand.id.clone(), with_bias(single("weight", expand_w), bias)?),
    ]);
    Ok(DecomposedBlock {
        original_id: spec.id.clone(),
        layers,
        weights,
    })
}

/// Tucker-2 replacement of a conv layer at the proposal's ranks.
pub fn decompose_conv(
    spec: &LayerSpec,
    w: &Tensor4,
    bias: Option<&[f64]>,
    p: &RankProposal,
    method: Method,
) -> Result<DecomposedBlock> {
    check_target(spec, p)?;
    // validates groups and ranks before any heavy work
    BlockLayers::conv(spec, p.r1, p.r2)?;
    let factors = match method {
        Method::Hosvd => tucker2_hosvd(w, p.r1, p.r2)?,
        Method::Hooi => tucker2_hooi(w, p.r1, p.r2, HooiOptions::default())?.factors,
    };
    conv_block_from_factors(spec, &factors, bias)
}

/// Block weights from a (possibly wider) truncated SVD of the layer weight.
pub fn linear_block_from_svd(spec: &LayerSpec, s: &SvdResult, rank: usize, bias: Option<&[f64]>) -> Result<DecomposedBlock> {
    let layers = BlockLayers::linear(spec, rank)?;
    let l = spec.linear().expect("checked by BlockLayers::linear");
    if rank > s.rank() || s.u.rows() != l.out_features || s.v.rows() != l.in_features {
        return Err(Error::arg(format!("SVD does not cover rank {rank} of layer `{}`", spec.id)));
    }
    if l.has_bias != bias.is_some() {
        return Err(Error::arg(format!("bias presence disagrees with layer `{}`", spec.id)));
    }
    // reduce: S_r V_rᵀ (rank × in); expand: U_r (out × rank)
    let reduce_w = Matrix::from_fn(rank, l.in_features, |i, j| s.singular_values[i] * s.v.get(j, i));
    let expand_w = s.u.leading_columns(rank);
    let BlockLayers::Linear { reduce, expand } = &layers else {
        unreachable!()
    };
    let weights = BTreeMap::from([
        (
            reduce.id.clone(),
            single("weight", WeightTensor::from_f64(vec![rank, l.in_features], reduce_w.data())?),
        ),
        (
            expand.id.clone(),
            with_bias(
                single("weight", WeightTensor::from_f64(vec![l.out_features, rank], expand_w.data())?),
                bias,
            )?,
        ),
    ]);
    Ok(DecomposedBlock {
        original_id: spec.id.clone(),
        layers,
        weights,
    })
}

/// Truncated-SVD replacement of a linear layer.
pub fn decompose_linear(spec: &LayerSpec, w: &Matrix, bias: Option<&[f64]>, rank: usize) -> Result<DecomposedBlock> {
    BlockLayers::linear(spec, rank)?;
    linear_block_from_svd(spec, &svd(w, rank)?, rank, bias)
}

fn check_target(spec: &LayerSpec, p: &RankProposal) -> Result<()> {
    if p.layer_id != spec.id {
        return Err(Error::arg(format!("proposal targets `{}`, not `{}`", p.layer_id, spec.id)));
    }
    Ok(())
}

/// Decompose the layer named by `p` using the weights stored in `m`.
pub fn decompose_in_model(m: &ModelIR, p: &RankProposal, method: Method) -> Result<DecomposedBlock> {
    let spec = m
        .layer(&p.layer_id)
        .ok_or_else(|| Error::UnknownLayer(p.layer_id.clone()))?;
    let bias = bias_of(m, &p.layer_id);
    if spec.conv().is_some() {
        decompose_conv(spec, &kernel_of(m, &p.layer_id)?, bias.as_deref(), p, method)
    } else if spec.linear().is_some() {
        check_target(spec, p)?;
        if p.r1 != p.r2 {
            return Err(Error::arg(format!("linear layer `{}` needs r1 == r2", spec.id)));
        }
        decompose_linear(spec, &matrix_of(m, &p.layer_id)?, bias.as_deref(), p.r1)
    } else {
        Err(Error::arg(format!(
            "layer `{}` ({}) cannot be decomposed",
            spec.id,
            spec.op.kind_name()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{layer_forward, FeatureMap};
    use crate::ir::{replace_layer, ConvSpec, LayerOp, LinearSpec};
    use crate::rng;

    fn conv_spec(cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> LayerSpec {
        LayerSpec::new("c", LayerOp::Conv2d(ConvSpec::new(cin, cout, k, stride, k / 2).with_bias(bias)), &["x"])
    }

    fn random(len: usize, seed: u64) -> Vec<f64> {
        rng::standard_normal(&mut rng::seeded(seed), len)
    }

    fn run_block(block: &DecomposedBlock, x: &FeatureMap) -> FeatureMap {
        crate::infer::chain_forward(block.layers.layers(), |id| block.weights.get(id), x).unwrap()
    }

    fn original_params(spec: &LayerSpec, w: &[f64], bias: Option<&[f64]>) -> ParamSet {
        let dims = spec.op.param_shapes()[0].1.clone();
        with_bias(single("weight", WeightTensor::from_f64(dims, w).unwrap()), bias).unwrap()
    }

    fn rel_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        (num / b.data().iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    #[test]
    fn grid_values_and_nearest() {
        let g = ProposalGrid::default();
        assert_eq!(g.values(64), vec![8, 16, 24, 32, 40, 48, 56, 64]);
        assert_eq!(g.values(7), Vec::<usize>::new());
        let g = ProposalGrid::new(4, vec![2, 4, 8]).unwrap();
        assert_eq!(g.values(40), vec![4, 6, 10, 18, 26, 34]);
        assert_eq!(g.nearest(0.3), 4);
        assert_eq!(g.nearest(8.0), 10);
        assert_eq!(g.nearest(7.9), 6);
        assert_eq!(g.nearest(100.0), 98);
        assert!(ProposalGrid::new(0, vec![8]).is_err());
        assert!(ProposalGrid::new(8, vec![]).is_err());
    }

    #[test]
    fn proposals_for_32_to_64_keep_only_savings() {
        let spec = conv_spec(32, 64, 3, 1, false);
        let props = propose_layer(&spec, &ProposalGrid::default());
        let pairs: Vec<_> = props.iter().map(|p| (p.r1, p.r2)).collect();
        // (32, 56) and (32, 64) grow the layer and are dropped
        assert_eq!(pairs, vec![(8, 8), (8, 16), (16, 24), (16, 32), (24, 40), (24, 48)]);
    }

    #[test]
    fn stem_proposals_clamp_input_rank() {
        let spec = conv_spec(3, 8, 3, 1, false);
        let props = propose_layer(&spec, &ProposalGrid::default());
        // 3·3 + 3·8·9 + 8·8 = 289 > 216 parameters
        assert!(props.is_empty());
        let spec = conv_spec(3, 64, 7, 2, false);
        let props = propose_layer(&spec, &ProposalGrid::default());
        assert!(props.iter().all(|p| p.r1 == 3));
        assert!(!props.is_empty());
    }

    #[test]
    fn full_rank_conv_block_is_lossless() {
        for (seed, (cin, cout, k, stride, bias)) in
            [(6, 5, 3, 1, true), (4, 8, 3, 2, false), (3, 7, 5, 1, true), (8, 4, 1, 1, false)]
                .into_iter()
                .enumerate()
        {
            let spec = conv_spec(cin, cout, k, stride, bias);
            let dims = spec.conv().unwrap().weight_dims();
            let w = random(dims.iter().product(), seed as u64);
            let b = bias.then(|| random(cout, 99));
            for method in [Method::Hosvd, Method::Hooi] {
                let block = decompose_conv(
                    &spec,
                    &Tensor4::new(dims, w.clone()).unwrap(),
                    b.as_deref(),
                    &RankProposal::new("c", cin, cout),
                    method,
                )
                .unwrap();
                let x = FeatureMap::standard_normal(2, [cin, 9, 9], 7);
                let want = layer_forward(&spec, Some(&original_params(&spec, &w, b.as_deref())), &[&x]).unwrap();
                let got = run_block(&block, &x);
                assert_eq!(got.dims(), want.dims());
                assert!(rel_diff(&got, &want) <= 1e-4);
            }
        }
    }

    #[test]
    fn conv_32_64_rank_8_block_has_1344_params() {
        let spec = conv_spec(32, 64, 3, 1, false);
        let w = Tensor4::new([64, 32, 3, 3], random(64 * 32 * 9, 1)).unwrap();
        let block = decompose_conv(&spec, &w, None, &RankProposal::new("c", 8, 8), Method::Hosvd).unwrap();
        assert_eq!(block.param_count(), 1344);
        let stored: usize = block.weights.values().flat_map(|p| p.values()).map(WeightTensor::len).sum();
        assert_eq!(stored, 1344);
    }

    #[test]
    fn planted_low_rank_conv_is_exact_at_true_ranks() {
        // kernel = G ×₁ A ×₂ B with random (not orthonormal) A, B
        let (o, i, k, r1, r2) = (10, 8, 3, 3, 4);
        let g = Tensor4::new([r2, r1, k, k], random(r2 * r1 * k * k, 3)).unwrap();
        let a = Matrix::new(o, r2, random(o * r2, 4)).unwrap();
        let b = Matrix::new(i, r1, random(i * r1, 5)).unwrap();
        let w = crate::tensor::mode_product(&crate::tensor::mode_product(&g, &a, 1).unwrap(), &b, 2).unwrap();
        let spec = conv_spec(i, o, k, 1, false);
        let block = decompose_conv(&spec, &w, None, &RankProposal::new("c", r1, r2), Method::Hooi).unwrap();
        let x = FeatureMap::standard_normal(2, [i, 8, 8], 8);
        let want = layer_forward(&spec, Some(&original_params(&spec, w.data(), None)), &[&x]).unwrap();
        assert!(rel_diff(&run_block(&block, &x), &want) <= 1e-5);
    }

    #[test]
    fn linear_blocks() {
        let spec = LayerSpec::new(
            "fc",
            LayerOp::Linear(LinearSpec {
                in_features: 12,
                out_features: 7,
                has_bias: true,
            }),
            &["x"],
        );
        let w = random(84, 2);
        let b = random(7, 3);
        let x = FeatureMap::new(vec![3, 12], random(36, 4)).unwrap();
        let want = layer_forward(&spec, Some(&original_params(&spec, &w, Some(&b))), &[&x]).unwrap();
        let full = decompose_linear(&spec, &Matrix::new(7, 12, w).unwrap(), Some(&b), 7).unwrap();
        assert!(rel_diff(&run_block(&full, &x), &want) <= 1e-6);

        let u = random(7, 5);
        let v = random(12, 6);
        let w1: Vec<f64> = (0..84).map(|n| u[n / 12] * v[n % 12]).collect();
        let want = layer_forward(&spec, Some(&original_params(&spec, &w1, Some(&b))), &[&x]).unwrap();
        let r1 = decompose_linear(&spec, &Matrix::new(7, 12, w1).unwrap(), Some(&b), 1).unwrap();
        assert!(rel_diff(&run_block(&r1, &x), &want) <= 1e-6);
        assert!(decompose_linear(&spec, &Matrix::zeros(7, 12), None, 8).is_err());
    }

    #[test]
    fn head_param_arithmetic() {
        let spec = LayerSpec::new(
            "fc",
            LayerOp::Linear(LinearSpec {
                in_features: 512,
                out_features: 1000,
                has_bias: true,
            }),
            &["x"],
        );
        assert_eq!(BlockLayers::linear(&spec, 64).unwrap().param_count(), 512 * 64 + 64 * 1000 + 1000);
    }

    #[test]
    fn rejects_grouped_and_bad_ranks() {
        let grouped = LayerSpec::new(
            "c",
            LayerOp::Conv2d(ConvSpec {
                groups: 4,
                ..ConvSpec::new(8, 8, 3, 1, 1)
            }),
            &["x"],
        );
        let w = Tensor4::zeros([8, 2, 3, 3]);
        assert!(decompose_conv(&grouped, &w, None, &RankProposal::new("c", 2, 2), Method::Hosvd).is_err());
        assert!(propose_layer(&grouped, &ProposalGrid::default()).is_empty());
        let spec = conv_spec(4, 4, 3, 1, false);
        let w = Tensor4::new([4, 4, 3, 3], random(144, 1)).unwrap();
        assert!(decompose_conv(&spec, &w, None, &RankProposal::new("c", 5, 2), Method::Hosvd).is_err());
        assert!(decompose_conv(&spec, &w, None, &RankProposal::new("c", 0, 2), Method::Hosvd).is_err());
    }

    #[test]
    fn in_model_decomposition_preserves_output_shape() {
        let m = crate::ir::build_arch(crate::ir::ArchName::TestnetSmall, 10, 1).unwrap();
        let x = FeatureMap::standard_normal(1, [3, 32, 32], 2);
        let before = crate::infer::forward(&m, &x).unwrap();
        for p in propose_ranks(&m, &ProposalGrid::default()).iter().step_by(3) {
            let block = decompose_in_model(&m, p, Method::Hosvd).unwrap();
            let replaced = replace_layer(&m, &p.layer_id, &block).unwrap();
            assert_eq!(crate::infer::forward(&replaced, &x).unwrap().dims(), before.dims());
        }
    }
}
