use std::collections::BTreeMap;

use super::{ConvSpec, LayerOp, LayerSpec, LinearSpec, ModelIR, ParamSet};
use crate::error::{Error, Result};

/// Layer chain that stands in for one decomposed layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockLayers {
    /// 1×1 `I→R1`, k×k `R1→R2` (original stride/padding), 1×1 `R2→O` (original bias).
    Conv {
        reduce: LayerSpec,
        core: LayerSpec,
        expand: LayerSpec,
    },
    /// `in→r` without bias, then `r→out` with the original bias.
    Linear { reduce: LayerSpec, expand: LayerSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedBlock {
    pub original_id: String,
    pub layers: BlockLayers,
    pub weights: BTreeMap<String, ParamSet>,
}

fn sub_layer(original: &LayerSpec, suffix: &str, op: LayerOp, from: &str) -> LayerSpec {
    LayerSpec {
        id: format!("{}.{suffix}", original.id),
        op,
        predecessors: vec![from.to_string()],
        decomposed_from: Some(original.id.clone()),
    }
}

impl BlockLayers {
    /// Layer specs for a Tucker-2 replacement of `original` at ranks `(r1, r2)`.
    pub fn conv(original: &LayerSpec, r1: usize, r2: usize) -> Result<Self> {
        let c = original
            .conv()
            .ok_or_else(|| Error::arg(format!("layer `{}` is not a conv2d", original.id)))?;
        if c.groups != 1 {
            return Err(Error::arg(format!("grouped conv `{}` cannot be decomposed", original.id)));
        }
        if r1 == 0 || r1 > c.in_ch || r2 == 0 || r2 > c.out_ch {
            return Err(Error::arg(format!(
                "ranks ({r1}, {r2}) out of range for {}→{} conv `{}`",
                c.in_ch, c.out_ch, original.id
            )));
        }
        let from = original
            .predecessors
            .first()
            .ok_or_else(|| Error::Graph(format!("layer `{}` has no input", original.id)))?;
        let reduce = sub_layer(original, "reduce", LayerOp::Conv2d(ConvSpec::new(c.in_ch, r1, 1, 1, 0)), from);
        let core = sub_layer(
            original,
            "core",
            LayerOp::Conv2d(ConvSpec {
                in_ch: r1,
                out_ch: r2,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                groups: 1,
                has_bias: false,
            }),
            &reduce.id,
        );
        let expand = sub_layer(
            original,
            "expand",
            LayerOp::Conv2d(ConvSpec::new(r2, c.out_ch, 1, 1, 0).with_bias(c.has_bias)),
            &core.id,
        );
        Ok(BlockLayers::Conv { reduce, core, expand })
    }

    /// Layer specs for a rank-`rank` factorization of a linear layer.
    pub fn linear(original: &LayerSpec, rank: usize) -> Result<Self> {
        let l = original
            .linear()
            .ok_or_else(|| Error::arg(format!("layer `{}` is not linear", original.id)))?;
        if rank == 0 || rank > l.in_features.min(l.out_features) {
            return Err(Error::arg(format!(
                "rank {rank} out of range for {}→{} linear `{}`",
                l.in_features, l.out_features, original.id
            )));
        }
        let from = original
            .predecessors
            .first()
            .ok_or_else(|| Error::Graph(format!("layer `{}` has no input", original.id)))?;
        let reduce = sub_layer(
            original,
            "reduce",
            LayerOp::Linear(LinearSpec {
                in_features: l.in_features,
                out_features: rank,
                has_bias: false,
            }),
            from,
        );
        let expand = sub_layer(
            original,
            "expand",
            LayerOp::Linear(LinearSpec {
                in_features: rank,
                out_features: l.out_features,
                has_bias: l.has_bias,
            }),
            &reduce.id,
        );
        Ok(BlockLayers::Linear { reduce, expand })
    }

    pub fn layers(&self) -> Vec<&LayerSpec> {
        match self {
            BlockLayers::Conv { reduce, core, expand } => vec![reduce, core, expand],
            BlockLayers::Linear { reduce, expand } => vec![reduce, expand],
        }
    }

    pub fn output(&self) -> &LayerSpec {
        match self {
            BlockLayers::Conv { expand, .. } | BlockLayers::Linear { expand, .. } => expand,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.op.param_count()).sum()
    }

    /// Structural check that the chain can stand in for `original`.
    fn check_against(&self, original: &LayerSpec) -> Result<()> {
        let fail = |msg: &str| Err(Error::shape(original.id.clone(), format!("shape-chain violation: {msg}")));
        let layers = self.layers();
        if layers[0].predecessors != original.predecessors {
            return fail("first sub-layer must read the original inputs");
        }
        for pair in layers.windows(2) {
            if pair[1].predecessors != [pair[0].id.clone()] {
                return fail("sub-layers must form a chain");
            }
        }
        if layers.iter().any(|l| l.decomposed_from.as_deref() != Some(original.id.as_str())) {
            return fail("sub-layers must be tagged with the original id");
        }
        match (self, &original.op) {
            (BlockLayers::Conv { reduce, core, expand }, LayerOp::Conv2d(o)) => {
                let (Some(a), Some(b), Some(c)) = (reduce.conv(), core.conv(), expand.conv()) else {
                    return fail("conv block must consist of convs");
                };
                let pointwise = |s: &ConvSpec| s.kernel == [1, 1] && s.stride == 1 && s.padding == 0 && s.groups == 1;
                if !pointwise(a) || !pointwise(c) {
                    return fail("reduce and expand must be 1x1, stride 1, no padding");
                }
                if a.in_ch != o.in_ch || a.out_ch != b.in_ch || b.out_ch != c.in_ch || c.out_ch != o.out_ch {
                    return fail("channels must chain I→R1→R2→O");
                }
                if b.kernel != o.kernel || b.stride != o.stride || b.padding != o.padding || b.groups != 1 {
                    return fail("core must keep the original kernel, stride and padding");
                }
                if a.has_bias || b.has_bias || c.has_bias != o.has_bias {
                    return fail("only the expand conv may carry the original bias");
                }
            }
            (BlockLayers::Linear { reduce, expand }, LayerOp::Linear(o)) => {
                let (Some(a), Some(c)) = (reduce.linear(), expand.linear()) else {
                    return fail("linear block must consist of linear layers");
                };
                if a.in_features != o.in_features || a.out_features != c.in_features || c.out_features != o.out_features {
                    return fail("features must chain in→r→out");
                }
                if a.has_bias || c.has_bias != o.has_bias {
                    return fail("only the expand layer may carry the original bias");
                }
            }
            _ => return fail("block kind does not match the layer kind"),
        }
        Ok(())
    }
}

impl DecomposedBlock {
    pub fn output_id(&self) -> &str {
        &self.layers.output().id
    }

    pub fn param_count(&self) -> usize {
        self.layers.param_count()
    }
}

/// Substitute `layer_id` by `block`; downstream layers are rewired to the
/// block's last sub-layer. Everything else is left untouched.
pub fn replace_layer(m: &ModelIR, layer_id: &str, block: &DecomposedBlock) -> Result<ModelIR> {
    let idx = m
        .layer_index(layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
    let original = &m.layers()[idx];
    if original.decomposed_from.is_some() {
        return Err(Error::arg(format!(
            "layer `{layer_id}` is part of a decomposed block and is not a candidate"
        )));
    }
    if !original.is_decomposable() {
        return Err(Error::arg(format!(
            "layer `{layer_id}` ({}) cannot be decomposed",
            original.op.kind_name()
        )));
    }
    if block.original_id != layer_id {
        return Err(Error::arg(format!(
            "block was built for `{}`, not `{layer_id}`",
            block.original_id
        )));
    }
    block.layers.check_against(original)?;
    for l in block.layers.layers() {
        if !block.weights.contains_key(&l.id) {
            return Err(Error::malformed(Some(&l.id), "decomposed block is missing weights"));
        }
    }
    if block.weights.len() != block.layers.layers().len() {
        return Err(Error::malformed(Some(layer_id), "decomposed block carries stray weights"));
    }

    let old_shapes = m.infer_shapes()?;
    let out_id = block.output_id().to_string();
    let (name, input_shape, layers, mut weights) = m.clone().into_parts();
    let mut new_layers = Vec::with_capacity(layers.len() + 2);
    for (i, mut l) in layers.into_iter().enumerate() {
        if i == idx {
            new_layers.extend(block.layers.layers().into_iter().cloned());
            continue;
        }
        for p in &mut l.predecessors {
            if p == layer_id {
                *p = out_id.clone();
            }
        }
        new_layers.push(l);
    }
    weights.remove(layer_id);
    for (id, p) in &block.weights {
        weights.insert(id.clone(), p.clone());
    }
    let replaced = ModelIR::new(name, input_shape, new_layers, weights)?;

    let new_shapes = replaced.infer_shapes()?;
    let new_idx = replaced.layer_index(&out_id).expect("just inserted");
    if new_shapes[new_idx] != old_shapes[idx] {
        return Err(Error::shape(
            layer_id,
            format!("block output {:?} differs from original {:?}", new_shapes[new_idx], old_shapes[idx]),
        ));
    }
    Ok(replaced)
}
