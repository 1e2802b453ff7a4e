//! Deterministic CPU forward pass over a [`ModelIR`].
//!
//! Convolutions use im2col + GEMM in 64-bit arithmetic; stored f32 weights
//! are widened on use. Batchnorm runs in inference mode, padding is zeros.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ir::{ConvSpec, LayerOp, LayerSpec, LinearSpec, ModelIR, ParamSet};
use crate::rng;
use crate::tensor::gemm;

/// Batched activations: `(N, C, H, W)` or `(N, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 4 {
            return Err(Error::arg(format!("feature map must be 2-D or 4-D, got {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::arg(format!(
                "feature map {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    fn from_raw(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    /// Seeded standard-normal batch of shape `(batch, C, H, W)`.
    pub fn standard_normal(batch: usize, chw: [usize; 3], seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let dims = vec![batch, chw[0], chw[1], chw[2]];
        let data = rng::standard_normal(&mut r, dims.iter().product());
        Self::from_raw(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    fn nchw(&self, layer: &str) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(layer, format!("expects (N,C,H,W) input, got {:?}", self.dims))),
        }
    }

    /// Mean of squared entries.
    pub fn mean_square(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

/// Captured input(s) and output of one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub layer_id: String,
    pub inputs: Vec<FeatureMap>,
    pub output: FeatureMap,
}

impl TraceRecord {
    /// The (first) input; the only one for everything except residual joins.
    pub fn input(&self) -> &FeatureMap {
        &self.inputs[0]
    }
}

fn param(layer: &LayerSpec, params: Option<&ParamSet>, name: &str) -> Result<Vec<f64>> {
    params
        .and_then(|p| p.get(name))
        .map(|t| t.to_f64())
        .ok_or_else(|| Error::malformed(Some(&layer.id), format!("missing parameter `{name}`")))
}

/// Evaluate a single layer on its inputs.
pub fn layer_forward(layer: &LayerSpec, params: Option<&ParamSet>, inputs: &[&FeatureMap]) -> Result<FeatureMap> {
    let id = layer.id.as_str();
    let single = || -> Result<&FeatureMap> {
        match inputs {
            [x] => Ok(*x),
            _ => Err(Error::shape(id, format!("expects one input, got {}", inputs.len()))),
        }
    };
    match &layer.op {
        LayerOp::Input | LayerOp::Output => Ok(single()?.clone()),
        LayerOp::Conv2d(c) => {
            let w = param(layer, params, "weight")?;
            let b = if c.has_bias { Some(param(layer, params, "bias")?) } else { None };
            conv2d(id, single()?, c, &w, b.as_deref())
        }
        LayerOp::Linear(l) => {
            let w = param(layer, params, "weight")?;
            let b = if l.has_bias { Some(param(layer, params, "bias")?) } else { None };
            linear(id, single()?, l, &w, b.as_deref())
        }
        LayerOp::Batchnorm { channels, eps } => {
            let x = single()?;
            let [g, b, m, v] = ["gamma", "beta", "mean", "var"].map(|n| param(layer, params, n));
            batchnorm(id, x, *channels, *eps, &g?, &b?, &m?, &v?)
        }
        LayerOp::Relu => {
            let x = single()?;
            Ok(FeatureMap::from_raw(x.dims.clone(), x.data.iter().map(|&v| v.max(0.0)).collect()))
        }
        LayerOp::Maxpool { kernel, stride, padding } => maxpool(id, single()?, *kernel, *stride, *padding),
        LayerOp::GlobalAvgPool => {
            let (n, c, h, w) = single()?.nchw(id)?;
            let x = single()?;
            let area = (h * w) as f64;
            let data = x.data.chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / area).collect();
            Ok(FeatureMap::from_raw(vec![n, c], data))
        }
        LayerOp::Add => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::shape(id, "residual join without inputs"))?;
            let mut data = first.data.clone();
            for x in &inputs[1..] {
                if x.dims != first.dims {
                    return Err(Error::shape(id, format!("cannot add {:?} and {:?}", first.dims, x.dims)));
                }
                data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
            }
            Ok(FeatureMap::from_raw(first.dims.clone(), data))
        }
    }
}

fn conv2d(id: &str, x: &FeatureMap, c: &ConvSpec, w: &[f64], bias: Option<&[f64]>) -> Result<FeatureMap> {
    let (n, ch, h, wd) = x.nchw(id)?;
    if ch != c.in_ch {
        return Err(Error::shape(id, format!("expects {} channels, got {ch}", c.in_ch)));
    }
    let (oh, ow) = c
        .output_hw(h, wd)
        .ok_or_else(|| Error::shape(id, format!("kernel larger than padded {h}x{wd} input")))?;
    let [kh, kw] = c.kernel;
    let groups = c.groups;
    let (cg, og) = (c.in_ch / groups, c.out_ch / groups);
    let k = cg * kh * kw;
    let p = oh * ow;
    let mut out = vec![0.0; n * c.out_ch * p];
    let mut cols = vec![0.0; k * p];
    let pad = c.padding as isize;

    for b in 0..n {
        for g in 0..groups {
            // im2col for this sample and group: rows (ci, dy, dx), cols (oy, ox)
            for ci in 0..cg {
                let plane = &x.data[((b * ch) + g * cg + ci) * h * wd..][..h * wd];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = &mut cols[((ci * kh + dy) * kw + dx) * p..][..p];
                        for oy in 0..oh {
                            let iy = (oy * c.stride + dy) as isize - pad;
                            let dst = &mut row[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let src = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * c.stride + dx) as isize - pad;
                                *d = if ix < 0 || ix >= wd as isize { 0.0 } else { src[ix as usize] };
                            }
                        }
                    }
                }
            }
            let wg = &w[g * og * k..(g + 1) * og * k];
            let dst = &mut out[(b * c.out_ch + g * og) * p..][..og * p];
            gemm(wg, &cols, dst, og, k, p);
        }
        if let Some(bias) = bias {
            for o in 0..c.out_ch {
                out[(b * c.out_ch + o) * p..][..p].iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    Ok(FeatureMap::from_raw(vec![n, c.out_ch, oh, ow], out))
}

fn linear(id: &str, x: &FeatureMap, l: &LinearSpec, w: &[f64], bias: Option<&[f64]>) -> Result<FeatureMap> {
    let (n, f) = match x.dims[..] {
        [n, f] => (n, f),
        _ => return Err(Error::shape(id, format!("expects (N,F) input, got {:?}", x.dims))),
    };
    if f != l.in_features {
        return Err(Error::shape(id, format!("expects {} features, got {f}", l.in_features)));
    }
    let mut out = vec![0.0; n * l.out_features];
    for b in 0..n {
        let xi = &x.data[b * f..(b + 1) * f];
        for o in 0..l.out_features {
            let row = &w[o * f..(o + 1) * f];
            out[b * l.out_features + o] = crate::tensor::dot(row, xi) + bias.map_or(0.0, |bb| bb[o]);
        }
    }
    Ok(FeatureMap::from_raw(vec![n, l.out_features], out))
}

#[allow(clippy::too_many_arguments)]
fn batchnorm(
    id: &str,
    x: &FeatureMap,
    channels: usize,
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<FeatureMap> {
    let c = x.dims[1];
    if c != channels {
        return Err(Error::shape(id, format!("expects {channels} channels, got {c}")));
    }
    let inner: usize = x.dims[2..].iter().product();
    let scale: Vec<f64> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
    let mut data = x.data.clone();
    for (j, chunk) in data.chunks_exact_mut(inner).enumerate() {
        let ch = j % c;
        let (s, m, b) = (scale[ch], mean[ch], beta[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
    Ok(FeatureMap::from_raw(x.dims.clone(), data))
}

fn maxpool(id: &str, x: &FeatureMap, k: usize, stride: usize, pad: usize) -> Result<FeatureMap> {
    let (n, c, h, w) = x.nchw(id)?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(id, "pool window larger than input"));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            best = best.max(plane[iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(FeatureMap::from_raw(vec![n, c, oh, ow], out))
}

/// Run a chain of single-input layers (e.g. a decomposed block) on `x`.
pub fn chain_forward<'a>(
    layers: impl IntoIterator<Item = &'a LayerSpec>,
    params: impl Fn(&str) -> Option<&'a ParamSet>,
    x: &FeatureMap,
) -> Result<FeatureMap> {
    let mut cur = x.clone();
    for l in layers {
        cur = layer_forward(l, params(&l.id), &[&cur])?;
    }
    Ok(cur)
}

fn check_input(m: &ModelIR, x: &FeatureMap) -> Result<()> {
    let [c, h, w] = m.input_shape;
    match x.dims[..] {
        [_, xc, xh, xw] if (xc, xh, xw) == (c, h, w) => Ok(()),
        _ => Err(Error::shape(
            "input",
            format!("model expects (N,{c},{h},{w}) input, got {:?}", x.dims),
        )),
    }
}

fn run(m: &ModelIR, x: &FeatureMap, traced: &[usize]) -> Result<(FeatureMap, HashMap<usize, TraceRecord>)> {
    check_input(m, x)?;
    let layers = m.layers();
    let index: HashMap<&str, usize> = layers.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let mut last_use = vec![0usize; layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for p in &l.predecessors {
            last_use[index[p.as_str()]] = i;
        }
    }
    let mut values: Vec<Option<FeatureMap>> = vec![None; layers.len()];
    let mut records = HashMap::new();
    for (i, l) in layers.iter().enumerate() {
        let out = if l.op == LayerOp::Input {
            x.clone()
        } else {
            let ins: Vec<&FeatureMap> = l
                .predecessors
                .iter()
                .map(|p| values[index[p.as_str()]].as_ref().expect("predecessor evaluated"))
                .collect();
            let out = layer_forward(l, m.params(&l.id), &ins)?;
            if traced.contains(&i) {
                records.insert(
                    i,
                    TraceRecord {
                        layer_id: l.id.clone(),
                        inputs: ins.into_iter().cloned().collect(),
                        output: out.clone(),
                    },
                );
            }
            out
        };
        if l.op == LayerOp::Input && traced.contains(&i) {
            records.insert(
                i,
                TraceRecord {
                    layer_id: l.id.clone(),
                    inputs: vec![x.clone()],
                    output: out.clone(),
                },
            );
        }
        for p in &l.predecessors {
            let j = index[p.as_str()];
            if last_use[j] == i {
                values[j] = None;
            }
        }
        values[i] = Some(out);
    }
    let output = values
        .pop()
        .flatten()
        .expect("validated models end with an output layer");
    Ok((output, records))
}

/// Final output of `m` on `x`.
pub fn forward(m: &ModelIR, x: &FeatureMap) -> Result<FeatureMap> {
    run(m, x, &[]).map(|(out, _)| out)
}

/// Forward pass capturing the inputs and output of each listed layer, in the
/// order given. Captured values are identical to an untraced pass.
pub fn forward_traced(m: &ModelIR, x: &FeatureMap, layer_ids: &[&str]) -> Result<Vec<TraceRecord>> {
    let idx: Vec<usize> = layer_ids
        .iter()
        .map(|id| m.layer_index(id).ok_or_else(|| Error::UnknownLayer(id.to_string())))
        .collect::<Result<_>>()?;
    let (_, mut records) = run(m, x, &idx)?;
    Ok(idx.iter().map(|i| records.remove(i).expect("traced layer recorded")).collect())
}

/// Normalized MSE: `mean((pred − target)²) / (mean(target²) + eps)`.
pub fn nmse(pred: &FeatureMap, target: &FeatureMap, eps: f64) -> Result<f64> {
    if pred.dims != target.dims {
        return Err(Error::arg(format!("nmse on mismatched shapes {:?} vs {:?}", pred.dims, target.dims)));
    }
    let n = pred.data.len() as f64;
    let err: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(err / (target.mean_square() + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_arch, ArchName, WeightTensor};

    fn conv_layer(spec: ConvSpec) -> LayerSpec {
        LayerSpec::new("c", LayerOp::Conv2d(spec), &["x"])
    }

    fn params_for(spec: &ConvSpec, seed: u64) -> ParamSet {
        let mut r = rng::seeded(seed);
        let dims = spec.weight_dims();
        let mut p = ParamSet::new();
        let w: Vec<f64> = rng::standard_normal(&mut r, dims.iter().product());
        p.insert("weight".into(), WeightTensor::from_f64(dims.to_vec(), &w).unwrap());
        if spec.has_bias {
            let b = rng::standard_normal(&mut r, spec.out_ch);
            p.insert("bias".into(), WeightTensor::from_f64(vec![spec.out_ch], &b).unwrap());
        }
        p
    }

    /// Direct 6-loop convolution.
    fn naive_conv(x: &FeatureMap, spec: &ConvSpec, p: &ParamSet) -> Vec<f64> {
        let (n, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
        let (oh, ow) = spec.output_hw(h, w).unwrap();
        let wt = p["weight"].to_f64();
        let [kh, kw] = spec.kernel;
        let cg = c / spec.groups;
        let og = spec.out_ch / spec.groups;
        let mut out = vec![0.0; n * spec.out_ch * oh * ow];
        for b in 0..n {
            for o in 0..spec.out_ch {
                let g = o / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = p.get("bias").map_or(0.0, |bb| f64::from(bb.data[o]));
                        for ci in 0..cg {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * spec.stride + dy) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + dx) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((b * c + g * cg + ci) * h + iy as usize) * w + ix as usize];
                                    s += wt[((o * cg + ci) * kh + dy) * kw + dx] * xv;
                                }
                            }
                        }
                        out[((b * spec.out_ch + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_on_random_cases() {
        let mut seed = 0;
        for (cin, cout, k, stride, pad, groups, hw) in [
            (1, 1, 3, 1, 1, 1, 5),
            (3, 4, 3, 2, 1, 1, 9),
            (8, 8, 1, 1, 0, 1, 6),
            (4, 6, 5, 1, 2, 1, 7),
            (4, 8, 3, 1, 1, 2, 6),
            (6, 6, 3, 2, 0, 6, 9),
            (2, 5, 2, 3, 1, 1, 8),
        ] {
            seed += 1;
            let spec = ConvSpec { groups, ..ConvSpec::new(cin, cout, k, stride, pad) }.with_bias(seed % 2 == 0);
            let p = params_for(&spec, seed);
            let x = FeatureMap::standard_normal(2, [cin, hw, hw], seed + 100);
            let got = layer_forward(&conv_layer(spec.clone()), Some(&p), &[&x]).unwrap();
            let want = naive_conv(&x, &spec, &p);
            let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = got.data.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(diff <= 1e-10 * scale, "case {seed}: {diff}");
        }
    }

    #[test]
    fn ramp_3x3_same_padding() {
        let spec = ConvSpec::new(1, 1, 3, 1, 1);
        let p = params_for(&spec, 9);
        let x = FeatureMap::new(vec![1, 1, 5, 5], (0..25).map(f64::from).collect()).unwrap();
        let got = layer_forward(&conv_layer(spec.clone()), Some(&p), &[&x]).unwrap();
        assert_eq!(got.dims(), &[1, 1, 5, 5]);
        for (a, b) in got.data().iter().zip(naive_conv(&x, &spec, &p)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pointwise_permutation_permutes_channels() {
        let spec = ConvSpec::new(3, 3, 1, 1, 0);
        let perm = [2usize, 0, 1];
        let mut w = vec![0.0f32; 9];
        for (o, &i) in perm.iter().enumerate() {
            w[o * 3 + i] = 1.0;
        }
        let mut p = ParamSet::new();
        p.insert("weight".into(), WeightTensor::new(vec![3, 3, 1, 1], w).unwrap());
        let x = FeatureMap::standard_normal(2, [3, 4, 4], 5);
        let y = layer_forward(&conv_layer(spec), Some(&p), &[&x]).unwrap();
        for b in 0..2 {
            for (o, &i) in perm.iter().enumerate() {
                assert_eq!(&y.data[(b * 3 + o) * 16..][..16], &x.data[(b * 3 + i) * 16..][..16]);
            }
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = ConvSpec::new(2, 3, 3, 2, 1).with_bias(true);
        let mut p = ParamSet::new();
        p.insert("weight".into(), WeightTensor::filled(spec.weight_dims().to_vec(), 0.0));
        p.insert("bias".into(), WeightTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let x = FeatureMap::standard_normal(1, [2, 7, 7], 1);
        let y = layer_forward(&conv_layer(spec), Some(&p), &[&x]).unwrap();
        // floor((7 + 2 - 3) / 2) + 1
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        for (o, b) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            assert!(y.data[o * 16..(o + 1) * 16].iter().all(|&v| v == b));
        }
    }

    #[test]
    fn conv_is_linear_up_to_bias() {
        let spec = ConvSpec::new(3, 4, 3, 1, 1).with_bias(true);
        let p = params_for(&spec, 4);
        let l = conv_layer(spec);
        let x = FeatureMap::standard_normal(2, [3, 6, 6], 1);
        let y = FeatureMap::standard_normal(2, [3, 6, 6], 2);
        let xy = FeatureMap::new(x.dims.clone(), x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect()).unwrap();
        let zero = FeatureMap::new(x.dims.clone(), vec![0.0; x.data.len()]).unwrap();
        let f = |v: &FeatureMap| layer_forward(&l, Some(&p), &[v]).unwrap().data;
        let (fx, fy, fxy, f0) = (f(&x), f(&y), f(&xy), f(&zero));
        let scale = fxy.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = (0..fx.len()).map(|i| (fxy[i] - (fx[i] + fy[i] - f0[i])).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-9 * scale);
    }

    #[test]
    fn relu_kills_negative_constant() {
        let l = LayerSpec::new("r", LayerOp::Relu, &["x"]);
        let x = FeatureMap::new(vec![1, 2, 3, 3], vec![-1.5; 18]).unwrap();
        assert!(layer_forward(&l, None, &[&x]).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = ConvSpec::new(3, 4, 3, 1, 1);
        let p = params_for(&spec, 1);
        let x = FeatureMap::standard_normal(1, [2, 5, 5], 1);
        match layer_forward(&conv_layer(spec), Some(&p), &[&x]) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "c"),
            other => panic!("{other:?}"),
        }
        let m = build_arch(ArchName::TestnetSmall, 10, 0).unwrap();
        let bad = FeatureMap::standard_normal(1, [3, 16, 16], 1);
        assert!(matches!(forward(&m, &bad), Err(Error::Shape { .. })));
        assert!(matches!(forward_traced(&m, &bad, &["nope"]), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn tracing_does_not_perturb() {
        let m = build_arch(ArchName::TestnetSmall, 10, 3).unwrap();
        let x = FeatureMap::standard_normal(2, [3, 32, 32], 11);
        let plain = forward(&m, &x).unwrap();
        let ids: Vec<&str> = m.layers().iter().map(|l| l.id.as_str()).collect();
        let traced = forward_traced(&m, &x, &ids).unwrap();
        assert_eq!(traced.len(), ids.len());
        assert_eq!(traced.last().unwrap().output, plain);

        let mid = traced.iter().find(|r| r.layer_id == "conv3.conv").unwrap();
        let layer = m.layer("conv3.conv").unwrap();
        let again = layer_forward(layer, m.params("conv3.conv"), &[mid.input()]).unwrap();
        assert_eq!(again, mid.output);
        let join = traced.iter().find(|r| r.layer_id == "block.add").unwrap();
        assert_eq!(join.inputs.len(), 2);
    }

    #[test]
    fn trace_checksums_are_stable() {
        let checksum = || {
            let m = build_arch(ArchName::TestnetSmall, 10, 42).unwrap();
            let x = FeatureMap::standard_normal(4, [3, 32, 32], 7);
            forward_traced(&m, &x, &["conv2.conv", "conv6.bn", "fc"])
                .unwrap()
                .iter()
                .map(|r| r.output.data().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(checksum(), checksum());
    }
}
