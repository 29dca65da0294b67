//! Graph evaluation and reverse-mode differentiation.
//!
//! The same implementation runs in `f32` (production) and `f64` (the
//! gradient-checking shadow mode); see [`super::real::Real`].
//!
//! Gradients accumulate in strict reverse definition order, so repeated runs
//! are byte-identical.

use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId, Op};
use super::kernels::{
    blur_channel, conv2d_backward, conv2d_forward, conv_out_dim, dct8_basis, dense_backward,
    dense_forward, jpeg_channel, zigzag_ranks,
};
use super::real::Real;
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Named input tensors for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Feeds {
    map: BTreeMap<String, Tensor>,
}

impl Feeds {
    pub fn new() -> Self {
        Feeds::default()
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

pub(super) struct EntryT<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Parameter sets converted to the executor's float type.
pub(super) struct StoreT<T> {
    pub sets: Vec<Vec<EntryT<T>>>,
    pub names: Vec<Vec<String>>,
    lookup: HashMap<String, (usize, usize)>,
}

impl<T: Real> StoreT<T> {
    pub fn build(params: &[&ParamSet]) -> Result<Self> {
        let mut sets = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        let mut lookup = HashMap::new();
        for (si, ps) in params.iter().enumerate() {
            let mut set = Vec::with_capacity(ps.len());
            let mut nm = Vec::with_capacity(ps.len());
            for (ei, e) in ps.entries().iter().enumerate() {
                if lookup.insert(e.name.clone(), (si, ei)).is_some() {
                    return Err(Error::Graph(format!(
                        "parameter `{}` appears in more than one ParamSet",
                        e.name
                    )));
                }
                set.push(EntryT {
                    shape: e.tensor.shape().to_vec(),
                    data: e.tensor.data().iter().map(|&v| T::from_f32(v)).collect(),
                    trainable: e.trainable,
                });
                nm.push(e.name.clone());
            }
            sets.push(set);
            names.push(nm);
        }
        Ok(StoreT {
            sets,
            names,
            lookup,
        })
    }

    pub fn find(&self, pname: &str) -> Option<(usize, usize)> {
        self.lookup.get(pname).copied()
    }

    /// Zero gradient buffers mirroring every entry.
    pub fn zero_grads(&self) -> Vec<Vec<Vec<T>>> {
        self.sets
            .iter()
            .map(|set| set.iter().map(|e| vec![T::zero(); e.data.len()]).collect())
            .collect()
    }
}

pub(super) struct Val<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn dims2(shape: &[usize], node: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(node, format!("expected rank 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

fn dims4(shape: &[usize], node: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(node, format!("expected rank 4 NCHW, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn same_shape(a: &[usize], b: &[usize], node: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(node, format!("operands differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn per_image_len(n: usize, got: usize, node: &str) -> Result<()> {
    if n != got {
        return Err(Error::shape(
            node,
            format!("per-image parameter count {got} does not match batch {n}"),
        ));
    }
    Ok(())
}

fn stable_sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Run the forward pass, returning a value per node.
pub(super) fn forward_pass<T: Real>(
    graph: &Graph,
    feeds: &Feeds,
    store: &StoreT<T>,
) -> Result<Vec<Val<T>>> {
    let mut vals: Vec<Val<T>> = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let name = node.name.as_str();
        let val = match &node.op {
            Op::Input => {
                let t = feeds.get(name).ok_or_else(|| {
                    Error::Graph(format!("missing feed for input node `{name}`"))
                })?;
                Val {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| T::from_f32(v)).collect(),
                }
            }
            Op::Param { pname } => {
                let (si, ei) = store.find(pname).ok_or_else(|| {
                    Error::Graph(format!("parameter `{pname}` not found for node `{name}`"))
                })?;
                let e = &store.sets[si][ei];
                Val {
                    shape: e.shape.clone(),
                    data: e.data.clone(),
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv, bv) = (&vals[x.0], &vals[w.0], &vals[b.0]);
                let (n, i_dim) = dims2(&xv.shape, name)?;
                let (wi, wo) = dims2(&wv.shape, name)?;
                if wi != i_dim {
                    return Err(Error::shape(
                        name,
                        format!("dense input width {i_dim} vs weight rows {wi}"),
                    ));
                }
                if bv.shape != [wo] {
                    return Err(Error::shape(
                        name,
                        format!("dense bias shape {:?}, expected [{wo}]", bv.shape),
                    ));
                }
                let mut out = vec![T::zero(); n * wo];
                dense_forward(&xv.data, &wv.data, &bv.data, n, i_dim, wo, &mut out);
                Val {
                    shape: vec![n, wo],
                    data: out,
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv, bv) = (&vals[x.0], &vals[w.0], &vals[b.0]);
                let (n, c, h, wdt) = dims4(&xv.shape, name)?;
                if wv.shape.len() != 4 || wv.shape[1] != c {
                    return Err(Error::shape(
                        name,
                        format!("conv weight {:?} does not match input channels {c}", wv.shape),
                    ));
                }
                let (co, kh, kw) = (wv.shape[0], wv.shape[2], wv.shape[3]);
                if bv.shape != [co] {
                    return Err(Error::shape(
                        name,
                        format!("conv bias shape {:?}, expected [{co}]", bv.shape),
                    ));
                }
                let oh = conv_out_dim(h, kh, *stride, *pad)
                    .ok_or_else(|| Error::shape(name, "kernel larger than padded input"))?;
                let ow = conv_out_dim(wdt, kw, *stride, *pad)
                    .ok_or_else(|| Error::shape(name, "kernel larger than padded input"))?;
                let mut out = vec![T::zero(); n * co * oh * ow];
                conv2d_forward(
                    &xv.data, &wv.data, &bv.data, n, c, h, wdt, co, kh, kw, *stride, *pad, oh,
                    ow, &mut out,
                );
                Val {
                    shape: vec![n, co, oh, ow],
                    data: out,
                }
            }
            Op::UpsampleNearest2 { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let (oh, ow) = (h * 2, w * 2);
                let mut out = vec![T::zero(); n * c * oh * ow];
                for plane in 0..n * c {
                    let src = &xv.data[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                    for y in 0..oh {
                        for xcol in 0..ow {
                            dst[y * ow + xcol] = src[(y / 2) * w + xcol / 2];
                        }
                    }
                }
                Val {
                    shape: vec![n, c, oh, ow],
                    data: out,
                }
            }
            Op::AvgPool2 { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(
                        name,
                        format!("avgpool2 requires even spatial dims, got {h}x{w}"),
                    ));
                }
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut out = vec![T::zero(); n * c * oh * ow];
                for plane in 0..n * c {
                    let src = &xv.data[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                    for y in 0..oh {
                        for xcol in 0..ow {
                            let base = 2 * y * w + 2 * xcol;
                            dst[y * ow + xcol] =
                                (src[base] + src[base + 1] + src[base + w] + src[base + w + 1])
                                    * quarter;
                        }
                    }
                }
                Val {
                    shape: vec![n, c, oh, ow],
                    data: out,
                }
            }
            Op::Add { a, b } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                same_shape(&av.shape, &bv.shape, name)?;
                Val {
                    shape: av.shape.clone(),
                    data: av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(&x, &y)| x + y)
                        .collect(),
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                same_shape(&av.shape, &bv.shape, name)?;
                Val {
                    shape: av.shape.clone(),
                    data: av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(&x, &y)| x * y)
                        .collect(),
                }
            }
            Op::Concat { parts, axis } => {
                if parts.is_empty() {
                    return Err(Error::Graph(format!("concat `{name}` has no inputs")));
                }
                let first = &vals[parts[0].0].shape;
                if *axis >= first.len() {
                    return Err(Error::shape(
                        name,
                        format!("concat axis {axis} out of range for {first:?}"),
                    ));
                }
                let mut axis_total = 0usize;
                for p in parts {
                    let s = &vals[p.0].shape;
                    if s.len() != first.len() {
                        return Err(Error::shape(name, "concat rank mismatch"));
                    }
                    for (d, (&a0, &a1)) in first.iter().zip(s.iter()).enumerate() {
                        if d != *axis && a0 != a1 {
                            return Err(Error::shape(
                                name,
                                format!("concat dim {d} mismatch: {a0} vs {a1}"),
                            ));
                        }
                    }
                    axis_total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = axis_total;
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let mut out = vec![T::zero(); outer * axis_total * inner];
                let row = axis_total * inner;
                let mut off = 0usize;
                for p in parts {
                    let pv = &vals[p.0];
                    let pa = pv.shape[*axis];
                    for o in 0..outer {
                        let src = &pv.data[o * pa * inner..(o + 1) * pa * inner];
                        let dst = &mut out[o * row + off..o * row + off + pa * inner];
                        dst.copy_from_slice(src);
                    }
                    off += pa * inner;
                }
                Val { shape, data: out }
            }
            Op::Relu { x } => {
                let xv = &vals[x.0];
                Val {
                    shape: xv.shape.clone(),
                    data: xv
                        .data
                        .iter()
                        .map(|&v| if v > T::zero() { v } else { T::zero() })
                        .collect(),
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &vals[x.0];
                let s = T::from_f32(*slope);
                Val {
                    shape: xv.shape.clone(),
                    data: xv
                        .data
                        .iter()
                        .map(|&v| if v > T::zero() { v } else { v * s })
                        .collect(),
                }
            }
            Op::Tanh { x } => {
                let xv = &vals[x.0];
                Val {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&v| v.tanh()).collect(),
                }
            }
            Op::Sigmoid { x } => {
                let xv = &vals[x.0];
                Val {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&v| stable_sigmoid(v)).collect(),
                }
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let (xv, gv, bv) = (&vals[x.0], &vals[gamma.0], &vals[beta.0]);
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                if gv.shape != [c] || bv.shape != [c] {
                    return Err(Error::shape(
                        name,
                        format!("instance norm scale/shift must be [{c}]"),
                    ));
                }
                let m = h * w;
                let inv_m = T::one() / T::from_usize(m);
                let epsv = T::from_f32(*eps);
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * m;
                        let src = &xv.data[base..base + m];
                        let mut mean = T::zero();
                        for &v in src {
                            mean += v;
                        }
                        mean *= inv_m;
                        let mut var = T::zero();
                        for &v in src {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_m;
                        let inv_std = T::one() / (var + epsv).sqrt();
                        let (g, b) = (gv.data[ch], bv.data[ch]);
                        let dst = &mut out[base..base + m];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = (v - mean) * inv_std * g + b;
                        }
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
            Op::Flatten { x } => {
                let xv = &vals[x.0];
                if xv.shape.is_empty() {
                    return Err(Error::shape(name, "flatten needs rank >= 1"));
                }
                let n = xv.shape[0];
                let rest: usize = xv.shape[1..].iter().product();
                Val {
                    shape: vec![n, rest],
                    data: xv.data.clone(),
                }
            }
            Op::ReshapeRows { x, row_shape } => {
                let xv = &vals[x.0];
                if xv.shape.is_empty() {
                    return Err(Error::shape(name, "reshape needs rank >= 1"));
                }
                let n = xv.shape[0];
                let rest: usize = xv.shape[1..].iter().product();
                let want: usize = row_shape.iter().product();
                if rest != want {
                    return Err(Error::shape(
                        name,
                        format!("cannot reshape rows of {rest} elements to {row_shape:?}"),
                    ));
                }
                let mut shape = vec![n];
                shape.extend_from_slice(row_shape);
                Val {
                    shape,
                    data: xv.data.clone(),
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let inv = T::one() / T::from_usize(h * w);
                let mut out = vec![T::zero(); n * c];
                for plane in 0..n * c {
                    let src = &xv.data[plane * h * w..(plane + 1) * h * w];
                    let mut acc = T::zero();
                    for &v in src {
                        acc += v;
                    }
                    out[plane] = acc * inv;
                }
                Val {
                    shape: vec![n, c],
                    data: out,
                }
            }
            Op::Scale { x, c } => {
                let xv = &vals[x.0];
                let cv = T::from_f32(*c);
                Val {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&v| v * cv).collect(),
                }
            }
            Op::AffineScalar { x, mul, add } => {
                let xv = &vals[x.0];
                let (m, a) = (T::from_f32(*mul), T::from_f32(*add));
                Val {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().map(|&v| v * m + a).collect(),
                }
            }
            Op::MeanAll { x } => {
                let xv = &vals[x.0];
                if xv.data.is_empty() {
                    return Err(Error::shape(name, "mean of empty tensor"));
                }
                let mut acc = T::zero();
                for &v in &xv.data {
                    acc += v;
                }
                Val {
                    shape: vec![1],
                    data: vec![acc / T::from_usize(xv.data.len())],
                }
            }
            Op::LogClamped { x, eps } => {
                let xv = &vals[x.0];
                let e = T::from_f32(*eps);
                Val {
                    shape: xv.shape.clone(),
                    data: xv
                        .data
                        .iter()
                        .map(|&v| if v > e { v.ln() } else { e.ln() })
                        .collect(),
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                same_shape(&av.shape, &bv.shape, name)?;
                if av.data.is_empty() {
                    return Err(Error::shape(name, "mse of empty tensors"));
                }
                let mut acc = T::zero();
                for (&x, &y) in av.data.iter().zip(&bv.data) {
                    let d = x - y;
                    acc += d * d;
                }
                Val {
                    shape: vec![1],
                    data: vec![acc / T::from_usize(av.data.len())],
                }
            }
            Op::BceFromLogits { logits, targets } => {
                let (zv, tv) = (&vals[logits.0], &vals[targets.0]);
                same_shape(&zv.shape, &tv.shape, name)?;
                if zv.data.is_empty() {
                    return Err(Error::shape(name, "bce of empty tensors"));
                }
                let mut acc = T::zero();
                for (&z, &t) in zv.data.iter().zip(&tv.data) {
                    let pos = if z > T::zero() { z } else { T::zero() };
                    acc += pos - z * t + (-z.abs()).exp().ln_1p();
                }
                Val {
                    shape: vec![1],
                    data: vec![acc / T::from_usize(zv.data.len())],
                }
            }
            Op::Clamp01 { x } => {
                let xv = &vals[x.0];
                Val {
                    shape: xv.shape.clone(),
                    data: xv
                        .data
                        .iter()
                        .map(|&v| v.max(T::zero()).min(T::one()))
                        .collect(),
                }
            }
            Op::BlurPerImage { x, kernels } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                per_image_len(n, kernels.len(), name)?;
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let k = &kernels[img];
                    let kt: Vec<T> = k.weights.iter().map(|&v| T::from_f32(v)).collect();
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        blur_channel(
                            &xv.data[base..base + h * w],
                            h,
                            w,
                            &kt,
                            k.size,
                            &mut out[base..base + h * w],
                        );
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
            Op::DiffJpeg { x, keep } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                per_image_len(n, keep.len(), name)?;
                let basis = dct8_basis::<T>();
                let ranks = zigzag_ranks();
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let k = keep[img].clamp(1, 64);
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        if k == 64 {
                            out[base..base + h * w].copy_from_slice(&xv.data[base..base + h * w]);
                        } else {
                            jpeg_channel(
                                &xv.data[base..base + h * w],
                                h,
                                w,
                                k,
                                &basis,
                                &ranks,
                                &mut out[base..base + h * w],
                            );
                        }
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
            Op::Brightness { x, factors } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                per_image_len(n, factors.len(), name)?;
                let m = c * h * w;
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let f = T::from_f32(factors[img]);
                    for j in 0..m {
                        out[img * m + j] = xv.data[img * m + j] * f;
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
            Op::Contrast { x, factors } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                per_image_len(n, factors.len(), name)?;
                let m = c * h * w;
                let inv_m = T::one() / T::from_usize(m);
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let f = T::from_f32(factors[img]);
                    let src = &xv.data[img * m..(img + 1) * m];
                    let mut mean = T::zero();
                    for &v in src {
                        mean += v;
                    }
                    mean *= inv_m;
                    let dst = &mut out[img * m..(img + 1) * m];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = (v - mean) * f + mean;
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
            Op::Saturation { x, factors } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                per_image_len(n, factors.len(), name)?;
                let hw = h * w;
                let inv_c = T::one() / T::from_usize(c);
                let mut out = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let f = T::from_f32(factors[img]);
                    for p in 0..hw {
                        let mut gray = T::zero();
                        for ch in 0..c {
                            gray += xv.data[(img * c + ch) * hw + p];
                        }
                        gray *= inv_c;
                        for ch in 0..c {
                            let idx = (img * c + ch) * hw + p;
                            out[idx] = (xv.data[idx] - gray) * f + gray;
                        }
                    }
                }
                Val {
                    shape: xv.shape.clone(),
                    data: out,
                }
            }
        };
        vals.push(val);
    }
    Ok(vals)
}

fn acc_slot<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, values: &[T]) {
    let dst = acc_slot(slot, values.len());
    for (d, &v) in dst.iter_mut().zip(values) {
        *d += v;
    }
}

/// Reverse sweep from a scalar loss node. Returns per-set, per-entry
/// parameter gradients (zeros for untouched or non-trainable entries).
pub(super) fn backward_pass<T: Real>(
    graph: &Graph,
    vals: &[Val<T>],
    loss: NodeId,
    store: &StoreT<T>,
) -> Result<Vec<Vec<Vec<T>>>> {
    let loss_val = &vals[loss.0];
    if loss_val.data.len() != 1 {
        return Err(Error::InvalidArg(format!(
            "loss node `{}` is not scalar (shape {:?})",
            graph.name_of(loss),
            loss_val.shape
        )));
    }
    let mut node_grads: Vec<Option<Vec<T>>> = (0..graph.len()).map(|_| None).collect();
    node_grads[loss.0] = Some(vec![T::one()]);
    let mut param_grads = store.zero_grads();

    for idx in (0..=loss.0).rev() {
        let Some(g) = node_grads[idx].take() else {
            continue;
        };
        let node = &graph.nodes()[idx];
        let name = node.name.as_str();
        match &node.op {
            Op::Input => {}
            Op::Param { pname } => {
                if let Some((si, ei)) = store.find(pname) {
                    if store.sets[si][ei].trainable {
                        for (d, &v) in param_grads[si][ei].iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (n, i_dim) = dims2(&xv.shape, name)?;
                let o_dim = wv.shape[1];
                let mut dx = vec![T::zero(); xv.data.len()];
                let mut dw = vec![T::zero(); wv.data.len()];
                let mut db = vec![T::zero(); o_dim];
                dense_backward(
                    &xv.data, &wv.data, &g, n, i_dim, o_dim, &mut dx, &mut dw, &mut db,
                );
                add_into(&mut node_grads[x.0], &dx);
                add_into(&mut node_grads[w.0], &dw);
                add_into(&mut node_grads[b.0], &db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (n, c, h, wdt) = dims4(&xv.shape, name)?;
                let (co, kh, kw) = (wv.shape[0], wv.shape[2], wv.shape[3]);
                let out_shape = &vals[idx].shape;
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let mut dx = vec![T::zero(); xv.data.len()];
                let mut dw = vec![T::zero(); wv.data.len()];
                let mut db = vec![T::zero(); co];
                conv2d_backward(
                    &xv.data, &wv.data, &g, n, c, h, wdt, co, kh, kw, *stride, *pad, oh, ow,
                    &mut dx, &mut dw, &mut db,
                );
                add_into(&mut node_grads[x.0], &dx);
                add_into(&mut node_grads[w.0], &dw);
                add_into(&mut node_grads[b.0], &db);
            }
            Op::UpsampleNearest2 { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let (oh, ow) = (h * 2, w * 2);
                let dx = acc_slot(&mut node_grads[x.0], xv.data.len());
                for plane in 0..n * c {
                    let gsrc = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xcol in 0..ow {
                            dst[(y / 2) * w + xcol / 2] += gsrc[y * ow + xcol];
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let dx = acc_slot(&mut node_grads[x.0], xv.data.len());
                for plane in 0..n * c {
                    let gsrc = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xcol in 0..ow {
                            let gv = gsrc[y * ow + xcol] * quarter;
                            let base = 2 * y * w + 2 * xcol;
                            dst[base] += gv;
                            dst[base + 1] += gv;
                            dst[base + w] += gv;
                            dst[base + w + 1] += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(&mut node_grads[a.0], &g);
                add_into(&mut node_grads[b.0], &g);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(&vals[b.0].data)
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(&vals[a.0].data)
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                add_into(&mut node_grads[a.0], &da);
                add_into(&mut node_grads[b.0], &db);
            }
            Op::Concat { parts, axis } => {
                let out_shape = &vals[idx].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut off = 0usize;
                for p in parts {
                    let pv = &vals[p.0];
                    let pa = pv.shape[*axis];
                    let mut dpart = vec![T::zero(); pv.data.len()];
                    for o in 0..outer {
                        let src = &g[o * row + off..o * row + off + pa * inner];
                        dpart[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(src);
                    }
                    add_into(&mut node_grads[p.0], &dpart);
                    off += pa * inner;
                }
            }
            Op::Relu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[x.0].data)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f32(*slope);
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[x.0].data)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Tanh { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[idx].data)
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[idx].data)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let (xv, gv_) = (&vals[x.0], &vals[gamma.0]);
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let m = h * w;
                let inv_m = T::one() / T::from_usize(m);
                let epsv = T::from_f32(*eps);
                let mut dx = vec![T::zero(); xv.data.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * m;
                        let src = &xv.data[base..base + m];
                        let gsl = &g[base..base + m];
                        let mut mean = T::zero();
                        for &v in src {
                            mean += v;
                        }
                        mean *= inv_m;
                        let mut var = T::zero();
                        for &v in src {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_m;
                        let inv_std = T::one() / (var + epsv).sqrt();
                        let gam = gv_.data[ch];
                        // dy/dxhat = gamma; standard normalization backward
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for (j, &gvv) in gsl.iter().enumerate() {
                            let xh = (src[j] - mean) * inv_std;
                            let dxh = gvv * gam;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma[ch] += gvv * xh;
                            dbeta[ch] += gvv;
                        }
                        let mean_dxh = sum_dxh * inv_m;
                        let mean_dxh_xh = sum_dxh_xh * inv_m;
                        for (j, &gvv) in gsl.iter().enumerate() {
                            let xh = (src[j] - mean) * inv_std;
                            let dxh = gvv * gam;
                            dx[base + j] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
                add_into(&mut node_grads[gamma.0], &dgamma);
                add_into(&mut node_grads[beta.0], &dbeta);
            }
            Op::Flatten { x } | Op::ReshapeRows { x, .. } => {
                add_into(&mut node_grads[x.0], &g);
            }
            Op::GlobalAvgPool { x } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let inv = T::one() / T::from_usize(h * w);
                let dx = acc_slot(&mut node_grads[x.0], xv.data.len());
                for plane in 0..n * c {
                    let gv = g[plane] * inv;
                    for v in &mut dx[plane * h * w..(plane + 1) * h * w] {
                        *v += gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                let cv = T::from_f32(*c);
                let dx: Vec<T> = g.iter().map(|&gv| gv * cv).collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::AffineScalar { x, mul, .. } => {
                let m = T::from_f32(*mul);
                let dx: Vec<T> = g.iter().map(|&gv| gv * m).collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::MeanAll { x } => {
                let xv = &vals[x.0];
                let gv = g[0] / T::from_usize(xv.data.len());
                let dx = acc_slot(&mut node_grads[x.0], xv.data.len());
                for v in dx.iter_mut() {
                    *v += gv;
                }
            }
            Op::LogClamped { x, eps } => {
                let e = T::from_f32(*eps);
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[x.0].data)
                    .map(|(&gv, &xv)| if xv > e { gv / xv } else { T::zero() })
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let scale = g[0] * T::from_f64(2.0) / T::from_usize(av.data.len());
                let da: Vec<T> = av
                    .data
                    .iter()
                    .zip(&bv.data)
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                add_into(&mut node_grads[a.0], &da);
                add_into(&mut node_grads[b.0], &db);
            }
            Op::BceFromLogits { logits, targets } => {
                let (zv, tv) = (&vals[logits.0], &vals[targets.0]);
                let scale = g[0] / T::from_usize(zv.data.len());
                let dz: Vec<T> = zv
                    .data
                    .iter()
                    .zip(&tv.data)
                    .map(|(&z, &t)| (stable_sigmoid(z) - t) * scale)
                    .collect();
                let dt: Vec<T> = zv.data.iter().map(|&z| -z * scale).collect();
                add_into(&mut node_grads[logits.0], &dz);
                add_into(&mut node_grads[targets.0], &dt);
            }
            Op::Clamp01 { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&vals[x.0].data)
                    .map(|(&gv, &xv)| {
                        if xv >= T::zero() && xv <= T::one() {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::BlurPerImage { x, kernels } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let mut dx = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let k = &kernels[img];
                    // adjoint of zero-padded correlation = correlation with the
                    // spatially flipped kernel
                    let flipped: Vec<T> = k
                        .weights
                        .iter()
                        .rev()
                        .map(|&v| T::from_f32(v))
                        .collect();
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        blur_channel(
                            &g[base..base + h * w],
                            h,
                            w,
                            &flipped,
                            k.size,
                            &mut dx[base..base + h * w],
                        );
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::DiffJpeg { x, keep } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let basis = dct8_basis::<T>();
                let ranks = zigzag_ranks();
                let mut dx = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let k = keep[img].clamp(1, 64);
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        if k == 64 {
                            dx[base..base + h * w].copy_from_slice(&g[base..base + h * w]);
                        } else {
                            // the masked block transform is self-adjoint
                            jpeg_channel(
                                &g[base..base + h * w],
                                h,
                                w,
                                k,
                                &basis,
                                &ranks,
                                &mut dx[base..base + h * w],
                            );
                        }
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Brightness { x, factors } => {
                let xv = &vals[x.0];
                let m = xv.data.len() / factors.len();
                let mut dx = vec![T::zero(); xv.data.len()];
                for (img, &f) in factors.iter().enumerate() {
                    let fv = T::from_f32(f);
                    for j in 0..m {
                        dx[img * m + j] = g[img * m + j] * fv;
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Contrast { x, factors } => {
                let xv = &vals[x.0];
                let m = xv.data.len() / factors.len();
                let inv_m = T::one() / T::from_usize(m);
                let mut dx = vec![T::zero(); xv.data.len()];
                for (img, &f) in factors.iter().enumerate() {
                    let fv = T::from_f32(f);
                    let gsl = &g[img * m..(img + 1) * m];
                    let mut gsum = T::zero();
                    for &gv in gsl {
                        gsum += gv;
                    }
                    let shared = (T::one() - fv) * gsum * inv_m;
                    for (j, &gv) in gsl.iter().enumerate() {
                        dx[img * m + j] = gv * fv + shared;
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
            }
            Op::Saturation { x, factors } => {
                let xv = &vals[x.0];
                let (n, c, h, w) = dims4(&xv.shape, name)?;
                let hw = h * w;
                let inv_c = T::one() / T::from_usize(c);
                let mut dx = vec![T::zero(); xv.data.len()];
                for img in 0..n {
                    let fv = T::from_f32(factors[img]);
                    for p in 0..hw {
                        let mut gsum = T::zero();
                        for ch in 0..c {
                            gsum += g[(img * c + ch) * hw + p];
                        }
                        let shared = (T::one() - fv) * gsum * inv_c;
                        for ch in 0..c {
                            let idx2 = (img * c + ch) * hw + p;
                            dx[idx2] = g[idx2] * fv + shared;
                        }
                    }
                }
                add_into(&mut node_grads[x.0], &dx);
            }
        }
    }
    Ok(param_grads)
}

/// Evaluate `outputs` of a graph. Deterministic given graph, feeds, params.
pub fn eval(
    graph: &Graph,
    feeds: &Feeds,
    params: &[&ParamSet],
    outputs: &[NodeId],
) -> Result<Vec<Tensor>> {
    let store = StoreT::<f32>::build(params)?;
    let vals = forward_pass(graph, feeds, &store)?;
    outputs
        .iter()
        .map(|id| {
            let v = &vals[id.0];
            Tensor::new(v.shape.clone(), v.data.clone())
        })
        .collect()
}

/// Evaluate named nodes into a `name -> Tensor` map.
pub fn eval_named(
    graph: &Graph,
    feeds: &Feeds,
    params: &[&ParamSet],
    names: &[&str],
) -> Result<BTreeMap<String, Tensor>> {
    let ids: Vec<NodeId> = names
        .iter()
        .map(|n| {
            graph
                .by_name(n)
                .ok_or_else(|| Error::Graph(format!("unknown node `{n}`")))
        })
        .collect::<Result<_>>()?;
    let tensors = eval(graph, feeds, params, &ids)?;
    Ok(names
        .iter()
        .map(|n| n.to_string())
        .zip(tensors)
        .collect())
}

/// Loss value plus parameter gradients, one grad set per input ParamSet.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: f32,
    pub grads: Vec<ParamSet>,
}

/// Forward plus reverse sweep from a scalar loss node.
///
/// Gradient sets mirror the input ParamSets entry-for-entry; non-trainable
/// entries and parameters the loss does not reach get exact zeros.
pub fn backward(
    graph: &Graph,
    loss: NodeId,
    feeds: &Feeds,
    params: &[&ParamSet],
) -> Result<BackwardResult> {
    let store = StoreT::<f32>::build(params)?;
    let vals = forward_pass(graph, feeds, &store)?;
    let grads = backward_pass(graph, &vals, loss, &store)?;
    let loss_value = vals[loss.0].data[0];
    let mut out = Vec::with_capacity(params.len());
    for (si, ps) in params.iter().enumerate() {
        let mut gs = ParamSet::new();
        for (ei, e) in ps.entries().iter().enumerate() {
            let tensor = Tensor::new(e.tensor.shape().to_vec(), grads[si][ei].clone())?;
            gs.insert_with(e.name.clone(), tensor, e.trainable)?;
        }
        out.push(gs);
    }
    Ok(BackwardResult {
        loss: loss_value,
        grads: out,
    })
}
