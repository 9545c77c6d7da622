//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node; node inputs always
//! precede the node itself, so reverse creation order is a valid
//! topological order for the backward sweep.

use std::collections::BTreeMap;

use super::kernels::{self, axis_split, CellBox, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter, rejecting a second tensor under the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::usage(format!("parameter {name:?} registered twice")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::squared_norm).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    SumAxis(NodeId, usize),
    SumAll(NodeId),
    Softmax(NodeId, usize),
    LogSumExp(NodeId, usize),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Concat(Vec<NodeId>, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    RoiPool {
        map: NodeId,
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph built for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Parameters bound into this graph, in binding order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not a named parameter.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the node created the first time.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some((_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let t = store.get(name)?.clone();
        let id = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {} input", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Add(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(Error::shape("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let n = sa[1];
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        out.clear_grad();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| c * v);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Clamps into `[lo, hi]`; clamped elements pass no gradient.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::usage(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Clamp(a, lo, hi), rg))
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::usage(format!(
                "{op}: axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total), Op::SumAll(a), rg))
    }

    /// Softmax along `axis`, stabilized by subtracting each slice maximum.
    pub fn softmax_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax_axis", a, axis)?;
        let v = self.value(a);
        let out = kernels::softmax(v.data(), v.shape(), axis);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    /// `log Σ exp` along `axis`, removing it from the shape.
    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("log_sum_exp", a, axis)?;
        let v = self.value(a);
        let out = kernels::log_sum_exp(v.data(), v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp(a, axis), rg))
    }

    /// 2×2 stride-2 max pooling of a `[C, H, W]` map.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("max_pool2", format!("input {s:?} needs [C, H>=2, W>=2]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, argmax) = kernels::max_pool2(self.value(a).data(), c, h, w);
        let t = Tensor::new(vec![c, h / 2, w / 2], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MaxPool2 { input: a, argmax }, rg))
    }

    /// Convolution of a `[C, H, W]` input with `[O, C, kh, kw]` filters and
    /// an `[O]` bias, zero-padded by `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sb != [sw[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let geom = ConvGeometry {
            in_channels: si[0],
            in_h: si[1],
            in_w: si[2],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::usage(format!(
                "conv2d: kernel {}x{} does not fit input {}x{} with pad {pad}, stride {stride}",
                geom.kernel_h, geom.kernel_w, geom.in_h, geom.in_w
            )));
        }
        let out_ch = sw[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; out_ch * oh * ow];
        kernels::gemm(
            out_ch,
            geom.patch_len(),
            oh * ow,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        for (plane, &b) in out.chunks_mut(oh * ow).zip(self.value(bias).data()) {
            for v in plane {
                *v += b;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let t = Tensor::new(vec![out_ch, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Concatenates tensors that agree on every extent except `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat of an empty list"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        if indices.is_empty() {
            return Err(Error::usage("gather with no indices"));
        }
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::usage(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather(a, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let mut t = self.value(a).clone();
        t.clear_grad();
        let t = t.reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Max pools each cell box of a `[C, H, W]` map to a `grid × grid`
    /// lattice, giving a `[boxes, C·grid·grid]` matrix. Gradients flow to
    /// the first maximal cell of each bin.
    pub fn roi_pool(&mut self, map: NodeId, boxes: &[CellBox], grid: usize) -> Result<NodeId> {
        let s = self.shape(map);
        if s.len() != 3 {
            return Err(Error::shape("roi_pool", format!("map {s:?} is not [C, H, W]")));
        }
        if boxes.is_empty() {
            return Err(Error::usage("roi_pool: empty region list"));
        }
        if grid == 0 {
            return Err(Error::usage("roi_pool: grid must be at least 1x1"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if let Some(b) = boxes
            .iter()
            .find(|b| b.y0 >= b.y1 || b.x0 >= b.x1 || b.y1 > h || b.x1 > w)
        {
            return Err(Error::usage(format!(
                "roi_pool: cell box {b:?} outside {h}x{w} map"
            )));
        }
        let (out, argmax) = kernels::roi_max_pool(self.value(map).data(), c, h, w, boxes, grid);
        let t = Tensor::new(vec![boxes.len(), c * grid * grid], out)?;
        let rg = self.rg(map);
        Ok(self.push(t, Op::RoiPool { map, argmax }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| kernels::gemm(m, n, k, g, false, val(*b), true, ga, true));
                acc(*b, &mut |gb| kernels::gemm(k, m, n, val(*a), true, g, false, gb, true));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = self.shape(*bias)[0];
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += gi / v;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        if v >= lo && v <= hi {
                            *x += gi;
                        }
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for i in 0..len {
                            add_into(&mut ga[(o * len + i) * inner..(o * len + i + 1) * inner], src);
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |i: usize| o * len * inner + i * inner + k;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let lse = node.value.data();
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let r = o * inner + k;
                            for i in 0..len {
                                let at = o * len * inner + i * inner + k;
                                ga[at] += g[r] * (x[at] - lse[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } | Op::RoiPool { map: input, argmax } => {
                acc(*input, &mut |ga| {
                    for (&src, gi) in argmax.iter().zip(g) {
                        ga[src] += gi;
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let out_ch = self.shape(*weight)[0];
                let spatial = geom.out_h() * geom.out_w();
                let patch = geom.patch_len();
                acc(*weight, &mut |gw| {
                    kernels::gemm(out_ch, spatial, patch, g, false, cols, true, gw, true)
                });
                acc(*bias, &mut |gb| {
                    for (b, plane) in gb.iter_mut().zip(g.chunks(spatial)) {
                        *b += plane.iter().sum::<f64>();
                    }
                });
                if self.rg(*input) {
                    let mut dcols = vec![0.0; patch * spatial];
                    kernels::gemm(patch, out_ch, spatial, val(*weight), true, g, false, &mut dcols, false);
                    acc(*input, &mut |gi| kernels::col2im(&dcols, geom, gi));
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather(a, indices) => acc(*a, &mut |ga| {
                for (&i, gi) in indices.iter().zip(g) {
                    ga[i] += gi;
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` when the loss does not
    /// depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("gradient matches node shape"))
    }

    /// Gradient for every parameter in `store`; parameters the loss does not
    /// reach (or that were never bound) get zeros.
    pub fn for_params(&self, store: &ParamStore) -> ParamStore {
        store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .params
                    .iter()
                    .find(|(n, _)| n == name)
                    .and_then(|(_, id)| self.grads[id.0].clone())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                let grad = Tensor::new(t.shape().to_vec(), g).expect("gradient matches parameter shape");
                (name.to_string(), grad)
            })
            .collect()
    }

    /// Writes each parameter's gradient into its tensor's `grad` field.
    pub fn populate(&self, store: &mut ParamStore) {
        let grads = self.for_params(store);
        for (name, t) in store.iter_mut() {
            let g = grads.get(name).expect("same key set").data().to_vec();
            t.set_grad(g).expect("same length");
        }
    }
}
