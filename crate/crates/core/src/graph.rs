//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations in topological order as they are built.
//! Forward values are computed eagerly; [`Graph::backward`] walks the tape in
//! reverse and produces the gradient of a scalar output with respect to every
//! node. Leaves tagged with a parameter name feed gradients back into a
//! [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Guard used wherever a distance appears in a denominator.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Conv3d,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    MeanAxis(usize),
    GlobalAvgPool,
    L2Normalize,
    Softmax,
    Log,
    Exp,
    Sigmoid,
    EuclideanDistance,
    Concat,
    Reshape,
    /// Elementwise 1/max(x, eps).
    RecipGuard(f64),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Leaf whose gradient is routed back to the named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        let id = self.push(Op::Leaf, vec![], value);
        self.nodes[id].param = Some(name.to_string());
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, "mul", a, b)
    }

    fn binary_same_shape(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn scalar_mul(&mut self, c: f64, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let data = v.data().iter().map(|t| c * t).collect();
        let value = Tensor::from_vec(v.shape().to_vec(), data).unwrap();
        self.push(Op::ScalarMul(c), vec![x], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn recip_guard(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.unary(Op::RecipGuard(eps), x, |v| 1.0 / v.max(eps))
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[x].value;
        let data = v.data().iter().map(|&t| f(t)).collect();
        let value = Tensor::from_vec(v.shape().to_vec(), data).unwrap();
        self.push(op, vec![x], value)
    }

    /// Mean over one axis; the axis is removed from the shape (a scalar
    /// result keeps shape `[1]`).
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if axis >= v.rank() {
            return Err(shape_err(
                "mean-over-axis",
                format!("axis {} out of range for shape {:?}", axis, v.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * len + a) * inner + i];
                }
            }
        }
        for t in out.iter_mut() {
            *t /= len as f64;
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(Op::MeanAxis(axis), vec![x], value))
    }

    /// [C,T,H,W] -> [C], mean over all spatio-temporal positions.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.rank() != 4 {
            return Err(shape_err(
                "global-average-pool",
                format!("expected rank-4 input, got {:?}", v.shape()),
            ));
        }
        let c = v.shape()[0];
        let vol = v.numel() / c;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let s: f64 = v.data()[ch * vol..(ch + 1) * vol].iter().sum();
            out[ch] = s / vol as f64;
        }
        let value = Tensor::vector(out);
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.rank() != 1 {
            return Err(shape_err(
                "l2-normalize",
                format!("expected vector, got {:?}", v.shape()),
            ));
        }
        let norm = v.l2_norm();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        let data = v.data().iter().map(|t| t / norm).collect();
        let value = Tensor::vector(data);
        Ok(self.push(Op::L2Normalize, vec![x], value))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.rank() != 1 {
            return Err(shape_err(
                "softmax",
                format!("expected vector, got {:?}", v.shape()),
            ));
        }
        let value = Tensor::vector(softmax(v.data()));
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    pub fn euclidean_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.rank() != 1 || va.shape() != vb.shape() {
            return Err(shape_err(
                "euclidean-distance",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let d = crate::tensor::euclidean(va.data(), vb.data());
        Ok(self.push(Op::EuclideanDistance, vec![a, b], Tensor::scalar(d)))
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.rank() != 1 {
                return Err(shape_err(
                    "concat",
                    format!("expected vector, got {:?}", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Op::Concat, parts.to_vec(), Tensor::vector(data)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", v.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Matrix product: [m,k]x[k,n] -> [m,n], or [m,k]x[k] -> [m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = matmul(va, vb)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// 3-D convolution, stride 1, zero padding (k-1)/2 per spatial axis.
    /// Inputs: x [Cin,T,H,W], kernel [Cout,Cin,kt,kh,kw] (odd sizes), bias [Cout].
    pub fn conv3d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vk, vb) = (
            &self.nodes[x].value,
            &self.nodes[kernel].value,
            &self.nodes[bias].value,
        );
        let value = conv3d_forward(vx, vk, vb)?;
        Ok(self.push(Op::Conv3d, vec![x, kernel, bias], value))
    }

    /// Gradient of a scalar output with respect to every node.
    pub fn backward(&self, out: NodeId) -> Result<Vec<Tensor>> {
        let ov = &self.nodes[out].value;
        if ov.numel() != 1 {
            return Err(Error::NonScalarOutput(ov.shape().to_vec()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[out].data_mut()[0] = 1.0;
        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[id].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            self.backprop_node(id, node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn backprop_node(&self, id: NodeId, node: &Node, g: &Tensor, grads: &mut [Tensor]) {
        let inp = |i: usize| &self.nodes[node.inputs[i]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                axpy(grads[node.inputs[0]].data_mut(), 1.0, g.data());
                axpy(grads[node.inputs[1]].data_mut(), 1.0, g.data());
            }
            Op::Sub => {
                axpy(grads[node.inputs[0]].data_mut(), 1.0, g.data());
                axpy(grads[node.inputs[1]].data_mut(), -1.0, g.data());
            }
            Op::Mul => {
                let (a, b) = (inp(0).data().to_vec(), inp(1).data().to_vec());
                for (i, gv) in g.data().iter().enumerate() {
                    grads[node.inputs[0]].data_mut()[i] += gv * b[i];
                    grads[node.inputs[1]].data_mut()[i] += gv * a[i];
                }
            }
            Op::ScalarMul(c) => axpy(grads[node.inputs[0]].data_mut(), *c, g.data()),
            Op::Relu => {
                let x = inp(0).data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    if x[i] > 0.0 {
                        grads[node.inputs[0]].data_mut()[i] += gv;
                    }
                }
            }
            Op::Log => {
                let x = inp(0).data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    grads[node.inputs[0]].data_mut()[i] += gv / x[i];
                }
            }
            Op::Exp => {
                let y = node.value.data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    grads[node.inputs[0]].data_mut()[i] += gv * y[i];
                }
            }
            Op::Sigmoid => {
                let y = node.value.data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    grads[node.inputs[0]].data_mut()[i] += gv * y[i] * (1.0 - y[i]);
                }
            }
            Op::RecipGuard(eps) => {
                let x = inp(0).data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    if x[i] > *eps {
                        grads[node.inputs[0]].data_mut()[i] -= gv / (x[i] * x[i]);
                    }
                }
            }
            Op::MeanAxis(axis) => {
                let shape = inp(0).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let gx = grads[node.inputs[0]].data_mut();
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gx[(o * len + a) * inner + i] += g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
            }
            Op::GlobalAvgPool => {
                let shape = inp(0).shape().to_vec();
                let c = shape[0];
                let vol: usize = shape[1..].iter().product();
                let gx = grads[node.inputs[0]].data_mut();
                for ch in 0..c {
                    let gv = g.data()[ch] / vol as f64;
                    for t in gx[ch * vol..(ch + 1) * vol].iter_mut() {
                        *t += gv;
                    }
                }
            }
            Op::L2Normalize => {
                let x = inp(0);
                let norm = x.l2_norm();
                let y = node.value.data();
                let dot: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let gx = grads[node.inputs[0]].data_mut();
                for i in 0..y.len() {
                    gx[i] += (g.data()[i] - y[i] * dot) / norm;
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let dot: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let gx = grads[node.inputs[0]].data_mut();
                for i in 0..y.len() {
                    gx[i] += y[i] * (g.data()[i] - dot);
                }
            }
            Op::EuclideanDistance => {
                let (a, b) = (inp(0).data().to_vec(), inp(1).data().to_vec());
                let d = node.value.item().max(DIST_EPS);
                let gv = g.item();
                for i in 0..a.len() {
                    let diff = (a[i] - b[i]) / d * gv;
                    grads[node.inputs[0]].data_mut()[i] += diff;
                    grads[node.inputs[1]].data_mut()[i] -= diff;
                }
            }
            Op::Concat => {
                let mut off = 0;
                for &p in &node.inputs {
                    let n = self.nodes[p].value.numel();
                    axpy(grads[p].data_mut(), 1.0, &g.data()[off..off + n]);
                    off += n;
                }
            }
            Op::Reshape => axpy(grads[node.inputs[0]].data_mut(), 1.0, g.data()),
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (ga, gb) = matmul_backward(a, b, g);
                axpy(grads[node.inputs[0]].data_mut(), 1.0, ga.data());
                axpy(grads[node.inputs[1]].data_mut(), 1.0, gb.data());
            }
            Op::Conv3d => {
                let (x, k) = (inp(0), inp(1));
                let (gx, gk, gb) = conv3d_backward(x, k, g);
                axpy(grads[node.inputs[0]].data_mut(), 1.0, gx.data());
                axpy(grads[node.inputs[1]].data_mut(), 1.0, gk.data());
                axpy(grads[node.inputs[2]].data_mut(), 1.0, gb.data());
            }
        }
        let _ = id;
    }

    /// Run backward and accumulate gradients into parameter slots.
    pub fn accumulate_grads(&self, out: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(out)?;
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let Some(name) = &node.param {
                let slot = store.grad_mut(name)?;
                axpy(slot.data_mut(), 1.0, g.data());
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bad = || {
        shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        )
    };
    if a.rank() != 2 {
        return Err(bad());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    match b.rank() {
        1 => {
            if b.shape()[0] != k {
                return Err(bad());
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data()[i * k..(i + 1) * k];
                out[i] = row.iter().zip(b.data()).map(|(x, y)| x * y).sum();
            }
            Ok(Tensor::vector(out))
        }
        2 => {
            if b.shape()[0] != k {
                return Err(bad());
            }
            let n = b.shape()[1];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    for j in 0..n {
                        out[i * n + j] += av * b.data()[p * n + j];
                    }
                }
            }
            Tensor::from_vec(vec![m, n], out)
        }
        _ => Err(bad()),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    if b.rank() == 1 {
        // y = A x: dA = g xT, dx = AT g
        for i in 0..m {
            let gv = g.data()[i];
            for p in 0..k {
                ga.data_mut()[i * k + p] += gv * b.data()[p];
                gb.data_mut()[p] += gv * a.data()[i * k + p];
            }
        }
    } else {
        let n = b.shape()[1];
        for i in 0..m {
            for p in 0..k {
                let mut s = 0.0;
                for j in 0..n {
                    let gv = g.data()[i * n + j];
                    s += gv * b.data()[p * n + j];
                    gb.data_mut()[p * n + j] += gv * a.data()[i * k + p];
                }
                ga.data_mut()[i * k + p] += s;
            }
        }
    }
    (ga, gb)
}

struct ConvDims {
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    cout: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<ConvDims> {
    let bad = |detail: String| shape_err("conv3d", detail);
    if x.rank() != 4 || k.rank() != 5 || b.rank() != 1 {
        return Err(bad(format!(
            "x {:?}, kernel {:?}, bias {:?}",
            x.shape(),
            k.shape(),
            b.shape()
        )));
    }
    let d = ConvDims {
        cin: x.shape()[0],
        t: x.shape()[1],
        h: x.shape()[2],
        w: x.shape()[3],
        cout: k.shape()[0],
        kt: k.shape()[2],
        kh: k.shape()[3],
        kw: k.shape()[4],
    };
    if k.shape()[1] != d.cin || b.shape()[0] != d.cout {
        return Err(bad(format!(
            "channel mismatch: x {:?}, kernel {:?}, bias {:?}",
            x.shape(),
            k.shape(),
            b.shape()
        )));
    }
    if d.kt % 2 == 0 || d.kh % 2 == 0 || d.kw % 2 == 0 {
        return Err(bad(format!("kernel sizes must be odd, got {:?}", k.shape())));
    }
    Ok(d)
}

fn conv3d_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x, k, b)?;
    let (pt, ph, pw) = (d.kt / 2, d.kh / 2, d.kw / 2);
    let vol = d.t * d.h * d.w;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.cout * vol];
    for co in 0..d.cout {
        let ob = co * vol;
        out[ob..ob + vol].fill(b.data()[co]);
        for ci in 0..d.cin {
            let xb = ci * vol;
            for dt in 0..d.kt {
                for dh in 0..d.kh {
                    for dw in 0..d.kw {
                        let kv =
                            k.data()[(((co * d.cin + ci) * d.kt + dt) * d.kh + dh) * d.kw + dw];
                        if kv == 0.0 {
                            continue;
                        }
                        let (t0, t1) = valid_range(d.t, dt, pt);
                        let (h0, h1) = valid_range(d.h, dh, ph);
                        let (w0, w1) = valid_range(d.w, dw, pw);
                        for t in t0..t1 {
                            let ti = t + dt - pt;
                            for h in h0..h1 {
                                let hi = h + dh - ph;
                                let orow = ob + t * plane + h * d.w;
                                // valid_range guarantees w0 + dw >= pw
                                let x0 = xb + ti * plane + hi * d.w + (w0 + dw - pw);
                                let src = &x.data()[x0..x0 + (w1 - w0)];
                                let dst = &mut out[orow + w0..orow + w1];
                                for (o, xv) in dst.iter_mut().zip(src) {
                                    *o += kv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![d.cout, d.t, d.h, d.w], out)
}

/// Output positions p such that p + dk - pad lands inside [0, size).
fn valid_range(size: usize, dk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(dk);
    let hi = (size + pad).saturating_sub(dk).min(size);
    (lo, hi)
}

fn conv3d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let cin = x.shape()[0];
    let (t_dim, h_dim, w_dim) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = k.shape()[0];
    let (kt, kh, kw) = (k.shape()[2], k.shape()[3], k.shape()[4]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let vol = t_dim * h_dim * w_dim;
    let plane = h_dim * w_dim;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let ob = co * vol;
        gb.data_mut()[co] += g.data()[ob..ob + vol].iter().sum::<f64>();
        for ci in 0..cin {
            let xb = ci * vol;
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let kidx = (((co * cin + ci) * kt + dt) * kh + dh) * kw + dw;
                        let kv = k.data()[kidx];
                        let mut dk_acc = 0.0;
                        let (t0, t1) = valid_range(t_dim, dt, pt);
                        let (h0, h1) = valid_range(h_dim, dh, ph);
                        let (w0, w1) = valid_range(w_dim, dw, pw);
                        for t in t0..t1 {
                            let ti = t + dt - pt;
                            for h in h0..h1 {
                                let hi = h + dh - ph;
                                let orow = ob + t * plane + h * w_dim;
                                // valid_range guarantees w0 + dw >= pw
                                let x0 = xb + ti * plane + hi * w_dim + (w0 + dw - pw);
                                let gr = &g.data()[orow + w0..orow + w1];
                                let xr = &x.data()[x0..x0 + (w1 - w0)];
                                for (gv, xv) in gr.iter().zip(xr) {
                                    dk_acc += gv * xv;
                                }
                                let gxr = &mut gx.data_mut()[x0..x0 + (w1 - w0)];
                                for (gxv, gv) in gxr.iter_mut().zip(gr) {
                                    *gxv += gv * kv;
                                }
                            }
                        }
                        gk.data_mut()[kidx] += dk_acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Central finite-difference gradient of a scalar function (test oracle).
pub fn finite_diff_gradient(
    f: &mut dyn FnMut(&Tensor) -> f64,
    point: &Tensor,
    epsilon: f64,
) -> Tensor {
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.numel() {
        let mut hi = point.clone();
        hi.data_mut()[i] += epsilon;
        let mut lo = point.clone();
        lo.data_mut()[i] -= epsilon;
        grad.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * epsilon);
    }
    grad
}
