//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] either records every operation (training, gradient checks) or
//! evaluates eagerly without keeping intermediates alive (inference). The same
//! forward code drives both modes.

use std::cell::RefCell;
use std::sync::Arc;

use crate::conv;
use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::par;
use crate::pool;
use crate::resize;
use crate::tensor::Tensor;

/// Handle to a value produced on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    needs_grad: bool,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value.dims4()
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over `count` elements per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(usize, usize),
    ScaleBy {
        x: usize,
        s: usize,
    },
    ChannelScale {
        x: usize,
        s: usize,
    },
    Concat {
        parts: Vec<usize>,
        channels: Vec<usize>,
    },
    Resize {
        x: usize,
        in_h: usize,
        in_w: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
        in_h: usize,
        in_w: usize,
    },
    GlobalAvgPool(usize),
    Softmax(usize),
    Reshape(usize),
    BatchMatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        v.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// An eager graph: nothing is taped, intermediates are freed as soon as
    /// their `Var`s are dropped, and [`Graph::backward`] is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), false)
    }

    /// A trainable leaf.
    pub fn param(&self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), true)
    }

    fn leaf(&self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        if !self.recording {
            return Var {
                id: None,
                needs_grad: false,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            id: Some(nodes.len() - 1),
            needs_grad,
            value,
        }
    }

    fn id_of(&self, v: &Var) -> usize {
        match v.id {
            Some(i) => i,
            None => self.constant(v.value.clone()).id.expect("recording graph"),
        }
    }

    fn record(&self, value: Tensor, inputs: &[&Var], op: impl FnOnce(&[usize]) -> Op) -> Var {
        let value = Arc::new(value);
        if !self.recording {
            return Var {
                id: None,
                needs_grad: false,
                value,
            };
        }
        let ids: Vec<usize> = inputs.iter().map(|v| self.id_of(v)).collect();
        let needs_grad = inputs.iter().any(|v| v.needs_grad);
        let op = op(&ids);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op,
            needs_grad,
        });
        Var {
            id: Some(nodes.len() - 1),
            needs_grad,
            value,
        }
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d(x.value(), w.value(), b.map(Var::value), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, |ids| Op::Conv2d {
            x: ids[0],
            w: ids[1],
            b: ids.get(2).copied(),
            stride,
            pad,
        }))
    }

    pub fn conv_transpose2d(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv::conv_transpose2d(x.value(), w.value(), b.map(Var::value), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, |ids| Op::ConvTranspose2d {
            x: ids[0],
            w: ids[1],
            b: ids.get(2).copied(),
            stride,
            pad,
        }))
    }

    /// Batch normalisation using the statistics of `x` itself.
    pub fn batch_norm_train(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = x.dims4()?;
        check_channels(gamma, c, "batch_norm gamma")?;
        check_channels(beta, c, "batch_norm beta")?;
        let plane = h * w;
        let count = n * plane;
        let xs = x.value().data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * plane;
                s += xs[off..off + plane].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * plane;
                v += xs[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (g, bt) = (gamma.value().data(), beta.value().data());
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var,
            count,
        };
        let out = self.record(y, &[x, gamma, beta], |ids| Op::BatchNorm {
            x: ids[0],
            gamma: ids[1],
            beta: ids[2],
            xhat,
            inv_std,
        });
        Ok((out, stats))
    }

    /// Batch normalisation with frozen statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn batch_norm_eval(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = x.dims4()?;
        check_channels(gamma, c, "batch_norm gamma")?;
        check_channels(beta, c, "batch_norm beta")?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Shape("batch_norm: running stats length".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let plane = h * w;
        let (g, bt) = (gamma.value().data(), beta.value().data());
        let mut y = Tensor::zeros(x.shape());
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * plane;
                for i in off..off + plane {
                    y.data_mut()[i] = g[ch] * ((x.value().data()[i] - mean[ch]) * inv_std[ch]) + bt[ch];
                }
            }
        }
        let mean = mean.to_vec();
        Ok(self.record(y, &[x, gamma, beta], |ids| Op::ChannelAffine {
            x: ids[0],
            gamma: ids[1],
            beta: ids[2],
            mean,
            inv_std,
        }))
    }

    pub fn relu(&self, x: &Var) -> Var {
        let mut y = Tensor::zeros(x.shape());
        par::map_into(x.value().data(), y.data_mut(), |v| v.max(0.0));
        self.record(y, &[x], |ids| Op::Relu(ids[0]))
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let mut y = Tensor::zeros(x.shape());
        par::map_into(x.value().data(), y.data_mut(), sigmoid);
        self.record(y, &[x], |ids| Op::Sigmoid(ids[0]))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        a.value().check_same_shape(b.value(), "add")?;
        let y = zip_map(a.value(), b.value(), |p, q| p + q);
        Ok(self.record(y, &[a, b], |ids| Op::Add(ids[0], ids[1])))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        a.value().check_same_shape(b.value(), "mul")?;
        let y = zip_map(a.value(), b.value(), |p, q| p * q);
        Ok(self.record(y, &[a, b], |ids| Op::Mul(ids[0], ids[1])))
    }

    /// `s * x` for a one-element `s`.
    pub fn scale_by(&self, x: &Var, s: &Var) -> Result<Var> {
        if s.value().numel() != 1 {
            return Err(TensorError::Shape("scale_by: scale must have one element".into()));
        }
        let k = s.value().data()[0];
        let y = x.value().map(|v| k * v);
        Ok(self.record(y, &[x, s], |ids| Op::ScaleBy { x: ids[0], s: ids[1] }))
    }

    /// Per-(sample, channel) scaling: `x: [n, c, h, w]`, `s: [n, c, 1, 1]`.
    pub fn channel_scale(&self, x: &Var, s: &Var) -> Result<Var> {
        let (n, c, h, w) = x.dims4()?;
        if s.shape() != [n, c, 1, 1] {
            return Err(TensorError::Shape(format!(
                "channel_scale: scale shape {:?} for input {:?}",
                s.shape(),
                x.shape()
            )));
        }
        let mut y = x.value().clone();
        for (plane, &k) in y.data_mut().chunks_mut(h * w).zip(s.value().data()) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.record(y, &[x, s], |ids| Op::ChannelScale { x: ids[0], s: ids[1] }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat: no inputs".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat: {:?} does not match {:?} outside the channel axis",
                    p.shape(),
                    first.shape()
                )));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for smp in 0..n {
            for (p, &pc) in parts.iter().zip(&channels) {
                let off = smp * pc * plane;
                data.extend_from_slice(&p.value().data()[off..off + pc * plane]);
            }
        }
        let y = Tensor::new(vec![n, total, h, w], data)?;
        Ok(self.record(y, parts, |ids| Op::Concat {
            parts: ids.to_vec(),
            channels,
        }))
    }

    pub fn resize_bilinear(&self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, in_h, in_w) = x.dims4()?;
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(x.clone());
        }
        let y = resize::resize_bilinear(x.value(), out_h, out_w)?;
        Ok(self.record(y, &[x], |ids| Op::Resize {
            x: ids[0],
            in_h,
            in_w,
        }))
    }

    pub fn max_pool2d(&self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (_, _, in_h, in_w) = x.dims4()?;
        let (y, argmax) = pool::max_pool2d(x.value(), k, stride, pad)?;
        Ok(self.record(y, &[x], |ids| Op::MaxPool {
            x: ids[0],
            argmax,
            in_h,
            in_w,
        }))
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.dims4()?;
        let data = x
            .value()
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let y = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.record(y, &[x], |ids| Op::GlobalAvgPool(ids[0])))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&self, x: &Var) -> Result<Var> {
        let (_, c, h, w) = x.dims4()?;
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        let xs = x.value().data();
        par::for_each_chunk_mut(y.data_mut(), c * plane, |smp, out| {
            let inp = &xs[smp * c * plane..(smp + 1) * c * plane];
            for p in 0..plane {
                let m = (0..c).map(|k| inp[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (inp[k * plane + p] - m).exp();
                    out[k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    out[k * plane + p] /= z;
                }
            }
        });
        Ok(self.record(y, &[x], |ids| Op::Softmax(ids[0])))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = x.value().clone().reshape(shape)?;
        Ok(self.record(y, &[x], |ids| Op::Reshape(ids[0])))
    }

    /// Batched matrix product of rank-3 tensors, `op(a) · op(b)` per batch,
    /// where `op` transposes the trailing two axes when its flag is set.
    pub fn batch_matmul(&self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let (ab, ar, ac) = dims3(a.value())?;
        let (bb, br, bc) = dims3(b.value())?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if ab != bb || k != k2 {
            return Err(TensorError::Shape(format!(
                "batch_matmul: {:?}{} x {:?}{} is not conformable",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut y = Tensor::zeros(&[ab, m, n]);
        par::for_each_chunk_mut(y.data_mut(), m * n, |i, out| {
            let am = MatRef::row_major(&a.value().data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
            let bm = MatRef::row_major(&b.value().data()[i * br * bc..(i + 1) * br * bc], br, bc);
            gemm(1.0, am.t_if(ta), bm.t_if(tb), 0.0, out);
        });
        Ok(self.record(y, &[a, b], |ids| Op::BatchMatMul {
            a: ids[0],
            b: ids[1],
            ta,
            tb,
        }))
    }

    /// Propagates the seed gradients back through the tape.
    ///
    /// Each seed pairs a recorded value with `∂L/∂value`. Gradients of leaves
    /// created with [`Graph::param`] are returned.
    pub fn backward(&self, seeds: Vec<(&Var, Tensor)>) -> Result<Gradients> {
        if !self.recording {
            return Err(TensorError::Backward("graph was built in inference mode".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let id = v
                .id
                .ok_or_else(|| TensorError::Backward("seed was not recorded on this graph".into()))?;
            g.check_same_shape(&nodes[id].value, "backward seed")?;
            accumulate(&mut grads, &nodes, id, g)?;
        }
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let val = |j: usize| -> &Tensor { &nodes[j].value };
            let wants = |j: usize| nodes[j].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let g = conv::conv2d_backward(val(*x), val(*w), &gy, *stride, *pad, wants(*x))?;
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, &nodes, *x, dx)?;
                    }
                    accumulate(&mut grads, &nodes, *w, g.dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, &nodes, *b, g.db)?;
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let g = conv::conv_transpose2d_backward(
                        val(*x),
                        val(*w),
                        &gy,
                        *stride,
                        *pad,
                        wants(*x),
                    )?;
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, &nodes, *x, dx)?;
                    }
                    accumulate(&mut grads, &nodes, *w, g.dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, &nodes, *b, g.db)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = gy.dims4()?;
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let gm = val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for smp in 0..n {
                        for ch in 0..c {
                            let off = (smp * c + ch) * plane;
                            for j in off..off + plane {
                                dgamma[ch] += gy.data()[j] * xhat.data()[j];
                                dbeta[ch] += gy.data()[j];
                            }
                        }
                    }
                    if wants(*x) {
                        let mut dx = Tensor::zeros(gy.shape());
                        for smp in 0..n {
                            for ch in 0..c {
                                let off = (smp * c + ch) * plane;
                                // sums over the batch of dxhat and dxhat * xhat
                                let s1 = dbeta[ch] * gm[ch];
                                let s2 = dgamma[ch] * gm[ch];
                                for j in off..off + plane {
                                    let dxhat = gy.data()[j] * gm[ch];
                                    dx.data_mut()[j] =
                                        inv_std[ch] / m * (m * dxhat - s1 - xhat.data()[j] * s2);
                                }
                            }
                        }
                        accumulate(&mut grads, &nodes, *x, dx)?;
                    }
                    accumulate(&mut grads, &nodes, *gamma, Tensor::new(vec![c], dgamma)?)?;
                    accumulate(&mut grads, &nodes, *beta, Tensor::new(vec![c], dbeta)?)?;
                }
                Op::ChannelAffine {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (n, c, h, w) = gy.dims4()?;
                    let plane = h * w;
                    let xs = val(*x).data();
                    let gm = val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = wants(*x).then(|| Tensor::zeros(gy.shape()));
                    for smp in 0..n {
                        for ch in 0..c {
                            let off = (smp * c + ch) * plane;
                            for j in off..off + plane {
                                let g = gy.data()[j];
                                dgamma[ch] += g * (xs[j] - mean[ch]) * inv_std[ch];
                                dbeta[ch] += g;
                                if let Some(dx) = dx.as_mut() {
                                    dx.data_mut()[j] = g * gm[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, &nodes, *x, dx)?;
                    }
                    accumulate(&mut grads, &nodes, *gamma, Tensor::new(vec![c], dgamma)?)?;
                    accumulate(&mut grads, &nodes, *beta, Tensor::new(vec![c], dbeta)?)?;
                }
                Op::Relu(x) => {
                    let dx = zip_map(&gy, val(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&gy, &node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, &nodes, *a, gy.clone())?;
                    }
                    accumulate(&mut grads, &nodes, *b, gy)?;
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, &nodes, *a, zip_map(&gy, val(*b), |g, q| g * q))?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads, &nodes, *b, zip_map(&gy, val(*a), |g, p| g * p))?;
                    }
                }
                Op::ScaleBy { x, s } => {
                    let k = val(*s).data()[0];
                    if wants(*s) {
                        let ds: f64 = gy.data().iter().zip(val(*x).data()).map(|(g, v)| g * v).sum();
                        accumulate(&mut grads, &nodes, *s, Tensor::new(val(*s).shape().to_vec(), vec![ds])?)?;
                    }
                    if wants(*x) {
                        accumulate(&mut grads, &nodes, *x, gy.map(|g| g * k))?;
                    }
                }
                Op::ChannelScale { x, s } => {
                    let (_, _, h, w) = gy.dims4()?;
                    let plane = h * w;
                    let sv = val(*s).data();
                    if wants(*s) {
                        let ds: Vec<f64> = gy
                            .data()
                            .chunks(plane)
                            .zip(val(*x).data().chunks(plane))
                            .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, &nodes, *s, Tensor::new(val(*s).shape().to_vec(), ds)?)?;
                    }
                    if wants(*x) {
                        let mut dx = gy;
                        for (p, &k) in dx.data_mut().chunks_mut(plane).zip(sv) {
                            p.iter_mut().for_each(|v| *v *= k);
                        }
                        accumulate(&mut grads, &nodes, *x, dx)?;
                    }
                }
                Op::Concat { parts, channels } => {
                    let (n, _, h, w) = gy.dims4()?;
                    let plane = h * w;
                    let total: usize = channels.iter().sum();
                    let mut offset = 0;
                    for (&p, &pc) in parts.iter().zip(channels) {
                        if wants(p) {
                            let mut d = Vec::with_capacity(n * pc * plane);
                            for smp in 0..n {
                                let start = (smp * total + offset) * plane;
                                d.extend_from_slice(&gy.data()[start..start + pc * plane]);
                            }
                            accumulate(&mut grads, &nodes, p, Tensor::new(vec![n, pc, h, w], d)?)?;
                        }
                        offset += pc;
                    }
                }
                Op::Resize { x, in_h, in_w } => {
                    let dx = resize::resize_bilinear_backward(&gy, *in_h, *in_w)?;
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::MaxPool { x, argmax, in_h, in_w } => {
                    let dx = pool::max_pool2d_backward(&gy, argmax, *in_h, *in_w)?;
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = val(*x).dims4()?;
                    let plane = h * w;
                    let mut dx = Tensor::zeros(val(*x).shape());
                    for (p, &g) in dx.data_mut().chunks_mut(plane).zip(gy.data()) {
                        p.fill(g / plane as f64);
                    }
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::Softmax(x) => {
                    let (n, c, h, w) = gy.dims4()?;
                    let plane = h * w;
                    let y = node.value.data();
                    let mut dx = Tensor::zeros(gy.shape());
                    for smp in 0..n {
                        let base = smp * c * plane;
                        for p in 0..plane {
                            let dot: f64 = (0..c)
                                .map(|k| gy.data()[base + k * plane + p] * y[base + k * plane + p])
                                .sum();
                            for k in 0..c {
                                let j = base + k * plane + p;
                                dx.data_mut()[j] = y[j] * (gy.data()[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::Reshape(x) => {
                    let dx = gy.reshape(val(*x).shape())?;
                    accumulate(&mut grads, &nodes, *x, dx)?;
                }
                Op::BatchMatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (_, ar, ac) = dims3(av)?;
                    let (_, br, bc) = dims3(bv)?;
                    let (_, m, n) = dims3(&gy)?;
                    let a_mat = |i: usize| MatRef::row_major(&av.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                    let b_mat = |i: usize| MatRef::row_major(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc);
                    let g_mat = |i: usize| MatRef::row_major(&gy.data()[i * m * n..(i + 1) * m * n], m, n);
                    if wants(*a) {
                        let mut da = Tensor::zeros(av.shape());
                        par::for_each_chunk_mut(da.data_mut(), ar * ac, |i, out| {
                            if *ta {
                                gemm(1.0, b_mat(i).t_if(*tb), g_mat(i).t(), 0.0, out);
                            } else {
                                gemm(1.0, g_mat(i), b_mat(i).t_if(*tb).t(), 0.0, out);
                            }
                        });
                        accumulate(&mut grads, &nodes, *a, da)?;
                    }
                    if wants(*b) {
                        let mut db = Tensor::zeros(bv.shape());
                        par::for_each_chunk_mut(db.data_mut(), br * bc, |i, out| {
                            if *tb {
                                gemm(1.0, g_mat(i).t(), a_mat(i).t_if(*ta), 0.0, out);
                            } else {
                                gemm(1.0, a_mat(i).t_if(*ta).t(), g_mat(i), 0.0, out);
                            }
                        });
                        accumulate(&mut grads, &nodes, *b, db)?;
                    }
                }
            }
        }
        // keep leaf gradients only
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) -> Result<()> {
    if !nodes[id].needs_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [b, r, c] => Ok((b, r, c)),
        _ => Err(TensorError::Shape(format!(
            "expected a rank-3 tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn check_channels(v: &Var, c: usize, what: &str) -> Result<()> {
    if v.value().numel() != c {
        return Err(TensorError::Shape(format!(
            "{what}: {} entries for {c} channels",
            v.value().numel()
        )));
    }
    Ok(())
}
