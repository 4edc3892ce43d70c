use super::conv::{
    check_conv_weights, check_upconv_weights, conv2d_forward, conv2d_input_grad, conv2d_param_grads,
    upconv2_backward, upconv2_forward,
};
use super::{Element, Shape, Tensor};
use crate::error::{invalid_arg, shape_err, Result};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const BN_STATS_MOMENTUM: f64 = 0.9;

/// Handle of a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BatchNormStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Whether batch norm uses (and updates) batch statistics or the running ones.
pub enum BatchNormMode<'a, T> {
    Train(&'a mut BatchNormStats<T>),
    Eval(&'a BatchNormStats<T>),
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    UpConv2 { x: NodeId, w: NodeId },
    Concat { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    WeightedLogistic { logits: NodeId, target: Vec<T>, negative_weight: T, total_weight: f64 },
    Add { a: NodeId, b: NodeId },
    Dot { x: NodeId, probe: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which is
/// a topological order; backward walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_value<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn take_value(self, id: NodeId) -> Tensor<T> {
        self.nodes.into_iter().nth(id.0).unwrap().value
    }

    /// Zero-padded "same" convolution with a 1x1 or 3x3 kernel. `w` has shape
    /// `(out, in, k, k)`, `b` has shape `(1, out, 1, 1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let ws = self.value(w).shape();
        check_conv_weights(self.value(x).shape(), ws)?;
        let bs = self.value(b).shape();
        if bs != Shape::new(1, ws.batch, 1, 1) {
            return Err(shape_err!("conv bias must have shape (1, {}, 1, 1), got {bs}", ws.batch));
        }
        let y = conv2d_forward(self.value(x), self.value(w), Some(self.value(b).data()))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x }, &[x])
    }

    /// Batch normalisation over (batch, height, width) per channel. `gamma` and
    /// `beta` have shape `(1, C, 1, 1)`.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BatchNormMode<'_, T>) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let c = xs.channels;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != Shape::new(1, c, 1, 1) {
                return Err(shape_err!("batch-norm {name} must have shape (1, {c}, 1, 1), got {s}"));
            }
        }
        let plane = xs.plane();
        let n = (xs.batch * plane) as f64;
        let xv = self.value(x);
        let channel_slices = |ch: usize| (0..xs.batch).map(move |b| &xv.item(b)[ch * plane..(ch + 1) * plane]);
        let (mean, inv_std, batch_stats): (Vec<f64>, Vec<f64>, bool) = match mode {
            BatchNormMode::Train(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(shape_err!("batch-norm running stats do not have {c} channels"));
                }
                let mut means = Vec::with_capacity(c);
                let mut inv = Vec::with_capacity(c);
                let m = BN_STATS_MOMENTUM;
                for ch in 0..c {
                    let mean = channel_slices(ch).map(|s| s.iter().map(|v| v.f64()).sum::<f64>()).sum::<f64>() / n;
                    let var = channel_slices(ch)
                        .map(|s| s.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>())
                        .sum::<f64>()
                        / n;
                    let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                    stats.mean[ch] = T::of(m * stats.mean[ch].f64() + (1.0 - m) * mean);
                    stats.var[ch] = T::of(m * stats.var[ch].f64() + (1.0 - m) * unbiased);
                    means.push(mean);
                    inv.push(1.0 / (var + BN_EPS).sqrt());
                }
                (means, inv, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(shape_err!("batch-norm running stats do not have {c} channels"));
                }
                (
                    stats.mean.iter().map(|v| v.f64()).collect(),
                    stats.var.iter().map(|v| 1.0 / (v.f64() + BN_EPS).sqrt()).collect(),
                    false,
                )
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut y = Vec::with_capacity(xs.numel());
        for (i, src) in xv.data().chunks_exact(plane).enumerate() {
            let ch = i % c;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (gc, bc) = (g[ch], be[ch]);
            for &v in src {
                let h = T::of((v.f64() - mu) * is);
                xhat.push(h);
                y.push(gc * h + bc);
            }
        }
        let y = Tensor::new(xs, y)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.into_iter().map(T::of).collect(),
            batch_stats,
        };
        Ok(self.push(y, op, &[x, gamma, beta]))
    }

    /// 2x2 stride-2 max pooling; ties route the gradient to the first element in
    /// raster order of the window.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return Err(shape_err!("max pooling needs even spatial dimensions, got {s}"));
        }
        let (oh, ow) = (s.height / 2, s.width / 2);
        let out_shape = Shape::new(s.batch, s.channels, oh, ow);
        let mut y = Vec::with_capacity(out_shape.numel());
        let mut argmax = Vec::with_capacity(out_shape.numel());
        let data = xv.data();
        let w = s.width;
        for p in 0..s.batch * s.channels {
            for i in 0..oh {
                let top = p * s.plane() + 2 * i * w;
                let (r0, r1) = (&data[top..top + w], &data[top + w..top + 2 * w]);
                for j in 0..ow {
                    // Raster order within the window; strict > keeps the first maximum.
                    let mut best = (r0[2 * j], top + 2 * j);
                    for (v, idx) in [(r0[2 * j + 1], top + 2 * j + 1), (r1[2 * j], top + w + 2 * j), (r1[2 * j + 1], top + w + 2 * j + 1)] {
                        if v > best.0 {
                            best = (v, idx);
                        }
                    }
                    y.push(best.0);
                    argmax.push(best.1 as u32);
                }
            }
        }
        let y = Tensor::new(out_shape, y)?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Stride-2 transposed convolution; `w` has shape `(in, out, 2, 2)`.
    pub fn up_conv2(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        check_upconv_weights(self.value(x).shape(), self.value(w).shape())?;
        let y = upconv2_forward(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::UpConv2 { x, w }, &[x, w]))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = Tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }, &[a, b]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid_value);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    /// Weighted binary cross-entropy on logits, averaged with weights
    /// `1` for positive and `negative_weight` for negative target pixels:
    /// `sum w_i * bce_i / sum w_i`.
    pub fn weighted_logistic_loss(&mut self, logits: NodeId, target: &Tensor<T>, negative_weight: T) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(shape_err!("logits {} and target {} differ in shape", z.shape(), target.shape()));
        }
        if !(negative_weight >= T::zero()) {
            return Err(invalid_arg!("negative weight must be non-negative, got {negative_weight}"));
        }
        let nw = negative_weight.f64();
        let mut total_weight = 0.0;
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            let (zf, y) = (zi.f64(), yi.f64());
            let w = if y == 1.0 {
                1.0
            } else if y == 0.0 {
                nw
            } else {
                return Err(invalid_arg!("targets must be 0 or 1, found {y}"));
            };
            total_weight += w;
            total += w * (softplus(zf) - y * zf);
        }
        if !(total_weight > 0.0) {
            return Err(invalid_arg!("loss weights sum to zero"));
        }
        let out = Tensor::scalar(T::of(total / total_weight));
        let op = Op::WeightedLogistic {
            logits,
            target: target.data().to_vec(),
            negative_weight,
            total_weight,
        };
        Ok(self.push(out, op, &[logits]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("cannot add {} and {}", va.shape(), vb.shape()));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// Scalar `sum_i x_i * probe_i`; reduces any node to a scalar for testing
    /// and gradient checks.
    pub fn dot(&mut self, x: NodeId, probe: &Tensor<T>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != probe.shape() {
            return Err(shape_err!("probe {} does not match {}", probe.shape(), xv.shape()));
        }
        let s: f64 = xv.data().iter().zip(probe.data()).map(|(a, b)| a.f64() * b.f64()).sum();
        let out = Tensor::scalar(T::of(s));
        Ok(self.push(out, Op::Dot { x, probe: probe.data().to_vec() }, &[x]))
    }

    /// Reverse-mode sweep from a scalar output seeded with 1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        let shape = self.value(output).shape();
        if shape.numel() != 1 {
            return Err(shape_err!("backward needs a scalar output, got {shape}"));
        }
        self.backward_with(output, Tensor::scalar(T::one()))
    }

    /// Reverse-mode sweep from `output` with an explicit upstream gradient.
    /// Returns gradients of every trainable leaf reached.
    pub fn backward_with(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err!("seed {} does not match output {}", seed.shape(), self.value(output).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                if self.wants(*x) {
                    acc(*x, conv2d_input_grad(g, self.value(*w))?);
                }
                if self.wants(*w) || self.wants(*b) {
                    let (dw, db) = conv2d_param_grads(self.value(*x), g, self.value(*w).shape());
                    if self.wants(*w) {
                        acc(*w, dw);
                    }
                    if self.wants(*b) {
                        acc(*b, db);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(xv.shape(), data)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = g.shape();
                let (c, plane) = (s.channels, s.plane());
                let n = (s.batch * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (i, (gs, hs)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                    let ch = i % c;
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for (&gi, &hi) in gs.iter().zip(hs) {
                        sg += gi.f64();
                        sgx += gi.f64() * hi.f64();
                    }
                    sum_g[ch] += sg;
                    sum_gx[ch] += sgx;
                }
                if self.wants(*gamma) {
                    acc(*gamma, Tensor::new(Shape::new(1, c, 1, 1), sum_gx.iter().map(|&v| T::of(v)).collect())?);
                }
                if self.wants(*beta) {
                    acc(*beta, Tensor::new(Shape::new(1, c, 1, 1), sum_g.iter().map(|&v| T::of(v)).collect())?);
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(s.numel());
                    for (i, (gs, hs)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                        let ch = i % c;
                        let scale = gam[ch].f64() * inv_std[ch].f64();
                        let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                        for (&gi, &hi) in gs.iter().zip(hs) {
                            let v = if *batch_stats {
                                scale * (gi.f64() - mg - hi.f64() * mgx)
                            } else {
                                scale * gi.f64()
                            };
                            dx.push(T::of(v));
                        }
                    }
                    acc(*x, Tensor::new(s, dx)?);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src as usize] = d[src as usize] + gv;
                }
                acc(*x, dx);
            }
            Op::UpConv2 { x, w } => {
                let (dx, dw) = upconv2_backward(self.value(*x), self.value(*w), g, self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    acc(*w, dw);
                }
            }
            Op::Concat { a, b } => {
                let at = self.value(*a).shape().channels;
                let (ga, gb) = g.split_channels(at)?;
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                acc(*x, Tensor::new(g.shape(), data)?);
            }
            Op::WeightedLogistic { logits, target, negative_weight, total_weight } => {
                let seed = g.data()[0].f64() / total_weight;
                let z = self.value(*logits);
                let nw = negative_weight.f64();
                let data = z
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&zi, &yi)| {
                        let y = yi.f64();
                        let w = if y == 1.0 { 1.0 } else { nw };
                        T::of(seed * w * (sigmoid_value(zi.f64()) - y))
                    })
                    .collect();
                acc(*logits, Tensor::new(z.shape(), data)?);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Dot { x, probe } => {
                let gv = g.data()[0];
                let data = probe.iter().map(|&p| p * gv).collect();
                acc(*x, Tensor::new(self.value(*x).shape(), data)?);
            }
        }
        Ok(())
    }
}

/// Gradients of the trainable leaves after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
