use std::collections::HashMap;

use rand::{Rng, RngExt};

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    FullyConnected { x: Var, weight: Var, bias: Var },
    Softmax { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Concat { inputs: Vec<Var> },
    Reshape { x: Var },
    ChannelsToRows { x: Var, group: usize },
    RoiPool { x: Var, argmax: Vec<usize> },
    Sum { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<Option<usize>>, count: usize },
    SmoothL1 { pred: Var, targets: Vec<Option<(usize, [T; 4])>>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records executed ops in topological order so [`Graph::backward`] can visit
/// them exactly once in reverse.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the leaves that were created with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&var)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds an input tensor. Gradients are collected only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Cross-correlation (no kernel flip) of `[N, Cin, H, W]` with
    /// `[Cout, Cin, kh, kw]`, plus a per-channel bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(xv, kv, bv, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, xv.data(), kv.data(), bv.data());
        let value = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, Op::Conv2d { x, kernel, bias, geom }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.maxpool2d_padded(x, window, stride, 0)
    }

    /// Max pooling where out-of-range window cells never win. Output extent
    /// follows `floor((H + 2p - window) / stride) + 1`, so trailing rows or
    /// columns that do not fill a window are dropped.
    pub fn maxpool2d_padded(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (value, argmax) = kernels::maxpool_forward(self.value(x), window, stride, padding)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// `x[N, D] * weight[D, M] + bias[M]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = matrix_dims("fully_connected", self.value(x))?;
        let (wd, m) = matrix_dims("fully_connected", self.value(weight))?;
        if d != wd || self.value(bias).shape() != [m] {
            return Err(Error::dim(
                "fully_connected",
                format!(
                    "input {:?}, weight {:?}, bias {:?} do not agree",
                    self.value(x).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let bias_data = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias_data.iter().copied()).collect();
        T::gemm(n, d, m, self.value(x).data(), false, self.value(weight).data(), false, T::one(), &mut out);
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::FullyConnected { x, weight, bias }, needs))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let width = *xv.shape().last().expect("tensors have rank >= 1");
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Softmax { x }, needs)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Inference mode (or `rate == 0`) returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param("dropout rate", format!("{rate} is outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Concatenates `[N, Ci, H, W]` inputs along channels, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!(
                        "input {i} has shape {:?}, expected [{n}, _, {h}, {w}]",
                        self.value(v).shape()
                    ),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Regroups `[N, k*group, H, W]` into rows `[N*H*W*k, group]`: row
    /// `((n*H + y)*W + x)*k + a` holds channels `a*group .. (a+1)*group` of
    /// cell `(y, x)`. This is the per-anchor view of RPN outputs.
    pub fn channels_to_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if group == 0 || c % group != 0 {
            return Err(Error::dim("channels_to_rows", format!("{c} channels are not a multiple of {group}")));
        }
        let k = c / group;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let (a, j) = (ch / group, ch % group);
                for y in 0..h {
                    for xx in 0..w {
                        let row = ((b * h + y) * w + xx) * k + a;
                        out[row * group + j] = src[((b * c + ch) * h + y) * w + xx];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n * h * w * k, group], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ChannelsToRows { x, group }, needs))
    }

    /// ROI max pooling of `[1, C, H, W]` features; ROIs are `[x1, y1, x2, y2]`
    /// in feature-map coordinates. Output `[R, C, out_h, out_w]`.
    pub fn roi_pool(&mut self, features: Var, rois: &[[f32; 4]], out_h: usize, out_w: usize) -> Result<Var> {
        let (value, argmax) = kernels::roi_pool_forward(self.value(features), rois, out_h, out_w)?;
        let needs = self.needs(features);
        Ok(self.push(value, Op::RoiPool { x: features, argmax }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * factor).collect())
            .expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Mean cross-entropy of `logits[R, C]` over the rows whose target is
    /// `Some`; rows with `None` contribute nothing. Zero when no row counts.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = matrix_dims("softmax_cross_entropy", self.value(logits))?;
        if targets.len() != r {
            return Err(Error::dim("softmax_cross_entropy", format!("{r} rows but {} targets", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::dim("softmax_cross_entropy", format!("target {bad} out of {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0;
        for (row, target) in probs.chunks_exact_mut(c).zip(targets) {
            let log_norm = log_sum_exp(row);
            if let Some(t) = *target {
                total += (log_norm - row[t]).as_f64();
                count += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - log_norm).exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy { logits, probs, targets: targets.to_vec(), count };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, needs))
    }

    /// Smooth-L1 (`0.5 d^2` for `|d| < 1`, else `|d| - 0.5`) between four
    /// consecutive columns of `pred[R, W]`, starting at the given column
    /// offset, and the target; summed over the coordinates and averaged over
    /// the rows with a target.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[Option<(usize, [T; 4])>]) -> Result<Var> {
        let (r, w) = matrix_dims("smooth_l1", self.value(pred))?;
        if targets.len() != r {
            return Err(Error::dim("smooth_l1", format!("{r} rows but {} targets", targets.len())));
        }
        let data = self.value(pred).data();
        let mut total = T::zero();
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            if let Some((offset, t)) = target {
                if offset + 4 > w {
                    return Err(Error::dim("smooth_l1", format!("offset {offset} overruns width {w}")));
                }
                for j in 0..4 {
                    total += smooth_l1_value(data[i * w + offset + j] - t[j]);
                }
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        let needs = self.needs(pred);
        let op = Op::SmoothL1 { pred, targets: targets.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Reverse pass from a scalar loss. Consumes the graph; returns the
    /// gradient of every `requires_grad` leaf that the loss depends on.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut by_leaf = HashMap::new();
        if !self.needs(loss) {
            return Ok(Gradients { by_leaf });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                by_leaf.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, contribution: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, geom } => {
                let need = [self.needs(*x), self.needs(*kernel), self.needs(*bias)];
                let out = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    need,
                );
                if let Some(d) = out.input {
                    send(*x, d);
                }
                if let Some(d) = out.kernel {
                    send(*kernel, d);
                }
                if let Some(d) = out.bias {
                    send(*bias, d);
                }
            }
            Op::Relu { x } => {
                let d = self.value(*x).data().iter().zip(g).map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() });
                send(*x, d.collect());
            }
            Op::MaxPool { x, argmax } | Op::RoiPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&ix, &gi) in argmax.iter().zip(g) {
                    d[ix] += gi;
                }
                send(*x, d);
            }
            Op::FullyConnected { x, weight, bias } => {
                let (n, dim) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let m = self.value(*weight).shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * dim];
                    T::gemm(n, m, dim, g, false, self.value(*weight).data(), true, T::zero(), &mut dx);
                    send(*x, dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); dim * m];
                    T::gemm(dim, n, m, self.value(*x).data(), true, g, false, T::zero(), &mut dw);
                    send(*weight, dw);
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    send(*bias, db);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let width = *node.value.shape().last().expect("rank >= 1");
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(width).zip(y.chunks_exact(width)).zip(g.chunks_exact(width)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                send(*x, d);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect());
            }
            Op::Concat { inputs } => {
                let (n, total_c, h, w) = node.value.dims4().expect("concat output is 4-D");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        send(v, d);
                    }
                    offset += c;
                }
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::ChannelsToRows { x, group } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("checked at forward");
                let k = c / group;
                let mut d = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let (a, j) = (ch / group, ch % group);
                        for y in 0..h {
                            for xx in 0..w {
                                let row = ((b * h + y) * w + xx) * k + a;
                                d[((b * c + ch) * h + y) * w + xx] = g[row * group + j];
                            }
                        }
                    }
                }
                send(*x, d);
            }
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(&gi, &q)| gi * q).collect());
                send(*b, g.iter().zip(av).map(|(&gi, &p)| gi * p).collect());
            }
            Op::Scale { x, factor } => send(*x, g.iter().map(|&gi| gi * *factor).collect()),
            Op::SoftmaxCrossEntropy { logits, probs, targets, count } => {
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let c = probs.len() / targets.len();
                    let s = g[0] / T::of(*count as f64);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                d[i * c + j] = probs[i * c + j] * s;
                            }
                            d[i * c + t] -= s;
                        }
                    }
                }
                send(*logits, d);
            }
            Op::SmoothL1 { pred, targets, count } => {
                let pv = self.value(*pred);
                let w = pv.shape()[1];
                let mut d = vec![T::zero(); pv.numel()];
                if *count > 0 {
                    let s = g[0] / T::of(*count as f64);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some((offset, t)) = t {
                            for j in 0..4 {
                                let ix = i * w + offset + j;
                                d[ix] = smooth_l1_slope(pv.data()[ix] - t[j]) * s;
                            }
                        }
                    }
                }
                send(*pred, d);
            }
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn smooth_l1_value<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}

fn smooth_l1_slope<T: Scalar>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}
