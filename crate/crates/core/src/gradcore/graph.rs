use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives. Binary ops broadcast numpy-style; a one-element
/// operand broadcasts against anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Sin,
    Sigmoid,
    Gelu,
    Relu,
    Square,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        op: ElementwiseOp,
        a: NodeId,
        b: NodeId,
    },
    Unary {
        op: ElementwiseOp,
        a: NodeId,
    },
    CausalConv1d {
        x: NodeId,
        w: NodeId,
    },
    PointwiseLinear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MovingAverage {
        x: NodeId,
    },
    MeanTime {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    BceWithLogits {
        logit: NodeId,
        label: f64,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of primitive operations. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted and `backward` is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    /// Adds a leaf holding a copy of `t`; it is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("tensor invariants already hold");
        value.set_requires_grad(requires_grad);
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a non-differentiable leaf, taking ownership of `t`.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => Ok(self.unary(op, a)),
            (true, None) => Err(Error::InvalidTensor(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::InvalidTensor(format!(
                "{op:?} takes a single operand"
            ))),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Neg, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Sin, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Gelu, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(ElementwiseOp::Square, a)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let c = self.constant(Tensor::scalar(factor));
        self.binary(ElementwiseOp::Mul, a, c)
            .expect("scalar broadcasts against any shape")
    }

    fn binary(&mut self, op: ElementwiseOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: op_name(op),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let f = |x: f64, y: f64| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!("binary op"),
        };
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { op, a, b }, rg))
    }

    fn unary(&mut self, op: ElementwiseOp, a: NodeId) -> NodeId {
        let src = self.value(a);
        let data: Vec<f64> = src
            .data()
            .iter()
            .map(|&x| match op {
                ElementwiseOp::Neg => -x,
                ElementwiseOp::Exp => x.exp(),
                ElementwiseOp::Sin => x.sin(),
                ElementwiseOp::Sigmoid => sigmoid(x),
                ElementwiseOp::Gelu => gelu(x),
                ElementwiseOp::Relu => x.max(0.0),
                ElementwiseOp::Square => x * x,
                _ => unreachable!("unary op"),
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary { op, a }, rg)
    }

    /// Depthwise causal convolution: `y[c,t] = Σ_k w[c,k]·x[c,t−k]` with the
    /// past before `t = 0` treated as zero. Tap `k = 0` multiplies the most
    /// recent sample.
    pub fn causal_conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.value(x).dims2()?;
        let (cw, k_len) = self.value(w).dims2()?;
        if c != cw {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; c * t_len];
        for ch in 0..c {
            let xr = &xv[ch * t_len..(ch + 1) * t_len];
            let wr = &wv[ch * k_len..(ch + 1) * k_len];
            let yr = &mut out[ch * t_len..(ch + 1) * t_len];
            for (t, y) in yr.iter_mut().enumerate() {
                let taps = k_len.min(t + 1);
                let mut acc = 0.0;
                for k in 0..taps {
                    acc += wr[k] * xr[t - k];
                }
                *y = acc;
            }
        }
        let value = Tensor::new(vec![c, t_len], out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::CausalConv1d { x, w }, rg))
    }

    /// Per-timestep linear map across channels (a 1×1 convolution):
    /// `y[o,t] = b[o] + Σ_i W[o,i]·x[i,t]`.
    pub fn pointwise_linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (cin, t_len) = self.value(x).dims2()?;
        let (cout, win) = self.value(w).dims2()?;
        if win != cin {
            return Err(Error::ShapeMismatch {
                op: "pointwise_linear",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        if self.value(b).numel() != cout {
            return Err(Error::ShapeMismatch {
                op: "pointwise_linear bias",
                lhs: vec![cout],
                rhs: self.shape(b).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; cout * t_len];
        for o in 0..cout {
            let yr = &mut out[o * t_len..(o + 1) * t_len];
            yr.fill(bv[o]);
            for i in 0..cin {
                let wi = wv[o * cin + i];
                let xr = &xv[i * t_len..(i + 1) * t_len];
                for (y, &xi) in yr.iter_mut().zip(xr) {
                    *y += wi * xi;
                }
            }
        }
        let value = Tensor::new(vec![cout, t_len], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::PointwiseLinear { x, w, b }, rg))
    }

    /// Causal running mean along time: `y[c,t] = mean(x[c,0..=t])`.
    pub fn moving_average(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * t_len];
        for ch in 0..c {
            let mut sum = 0.0;
            for t in 0..t_len {
                sum += xv[ch * t_len + t];
                out[ch * t_len + t] = sum / (t + 1) as f64;
            }
        }
        let value = Tensor::new(vec![c, t_len], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MovingAverage { x }, rg))
    }

    /// Average pooling over time to a `[C, 1]` column. Uses the same
    /// summation order as [`Graph::moving_average`], so the result equals
    /// that op's final column bit for bit.
    pub fn mean_time(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for (ch, o) in out.iter_mut().enumerate() {
            let mut sum = 0.0;
            for t in 0..t_len {
                sum += xv[ch * t_len + t];
            }
            *o = sum / t_len as f64;
        }
        let value = Tensor::new(vec![c, 1], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanTime { x }, rg))
    }

    /// Layer normalisation across channels, independently at each timestep.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.value(x).dims2()?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; c * t_len];
        let mut inv_std = vec![0.0; t_len];
        let mut out = vec![0.0; c * t_len];
        for t in 0..t_len {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xv[ch * t_len + t];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xv[ch * t_len + t] - mean;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[t] = is;
            for ch in 0..c {
                let i = ch * t_len + t;
                xhat[i] = (xv[i] - mean) * is;
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let value = Tensor::new(vec![c, t_len], out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Weighted binary cross-entropy on a single logit, in the overflow-free
    /// form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64, weight: f64) -> Result<NodeId> {
        let v = self.value(logit);
        if v.numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "bce_with_logits expects one logit, got shape {:?}",
                v.shape()
            )));
        }
        let loss = weight * bce_with_logits(v.data()[0], label);
        let rg = self.any_grad(&[logit]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logit,
                label,
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// `∂loss/∂leaf` for every differentiable leaf that `loss` depends on.
    /// Intermediate gradients are dropped as soon as they are consumed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            self.nodes[i].grad = Some(g);
            return;
        }
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |id: NodeId| nodes[id.0].requires_grad;
        let val = |id: NodeId| nodes[id.0].value.data();
        match &node.op {
            Op::Leaf => unreachable!("handled above"),
            Op::Binary { op, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let same = sa == sb;
                let ma = (!same).then(|| broadcast_map(sa, out_shape));
                let mb = (!same).then(|| broadcast_map(sb, out_shape));
                let idx = |m: &Option<Vec<usize>>, k: usize| m.as_ref().map_or(k, |m| m[k]);
                if needs(a) {
                    let ga = accumulator(grads, a, nodes[a.0].value.numel());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add | ElementwiseOp::Sub => gk,
                            ElementwiseOp::Mul => gk * val(b)[idx(&mb, k)],
                            _ => unreachable!(),
                        };
                        ga[idx(&ma, k)] += d;
                    }
                }
                if needs(b) {
                    let gb = accumulator(grads, b, nodes[b.0].value.numel());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add => gk,
                            ElementwiseOp::Sub => -gk,
                            ElementwiseOp::Mul => gk * val(a)[idx(&ma, k)],
                            _ => unreachable!(),
                        };
                        gb[idx(&mb, k)] += d;
                    }
                }
            }
            Op::Unary { op, a } => {
                let a = *a;
                if needs(a) {
                    let x = val(a);
                    let y = node.value.data();
                    let ga = accumulator(grads, a, x.len());
                    for k in 0..g.len() {
                        let d = match op {
                            ElementwiseOp::Neg => -1.0,
                            ElementwiseOp::Exp => y[k],
                            ElementwiseOp::Sin => x[k].cos(),
                            ElementwiseOp::Sigmoid => y[k] * (1.0 - y[k]),
                            ElementwiseOp::Gelu => gelu_grad(x[k]),
                            ElementwiseOp::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Square => 2.0 * x[k],
                            _ => unreachable!(),
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::CausalConv1d { x, w } => {
                let (x, w) = (*x, *w);
                let (c, t_len) = nodes[x.0].value.dims2().expect("2-D");
                let k_len = nodes[w.0].value.shape()[1];
                if needs(x) {
                    let wv = val(w);
                    let gx = accumulator(grads, x, c * t_len);
                    for ch in 0..c {
                        let wr = &wv[ch * k_len..(ch + 1) * k_len];
                        let gr = &g[ch * t_len..(ch + 1) * t_len];
                        for j in 0..t_len {
                            let taps = k_len.min(t_len - j);
                            let mut acc = 0.0;
                            for k in 0..taps {
                                acc += wr[k] * gr[j + k];
                            }
                            gx[ch * t_len + j] += acc;
                        }
                    }
                }
                if needs(w) {
                    let xv = val(x);
                    let gw = accumulator(grads, w, c * k_len);
                    for ch in 0..c {
                        let xr = &xv[ch * t_len..(ch + 1) * t_len];
                        let gr = &g[ch * t_len..(ch + 1) * t_len];
                        for k in 0..k_len.min(t_len) {
                            let mut acc = 0.0;
                            for t in k..t_len {
                                acc += gr[t] * xr[t - k];
                            }
                            gw[ch * k_len + k] += acc;
                        }
                    }
                }
            }
            Op::PointwiseLinear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (cin, t_len) = nodes[x.0].value.dims2().expect("2-D");
                let cout = nodes[w.0].value.shape()[0];
                if needs(x) {
                    let wv = val(w);
                    let gx = accumulator(grads, x, cin * t_len);
                    for o in 0..cout {
                        let gr = &g[o * t_len..(o + 1) * t_len];
                        for i in 0..cin {
                            let wi = wv[o * cin + i];
                            let dst = &mut gx[i * t_len..(i + 1) * t_len];
                            for (d, &gv) in dst.iter_mut().zip(gr) {
                                *d += wi * gv;
                            }
                        }
                    }
                }
                if needs(w) {
                    let xv = val(x);
                    let gw = accumulator(grads, w, cout * cin);
                    for o in 0..cout {
                        let gr = &g[o * t_len..(o + 1) * t_len];
                        for i in 0..cin {
                            let xr = &xv[i * t_len..(i + 1) * t_len];
                            gw[o * cin + i] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(b) {
                    let gb = accumulator(grads, b, cout);
                    for o in 0..cout {
                        gb[o] += g[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                    }
                }
            }
            Op::MovingAverage { x } => {
                let x = *x;
                if needs(x) {
                    let (c, t_len) = nodes[x.0].value.dims2().expect("2-D");
                    let gx = accumulator(grads, x, c * t_len);
                    for ch in 0..c {
                        let mut tail = 0.0;
                        for t in (0..t_len).rev() {
                            tail += g[ch * t_len + t] / (t + 1) as f64;
                            gx[ch * t_len + t] += tail;
                        }
                    }
                }
            }
            Op::MeanTime { x } => {
                let x = *x;
                if needs(x) {
                    let (c, t_len) = nodes[x.0].value.dims2().expect("2-D");
                    let gx = accumulator(grads, x, c * t_len);
                    for ch in 0..c {
                        let d = g[ch] / t_len as f64;
                        for v in &mut gx[ch * t_len..(ch + 1) * t_len] {
                            *v += d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (c, t_len) = nodes[x.0].value.dims2().expect("2-D");
                if needs(x) {
                    let gv = val(gain);
                    let gx = accumulator(grads, x, c * t_len);
                    let cf = c as f64;
                    for t in 0..t_len {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ch in 0..c {
                            let i = ch * t_len + t;
                            let d = g[i] * gv[ch];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        for ch in 0..c {
                            let i = ch * t_len + t;
                            let d = g[i] * gv[ch];
                            gx[i] += inv_std[t] / cf * (cf * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                if needs(gain) {
                    let gg = accumulator(grads, gain, c);
                    for ch in 0..c {
                        let r = ch * t_len..(ch + 1) * t_len;
                        gg[ch] += g[r.clone()]
                            .iter()
                            .zip(&xhat[r])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if needs(bias) {
                    let gb = accumulator(grads, bias, c);
                    for ch in 0..c {
                        gb[ch] += g[ch * t_len..(ch + 1) * t_len].iter().sum::<f64>();
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if needs(x) {
                    let n = nodes[x.0].value.numel();
                    for v in accumulator(grads, x, n).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::BceWithLogits {
                logit,
                label,
                weight,
            } => {
                let logit = *logit;
                if needs(logit) {
                    let z = val(logit)[0];
                    accumulator(grads, logit, 1)[0] += g[0] * weight * (sigmoid(z) - label);
                }
            }
        }
    }
}

fn accumulator(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Neg => "neg",
        ElementwiseOp::Exp => "exp",
        ElementwiseOp::Sin => "sin",
        ElementwiseOp::Sigmoid => "sigmoid",
        ElementwiseOp::Gelu => "gelu",
        ElementwiseOp::Relu => "relu",
        ElementwiseOp::Square => "square",
    }
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out`, the linear index of the broadcast source.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for d in (0..rank).rev() {
            index[d] += 1;
            pos += strides[d];
            if index[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            index[d] = 0;
        }
    }
    map
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Unweighted binary cross-entropy of logit `z` against label `y`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
