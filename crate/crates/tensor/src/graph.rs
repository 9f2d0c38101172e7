//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use rand::Rng;

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvImpl};
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Gap(Var),
    MaskedAvgPool {
        f: Var,
        m: Var,
        den: Vec<f64>,
    },
    ChannelScale {
        f: Var,
        w: Var,
    },
    Concat(Var, Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Parameters of the two-layer gate MLP: `sigmoid(W2 relu(W1 z + b1) + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    conv_impl: ConvImpl,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_conv_impl(conv_impl: ConvImpl) -> Self {
        Self {
            conv_impl,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Trainable input; gradients are accumulated during backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor of the node's shape; zeros if nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- forward ops ------------------------------------------------------

    pub fn conv3d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geo.out_channels] {
                return shape_err(
                    "conv3d",
                    format!(
                        "bias shape {:?}, expected [{}]",
                        self.value(b).shape(),
                        geo.out_channels
                    ),
                );
            }
        }
        let out = conv3d_forward(
            self.conv_impl,
            &geo,
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geo.output_shape(), out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv3d { x, k, bias, geo }, &inputs))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x Wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?} vs weight {ws:?}"));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return shape_err("linear", format!("bias {:?}, expected [{out}]", self.value(b).shape()));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                y[r * out + o] = dot + bd.map_or(0.0, |b| b[o]);
            }
        }
        let t = Tensor::new(vec![n, out], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| sigmoid(v.data()[i]));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax over the last axis of a `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return shape_err("softmax", format!("expected [N, K], got {:?}", v.shape()));
        }
        let k = v.shape()[1];
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(k) {
            out.extend(softmax_row(row));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Global average pooling `[N, C, spatial...]` → `[N, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() < 3 {
            return shape_err("gap", format!("expected [N, C, spatial...], got {:?}", v.shape()));
        }
        let s = v.spatial_len();
        let out: Vec<f64> = v.data().chunks(s).map(|c| c.iter().sum::<f64>() / s as f64).collect();
        let t = Tensor::new(v.shape()[..2].to_vec(), out)?;
        Ok(self.push(t, Op::Gap(x), &[x]))
    }

    /// Masked average pooling: `z[n,c] = Σ F·M / (Σ M + eps)`.
    ///
    /// `f: [N, C, spatial...]`, `m: [N, spatial...]`.
    pub fn masked_avg_pool(&mut self, f: Var, m: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::InvalidArgument {
                op: "masked_avg_pool",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let (fv, mv) = (self.value(f), self.value(m));
        let fs = fv.shape();
        if fs.len() < 3 || mv.shape().len() != fs.len() - 1 || mv.shape()[0] != fs[0] || mv.shape()[1..] != fs[2..] {
            return shape_err("masked_avg_pool", format!("features {fs:?} vs mask {:?}", mv.shape()));
        }
        let (n, c, s) = (fs[0], fs[1], fv.spatial_len());
        let mut den = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            let mrow = &mv.data()[b * s..(b + 1) * s];
            let d = mrow.iter().sum::<f64>() + eps;
            den.push(d);
            for ch in 0..c {
                let frow = &fv.data()[(b * c + ch) * s..][..s];
                let num: f64 = frow.iter().zip(mrow).map(|(a, w)| a * w).sum();
                out.push(num / d);
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::MaskedAvgPool { f, m, den }, &[f, m]))
    }

    /// Channel-wise rescaling `F[n,c,·] * w[n,c]`.
    pub fn channel_scale(&mut self, f: Var, w: Var) -> Result<Var> {
        let (fv, wv) = (self.value(f), self.value(w));
        if fv.rank() < 3 || wv.shape() != &fv.shape()[..2] {
            return shape_err(
                "channel_scale",
                format!("features {:?} vs weights {:?}", fv.shape(), wv.shape()),
            );
        }
        let s = fv.spatial_len();
        let t = Tensor::from_fn(fv.shape(), |i| fv.data()[i] * wv.data()[i / s]);
        Ok(self.push(t, Op::ChannelScale { f, w }, &[f, w]))
    }

    /// Concatenates along axis 1, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return shape_err("concat", format!("{as_:?} vs {bs:?}"));
        }
        let n = as_[0];
        let (sa, sb) = (av.numel() / n, bv.numel() / n);
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..n {
            out.extend_from_slice(&av.data()[r * sa..(r + 1) * sa]);
            out.extend_from_slice(&bv.data()[r * sb..(r + 1) * sb]);
        }
        let mut shape = as_.to_vec();
        shape[1] += bs[1];
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(a, b), &[a, b]))
    }

    /// Inverted dropout. In inference mode, or with `p == 0`, returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("p must lie in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_scale(x, scale)
    }

    /// Dropout with an explicit per-element scale (0 or `1/(1-p)`).
    pub fn dropout_with_scale(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if scale.len() != v.numel() {
            return shape_err(
                "dropout",
                format!("scale has {} entries for {:?}", scale.len(), v.shape()),
            );
        }
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i] * scale[i]);
        Ok(self.push(t, Op::Dropout { x, scale }, &[x]))
    }

    /// Mean label-smoothed cross-entropy over a `[N, K]` batch of logits.
    ///
    /// The target places `1 - smoothing` on the true class and
    /// `smoothing / (K - 1)` on every other class.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return shape_err(
                "cross_entropy_smoothed",
                format!("logits {:?} vs {} labels", v.shape(), labels.len()),
            );
        }
        let (n, k) = (v.shape()[0], v.shape()[1]);
        if k < 2 {
            return shape_err("cross_entropy_smoothed", "need at least two classes");
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_smoothed",
                detail: format!("smoothing must lie in [0, 1), got {smoothing}"),
            });
        }
        let off = smoothing / (k - 1) as f64;
        let mut target = vec![off; n * k];
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(TensorError::LabelOutOfRange { label: y, classes: k });
            }
            target[r * k + y] = 1.0 - smoothing;
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (r, row) in v.data().chunks(k).enumerate() {
            let lse = log_sum_exp(row);
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                loss -= target[r * k + j] * logp;
                probs.push(logp.exp());
            }
        }
        let t = Tensor::scalar(loss / n as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, target, probs }, &[logits]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.numel() != targets.len() {
            return shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", v.numel(), targets.len()),
            );
        }
        let n = targets.len() as f64;
        let loss: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / n;
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                target: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i] * factor);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let t = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Selects one element (flat index) as a scalar node.
    pub fn pick(&mut self, x: Var, flat_index: usize) -> Result<Var> {
        let v = self.value(x);
        if flat_index >= v.numel() {
            return shape_err("pick", format!("index {flat_index} out of {}", v.numel()));
        }
        let t = Tensor::scalar(v.data()[flat_index]);
        Ok(self.push(t, Op::Pick(x, flat_index), &[x]))
    }

    /// Channel gate: `w = sigmoid(W2 relu(W1 z + b1) + b2)`, `F_att = F ⊗ w`.
    pub fn channel_gate(&mut self, f: Var, z: Var, gate: &GateVars) -> Result<(Var, Var)> {
        let c = self.value(f).shape().get(1).copied().unwrap_or(0);
        let (w1s, w2s) = (self.value(gate.w1).shape(), self.value(gate.w2).shape());
        if self.value(z).shape().get(1) != Some(&c) || w1s.get(1) != Some(&c) || w2s.first() != Some(&c) {
            return shape_err(
                "channel_gate",
                format!("C={c}, z {:?}, W1 {w1s:?}, W2 {w2s:?}", self.value(z).shape()),
            );
        }
        let h = self.linear(z, gate.w1, Some(gate.b1))?;
        let h = self.relu(h);
        let a = self.linear(h, gate.w2, Some(gate.b2))?;
        let w = self.sigmoid(a);
        let att = self.channel_scale(f, w)?;
        Ok((w, att))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_with_seed(loss, Tensor::filled(&shape, 1.0))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.nodes[out.0].requires_grad {
            return Err(TensorError::Untracked);
        }
        if seed.shape() != self.value(out).shape() {
            return shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(out).shape()),
            );
        }
        self.backward_done = true;
        self.nodes[out.0].grad = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if self.nodes[i].requires_grad {
                let contribs = self.local_grads(i, &g);
                for (v, c) in contribs {
                    self.accumulate(v, c);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Clears accumulated gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, k, bias, geo } => {
                let (gx, gk, gb) =
                    conv3d_backward(self.conv_impl, geo, self.value(*x).data(), self.value(*k).data(), g);
                out.push((*x, gx));
                out.push((*k, gk));
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.tracked(*x) {
                    let mut gx = vec![0.0; n * inp];
                    for r in 0..n {
                        for j in 0..o {
                            let gv = g[r * o + j];
                            let wr = &wv.data()[j * inp..(j + 1) * inp];
                            gx[r * inp..(r + 1) * inp]
                                .iter_mut()
                                .zip(wr)
                                .for_each(|(a, w)| *a += gv * w);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.tracked(*w) {
                    let mut gw = vec![0.0; o * inp];
                    for r in 0..n {
                        let xr = &xv.data()[r * inp..(r + 1) * inp];
                        for j in 0..o {
                            let gv = g[r * o + j];
                            gw[j * inp..(j + 1) * inp]
                                .iter_mut()
                                .zip(xr)
                                .for_each(|(a, x)| *a += gv * x);
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                out.push((
                    *x,
                    g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(p, gv)| p * (gv - dot)));
                }
                out.push((*x, gx));
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let s = xv.spatial_len();
                let inv = 1.0 / s as f64;
                out.push((*x, (0..xv.numel()).map(|j| g[j / s] * inv).collect()));
            }
            Op::MaskedAvgPool { f, m, den } => {
                let (fv, mv) = (self.value(*f), self.value(*m));
                let (n, c, s) = (fv.shape()[0], fv.shape()[1], fv.spatial_len());
                if self.tracked(*f) {
                    let mut gf = vec![0.0; fv.numel()];
                    for b in 0..n {
                        let mrow = &mv.data()[b * s..(b + 1) * s];
                        for ch in 0..c {
                            let scale = g[b * c + ch] / den[b];
                            gf[(b * c + ch) * s..][..s]
                                .iter_mut()
                                .zip(mrow)
                                .for_each(|(a, w)| *a = scale * w);
                        }
                    }
                    out.push((*f, gf));
                }
                if self.tracked(*m) {
                    let mut gm = vec![0.0; mv.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let z = y[b * c + ch];
                            let scale = g[b * c + ch] / den[b];
                            let frow = &fv.data()[(b * c + ch) * s..][..s];
                            gm[b * s..(b + 1) * s]
                                .iter_mut()
                                .zip(frow)
                                .for_each(|(a, fv)| *a += scale * (fv - z));
                        }
                    }
                    out.push((*m, gm));
                }
            }
            Op::ChannelScale { f, w } => {
                let (fv, wv) = (self.value(*f), self.value(*w));
                let s = fv.spatial_len();
                if self.tracked(*f) {
                    out.push((*f, g.iter().enumerate().map(|(j, gv)| gv * wv.data()[j / s]).collect()));
                }
                if self.tracked(*w) {
                    let gw = g
                        .chunks(s)
                        .zip(fv.data().chunks(s))
                        .map(|(gr, fr)| gr.iter().zip(fr).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*w, gw));
                }
            }
            Op::Concat(a, b) => {
                let n = node.value.shape()[0];
                let sa = self.value(*a).numel() / n;
                let sb = self.value(*b).numel() / n;
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for row in g.chunks(sa + sb) {
                    ga.extend_from_slice(&row[..sa]);
                    gb.extend_from_slice(&row[sa..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Dropout { x, scale } => {
                out.push((*x, g.iter().zip(scale).map(|(a, b)| a * b).collect()));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let n = self.value(*logits).shape()[0] as f64;
                let s = g[0] / n;
                out.push((*logits, probs.iter().zip(target).map(|(p, t)| s * (p - t)).collect()));
            }
            Op::BceWithLogits { logits, target } => {
                let x = self.value(*logits).data();
                let s = g[0] / target.len() as f64;
                out.push((
                    *logits,
                    x.iter().zip(target).map(|(&x, t)| s * (sigmoid(x) - t)).collect(),
                ));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::SumSquares(x) => out.push((*x, self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect())),
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Pick(x, idx) => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[*idx] = g[0];
                out.push((*x, gx));
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
