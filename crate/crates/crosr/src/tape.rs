//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive op appends one node and computes its value eagerly, so a
//! node can only ever reference nodes with smaller ids. The backward pass
//! walks the node list in reverse, which is therefore a valid reverse
//! topological order, and accumulates gradients additively wherever a value
//! fans out.
//!
//! Conventions fixed here and relied on by the tests:
//! * convolutions use zero padding of `kernel / 2` on each side (odd kernels,
//!   stride 1), so spatial shape is preserved;
//! * max pooling strides by its window; at a tie the first element in
//!   row-major order receives the gradient;
//! * ReLU takes derivative 0 at exactly 0;
//! * dropout is inverted (kept activations scaled by 1/(1-rate)) and an
//!   eval-phase or rate-0 dropout appends no node at all.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Numerically safe softmax of one logit row. Output entries are finite,
/// strictly positive and sum to 1 up to rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

enum Op {
    Leaf,
    Relu {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        x: ValueId,
        c: f64,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        pad: usize,
    },
    Dense {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    MaxPool2d {
        x: ValueId,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    GlobalMeanPool {
        x: ValueId,
    },
    Dropout {
        x: ValueId,
        mask: Vec<f64>,
    },
    Upsample2x {
        x: ValueId,
    },
    Reshape {
        x: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquaredError {
        pred: ValueId,
        target: ValueId,
    },
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

/// Result of a backward pass; gradients are indexed by the ids handed out
/// during the forward pass. Nodes the loss does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<ValueId> {
        value.check_finite(context)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(ValueId(self.values.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<ValueId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        self.push(Op::Relu { x }, out, "relu")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Input(format!(
                "add: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
        )?;
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())?;
        self.push(Op::Scale { x, c }, out, "scale")
    }

    /// 2D convolution, stride 1, zero same-padding. `x` is [B,C,H,W], `w` is
    /// [O,C,K,K] with K odd, `b` is [O]; output is [B,O,H,W].
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::Input(format!(
                "conv2d: expected x[B,C,H,W] w[O,C,K,K] b[O], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (bsz, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, wic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wic != ic || bs[0] != oc {
            return Err(Error::Input(format!(
                "conv2d: channel mismatch x has {ic}, w expects {wic}, bias {} for {oc} filters",
                bs[0]
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        let k = kh;
        let pad = k / 2;
        let mut out = vec![0.0; bsz * oc * h * wd];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bd = self.value(b).data();
            conv2d_forward(xd, wdat, bd, &mut out, bsz, ic, oc, h, wd, k, pad);
        }
        let out = Tensor::new(vec![bsz, oc, h, wd], out)?;
        self.push(Op::Conv2d { x, w, b, pad }, out, "conv2d")
    }

    /// Fully connected layer: x[B,F] . w[F,O] + b[O].
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Input(format!(
                "dense: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (bsz, f, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; bsz * o];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for bi in 0..bsz {
                let xrow = &xd[bi * f..(bi + 1) * f];
                let orow = &mut out[bi * o..(bi + 1) * o];
                orow.copy_from_slice(bd);
                for (fi, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[fi * o..(fi + 1) * o];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bsz, o], out)?;
        self.push(Op::Dense { x, w, b }, out, "dense")
    }

    /// Max pooling with stride equal to its window. Spatial dims must divide
    /// by the window; the config layer guarantees this before training.
    pub fn maxpool2d(&mut self, x: ValueId, window: usize) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Input(format!("maxpool2d: expected [B,C,H,W], got {xs:?}")));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Config(format!(
                "maxpool2d: window {window} must divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let xd = self.value(x).data();
            for bc in 0..bsz * c {
                let plane = &xd[bc * h * w..(bc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..window {
                            for dx in 0..window {
                                let i = (oy * window + dy) * w + ox * window + dx;
                                // strict > keeps the first maximum in row-major order
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = bc * oh * ow + oy * ow + ox;
                        out[o] = best;
                        argmax[o] = bc * h * w + best_i;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bsz, c, oh, ow], out)?;
        self.push(Op::MaxPool2d { x, argmax }, out, "maxpool2d")
    }

    /// Reduces the spatial axes of [B,C,H,W] to [B,C] by max.
    pub fn global_max_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Input(format!(
                "global_max_pool: expected [B,C,H,W], got {xs:?}"
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h * w == 0 {
            return Err(Error::Input("global_max_pool: empty spatial extent".into()));
        }
        let mut out = vec![0.0; bsz * c];
        let mut argmax = vec![0usize; out.len()];
        {
            let xd = self.value(x).data();
            for bc in 0..bsz * c {
                let plane = &xd[bc * h * w..(bc + 1) * h * w];
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (i, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[bc] = best;
                argmax[bc] = bc * h * w + best_i;
            }
        }
        let out = Tensor::new(vec![bsz, c], out)?;
        self.push(Op::GlobalMaxPool { x, argmax }, out, "global_max_pool")
    }

    pub fn global_mean_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Input(format!(
                "global_mean_pool: expected [B,C,H,W], got {xs:?}"
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h * w == 0 {
            return Err(Error::Input("global_mean_pool: empty spatial extent".into()));
        }
        let mut out = vec![0.0; bsz * c];
        {
            let xd = self.value(x).data();
            for bc in 0..bsz * c {
                let plane = &xd[bc * h * w..(bc + 1) * h * w];
                out[bc] = plane.iter().sum::<f64>() / (h * w) as f64;
            }
        }
        let out = Tensor::new(vec![bsz, c], out)?;
        self.push(Op::GlobalMeanPool { x }, out, "global_mean_pool")
    }

    /// Inverted dropout. In eval phase or at rate 0 this is the identity and
    /// appends no node (so it also draws nothing from the RNG).
    pub fn dropout(
        &mut self,
        x: ValueId,
        rate: f64,
        phase: Phase,
        rng: &mut ChaCha12Rng,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if phase == Phase::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        self.push(Op::Dropout { x, mask }, out, "dropout")
    }

    /// Nearest-neighbour upsampling by 2 in both spatial dims.
    pub fn upsample2x(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Input(format!("upsample2x: expected [B,C,H,W], got {xs:?}")));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; bsz * c * oh * ow];
        {
            let xd = self.value(x).data();
            for bc in 0..bsz * c {
                let src = &xd[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
                for y in 0..oh {
                    for x2 in 0..ow {
                        dst[y * ow + x2] = src[(y / 2) * w + x2 / 2];
                    }
                }
            }
        }
        let out = Tensor::new(vec![bsz, c, oh, ow], out)?;
        self.push(Op::Upsample2x { x }, out, "upsample2x")
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let out = self.value(x).reshape(shape)?;
        self.push(Op::Reshape { x }, out, "reshape")
    }

    /// Mean cross-entropy between softmax(logits) and integer labels.
    /// `logits` is [B,N]; the saved per-row softmax feeds the backward pass.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Input(format!(
                "softmax_cross_entropy: expected logits [B,N], got {ls:?}"
            )));
        }
        let (bsz, n) = (ls[0], ls[1]);
        if labels.len() != bsz {
            return Err(Error::Input(format!(
                "softmax_cross_entropy: {} labels for batch of {bsz}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Input(format!(
                "softmax_cross_entropy: label {bad} out of range for {n} classes"
            )));
        }
        let mut probs = vec![0.0; bsz * n];
        let mut loss = 0.0;
        {
            let ld = self.value(logits).data();
            for b in 0..bsz {
                let row = &ld[b * n..(b + 1) * n];
                let p = softmax(row);
                loss -= p[labels[b]].ln();
                probs[b * n..(b + 1) * n].copy_from_slice(&p);
            }
        }
        loss /= bsz as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            "softmax_cross_entropy",
        )
    }

    /// Mean over every element of the squared difference, i.e. the squared
    /// per-sample l2 norm divided by the per-sample element count, averaged
    /// over the batch.
    pub fn mean_squared_error(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        let (ps, ts) = (self.value(pred).shape(), self.value(target).shape());
        if ps != ts {
            return Err(Error::Input(format!(
                "mean_squared_error: shape mismatch {ps:?} vs {ts:?}"
            )));
        }
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::Input("mean_squared_error: empty tensors".into()));
        }
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        self.push(
            Op::MeanSquaredError { pred, target },
            Tensor::scalar(loss),
            "mean_squared_error",
        )
    }

    /// Reverse pass from `loss`, which must be scalar. Returns one gradient
    /// per reachable node; unreached nodes stay `None`.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Input(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, c } => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&gv| gv * c).collect(),
                )?;
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, pad } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (bsz, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (oc, k) = (ws[0], ws[2]);
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                let gd = g.data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wdat.len()];
                let mut gb = vec![0.0; oc];
                conv2d_backward(
                    xd, wdat, gd, &mut gx, &mut gw, &mut gb, bsz, ic, oc, h, wd, k, *pad,
                );
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
                self.accumulate(grads, *w, Tensor::new(ws, gw)?);
                self.accumulate(grads, *b, Tensor::new(vec![oc], gb)?);
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (bsz, f, o) = (xs[0], xs[1], ws[1]);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let gd = g.data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; o];
                for bi in 0..bsz {
                    let grow = &gd[bi * o..(bi + 1) * o];
                    let xrow = &xd[bi * f..(bi + 1) * f];
                    for fi in 0..f {
                        let wrow = &wd[fi * o..(fi + 1) * o];
                        let gwrow = &mut gw[fi * o..(fi + 1) * o];
                        let mut acc = 0.0;
                        for oi in 0..o {
                            acc += grow[oi] * wrow[oi];
                            gwrow[oi] += xrow[fi] * grow[oi];
                        }
                        gx[bi * f + fi] += acc;
                    }
                    for (gbv, &gv) in gb.iter_mut().zip(grow) {
                        *gbv += gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
                self.accumulate(grads, *w, Tensor::new(ws, gw)?);
                self.accumulate(grads, *b, Tensor::new(vec![o], gb)?);
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let xs = self.value(*x).shape().to_vec();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::GlobalMeanPool { x } => {
                let xs = self.value(*x).shape().to_vec();
                let area = xs[2] * xs[3];
                let mut gx = vec![0.0; self.value(*x).len()];
                for (bc, &gv) in g.data().iter().enumerate() {
                    let share = gv / area as f64;
                    for v in &mut gx[bc * area..(bc + 1) * area] {
                        *v += share;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::Dropout { x, mask } => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect(),
                )?;
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x { x } => {
                let xs = self.value(*x).shape().to_vec();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let gd = g.data();
                let mut gx = vec![0.0; bsz * c * h * w];
                for bc in 0..bsz * c {
                    let src = &gd[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        for x2 in 0..ow {
                            dst[(y / 2) * w + x2 / 2] += src[y * ow + x2];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::Reshape { x } => {
                let d = g.reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let ls = self.value(*logits).shape().to_vec();
                let (bsz, n) = (ls[0], ls[1]);
                let gs = g.item();
                let mut gl = vec![0.0; bsz * n];
                for b in 0..bsz {
                    for j in 0..n {
                        let ind = if j == labels[b] { 1.0 } else { 0.0 };
                        gl[b * n + j] = gs * (probs[b * n + j] - ind) / bsz as f64;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(ls, gl)?);
            }
            Op::MeanSquaredError { pred, target } => {
                let pd = self.value(*pred).data();
                let td = self.value(*target).data();
                let n = pd.len() as f64;
                let gs = g.item();
                let gp: Vec<f64> = pd
                    .iter()
                    .zip(td)
                    .map(|(a, b)| gs * 2.0 * (a - b) / n)
                    .collect();
                let gt: Vec<f64> = gp.iter().map(|&v| -v).collect();
                let shape = self.value(*pred).shape().to_vec();
                self.accumulate(grads, *pred, Tensor::new(shape.clone(), gp)?);
                self.accumulate(grads, *target, Tensor::new(shape, gt)?);
            }
        }
        Ok(())
    }
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    bsz: usize,
    ic: usize,
    oc: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * wd;
    for b in 0..bsz {
        for o in 0..oc {
            let oplane = &mut out[(b * oc + o) * hw..(b * oc + o + 1) * hw];
            oplane.fill(bias[o]);
            for c in 0..ic {
                let iplane = &x[(b * ic + c) * hw..(b * ic + c + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let wv = w[((o * ic + c) * k + ky) * k + kx];
                        let dx = kx as isize - pad as isize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * wd + x0..y * wd + x1];
                            let irow = &iplane
                                [(iy * wd) as usize + ((x0 as isize + dx) as usize)..]
                                [..x1 - x0];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    bsz: usize,
    ic: usize,
    oc: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * wd;
    for b in 0..bsz {
        for o in 0..oc {
            let gplane = &g[(b * oc + o) * hw..(b * oc + o + 1) * hw];
            gb[o] += gplane.iter().sum::<f64>();
            for c in 0..ic {
                let iplane = &x[(b * ic + c) * hw..(b * ic + c + 1) * hw];
                let gxplane = &mut gx[(b * ic + c) * hw..(b * ic + c + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let wi = ((o * ic + c) * k + ky) * k + kx;
                        let wv = w[wi];
                        let dx = kx as isize - pad as isize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                        let mut wacc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let base = iy * wd + (x0 as isize + dx) as usize;
                            let grow = &gplane[y * wd + x0..y * wd + x1];
                            let irow = &iplane[base..base + (x1 - x0)];
                            let gxrow = &mut gxplane[base..base + (x1 - x0)];
                            for ((&gv, &iv), gxv) in grow.iter().zip(irow).zip(gxrow) {
                                wacc += gv * iv;
                                *gxv += wv * gv;
                            }
                        }
                        gw[wi] += wacc;
                    }
                }
            }
        }
    }
}

/// Finite-difference check of the whole tape around `inputs`.
///
/// `build` must construct the same scalar loss every time it is called; any
/// internal randomness has to be reseeded per call. Central differences with
/// step 1e-5; the relative error of element j is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) and the maximum
/// over all elements of all inputs is returned. Callers are expected to keep
/// inputs away from ReLU kinks and pooling ties, where the loss is not
/// differentiable and the comparison is meaningless.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    const H: f64 = 1e-5;
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<ValueId>, ValueId)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[ti])
            .ok_or_else(|| Error::Input(format!("grad_check: input {ti} unused by loss")))?
            .clone();
        for j in 0..input.len() {
            let orig = input.data()[j];
            perturbed[ti].data_mut()[j] = orig + H;
            let (tp, _, lp) = eval(&perturbed)?;
            let up = tp.value(lp).item();
            perturbed[ti].data_mut()[j] = orig - H;
            let (tm, _, lm) = eval(&perturbed)?;
            let down = tm.value(lm).item();
            perturbed[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
