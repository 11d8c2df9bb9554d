//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse
//! and accumulates gradients into every node that depends on a leaf created
//! with [`Tape::leaf`]. Constants never receive gradients.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, Conv2dParams, ConvAlgorithm, ConvGeometry};
use crate::error::{config_err, dim_err, Error, Result};
use crate::math;
use crate::sampler::{self, SampleMode};
use crate::tensor::Tensor;
use crate::Mode;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Relu,
    /// Leaky slope per channel, given as a `(1, C, 1, 1)` variable.
    Prelu(Var),
    Tanh,
}

/// Regression penalty on coordinate errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceLossKind {
    /// Euclidean norm of the 2-D error.
    L2,
    /// Sum of absolute component errors.
    L1,
    /// Huber penalty per component with transition at 1.
    SmoothL1,
}

/// Per-channel statistics carried between batch-norm calls.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Tanh(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sample {
        input: Var,
        offsets: Option<Var>,
        grid: Tensor,
        mode: SampleMode,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        probs: Vec<f64>,
    },
    InstanceLoss {
        pred: Var,
        target: Tensor,
        mask: Tensor,
        kind: InstanceLossKind,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient record produced by [`Tape::backward`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Total derivative of the loss w.r.t. `v`, or `None` for constants and
    /// values the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

/// Operation recorder; see the module documentation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    algo: ConvAlgorithm,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            algo: ConvAlgorithm::Im2col,
        }
    }

    /// Selects the forward convolution kernel used by [`Tape::conv2d`].
    pub fn with_conv_algorithm(mut self, algo: ConvAlgorithm) -> Self {
        self.algo = algo;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape".to_string()));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Usage("dangling variable".to_string()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    /// Whether `v` depends on at least one leaf.
    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let bv = match b {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let geom = ConvGeometry::new(xv, wv, bv, p)?;
        let out = match self.algo {
            ConvAlgorithm::Direct => conv::forward_direct(&geom, xv, wv, bv),
            ConvAlgorithm::Im2col => conv::forward_im2col(&geom, xv, wv, bv),
        };
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Prelu(slope) => self.prelu(x, slope),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.needs(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x)?, self.value(slope)?);
        let [b, c, h, w] = xv.shape();
        if sv.len() != c {
            return Err(dim_err!("prelu: {} slopes for {c} channels", sv.len()));
        }
        let mut out = xv.clone();
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let a = sv.data()[ci];
                let start = (bi * c + ci) * hw;
                for v in &mut out.data_mut()[start..start + hw] {
                    if *v <= 0.0 {
                        *v *= a;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(out, Op::Prelu { x, slope }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(math::tanh);
        let rg = self.needs(x);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element of the
    /// window in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let [b, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("maxpool2x2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([b, c, oh, ow]);
        let mut argmax = vec![0; b * c * oh * ow];
        let d = xv.data();
        for p in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = p * h * w;
                    let cand = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cand[0];
                    for &k in &cand[1..] {
                        if d[k] > d[best] {
                            best = k;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out.data_mut()[o] = d[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(dim_err!("concat: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(av.item_slice(i));
            data.extend_from_slice(bv.item_slice(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Elementwise sum of equally shaped tensors (the residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x)?.map(|v| v * s);
        let rg = self.needs(x);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x)?.sum());
        let rg = self.needs(x);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Batch normalization over `(batch, height, width)` per channel.
    ///
    /// Train mode normalizes with the biased batch statistics and folds them
    /// into `running` (unbiased variance) with the given momentum. Eval mode
    /// applies the running statistics; it passes gradients to `x` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x)?;
        let [b, c, h, w] = xv.shape();
        let (gv, bv) = (self.value(gamma)?, self.value(beta)?);
        if gv.len() != c || bv.len() != c || running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("batchnorm: parameter lengths do not match {c} channels"));
        }
        if eps <= 0.0 {
            return Err(config_err!("batchnorm: eps must be positive"));
        }
        let n = b * h * w;
        if n == 0 {
            return Err(config_err!("batchnorm: no elements to normalize"));
        }
        match mode {
            Mode::Eval => {
                let scale: Vec<f64> = (0..c)
                    .map(|ci| gv.data()[ci] / math::sqrt(running.var[ci] + eps))
                    .collect();
                let shift: Vec<f64> = (0..c)
                    .map(|ci| bv.data()[ci] - running.mean[ci] * scale[ci])
                    .collect();
                self.channel_affine(x, &scale, &shift)
            }
            Mode::Train => {
                let hw = h * w;
                let d = xv.data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &d[(bi * c + ci) * hw..][..hw];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &d[(bi * c + ci) * hw..][..hw];
                        var[ci] += s.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
                let mut xhat = vec![0.0; xv.len()];
                let mut out = Tensor::zeros(xv.shape());
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let (g, be) = (gv.data()[ci], bv.data()[ci]);
                        for k in base..base + hw {
                            let xh = (d[k] - mean[ci]) * inv_std[ci];
                            xhat[k] = xh;
                            out.data_mut()[k] = g * xh + be;
                        }
                    }
                }
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for ci in 0..c {
                    running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                    running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci] * unbias;
                }
                let rg = self.any_grad(&[x, gamma, beta]);
                Ok(self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// `y = x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x)?;
        let [b, c, h, w] = xv.shape();
        if scale.len() != c || shift.len() != c {
            return Err(dim_err!("channel affine: coefficient lengths do not match {c} channels"));
        }
        let mut out = xv.clone();
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                for v in &mut out.data_mut()[(bi * c + ci) * hw..][..hw] {
                    *v = *v * scale[ci] + shift[ci];
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`, drawing
    /// from a generator seeded with `seed`. Eval mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability must lie in [0, 1), got {p}"));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Reads `input` at `grid + offsets`; see [`crate::sampler`].
    pub fn sample(&mut self, input: Var, grid: &Tensor, offsets: Option<Var>, mode: SampleMode) -> Result<Var> {
        let iv = self.value(input)?;
        let ov = match offsets {
            Some(o) => Some(self.value(o)?),
            None => None,
        };
        let out = sampler::guided_sample(iv, grid, ov, mode)?;
        let rg = self.needs(input) || offsets.is_some_and(|o| self.needs(o));
        Ok(self.push(
            out,
            Op::Sample {
                input,
                offsets,
                grid: grid.clone(),
                mode,
            },
            rg,
        ))
    }

    /// Mean per-pixel cross-entropy of softmax(`logits`) against `labels`
    /// (one class id per `(b, h, w)` position, row-major).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let lv = self.value(logits)?;
        let [b, c, h, w] = lv.shape();
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(dim_err!("cross entropy: {} labels for {} pixels", labels.len(), b * hw));
        }
        if b * hw == 0 {
            return Err(dim_err!("cross entropy over zero pixels"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(dim_err!("cross entropy: label {bad} out of range for {c} classes"));
        }
        let d = lv.data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let at = |ci: usize| (bi * c + ci) * hw + p;
                let m = (0..c).map(|ci| d[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ci| math::exp(d[at(ci)] - m)).sum();
                for ci in 0..c {
                    probs[at(ci)] = math::exp(d[at(ci)] - m) / z;
                }
                let l = labels[bi * hw + p] as usize;
                loss += -(d[at(l)] - m - math::ln(z));
            }
        }
        let out = Tensor::scalar(loss / (b * hw) as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean coordinate regression error over pixels where `mask` is nonzero.
    ///
    /// `pred` and `target` are `(B, 2, H, W)`, `mask` is `(B, 1, H, W)`.
    /// An empty mask yields 0 with a zero gradient.
    pub fn instance_loss(&mut self, pred: Var, target: &Tensor, mask: &Tensor, kind: InstanceLossKind) -> Result<Var> {
        let pv = self.value(pred)?;
        let [b, c, h, w] = pv.shape();
        if c != 2 || target.shape() != pv.shape() || mask.shape() != [b, 1, h, w] {
            return Err(dim_err!(
                "instance loss: pred {:?}, target {:?}, mask {:?}",
                pv.shape(),
                target.shape(),
                mask.shape()
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    if mask.at(bi, 0, i, j) == 0.0 {
                        continue;
                    }
                    count += 1;
                    let dx = pv.at(bi, 0, i, j) - target.at(bi, 0, i, j);
                    let dy = pv.at(bi, 1, i, j) - target.at(bi, 1, i, j);
                    total += match kind {
                        InstanceLossKind::L2 => math::sqrt(dx * dx + dy * dy),
                        InstanceLossKind::L1 => dx.abs() + dy.abs(),
                        InstanceLossKind::SmoothL1 => huber(dx) + huber(dy),
                    };
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::InstanceLoss {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                kind,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got shape {:?}", node.value.shape()));
        }
        if !node.requires_grad {
            return Err(Error::Usage("loss does not depend on any differentiable leaf".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(node.value.shape()));
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Intermediate gradients stay available; constants never get one.
        for (n, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv { x, w, b, geom } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let r = conv::backward(geom, val(*x), val(*w), g, need);
                if let Some(dx) = r.input {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.weight {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.bias) {
                    let db = db.reshape(val(*b).shape()).expect("bias length checked");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::Prelu { x, slope } => {
                let (xv, sv) = (val(*x), val(*slope));
                let [b, c, h, w] = xv.shape();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for bi in 0..b {
                    for ci in 0..c {
                        let a = sv.data()[ci];
                        let base = (bi * c + ci) * hw;
                        for k in base..base + hw {
                            let (v, gv) = (xv.data()[k], g.data()[k]);
                            if v > 0.0 {
                                dx.data_mut()[k] = gv;
                            } else {
                                dx.data_mut()[k] = gv * a;
                                ds.data_mut()[ci] += gv * v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, ds);
            }
            Op::Tanh(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), data).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (na, nb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(na * sa[0]);
                let mut db = Vec::with_capacity(nb * sb[0]);
                for chunk in g.data().chunks(na + nb) {
                    da.extend_from_slice(&chunk[..na]);
                    db.extend_from_slice(&chunk[na..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(sa, da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(sb, db).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = val(*x);
                let [b, c, h, w] = xv.shape();
                let hw = h * w;
                let n = (b * hw) as f64;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for k in base..base + hw {
                            dbeta[ci] += g.data()[k];
                            dgamma[ci] += g.data()[k] * xhat[k];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let k0 = gam[ci] * inv_std[ci];
                            let (mg, mgx) = (dbeta[ci] / n, dgamma[ci] / n);
                            for k in base..base + hw {
                                dx.data_mut()[k] = k0 * (g.data()[k] - mg - xhat[k] * mgx);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let shape = val(*gamma).shape();
                self.accumulate(grads, *gamma, Tensor::from_vec(shape, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(shape, dbeta).unwrap());
            }
            Op::ChannelAffine { x, scale } => {
                let [b, c, h, w] = g.shape();
                let hw = h * w;
                let mut dx = g.clone();
                for bi in 0..b {
                    for ci in 0..c {
                        for v in &mut dx.data_mut()[(bi * c + ci) * hw..][..hw] {
                            *v *= scale[ci];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::Sample {
                input,
                offsets,
                grid,
                mode,
            } => {
                let need_off = offsets.is_some_and(|o| self.needs(o));
                let (di, doff) = sampler::guided_sample_backward(
                    val(*input),
                    grid,
                    offsets.map(|o| val(o)),
                    *mode,
                    g,
                    self.needs(*input),
                    need_off,
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, di);
                }
                if let (Some(o), Some(d)) = (offsets, doff) {
                    self.accumulate(grads, *o, d);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let [b, c, h, w] = val(*logits).shape();
                let hw = h * w;
                let k = g.data()[0] / (b * hw) as f64;
                let mut d = probs.clone();
                for bi in 0..b {
                    for p in 0..hw {
                        d[(bi * c + labels[bi * hw + p] as usize) * hw + p] -= 1.0;
                    }
                }
                for v in &mut d {
                    *v *= k;
                }
                self.accumulate(grads, *logits, Tensor::from_vec([b, c, h, w], d).unwrap());
            }
            Op::InstanceLoss {
                pred,
                target,
                mask,
                kind,
                count,
            } => {
                let pv = val(*pred);
                let mut d = Tensor::zeros(pv.shape());
                if *count > 0 {
                    let k = g.data()[0] / *count as f64;
                    let [b, _, h, w] = pv.shape();
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..w {
                                if mask.at(bi, 0, i, j) == 0.0 {
                                    continue;
                                }
                                let dx = pv.at(bi, 0, i, j) - target.at(bi, 0, i, j);
                                let dy = pv.at(bi, 1, i, j) - target.at(bi, 1, i, j);
                                let (gx, gy) = match kind {
                                    InstanceLossKind::L2 => {
                                        let r = math::sqrt(dx * dx + dy * dy);
                                        if r > 0.0 {
                                            (dx / r, dy / r)
                                        } else {
                                            (0.0, 0.0)
                                        }
                                    }
                                    InstanceLossKind::L1 => (sign(dx), sign(dy)),
                                    InstanceLossKind::SmoothL1 => (huber_grad(dx), huber_grad(dy)),
                                };
                                d.set(bi, 0, i, j, k * gx);
                                d.set(bi, 1, i, j, k * gy);
                            }
                        }
                    }
                }
                self.accumulate(grads, *pred, d);
            }
        }
    }
}

#[inline]
fn huber(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

#[inline]
fn huber_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        sign(d)
    }
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[3.0, -1.0, 2.5]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]));
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]));
        let c = t.constant(row(&[5.0, 5.0]));
        let y = t.add(x, c).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Dimension(_))));
        let c = t.constant(row(&[1.0]));
        assert!(matches!(t.backward(c), Err(Error::Usage(_))));
        let mut other = Tape::new();
        let y = other.leaf(row(&[1.0]));
        assert!(matches!(t.backward(y), Err(Error::Usage(_))));
        assert!(matches!(t.sum(y), Err(Error::Usage(_))));
    }

    #[test]
    fn prelu_and_tanh_values() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[-4.0, 4.0]));
        let a = t.leaf(Tensor::vector(&[0.25]));
        let y = t.activation(x, Activation::Prelu(a)).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[-1.0, 4.0]);
        let z = t.constant(row(&[0.0, 100.0]));
        let th = t.activation(z, Activation::Tanh).unwrap();
        let v = t.value(th).unwrap().data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-12);
        let bad = t.leaf(Tensor::vector(&[0.1, 0.2]));
        assert!(matches!(t.prelu(x, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_values_and_ties() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.maxpool2x2(x).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[4.0]);
        let n = t.leaf(Tensor::from_vec([1, 1, 2, 2], vec![-1.0, -2.0, -3.0, -4.0]).unwrap());
        let yn = t.maxpool2x2(n).unwrap();
        assert_eq!(t.value(yn).unwrap().data(), &[-1.0]);

        let c = t.leaf(Tensor::full([1, 1, 2, 4], 7.0));
        let yc = t.maxpool2x2(c).unwrap();
        assert_eq!(t.value(yc).unwrap().data(), &[7.0, 7.0]);
        let s = t.sum(yc).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(
            g.get(c).unwrap().data(),
            &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let odd = t.leaf(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(t.maxpool2x2(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_layout() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full([1, 3, 4, 4], 1.0));
        let b = t.leaf(Tensor::full([1, 13, 4, 4], 2.0));
        let c = t.concat_channels(a, b).unwrap();
        let cv = t.value(c).unwrap();
        assert_eq!(cv.shape(), [1, 16, 4, 4]);
        assert_eq!(cv.plane(0, 0), t.value(a).unwrap().plane(0, 0));
        let e = t.leaf(Tensor::zeros([1, 0, 4, 4]));
        let same = t.concat_channels(a, e).unwrap();
        assert_eq!(t.value(same).unwrap(), t.value(a).unwrap());
        let wrong = t.leaf(Tensor::zeros([1, 1, 2, 4]));
        assert!(t.concat_channels(a, wrong).is_err());
    }

    #[test]
    fn residual_add_values_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(row(&[1.0, 2.0]));
        let b = t.leaf(row(&[3.0, 4.0]));
        let c = t.residual_add(a, b).unwrap();
        assert_eq!(t.value(c).unwrap().data(), &[4.0, 6.0]);
        let z = t.constant(row(&[0.0, 0.0]));
        let az = t.residual_add(a, z).unwrap();
        assert_eq!(t.value(az).unwrap(), t.value(a).unwrap());
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        let bad = t.leaf(row(&[1.0]));
        assert!(t.residual_add(a, bad).is_err());
    }

    #[test]
    fn batchnorm_modes() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::rand_normal([4, 3, 5, 5], 2.0, &mut rng).map(|v| v + 1.5);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let gamma = t.leaf(Tensor::vector(&[1.0; 3]));
        let beta = t.leaf(Tensor::vector(&[0.0; 3]));
        let mut rs = RunningStats::new(3);
        let y = t.batchnorm2d(x, gamma, beta, &mut rs, Mode::Eval, 0.1, 1e-12).unwrap();
        assert!(t.value(y).unwrap().max_abs_diff(&x0).unwrap() < 1e-9);
        assert_eq!(rs, RunningStats::new(3));

        let y = t.batchnorm2d(x, gamma, beta, &mut rs, Mode::Train, 0.1, 1e-12).unwrap();
        let yv = t.value(y).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| yv.plane(b, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
        assert_ne!(rs, RunningStats::new(3));

        let g0 = t.leaf(Tensor::vector(&[0.0; 3]));
        let b5 = t.leaf(Tensor::vector(&[5.0; 3]));
        let y = t.batchnorm2d(x, g0, b5, &mut rs, Mode::Train, 0.1, 1e-5).unwrap();
        assert!(t.value(y).unwrap().data().iter().all(|&v| v == 5.0));

        let empty = t.leaf(Tensor::zeros([0, 3, 2, 2]));
        assert!(matches!(
            t.batchnorm2d(empty, gamma, beta, &mut rs, Mode::Train, 0.1, 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_behaviour() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones([1, 1, 100, 100]));
        assert_eq!(t.dropout(x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, Mode::Eval, 1).unwrap(), x);
        let y = t.dropout(x, 0.5, Mode::Train, 42).unwrap();
        let yv = t.value(y).unwrap();
        let kept = yv.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
        assert!((kept - 0.5).abs() < 0.02, "survivor fraction {kept}");
        assert!(yv.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let y2 = t.dropout(x, 0.5, Mode::Train, 42).unwrap();
        assert_eq!(t.value(y2).unwrap(), t.value(y).unwrap());
        assert!(matches!(t.dropout(x, 1.0, Mode::Train, 1), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros([1, 4, 2, 2]));
        let loss = t.softmax_cross_entropy(l, &[0, 1, 2, 3]).unwrap();
        assert!((t.value(loss).unwrap().item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(t.softmax_cross_entropy(l, &[0, 1, 2, 4]).is_err());
    }

    #[test]
    fn instance_loss_values() {
        let target = Tensor::zeros([1, 2, 1, 2]);
        let mut mask = Tensor::zeros([1, 1, 1, 2]);
        mask.set(0, 0, 0, 0, 1.0);
        let pred0 = Tensor::from_vec([1, 2, 1, 2], vec![0.3, 9.0, 0.4, 9.0]).unwrap();
        let expect = [
            (InstanceLossKind::L2, 0.5),
            (InstanceLossKind::L1, 0.7),
            (InstanceLossKind::SmoothL1, 0.5 * (0.09 + 0.16)),
        ];
        for (kind, e) in expect {
            let mut t = Tape::new();
            let p = t.leaf(pred0.clone());
            let l = t.instance_loss(p, &target, &mask, kind).unwrap();
            assert!((t.value(l).unwrap().item().unwrap() - e).abs() < 1e-12);
            let same = t.leaf(target.clone());
            let z = t.instance_loss(same, &target, &mask, kind).unwrap();
            assert_eq!(t.value(z).unwrap().item().unwrap(), 0.0);
        }
        let mut t = Tape::new();
        let p = t.leaf(pred0);
        let l = t.instance_loss(p, &target, &Tensor::zeros([1, 1, 1, 2]), InstanceLossKind::L2).unwrap();
        assert_eq!(t.value(l).unwrap().item().unwrap(), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut t = Tape::new();
            let x = t.leaf(Tensor::rand_normal([2, 3, 6, 6], 1.0, &mut rng));
            let w = t.leaf(Tensor::rand_normal([4, 3, 3, 3], 1.0, &mut rng));
            let y = t.conv2d(x, w, None, Conv2dParams::same(3, 3, (1, 1))).unwrap();
            let y = t.dropout(y, 0.3, Mode::Train, 5).unwrap();
            let y = t.tanh(y).unwrap();
            let s = t.sum(y).unwrap();
            let g = t.backward(s).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }
}
