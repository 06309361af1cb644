//! Dense 64-bit arrays and a small reverse-mode tape.
//!
//! The tape only knows the handful of operations the regressor, the
//! discriminator and the adaptation losses need. Rasters are laid out as
//! `[C, H, W]` or `[N, C, H, W]`, row-major. Every kernel runs in a fixed
//! order so two runs over the same inputs produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::InvalidShape(format!(
                    "stack of {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let reach = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < reach {
            return None;
        }
        Some((padded - reach) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-12;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        spec: ConvSpec,
    },
    Relu(usize),
    Sigmoid(usize),
    AvgPool2(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    SumAll(usize),
    MeanAll(usize),
    SumPerItem(usize),
    MeanPerItem(usize),
    GradReverse {
        input: usize,
        mu: f64,
    },
    Concat(Vec<usize>),
    Select {
        input: usize,
        index: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Hinge {
        input: usize,
        margin: f64,
    },
    Mse {
        pred: usize,
        target: Vec<f64>,
        items: usize,
    },
    Bce {
        input: usize,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations; nodes are appended in execution order, so
/// the tape is topologically sorted by construction.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    retain: Vec<bool>,
    kinks: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn fold(hash: u64, bit: bool) -> u64 {
    (hash ^ bit as u64).wrapping_mul(0x0000_0100_0000_01b3)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain: Vec::new(),
            kinks: None,
        }
    }

    /// Starts fingerprinting which side of every ReLU/hinge kink each value
    /// lands on. Used by gradient checks to detect kink crossings.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kinks
    }

    /// Records an externally decided non-differentiable branch.
    pub fn note_branch(&mut self, taken: bool) {
        if let Some(h) = self.kinks.as_mut() {
            *h = fold(*h, taken);
        }
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
        self.grads.push(None);
        self.retain.push(false);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.push(value, Op::Leaf, requires_grad);
        self.retain[id.0] = true;
        id
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Keeps the gradient of an intermediate value after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retain[v.0] = true;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let (n, c, h, wd) = dims4(&x.shape)?;
        let [k, wc, kh, kw] = *w.shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "conv weight must be [K,C,kh,kw], got {:?}",
                w.shape
            )));
        };
        if wc != c {
            return Err(Error::InvalidShape(format!(
                "conv input has {c} channels, weight expects {wc}"
            )));
        }
        if b.shape != [k] {
            return Err(Error::InvalidShape(format!(
                "conv bias must be [{k}], got {:?}",
                b.shape
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {kh}x{kw} with {spec:?}"
            )));
        }
        let (ho, wo) = match (spec.output_extent(h, kh), spec.output_extent(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "conv {kh}x{kw} {spec:?} does not fit a {h}x{wd} input"
                )))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let p = ho * wo;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * k * p];
        let mut col = vec![0.0; ckk * p];
        for img in 0..n {
            let xs = &x.data[img * c * h * wd..(img + 1) * c * h * wd];
            im2col(xs, &geom, &mut col);
            let o = &mut out[img * k * p..(img + 1) * k * p];
            for (kk, row) in o.chunks_exact_mut(p).enumerate() {
                row.fill(b.data[kk]);
            }
            gemm(k, ckk, p, &w.data, (ckk, 1), &col, (p, 1), 1.0, o, p);
        }
        let shape = if x.shape.len() == 3 {
            vec![k, ho, wo]
        } else {
            vec![n, k, ho, wo]
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                spec,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let data: Vec<f64> = x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        if let Some(mut h) = self.kinks {
            for &v in &x.data {
                h = fold(h, v > 0.0);
            }
            self.kinks = Some(h);
        }
        let shape = x.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::Relu(input.0), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = x.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::Sigmoid(input.0), rg)
    }

    pub fn avgpool2(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = dims4(&x.shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "avgpool2 needs even extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for i in 0..ho {
                let r0 = &src[2 * i * w..(2 * i + 1) * w];
                let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..wo {
                    dst[i * wo + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * 0.25;
                }
            }
        }
        let mut shape = x.shape.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data: out }, Op::AvgPool2(input.0), rg))
    }

    /// Per-channel batch normalization. In train mode statistics come from
    /// the batch and `stats` is updated with momentum 0.1 (unbiased
    /// variance); in eval mode `stats` is used as-is.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = dims4(&x.shape)?;
        let hw = h * w;
        let m = n * hw;
        if m == 0 {
            return Err(Error::InvalidShape("batchnorm over zero elements".into()));
        }
        let g = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        if g.shape != [c] || bt.shape != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::InvalidShape(format!(
                "batchnorm affine/stats must have {c} channels"
            )));
        }
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = vec![0.0; x.data.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0;
                    for img in 0..n {
                        let off = (img * c + ch) * hw;
                        s += x.data[off..off + hw].iter().sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut sq = 0.0;
                    for img in 0..n {
                        let off = (img * c + ch) * hw;
                        sq += x.data[off..off + hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / m as f64;
                    let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for img in 0..n {
                let off = (img * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g.data[ch] * xh + bt.data[ch];
                }
            }
        }
        let shape = x.shape.clone();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                mode,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let s = self.nodes[input.0].value.sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::SumAll(input.0), rg)
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let s = x.sum() / x.len() as f64;
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::MeanAll(input.0), rg)
    }

    /// Sums every item of a batch: `[N, ...] -> [N]`.
    pub fn sum_per_item(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let n = x.shape[0];
        let per = x.len() / n;
        let data = x.data.chunks_exact(per).map(|c| c.iter().sum()).collect();
        let rg = self.rg(input);
        self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::SumPerItem(input.0),
            rg,
        )
    }

    pub fn mean_per_item(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let n = x.shape[0];
        let per = x.len() / n;
        let data = x
            .data
            .chunks_exact(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        let rg = self.rg(input);
        self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::MeanPerItem(input.0),
            rg,
        )
    }

    /// Identity forward; backward scales the upstream gradient by `-mu`.
    pub fn grad_reverse(&mut self, input: Var, mu: f64) -> Result<Var> {
        if !(mu >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal coefficient must be >= 0, got {mu}"
            )));
        }
        let value = self.nodes[input.0].value.clone();
        let rg = self.rg(input);
        Ok(self.push(value, Op::GradReverse { input: input.0, mu }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let tail = self.nodes[first.0].value.shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in inputs {
            let t = &self.nodes[v.0].value;
            if t.shape[1..] != tail[..] {
                return Err(Error::InvalidShape(format!(
                    "concat of {:?} with trailing {tail:?}",
                    t.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat(inputs.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let v = *x.data.get(index).ok_or_else(|| {
            Error::InvalidShape(format!("index {index} out of {} values", x.len()))
        })?;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Select {
                input: input.0,
                index,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, sub: bool) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape != tb.shape {
            return Err(Error::InvalidShape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| if sub { x - y } else { x + y })
            .collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        let op = if sub { Op::Sub(a.0, b.0) } else { Op::Add(a.0, b.0) };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data.iter().map(|v| v * factor).collect();
        let shape = x.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::Scale(input.0, factor), rg)
    }

    /// Elementwise `max(0, -x + margin)`; the subgradient at the hinge is 0.
    pub fn hinge(&mut self, input: Var, margin: f64) -> Var {
        let x = &self.nodes[input.0].value;
        let data: Vec<f64> = x.data.iter().map(|&v| (-v + margin).max(0.0)).collect();
        if let Some(mut h) = self.kinks {
            for &v in &x.data {
                h = fold(h, -v + margin > 0.0);
            }
            self.kinks = Some(h);
        }
        let shape = x.shape.clone();
        let rg = self.rg(input);
        self.push(
            Tensor { shape, data },
            Op::Hinge {
                input: input.0,
                margin,
            },
            rg,
        )
    }

    /// `sum((target - pred)^2) / (2 N)` where `N` is the leading extent.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        if p.shape != target.shape {
            return Err(Error::InvalidShape(format!(
                "mse of {:?} against {:?}",
                p.shape, target.shape
            )));
        }
        let items = if p.shape.len() == 4 { p.shape[0] } else { 1 };
        let ss: f64 = p
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        let loss = ss / (2.0 * items as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pred.0,
                target: target.data.clone(),
                items,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// the probability clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = &self.nodes[probs.0].value;
        if p.len() != labels.len() {
            return Err(Error::InvalidShape(format!(
                "bce over {} probabilities with {} labels",
                p.len(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let loss = p
            .data
            .iter()
            .zip(labels)
            .map(|(&q, &y)| bce_value(q, y))
            .sum::<f64>()
            / n;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                input: probs.0,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    fn acc(&mut self, id: usize, f: impl FnOnce(&mut [f64], &[f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(g, &self.nodes[id].value.data);
    }

    /// Back-propagates from a scalar root. Gradients of leaves (and of
    /// values marked with [`Graph::retain_grad`]) remain readable.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g);
            if self.retain[id] {
                self.grads[id] = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: &[f64]) {
        // Ops are temporarily swapped out so the node list can be borrowed
        // mutably while reading the saved state.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => self.conv_backward(*input, *weight, *bias, *spec, g),
            Op::Relu(x) => self.acc(*x, |gx, xv| {
                for ((o, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *o += u;
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let y = std::mem::take(&mut self.nodes[id].value.data);
                self.acc(*x, |gx, _| {
                    for ((o, &u), &s) in gx.iter_mut().zip(g).zip(&y) {
                        *o += u * s * (1.0 - s);
                    }
                });
                self.nodes[id].value.data = y;
            }
            Op::AvgPool2(x) => {
                let shape = self.nodes[*x].value.shape.clone();
                let r = shape.len();
                let (h, w) = (shape[r -2], shape[r - 1]);
                let (ho, wo) = (h / 2, w / 2);
                self.acc(*x, |gx, _| {
                    for (plane, gp) in g.chunks_exact(ho * wo).enumerate() {
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let q = gp[i * wo + j] * 0.25;
                                dst[2 * i * w + 2 * j] += q;
                                dst[2 * i * w + 2 * j + 1] += q;
                                dst[(2 * i + 1) * w + 2 * j] += q;
                                dst[(2 * i + 1) * w + 2 * j + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => self.bn_backward(*input, *gamma, *beta, xhat, inv_std, *mode, g),
            Op::SumAll(x) => self.acc(*x, |gx, _| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::MeanAll(x) => self.acc(*x, |gx, _| {
                let q = g[0] / gx.len() as f64;
                for o in gx.iter_mut() {
                    *o += q;
                }
            }),
            Op::SumPerItem(x) | Op::MeanPerItem(x) => {
                let mean = matches!(op, Op::MeanPerItem(_));
                self.acc(*x, |gx, _| {
                    let per = gx.len() / g.len();
                    let div = if mean { per as f64 } else { 1.0 };
                    for (chunk, &u) in gx.chunks_exact_mut(per).zip(g) {
                        let q = u / div;
                        for o in chunk {
                            *o += q;
                        }
                    }
                });
            }
            Op::GradReverse { input, mu } => {
                let f = -mu;
                self.acc(*input, |gx, _| {
                    for (o, &u) in gx.iter_mut().zip(g) {
                        *o += f * u;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(p, |gx, _| {
                        for (o, &u) in gx.iter_mut().zip(&g[off..off + len]) {
                            *o += u;
                        }
                    });
                    off += len;
                }
            }
            Op::Select { input, index } => self.acc(*input, |gx, _| gx[*index] += g[0]),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(*a, |gx, _| {
                    for (o, &u) in gx.iter_mut().zip(g) {
                        *o += u;
                    }
                });
                self.acc(*b, |gx, _| {
                    for (o, &u) in gx.iter_mut().zip(g) {
                        *o += sign * u;
                    }
                });
            }
            Op::Scale(x, f) => self.acc(*x, |gx, _| {
                for (o, &u) in gx.iter_mut().zip(g) {
                    *o += f * u;
                }
            }),
            Op::Hinge { input, margin } => self.acc(*input, |gx, xv| {
                for ((o, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if -v + margin > 0.0 {
                        *o -= u;
                    }
                }
            }),
            Op::Mse {
                pred,
                target,
                items,
            } => {
                let q = g[0] / *items as f64;
                self.acc(*pred, |gx, pv| {
                    for ((o, &p), &t) in gx.iter_mut().zip(pv).zip(target) {
                        *o += q * (p - t);
                    }
                });
            }
            Op::Bce { input, labels } => {
                let q = g[0] / labels.len() as f64;
                self.acc(*input, |gx, pv| {
                    for ((o, &p), &y) in gx.iter_mut().zip(pv).zip(labels) {
                        *o += q * bce_grad(p, y);
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    fn conv_backward(&mut self, input: usize, weight: usize, bias: usize, spec: ConvSpec, g: &[f64]) {
        let (n, c, h, w) = dims4(&self.nodes[input].value.shape).expect("checked in forward");
        let wshape = self.nodes[weight].value.shape.clone();
        let (k, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        let ho = spec.output_extent(h, kh).unwrap();
        let wo = spec.output_extent(w, kw).unwrap();
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let p = ho * wo;
        let ckk = c * kh * kw;
        let need_w = self.nodes[weight].requires_grad;
        let need_x = self.nodes[input].requires_grad;

        if self.nodes[bias].requires_grad {
            self.acc(bias, |gb, _| {
                for img in 0..n {
                    for (kk, o) in gb.iter_mut().enumerate() {
                        let off = (img * k + kk) * p;
                        *o += g[off..off + p].iter().sum::<f64>();
                    }
                }
            });
        }
        let mut col = vec![0.0; ckk * p];
        if need_w {
            let mut gw = self.grads[weight].take().unwrap_or_else(|| vec![0.0; k * ckk]);
            let x = &self.nodes[input].value.data;
            for img in 0..n {
                im2col(&x[img * c * h * w..(img + 1) * c * h * w], &geom, &mut col);
                let go = &g[img * k * p..(img + 1) * k * p];
                gemm(k, p, ckk, go, (p, 1), &col, (1, p), 1.0, &mut gw, ckk);
            }
            self.grads[weight] = Some(gw);
        }
        if need_x {
            let mut gx = self.grads[input].take().unwrap_or_else(|| vec![0.0; n * c * h * w]);
            let wd = &self.nodes[weight].value.data;
            for img in 0..n {
                let go = &g[img * k * p..(img + 1) * k * p];
                gemm(ckk, k, p, wd, (1, ckk), go, (p, 1), 0.0, &mut col, p);
                col2im_add(&col, &geom, &mut gx[img * c * h * w..(img + 1) * c * h * w]);
            }
            self.grads[input] = Some(gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &mut self,
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: &[f64],
        inv_std: &[f64],
        mode: BnMode,
        g: &[f64],
    ) {
        let (n, c, h, w) = dims4(&self.nodes[input].value.shape).expect("checked in forward");
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            for img in 0..n {
                let off = (img * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let gam = self.nodes[gamma].value.data.clone();
        self.acc(input, |gx, _| {
            for ch in 0..c {
                let scale = gam[ch] * inv_std[ch];
                match mode {
                    BnMode::Eval => {
                        for img in 0..n {
                            let off = (img * c + ch) * hw;
                            for i in off..off + hw {
                                gx[i] += scale * g[i];
                            }
                        }
                    }
                    BnMode::Train => {
                        // dxhat = g * gamma; sums reuse dgamma/dbeta.
                        for img in 0..n {
                            let off = (img * c + ch) * hw;
                            for i in off..off + hw {
                                gx[i] += scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m);
                            }
                        }
                    }
                }
            }
        });
        self.acc(gamma, |gg, _| {
            for (o, d) in gg.iter_mut().zip(&dgamma) {
                *o += d;
            }
        });
        self.acc(beta, |gb, _| {
            for (o, d) in gb.iter_mut().zip(&dbeta) {
                *o += d;
            }
        });
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(p: f64, y: f64) -> f64 {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

/// Unfolds receptive fields into a `(C*kh*kw) x (Ho*Wo)` matrix.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.ho * g.wo;
    let s = g.spec.stride as isize;
    let d = g.spec.dilation as isize;
    let pad = g.spec.padding as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh as isize {
            for kj in 0..g.kw as isize {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - pad + ki * d;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kj * d;
                        *o = if ix >= 0 && ix < w { src[ix as usize] } else { 0.0 };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.ho * g.wo;
    let s = g.spec.stride as isize;
    let d = g.spec.dilation as isize;
    let pad = g.spec.padding as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh as isize {
            for kj in 0..g.kw as isize {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - pad + ki * d;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = ox as isize * s - pad + kj * d;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n` given as
/// (row stride, column stride) pairs and `c` row-major with stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the asserted extents keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let data: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 5, 5], data.clone()).unwrap());
        let w = g.param(Tensor::new(vec![1, 1, 3, 3], kernel).unwrap());
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let spec = ConvSpec::new(2, 1, 1);
        assert_eq!(spec.output_extent(32, 3), Some(16));
        assert_eq!(ConvSpec::new(1, 3, 3).output_extent(32, 3), Some(32));
        assert_eq!(ConvSpec::new(1, 1, 0).output_extent(7, 3), Some(5));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 4, 4]));
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        assert!(matches!(
            g.conv2d(x, w, b, ConvSpec::new(1, 1, 1)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-3.0, -0.5]));
        let y = g.relu(x);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn avgpool_block_mean() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.avgpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);

        let x = g.input(Tensor::full(&[2, 4, 6], 1.75));
        let y = g.avgpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));

        let x = g.input(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.avgpool2(x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // per-channel mean 0, biased variance 1
        let data = vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 2, 2], data.clone()).unwrap());
        let gamma = g.param(Tensor::full(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let mut stats = BnStats::new(2);
        let y = g.batchnorm(x, gamma, beta, BnMode::Train, &mut stats).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // running stats moved toward batch stats
        assert!((stats.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![0.3, 9.0, -4.0, 1.0]).unwrap());
        let gamma = g.param(Tensor::zeros(&[1]));
        let beta = g.param(Tensor::full(&[1], 0.7));
        let mut stats = BnStats::new(1);
        let y = g.batchnorm(x, gamma, beta, BnMode::Train, &mut stats).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.0, 50.0, -50.0, 800.0, -800.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!(v[2].abs() < 1e-15 && v[2] > 0.0);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[4], 0.0);
    }

    #[test]
    fn sum_all_and_upstream_broadcast() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum_all(x);
        assert_eq!(g.scalar(s), 6.0);
        let two = g.scale(s, 2.0);
        g.backward(two).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negated_backward() {
        let data = vec![0.1, -7.25, 3.0e-300, f64::MIN_POSITIVE];
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(data.clone()));
        let y = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.grad_reverse(x, 0.1).unwrap();
        let z = g.scale(y, 1.0);
        let s = g.sum_all(z);
        let s = g.scale(s, 3.5);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-0.1 * 3.5, -0.1 * 3.5]);
        assert!(g.grad_reverse(x, -1.0).is_err());
    }

    #[test]
    fn hinge_and_bce_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![6.0, -6.0, 0.0]));
        let h = g.hinge(x, 0.0);
        assert_eq!(g.value(h).data(), &[0.0, 6.0, 0.0]);
        let s = g.sum_all(h);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, -1.0, 0.0]);

        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(vec![0.5, 0.5, 1.0]));
        let l = g.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        assert!((g.scalar(l) - 2.0 * std::f64::consts::LN_2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn intermediate_grads_dropped_unless_retained() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        let z = g.scale(x, 3.0);
        g.retain_grad(z);
        let a = g.add(y, z).unwrap();
        let s = g.sum_all(a);
        g.backward(s).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad(z).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(x).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }
}
