//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is an append-only arena: every operation pushes one node
//! holding its forward value, so node order is a topological order and
//! [`Graph::backward`] simply walks it in reverse. Leaves created with
//! [`Graph::param`] receive accumulated gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::metrics::{GlobalStats, SsimConstants};
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistic momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (divisor `n - 1`) variance, as folded into running stats.
    pub var: Vec<f64>,
}

/// Exponential moving averages used by evaluation-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize by the batch's own statistics.
    Train,
    /// Normalize by stored running statistics.
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Elu {
        input: Var,
        alpha: f64,
    },
    Sigmoid {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Dssim {
        a: Var,
        b: Var,
        consts: SsimConstants,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fingerprint of the branch taken by every non-smooth op: max-pool
    /// winners and the sign of each ELU input. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::Elu { input, .. } => {
                    for &v in self.nodes[input.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Cross-correlation of `input` `(B, Cin, H, W)` with `weight`
    /// `(Cout, Cin, kh, kw)` plus a per-output-channel `bias`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (batch, cin, h, w) = x.dims4()?;
        let (cout, wcin, kh, kw) = wt.dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {} channels but weight {:?} expects {}",
                    x.shape(),
                    cin,
                    wt.shape(),
                    wcin
                ),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", self.value(bias).shape(), cout),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(x.data(), wt.data(), self.value(bias).data(), geom);
        let value = Tensor::new(&[batch, cout, geom.oh, geom.ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2. Extents must be even.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("extents must be even, got {h}x{w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(x.data(), b * c, h, w);
        let value = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Fixed 2x bilinear upsampling with half-pixel centers.
    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample", "empty spatial extent"));
        }
        let out = kernels::upsample2x_forward(x.data(), b * c, h, w);
        let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Upsample2x { input }, rg))
    }

    /// Per-channel batch normalization. In training mode the batch
    /// statistics are returned so the caller can fold them into its
    /// running statistics.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let plane = h * w;
        let m = b * plane;
        let xd = x.data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("training mode needs at least 2 values per channel, got {m}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        for v in &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval(rs) => {
                if rs.channels() != c {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("running stats hold {} channels, input has {c}", rs.channels()),
                    ));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            value,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `x` for `x > 0`, `alpha * (exp(x) - 1)` otherwise.
    pub fn elu(&mut self, input: Var, alpha: f64) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v.exp_m1() })
            .collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Elu { input, alpha }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Concatenates along the channel axis; channels of `a` come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, ca, ha, wa) = ta.dims4()?;
        let (bb, cb, hb, wb) = tb.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} and {:?} differ outside the channel axis", ta.shape(), tb.shape()),
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for bi in 0..ba {
            data.extend_from_slice(&ta.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len() as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Mean over the batch of per-image global-statistics DSSIM.
    pub fn dssim(&mut self, a: Var, b: Var, consts: SsimConstants) -> Result<Var> {
        self.same_shape("dssim", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let batch = ta.shape().first().copied().unwrap_or(1).max(1);
        let per = ta.len() / batch;
        let mut total = 0.0;
        for i in 0..batch {
            let r = i * per..(i + 1) * per;
            let st = GlobalStats::of(&ta.data()[r.clone()], &tb.data()[r]);
            total += 0.5 - 0.5 * st.ssim(&consts);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::Dssim { a, b, consts },
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `loss` to every gradient-tracking
    /// leaf. Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                if self.rg(*input) {
                    let gi = kernels::conv2d_grad_input(gd, wt.data(), *geom);
                    accumulate(adj, *input, Tensor::new(x.shape(), gi)?);
                }
                if self.rg(*weight) || self.rg(*bias) {
                    let (gw, gb) = kernels::conv2d_grad_params(gd, x.data(), *geom);
                    if self.rg(*weight) {
                        accumulate(adj, *weight, Tensor::new(wt.shape(), gw)?);
                    }
                    if self.rg(*bias) {
                        accumulate(adj, *bias, Tensor::new(&[geom.cout], gb)?);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let x = self.value(*input);
                let mut gi = vec![0.0; x.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += gd[o];
                }
                accumulate(adj, *input, Tensor::new(x.shape(), gi)?);
            }
            Op::Upsample2x { input } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4()?;
                let gi = kernels::upsample2x_adjoint(gd, b * c, h, w);
                accumulate(adj, *input, Tensor::new(x.shape(), gi)?);
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4()?;
                let plane = h * w;
                let m = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        for k in (bi * c + ch) * plane..(bi * c + ch + 1) * plane {
                            sum_dy[ch] += gd[k];
                            sum_dy_xhat[ch] += gd[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut gi = vec![0.0; x.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for k in (bi * c + ch) * plane..(bi * c + ch + 1) * plane {
                                gi[k] = if *train {
                                    scale * (gd[k] - sum_dy[ch] / m - xhat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * gd[k]
                                };
                            }
                        }
                    }
                    accumulate(adj, *input, Tensor::new(x.shape(), gi)?);
                }
                if self.rg(*gamma) {
                    accumulate(adj, *gamma, Tensor::new(&[c], sum_dy_xhat)?);
                }
                if self.rg(*beta) {
                    accumulate(adj, *beta, Tensor::new(&[c], sum_dy)?);
                }
            }
            Op::Elu { input, alpha } => {
                let x = self.value(*input);
                let gi = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > 0.0 { d } else { d * alpha * v.exp() })
                    .collect();
                accumulate(adj, *input, Tensor::new(x.shape(), gi)?);
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let gi = y.data().iter().zip(gd).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                accumulate(adj, *input, Tensor::new(y.shape(), gi)?);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).dims4()?.1;
                let (ga, gb) = g.split_channels(ca)?;
                if self.rg(*a) {
                    accumulate(adj, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(adj, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(adj, *b, g);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = tb.data().iter().zip(gd).map(|(y, d)| y * d).collect();
                    accumulate(adj, *a, Tensor::new(ta.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = ta.data().iter().zip(gd).map(|(x, d)| x * d).collect();
                    accumulate(adj, *b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                accumulate(adj, *input, Tensor::full(x.shape(), gd[0]));
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * gd[0] / ta.len() as f64;
                let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| k * (x - y)).collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    accumulate(adj, *b, Tensor::new(tb.shape(), neg)?);
                }
                if self.rg(*a) {
                    accumulate(adj, *a, Tensor::new(ta.shape(), diff)?);
                }
            }
            Op::Dssim { a, b, consts } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let batch = ta.shape().first().copied().unwrap_or(1).max(1);
                let per = ta.len() / batch;
                let scale = -0.5 * gd[0] / batch as f64;
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..batch {
                    let r = i * per..(i + 1) * per;
                    let (xa, xb) = (&ta.data()[r.clone()], &tb.data()[r.clone()]);
                    let st = GlobalStats::of(xa, xb);
                    st.ssim_grad(xa, xb, consts, scale, &mut ga[r.clone()], &mut gb[r]);
                }
                if self.rg(*a) {
                    accumulate(adj, *a, Tensor::new(ta.shape(), ga)?);
                }
                if self.rg(*b) {
                    accumulate(adj, *b, Tensor::new(tb.shape(), gb)?);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
