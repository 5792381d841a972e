//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. Nodes only reference earlier nodes, so the tape is
//! topologically ordered by construction and `backward` walks it in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities entering the BCE loss are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GroupMax {
        input: Var,
        pieces: usize,
        argmax: Vec<usize>,
    },
    Bce {
        prob: Var,
        target: Var,
    },
    Sum(Var),
    Mean(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of every operation of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            requires_grad: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 2D cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        expect_rank("conv2d input", x, 4)?;
        expect_rank("conv2d kernel", k, 4)?;
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![c_out],
                got: b.shape().to_vec(),
            });
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {hp}x{wp} not tiled by kernel {kh}x{kw} at stride {stride}"),
            ));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        };
        let rows = geom.col_rows();
        let cols = geom.col_cols();
        // one wide product over the whole batch: [c_out, rows] · [rows, n·cols]
        let wide = n * cols;
        let col = batch_im2col(&geom, x.data(), n);
        let mut prod = vec![0.0; c_out * wide];
        kernels::gemm_nn(c_out, rows, wide, k.data(), &col, &mut prod);
        let mut out = vec![0.0; n * c_out * cols];
        for (s, dst) in out.chunks_mut(c_out * cols).enumerate() {
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                let bias = b.data()[oc];
                let src = &prod[oc * wide + s * cols..oc * wide + (s + 1) * cols];
                for (o, &v) in chunk.iter_mut().zip(src) {
                    *o = v + bias;
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Per-channel batch normalization of `[N, C, H, W]`.
    ///
    /// In train mode the batch statistics normalize the input and are folded
    /// into `running` with momentum [`BN_MOMENTUM`] (unbiased variance).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        expect_rank("batch_norm", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} must have shape [{c}], got {:?}", self.value(p).shape()),
                ));
            }
        }
        if running.channels() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("running stats hold {} channels, input has {c}", running.channels()),
            ));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::dim("batch_norm", "train mode needs a batch of at least 2"));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        mean[ch] += xd[base..base + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let m = mean[ch];
                        var[ch] += xd[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
            }
            Mode::Eval => {
                mean.copy_from_slice(&running.mean);
                var.copy_from_slice(&running.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if mode == Mode::Train {
            let unbias = count / (count - 1.0);
            for ch in 0..c {
                running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                running.var[ch] =
                    (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid(input), &[input])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    /// Elementwise product with a constant (non-differentiable) mask.
    pub fn mul_const(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        let x = self.value(input);
        same_shape("mul_const", x, mask)?;
        let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(input, mask.data().to_vec()), &[input]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            },
            &[input],
        ))
    }

    /// Maxout reduction of `[N, k·d]` to `[N, d]`; group `j` is the contiguous
    /// run of features `j·k .. j·k + k`. Ties resolve to the lowest piece.
    pub fn group_max(&mut self, input: Var, pieces: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("group_max", x, 2)?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if pieces == 0 || f % pieces != 0 {
            return Err(Error::dim(
                "group_max",
                format!("feature dim {f} not divisible into {pieces} pieces"),
            ));
        }
        let d = f / pieces;
        let mut out = Vec::with_capacity(n * d);
        let mut argmax = Vec::with_capacity(n * d);
        for group in x.data().chunks(pieces) {
            let (best, val) = group
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            out.push(val);
            argmax.push(best);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::GroupMax {
                input,
                pieces,
                argmax,
            },
            &[input],
        ))
    }

    /// Mean binary cross-entropy; targets may be fractional.
    pub fn bce_loss(&mut self, prob: Var, target: Var) -> Result<Var> {
        let (p, y) = (self.value(prob), self.value(target));
        same_shape("bce_loss", p, y)?;
        if let Some(bad) = y.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("bce target {bad} outside [0, 1]")));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { prob, target }, &[prob, target]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(input), &[input])
    }

    /// `[N, F] · [O, F]ᵀ + [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        expect_rank("linear input", x, 2)?;
        expect_rank("linear weight", w, 2)?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let (o, wf) = (w.shape()[0], w.shape()[1]);
        if wf != f {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![o, f],
                got: w.shape().to_vec(),
            });
        }
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                expected: vec![o],
                got: b.shape().to_vec(),
            });
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        kernels::gemm_nt(n, f, o, x.data(), w.data(), &mut out);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Batched matrix product `[B, M, K] · [B, K, L]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("bmm lhs", ta, 3)?;
        expect_rank("bmm rhs", tb, 3)?;
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bs2, k2, l) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        if bs != bs2 || k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; bs * m * l];
        for s in 0..bs {
            kernels::gemm_nn(
                m,
                k,
                l,
                &ta.data()[s * m * k..(s + 1) * m * k],
                &tb.data()[s * k * l..(s + 1) * k * l],
                &mut out[s * m * l..(s + 1) * m * l],
            );
        }
        let value = Tensor::new(vec![bs, m, l], out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("transpose", x, 3)?;
        let (bs, r, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let value = Tensor::new(vec![bs, c, r], transpose_batched(x.data(), bs, r, c))?;
        Ok(self.push(value, Op::Transpose(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Mean over the spatial axes of `[N, C, H, W]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("global_avg_pool", x, 4)?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let shaped = |like: Var, data: Vec<f64>| {
            Tensor::new(self.value(like).shape().to_vec(), data).expect("grad shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let c_out = k.shape()[0];
                let n = x.shape()[0];
                let rows = geom.col_rows();
                let cols = geom.col_cols();
                let sample = geom.c_in * geom.h * geom.w;
                let wide = n * cols;
                // gradient laid out as [c_out, n·cols] to match the forward product
                let mut g = vec![0.0; c_out * wide];
                let mut db = vec![0.0; c_out];
                for (s, gs) in gd.chunks(c_out * cols).enumerate() {
                    for (oc, chunk) in gs.chunks(cols).enumerate() {
                        db[oc] += chunk.iter().sum::<f64>();
                        g[oc * wide + s * cols..oc * wide + (s + 1) * cols].copy_from_slice(chunk);
                    }
                }
                let mut dk = vec![0.0; k.len()];
                if self.wants(*kernel) {
                    let col = batch_im2col(geom, x.data(), n);
                    kernels::gemm_nt(c_out, wide, rows, &g, &col, &mut dk);
                }
                let want_x = self.wants(*input);
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                if want_x {
                    let mut dcol = vec![0.0; rows * wide];
                    kernels::gemm_tn(rows, c_out, wide, k.data(), &g, &mut dcol);
                    for s in 0..n {
                        kernels::col2im(geom, &dcol[s * cols..], &mut dx[s * sample..(s + 1) * sample], wide);
                    }
                }
                self.accumulate(grads, *kernel, shaped(*kernel, dk));
                self.accumulate(grads, *bias, shaped(*bias, db));
                if want_x {
                    self.accumulate(grads, *input, shaped(*input, dx));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let hw = shape[2] * shape[3];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    let count = (n * hw) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    // dxhat = g·gamma; sums of dxhat and dxhat·xhat
                                    // per channel are gamma·dbeta and gamma·dgamma.
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, shaped(*input, dx));
                }
                self.accumulate(grads, *gamma, shaped(*gamma, dgamma));
                self.accumulate(grads, *beta, shaped(*beta, dbeta));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, shaped(*a, da));
                self.accumulate(grads, *b, shaped(*b, db));
            }
            Op::Scale(input, factor) => {
                self.accumulate(grads, *input, g.map(|v| v * factor));
            }
            Op::MulConst(input, mask) => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::GroupMax {
                input,
                pieces,
                argmax,
            } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (group, (&best, &gv)) in argmax.iter().zip(gd).enumerate() {
                    dx[group * pieces + best] = gv;
                }
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::Bce { prob, target } => {
                let (p, y) = (self.value(*prob).data(), self.value(*target).data());
                let scale = gd[0] / p.len() as f64;
                if self.wants(*prob) {
                    let dp = p
                        .iter()
                        .zip(y)
                        .map(|(&p, &y)| {
                            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                                0.0
                            } else {
                                scale * (p - y) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    self.accumulate(grads, *prob, shaped(*prob, dp));
                }
                if self.wants(*target) {
                    let dy = p
                        .iter()
                        .map(|&p| {
                            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            -scale * (p.ln() - (1.0 - p).ln())
                        })
                        .collect();
                    self.accumulate(grads, *target, shaped(*target, dy));
                }
            }
            Op::Sum(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let v = gd[0] / x.len() as f64;
                self.accumulate(grads, *input, Tensor::full(x.shape(), v));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm_nn(n, o, f, gd, w.data(), &mut dx);
                    self.accumulate(grads, *input, shaped(*input, dx));
                }
                let mut dw = vec![0.0; o * f];
                kernels::gemm_tn(o, n, f, gd, x.data(), &mut dw);
                self.accumulate(grads, *weight, shaped(*weight, dw));
                let mut db = vec![0.0; o];
                for row in gd.chunks(o) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *bias, shaped(*bias, db));
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let l = tb.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; ta.len()];
                    for s in 0..bs {
                        kernels::gemm_nt(
                            m,
                            l,
                            k,
                            &gd[s * m * l..(s + 1) * m * l],
                            &tb.data()[s * k * l..(s + 1) * k * l],
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, shaped(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; tb.len()];
                    for s in 0..bs {
                        kernels::gemm_tn(
                            k,
                            m,
                            l,
                            &ta.data()[s * m * k..(s + 1) * m * k],
                            &gd[s * m * l..(s + 1) * m * l],
                            &mut db[s * k * l..(s + 1) * k * l],
                        );
                    }
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::Transpose(input) => {
                let shape = node.value.shape();
                let dx = transpose_batched(gd, shape[0], shape[1], shape[2]);
                self.accumulate(grads, *input, shaped(*input, dx));
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, shaped(*input, gd.to_vec()));
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                let hw = shape[2] * shape[3];
                let dx = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                self.accumulate(grads, *input, shaped(*input, dx));
            }
        }
    }
}

/// Patch matrices of all `n` samples side by side: `[rows, n·cols]`.
fn batch_im2col(geom: &ConvGeometry, x: &[f64], n: usize) -> Vec<f64> {
    let (cols, sample) = (geom.col_cols(), geom.c_in * geom.h * geom.w);
    let wide = n * cols;
    let mut col = vec![0.0; geom.col_rows() * wide];
    for s in 0..n {
        kernels::im2col(geom, &x[s * sample..(s + 1) * sample], &mut col[s * cols..], wide);
    }
    col
}

fn transpose_batched(data: &[f64], bs: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for s in 0..bs {
        let src = &data[s * r * c..(s + 1) * r * c];
        let dst = &mut out[s * r * c..(s + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let k = tape.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| i as f64 * 0.1 - 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 5, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let input = Tensor::from_fn(&[1, 1, 4, 3], |i| (i as f64).cos());
        let x = tape.constant(input.clone());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn conv2d_ones_kernel_sums_windows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Dimension { .. })));

        let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        // (4 - 3) is not a multiple of stride 2
        assert!(tape.conv2d(x, k, b, 2, 0).is_err());
        let big = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, big, b, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 4.5));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut rs = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut rs, Mode::Train, BN_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // running mean moved toward 4.5 by momentum 0.1
        assert!((rs.mean[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_zero_gamma_outputs_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64).sin()));
        let g = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(t(&[2], &[0.25, -1.5]));
        let mut rs = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut rs, Mode::Train, BN_EPS).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(*v, [0.25, -1.5][ch]);
        }
    }

    #[test]
    fn batch_norm_unit_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1, 1], &[-1.0, 1.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut rs = RunningStats::new(1);
        let eps = 1e-12;
        let y = tape.batch_norm(x, g, b, &mut rs, Mode::Train, eps).unwrap();
        let expected = 1.0 / (1.0f64 + eps).sqrt();
        assert!((tape.value(y).data()[0] + expected).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut rs = RunningStats::new(1);
        assert!(tape.batch_norm(x, g, b, &mut rs, Mode::Train, BN_EPS).is_err());
        assert!(tape.batch_norm(x, g, b, &mut rs, Mode::Eval, BN_EPS).is_ok());
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-3.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let two = tape.constant(Tensor::scalar(2.0));
        let s2 = tape.sigmoid(two);
        assert!((tape.value(s2).item() - 0.880_797_077_977_882_3).abs() < 1e-15);
        let y = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, y).is_err());
        assert!(tape.mul(x, y).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 0.7));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-15);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_shift_invariant_on_middle_axis() {
        let mut tape = Tape::new();
        let base = Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 1.3).sin());
        let a = tape.constant(base.clone());
        let b = tape.constant(base.map(|v| v + 100.0));
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn group_max_values_and_routing() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[3.0, -1.0, 0.0, 5.0]), true);
        let m = tape.group_max(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let one = tape.group_max(x, 1).unwrap();
        assert_eq!(tape.value(one), tape.value(x));
        assert!(tape.group_max(x, 3).is_err());

        let first = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let picked = tape.mul(m, first).unwrap();
        let loss = tape.sum(picked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_max_tie_goes_to_lowest_piece() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[2.0, 2.0, 2.0]), true);
        let m = tape.group_max(x, 3).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[5], 0.5));
        let loss = tape.bce_loss(p, p).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant(t(&[2], &[0.0, 1.0]));
        let loss = tape.bce_loss(p, p).unwrap();
        assert!(tape.value(loss).item() <= -(1.0 - BCE_EPS).ln() + 1e-15);

        let p = tape.constant(Tensor::scalar(0.8));
        let y = tape.constant(Tensor::scalar(1.0));
        let loss = tape.bce_loss(p, y).unwrap();
        assert!((tape.value(loss).item() - 0.223_143_551_314_209_7).abs() < 1e-15);

        let bad = tape.constant(Tensor::scalar(1.5));
        assert!(tape.bce_loss(p, bad).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0), true);
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64), true);
        let y = tape.sigmoid(x);
        let z = tape.scale(y, 0.0);
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 4]);

        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_sums_path_gradients() {
        // f(x) = sum(x*x + 3x) => df/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let tri = tape.scale(x, 3.0);
        let both = tape.add(sq, tri).unwrap();
        let loss = tape.sum(both);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn untouched_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let unused = tape.leaf(Tensor::ones(&[3]), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn transpose_and_bmm() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let at = tape.transpose(a).unwrap();
        assert_eq!(tape.value(at).shape(), &[1, 3, 2]);
        assert_eq!(tape.value(at).data(), &[1., 4., 2., 5., 3., 6.]);
        let p = tape.bmm(a, at).unwrap();
        assert_eq!(tape.value(p).data(), &[14., 32., 32., 77.]);
        assert!(tape.bmm(a, a).is_err());
    }
}
