//! Network building blocks: Conv-BN-ReLU, residual, non-local attention,
//! Maxout heads, dropout and stochastic depth.
//!
//! Blocks own no tensors. They hold [`ParamId`]s into a [`ParamStore`] and
//! run on a [`Ctx`] that maps those ids to leaves of the current tape.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mode, RunningStats, Tape, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsId(usize);

/// Ordered parameters plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Parameter>,
    pub stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Fold train-mode batch statistics into the running statistics.
    pub update_stats: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            update_stats: true,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            update_stats: false,
        }
    }

    /// Train-mode noise without touching running statistics.
    pub fn noised_inference() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            update_stats: false,
        }
    }
}

/// Forward-pass context: tape, bound parameters, BN state and noise stream.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    vars: &'a [Var],
    stats: &'a mut [(String, RunningStats)],
    pub opts: ForwardOptions,
    pub rng: &'a mut Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(
        tape: &'a mut Tape,
        vars: &'a [Var],
        stats: &'a mut [(String, RunningStats)],
        opts: ForwardOptions,
        rng: &'a mut Rng,
    ) -> Self {
        Ctx {
            tape,
            vars,
            stats,
            opts,
            rng,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn training(&self) -> bool {
        self.opts.mode == Mode::Train
    }

    fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.var(gamma), self.var(beta));
        if self.opts.update_stats {
            let running = &mut self.stats[stats.0].1;
            self.tape.batch_norm(x, g, b, running, self.opts.mode, BN_EPS)
        } else {
            let mut scratch = self.stats[stats.0].1.clone();
            self.tape.batch_norm(x, g, b, &mut scratch, self.opts.mode, BN_EPS)
        }
    }
}

/// Conv → BN → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

/// Geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Size-preserving `k×k` convolution (odd `k`).
    pub fn same(c_in: usize, c_out: usize, ksize: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            ksize,
            stride: 1,
            padding: ksize / 2,
        }
    }

    /// 4×4 stride-2 convolution that halves even spatial sizes.
    pub fn halving(c_in: usize, c_out: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            ksize: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, relu: bool, rng: &mut Rng) -> Self {
        let ConvSpec {
            c_in,
            c_out,
            ksize,
            stride,
            padding,
        } = spec;
        let fan_in = c_in * ksize * ksize;
        ConvBlock {
            kernel: store.add(
                format!("{name}.conv.weight"),
                he_normal(&[c_out, c_in, ksize, ksize], fan_in, rng),
            ),
            bias: store.add(format!("{name}.conv.bias"), Tensor::zeros(&[c_out])),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            stats: store.add_stats(format!("{name}.bn"), c_out),
            stride,
            padding,
            relu,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.var(self.kernel), ctx.var(self.bias));
        let y = ctx.tape.conv2d(x, k, b, self.stride, self.padding)?;
        let y = ctx.batch_norm(y, self.gamma, self.beta, self.stats)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }
}

/// Unpadded `s×s` convolution at stride `s`: a 1×1 map for `s = 1`, a
/// patch-merging projection for downsampling skips otherwise.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        Pointwise {
            kernel: store.add(
                format!("{name}.weight"),
                he_normal(&[c_out, c_in, stride, stride], c_in * stride * stride, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.var(self.kernel), ctx.var(self.bias));
        ctx.tape.conv2d(x, k, b, self.stride, 0)
    }
}

/// `ReLU(second(first(x)) + proj(x))`; `proj` is the identity when absent.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
    pub proj: Option<Pointwise>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let first_spec = match stride {
            1 => ConvSpec::same(c_in, c_out, 3),
            2 => ConvSpec::halving(c_in, c_out),
            s => panic!("residual stride {s} unsupported"),
        };
        let first = ConvBlock::new(store, &format!("{name}.a"), first_spec, true, rng);
        let second = ConvBlock::new(store, &format!("{name}.b"), ConvSpec::same(c_out, c_out, 3), false, rng);
        let proj = (c_in != c_out || stride != 1)
            .then(|| Pointwise::new(store, &format!("{name}.proj"), c_in, c_out, stride, rng));
        ResidualBlock { first, second, proj }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x)?;
        let h = self.second.forward(ctx, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(sum))
    }
}

/// Embedded-Gaussian non-local block with a C/2 bottleneck and dropout on
/// the attention branch.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub theta: Pointwise,
    pub phi: Pointwise,
    pub g: Pointwise,
    pub out: Pointwise,
    pub channels: usize,
    pub dropout: f64,
}

impl NonLocalBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if channels < 2 {
            return Err(Error::dim("non_local", format!("needs at least 2 channels, got {channels}")));
        }
        check_rate(dropout)?;
        let inner = channels / 2;
        Ok(NonLocalBlock {
            theta: Pointwise::new(store, &format!("{name}.theta"), channels, inner, 1, rng),
            phi: Pointwise::new(store, &format!("{name}.phi"), channels, inner, 1, rng),
            g: Pointwise::new(store, &format!("{name}.g"), channels, inner, 1, rng),
            out: Pointwise::new(store, &format!("{name}.out"), inner, channels, 1, rng),
            channels,
            dropout,
        })
    }

    /// Attention weights `[N, P, P]`; row `p` holds the softmax over keys.
    pub fn attention(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.value(x).shape().to_vec();
        self.check_input(&shape)?;
        let (n, p) = (shape[0], shape[2] * shape[3]);
        let inner = self.channels / 2;
        let theta = self.theta.forward(ctx, x)?;
        let theta = ctx.tape.reshape(theta, &[n, inner, p])?;
        let theta_t = ctx.tape.transpose(theta)?;
        let phi = self.phi.forward(ctx, x)?;
        let phi = ctx.tape.reshape(phi, &[n, inner, p])?;
        let scores = ctx.tape.bmm(theta_t, phi)?;
        ctx.tape.softmax(scores, 2)
    }

    /// `out(A · g(x))` before dropout and the residual add.
    pub fn branch(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.value(x).shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let inner = self.channels / 2;
        let attn = self.attention(ctx, x)?;
        let g = self.g.forward(ctx, x)?;
        let g = ctx.tape.reshape(g, &[n, inner, h * w])?;
        let g_t = ctx.tape.transpose(g)?;
        let y = ctx.tape.bmm(attn, g_t)?;
        let y = ctx.tape.transpose(y)?;
        let y = ctx.tape.reshape(y, &[n, inner, h, w])?;
        self.out.forward(ctx, y)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.branch(ctx, x)?;
        let y = dropout(ctx, y, self.dropout)?;
        ctx.tape.add(x, y)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(
                "non_local",
                format!("expected [N, {}, H, W], got {shape:?}", self.channels),
            ));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout: train-mode mask scaled by `1/(1-rate)`, identity in eval.
pub fn dropout(ctx: &mut Ctx, x: Var, rate: f64) -> Result<Var> {
    check_rate(rate)?;
    if !ctx.training() || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = ctx.tape.value(x).shape().to_vec();
    let rng = &mut *ctx.rng;
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    ctx.tape.mul_const(x, &mask)
}

/// Max over `pieces` affine maps of the feature vector; `pieces = 1` is a
/// plain linear layer.
#[derive(Clone, Debug)]
pub struct MaxoutHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pieces: usize,
}

impl MaxoutHead {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, pieces: usize, rng: &mut Rng) -> Result<Self> {
        if pieces == 0 {
            return Err(Error::invalid("maxout head needs at least one piece"));
        }
        Ok(MaxoutHead {
            weight: store.add(format!("{name}.weight"), he_normal(&[pieces, features], features, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[pieces])),
            pieces,
        })
    }

    /// `[N, F]` features to `[N]` logits.
    pub fn forward(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        let affine = ctx.tape.linear(features, w, b)?;
        let logit = ctx.tape.group_max(affine, self.pieces)?;
        let n = ctx.tape.value(logit).shape()[0];
        ctx.tape.reshape(logit, &[n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StochasticDepthConfig {
    pub survival: f64,
}

impl Default for StochasticDepthConfig {
    fn default() -> Self {
        StochasticDepthConfig { survival: 0.8 }
    }
}

impl StochasticDepthConfig {
    pub fn disabled() -> Self {
        StochasticDepthConfig { survival: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.survival > 0.0 && self.survival <= 1.0) {
            return Err(Error::invalid(format!(
                "survival probability {} outside (0, 1]",
                self.survival
            )));
        }
        Ok(())
    }
}

/// Train: each sample (leading axis) keeps `skip + branch` with probability
/// `survival`, otherwise `skip`. Eval: `skip + survival·branch`.
pub fn stochastic_depth(
    ctx: &mut Ctx,
    config: &StochasticDepthConfig,
    branch: Var,
    skip: Var,
) -> Result<Var> {
    config.validate()?;
    let p = config.survival;
    let scaled = if p == 1.0 {
        branch
    } else if ctx.training() {
        let shape = ctx.tape.value(branch).shape().to_vec();
        let per_sample: usize = shape[1..].iter().product();
        let rng = &mut *ctx.rng;
        let keep: Vec<f64> = (0..shape[0])
            .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_fn(&shape, |i| keep[i / per_sample]);
        ctx.tape.mul_const(branch, &mask)?
    } else {
        ctx.tape.scale(branch, p)
    };
    ctx.tape.add(skip, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    struct Harness {
        store: ParamStore,
        tape: Tape,
        vars: Vec<Var>,
        rng: Rng,
    }

    impl Harness {
        fn new(store: ParamStore) -> Self {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, false);
            Harness {
                store,
                tape,
                vars,
                rng: seeded(99),
            }
        }

        fn ctx(&mut self, opts: ForwardOptions) -> Ctx<'_> {
            Ctx::new(&mut self.tape, &self.vars, &mut self.store.stats, opts, &mut self.rng)
        }
    }

    #[test]
    fn conv_block_zero_input_zero_output() {
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, "c", ConvSpec::same(2, 3, 3), true, &mut seeded(1));
        let mut h = Harness::new(store);
        let x = h.tape.constant(Tensor::zeros(&[2, 2, 4, 4]));
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = block.forward(&mut ctx, x).unwrap();
        assert!(h.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_gamma_zero_beta_one_gives_ones() {
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, "c", ConvSpec::same(1, 2, 3), true, &mut seeded(1));
        *store.get_mut(block.gamma) = Tensor::zeros(&[2]);
        *store.get_mut(block.beta) = Tensor::ones(&[2]);
        let mut h = Harness::new(store);
        let x = h.tape.constant(Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64).sin()));
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = block.forward(&mut ctx, x).unwrap();
        assert!(h.tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn residual_with_zero_convs_is_relu_of_input() {
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "r", 3, 3, 1, &mut seeded(2));
        assert!(block.proj.is_none());
        for id in [block.first.kernel, block.second.kernel] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut h = Harness::new(store);
        let input = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let x = h.tape.constant(input.clone());
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(h.tape.value(y), &input.map(|v| v.max(0.0)));
    }

    #[test]
    fn residual_zero_input_zero_output() {
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "r", 2, 4, 2, &mut seeded(3));
        assert!(block.proj.is_some());
        let mut h = Harness::new(store);
        let x = h.tape.constant(Tensor::zeros(&[2, 2, 8, 8]));
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(h.tape.value(y).shape(), &[2, 4, 4, 4]);
        assert!(h.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_local_zero_g_is_identity() {
        let mut store = ParamStore::new();
        let block = NonLocalBlock::new(&mut store, "nl", 4, 0.0, &mut seeded(4)).unwrap();
        *store.get_mut(block.g.kernel) = Tensor::zeros(&[2, 4, 1, 1]);
        let mut h = Harness::new(store);
        let input = Tensor::from_fn(&[1, 4, 3, 3], |i| (i as f64 * 0.37).cos());
        let x = h.tape.constant(input.clone());
        let mut ctx = h.ctx(ForwardOptions::eval());
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(h.tape.value(y), &input);
    }

    #[test]
    fn non_local_single_position() {
        let mut store = ParamStore::new();
        let block = NonLocalBlock::new(&mut store, "nl", 2, 0.0, &mut seeded(5)).unwrap();
        let g_w = store.get(block.g.kernel).data().to_vec();
        let o_w = store.get(block.out.kernel).data().to_vec();
        let mut h = Harness::new(store);
        let x = h.tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.5, -1.5]).unwrap());
        let mut ctx = h.ctx(ForwardOptions::eval());
        let attn = block.attention(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(attn).data(), &[1.0]);
        let y = block.forward(&mut ctx, x).unwrap();
        let gx = g_w[0] * 0.5 + g_w[1] * -1.5;
        let expected = [0.5 + o_w[0] * gx, -1.5 + o_w[1] * gx];
        for (v, e) in h.tape.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn non_local_rejects_single_channel() {
        let mut store = ParamStore::new();
        assert!(NonLocalBlock::new(&mut store, "nl", 1, 0.0, &mut seeded(0)).is_err());
        assert!(NonLocalBlock::new(&mut store, "nl", 4, 1.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn maxout_head_pieces() {
        let mut store = ParamStore::new();
        let head = MaxoutHead::new(&mut store, "head", 1, 2, &mut seeded(0)).unwrap();
        *store.get_mut(head.weight) = Tensor::new(vec![2, 1], vec![0.3, -0.7]).unwrap();
        let mut h = Harness::new(store);
        let x = h.tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let mut ctx = h.ctx(ForwardOptions::eval());
        let y = head.forward(&mut ctx, x).unwrap();
        assert_eq!(h.tape.value(y).data(), &[0.3]);
    }

    #[test]
    fn stochastic_depth_modes() {
        let mut h = Harness::new(ParamStore::new());
        let branch = h.tape.constant(Tensor::full(&[3], 1.0));
        let skip = h.tape.constant(Tensor::zeros(&[3]));
        let cfg = StochasticDepthConfig { survival: 0.8 };
        let mut ctx = h.ctx(ForwardOptions::eval());
        let y = stochastic_depth(&mut ctx, &cfg, branch, skip).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.8, 0.8, 0.8]);

        let full = StochasticDepthConfig::disabled();
        for opts in [ForwardOptions::train(), ForwardOptions::eval()] {
            let mut ctx = h.ctx(opts);
            let y = stochastic_depth(&mut ctx, &full, branch, skip).unwrap();
            assert_eq!(ctx.tape.value(y).data(), &[1.0, 1.0, 1.0]);
        }
        assert!(StochasticDepthConfig { survival: 0.0 }.validate().is_err());
    }

    #[test]
    fn stochastic_depth_keep_rate() {
        let mut h = Harness::new(ParamStore::new());
        let trials = 100_000;
        let branch = h.tape.constant(Tensor::ones(&[trials]));
        let skip = h.tape.constant(Tensor::zeros(&[trials]));
        let cfg = StochasticDepthConfig { survival: 0.8 };
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = stochastic_depth(&mut ctx, &cfg, branch, skip).unwrap();
        let rate = ctx.tape.value(y).data().iter().sum::<f64>() / trials as f64;
        assert!((rate - 0.8).abs() < 0.01, "keep rate {rate}");
    }

    #[test]
    fn dropout_is_identity_in_eval_and_unbiased_in_train() {
        let mut h = Harness::new(ParamStore::new());
        let x = h.tape.constant(Tensor::ones(&[50_000]));
        let mut ctx = h.ctx(ForwardOptions::eval());
        assert_eq!(dropout(&mut ctx, x, 0.2).unwrap(), x);
        let mut ctx = h.ctx(ForwardOptions::train());
        let y = dropout(&mut ctx, x, 0.2).unwrap();
        let mean = ctx.tape.value(y).data().iter().sum::<f64>() / 50_000.0;
        assert!((mean - 1.0).abs() < 0.02);
    }
}
