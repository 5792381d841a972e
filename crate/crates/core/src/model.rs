//! The five network variants and nodule-level prediction.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{RunningStats, Tape, Var};
use crate::blocks::{
    dropout, stochastic_depth, ConvBlock, ConvSpec, Ctx, ForwardOptions, MaxoutHead, NonLocalBlock, ParamStore,
    ResidualBlock, StochasticDepthConfig,
};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, SgdConfig};
use crate::preprocess::{extract_views, NoduleCrop};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Largest batch pushed through one eval-mode forward.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    LocalGlobalLinear,
    MaxoutLocalGlobal,
    MaxoutA,
    ResnetA,
    ResnetAMaxout,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::LocalGlobalLinear,
        ModelVariant::MaxoutLocalGlobal,
        ModelVariant::MaxoutA,
        ModelVariant::ResnetA,
        ModelVariant::ResnetAMaxout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::LocalGlobalLinear => "local_global_linear",
            ModelVariant::MaxoutLocalGlobal => "maxout_local_global",
            ModelVariant::MaxoutA => "maxout_a",
            ModelVariant::ResnetA => "resnet_a",
            ModelVariant::ResnetAMaxout => "resnet_a_maxout",
        }
    }

    pub fn has_maxout_head(self) -> bool {
        matches!(
            self,
            ModelVariant::MaxoutLocalGlobal | ModelVariant::MaxoutA | ModelVariant::ResnetAMaxout
        )
    }

    pub fn has_non_local(self) -> bool {
        !matches!(self, ModelVariant::ResnetA | ModelVariant::ResnetAMaxout)
    }

    pub fn has_extra_stage(self) -> bool {
        !matches!(self, ModelVariant::LocalGlobalLinear | ModelVariant::MaxoutLocalGlobal)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub input_size: usize,
    pub base_channels: usize,
    /// Pieces of the Maxout head; variants with a linear head use 1.
    pub maxout_pieces: usize,
    pub dropout_rates: [f64; 2],
    pub stochastic_depth: StochasticDepthConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::MaxoutLocalGlobal,
            input_size: 16,
            base_channels: 8,
            maxout_pieces: 2,
            dropout_rates: [0.1, 0.2],
            stochastic_depth: StochasticDepthConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, seed: u64) -> Self {
        ModelConfig {
            variant,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn head_pieces(&self) -> usize {
        if self.variant.has_maxout_head() {
            self.maxout_pieces
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || self.input_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "input_size {} must be even and at least 4",
                self.input_size
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::invalid("base_channels must be at least 2"));
        }
        if self.maxout_pieces == 0 {
            return Err(Error::invalid("maxout_pieces must be positive"));
        }
        for rate in self.dropout_rates {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        self.stochastic_depth.validate()
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Conv(ConvBlock),
    Residual(ResidualBlock),
    NonLocal(NonLocalBlock),
    /// Residual block standing in for a non-local block, followed by dropout.
    ResidualDropout(ResidualBlock, f64),
}

impl Stage {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Stage::Conv(b) => b.forward(ctx, x),
            Stage::Residual(b) => b.forward(ctx, x),
            Stage::NonLocal(b) => b.forward(ctx, x),
            Stage::ResidualDropout(b, rate) => {
                let y = b.forward(ctx, x)?;
                dropout(ctx, y, *rate)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Network {
    stages: Vec<Stage>,
    head: MaxoutHead,
}

/// Which configured noise layers are live. Switched-off dropout has rate 0
/// and switched-off stochastic depth has survival 1, in training and eval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveNoise {
    pub dropout: bool,
    pub stochastic_depth: bool,
}

impl Default for ActiveNoise {
    fn default() -> Self {
        ActiveNoise {
            dropout: true,
            stochastic_depth: true,
        }
    }
}

/// Configuration, parameters, running statistics and epoch counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub epoch: usize,
    noise: ActiveNoise,
    network: Network,
}

fn build_network(config: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Network> {
    let c = config.base_channels;
    let v = config.variant;
    let mut stages = vec![
        Stage::Conv(ConvBlock::new(store, "stem", ConvSpec::same(1, c, 3), true, rng)),
        Stage::Residual(ResidualBlock::new(store, "res1", c, c, 2, rng)),
    ];
    let mixing = |store: &mut ParamStore, rng: &mut Rng, name: &str, rate: f64| -> Result<Stage> {
        Ok(if v.has_non_local() {
            Stage::NonLocal(NonLocalBlock::new(store, name, c, rate, rng)?)
        } else {
            Stage::ResidualDropout(ResidualBlock::new(store, name, c, c, 1, rng), rate)
        })
    };
    stages.push(mixing(store, rng, "mix1", config.dropout_rates[0])?);
    stages.push(Stage::Residual(ResidualBlock::new(store, "res2", c, c, 1, rng)));
    stages.push(mixing(store, rng, "mix2", config.dropout_rates[1])?);
    let features = if v.has_extra_stage() {
        stages.push(Stage::Residual(ResidualBlock::new(store, "res3", c, 2 * c, 1, rng)));
        2 * c
    } else {
        c
    };
    let head = MaxoutHead::new(store, "head", features, config.head_pieces(), rng)?;
    Ok(Network { stages, head })
}

pub fn build_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut store = ParamStore::new();
    let network = build_network(config, &mut store, &mut seeded(config.seed))?;
    Ok(ModelState {
        config: config.clone(),
        store,
        epoch: 0,
        noise: ActiveNoise::default(),
        network,
    })
}

/// Parameter names and shapes implied by `config` alone.
pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(build_model(config)?.store.shapes())
}

pub fn clone_model(state: &ModelState) -> ModelState {
    state.clone()
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn noise(&self) -> ActiveNoise {
        self.noise
    }

    pub fn set_noise(&mut self, noise: ActiveNoise) {
        self.noise = noise;
        let rates = if noise.dropout { self.config.dropout_rates } else { [0.0; 2] };
        let mixing = self
            .network
            .stages
            .iter_mut()
            .filter(|s| matches!(s, Stage::NonLocal(_) | Stage::ResidualDropout(..)));
        for (stage, rate) in mixing.zip(rates) {
            match stage {
                Stage::NonLocal(b) => b.dropout = rate,
                Stage::ResidualDropout(_, r) => *r = rate,
                _ => unreachable!(),
            }
        }
    }

    /// Stochastic depth as applied by the forward pass.
    pub fn effective_stochastic_depth(&self) -> StochasticDepthConfig {
        if self.noise.stochastic_depth {
            self.config.stochastic_depth
        } else {
            StochasticDepthConfig::disabled()
        }
    }

    fn check_input(&self, views: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        let shape = views.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                expected: vec![0, 1, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `ctx.tape`; returns `[N]` logits.
    pub fn logits_on(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.as_ref().logits_on(ctx, x)
    }

    /// Per-view malignancy probabilities for `[N, 1, S, S]` views.
    pub fn forward(&mut self, views: &Tensor, opts: ForwardOptions, rng: &mut Rng) -> Result<Tensor> {
        self.check_input(views)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let x = tape.constant(views.clone());
        let sd = self.effective_stochastic_depth();
        let network = &self.network;
        let mut ctx = Ctx::new(&mut tape, &vars, &mut self.store.stats, opts, rng);
        let logit = ModelRef { sd, network }.logits_on(&mut ctx, x)?;
        let prob = ctx.tape.sigmoid(logit);
        Ok(tape.value(prob).clone())
    }

    /// Eval-mode probabilities; read-only.
    pub fn predict(&self, views: &Tensor) -> Result<Tensor> {
        self.infer(views, ForwardOptions::eval(), &mut seeded(0))
    }

    /// Read-only forward in chunks; running statistics are never updated.
    pub fn infer(&self, views: &Tensor, opts: ForwardOptions, rng: &mut Rng) -> Result<Tensor> {
        self.check_input(views)?;
        let opts = ForwardOptions {
            update_stats: false,
            ..opts
        };
        let n = views.shape()[0];
        let per = views.len() / n;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, 1, self.config.input_size, self.config.input_size],
                views.data()[start * per..end * per].to_vec(),
            )?;
            let mut scratch = self.clone_stats();
            let mut tape = Tape::new();
            let vars = self.store.bind(&mut tape, false);
            let x = tape.constant(chunk);
            let mut ctx = Ctx::new(&mut tape, &vars, &mut scratch, opts, rng);
            let logit = self.as_ref().logits_on(&mut ctx, x)?;
            let prob = ctx.tape.sigmoid(logit);
            out.extend_from_slice(tape.value(prob).data());
        }
        Ok(Tensor::from_vec(out))
    }

    fn clone_stats(&self) -> Vec<(String, RunningStats)> {
        self.store.stats.clone()
    }

    fn as_ref(&self) -> ModelRef<'_> {
        ModelRef {
            sd: self.effective_stochastic_depth(),
            network: &self.network,
        }
    }

    /// One SGD step on a batch with (possibly soft) targets; returns the mean BCE.
    pub fn train_step(
        &mut self,
        views: &Tensor,
        targets: &Tensor,
        sgd: &SgdConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        self.check_input(views)?;
        if targets.shape() != [views.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                expected: vec![views.shape()[0]],
                got: targets.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, true);
        let x = tape.constant(views.clone());
        let y = tape.constant(targets.clone());
        let sd = self.effective_stochastic_depth();
        let network = &self.network;
        let mut ctx = Ctx::new(&mut tape, &vars, &mut self.store.stats, ForwardOptions::train(), rng);
        let logit = ModelRef { sd, network }.logits_on(&mut ctx, x)?;
        let prob = ctx.tape.sigmoid(logit);
        let loss = tape.bce_loss(prob, y)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        for (param, var) in self.store.params.iter_mut().zip(&vars) {
            param.grad = grads.take(*var);
        }
        sgd_step(&mut self.store.params, sgd, self.epoch)?;
        Ok(loss_value)
    }
}

/// Borrowed view of the immutable parts of a model, so the running
/// statistics can be borrowed mutably alongside it.
struct ModelRef<'a> {
    sd: StochasticDepthConfig,
    network: &'a Network,
}

impl ModelRef<'_> {
    fn logits_on(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for stage in &self.network.stages {
            h = stage.forward(ctx, h)?;
        }
        let pooled = ctx.tape.global_avg_pool(h)?;
        let logit = self.network.head.forward(ctx, pooled)?;
        let n = ctx.tape.value(logit).shape()[0];
        let zero = ctx.tape.constant(Tensor::zeros(&[n]));
        stochastic_depth(ctx, &self.sd, logit, zero)
    }
}

/// `[3, 1, S, S]` stack of the three orthogonal center views.
pub fn view_tensor(crop: &NoduleCrop) -> Result<Tensor> {
    let views = extract_views(crop);
    let s = crop.size;
    let data = views.iter().flat_map(|v| v.data.iter().copied()).collect();
    Tensor::new(vec![3, 1, s, s], data)
}

/// Mean eval-mode probability over the three orthogonal center views.
pub fn predict_nodule(state: &ModelState, crop: &NoduleCrop) -> Result<f64> {
    crop.check_normalized()?;
    let probs = state.predict(&view_tensor(crop)?)?;
    Ok(probs.data().iter().sum::<f64>() / 3.0)
}

/// Batched [`predict_nodule`] over many crops.
pub fn predict_nodules(state: &ModelState, crops: &[NoduleCrop]) -> Result<Vec<f64>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let mut views = Vec::with_capacity(crops.len());
    for crop in crops {
        crop.check_normalized()?;
        views.push(view_tensor(crop)?);
    }
    let s = crops[0].size;
    let stacked = Tensor::new(
        vec![3 * crops.len(), 1, s, s],
        views.into_iter().flat_map(Tensor::into_data).collect(),
    )?;
    let probs = state.predict(&stacked)?;
    Ok(probs.data().chunks(3).map(|c| c.iter().sum::<f64>() / 3.0).collect())
}
