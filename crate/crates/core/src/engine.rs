//! The bi-level search loop, retraining of discrete architectures, and the
//! frozen-weight single-level variant.

use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, OptimizerKind, ParamId, Tape, Tensor};
use crate::candidate::{OpConfig, OperationKind};
use crate::error::{Error, Result};
use crate::signal::{make_batch, psnr, CosineConfig, DegradationOperator, SignalBatch};
use crate::space::{build_discrete, build_relaxed, DiscreteArch, Layout, Network, SpaceSpec};

const PSNR_PEAK: f64 = 1.0;

// rng streams carved out of one run seed
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_TRAIN_NOISE: u64 = 4;
const STREAM_VAL_NOISE: u64 = 5;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer over `base + index·φ`; a bijection in `index` for fixed `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    None,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub param_lr: f64,
    pub param_wd: f64,
    pub param_warmup: bool,
    pub alpha_lr: f64,
    pub alpha_wd: f64,
    pub alpha_warmup: bool,
    pub alpha_scheduler: Scheduler,
    pub alpha_optimizer: OptimizerKind,
    /// Optimizer of the operation weights; absent from the published tables.
    #[serde(default = "default_param_optimizer")]
    pub param_optimizer: OptimizerKind,
}

fn default_param_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

pub const PRESET_NAMES: [&str; 8] = [
    "h1",
    "h2",
    "bohb-one-shot-blur",
    "bohb-one-shot-ds",
    "bohb-blur",
    "bohb-das-single",
    "bohb-non-seq-one-shot-blur",
    "bohb-non-seq-blur",
];

impl Default for HyperParams {
    fn default() -> Self {
        Self::h1()
    }
}

impl HyperParams {
    pub fn h1() -> Self {
        HyperParams {
            param_lr: 0.001,
            param_wd: 1e-8,
            param_warmup: false,
            alpha_lr: 0.001,
            alpha_wd: 0.001,
            alpha_warmup: true,
            alpha_scheduler: Scheduler::Linear,
            alpha_optimizer: OptimizerKind::GradientDescent,
            param_optimizer: default_param_optimizer(),
        }
    }

    pub fn h2() -> Self {
        HyperParams {
            alpha_lr: 0.0001,
            alpha_wd: 0.0001,
            ..Self::h1()
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tuned(
        param_lr: f64,
        param_wd: f64,
        param_warmup: bool,
        alpha_lr: f64,
        alpha_wd: f64,
        alpha_warmup: bool,
        alpha_scheduler: Scheduler,
        alpha_optimizer: OptimizerKind,
    ) -> Self {
        HyperParams {
            param_lr,
            param_wd,
            param_warmup,
            alpha_lr,
            alpha_wd,
            alpha_warmup,
            alpha_scheduler,
            alpha_optimizer,
            param_optimizer: default_param_optimizer(),
        }
    }

    /// Built-in presets by name (see [`PRESET_NAMES`]).
    pub fn preset(name: &str) -> Result<Self> {
        use OptimizerKind::{Adam, GradientDescent};
        use Scheduler::{Linear, None};
        Ok(match name.to_ascii_lowercase().as_str() {
            "h1" => Self::h1(),
            "h2" => Self::h2(),
            "bohb-one-shot-blur" => Self::tuned(
                0.0014232405,
                8.616e-07,
                false,
                0.0836808765,
                5.05099e-05,
                false,
                Linear,
                Adam,
            ),
            "bohb-one-shot-ds" => Self::tuned(
                0.0020448382,
                5.04e-08,
                true,
                0.0100063746,
                0.0058022776,
                true,
                Linear,
                GradientDescent,
            ),
            "bohb-blur" => Self::tuned(
                0.0020882283,
                4.4e-08,
                false,
                8.43195e-05,
                0.0127425783,
                true,
                Linear,
                Adam,
            ),
            "bohb-das-single" => Self::tuned(
                0.0014232405,
                8.616e-07,
                false,
                0.025012337102395577,
                1.390640076980444e-05,
                false,
                None,
                Adam,
            ),
            "bohb-non-seq-one-shot-blur" => Self::tuned(
                0.0050969066,
                2.423e-07,
                false,
                1.32499e-05,
                0.0010171142,
                false,
                None,
                Adam,
            ),
            "bohb-non-seq-blur" => Self::tuned(
                0.0037014752,
                1.4573e-06,
                false,
                0.0012395056,
                0.0002855732,
                false,
                None,
                Adam,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown hyperparameter preset {name:?}; known: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.param_lr.is_finite() && self.param_lr > 0.0) {
            return Err(Error::Config(format!(
                "param_lr must be in (0, inf), got {}",
                self.param_lr
            )));
        }
        for (name, v) in [
            ("alpha_lr", self.alpha_lr),
            ("param_wd", self.param_wd),
            ("alpha_wd", self.alpha_wd),
        ] {
            if !ok(v) {
                return Err(Error::Config(format!("{name} must be in [0, inf), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Samples in the final validation pool, evaluated in chunks of `batch_size`.
    pub val_pool: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 50,
            steps_per_epoch: 19,
            batch_size: 128,
            warmup_epochs: 10,
            val_pool: 2432,
        }
    }
}

impl TrainSchedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs.min(self.epochs) * self.steps_per_epoch
    }

    /// Same schedule at a different epoch budget, warm-up scaled in proportion.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let warmup = if self.epochs == 0 {
            0
        } else {
            ((self.warmup_epochs * epochs) as f64 / self.epochs as f64).round() as usize
        };
        TrainSchedule {
            epochs,
            warmup_epochs: warmup,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.val_pool == 0 {
            return Err(Error::Config("schedule sizes must all be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs must be in [0, {}], got {}",
                self.epochs, self.warmup_epochs
            )));
        }
        Ok(())
    }
}

/// Effective learning rate at `step`: linear ramp 0→base over the first
/// `warmup_steps`, then constant or a linear decay reaching 0 at the last step.
pub fn lr_schedule(base_lr: f64, step: usize, total_steps: usize, warmup_steps: usize, scheduler: Scheduler) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    match scheduler {
        Scheduler::None => base_lr,
        Scheduler::Linear => {
            let last = total_steps.saturating_sub(1);
            if last <= warmup_steps {
                return if step >= last { 0.0 } else { base_lr };
            }
            let remaining = last.saturating_sub(step) as f64;
            base_lr * remaining / (last - warmup_steps) as f64
        }
    }
}

/// Number of unrolled inner iterations in the α gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerSteps {
    /// First-order alternation: α gradient at the current θ.
    #[default]
    Zero,
    /// One virtual θ step, with the mixed second derivative by finite differences.
    One,
}

/// The data side of an experiment: degradation, signal distribution, and op settings.
#[derive(Clone, Debug)]
pub struct Problem {
    pub operator: Arc<DegradationOperator>,
    pub signal: CosineConfig,
    pub ops: OpConfig,
}

impl Problem {
    pub fn new(operator: DegradationOperator, signal: CosineConfig, ops: OpConfig) -> Result<Self> {
        signal.validate()?;
        if operator.n() != signal.n {
            return Err(Error::invalid(format!(
                "operator length {} differs from signal length {}",
                operator.n(),
                signal.n
            )));
        }
        Ok(Problem {
            operator: Arc::new(operator),
            signal,
            ops,
        })
    }

    /// Gaussian blur on N=50 with default signals and ops.
    pub fn blur() -> Self {
        Self::new(
            DegradationOperator::blur(50).expect("valid"),
            CosineConfig::default(),
            OpConfig::default(),
        )
        .expect("valid")
    }

    /// Blur followed by subsampling, N=50.
    pub fn downsample() -> Self {
        Self::new(
            DegradationOperator::downsample(50).expect("valid"),
            CosineConfig::default(),
            OpConfig::default(),
        )
        .expect("valid")
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub one_shot_psnr: f64,
    pub arch: DiscreteArch,
    /// Final softmax weights per site.
    pub betas: Vec<Vec<f64>>,
    pub runtime_s: f64,
    /// Largest |∂L_val/∂θ| reaching the store during α updates; zero unless the
    /// unrolled α gradient needs it.
    pub theta_grad_max: f64,
    pub network: Network,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub arch_psnr: f64,
    pub runtime_s: f64,
    pub network: Network,
}

/// Mean PSNR of `net` on a fresh pool of `sched.val_pool` samples drawn from `seed`.
///
/// The pool is processed in chunks of `sched.batch_size`; batch norm uses each chunk's statistics.
pub fn evaluate_psnr(net: &Network, problem: &Problem, sched: &TrainSchedule, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let mut remaining = sched.val_pool;
    let mut total = 0.0;
    while remaining > 0 {
        let b = remaining.min(sched.batch_size);
        let batch = make_batch(&mut rng, &problem.operator, &problem.signal, b)?;
        let noise_seed = rng.next_u64();
        let pred = net.predict(&batch.measured, noise_seed)?;
        total += psnr(&pred, &batch.clean, PSNR_PEAK)? * b as f64;
        remaining -= b;
    }
    let value = total / sched.val_pool as f64;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("validation PSNR is {value}")));
    }
    Ok(value)
}

struct Stream {
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl Stream {
    fn new(seed: u64, data: u64, noise: u64) -> Self {
        Stream {
            data: stream_rng(seed, data),
            noise: stream_rng(seed, noise),
        }
    }

    fn next(&mut self, problem: &Problem, batch: usize) -> Result<(SignalBatch, u64)> {
        let b = make_batch(&mut self.data, &problem.operator, &problem.signal, batch)?;
        Ok((b, self.noise.next_u64()))
    }
}

/// MSE on `batch`, backpropagated into a cleared store; returns the loss.
fn loss_backward(net: &mut Network, batch: &(SignalBatch, u64), what: &str, step: usize) -> Result<f64> {
    net.store.zero_grad();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &batch.0.measured, batch.1)?;
    let target = tape.constant(batch.0.clean.clone());
    let loss = tape.mse(out, target)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("{what} loss is {value} at step {step}")));
    }
    tape.backward(loss, &mut net.store)?;
    Ok(value)
}

fn grads_of(net: &Network, ids: &[ParamId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|id| {
            net.store
                .grad(*id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; net.store.value(*id).len()])
        })
        .collect()
}

fn set_values(net: &mut Network, ids: &[ParamId], values: &[Tensor]) {
    for (id, v) in ids.iter().zip(values) {
        *net.store.value_mut(*id) = v.clone();
    }
}

fn shifted(values: &[Tensor], dirs: &[Vec<f64>], scale: f64) -> Vec<Tensor> {
    values
        .iter()
        .zip(dirs)
        .map(|(t, d)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().zip(d).for_each(|(w, g)| *w += scale * g);
            t
        })
        .collect()
}

/// α gradient through one virtual θ step of size `xi` on the training batch.
fn unrolled_alpha_grad(
    net: &mut Network,
    train: &(SignalBatch, u64),
    val: &(SignalBatch, u64),
    xi: f64,
    theta: &[ParamId],
    alpha: &[ParamId],
    step: usize,
) -> Result<Vec<Vec<f64>>> {
    let saved: Vec<Tensor> = theta.iter().map(|id| net.store.value(*id).clone()).collect();
    loss_backward(net, train, "train", step)?;
    let g = grads_of(net, theta);
    set_values(net, theta, &shifted(&saved, &g, -xi));
    loss_backward(net, val, "validation", step)?;
    let mut d_alpha = grads_of(net, alpha);
    let v = grads_of(net, theta);
    let norm = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        let eps = 0.01 / norm;
        set_values(net, theta, &shifted(&saved, &v, eps));
        loss_backward(net, train, "train", step)?;
        let plus = grads_of(net, alpha);
        set_values(net, theta, &shifted(&saved, &v, -eps));
        loss_backward(net, train, "train", step)?;
        let minus = grads_of(net, alpha);
        for ((d, p), m) in d_alpha.iter_mut().zip(&plus).zip(&minus) {
            for ((di, pi), mi) in d.iter_mut().zip(p).zip(m) {
                *di -= xi * (pi - mi) / (2.0 * eps);
            }
        }
    }
    set_values(net, theta, &saved);
    net.store.zero_grad();
    Ok(d_alpha)
}

fn set_frozen(net: &mut Network, ids: &[ParamId], frozen: bool) {
    for id in ids {
        net.store.set_frozen(*id, frozen);
    }
}

/// Which parameter groups a training run updates.
#[derive(Clone, Copy, Debug)]
pub struct LoopMode {
    pub update_theta: bool,
    pub update_alpha: bool,
    pub inner: InnerSteps,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoopStats {
    pub theta_grad_max: f64,
    pub alpha_updates: usize,
    pub theta_updates: usize,
}

/// The shared training loop. Per step: one fresh training batch and a θ update,
/// then (outside the α warm-up) one fresh validation batch and an α update.
pub fn train_network(
    net: &mut Network,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
    mode: LoopMode,
) -> Result<LoopStats> {
    hp.validate()?;
    sched.validate()?;
    let theta_all = net.theta_ids();
    let theta: Vec<ParamId> = theta_all
        .iter()
        .copied()
        .filter(|id| !net.store.get(*id).is_frozen())
        .collect();
    let alpha = net.alpha_ids();
    let alpha_live: Vec<ParamId> = alpha
        .iter()
        .copied()
        .filter(|id| !net.store.get(*id).is_frozen())
        .collect();
    let theta_opt = Optimizer::new(hp.param_optimizer, hp.param_wd);
    let alpha_opt = Optimizer::new(hp.alpha_optimizer, hp.alpha_wd);
    let total = sched.total_steps();
    let warm = sched.warmup_steps();
    let mut train = Stream::new(seed, STREAM_TRAIN, STREAM_TRAIN_NOISE);
    let mut val = Stream::new(seed, STREAM_VAL, STREAM_VAL_NOISE);
    let mut stats = LoopStats::default();

    for step in 0..total {
        let mut train_batch = None;
        let mut theta_lr = 0.0;
        if mode.update_theta && !theta.is_empty() {
            let batch = train.next(problem, sched.batch_size)?;
            theta_lr = lr_schedule(
                hp.param_lr,
                step,
                total,
                if hp.param_warmup { warm } else { 0 },
                Scheduler::None,
            );
            set_frozen(net, &alpha_live, true);
            let res = loss_backward(net, &batch, "train", step);
            set_frozen(net, &alpha_live, false);
            res?;
            theta_opt.step(&mut net.store, &theta, theta_lr)?;
            stats.theta_updates += 1;
            train_batch = Some(batch);
        }
        let alpha_frozen = hp.alpha_warmup && step < warm;
        if mode.update_alpha && !alpha.is_empty() && !alpha_frozen {
            let batch = val.next(problem, sched.batch_size)?;
            let lr = lr_schedule(
                hp.alpha_lr,
                step,
                total,
                if hp.alpha_warmup { warm } else { 0 },
                hp.alpha_scheduler,
            );
            // θ gradients are not needed for a first-order α step
            let skip_theta = mode.inner == InnerSteps::Zero || train_batch.is_none();
            if skip_theta {
                set_frozen(net, &theta, true);
            }
            let res = loss_backward(net, &batch, "validation", step);
            if skip_theta {
                set_frozen(net, &theta, false);
            }
            res?;
            let worst = theta_all
                .iter()
                .filter_map(|id| net.store.grad(*id))
                .flatten()
                .fold(0.0f64, |m, g| m.max(g.abs()));
            stats.theta_grad_max = stats.theta_grad_max.max(worst);
            if let (InnerSteps::One, Some(tb)) = (mode.inner, &train_batch) {
                let grads = unrolled_alpha_grad(net, tb, &batch, theta_lr, &theta, &alpha, step)?;
                for (id, g) in alpha.iter().zip(&grads) {
                    if !net.store.get(*id).is_frozen() {
                        net.store.accumulate_grad(*id, g);
                    }
                }
            }
            alpha_opt.step(&mut net.store, &alpha, lr)?;
            stats.alpha_updates += 1;
        }
    }
    net.store.zero_grad();
    Ok(stats)
}

fn finish_search(
    net: Network,
    problem: &Problem,
    sched: &TrainSchedule,
    seed: u64,
    stats: LoopStats,
    start: Instant,
) -> Result<SearchResult> {
    let one_shot_psnr = evaluate_psnr(&net, problem, sched, seed)?;
    Ok(SearchResult {
        one_shot_psnr,
        arch: net.discretize(),
        betas: net.betas(),
        runtime_s: start.elapsed().as_secs_f64(),
        theta_grad_max: stats.theta_grad_max,
        network: net,
    })
}

/// Differentiable search with first-order alternation.
pub fn das_search(
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<SearchResult> {
    das_search_with(spec, problem, hp, sched, seed, InnerSteps::Zero)
}

pub fn das_search_with(
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
    inner: InnerSteps,
) -> Result<SearchResult> {
    let start = Instant::now();
    let mut net = build_relaxed(
        spec,
        &mut stream_rng(seed, STREAM_INIT),
        problem.operator.clone(),
        &problem.ops,
    )?;
    let mode = LoopMode {
        update_theta: true,
        update_alpha: true,
        inner,
    };
    let stats = train_network(&mut net, problem, hp, sched, seed, mode)?;
    finish_search(net, problem, sched, seed, stats, start)
}

/// Fresh discrete network trained on MSE with the θ settings of `hp`; PSNR on a fresh pool.
pub fn train_architecture(
    spec: &SpaceSpec,
    arch: &DiscreteArch,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut net = build_discrete(
        spec,
        arch,
        &mut stream_rng(seed, STREAM_INIT),
        problem.operator.clone(),
        &problem.ops,
    )?;
    let mode = LoopMode {
        update_theta: true,
        update_alpha: false,
        inner: InnerSteps::Zero,
    };
    train_network(&mut net, problem, hp, sched, seed, mode)?;
    let arch_psnr = evaluate_psnr(&net, problem, sched, seed)?;
    Ok(TrainOutcome {
        arch_psnr,
        runtime_s: start.elapsed().as_secs_f64(),
        network: net,
    })
}

/// Search over α only, with every benign candidate pre-trained as an all-that-kind
/// network and then frozen. Sequential spaces only.
pub fn das_single_search(
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<SearchResult> {
    if !matches!(spec.layout, Layout::Sequential { .. }) {
        return Err(Error::invalid(
            "single-level search with frozen weights needs a sequential space",
        ));
    }
    spec.validate()?;
    let start = Instant::now();
    let mut net = build_relaxed(
        spec,
        &mut stream_rng(seed, STREAM_INIT),
        problem.operator.clone(),
        &problem.ops,
    )?;
    for (i, kind) in spec.opset.iter().enumerate() {
        if !kind.is_benign() {
            continue;
        }
        let single = SpaceSpec {
            opset: vec![*kind],
            ..spec.clone()
        };
        let arch = DiscreteArch::uniform(&single, *kind);
        let pre = train_architecture(&single, &arch, problem, hp, sched, derive_seed(seed, i as u64 + 1))?;
        for site in 0..spec.n_sites() {
            net.copy_candidate_from(site, *kind, &pre.network, site)?;
        }
    }
    for id in net.theta_ids() {
        net.store.set_frozen(id, true);
    }
    let mode = LoopMode {
        update_theta: false,
        update_alpha: true,
        inner: InnerSteps::Zero,
    };
    let stats = train_network(&mut net, problem, hp, sched, seed, mode)?;
    finish_search(net, problem, sched, seed, stats, start)
}

/// Whether an architecture may be built by [`train_architecture`] for the fixed-op baselines.
pub fn require_benign(kind: OperationKind) -> Result<()> {
    if kind.is_benign() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{kind} is not a benign operation")))
    }
}
