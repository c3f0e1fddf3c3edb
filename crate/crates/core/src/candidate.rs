//! The candidate operations placed at every decision site, and their softmax mixture.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearMap, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::DegradationOperator;

/// Serialized as its mnemonic, e.g. `"LG"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    LearnableGrad,
    Net,
    Roll,
    Noise,
    Zero,
}

impl OperationKind {
    pub const ALL: [OperationKind; 5] = [
        OperationKind::LearnableGrad,
        OperationKind::Net,
        OperationKind::Roll,
        OperationKind::Noise,
        OperationKind::Zero,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            OperationKind::LearnableGrad => "LG",
            OperationKind::Net => "Net",
            OperationKind::Roll => "Roll",
            OperationKind::Noise => "Noise",
            OperationKind::Zero => "Zero",
        }
    }

    /// LearnableGrad and Net; the others are there to be filtered out.
    pub fn is_benign(self) -> bool {
        matches!(self, OperationKind::LearnableGrad | OperationKind::Net)
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl Serialize for OperationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.mnemonic())
    }
}

impl<'de> Deserialize<'de> for OperationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperationKind::ALL
            .into_iter()
            .find(|k| k.mnemonic().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown operation mnemonic {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpConfig {
    /// Channels of the hidden layer in the conv-bn-relu-conv mapping.
    pub hidden: usize,
    pub kernel: usize,
    /// Circular shift of the roll layer; `None` means `⌊N/4⌋`.
    pub roll_shift: Option<usize>,
    pub noise_sigma: f64,
    pub bn_eps: f64,
}

impl Default for OpConfig {
    fn default() -> Self {
        OpConfig {
            hidden: 16,
            kernel: 3,
            roll_shift: None,
            noise_sigma: 0.10,
            bn_eps: 1e-5,
        }
    }
}

/// Parameters of `n(u, θ) = conv2(relu(bn(conv1(u))))`.
///
/// conv1 has no bias: batch norm removes any per-channel constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetParams {
    pub conv1_w: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

impl NetParams {
    pub fn ids(&self) -> [ParamId; 5] {
        [self.conv1_w, self.bn_gamma, self.bn_beta, self.conv2_w, self.conv2_b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpInstance {
    pub kind: OperationKind,
    pub net: Option<NetParams>,
    /// Learnable step size of the gradient-type layers.
    pub tau: Option<ParamId>,
}

impl OpInstance {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.net.iter().flat_map(|n| n.ids()).collect();
        ids.extend(self.tau);
        ids
    }
}

/// Inputs shared by every layer during one forward pass.
pub struct LayerContext<'a> {
    /// Measurements `f`, `[B, 1, M]`.
    pub measured: Var,
    pub operator: &'a Arc<DegradationOperator>,
    pub config: &'a OpConfig,
    /// Seed of this pass's noise; each site derives its own stream from it.
    pub noise_seed: u64,
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Fresh parameters for one candidate: conv weights `U[-1/√fan_in, 1/√fan_in]`,
/// zero biases, unit gamma, zero beta, and `τ = 1/‖A‖²`.
pub fn op_init<R: Rng + ?Sized>(
    kind: OperationKind,
    rng: &mut R,
    store: &mut ParamStore,
    operator: &DegradationOperator,
    cfg: &OpConfig,
) -> OpInstance {
    let net = matches!(kind, OperationKind::LearnableGrad | OperationKind::Net).then(|| {
        let (h, k) = (cfg.hidden, cfg.kernel);
        NetParams {
            conv1_w: store.add(uniform_tensor(rng, &[h, 1, k], 1.0 / (k as f64).sqrt())),
            bn_gamma: store.add(Tensor::full(&[h], 1.0)),
            bn_beta: store.add(Tensor::zeros(&[h])),
            conv2_w: store.add(uniform_tensor(rng, &[1, h, k], 1.0 / ((h * k) as f64).sqrt())),
            conv2_b: store.add(Tensor::zeros(&[1])),
        }
    });
    let tau = matches!(kind, OperationKind::LearnableGrad | OperationKind::Noise).then(|| {
        let norm = operator.norm();
        store.add(Tensor::scalar(1.0 / (norm * norm)))
    });
    OpInstance { kind, net, tau }
}

fn net_forward(tape: &mut Tape, store: &ParamStore, p: &NetParams, u: Var, cfg: &OpConfig) -> Result<Var> {
    let [w1, g, b, w2, b2] = p.ids().map(|id| tape.param(store, id));
    let zero_bias = tape.constant(Tensor::zeros(&[cfg.hidden]));
    let h = tape.conv1d(u, w1, zero_bias)?;
    let h = tape.batchnorm1d(h, g, b, cfg.bn_eps)?;
    let h = tape.relu(h);
    tape.conv1d(h, w2, b2)
}

/// `Aᵀ(Au − f)`, the gradient of `½‖Au − f‖²`.
fn data_gradient(tape: &mut Tape, u: Var, ctx: &LayerContext<'_>) -> Result<Var> {
    let map: Arc<dyn LinearMap> = ctx.operator.clone();
    let au = tape.linear(u, map.clone(), false)?;
    let residual = tape.sub(au, ctx.measured)?;
    tape.linear(residual, map, true)
}

fn site_noise(seed: u64, site: usize, shape: &[usize], sigma: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site as u64 + 1);
    let dist = Normal::new(0.0, sigma).expect("sigma > 0");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("sized")
}

pub fn op_forward(
    tape: &mut Tape,
    store: &ParamStore,
    inst: &OpInstance,
    u: Var,
    ctx: &LayerContext<'_>,
    site: usize,
) -> Result<Var> {
    op_forward_shared(tape, store, inst, u, ctx, site, &mut None)
}

/// As [`op_forward`], reusing `Aᵀ(Au − f)` across candidates that share the input `u`.
fn op_forward_shared(
    tape: &mut Tape,
    store: &ParamStore,
    inst: &OpInstance,
    u: Var,
    ctx: &LayerContext<'_>,
    site: usize,
    data_grad: &mut Option<Var>,
) -> Result<Var> {
    let (_, ch, len) = tape.value(u).dims3()?;
    if ch != 1 || len != ctx.operator.n() {
        return Err(Error::invalid(format!(
            "layer input must be [B, 1, {}], got {:?}",
            ctx.operator.n(),
            tape.value(u).shape()
        )));
    }
    let missing = || Error::ContractViolation(format!("{} instance without parameters", inst.kind));
    match inst.kind {
        OperationKind::Net => net_forward(tape, store, inst.net.as_ref().ok_or_else(missing)?, u, ctx.config),
        OperationKind::LearnableGrad => {
            let tau = tape.param(store, inst.tau.ok_or_else(missing)?);
            let grad = match *data_grad {
                Some(g) => g,
                None => *data_grad.insert(data_gradient(tape, u, ctx)?),
            };
            let learned = net_forward(tape, store, inst.net.as_ref().ok_or_else(missing)?, u, ctx.config)?;
            let direction = tape.add(grad, learned)?;
            let step = tape.scale_by(direction, tau)?;
            tape.sub(u, step)
        }
        OperationKind::Noise => {
            let tau = tape.param(store, inst.tau.ok_or_else(missing)?);
            let grad = match *data_grad {
                Some(g) => g,
                None => *data_grad.insert(data_gradient(tape, u, ctx)?),
            };
            let step = tape.scale_by(grad, tau)?;
            let stepped = tape.sub(u, step)?;
            if ctx.config.noise_sigma > 0.0 {
                let shape = tape.value(u).shape().to_vec();
                let eps = tape.constant(site_noise(ctx.noise_seed, site, &shape, ctx.config.noise_sigma));
                tape.add(stepped, eps)
            } else {
                Ok(stepped)
            }
        }
        OperationKind::Roll => {
            let shift = ctx.config.roll_shift.unwrap_or(len / 4);
            tape.circular_shift(u, shift as isize)
        }
        OperationKind::Zero => {
            let shape = tape.value(u).shape().to_vec();
            Ok(tape.constant(Tensor::zeros(&shape)))
        }
    }
}

/// `Σ_t softmax(α)_t · o_t(u)` over the candidates of one site.
pub fn mixed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    alpha: ParamId,
    ops: &[OpInstance],
    u: Var,
    ctx: &LayerContext<'_>,
    site: usize,
) -> Result<Var> {
    if ops.is_empty() {
        return Err(Error::invalid("mixed layer with no candidate operations"));
    }
    let logits = tape.param(store, alpha);
    if tape.value(logits).len() != ops.len() {
        return Err(Error::invalid(format!(
            "{} logits for {} candidates",
            tape.value(logits).len(),
            ops.len()
        )));
    }
    let beta = tape.softmax(logits)?;
    let mut data_grad = None;
    let outputs = ops
        .iter()
        .map(|op| op_forward_shared(tape, store, op, u, ctx, site, &mut data_grad))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(beta, &outputs)
}

/// Softmax of a logit vector, as used by [`mixed_forward`].
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
