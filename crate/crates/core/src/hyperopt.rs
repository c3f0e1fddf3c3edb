//! Hyperband over epoch budgets with a TPE-style density-ratio sampler.

use std::cmp::Ordering;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::engine::{das_search, derive_seed, train_architecture, HyperParams, Problem, Scheduler, TrainSchedule};
use crate::error::{Error, Result};
use crate::space::SpaceSpec;

pub const GAMMA: f64 = 0.15;
pub const CANDIDATES: usize = 64;
pub const RANDOM_FRACTION: f64 = 1.0 / 3.0;
pub const MIN_OBSERVATIONS: usize = 8;
pub const DEFAULT_RUNGS: usize = 3;

const MIN_BANDWIDTH: f64 = 1e-3;
// probability mass a categorical kernel spreads away from its centre
const CATEGORICAL_BANDWIDTH: f64 = 0.2;

/// Inclusive bounds of a log-uniform dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRange {
    pub lo: f64,
    pub hi: f64,
}

impl LogRange {
    fn to_unit(self, v: f64) -> f64 {
        ((v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())).clamp(0.0, 1.0)
    }

    fn at_unit(self, u: f64) -> f64 {
        (self.lo.ln() + u.clamp(0.0, 1.0) * (self.hi.ln() - self.lo.ln()))
            .exp()
            .clamp(self.lo, self.hi)
    }

    pub fn contains(self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HPSpace {
    pub param_lr: LogRange,
    pub param_wd: LogRange,
    pub alpha_lr: LogRange,
    pub alpha_wd: LogRange,
}

impl Default for HPSpace {
    fn default() -> Self {
        HPSpace {
            param_lr: LogRange { lo: 1e-5, hi: 1.0 },
            param_wd: LogRange { lo: 1e-8, hi: 0.1 },
            alpha_lr: LogRange { lo: 1e-5, hi: 0.1 },
            alpha_wd: LogRange { lo: 1e-5, hi: 0.1 },
        }
    }
}

const CONTINUOUS: usize = 4;
const DIMS: usize = 8;

impl HPSpace {
    pub fn validate(&self) -> Result<()> {
        for r in [self.param_lr, self.param_wd, self.alpha_lr, self.alpha_wd] {
            if !(r.lo > 0.0 && r.lo < r.hi && r.hi.is_finite()) {
                return Err(Error::invalid(format!(
                    "log range needs 0 < lo < hi, got [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, hp: &HyperParams) -> bool {
        self.param_lr.contains(hp.param_lr)
            && self.param_wd.contains(hp.param_wd)
            && self.alpha_lr.contains(hp.alpha_lr)
            && self.alpha_wd.contains(hp.alpha_wd)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperParams {
        let mut x = [0.0; DIMS];
        for v in x.iter_mut().take(CONTINUOUS) {
            *v = rng.random::<f64>();
        }
        for v in x.iter_mut().skip(CONTINUOUS) {
            *v = f64::from(rng.random_range(0..2u8));
        }
        self.decode(&x)
    }

    // continuous dims as positions in [0, 1] of the log range, categorical dims as 0/1
    fn encode(&self, hp: &HyperParams) -> [f64; DIMS] {
        [
            self.param_lr.to_unit(hp.param_lr),
            self.param_wd.to_unit(hp.param_wd),
            self.alpha_lr.to_unit(hp.alpha_lr),
            self.alpha_wd.to_unit(hp.alpha_wd),
            f64::from(u8::from(hp.param_warmup)),
            f64::from(u8::from(hp.alpha_warmup)),
            f64::from(u8::from(hp.alpha_scheduler == Scheduler::Linear)),
            f64::from(u8::from(hp.alpha_optimizer == OptimizerKind::Adam)),
        ]
    }

    fn decode(&self, x: &[f64; DIMS]) -> HyperParams {
        HyperParams {
            param_lr: self.param_lr.at_unit(x[0]),
            param_wd: self.param_wd.at_unit(x[1]),
            alpha_lr: self.alpha_lr.at_unit(x[2]),
            alpha_wd: self.alpha_wd.at_unit(x[3]),
            param_warmup: x[4] == 1.0,
            alpha_warmup: x[5] == 1.0,
            alpha_scheduler: if x[6] == 1.0 {
                Scheduler::Linear
            } else {
                Scheduler::None
            },
            alpha_optimizer: if x[7] == 1.0 {
                OptimizerKind::Adam
            } else {
                OptimizerKind::GradientDescent
            },
            ..HyperParams::h1()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    OneShot,
    Architecture,
}

/// One evaluation. `score` is `None` when the run diverged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BohbRecord {
    pub iteration: usize,
    pub bracket: usize,
    pub rung: usize,
    pub config_id: usize,
    pub budget: usize,
    pub seed: u64,
    pub config: HyperParams,
    pub score: Option<f64>,
    pub failed: bool,
}

impl BohbRecord {
    fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rung {
    pub configs: usize,
    pub budget: usize,
}

/// Successive-halving bracket `s`: rung `i` evaluates `configs` at `budget`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    pub fn evaluations(&self) -> usize {
        self.rungs.iter().map(|r| r.configs).sum()
    }
}

pub fn survivors(k: usize, eta: usize) -> usize {
    k.div_ceil(eta)
}

pub fn hyperband_brackets(max_budget: usize, eta: usize) -> Result<Vec<Bracket>> {
    hyperband_brackets_with(max_budget, eta, DEFAULT_RUNGS)
}

/// Brackets from widest to narrowest over budgets `max_budget·eta^-i`, rounded,
/// for at most `rungs` budget levels.
pub fn hyperband_brackets_with(max_budget: usize, eta: usize, rungs: usize) -> Result<Vec<Bracket>> {
    if eta < 2 || rungs == 0 || max_budget == 0 {
        return Err(Error::invalid(format!(
            "hyperband needs eta >= 2, rungs >= 1 and a positive budget; got max {max_budget}, eta {eta}, rungs {rungs}"
        )));
    }
    if rungs > 1 && max_budget < eta {
        return Err(Error::invalid(format!("max budget {max_budget} is below eta {eta}")));
    }
    // deepest bracket whose smallest budget still rounds to at least one epoch
    let mut s_max = rungs - 1;
    while s_max > 0 && (max_budget as f64 / (eta as f64).powi(s_max as i32)).round() < 1.0 {
        s_max -= 1;
    }
    let budget = |level: usize| (max_budget as f64 / (eta as f64).powi((s_max - level) as i32)).round() as usize;
    Ok((0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) as f64 / (s + 1) as f64 * (eta as f64).powi(s as i32)).ceil() as usize;
            let mut configs = n;
            let rungs = (0..=s)
                .map(|i| {
                    let r = Rung {
                        configs,
                        budget: budget(s_max - s + i),
                    };
                    configs = survivors(configs, eta);
                    r
                })
                .collect();
            Bracket { s, rungs }
        })
        .collect())
}

/// Univariate kernel density over the encoded dims.
struct Kde {
    points: Vec<[f64; DIMS]>,
    bandwidth: [f64; CONTINUOUS],
}

impl Kde {
    fn fit(points: Vec<[f64; DIMS]>) -> Self {
        let n = points.len() as f64;
        let mut bandwidth = [MIN_BANDWIDTH; CONTINUOUS];
        for (d, bw) in bandwidth.iter_mut().enumerate() {
            let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            // Scott's rule
            *bw = (1.06 * var.sqrt() * n.powf(-0.2)).max(MIN_BANDWIDTH);
        }
        Kde { points, bandwidth }
    }

    fn log_density(&self, x: &[f64; DIMS]) -> f64 {
        let mut total = 0.0;
        for d in 0..DIMS {
            let mean = self
                .points
                .iter()
                .map(|p| {
                    if d < CONTINUOUS {
                        let z = (x[d] - p[d]) / self.bandwidth[d];
                        (-0.5 * z * z).exp() / self.bandwidth[d]
                    } else if x[d] == p[d] {
                        1.0 - CATEGORICAL_BANDWIDTH
                    } else {
                        CATEGORICAL_BANDWIDTH
                    }
                })
                .sum::<f64>()
                / self.points.len() as f64;
            total += mean.max(1e-300).ln();
        }
        total
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; DIMS] {
        let mut x = [0.0; DIMS];
        for (d, v) in x.iter_mut().enumerate() {
            let centre = self.points[rng.random_range(0..self.points.len())][d];
            *v = if d < CONTINUOUS {
                let noise = Normal::new(0.0, self.bandwidth[d]).expect("positive bandwidth");
                // resample instead of clipping so mass does not pile up at the bounds
                (0..16)
                    .map(|_| centre + noise.sample(rng))
                    .find(|v| (0.0..=1.0).contains(v))
                    .unwrap_or(centre)
            } else if rng.random::<f64>() < CATEGORICAL_BANDWIDTH {
                1.0 - centre
            } else {
                centre
            };
        }
        x
    }
}

/// Largest budget holding at least [`MIN_OBSERVATIONS`] records, with its records.
fn model_budget(history: &[BohbRecord]) -> Option<Vec<&BohbRecord>> {
    let mut budgets: Vec<usize> = history.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    budgets.into_iter().rev().find_map(|b| {
        let obs: Vec<&BohbRecord> = history.iter().filter(|r| r.budget == b).collect();
        (obs.len() >= MIN_OBSERVATIONS).then_some(obs)
    })
}

/// Uniform draw until enough observations exist; afterwards a density-ratio
/// maximizer over [`CANDIDATES`] draws from the good model, interleaved with
/// uniform draws at rate [`RANDOM_FRACTION`].
pub fn sample_config<R: Rng + ?Sized>(space: &HPSpace, rng: &mut R, history: &[BohbRecord]) -> HyperParams {
    let Some(mut obs) = model_budget(history) else {
        return space.sample_uniform(rng);
    };
    if rng.random::<f64>() < RANDOM_FRACTION {
        return space.sample_uniform(rng);
    }
    // stable: equal scores keep history order
    obs.sort_by(|a, b| b.rank_score().partial_cmp(&a.rank_score()).unwrap_or(Ordering::Equal));
    let n_good = ((GAMMA * obs.len() as f64).ceil() as usize).max(2).min(obs.len() - 1);
    let enc = |r: &&BohbRecord| space.encode(&r.config);
    let good = Kde::fit(obs[..n_good].iter().map(enc).collect());
    let bad = Kde::fit(obs[n_good..].iter().map(enc).collect());
    let mut best = good.sample(rng);
    let mut best_ratio = f64::NEG_INFINITY;
    for _ in 0..CANDIDATES {
        let x = good.sample(rng);
        let ratio = good.log_density(&x) - bad.log_density(&x);
        if ratio > best_ratio {
            best = x;
            best_ratio = ratio;
        }
    }
    space.decode(&best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BohbSettings {
    pub iterations: usize,
    pub max_budget: usize,
    pub eta: usize,
    pub rungs: usize,
    pub objective: Objective,
}

impl Default for BohbSettings {
    fn default() -> Self {
        BohbSettings {
            iterations: 128,
            max_budget: 50,
            eta: 3,
            rungs: DEFAULT_RUNGS,
            objective: Objective::Architecture,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BohbResult {
    pub best: HyperParams,
    pub best_score: f64,
    pub records: Vec<BohbRecord>,
}

/// Score of `hp` under `objective` with `sched`; the architecture objective
/// retrains the discretized result with a derived seed.
pub fn score_config(
    objective: Objective,
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<f64> {
    let search = das_search(spec, problem, hp, sched, seed)?;
    match objective {
        Objective::OneShot => Ok(search.one_shot_psnr),
        Objective::Architecture => {
            train_architecture(spec, &search.arch, problem, hp, sched, derive_seed(seed, 1)).map(|o| o.arch_psnr)
        }
    }
}

pub fn run_bohb(
    space: &HPSpace,
    settings: &BohbSettings,
    spec: &SpaceSpec,
    problem: &Problem,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<BohbResult> {
    let objective = settings.objective;
    run_bohb_with(space, settings, seed, |hp, budget, s| {
        score_config(objective, spec, problem, hp, &sched.with_epochs(budget), s)
    })
}

/// Iteration `i` runs bracket `i mod (s_max+1)` from the widest. Configs of a rung
/// are evaluated in parallel; the sampler sees every record of earlier rungs.
pub fn run_bohb_with<F>(space: &HPSpace, settings: &BohbSettings, seed: u64, evaluate: F) -> Result<BohbResult>
where
    F: Fn(&HyperParams, usize, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if settings.iterations == 0 {
        return Err(Error::invalid("BOHB needs at least one iteration"));
    }
    let brackets = hyperband_brackets_with(settings.max_budget, settings.eta, settings.rungs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<BohbRecord> = Vec::new();
    let mut next_config = 0;
    for iteration in 0..settings.iterations {
        let bracket = &brackets[iteration % brackets.len()];
        let mut alive: Vec<(usize, HyperParams, u64)> = (0..bracket.rungs[0].configs)
            .map(|_| {
                let hp = sample_config(space, &mut rng, &records);
                next_config += 1;
                (next_config - 1, hp, rng.next_u64())
            })
            .collect();
        for (rung_idx, rung) in bracket.rungs.iter().enumerate() {
            alive.truncate(rung.configs);
            let scored = alive
                .par_iter()
                .map(|(_, hp, s)| match evaluate(hp, rung.budget, *s) {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    Ok(_) | Err(Error::Diverged(_)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            let first = records.len();
            for ((id, hp, s), score) in alive.iter().zip(scored) {
                records.push(BohbRecord {
                    iteration,
                    bracket: bracket.s,
                    rung: rung_idx,
                    config_id: *id,
                    budget: rung.budget,
                    seed: *s,
                    config: *hp,
                    score,
                    failed: score.is_none(),
                });
            }
            // promote by score; the stable sort leaves ties in record order
            let mut order: Vec<usize> = (0..alive.len()).collect();
            order.sort_by(|&a, &b| {
                let (sa, sb) = (records[first + a].rank_score(), records[first + b].rank_score());
                sb.partial_cmp(&sa).unwrap_or(Ordering::Equal)
            });
            alive = order.into_iter().map(|i| alive[i]).collect();
        }
    }
    let top = brackets
        .iter()
        .map(|b| b.rungs.last().expect("non-empty bracket").budget)
        .max()
        .expect("at least one bracket");
    let best = records
        .iter()
        .filter(|r| r.budget == top && !r.failed)
        .fold(None::<&BohbRecord>, |acc, r| match acc {
            Some(a) if a.rank_score() >= r.rank_score() => Some(a),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Diverged("every full-budget BOHB evaluation failed".into()))?;
    Ok(BohbResult {
        best: best.config,
        best_score: best.rank_score(),
        records,
    })
}
