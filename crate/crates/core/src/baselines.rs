//! Comparison protocols: fixed-operation networks, random architectures,
//! budgeted random search and the steps-to-beat experiment.

use std::collections::HashSet;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidate::OperationKind;
use crate::engine::{
    derive_seed, require_benign, train_architecture, HyperParams, Problem, TrainOutcome, TrainSchedule,
};
use crate::error::{Error, Result};
use crate::space::{random_arch, DiscreteArch, SpaceSpec};

// architecture draws get their own stream so they never alias a training stream
const STREAM_ARCH: u64 = 6;

/// Redraws tried before accepting an architecture that was already evaluated.
pub const MAX_REDRAWS: usize = 1024;

pub const RUNS_TO_BEAT_CAP: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BudgetPolicy {
    Count { count: usize },
    WallClock { seconds: f64 },
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        BudgetPolicy::Count { count: 5 }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BudgetPolicy::Count { count: 0 } => Err(Error::invalid("random search needs a count of at least 1")),
            BudgetPolicy::WallClock { seconds } if !(seconds.is_finite() && seconds > 0.0) => Err(Error::invalid(
                format!("wall-clock budget must be positive, got {seconds}"),
            )),
            _ => Ok(()),
        }
    }
}

/// One architecture evaluation. `arch_psnr` is NaN when training failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub arch: DiscreteArch,
    pub seed: u64,
    pub arch_psnr: f64,
    pub runtime_s: f64,
    pub failed: bool,
}

#[derive(Clone, Debug)]
pub struct RandomSearchResult {
    /// Index into `evaluations` of the best successful one.
    pub best: Option<usize>,
    pub evaluations: Vec<Evaluation>,
}

impl RandomSearchResult {
    pub fn best(&self) -> Option<&Evaluation> {
        self.best.map(|i| &self.evaluations[i])
    }

    pub fn best_psnr(&self) -> Option<f64> {
        self.best().map(|e| e.arch_psnr)
    }
}

/// Train the all-`kind` architecture of `spec`'s layout.
pub fn fixed_op_baseline(
    kind: OperationKind,
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainOutcome> {
    require_benign(kind)?;
    let single = SpaceSpec {
        opset: vec![kind],
        ..spec.clone()
    };
    train_architecture(&single, &DiscreteArch::uniform(&single, kind), problem, hp, sched, seed)
}

/// Evaluate `arch` with training seed `seed`; the default is a plain retrain.
pub fn retrain_evaluator<'a>(
    spec: &'a SpaceSpec,
    problem: &'a Problem,
    hp: &'a HyperParams,
    sched: &'a TrainSchedule,
) -> impl Fn(&DiscreteArch, u64) -> Result<f64> + 'a {
    move |arch, seed| train_architecture(spec, arch, problem, hp, sched, seed).map(|o| o.arch_psnr)
}

pub fn random_search(
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    budget: BudgetPolicy,
    seed: u64,
) -> Result<RandomSearchResult> {
    random_search_with(spec, budget, seed, retrain_evaluator(spec, problem, hp, sched))
}

/// Random search with a custom evaluator. Evaluation `k` gets training seed
/// `derive_seed(seed, k)`; architectures already seen are redrawn up to
/// [`MAX_REDRAWS`] times. Diverged evaluations are recorded, not fatal.
pub fn random_search_with<F>(
    spec: &SpaceSpec,
    budget: BudgetPolicy,
    seed: u64,
    evaluate: F,
) -> Result<RandomSearchResult>
where
    F: Fn(&DiscreteArch, u64) -> Result<f64>,
{
    spec.validate()?;
    budget.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_ARCH);
    let start = Instant::now();
    let mut seen = HashSet::new();
    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut best: Option<usize> = None;
    loop {
        let done = match budget {
            BudgetPolicy::Count { count } => evaluations.len() >= count,
            BudgetPolicy::WallClock { seconds } => !evaluations.is_empty() && start.elapsed().as_secs_f64() >= seconds,
        };
        if done {
            break;
        }
        let mut arch = random_arch(spec, &mut rng);
        for _ in 0..MAX_REDRAWS {
            if !seen.contains(&arch) {
                break;
            }
            arch = random_arch(spec, &mut rng);
        }
        seen.insert(arch.clone());
        let k = evaluations.len();
        let eval_seed = derive_seed(seed, k as u64);
        let t = Instant::now();
        let (arch_psnr, failed) = match evaluate(&arch, eval_seed) {
            Ok(p) if p.is_finite() => (p, false),
            Ok(_) | Err(Error::Diverged(_)) => (f64::NAN, true),
            Err(e) => return Err(e),
        };
        if !failed && best.is_none_or(|b| arch_psnr > evaluations[b].arch_psnr) {
            best = Some(k);
        }
        evaluations.push(Evaluation {
            arch,
            seed: eval_seed,
            arch_psnr,
            runtime_s: t.elapsed().as_secs_f64(),
            failed,
        });
    }
    Ok(RandomSearchResult { best, evaluations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    /// Evaluations used, including the one that beat the threshold; `cap` when censored.
    pub count: usize,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsToBeat {
    pub threshold: f64,
    pub mean: f64,
    pub repetitions: Vec<Repetition>,
}

impl RunsToBeat {
    pub fn censored(&self) -> usize {
        self.repetitions.iter().filter(|r| r.censored).count()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn runs_to_beat(
    spec: &SpaceSpec,
    problem: &Problem,
    hp: &HyperParams,
    sched: &TrainSchedule,
    threshold: f64,
    repetitions: usize,
    cap: usize,
    seed: u64,
) -> Result<RunsToBeat> {
    runs_to_beat_with(
        spec,
        threshold,
        repetitions,
        cap,
        seed,
        retrain_evaluator(spec, problem, hp, sched),
    )
}

/// Repetition `r` is a random search with seed `derive_seed(seed, r)` stopped at the
/// first evaluation strictly above `threshold`. Repetitions run in parallel.
pub fn runs_to_beat_with<F>(
    spec: &SpaceSpec,
    threshold: f64,
    repetitions: usize,
    cap: usize,
    seed: u64,
    evaluate: F,
) -> Result<RunsToBeat>
where
    F: Fn(&DiscreteArch, u64) -> Result<f64> + Sync,
{
    if threshold.is_nan() || threshold == f64::INFINITY {
        return Err(Error::invalid(format!(
            "threshold must be finite or -inf, got {threshold}"
        )));
    }
    if repetitions == 0 || cap == 0 {
        return Err(Error::invalid(
            "runs_to_beat needs at least one repetition and a positive cap",
        ));
    }
    spec.validate()?;
    let reps = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(seed, r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            rng.set_stream(STREAM_ARCH);
            for k in 0..cap {
                let arch = random_arch(spec, &mut rng);
                let psnr = match evaluate(&arch, derive_seed(rep_seed, k as u64)) {
                    Ok(p) => p,
                    Err(Error::Diverged(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                if psnr > threshold {
                    return Ok(Repetition {
                        count: k + 1,
                        censored: false,
                    });
                }
            }
            Ok(Repetition {
                count: cap,
                censored: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = reps.iter().map(|r| r.count as f64).sum::<f64>() / reps.len() as f64;
    Ok(RunsToBeat {
        threshold,
        mean,
        repetitions: reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidate::OperationKind::*;
    use crate::space::Layout;

    fn tiny() -> SpaceSpec {
        SpaceSpec::sequential(2, SpaceSpec::all_ops(&Layout::Sequential { depth: 2 }))
    }

    // a cheap deterministic stand-in for retraining
    fn score(arch: &DiscreteArch, seed: u64) -> Result<f64> {
        let benign = arch.choices.iter().filter(|k| k.is_benign()).count() as f64;
        Ok(benign + (seed % 1000) as f64 * 1e-6)
    }

    fn timeless(mut v: Vec<Evaluation>) -> Vec<Evaluation> {
        v.iter_mut().for_each(|e| e.runtime_s = 0.0);
        v
    }

    #[test]
    fn count_budget_records_every_evaluation() {
        let r = random_search_with(&tiny(), BudgetPolicy::Count { count: 5 }, 3, score).unwrap();
        assert_eq!(r.evaluations.len(), 5);
        let max = r.evaluations.iter().map(|e| e.arch_psnr).fold(f64::MIN, f64::max);
        assert_eq!(r.best_psnr(), Some(max));
    }

    #[test]
    fn full_budget_covers_tiny_space() {
        let r = random_search_with(&tiny(), BudgetPolicy::Count { count: 16 }, 11, score).unwrap();
        let distinct: HashSet<_> = r.evaluations.iter().map(|e| e.arch.clone()).collect();
        assert_eq!(distinct.len(), 16);
    }

    #[test]
    fn single_draw_is_prefix_of_longer_search() {
        let one = random_search_with(&tiny(), BudgetPolicy::Count { count: 1 }, 5, score).unwrap();
        let five = random_search_with(&tiny(), BudgetPolicy::Count { count: 5 }, 5, score).unwrap();
        assert_eq!(timeless(one.evaluations)[0], timeless(five.evaluations)[0]);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = random_search_with(&tiny(), BudgetPolicy::Count { count: 4 }, 9, score).unwrap();
        let b = random_search_with(&tiny(), BudgetPolicy::Count { count: 4 }, 9, score).unwrap();
        assert_eq!(timeless(a.evaluations), timeless(b.evaluations));
    }

    #[test]
    fn failures_are_recorded_and_never_best() {
        let flaky = |arch: &DiscreteArch, s: u64| {
            if arch.contains_any(&[Noise]) {
                Err(Error::Diverged("nan".into()))
            } else {
                score(arch, s)
            }
        };
        let r = random_search_with(&tiny(), BudgetPolicy::Count { count: 16 }, 1, flaky).unwrap();
        assert_eq!(r.evaluations.iter().filter(|e| e.failed).count(), 7);
        assert!(!r.best().unwrap().failed);
    }

    #[test]
    fn wall_clock_budget_evaluates_at_least_once() {
        let r = random_search_with(&tiny(), BudgetPolicy::WallClock { seconds: 1e-9 }, 0, score).unwrap();
        assert_eq!(r.evaluations.len(), 1);
    }

    #[test]
    fn bad_budgets_rejected() {
        assert!(BudgetPolicy::Count { count: 0 }.validate().is_err());
        assert!(BudgetPolicy::WallClock { seconds: -1.0 }.validate().is_err());
    }

    #[test]
    fn runs_to_beat_extremes() {
        let r = runs_to_beat_with(&tiny(), f64::NEG_INFINITY, 10, 200, 0, score).unwrap();
        assert_eq!(r.mean, 1.0);
        let r = runs_to_beat_with(&tiny(), 1e9, 3, 7, 0, score).unwrap();
        assert_eq!(r.mean, 7.0);
        assert_eq!(r.censored(), 3);
    }

    #[test]
    fn fixed_op_rejects_harmful_kind() {
        let p = Problem::blur();
        let sched = TrainSchedule::default().with_epochs(1);
        assert!(fixed_op_baseline(Roll, &tiny(), &p, &HyperParams::h1(), &sched, 0).is_err());
    }
}
