//! Multi-trial studies, their summary statistics and file formats.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fixed_op_baseline, random_search, BudgetPolicy};
use crate::candidate::OperationKind;
use crate::engine::{
    das_search_with, das_single_search, derive_seed, train_architecture, HyperParams, InnerSteps, Problem,
    TrainSchedule,
};
use crate::error::{Error, Result};
use crate::space::{DiscreteArch, SpaceSpec};

pub const CSV_HEADER: [&str; 10] = [
    "study",
    "trial",
    "seed",
    "method",
    "hp",
    "one_shot_psnr",
    "arch_psnr",
    "arch",
    "runtime_s",
    "failed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Das,
    DasSingle,
    Random,
    RandomSearch,
    FixedOp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::DasSingle => "das-single",
            Method::Random => "random",
            Method::RandomSearch => "random-search",
            Method::FixedOp => "fixed-op",
        }
    }

    pub fn is_search(self) -> bool {
        matches!(self, Method::Das | Method::DasSingle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Das,
            Method::DasSingle,
            Method::Random,
            Method::RandomSearch,
            Method::FixedOp,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// One trial. PSNRs and the architecture are absent when the trial failed before producing them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub study: String,
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub hp: String,
    pub spec: String,
    pub one_shot_psnr: Option<f64>,
    pub arch_psnr: Option<f64>,
    pub arch: Option<DiscreteArch>,
    pub runtime_s: f64,
    pub failed: bool,
}

/// Everything a study needs; `fixed_op` and `budget` only matter for their methods.
#[derive(Clone, Debug)]
pub struct Study {
    pub id: String,
    pub method: Method,
    pub spec: SpaceSpec,
    pub problem: Problem,
    pub hp: HyperParams,
    pub hp_label: String,
    pub sched: TrainSchedule,
    pub n_trials: usize,
    pub base_seed: u64,
    pub budget: BudgetPolicy,
    pub fixed_op: OperationKind,
    pub inner: InnerSteps,
}

struct Outcome {
    one_shot: Option<f64>,
    arch_psnr: Option<f64>,
    arch: Option<DiscreteArch>,
    failed: bool,
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::invalid("a study needs at least one trial"));
        }
        self.spec.validate()?;
        self.hp.validate()?;
        self.sched.validate()?;
        self.budget.validate()?;
        if self.method == Method::FixedOp {
            crate::engine::require_benign(self.fixed_op)?;
        }
        if self.method == Method::DasSingle && !matches!(self.spec.layout, crate::space::Layout::Sequential { .. }) {
            return Err(Error::invalid("das-single needs a sequential space"));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.base_seed, trial as u64)
    }

    /// Trial `i` on its own; `run_study` is this over every index.
    pub fn run_trial(&self, trial: usize) -> Result<TrialRecord> {
        let seed = self.trial_seed(trial);
        let start = Instant::now();
        let outcome = match self.outcome(seed) {
            Ok(o) => o,
            Err(Error::Diverged(_)) => Outcome {
                one_shot: None,
                arch_psnr: None,
                arch: None,
                failed: true,
            },
            Err(e) => return Err(e),
        };
        Ok(TrialRecord {
            study: self.id.clone(),
            trial,
            seed,
            method: self.method,
            hp: self.hp_label.clone(),
            spec: self.spec.summary(),
            one_shot_psnr: outcome.one_shot,
            arch_psnr: outcome.arch_psnr,
            arch: outcome.arch,
            runtime_s: start.elapsed().as_secs_f64(),
            failed: outcome.failed,
        })
    }

    fn outcome(&self, seed: u64) -> Result<Outcome> {
        let (spec, p, hp, sched) = (&self.spec, &self.problem, &self.hp, &self.sched);
        match self.method {
            Method::Das | Method::DasSingle => {
                let search = if self.method == Method::Das {
                    das_search_with(spec, p, hp, sched, seed, self.inner)?
                } else {
                    das_single_search(spec, p, hp, sched, seed)?
                };
                // a failed retrain still leaves the search outcome worth keeping
                let retrain = train_architecture(spec, &search.arch, p, hp, sched, derive_seed(seed, 1));
                let arch_psnr = match retrain {
                    Ok(o) => Some(o.arch_psnr),
                    Err(Error::Diverged(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(Outcome {
                    one_shot: Some(search.one_shot_psnr),
                    failed: arch_psnr.is_none(),
                    arch_psnr,
                    arch: Some(search.arch),
                })
            }
            Method::Random | Method::RandomSearch => {
                let budget = if self.method == Method::Random {
                    BudgetPolicy::Count { count: 1 }
                } else {
                    self.budget
                };
                let r = random_search(spec, p, hp, sched, budget, seed)?;
                let best = r.best().or(r.evaluations.first()).expect("at least one evaluation");
                Ok(Outcome {
                    one_shot: None,
                    arch_psnr: (!best.failed).then_some(best.arch_psnr),
                    arch: Some(best.arch.clone()),
                    failed: best.failed,
                })
            }
            Method::FixedOp => {
                let o = fixed_op_baseline(self.fixed_op, spec, p, hp, sched, seed)?;
                Ok(Outcome {
                    one_shot: None,
                    arch_psnr: Some(o.arch_psnr),
                    arch: Some(DiscreteArch::uniform(spec, self.fixed_op)),
                    failed: false,
                })
            }
        }
    }
}

/// Runs every trial on a pool of `parallelism` threads; records come back in trial order.
pub fn run_study(study: &Study, parallelism: usize) -> Result<Vec<TrialRecord>> {
    study.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..study.n_trials)
            .into_par_iter()
            .map(|i| study.run_trial(i))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinReg {
    /// `None` when either variable has zero variance.
    pub r: Option<f64>,
    /// `None` when xs has zero variance.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Sample Pearson correlation and least-squares line of `ys` on `xs`.
pub fn pearson_linreg(xs: &[f64], ys: &[f64]) -> Result<LinReg> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(format!(
            "correlation needs two equal-length series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Ok(LinReg {
            r: None,
            slope: None,
            intercept: None,
        });
    }
    let slope = sxy / sxx;
    Ok(LinReg {
        r: (syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)),
        slope: Some(slope),
        intercept: Some(my - slope * mx),
    })
}

/// Field order is the summary JSON schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n: usize,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub pearson_r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub failures: usize,
}

impl StudySummary {
    pub fn r_undefined(&self) -> bool {
        self.pearson_r.is_none()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile range with linear interpolation between order statistics.
pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    q(0.75) - q(0.25)
}

/// The (one-shot, architecture) pairs that enter the correlation, in record order.
pub fn scatter_pairs(records: &[TrialRecord]) -> Vec<(usize, f64, f64)> {
    records
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| Some((r.trial, r.one_shot_psnr?, r.arch_psnr?)))
        .collect()
}

/// Moments over successful records; failures are only counted.
pub fn summarize(records: &[TrialRecord]) -> Result<StudySummary> {
    let ok: Vec<f64> = records
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| r.arch_psnr)
        .collect();
    if ok.is_empty() {
        return Err(Error::invalid(format!(
            "no successful trial among {} records",
            records.len()
        )));
    }
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    let std = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let pairs = scatter_pairs(records);
    let fit = if pairs.len() >= 2 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        pearson_linreg(&xs, &ys)?
    } else {
        LinReg {
            r: None,
            slope: None,
            intercept: None,
        }
    };
    Ok(StudySummary {
        n: ok.len(),
        max: ok.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        median: median(&ok),
        std,
        pearson_r: fit.r,
        slope: fit.slope,
        intercept: fit.intercept,
        failures: records.len() - ok.len(),
    })
}

fn fixed6(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.study.clone(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.method.to_string(),
            r.hp.clone(),
            fixed6(r.one_shot_psnr),
            fixed6(r.arch_psnr),
            r.arch.as_ref().map(ToString::to_string).unwrap_or_default(),
            format!("{:.6}", r.runtime_s),
            r.failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records back from CSV; the space summary is not part of the CSV and comes back empty.
pub fn read_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let bad = |what: &str, row: usize| Error::Config(format!("{}: row {row}: bad {what}", path.display()));
    let mut rd = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let opt = |s: &str| -> std::result::Result<Option<f64>, ()> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| ())
        }
    };
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let f = |k: usize| row.get(k).unwrap_or_default();
        out.push(TrialRecord {
            study: f(0).to_string(),
            trial: f(1).parse().map_err(|_| bad("trial", i))?,
            seed: f(2).parse().map_err(|_| bad("seed", i))?,
            method: f(3).parse()?,
            hp: f(4).to_string(),
            spec: String::new(),
            one_shot_psnr: opt(f(5)).map_err(|_| bad("one_shot_psnr", i))?,
            arch_psnr: opt(f(6)).map_err(|_| bad("arch_psnr", i))?,
            arch: if f(7).is_empty() { None } else { Some(f(7).parse()?) },
            runtime_s: f(8).parse().map_err(|_| bad("runtime_s", i))?,
            failed: f(9).parse().map_err(|_| bad("failed", i))?,
        });
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_summary(path: &Path, summary: &StudySummary) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// `trial,one_shot_psnr,arch_psnr` at full precision, exactly the pairs behind `pearson_r`.
pub fn write_scatter(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "trial,one_shot_psnr,arch_psnr").map_err(io)?;
    for (t, x, y) in scatter_pairs(records) {
        writeln!(w, "{t},{x},{y}").map_err(io)?;
    }
    w.flush().map_err(io)
}
