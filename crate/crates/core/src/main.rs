use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use das1d::baselines::runs_to_beat;
use das1d::config::{parse_override, ExperimentConfig};
use das1d::engine::train_architecture;
use das1d::harness::{self, run_study, summarize, TrialRecord};
use das1d::hyperopt::run_bohb;
use das1d::space::DiscreteArch;
use das1d::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Differentiable architecture search for 1D inverse problems.
#[derive(Parser, Debug)]
#[command(name = "das1d", version)]
struct Cli {
    /// JSON experiment config; built-in defaults fill anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.epochs=20` or `--set hp=h2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// good | all
    #[arg(long, global = true)]
    opset: Option<String>,
    /// sequential | cell
    #[arg(long, global = true)]
    space: Option<String>,
    /// das | das-single | random | random-search | fixed-op
    #[arg(long, global = true)]
    method: Option<String>,
    /// Preset name (h1, h2, bohb-blur, ...).
    #[arg(long, global = true)]
    hp: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Output directory; defaults to $DAS1D_OUTPUT_DIR, then ./results.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// One search plus retraining of the chosen architecture.
    Search,
    /// Train a given architecture from scratch.
    Retrain {
        /// Canonical architecture string, e.g. `seq2|LG,Net`.
        #[arg(long)]
        arch: String,
    },
    /// Run every trial of the configured study and summarize it.
    Study,
    /// Fixed-op, random or random-search baseline; runs-to-beat when a threshold is set.
    Baseline {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Hyperparameter optimization with hyperband brackets.
    Bohb {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Recompute a summary from stored JSON-lines records.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Where to write the summary; defaults to `<output>/<input stem>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// usage problems exit 2, failed experiments exit 1
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut overrides = Vec::new();
    let mut flag = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            overrides.push((key.to_string(), v));
        }
    };
    flag("opset", cli.opset.clone().map(Value::from));
    flag("space.topology", cli.space.clone().map(Value::from));
    flag("method", cli.method.clone().map(Value::from));
    flag("hp", cli.hp.clone().map(Value::from));
    flag("n_trials", cli.trials.map(Value::from));
    flag("base_seed", cli.seed.map(Value::from));
    flag("parallelism", cli.parallelism.map(Value::from));
    flag(
        "output_dir",
        cli.output
            .as_ref()
            .map(|p| Value::from(p.to_string_lossy().into_owned())),
    );
    match &cli.verb {
        Verb::Baseline { threshold: Some(t) } => flag("runs_to_beat.threshold", Some(json!(t))),
        Verb::Bohb { iterations: Some(n) } => flag("bohb.iterations", Some(json!(n))),
        _ => {}
    }
    for s in &cli.overrides {
        overrides.push(parse_override(s)?);
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(e) = cli.epochs {
        cfg.schedule = cfg.schedule.with_epochs(e);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn check_verb(verb: &Verb, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let m = cfg.method;
    match verb {
        Verb::Search if !m.is_search() => Err(Failure::Usage(format!(
            "search needs method das or das-single, got {m}"
        ))),
        Verb::Baseline { .. } if cfg.runs_to_beat.threshold.is_none() && m.is_search() => Err(Failure::Usage(format!(
            "baseline needs method random, random-search or fixed-op, got {m}"
        ))),
        _ => Ok(()),
    }
}

fn out_path(cfg: &ExperimentConfig, name: String) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        Failure::Run(Error::Io {
            path: cfg.output_dir.clone(),
            source: e,
        })
    })?;
    Ok(cfg.output_dir.join(name))
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    wrote(path);
    Ok(())
}

fn export_study(cfg: &ExperimentConfig, stem: &str, records: &[TrialRecord]) -> Result<(), Failure> {
    let csv = out_path(cfg, format!("{stem}.csv"))?;
    harness::write_csv(&csv, records)?;
    wrote(&csv);
    let jsonl = out_path(cfg, format!("{stem}.jsonl"))?;
    harness::write_jsonl(&jsonl, records)?;
    wrote(&jsonl);
    let scatter = out_path(cfg, format!("{stem}.scatter.csv"))?;
    harness::write_scatter(&scatter, records)?;
    wrote(&scatter);
    match summarize(records) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
            let path = out_path(cfg, format!("{stem}.summary.json"))?;
            harness::write_summary(&path, &summary)?;
            wrote(&path);
        }
        // every trial failed: the records are the result
        Err(e) => eprintln!("no summary: {e}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    check_verb(&cli.verb, &cfg)?;
    let id = cfg.study_id();
    match &cli.verb {
        Verb::Search => {
            let mut study = cfg.study()?;
            study.n_trials = 1;
            let record = study.run_trial(0)?;
            println!("{}", serde_json::to_string(&record).map_err(Error::from)?);
            export_study(&cfg, &format!("{id}.search"), &[record])?;
        }
        Verb::Retrain { arch } => {
            let arch: DiscreteArch = arch.parse()?;
            let spec = cfg.spec();
            arch.validate_for(&spec)?;
            let problem = cfg.problem()?;
            let hp = cfg.hp.resolve()?;
            let out =
                train_architecture(&spec, &arch, &problem, &hp, &cfg.schedule, cfg.base_seed).map_err(Failure::Run)?;
            let v = json!({
                "arch": arch.to_string(),
                "seed": cfg.base_seed,
                "hp": cfg.hp.label(),
                "arch_psnr": out.arch_psnr,
                "runtime_s": out.runtime_s,
            });
            println!("{v}");
            write_json(&out_path(&cfg, format!("{id}.retrain.json"))?, &v)?;
        }
        Verb::Study => {
            let records = run_study(&cfg.study()?, cfg.parallelism)?;
            export_study(&cfg, &id, &records)?;
        }
        Verb::Baseline { .. } => {
            if let Some(threshold) = cfg.runs_to_beat.threshold {
                let r = runs_to_beat(
                    &cfg.spec(),
                    &cfg.problem()?,
                    &cfg.hp.resolve()?,
                    &cfg.schedule,
                    threshold,
                    cfg.runs_to_beat.repetitions,
                    cfg.runs_to_beat.cap,
                    cfg.base_seed,
                )
                .map_err(Failure::Run)?;
                let v = serde_json::to_value(&r).map_err(Error::from)?;
                println!("{v}");
                write_json(&out_path(&cfg, format!("{id}.runs-to-beat.json"))?, &v)?;
            } else {
                let records = run_study(&cfg.study()?, cfg.parallelism)?;
                export_study(&cfg, &id, &records)?;
            }
        }
        Verb::Bohb { .. } => {
            let r = run_bohb(
                &cfg.hp_space,
                &cfg.bohb,
                &cfg.spec(),
                &cfg.problem()?,
                &cfg.schedule,
                cfg.base_seed,
            )
            .map_err(Failure::Run)?;
            let log = out_path(&cfg, format!("{id}.bohb.jsonl"))?;
            harness::write_jsonl(&log, &r.records)?;
            wrote(&log);
            let v = json!({ "best": r.best, "score": r.best_score, "evaluations": r.records.len() });
            println!("{v}");
            write_json(&out_path(&cfg, format!("{id}.bohb-best.json"))?, &v)?;
        }
        Verb::Report { input, out } => {
            let records: Vec<TrialRecord> = harness::read_jsonl(input)?;
            let summary = summarize(&records)?;
            let path = match out {
                Some(p) => p.clone(),
                None => {
                    let stem = input
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "report".into());
                    out_path(&cfg, format!("{stem}.report.json"))?
                }
            };
            harness::write_summary(&path, &summary)?;
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
            wrote(&path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
