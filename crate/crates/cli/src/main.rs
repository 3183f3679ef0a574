//! `dpa-lab`: benchmark generation, base pretraining, continual runs,
//! verification suites, gradient checks and cost reports.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use dpa_lab_core::config::LabConfig;
use dpa_lab_core::costing::{self, CostModel, LayerShape};
use dpa_lab_core::harness::{self, Method, RunOptions, RunRecord};
use dpa_lab_core::ipg::{self, PoolMeta};
use dpa_lab_core::model::{BaseModel, Mechanism};
use dpa_lab_core::synth::{self, TaskDataset};
use dpa_lab_core::verify::{self, Faults, SuiteReport};
use dpa_lab_core::LabError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("DPA_LAB_GIT_DESCRIBE"));

#[derive(Parser, Debug)]
#[command(name = "dpa-lab", version = VERSION, about = "Decoupled prompt attention laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed.
    #[arg(long, env = "DPA_LAB_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "dpa-lab-out")]
    out: PathBuf,
    /// Lab config (TOML); missing tables fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for per-seed parallelism (0 = all cores).
    #[arg(long, env = "DPA_LAB_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task sequence.
    GenBench {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the frozen base detector on the held-out pretask.
    PretrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Run continual-learning methods over the benchmark.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<Method>,
        /// Benchmark directory from gen-bench; generated from the config when absent.
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Base checkpoint stem from pretrain-base; pretrained here when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Comma-separated run seeds; defaults to --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also evaluate with routing forced to the true task.
        #[arg(long)]
        forced: bool,
    },
    /// Summarize run records into report tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `record-*.json` files from train.
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated formats: csv, json.
        #[arg(long, value_delimiter = ',', default_value = "csv,json")]
        emit: Vec<Format>,
    },
    /// Run the algebraic, metric, cost and gradient verification suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Fault injection: initialize every lambda to this value.
        #[arg(long, default_value_t = 0.0)]
        fault_lambda_init: f64,
    },
    /// Central-difference gradient check of every op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random points per op.
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Static FLOP, memory and parameter accounting.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mechanisms: none, pa, dpa.
        #[arg(long, value_delimiter = ',', default_value = "pa,dpa")]
        compare: Vec<Mechanism>,
        /// Text tokens queried; defaults to every class of the benchmark.
        #[arg(long)]
        lt: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, clap::ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenBench { .. } => "gen-bench",
            Command::PretrainBase { .. } => "pretrain-base",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Verify { .. } => "verify",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Cost { .. } => "cost",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenBench { common }
            | Command::PretrainBase { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Verify { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Cost { common, .. } => common,
        }
    }
}

enum Failure {
    Verification(String),
    Lab(LabError),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Lab(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lab(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lab(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a LabConfig,
    argv: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_config(common: &Common) -> std::result::Result<LabConfig, LabError> {
    match &common.config {
        Some(p) => LabConfig::load(p),
        None => Ok(LabConfig::default()),
    }
}

fn progress_line(line: &str) {
    eprintln!("{line}");
}

fn load_or_generate_bench(
    cfg: &LabConfig,
    seed: u64,
    dir: Option<&Path>,
) -> std::result::Result<Vec<TaskDataset>, LabError> {
    match dir {
        Some(d) => synth::load_benchmark(d),
        None => synth::generate(&dpa_lab_core::synth::BenchmarkSpec {
            seed,
            ..cfg.bench.clone()
        }),
    }
}

fn load_or_pretrain_base(
    cfg: &LabConfig,
    seed: u64,
    stem: Option<&Path>,
) -> std::result::Result<BaseModel, LabError> {
    match stem {
        Some(s) => BaseModel::load(s),
        None => {
            let pc = harness::PretrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            Ok(harness::pretrain_base(&cfg.model, &pc, Some(&progress_line))?.0)
        }
    }
}

fn print_suites(reports: &[SuiteReport]) {
    for r in reports {
        println!(
            "suite={} instances={} max_error={:.3e} tolerance={:.1e} passed={}",
            r.name, r.instances, r.max_error, r.tolerance, r.passed
        );
    }
}

fn check_suites(reports: &[SuiteReport]) -> Outcome {
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "failed suites: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Serialize)]
struct CostRow {
    mechanism: Mechanism,
    layer: costing::FlopReport,
    layer_memory: u64,
    stack_flops: u64,
    activation_memory: u64,
    trainable_params: usize,
}

fn run(cmd: &Command, cfg: &LabConfig) -> Outcome {
    let common = cmd.common();
    let out = &common.out;
    let seed = common.seed;
    match cmd {
        Command::GenBench { .. } => {
            let tasks = load_or_generate_bench(cfg, seed, None)?;
            synth::save_benchmark(out, &tasks)?;
            for t in &tasks {
                println!(
                    "task={} classes={} train={} test={}",
                    t.task_id,
                    t.class_names.join("+"),
                    t.train.len(),
                    t.test.len()
                );
            }
        }
        Command::PretrainBase { .. } => {
            let pc = harness::PretrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            let (base, losses) = harness::pretrain_base(&cfg.model, &pc, Some(&progress_line))?;
            std::fs::create_dir_all(out)?;
            base.save(&out.join("base"))?;
            write_json(&out.join("pretrain-losses.json"), &losses)?;
            println!(
                "base={} digest={}",
                out.join("base").display(),
                base.digest()
            );
        }
        Command::Train {
            method,
            bench,
            base,
            seeds,
            forced,
            ..
        } => {
            let seeds = if seeds.is_empty() {
                vec![seed]
            } else {
                seeds.clone()
            };
            let tasks = load_or_generate_bench(cfg, seed, bench.as_deref())?;
            let base = load_or_pretrain_base(cfg, seed, base.as_deref())?;
            let opts = RunOptions {
                forced_eval: *forced,
            };
            for &m in method {
                let rec = harness::evaluate_method(
                    &base,
                    &tasks,
                    m,
                    &seeds,
                    &cfg.train,
                    &opts,
                    Some(&progress_line),
                )?;
                write_json(&out.join(format!("record-{m}.json")), &rec)?;
                if m.prompt_mechanism().is_some() {
                    let meta = PoolMeta {
                        gamma: cfg.train.gamma,
                        bank_size: cfg.train.bank_size,
                        prompt_len: base.config.prompt_len,
                    };
                    for r in &rec.runs {
                        ipg::save_pool(
                            &out.join(format!("pool-{m}-seed{}", r.seed)),
                            &r.pool,
                            meta,
                        )?;
                    }
                }
                let row = &harness::report_rows(std::slice::from_ref(&rec))[0];
                println!(
                    "method={m} fap={:.4} cap={:.4} ffp={:.4} routing={:.4} params={}",
                    row.fap.0, row.cap.0, row.ffp.0, row.routing_accuracy, row.trainable_params
                );
            }
        }
        Command::Eval { run, emit, .. } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(run)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("record-") && n.ends_with(".json"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(
                    LabError::Config(format!("no record-*.json under {}", run.display())).into(),
                );
            }
            let records: Vec<RunRecord> = paths
                .iter()
                .map(|p| Ok(serde_json::from_slice(&std::fs::read(p)?)?))
                .collect::<std::result::Result<_, Failure>>()?;
            let rows = harness::report_rows(&records);
            std::fs::create_dir_all(out)?;
            if emit.contains(&Format::Csv) {
                std::fs::write(out.join("report.csv"), harness::report_csv(&rows))?;
            }
            if emit.contains(&Format::Json) {
                std::fs::write(out.join("report.json"), harness::report_json(&rows)?)?;
            }
            println!(
                "{:<18} {:>14} {:>8} {:>14} {:>8} {:>10}",
                "method", "FAP", "CAP", "FFP", "route", "params"
            );
            for r in &rows {
                println!(
                    "{:<18} {:>7.2}±{:<6.2} {:>8.2} {:>7.2}±{:<6.2} {:>8.3} {:>10}",
                    r.method.name(),
                    r.fap.0,
                    r.fap.1,
                    r.cap.0,
                    r.ffp.0,
                    r.ffp.1,
                    r.routing_accuracy,
                    r.trainable_params
                );
            }
        }
        Command::Verify {
            fault_lambda_init, ..
        } => {
            let reports = verify::run_all(
                seed,
                Faults {
                    lambda_init: *fault_lambda_init,
                },
            )?;
            print_suites(&reports);
            write_json(&out.join("verify.json"), &reports)?;
            check_suites(&reports)?;
        }
        Command::Gradcheck { points, .. } => {
            if *points == 0 {
                return Err(LabError::Config("--points must be positive".into()).into());
            }
            let r = verify::gradients(*points, seed)?;
            for (op, e) in &r.details {
                println!("op={op} max_rel_error={e:.3e}");
            }
            print_suites(std::slice::from_ref(&r));
            write_json(&out.join("gradcheck.json"), &r)?;
            check_suites(std::slice::from_ref(&r))?;
        }
        Command::Cost { compare, lt, .. } => {
            let lt = lt.unwrap_or(cfg.bench.n_tasks * cfg.bench.classes_per_task);
            let c = &cfg.model;
            let rows: Vec<CostRow> = compare
                .iter()
                .map(|&m| {
                    let cm = CostModel::from_config(c, lt).with_mechanism(m);
                    let l = if m == Mechanism::None {
                        0
                    } else {
                        c.prompt_len
                    };
                    let shape = LayerShape {
                        lt,
                        lv: c.n_tokens(),
                        l,
                        d: c.d,
                        heads: c.heads,
                    };
                    let layer = match m {
                        Mechanism::Dpa => costing::count_flops_dpa_kind(shape, c.lambda_kind),
                        _ => costing::count_flops_pa(shape),
                    };
                    let mc = dpa_lab_core::model::ToyVlodConfig {
                        mechanism: m,
                        ..c.clone()
                    };
                    CostRow {
                        mechanism: m,
                        layer: costing::FlopReport {
                            mechanism: m,
                            ..layer
                        },
                        layer_memory: costing::layer_memory(m, shape),
                        stack_flops: cm.stack_flops(),
                        activation_memory: cm.activation_memory(),
                        trainable_params: costing::params_count(&mc, true).total(),
                    }
                })
                .collect();
            println!(
                "{:<6} {:>14} {:>14} {:>14} {:>14} {:>10}",
                "mech", "layer_flops", "layer_words", "stack_flops", "stack_words", "params"
            );
            for r in &rows {
                println!(
                    "{:<6} {:>14} {:>14} {:>14} {:>14} {:>10}",
                    format!("{:?}", r.mechanism).to_lowercase(),
                    r.layer.total,
                    r.layer_memory,
                    r.stack_flops,
                    r.activation_memory,
                    r.trainable_params
                );
            }
            write_json(&out.join("cost.json"), &rows)?;
        }
    }
    Ok(())
}

fn exit_code(e: &LabError) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cmd = &cli.command;
    let common = cmd.common();
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let manifest = Manifest {
        command: cmd.name(),
        version: VERSION,
        seed: common.seed,
        config_hash: cfg.hash(),
        config: &cfg,
        argv: std::env::args().collect(),
    };
    if let Err(Failure::Lab(e)) = write_json(
        &common.out.join(format!("manifest-{}.json", cmd.name())),
        &manifest,
    ) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
