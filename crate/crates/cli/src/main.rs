use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmoe_core::config::RunConfig;
use mmoe_core::harness::{self, Checkpoint, TrainOptions};
use mmoe_core::heads::MetricTable;
use mmoe_core::model::Variant;
use mmoe_core::numerics::{Fault, GradCheckOptions, OpKind};
use mmoe_core::synthdata::{self, Dataset, Split};

/// Memorial mixture-of-experts multi-task models on synthetic scenes.
///
/// Any config key can also be given as a flag, e.g. `--backbone.channels 32`.
#[derive(Parser, Debug)]
#[command(name = "mmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model variant.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations (a checkpoint is written).
        #[arg(long)]
        stop_at: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Train one single-task model per task and write `baseline.csv`.
    TrainSingleTask {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint and write `metrics.csv` next to it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Single-task baseline table; adds the multi-task delta.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Where to write the table (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check at the micro configuration.
    Gradcheck {
        #[arg(long, default_value = "moe_cg_mem")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ksel: Option<usize>,
        /// Scale the backward rule of one op kind (negative control), e.g. `conv`.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Write gate maps and scores for one generated sample.
    DumpGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the generated dataset splits to disk.
    ExportData {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    ksel: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    placement: Option<String>,
    /// Use the original large-scale optimization schedule.
    #[arg(long)]
    paper_schedule: bool,
}

impl ConfigArgs {
    fn resolve(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if self.paper_schedule {
            cfg.use_large_scale_schedule();
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        let named = [
            ("run.seed", self.seed.map(|v| v.to_string())),
            ("run.variant", self.variant.clone()),
            ("run.out", self.out.as_ref().map(|p| p.display().to_string())),
            ("run.iters", self.iters.map(|v| v.to_string())),
            ("mmoe.ksel", self.ksel.map(|v| v.to_string())),
            ("mmoe.kernel", self.kernel.map(|v| v.to_string())),
            ("mmoe.placement", self.placement.clone()),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pulls `--section.key value` / `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--").filter(|k| k.contains('.')) {
            Some(kv) => {
                let (k, v) = match kv.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let Some(v) = it.next() else { bail!("missing value for --{kv}") };
                        (kv.to_string(), v)
                    }
                };
                overrides.push((k, v));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn op_kind(name: &str) -> Result<OpKind> {
    Ok(match name {
        "linear" => OpKind::Linear,
        "conv" => OpKind::Conv,
        "batch_norm" => OpKind::BatchNorm,
        "layer_norm" => OpKind::LayerNorm,
        "attention" => OpKind::Attention,
        "gate_combine" => OpKind::GateCombine,
        "softmax" => OpKind::Softmax,
        "relu" => OpKind::Relu,
        "gelu" => OpKind::Gelu,
        other => bail!("unknown op kind `{other}`"),
    })
}

/// Outcome that maps onto a process exit code without being an error.
enum Status {
    Ok,
    NumericFailure,
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<Status> {
    let no_overrides = |what: &str| -> Result<()> {
        if !overrides.is_empty() {
            bail!("{what} takes its configuration from the checkpoint; drop the dotted flags");
        }
        Ok(())
    };
    match cli.command {
        Command::Train {
            config,
            resume,
            stop_at,
            quiet,
        } => {
            let cfg = config.resolve(overrides)?;
            let out = harness::train(
                &cfg,
                &TrainOptions {
                    resume,
                    stop_at,
                    verbose: !quiet,
                },
            )?;
            println!(
                "trained {} to iteration {}; checkpoint {}",
                cfg.variant,
                out.trainer.iteration,
                out.checkpoint_path.display()
            );
        }
        Command::TrainSingleTask { config } => {
            let cfg = config.resolve(overrides)?;
            let table = harness::train_single_task_baselines(&cfg, |task, step| {
                if step.iteration % 100 == 0 {
                    eprintln!("[{task}] {step}");
                }
            })?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("baseline.csv");
            table.save(&path)?;
            print!("{}", table.to_csv());
            println!("wrote {}", path.display());
        }
        Command::Eval {
            checkpoint,
            split,
            baseline,
            out,
        } => {
            no_overrides("eval")?;
            let split: Split = split.parse()?;
            let (cfg, model, store) = load_checkpoint(&checkpoint)?.restore()?;
            let data = Dataset::generate(&cfg.dataset())?;
            let mut eval = harness::evaluate(&model, &store, &cfg, data.split(split), cfg.train.batch_size)?;
            if let Some(path) = baseline {
                let base = MetricTable::load(&path).with_context(|| format!("reading {}", path.display()))?;
                eval.table.attach_baselines(&base)?;
            }
            let path = out.unwrap_or_else(|| sibling(&checkpoint, "metrics.csv"));
            eval.table.save(&path)?;
            print!("{}", eval.table.to_csv());
            println!("total loss {:.6}; wrote {}", eval.total_loss, path.display());
        }
        Command::Gradcheck {
            variant,
            seed,
            ksel,
            corrupt,
        } => {
            no_overrides("gradcheck")?;
            let mut cfg = harness::micro_config(variant.parse::<Variant>()?, seed);
            cfg.gating.k_sel = ksel;
            cfg.validate()?;
            let opts = GradCheckOptions {
                fault: corrupt
                    .as_deref()
                    .map(|k| Ok::<_, anyhow::Error>(Fault { kind: op_kind(k)?, scale: 1.1 }))
                    .transpose()?,
                ..Default::default()
            };
            let report = harness::gradcheck_model(&cfg, opts)?;
            println!("{report}");
            if !report.passed() {
                return Ok(Status::NumericFailure);
            }
        }
        Command::DumpGates {
            checkpoint,
            sample_seed,
            out,
        } => {
            no_overrides("dump-gates")?;
            let (cfg, model, store) = load_checkpoint(&checkpoint)?.restore()?;
            let sample = synthdata::generate_sample(sample_seed, &cfg.dataset())?;
            let dump = harness::dump_gates(&model, &store, &sample, &out)?;
            println!(
                "wrote {} gate maps, {} expert maps, {} score tables to {}",
                dump.gate_maps.len(),
                dump.expert_maps.len(),
                dump.score_tables.len(),
                out.display()
            );
        }
        Command::ExportData { config } => {
            let cfg = config.resolve(overrides)?;
            let data = Dataset::generate(&cfg.dataset())?;
            for split in [Split::Train, Split::Val] {
                synthdata::export_split(&cfg.out, split, data.split(split))?;
            }
            println!(
                "exported {} train and {} val samples to {}",
                data.train.len(),
                data.val.len(),
                cfg.out.display()
            );
        }
    }
    Ok(Status::Ok)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mmoe_core::Error>() {
        Some(e) if e.is_numeric() => 2,
        Some(e) if e.is_io() => 3,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("MMOE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Ignoring the error is fine: it only fails if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NumericFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
