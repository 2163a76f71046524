use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privit_core::experiment::{
    cmd_ablate_attention, cmd_baseline, cmd_pretrain, cmd_search, cmd_sweep, cost_table, degradation_stats,
    latency_rows, load_data, report_distribution, write_csv, ExperimentError, RunConfig,
};
use privit_core::latency::{census_of_model, pareto_frontier, read_points_csv, write_pareto_csv};
use privit_core::train::{apply_strategy, per_class_accuracy, Strategy};
use privit_core::vit::{read_checkpoint, AttentionVariant, Model};

#[derive(Parser)]
#[command(name = "privit", version, about = "Search which softmax rows and GELUs of a small ViT to keep")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    budget_gelu: Option<usize>,
    #[arg(long, global = true)]
    budget_softmax: Option<usize>,
    /// Attention surrogate: squared, scale or uniform.
    #[arg(long, global = true)]
    variant: Option<AttentionVariant>,
    /// Disable knowledge distillation.
    #[arg(long, global = true)]
    no_kd: bool,
    /// Penalty schedule 1..5.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=5))]
    strategy: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the all-nonlinear teacher.
    Pretrain,
    /// Search, binarize and finetune one student.
    Search {
        /// Teacher checkpoint; trained inline when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Grid of (GELU, softmax) budgets with a Pareto frontier.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        gelu_budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        softmax_budgets: Vec<usize>,
    },
    /// Same search once per attention surrogate.
    AblateAttn {
        /// Variants to compare (default: all).
        #[arg(long = "variants", value_delimiter = ',')]
        variants: Vec<AttentionVariant>,
    },
    /// Last-k-layers GELU linearization against search at the same budget.
    Baseline {
        #[arg(long, value_delimiter = ',', default_value = "1")]
        k: Vec<usize>,
    },
    /// Per-layer active counts of a binarized checkpoint.
    ReportDist { checkpoint: PathBuf },
    /// Per-class accuracy differences between two checkpoints on the test split.
    DegradeStats { a: PathBuf, b: PathBuf },
    /// Nonlinearity census of a checkpoint priced in ReLUOps.
    Latency { checkpoint: PathBuf },
    /// Frontier of a `label,latency_reluops,accuracy` CSV.
    Pareto { input: PathBuf },
}

fn build_config(c: &Common) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(g) = c.budget_gelu {
        cfg.search.gelu_budget = g;
    }
    if let Some(s) = c.budget_softmax {
        cfg.search.softmax_budget = s;
    }
    if let Some(v) = c.variant {
        cfg.model.attn_variant = v;
    }
    if c.no_kd {
        cfg.search.kd_enabled = false;
    }
    if let Some(k) = c.strategy {
        let strategy = Strategy::try_from(k).map_err(ExperimentError::Config)?;
        cfg.search = apply_strategy(&cfg.search, strategy);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model, ExperimentError> {
    Ok(read_checkpoint(path)?)
}

/// Writes `rows` to `<out>/<name>` when `--out` was given, else to stdout.
fn emit<T: serde::Serialize>(out: Option<&Path>, name: &str, rows: &[T]) -> Result<(), ExperimentError> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?;
            let path = dir.join(name);
            write_csv(&path, rows)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|source| ExperimentError::Io { path: "stdout".into(), source })
        }
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let out = cli.common.out.clone();
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Pretrain => {
            let run = cmd_pretrain(&cfg)?;
            println!(
                "teacher: {} epochs, train acc {:.4}, test acc {:.4} -> {}",
                run.history.len(),
                run.train_accuracy,
                run.test_accuracy,
                cfg.out_dir.display()
            );
        }
        Command::Search { teacher } => {
            let teacher = teacher.as_deref().map(load_model).transpose()?;
            let run = cmd_search(&cfg, teacher.as_ref())?;
            let (g, s) = run.model.switches.count_active();
            println!(
                "search: {} epochs, gelu {g}, softmax {s}, test acc {:.4} (teacher {:.4}), {:.0} ReLUOps -> {}",
                run.history.len(),
                run.test_accuracy,
                run.teacher_test_accuracy,
                run.latency_reluops,
                cfg.out_dir.display()
            );
        }
        Command::Sweep { gelu_budgets, softmax_budgets } => {
            let res = cmd_sweep(&cfg, &gelu_budgets, &softmax_budgets)?;
            for c in &res.cells {
                println!("{} {}", c.label, c.status);
            }
            println!("frontier: {} of {} points -> {}", res.frontier.len(), res.points.len(), cfg.out_dir.display());
        }
        Command::AblateAttn { variants } => {
            let variants = if variants.is_empty() { AttentionVariant::ALL.to_vec() } else { variants };
            for r in cmd_ablate_attention(&cfg, &variants)? {
                println!("{} {} acc {:?}", r.variant, r.status, r.test_accuracy);
            }
        }
        Command::Baseline { k } => {
            for r in cmd_baseline(&cfg, &k)? {
                println!("{} k={} gelu {} acc {:.4}", r.method, r.k, r.gelu_count, r.test_accuracy);
            }
        }
        Command::ReportDist { checkpoint } => {
            let rows = report_distribution(&load_model(&checkpoint)?)?;
            emit(out.as_deref(), "distribution.csv", &rows)?;
        }
        Command::DegradeStats { a, b } => {
            let (_, test) = load_data(&cfg)?;
            let pa = per_class_accuracy(&load_model(&a)?, &test)?;
            let pb = per_class_accuracy(&load_model(&b)?, &test)?;
            emit(out.as_deref(), "degradation.csv", &[degradation_stats(&pa, &pb)?])?;
        }
        Command::Latency { checkpoint } => {
            let census = census_of_model(&load_model(&checkpoint)?)?;
            emit(out.as_deref(), "latency.csv", &latency_rows(&census, &cost_table(&cfg)?)?)?;
        }
        Command::Pareto { input } => {
            let file = std::fs::File::open(&input)
                .map_err(|source| ExperimentError::Io { path: input.display().to_string(), source })?;
            let points = read_points_csv(file)?;
            let frontier = pareto_frontier(&points)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?;
                    let path = dir.join("pareto.csv");
                    let f = std::fs::File::create(&path)
                        .map_err(|source| ExperimentError::Io { path: path.display().to_string(), source })?;
                    write_pareto_csv(&points, &frontier, f)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    write_pareto_csv(&points, &frontier, std::io::stdout())?;
                    let _ = std::io::stdout().flush();
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
