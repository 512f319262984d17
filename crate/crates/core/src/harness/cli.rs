use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::experiment::{
    checkpoint_name, run_experiment, run_sweep, train_checkpoint, write_aggregate_csv, write_dataset_csv,
    ExperimentConfig, StreamKind, SweepParam,
};
use super::synthetic::{gen_synthetic_dataset, Split};
use crate::error::{Result, TtaError};

#[derive(Parser, Debug)]
#[command(name = "tta", version, about = "Streaming test-time adaptation experiments on a synthetic shifted task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormChoice {
    Bn,
    Iabn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindChoice {
    Dirichlet,
    Iid,
    Sorted,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write source, holdout and target splits as CSV files into the --out directory.
    GenData(Common),
    /// Train a source model and write its checkpoint to --out (a file, or a directory for every seed).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "bn")]
        norm: NormChoice,
    },
    /// Run the experiment grid of --config; --out overrides its output directory.
    AdaptEval(Common),
    /// Sweep the Dirichlet concentration or the batch size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
    },
    /// Write a stream order (one dataset index per line) to --out or stdout.
    StreamGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dirichlet")]
        kind: KindChoice,
        /// Label file, one class id per line. Defaults to the target split's labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long)]
        tokens: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let label = line
            .parse()
            .map_err(|_| TtaError::Format(format!("{}:{}: not a class id: {line:?}", path.display(), n + 1)))?;
        labels.push(label);
    }
    Ok(labels)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let dir = common.out.unwrap_or_else(|| PathBuf::from("data"));
            fs::create_dir_all(&dir)?;
            for &seed in &cfg.seeds {
                for (split, name) in [(Split::Source, "source"), (Split::Holdout, "holdout"), (Split::Target, "target")] {
                    let data = gen_synthetic_dataset(&cfg.task, split, seed)?;
                    let file = fs::File::create(dir.join(format!("{name}-seed{seed}.csv")))?;
                    write_dataset_csv(&data, io::BufWriter::new(file))?;
                }
            }
        }
        Command::Train { common, norm } => {
            let cfg = load_config(&common)?;
            let iabn = matches!(norm, NormChoice::Iabn);
            let out = common.out.unwrap_or_else(|| PathBuf::from("checkpoints"));
            let single_file = cfg.seeds.len() == 1 && out.extension().is_some();
            if !single_file {
                fs::create_dir_all(&out)?;
            }
            for &seed in &cfg.seeds {
                let ckpt = train_checkpoint(&cfg, iabn, seed)?;
                let path = if single_file { out.clone() } else { out.join(checkpoint_name(iabn, seed)) };
                ckpt.save(&path)?;
                let acc = ckpt.meta.final_train_accuracy.unwrap_or(f64::NAN);
                println!("seed {seed}: train accuracy {acc:.4} -> {}", path.display());
            }
        }
        Command::AdaptEval(common) => {
            if common.config.is_none() {
                return Err(TtaError::Config("adapt-eval requires --config".into()));
            }
            let cfg = load_config(&common)?;
            let report = run_experiment(&cfg)?;
            write_aggregate_csv(&report.rows, io::stdout().lock())?;
        }
        Command::Sweep { common, param } => {
            let cfg = load_config(&common)?;
            let rows = run_sweep(&cfg, param)?;
            let mut out = io::stdout().lock();
            for r in rows {
                writeln!(out, "{}={} {} {}: {:.4}", param.name(), r.value, r.row.method, r.row.stream.label(), r.row.mean_error)?;
            }
        }
        Command::StreamGen { common, kind, labels, delta, tokens } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seeds[0];
            let labels = match labels {
                Some(path) => read_labels(&path)?,
                None => gen_synthetic_dataset(&cfg.task, Split::Target, seed)?.labels,
            };
            let kind = match kind {
                KindChoice::Dirichlet => StreamKind::Dirichlet { delta },
                KindChoice::Iid => StreamKind::Iid,
                KindChoice::Sorted => StreamKind::Sorted,
            };
            let order = kind.build(&labels, tokens.or(cfg.tokens), seed)?;
            match &common.out {
                Some(path) => order.save(path)?,
                None => order.write_to(io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

/// Exit code for an error: 2 for bad configuration or malformed files, 3 for I/O, 1 otherwise.
pub fn exit_code(err: &TtaError) -> i32 {
    match err {
        TtaError::Config(_) | TtaError::Format(_) => 2,
        TtaError::Io(_) => 3,
        _ => 1,
    }
}

/// Entry point of the `tta` binary. `argv[0]` is the program name.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tta: {e}");
            exit_code(&e)
        }
    }
}
