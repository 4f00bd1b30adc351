//! `fedjets`: pretrain a common expert, inspect partitions, run federated
//! training, evaluate saved states and tabulate metrics.
//!
//! Exit codes: 0 success, 2 configuration or protocol error, 3 numeric error
//! or unreached pretraining target, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedjets_core::config::Config;
use fedjets_core::data::histogram_csv;
use fedjets_core::experiment::{self, PretrainSettings};
use fedjets_core::metrics::{self, parse_jsonl};
use fedjets_core::nn::{read_checkpoint, write_checkpoint};
use fedjets_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedjets", version, about = "Federated mixture-of-experts simulator")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,

    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// `dot.path=value`, applied in order after the file is read.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("training.seed={seed}"));
        }
        let cfg = Config::load(&self.config, &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the common expert centrally and write its checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop once held-out accuracy reaches this (default: model.common_target_acc).
        #[arg(long)]
        target_acc: Option<f64>,
        /// Epoch cap; without --target-acc, train exactly this many epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the client shards and print their label histograms.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the per-client label histogram table.
        #[arg(long)]
        inspect: bool,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one federated training job into an output directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot and routing evaluation of a saved state.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the per-client routing table as CSV.
        #[arg(long)]
        routing_csv: Option<PathBuf>,
    },
    /// Best-of-last-k accuracy and communication totals per run.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        last_k: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretrain(args: &ConfigArgs, target: Option<f64>, epochs: Option<usize>, out: &Path) -> Result<()> {
    let cfg = args.load()?;
    let (train, test) = experiment::datasets(&cfg)?;
    let spec = experiment::common_spec(&cfg)?;
    let mut settings = PretrainSettings::from_config(&cfg);
    if let Some(e) = epochs {
        settings.max_epochs = e;
        settings.target = target;
    } else if let Some(t) = target {
        settings.target = Some(t);
    }
    if let Some(t) = settings.target {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("target accuracy {t} is outside [0, 1]")));
        }
    }
    let p = experiment::pretrain_common(&spec, &train, &test, &settings)?;
    write_checkpoint(out, &[experiment::common_record(&spec, &p, cfg.training.seed)])?;
    println!(
        "seed {} accuracy {:.4} epochs {} steps {} -> {}",
        cfg.training.seed,
        p.accuracy,
        p.epochs,
        p.steps,
        out.display()
    );
    Ok(())
}

fn partition(args: &ConfigArgs, inspect: bool, out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let (train, test) = experiment::datasets(&cfg)?;
    let layout = experiment::layout(&cfg, &train, &test)?;
    if inspect || out.is_some() {
        emit(out, &histogram_csv(&layout.all_shards()))?;
    }
    eprintln!(
        "seed {}: {} anchors, {} normal clients, {} test clients, routing ground truth {}",
        cfg.training.seed,
        layout.anchors.len(),
        layout.normals.len(),
        layout.test_clients.len(),
        if layout.truth.is_some() { "available" } else { "unavailable" }
    );
    Ok(())
}

fn run(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.load()?;
    let exp = experiment::build(&cfg)?;
    eprintln!(
        "seed {} method {} common expert accuracy {:.4}",
        cfg.training.seed,
        cfg.training.method.name(),
        exp.common_acc
    );
    let result = exp.run()?;
    experiment::write_outputs(out, &exp, &result)?;
    if let Some(last) = result.history.last() {
        let routing = last.routing_acc.map_or(String::new(), |r| format!(" routing {r:.4}"));
        eprintln!("round {} global {:.4}{routing}", last.round, last.global_acc);
    }
    Ok(())
}

fn eval(args: &ConfigArgs, state: &Path, report: &Path, routing_csv: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let loaded = experiment::load_state(read_checkpoint(state)?)?;
    let (train, test) = experiment::datasets(&cfg)?;
    let common_acc = experiment::heldout_accuracy(loaded.common.spec(), loaded.common.params(), &test)?;
    let exp = experiment::build_with_common(&cfg, train, test, loaded.common.clone(), common_acc)?;
    let (json, csv) = experiment::evaluation_report(&exp, &loaded)?;
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::config(e.to_string()))?;
    write_text(report, &format!("{text}\n"))?;
    if let Some(path) = routing_csv {
        match csv {
            Some(c) => write_text(path, &c)?,
            None => eprintln!("routing table unavailable: no disjoint label -> expert map"),
        }
    }
    eprintln!("global accuracy {:.4} -> {}", json["global_acc"].as_f64().unwrap_or(f64::NAN), report.display());
    Ok(())
}

fn report(files: &[PathBuf], last_k: usize, out: Option<&Path>) -> Result<()> {
    let mut runs = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        runs.push((f.display().to_string(), parse_jsonl(&text, &f.display().to_string())?));
    }
    let rows = metrics::report_rows(&runs, last_k)?;
    emit(out, &metrics::report_csv(&rows, last_k))
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Pretrain {
            cfg,
            target_acc,
            epochs,
            out,
        } => pretrain(cfg, *target_acc, *epochs, out),
        Command::Partition { cfg, inspect, out } => partition(cfg, *inspect, out.as_deref()),
        Command::Run { cfg, out } => run(cfg, out),
        Command::Eval {
            cfg,
            state,
            report: path,
            routing_csv,
        } => eval(cfg, state, path, routing_csv.as_deref()),
        Command::Report { metrics, last_k, out } => report(metrics, *last_k, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
