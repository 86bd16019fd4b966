use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use flcascade_cli::commands::{self, GradcamOptions};
use flcascade_cli::{CliError, ExperimentConfig, Task};
use flcascade_core::data::DatasetConfig;
use flcascade_core::models::ArchitectureId;
use flcascade_core::transport::{RetryPolicy, ServerOptions};

#[derive(Parser)]
#[command(name = "flcascade", version, about = "Federated lung segmentation and classification on synthetic radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Output directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
        /// Samples per class: one value for all classes, or three.
        #[arg(long, value_delimiter = ',', default_value = "222")]
        per_class: Vec<usize>,
        /// Train:test ratio.
        #[arg(long, default_value = "9:1", value_parser = parse_ratio)]
        split: [usize; 2],
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Federated segmentation training; saves best and final weights.
    TrainSeg(ConfigArg),
    /// Rounds-to-threshold over a grid of clients-per-round and local epochs.
    SweepSeg {
        #[command(flatten)]
        config: ConfigArg,
        /// Clients selected per round.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        sc: Vec<usize>,
        /// Local epochs.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        le: Vec<usize>,
        /// Overrides the config's threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Mask a dataset's images with a segmentation model's predictions.
    SegmentDataset {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated classification training, or the full architecture x dataset x clients grid.
    TrainCls {
        #[command(flatten)]
        config: ConfigArg,
        /// Run the 12-cell grid instead of the configured run.
        #[arg(long, requires = "segmented_dataset")]
        grid: bool,
        /// Segmented dataset for the grid.
        #[arg(long)]
        segmented_dataset: Option<PathBuf>,
    },
    /// Grad-CAM overlays and lung-focus scores for two classifiers.
    Gradcam {
        /// Classifier trained on full images.
        #[arg(long)]
        full_weights: PathBuf,
        /// Classifier trained on segmented images.
        #[arg(long)]
        segmented_weights: PathBuf,
        /// Full dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Segmented dataset shown to the segmented classifier.
        #[arg(long)]
        segmented_dataset: Option<PathBuf>,
        /// Number of lung-opacity test samples.
        #[arg(short = 'n', long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the federation server over TCP.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Seconds to wait for clients to join and for each round.
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Run one federation client over TCP.
    Client {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        client_id: usize,
        /// Architecture this client accepts (defaults to the config's).
        #[arg(long)]
        architecture: Option<ArchitectureId>,
        /// Connection attempts before giving up.
        #[arg(long, default_value_t = RetryPolicy::default().attempts)]
        attempts: u32,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

impl ConfigArg {
    fn load(&self, task: Option<Task>) -> Result<ExperimentConfig, CliError> {
        let config = ExperimentConfig::load(&self.config)?;
        match task {
            Some(t) if t != config.task => Err(CliError::Config(format!(
                "{}: expected a {t:?} config, got {:?}",
                self.config.display(),
                config.task
            ))),
            _ => Ok(config),
        }
    }
}

fn parse_ratio(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected TRAIN:TEST")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok([p(a)?, p(b)?])
}

fn per_class(values: &[usize]) -> Result<[usize; 3], CliError> {
    match *values {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(CliError::Config(format!("--per-class takes 1 or 3 values, got {}", values.len()))),
    }
}

fn fmt_score(s: Option<(f64, f64)>) -> String {
    s.map_or_else(|| "n/a".into(), |(mean, median)| format!("mean {mean:.4} median {median:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            per_class: counts,
            split,
            seed,
        } => {
            let config = DatasetConfig {
                per_class: per_class(&counts)?,
                split_ratio: split,
                seed,
            };
            let m = commands::gen_data(&out, &config)?;
            println!("train {:?} test {:?} -> {}", m.train_counts, m.test_counts, out.display());
        }
        Command::TrainSeg(arg) => print_runs(&commands::train(&arg.load(Some(Task::Segmentation))?)?),
        Command::SweepSeg {
            config,
            sc,
            le,
            threshold,
        } => {
            let mut config = config.load(Some(Task::Segmentation))?;
            if let Some(t) = threshold {
                config.threshold = t;
            }
            let rows = commands::sweep_seg(&config, &sc, &le)?;
            println!("le,sc,median_rounds");
            for &l in &le {
                for &s in &sc {
                    let m = commands::median_rounds(&rows, l, s, (config.fl.rounds + 1) as f64);
                    println!("{l},{s},{}", m.map_or_else(|| "error".into(), |m| m.to_string()));
                }
            }
        }
        Command::SegmentDataset { weights, dataset, out } => {
            let m = commands::segment(&weights, &dataset, &out)?;
            println!("segmented {} samples -> {}", m.samples.len(), out.display());
        }
        Command::TrainCls {
            config,
            grid,
            segmented_dataset,
        } => {
            let config = config.load(Some(Task::Classification))?;
            match segmented_dataset.filter(|_| grid) {
                Some(seg) => {
                    let archs = [ArchitectureId::ClsCnnPlain, ArchitectureId::ClsCnnSkip];
                    let rows = commands::train_cls_grid(&config, &seg, &archs, &[1, 2, 3])?;
                    println!("architecture,dataset,clients,max_accuracy,min_loss,status");
                    for r in rows {
                        let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
                        println!(
                            "{},{},{},{},{},{}",
                            r.architecture,
                            r.dataset_kind,
                            r.num_clients,
                            f(r.max_accuracy),
                            f(r.min_loss),
                            r.status
                        );
                    }
                }
                None => print_runs(&commands::train(&config)?),
            }
        }
        Command::Gradcam {
            full_weights,
            segmented_weights,
            dataset,
            segmented_dataset,
            samples,
            out,
        } => {
            let summary = commands::gradcam(&GradcamOptions {
                full_weights,
                segmented_weights,
                dataset_root: dataset,
                segmented_root: segmented_dataset,
                samples,
                output_dir: out,
            })?;
            println!("full model lung focus: {}", fmt_score(summary.full));
            println!("segmented model lung focus: {}", fmt_score(summary.segmented));
        }
        Command::Serve {
            config,
            bind,
            timeout_secs,
        } => {
            let config = config.load(None)?;
            let timeout = Duration::from_secs(timeout_secs);
            let options = ServerOptions {
                round_timeout: timeout,
                handshake_timeout: timeout,
                ..ServerOptions::new(config.fl.num_clients)
            };
            let run = commands::serve(&config, &bind, options, |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            })?;
            if let Some(last) = run.history.last() {
                println!("finished {} rounds, final metric {:.4}", run.history.len(), last.metric);
            }
        }
        Command::Client {
            config,
            connect,
            client_id,
            architecture,
            attempts,
        } => {
            let config = config.load(None)?;
            let retry = RetryPolicy {
                attempts,
                ..RetryPolicy::default()
            };
            let summary = commands::client(&config, &connect, client_id, architecture, retry)?;
            println!("client {client_id}: trained {} rounds", summary.rounds_trained);
        }
    }
    Ok(())
}

fn print_runs(runs: &[commands::RunSummary]) {
    println!("repetition,best_round,max_metric,final_metric,rounds_to_threshold");
    for r in runs {
        println!(
            "{},{},{:.4},{:.4},{}",
            r.repetition, r.best_round, r.max_metric, r.final_metric, r.rounds_to_threshold
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
