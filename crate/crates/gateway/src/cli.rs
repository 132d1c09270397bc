//! The `advqa` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails on its inputs, 2 on
//! usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use advqa_core::analysis::{compute_stats, evaluate_map, human_performance, parse_predictions, stats_csv, EvalResult, StatsReport};
use advqa_core::eventlog::{read_log, EventLogWriter};
use advqa_core::metrics::adjudicate;
use advqa_core::store::{export_dataset, import_squad, ExportRequest, Split};
use advqa_core::Engine;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Overrides, PlatformConfig};
use crate::server::{self, ServeError};

#[derive(Debug, Parser)]
#[command(name = "advqa", version, about = "Adversarial question collection platform")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ADVQA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding the event log and exports.
    #[arg(long, global = true, env = "ADVQA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// F1 at or above which the model wins.
    #[arg(long, global = true, env = "ADVQA_POLICY_THRESHOLD")]
    pub policy_threshold: Option<f64>,
    #[arg(long, global = true, env = "ADVQA_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long, env = "ADVQA_LISTEN")]
        listen: Option<SocketAddr>,
        /// Adds an admin bearer token on top of the configured ones.
        #[arg(long, env = "ADVQA_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: Option<String>,
    },
    /// Load the passages of a SQuAD-format file into the pool.
    Import {
        file: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Write SQuAD-format files and a manifest for the collected questions.
    Export {
        #[arg(long)]
        name: String,
        #[arg(long, value_delimiter = ',', default_value = "train,dev,test")]
        splits: Vec<Split>,
        #[arg(long)]
        adversary: Option<String>,
        /// Output directory; defaults to the data directory's exports/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions file ({"qid": "answer"}) against a dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Print per-question scores as JSON instead of the summary line.
        #[arg(long)]
        json: bool,
    },
    /// Dataset statistics, plus human performance when validations are given.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        /// Keep only the first answer of each question.
        #[arg(long)]
        consolidate: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON object mapping question ids to lists of validator answers.
        #[arg(long)]
        validations: Option<PathBuf>,
    },
    /// Adjudicate one human answer against one model answer.
    Adjudicate {
        #[arg(long)]
        gold: String,
        #[arg(long)]
        pred: String,
    },
    /// Rebuild state from the event log and print the snapshot.
    Replay {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    stats: StatsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    human_performance: Option<EvalSummary>,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    em: f64,
    f1: f64,
    questions: usize,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        Self {
            em: r.em,
            f1: r.f1,
            questions: r.per_question.len(),
        }
    }
}

type Failure = Box<dyn std::error::Error>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()).into())
}

fn emit(out: &mut dyn Write, target: Option<&Path>, text: &str) -> Result<(), Failure> {
    match target {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()).into()),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn load_config(cli: &Cli, overrides: Overrides) -> Result<PlatformConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PlatformConfig::load(path)?,
        None => PlatformConfig::default(),
    };
    config.apply(&Overrides {
        data_dir: cli.data_dir.clone(),
        policy_threshold: cli.policy_threshold,
        seed: cli.seed,
        ..overrides
    });
    Ok(config)
}

/// Replays the data directory's log without attaching a sink.
fn replay_offline(config: &PlatformConfig, log: &Path) -> Result<Engine, Failure> {
    let records = read_log(log).map_err(ServeError::from)?;
    Ok(Engine::replay(config.engine_config(), config.registry()?, records).map_err(ServeError::from)?)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Serve { listen, admin_token } => {
            let config = load_config(
                &cli,
                Overrides {
                    listen: *listen,
                    admin_token: admin_token.clone(),
                    ..Overrides::default()
                },
            )?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(config, server::shutdown_signal()))?;
        }
        Command::Import { file, split } => {
            let config = load_config(&cli, Overrides::default())?;
            config.validate_offline()?;
            let dataset = import_squad(file)?;
            std::fs::create_dir_all(&config.data_dir)?;
            let log = config.event_log_path();
            let mut engine = replay_offline(&config, &log)?.with_sink(EventLogWriter::open(&log)?);
            let loaded = engine.load_passages(*split, dataset.passages)?;
            engine.flush()?;
            writeln!(out, "loaded {loaded} passages into {split}")?;
        }
        Command::Export {
            name,
            splits,
            adversary,
            out: target,
        } => {
            let config = load_config(&cli, Overrides::default())?;
            config.validate_offline()?;
            let engine = replay_offline(&config, &config.event_log_path())?;
            let request = ExportRequest {
                name: name.clone(),
                splits: splits.clone(),
                adversary_id: adversary.clone(),
            };
            let bundle = export_dataset(engine.state(), &request)?;
            let dir = target.clone().unwrap_or_else(|| config.export_dir().join(name));
            for path in bundle.write_to(&dir)? {
                writeln!(out, "{}", path.display())?;
            }
        }
        Command::Evaluate {
            dataset,
            predictions,
            json,
        } => {
            let dataset = import_squad(dataset)?;
            let predictions = parse_predictions(&read(predictions)?)?;
            let result = evaluate_map(&dataset, &predictions)?;
            if *json {
                writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
            } else {
                writeln!(out, "{}", result.summary())?;
            }
        }
        Command::Analyze {
            dataset,
            consolidate,
            format,
            out: target,
            validations,
        } => {
            let config = load_config(&cli, Overrides::default())?;
            let mut dataset = import_squad(dataset)?;
            if *consolidate {
                dataset = dataset.consolidated();
            }
            let human = match validations {
                Some(path) => {
                    let answers: BTreeMap<String, Vec<String>> = serde_json::from_str(&read(path)?)
                        .map_err(|e| format!("malformed validations file {}: {e}", path.display()))?;
                    Some(human_performance(&dataset, &answers, config.seed)?)
                }
                None => None,
            };
            let stats = compute_stats(&dataset, None)?;
            let text = match format {
                Format::Json => {
                    let report = AnalyzeReport {
                        stats,
                        human_performance: human.as_ref().map(EvalSummary::from),
                    };
                    serde_json::to_string_pretty(&report)? + "\n"
                }
                Format::Csv => {
                    let mut csv = stats_csv(&stats);
                    if let Some(h) = &human {
                        csv.push_str(&format!("human_performance,em,{}\nhuman_performance,f1,{}\n", h.em, h.f1));
                    }
                    csv
                }
            };
            emit(out, target.as_deref(), &text)?;
        }
        Command::Adjudicate { gold, pred } => {
            let config = load_config(&cli, Overrides::default())?;
            config.validate_offline()?;
            let score = adjudicate(gold, pred, &config.policy);
            writeln!(out, "f1={:.3} model_win={}", score.f1, score.model_win)?;
        }
        Command::Replay { log, out: target } => {
            let config = load_config(&cli, Overrides::default())?;
            config.validate_offline()?;
            let log = log.clone().unwrap_or_else(|| config.event_log_path());
            let engine = replay_offline(&config, &log)?;
            emit(out, target.as_deref(), &(engine.snapshot_json() + "\n"))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_with_output<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn run() -> i32 {
    run_with_output(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
