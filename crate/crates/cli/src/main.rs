use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tokalign::harness::{
    run_ablation, speedup_ratio, write_ablation_csv, AblationAxis, ExperimentConfig,
    ExperimentReport, LatencyModel, Preset, Stage, Workspace, ABLATION_CSV,
};
use tokalign::Error;

#[derive(Parser)]
#[command(name = "tokalign", version, about = "Token-alignable draft training and speculative decoding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Overrides --preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped config preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write a per-cycle decode trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the training and evaluation corpora.
    Corpus(StageArgs),
    /// Train the target model.
    TrainTarget(StageArgs),
    /// Store target features for the training corpus.
    Precompute(StageArgs),
    /// Train the draft model with the multi-pass schedule.
    TrainDraft(StageArgs),
    /// Speculative decoding on the eval prompts plus the misalignment probe.
    Decode(StageArgs),
    /// Run all missing stages and write report.json.
    Report(StageArgs),
    /// Sweep one axis and write ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// topk, steps, tgf_variant, teh or expansion_dim
        #[arg(long)]
        axis: String,
        /// Comma-separated settings; the axis default when absent.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Modelled speedup ratio.
    Latency {
        #[command(flatten)]
        common: Common,
        /// Target pass latency in ms (config when absent).
        #[arg(long)]
        target_ms: Option<f64>,
        /// Draft pass latency in ms (config when absent).
        #[arg(long)]
        draft_ms: Option<f64>,
        /// Draft passes per cycle (tree depth when absent).
        #[arg(long)]
        depth: Option<f64>,
        /// Tokens per cycle (report.json in --out when absent).
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(self.preset.unwrap_or(Preset::Toy)),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn workspace(&self) -> Result<Workspace, Error> {
        Workspace::open(&self.out, self.config()?)
    }
}

fn artifact(ws: &Workspace, stage: Stage) -> Value {
    json!({ "stage": stage.name(), "artifact": ws.path(stage.artifact()) })
}

fn read_report(out: &Path) -> Result<ExperimentReport, Error> {
    let path = out.join(Stage::Report.artifact());
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: Stage::Report.name().into(),
            path,
        });
    }
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn run(command: Command) -> Result<Value, Error> {
    let stage = |args: StageArgs, stage: Stage| -> Result<Value, Error> {
        let ws = args.common.workspace()?;
        ws.run_stage(stage, args.common.trace)?;
        Ok(artifact(&ws, stage))
    };
    match command {
        Command::Corpus(a) => stage(a, Stage::Corpus),
        Command::TrainTarget(a) => stage(a, Stage::TrainTarget),
        Command::Precompute(a) => stage(a, Stage::Precompute),
        Command::TrainDraft(a) => stage(a, Stage::TrainDraft),
        Command::Decode(a) => stage(a, Stage::Decode),
        Command::Report(a) => {
            let ws = a.common.workspace()?;
            let report = ws.pipeline(a.common.trace)?;
            serde_json::to_value(report).map_err(|e| Error::InvalidInput(e.to_string()))
        }
        Command::Ablate { common, axis, grid } => {
            let axis: AblationAxis = axis.parse()?;
            let ws = common.workspace()?;
            let grid = if grid.is_empty() {
                axis.default_grid(ws.config())
            } else {
                grid
            };
            let rows = run_ablation(&ws, axis, &grid)?;
            let path = ws.path(ABLATION_CSV);
            write_ablation_csv(&path, &rows)?;
            Ok(json!({ "artifact": path, "rows": rows }))
        }
        Command::Latency {
            common,
            target_ms,
            draft_ms,
            depth,
            tau,
        } => {
            let config = common.config()?;
            let tau = match tau {
                Some(t) => t,
                None => read_report(&common.out)?.mean_tau,
            };
            let model = LatencyModel {
                target_ms: target_ms.unwrap_or(config.latency.target_ms),
                draft_ms: draft_ms.unwrap_or(config.latency.draft_ms),
                depth: depth.unwrap_or(config.decode.tree.max_depth as f64),
                tau,
            };
            let sr = speedup_ratio(&model)?;
            Ok(json!({ "latency": model, "speedup_ratio": sr }))
        }
    }
}

fn error_record(e: &Error) -> Value {
    let mut record = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { key, .. } => record["key"] = json!(key),
        Error::MissingStage { stage, path } => {
            record["stage"] = json!(stage);
            record["path"] = json!(path);
        }
        Error::Io { path, .. } | Error::Format { path, .. } => record["path"] = json!(path),
        _ => {}
    }
    record
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
