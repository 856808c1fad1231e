//! Experiment plumbing: config, staged pipeline, ablation sweeps and the
//! latency model.

mod ablation;
mod config;
mod latency;
mod pipeline;

pub use ablation::{read_ablation_csv, run_ablation, write_ablation_csv, AblationAxis, AblationRow};
pub use config::{
    CorpusSection, DecodeSection, DraftSection, ExperimentConfig, LatencySection, Preset, ProbeSection,
    TargetSection, TrainSection, CONFIG_VERSION,
};
pub use latency::{speedup_ratio, LatencyModel};
pub use pipeline::{
    draft_param_counts, evaluate_draft, stream_seed, train_draft, write_misalignment_csv, CorpusArtifact,
    DecodeSummary, EvalSet, ExperimentReport, ParamCounts, PassSummary, Stage, Workspace, ABLATION_CSV, CONFIG_FILE,
    MISALIGNMENT_CSV, TARGET_LOG, TRACE_FILE, TRAINING_LOG,
};
