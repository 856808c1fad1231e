use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::latency::{speedup_ratio, LatencyModel};
use crate::corpus::{corpus_hash, Corpus, MarkovSource};
use crate::dataset::{precompute_features, FeatureDataset};
use crate::decode::{generate, misalignment_probe, CycleTrace};
use crate::draft::DraftModel;
use crate::target::TargetModel;
use crate::training::{run_schedule, TrainRecord, TrainReport, TrainSequence};
use crate::{Error, Result, Token};

const CORPUS_TRAIN: u64 = 1;
const CORPUS_EVAL: u64 = 2;
const DRAFT_INIT: u64 = 3;
const DRAFT_TRAIN: u64 = 4;
const DECODE: u64 = 5;

/// Independent RNG stream `salt` derived from the experiment seed.
pub fn stream_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Corpus,
    TrainTarget,
    Precompute,
    TrainDraft,
    Decode,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Corpus,
        Stage::TrainTarget,
        Stage::Precompute,
        Stage::TrainDraft,
        Stage::Decode,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::TrainTarget => "train-target",
            Stage::Precompute => "precompute",
            Stage::TrainDraft => "train-draft",
            Stage::Decode => "decode",
            Stage::Report => "report",
        }
    }

    /// The file whose presence marks the stage as done.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus.json",
            Stage::TrainTarget => "target.ckpt",
            Stage::Precompute => "dataset.bin",
            Stage::TrainDraft => "draft.ckpt",
            Stage::Decode => "decode.json",
            Stage::Report => "report.json",
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const TARGET_LOG: &str = "target_training.jsonl";
pub const TRAINING_LOG: &str = "training.jsonl";
pub const TRACE_FILE: &str = "decode_trace.jsonl";
pub const MISALIGNMENT_CSV: &str = "misalignment.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusArtifact {
    pub hash: String,
    pub train: Corpus,
    pub eval: Corpus,
}

/// Decode-stage metrics for one draft model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub mean_tau: f64,
    /// `tau_histogram[i]` counts cycles with `tau == i + 1`.
    pub tau_histogram: Vec<usize>,
    pub cycles: usize,
    pub generated_tokens: usize,
    pub draft_passes: usize,
    pub target_passes: usize,
    /// Mismatch rate per forward index `1..=probe.forwards`.
    pub misalignment: Vec<f64>,
    /// Greedy output compared with plain target decoding; `None` when unchecked.
    pub lossless: Option<bool>,
}

/// Per-pass summary of the last training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub pass: usize,
    pub loss: f64,
    pub masked_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub target: usize,
    pub draft: usize,
    /// Parameters that exist only because TGF is enabled.
    pub tgf: usize,
}

/// Everything in it is a pure function of the config, so reruns match bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub seed: u64,
    pub config_fingerprint: String,
    pub corpus_hash: String,
    pub mean_tau: f64,
    pub tau_histogram: Vec<usize>,
    pub cycles: usize,
    pub generated_tokens: usize,
    pub misalignment: Vec<f64>,
    pub lossless: Option<bool>,
    pub latency: LatencyModel,
    pub speedup_ratio: f64,
    pub params: ParamCounts,
    pub final_epoch: Vec<PassSummary>,
}

/// Prompts and probe sequences drawn from the held-out corpus.
pub struct EvalSet {
    pub prompts: Vec<Vec<Token>>,
    pub probe: Vec<TrainSequence>,
}

impl EvalSet {
    pub fn new(config: &ExperimentConfig, target: &TargetModel, eval: &[Vec<Token>]) -> Result<Self> {
        let d = &config.decode;
        let prompts = eval.iter().take(d.prompts).map(|s| s[..d.prompt_len].to_vec()).collect();
        let probe = eval
            .iter()
            .take(config.probe.sequences)
            .map(|s| TrainSequence::new(s.clone(), target.forward(s)?.features))
            .collect::<Result<_>>()?;
        Ok(EvalSet { prompts, probe })
    }
}

/// Trains a fresh draft on `data` with the config's draft and schedule settings.
pub fn train_draft<F>(
    config: &ExperimentConfig,
    target: &TargetModel,
    data: &[TrainSequence],
    seed: u64,
    on_record: F,
) -> Result<(DraftModel, TrainReport)>
where
    F: FnMut(&TrainRecord),
{
    let mut draft = DraftModel::new(config.draft_config(stream_seed(seed, DRAFT_INIT)), &target.shared_head())?;
    let report = run_schedule(
        &mut draft,
        data,
        &config.train_config(stream_seed(seed, DRAFT_TRAIN)),
        on_record,
    )?;
    Ok((draft, report))
}

/// Decodes every eval prompt and runs the misalignment probe.
pub fn evaluate_draft<F>(
    config: &ExperimentConfig,
    target: &TargetModel,
    draft: &DraftModel,
    eval: &EvalSet,
    seed: u64,
    mut trace: F,
) -> Result<DecodeSummary>
where
    F: FnMut(usize, &CycleTrace),
{
    let decode = config.decode_config();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, DECODE));
    let mut hist = vec![0usize; decode.tree.max_depth + 1];
    let mut summary = DecodeSummary {
        mean_tau: 0.0,
        tau_histogram: Vec::new(),
        cycles: 0,
        generated_tokens: 0,
        draft_passes: 0,
        target_passes: 0,
        misalignment: Vec::new(),
        lossless: None,
    };
    let check = config.decode.check_lossless && decode.temperature <= 0.0;
    let mut lossless = true;
    for (i, prompt) in eval.prompts.iter().enumerate() {
        let gen = generate(target, draft, prompt, &decode, &mut rng, |t| trace(i, t))?;
        for c in &gen.cycles {
            if c.tau == 0 || c.tau > hist.len() {
                return Err(Error::Contract(format!(
                    "cycle emitted {} tokens, outside 1..={}",
                    c.tau,
                    hist.len()
                )));
            }
            hist[c.tau - 1] += 1;
            summary.draft_passes += c.draft_passes;
            summary.target_passes += c.target_passes;
        }
        summary.cycles += gen.cycles.len();
        summary.generated_tokens += gen.tokens.len();
        if check {
            lossless &= gen.tokens == target.generate(prompt, decode.max_new_tokens, 0.0, &mut rng)?;
        }
    }
    let tau_sum: usize = hist.iter().enumerate().map(|(i, n)| (i + 1) * n).sum();
    summary.mean_tau = if summary.cycles == 0 {
        0.0
    } else {
        tau_sum as f64 / summary.cycles as f64
    };
    summary.tau_histogram = hist;
    summary.misalignment = misalignment_probe(draft, &eval.probe, config.probe.forwards, config.probe.stride)?;
    summary.lossless = check.then_some(lossless);
    Ok(summary)
}

/// Trainable draft parameters and the subset owned by TGF.
pub fn draft_param_counts(draft: &DraftModel) -> (usize, usize) {
    let p = draft.params();
    let tgf = p
        .ids()
        .filter(|&id| p.name(id).starts_with("tgf."))
        .map(|id| p.value(id).len())
        .sum();
    (draft.param_count(), tgf)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines {
            out: BufWriter::new(file),
            path,
        })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// An output directory bound to one experiment config.
pub struct Workspace {
    dir: PathBuf,
    config: ExperimentConfig,
}

impl Workspace {
    /// Creates `dir` if needed. A directory already holding a different
    /// config is rejected so stale artifacts are never mixed in.
    pub fn open(dir: &Path, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            let existing = ExperimentConfig::load(&path)?;
            if existing.fingerprint() != config.fingerprint() {
                return Err(Error::InvalidInput(format!(
                    "{} holds artifacts for a different config (fingerprint {}); use a fresh output directory",
                    dir.display(),
                    existing.fingerprint()
                )));
            }
        } else {
            atomic_write(&path, config.to_toml_string().as_bytes())?;
        }
        Ok(Workspace {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.path(stage.artifact()).exists()
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let path = self.path(stage.artifact());
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingStage {
                stage: stage.name().into(),
                path,
            })
        }
    }

    pub fn load_corpus(&self) -> Result<CorpusArtifact> {
        read_json(&self.require(Stage::Corpus)?)
    }

    pub fn load_target(&self) -> Result<TargetModel> {
        TargetModel::load(&self.require(Stage::TrainTarget)?)
    }

    pub fn load_dataset(&self) -> Result<FeatureDataset> {
        FeatureDataset::read(&self.require(Stage::Precompute)?)
    }

    pub fn load_draft(&self) -> Result<DraftModel> {
        DraftModel::load(&self.require(Stage::TrainDraft)?)
    }

    pub fn load_decode(&self) -> Result<DecodeSummary> {
        read_json(&self.require(Stage::Decode)?)
    }

    pub fn load_report(&self) -> Result<ExperimentReport> {
        read_json(&self.require(Stage::Report)?)
    }

    /// Draft training data: the precomputed dataset, capped at `train.max_sequences`.
    pub fn draft_data(&self) -> Result<Vec<TrainSequence>> {
        let ds = self.load_dataset()?;
        let n = self.config.train.max_sequences.unwrap_or(ds.len()).min(ds.len());
        TrainSequence::from_dataset(&FeatureDataset {
            entries: ds.entries[..n].to_vec(),
            ..ds
        })
    }

    pub fn run_corpus(&self) -> Result<()> {
        let c = &self.config.corpus;
        let source = MarkovSource::new(c.markov.clone())?;
        let train = source.sample_corpus(c.train_sequences, c.seq_len, stream_seed(self.config.seed, CORPUS_TRAIN));
        let eval = source.sample_corpus(c.eval_sequences, c.seq_len, stream_seed(self.config.seed, CORPUS_EVAL));
        write_json(
            &self.path(Stage::Corpus.artifact()),
            &CorpusArtifact {
                hash: corpus_hash(&train),
                train,
                eval,
            },
        )
    }

    pub fn run_train_target(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let t = &self.config.target;
        let mut model = TargetModel::new(self.config.target_config())?;
        let mut log = JsonLines::create(self.path(TARGET_LOG))?;
        let start = Instant::now();
        let mut failed = Ok(());
        model.train_with(&corpus.train, t.epochs, t.lr, t.batch, |epoch, loss| {
            let record = serde_json::json!({
                "epoch": epoch,
                "loss": loss,
                "wall_time_s": start.elapsed().as_secs_f64(),
            });
            if failed.is_ok() {
                failed = log.push(&record);
            }
        })?;
        failed?;
        log.finish()?;
        model.save(&self.path(Stage::TrainTarget.artifact()))
    }

    pub fn run_precompute(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let target = self.load_target()?;
        precompute_features(&target, &corpus.train)?.write(&self.path(Stage::Precompute.artifact()))
    }

    pub fn run_train_draft(&self) -> Result<()> {
        let data = self.draft_data()?;
        let target = self.load_target()?;
        let mut log = JsonLines::create(self.path(TRAINING_LOG))?;
        let mut failed = Ok(());
        let (draft, _) = train_draft(&self.config, &target, &data, self.config.seed, |r| {
            if failed.is_ok() {
                failed = log.push(r);
            }
        })?;
        failed?;
        log.finish()?;
        draft.save(&self.path(Stage::TrainDraft.artifact()))
    }

    /// With `trace`, also writes one JSON line per drafting cycle.
    pub fn run_decode(&self, trace: bool) -> Result<()> {
        let corpus = self.load_corpus()?;
        let target = self.load_target()?;
        let draft = self.load_draft()?;
        let eval = EvalSet::new(&self.config, &target, &corpus.eval)?;
        let mut log = if trace {
            Some(JsonLines::create(self.path(TRACE_FILE))?)
        } else {
            None
        };
        let mut failed = Ok(());
        let summary = evaluate_draft(&self.config, &target, &draft, &eval, self.config.seed, |prompt, t| {
            if let (Some(log), true) = (log.as_mut(), failed.is_ok()) {
                #[derive(Serialize)]
                struct Line<'a> {
                    prompt: usize,
                    #[serde(flatten)]
                    cycle: &'a CycleTrace,
                }
                failed = log.push(&Line { prompt, cycle: t });
            }
        })?;
        failed?;
        if let Some(log) = log {
            log.finish()?;
        }
        write_misalignment_csv(&self.path(MISALIGNMENT_CSV), &summary.misalignment)?;
        write_json(&self.path(Stage::Decode.artifact()), &summary)
    }

    pub fn run_report(&self) -> Result<ExperimentReport> {
        let corpus = self.load_corpus()?;
        let target = self.load_target()?;
        let draft = self.load_draft()?;
        let summary = self.load_decode()?;
        let final_epoch = final_epoch_summary(&self.path(TRAINING_LOG))?;
        let (draft_params, tgf) = draft_param_counts(&draft);
        let latency = LatencyModel {
            target_ms: self.config.latency.target_ms,
            draft_ms: self.config.latency.draft_ms,
            depth: self.config.decode.tree.max_depth as f64,
            tau: summary.mean_tau,
        };
        let report = ExperimentReport {
            version: self.config.version,
            seed: self.config.seed,
            config_fingerprint: self.config.fingerprint(),
            corpus_hash: corpus.hash,
            mean_tau: summary.mean_tau,
            tau_histogram: summary.tau_histogram,
            cycles: summary.cycles,
            generated_tokens: summary.generated_tokens,
            misalignment: summary.misalignment,
            lossless: summary.lossless,
            latency,
            speedup_ratio: speedup_ratio(&latency)?,
            params: ParamCounts {
                target: target.params().trainable_numel(),
                draft: draft_params,
                tgf,
            },
            final_epoch,
        };
        write_json(&self.path(Stage::Report.artifact()), &report)?;
        Ok(report)
    }

    pub fn run_stage(&self, stage: Stage, trace: bool) -> Result<()> {
        match stage {
            Stage::Corpus => self.run_corpus(),
            Stage::TrainTarget => self.run_train_target(),
            Stage::Precompute => self.run_precompute(),
            Stage::TrainDraft => self.run_train_draft(),
            Stage::Decode => self.run_decode(trace),
            Stage::Report => self.run_report().map(|_| ()),
        }
    }

    /// Runs every stage whose artifact is missing, in order, then returns the report.
    pub fn pipeline(&self, trace: bool) -> Result<ExperimentReport> {
        self.ensure(Stage::Decode, trace)?;
        self.run_report()
    }

    /// Runs the stages up to and including `last` that have not completed yet.
    pub fn ensure(&self, last: Stage, trace: bool) -> Result<()> {
        for stage in Stage::ALL {
            if !self.is_done(stage) {
                self.run_stage(stage, trace)?;
            }
            if stage == last {
                break;
            }
        }
        Ok(())
    }
}

/// Last-epoch loss and masked fraction per pass, read back from the training log.
fn final_epoch_summary(path: &Path) -> Result<Vec<PassSummary>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrainRecord = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
        records.push(r);
    }
    let last = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    Ok(records
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| PassSummary {
            pass: r.pass,
            loss: r.loss,
            masked_fraction: r.masked_fraction,
        })
        .collect())
}

pub fn write_misalignment_csv(path: &Path, rates: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["forward", "rate"]).map_err(|e| Error::format(path, e.to_string()))?;
    for (i, r) in rates.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.to_string()])
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
