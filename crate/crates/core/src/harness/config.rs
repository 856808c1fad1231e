use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::MarkovSpec;
use crate::decode::{DecodeConfig, DraftMode, TreeConfig};
use crate::draft::{DraftConfig, DraftVariant, SecondInput};
use crate::numerics::AdamWConfig;
use crate::target::TargetConfig;
use crate::training::{FeatureTarget, TopK, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperFaithful,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Toy, Preset::PaperFaithful];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperFaithful => "paper-faithful",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config {
            key: "preset".into(),
            reason: format!("unknown preset `{s}` (expected toy or paper-faithful)"),
        })
    }
}

/// Corpus sampling. `markov.seed` fixes the chain itself; the experiment seed
/// drives which sequences are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub markov: MarkovSpec,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftSection {
    pub use_tgf: bool,
    pub use_teh: bool,
    pub tgf_second_input: SecondInput,
    /// Width of the TGF expansion; `4 * d_model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub topk: TopK,
    pub steps: usize,
    pub lambda_tok: f64,
    pub lambda_feat: f64,
    pub feature_target: FeatureTarget,
    pub epochs: usize,
    pub batch: usize,
    /// Train the draft on the first `max_sequences` dataset entries only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sequences: Option<usize>,
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: DraftMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Prompts are the first `prompt_len` tokens of the first `prompts` eval sequences.
    pub prompts: usize,
    pub prompt_len: usize,
    /// Compare greedy output against plain target decoding.
    pub check_lossless: bool,
    pub tree: TreeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub forwards: usize,
    pub stride: usize,
    pub sequences: usize,
}

/// Per-pass latencies in milliseconds fed to the speedup model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub target_ms: f64,
    pub draft_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusSection,
    pub target: TargetSection,
    pub draft: DraftSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub probe: ProbeSection,
    pub latency: LatencySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Toy)
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let toy = ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: CorpusSection {
                markov: MarkovSpec::default(),
                train_sequences: 1024,
                eval_sequences: 64,
                seq_len: 48,
            },
            target: TargetSection {
                d_model: 32,
                n_layers: 4,
                n_heads: 4,
                max_seq: 128,
                epochs: 4,
                lr: 3e-3,
                batch: 8,
            },
            draft: DraftSection {
                use_tgf: true,
                use_teh: true,
                tgf_second_input: SecondInput::TokenEmbedding,
                expansion_dim: None,
            },
            train: TrainSection {
                topk: TopK::K(3),
                steps: 3,
                lambda_tok: 1.0,
                lambda_feat: 0.1,
                feature_target: FeatureTarget::Regress,
                epochs: 5,
                batch: 8,
                max_sequences: Some(256),
                optimizer: AdamWConfig::default(),
            },
            decode: DecodeSection {
                mode: DraftMode::Tree,
                temperature: 0.0,
                max_new_tokens: 64,
                prompts: 16,
                prompt_len: 16,
                check_lossless: true,
                tree: TreeConfig::default(),
            },
            probe: ProbeSection {
                forwards: 5,
                stride: 1,
                sequences: 16,
            },
            latency: LatencySection {
                target_ms: 25.0,
                draft_ms: 1.5,
            },
        };
        match preset {
            Preset::Toy => toy,
            Preset::PaperFaithful => {
                let paper = TrainConfig::paper_faithful();
                ExperimentConfig {
                    train: TrainSection {
                        epochs: paper.epochs,
                        max_sequences: None,
                        optimizer: paper.optimizer,
                        ..toy.train
                    },
                    ..toy
                }
            }
        }
    }

    /// Parses TOML; schema errors carry the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("<root>", e.message()))?;
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "<root>".to_string() } else { key };
            config_err(&key, e.into_inner().message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let c = &self.corpus;
        if c.seq_len < 3 {
            return Err(config_err("corpus.seq_len", "need at least 3 tokens"));
        }
        if c.train_sequences == 0 {
            return Err(config_err("corpus.train_sequences", "must be positive"));
        }
        if c.eval_sequences == 0 {
            return Err(config_err("corpus.eval_sequences", "must be positive"));
        }
        let t = &self.target;
        if t.epochs == 0 || t.batch == 0 {
            return Err(config_err("target.epochs", "epochs and batch must be positive"));
        }
        if !(t.lr > 0.0) {
            return Err(config_err("target.lr", "must be positive"));
        }
        self.target_config().validate().map_err(|e| config_err("target", e.to_string()))?;
        if c.seq_len > t.max_seq {
            return Err(config_err("corpus.seq_len", "exceeds target.max_seq"));
        }
        if self.draft.expansion_dim == Some(0) {
            return Err(config_err("draft.expansion_dim", "must be positive"));
        }
        if self.train.max_sequences == Some(0) {
            return Err(config_err("train.max_sequences", "must be positive"));
        }
        self.train_config(0).validate()?;
        let d = &self.decode;
        d.tree.validate().map_err(|e| config_err("decode.tree", e.to_string()))?;
        if d.prompt_len == 0 || d.prompt_len >= c.seq_len {
            return Err(config_err("decode.prompt_len", "must be in 1..corpus.seq_len"));
        }
        if d.prompts == 0 || d.prompts > c.eval_sequences {
            return Err(config_err("decode.prompts", "must be in 1..=corpus.eval_sequences"));
        }
        if d.prompt_len + d.max_new_tokens + d.tree.max_depth > t.max_seq {
            return Err(config_err(
                "decode.max_new_tokens",
                "prompt + generated tokens + tree depth exceed target.max_seq",
            ));
        }
        if !d.temperature.is_finite() {
            return Err(config_err("decode.temperature", "must be finite"));
        }
        let p = &self.probe;
        if p.forwards == 0 || p.stride == 0 {
            return Err(config_err("probe.forwards", "forwards and stride must be positive"));
        }
        if p.sequences == 0 || p.sequences > c.eval_sequences {
            return Err(config_err("probe.sequences", "must be in 1..=corpus.eval_sequences"));
        }
        if p.forwards + 2 > c.seq_len {
            return Err(config_err("probe.forwards", "too long for corpus.seq_len"));
        }
        let l = &self.latency;
        if !(l.target_ms > 0.0) {
            return Err(config_err("latency.target_ms", "must be positive"));
        }
        if !(l.draft_ms >= 0.0) {
            return Err(config_err("latency.draft_ms", "must be non-negative"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn target_config(&self) -> TargetConfig {
        TargetConfig {
            vocab_size: self.corpus.markov.vocab_size,
            d_model: self.target.d_model,
            n_layers: self.target.n_layers,
            n_heads: self.target.n_heads,
            max_seq: self.target.max_seq,
            seed: self.seed,
        }
    }

    pub fn draft_variant(&self) -> DraftVariant {
        DraftVariant {
            use_tgf: self.draft.use_tgf,
            use_teh: self.draft.use_teh,
            tgf_second_input: self.draft.tgf_second_input,
        }
    }

    pub fn draft_config(&self, seed: u64) -> DraftConfig {
        let t = &self.target;
        let mut config = DraftConfig::for_target(
            self.corpus.markov.vocab_size,
            t.d_model,
            t.n_heads,
            self.draft_variant(),
            seed,
        );
        if let Some(e) = self.draft.expansion_dim {
            config.expansion_dim = e;
        }
        config
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            topk: t.topk,
            steps: t.steps,
            lambda_tok: t.lambda_tok,
            lambda_feat: t.lambda_feat,
            feature_target: t.feature_target,
            epochs: t.epochs,
            batch: t.batch,
            seed,
            optimizer: t.optimizer.clone(),
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: self.decode.mode,
            tree: self.decode.tree,
            temperature: self.decode.temperature,
            max_new_tokens: self.decode.max_new_tokens,
        }
    }
}
