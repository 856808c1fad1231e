use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::latency::{speedup_ratio, LatencyModel};
use super::pipeline::{draft_param_counts, evaluate_draft, train_draft, EvalSet, Stage, Workspace};
use crate::draft::SecondInput;
use crate::training::TopK;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Topk,
    Steps,
    TgfVariant,
    Teh,
    ExpansionDim,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Topk,
        AblationAxis::Steps,
        AblationAxis::TgfVariant,
        AblationAxis::Teh,
        AblationAxis::ExpansionDim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Topk => "topk",
            AblationAxis::Steps => "steps",
            AblationAxis::TgfVariant => "tgf_variant",
            AblationAxis::Teh => "teh",
            AblationAxis::ExpansionDim => "expansion_dim",
        }
    }

    /// The sweep used when no grid is given.
    pub fn default_grid(self, base: &ExperimentConfig) -> Vec<String> {
        let d = base.target.d_model;
        let grid: Vec<String> = match self {
            AblationAxis::Topk => vec!["NA".into(), "1".into(), "3".into(), "5".into()],
            AblationAxis::Steps => (1..=4).map(|n| n.to_string()).collect(),
            AblationAxis::TgfVariant => ["off", "token_embedding", "raw_feature", "fused_h"]
                .map(String::from)
                .to_vec(),
            AblationAxis::Teh => vec!["on".into(), "off".into()],
            AblationAxis::ExpansionDim => vec![d.to_string(), (4 * d).to_string()],
        };
        grid
    }

    /// `base` with this axis set to `setting`; nothing else changes.
    pub fn apply(self, base: &ExperimentConfig, setting: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config {
            key: self.name().into(),
            reason: format!("invalid setting `{setting}`"),
        };
        let mut c = base.clone();
        match self {
            AblationAxis::Topk => {
                c.train.topk = if setting.eq_ignore_ascii_case("na") {
                    TopK::Na
                } else {
                    TopK::K(setting.parse().map_err(|_| bad())?)
                }
            }
            AblationAxis::Steps => c.train.steps = setting.parse().map_err(|_| bad())?,
            AblationAxis::TgfVariant => match setting {
                "off" => c.draft.use_tgf = false,
                _ => {
                    c.draft.use_tgf = true;
                    c.draft.tgf_second_input = match setting {
                        "token_embedding" => SecondInput::TokenEmbedding,
                        "raw_feature" => SecondInput::RawFeature,
                        "fused_h" => SecondInput::FusedH,
                        _ => return Err(bad()),
                    };
                }
            },
            AblationAxis::Teh => {
                c.draft.use_teh = match setting {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad()),
                }
            }
            AblationAxis::ExpansionDim => c.draft.expansion_dim = Some(setting.parse().map_err(|_| bad())?),
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Config {
            key: "axis".into(),
            reason: format!("unknown ablation axis `{s}` (expected topk, steps, tgf_variant, teh or expansion_dim)"),
        })
    }
}

/// One line of `ablation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub mean_tau: f64,
    pub speedup_ratio: f64,
    pub draft_params: usize,
    pub tgf_params: usize,
    pub cycles: usize,
    pub misalignment_last: f64,
    pub cell_seed: u64,
    pub config_fingerprint: String,
}

/// One draft train + decode run per setting, sharing the workspace's target
/// and dataset. Cells run on their own threads with seed `base ^ index`.
pub fn run_ablation(ws: &Workspace, axis: AblationAxis, grid: &[String]) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config {
            key: "grid".into(),
            reason: "empty grid".into(),
        });
    }
    let base = ws.config();
    let cells = grid
        .iter()
        .map(|s| axis.apply(base, s))
        .collect::<Result<Vec<_>>>()?;
    ws.ensure(Stage::Precompute, false)?;
    let target = ws.load_target()?;
    let data = ws.draft_data()?;
    let corpus = ws.load_corpus()?;
    let eval = EvalSet::new(base, &target, &corpus.eval)?;
    let results: Vec<Result<AblationRow>> = thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .zip(grid)
            .enumerate()
            .map(|(i, (config, setting))| {
                let (target, data, eval) = (&target, &data, &eval);
                scope.spawn(move || {
                    let seed = base.seed ^ i as u64;
                    let (draft, _) = train_draft(config, target, data, seed, |_| {})?;
                    let summary = evaluate_draft(config, target, &draft, eval, seed, |_, _| {})?;
                    let (draft_params, tgf_params) = draft_param_counts(&draft);
                    let sr = speedup_ratio(&LatencyModel {
                        target_ms: config.latency.target_ms,
                        draft_ms: config.latency.draft_ms,
                        depth: config.decode.tree.max_depth as f64,
                        tau: summary.mean_tau,
                    })?;
                    Ok(AblationRow {
                        axis: axis.name().into(),
                        setting: setting.clone(),
                        mean_tau: summary.mean_tau,
                        speedup_ratio: sr,
                        draft_params,
                        tgf_params,
                        cycles: summary.cycles,
                        misalignment_last: summary.misalignment.last().copied().unwrap_or(0.0),
                        cell_seed: seed,
                        config_fingerprint: config.fingerprint(),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("ablation cell panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}
