//! Masked multi-pass draft training.
//!
//! A training sequence `x_0..x_{L-1}` with target features `h_0..h_{L-1}`
//! becomes `L-1` draft input positions: position `i` pairs `h_i` with
//! `x_{i+1}`, its predict head is scored against `x_{i+2}` and its regress
//! head against `h_{i+1}`. Loss positions are `0..L-2`, where both targets
//! exist.
//!
//! Pass `n` of a batch sees, at query `t`, target features up to `t-n+1` and
//! the detached regress features of passes `1..n-1` for the trailing window.
//! Source `s >= 1` at input `j` is the pass-`s` regress output at `j-1`.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::dataset::FeatureDataset;
use crate::draft::DraftModel;
use crate::error::{Error, Result};
use crate::layers::AttentionPlan;
use crate::numerics::kernels::top_k_indices;
use crate::numerics::{AdamW, AdamWConfig, ParamId, Tape, Tensor};

/// Top-k width of the predictable mask; `Na` disables masking but keeps feature replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TopKRepr", into = "TopKRepr")]
pub enum TopK {
    Na,
    K(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TopKRepr {
    K(usize),
    Na(String),
}

impl TryFrom<TopKRepr> for TopK {
    type Error = String;

    fn try_from(r: TopKRepr) -> std::result::Result<Self, String> {
        match r {
            TopKRepr::K(0) => Err("top-k must be at least 1".into()),
            TopKRepr::K(k) => Ok(TopK::K(k)),
            TopKRepr::Na(s) if s.eq_ignore_ascii_case("na") => Ok(TopK::Na),
            TopKRepr::Na(s) => Err(format!("expected a positive integer or \"NA\", got {s:?}")),
        }
    }
}

impl From<TopK> for TopKRepr {
    fn from(k: TopK) -> Self {
        match k {
            TopK::Na => TopKRepr::Na("NA".into()),
            TopK::K(k) => TopKRepr::K(k),
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Na => f.write_str("NA"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

/// Which draft head the feature loss supervises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTarget {
    #[default]
    Regress,
    Predict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub topk: TopK,
    pub steps: usize,
    pub lambda_tok: f64,
    pub lambda_feat: f64,
    pub feature_target: FeatureTarget,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topk: TopK::K(3),
            steps: 3,
            lambda_tok: 1.0,
            lambda_feat: 0.1,
            feature_target: FeatureTarget::Regress,
            epochs: 5,
            batch: 8,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Optimizer schedule at the published scale.
    pub fn paper_faithful() -> Self {
        TrainConfig {
            epochs: 20,
            optimizer: AdamWConfig {
                lr: 3e-5,
                warmup: 2000,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                reason: reason.into(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lambda_tok >= 0.0 && self.lambda_feat >= 0.0) {
            return bad("lambda_tok", "loss weights must be non-negative");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", "must be positive");
        }
        Ok(())
    }
}

/// 1 iff `ground_truth` ranks among the `k` highest logits. Ties rank the lower id first.
pub fn predictable_mask(logits: &[f64], ground_truth: Token, k: usize) -> bool {
    top_k_indices(logits, k.min(logits.len())).contains(&ground_truth)
}

/// Product of `history[t-n+1 ..= t-1]`; indices before the start count as 1.
pub fn cumulative_mask(history: &[bool], t: usize, n: usize) -> bool {
    if n <= 1 {
        return true;
    }
    let lo = (t + 1).saturating_sub(n);
    (lo..t).all(|i| history.get(i).copied().unwrap_or(true))
}

/// Masks for one training pass over one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMasks {
    pub pass: usize,
    pub topk: TopK,
    /// Top-k hits of this pass, one per loss position.
    pub predictable: Vec<bool>,
    /// Gate applied to this pass's loss, one per loss position.
    pub cumulative: Vec<bool>,
}

impl AlignmentMasks {
    /// Gate for the next pass: `M'_t = M_{t-1} * m_{t-1}`, with `M'_0 = 1`.
    pub fn advance(&self) -> Vec<bool> {
        if self.topk == TopK::Na {
            return vec![true; self.cumulative.len()];
        }
        (0..self.cumulative.len())
            .map(|t| t == 0 || (self.cumulative[t - 1] && self.predictable[t - 1]))
            .collect()
    }
}

/// One dataset sequence at full precision.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub tokens: Vec<Token>,
    pub features: Tensor,
}

impl TrainSequence {
    pub fn new(tokens: Vec<Token>, features: Tensor) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "training sequences need at least 3 tokens, got {}",
                tokens.len()
            )));
        }
        if features.rows() != tokens.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![tokens.len(), features.cols()],
                actual: features.shape().to_vec(),
            });
        }
        Ok(TrainSequence { tokens, features })
    }

    pub fn from_dataset(ds: &FeatureDataset) -> Result<Vec<Self>> {
        ds.entries
            .iter()
            .map(|e| TrainSequence::new(e.tokens.clone(), e.feature_tensor(ds.d_model())))
            .collect()
    }

    fn inputs(&self) -> usize {
        self.tokens.len() - 1
    }

    fn loss_positions(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Feature rows `h_0..h_{L-2}` paired with input positions.
    fn input_features(&self) -> Tensor {
        let d = self.features.cols();
        Tensor::matrix(self.inputs(), d, self.features.data()[..self.inputs() * d].to_vec()).expect("rows")
    }

    /// Loss targets at positions `0..L-2`: tokens `x_{t+2}` and features `h_{t+1}`.
    pub fn targets(&self) -> PassTargets {
        let d = self.features.cols();
        let p = self.loss_positions();
        PassTargets {
            labels: self.tokens[2..].to_vec(),
            features: Tensor::matrix(p, d, self.features.data()[d..(p + 1) * d].to_vec()).expect("rows"),
        }
    }
}

/// Supervision for one sequence, one entry per loss position.
#[derive(Clone, Debug, PartialEq)]
pub struct PassTargets {
    pub labels: Vec<Token>,
    pub features: Tensor,
}

/// Detached state carried from pass `n` to pass `n+1` for each batch sequence.
#[derive(Clone, Debug)]
pub struct PassState {
    pub pass: usize,
    /// Per sequence: feature sources `0..pass` (target first, then each earlier pass).
    pub sources: Vec<Vec<Tensor>>,
    /// Per sequence: loss gate for this pass.
    pub gates: Vec<Vec<bool>>,
}

impl PassState {
    pub fn initial(batch: &[TrainSequence]) -> Self {
        PassState {
            pass: 1,
            sources: batch.iter().map(|s| vec![s.input_features()]).collect(),
            gates: batch.iter().map(|s| vec![true; s.loss_positions()]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PassOutput {
    pub loss: f64,
    pub masked_positions: usize,
    pub total_positions: usize,
    /// Empty when every position is masked.
    pub grads: Vec<(ParamId, Tensor)>,
    pub masks: Vec<AlignmentMasks>,
    pub next: PassState,
}

/// Source feeding key `j` of query `t` in pass `n`.
pub fn key_source(t: usize, j: usize, n: usize) -> usize {
    if j == 0 {
        0
    } else {
        (j + n - 1).saturating_sub(t)
    }
}

/// Runs pass `state.pass` over a batch and returns its loss and gradients.
pub fn training_pass(
    model: &DraftModel,
    batch: &[TrainSequence],
    state: &PassState,
    config: &TrainConfig,
) -> Result<PassOutput> {
    let targets: Vec<PassTargets> = batch.iter().map(TrainSequence::targets).collect();
    training_pass_with_targets(model, batch, &targets, state, config)
}

/// As [`training_pass`] with explicit supervision, which lets callers probe
/// how the loss reacts to the targets alone.
pub fn training_pass_with_targets(
    model: &DraftModel,
    batch: &[TrainSequence],
    targets: &[PassTargets],
    state: &PassState,
    config: &TrainConfig,
) -> Result<PassOutput> {
    let n = state.pass;
    if n == 0 || state.sources.len() != batch.len() || state.gates.len() != batch.len() || targets.len() != batch.len()
    {
        return Err(Error::InvalidInput("pass state does not match the batch".into()));
    }
    let mut tape = Tape::new(model.params());
    let mut total: Option<crate::numerics::Var> = None;
    let mut gate_sum = 0usize;
    let mut total_positions = 0usize;
    let mut masks = Vec::with_capacity(batch.len());
    let mut next_sources = Vec::with_capacity(batch.len());
    let mut regress_vars = Vec::with_capacity(batch.len());
    let mut logit_vars = Vec::with_capacity(batch.len());

    for (b, seq) in batch.iter().enumerate() {
        let sources = &state.sources[b];
        let gates = &state.gates[b];
        let m = seq.inputs();
        let p = seq.loss_positions();
        if sources.len() != n || gates.len() != p {
            return Err(Error::InvalidInput(format!(
                "pass {n} expects {n} feature sources and {p} gates, got {} and {}",
                sources.len(),
                gates.len()
            )));
        }
        let plan = AttentionPlan::causal_multi_source(m, n, |t, j| key_source(t, j, n));
        let query_source: Vec<usize> = (0..m).map(|t| key_source(t, t, n)).collect();
        let vars = model.record(&mut tape, &seq.tokens[1..], sources, &query_source, &plan)?;
        let logits = model.record_logits(&mut tape, vars.predict)?;

        let weights: Vec<f64> = (0..m).map(|t| f64::from(u8::from(t < p && gates[t]))).collect();
        let tg = &targets[b];
        if tg.labels.len() != p || tg.features.rows() != p {
            return Err(Error::InvalidInput(format!("expected {p} targets per sequence")));
        }
        let labels: Vec<Token> = (0..m).map(|t| if t < p { tg.labels[t] } else { 0 }).collect();
        let ce = tape.cross_entropy(logits, &labels, &weights)?;
        let feat = match config.feature_target {
            FeatureTarget::Regress => vars.regress,
            FeatureTarget::Predict => vars.predict,
        };
        let mut padded = tg.features.data().to_vec();
        padded.resize(m * tg.features.cols(), 0.0);
        let target = tape.leaf(Tensor::matrix(m, tg.features.cols(), padded)?);
        let l1 = tape.l1(feat, target, &weights)?;
        let ce = tape.scale(ce, config.lambda_tok);
        let l1 = tape.scale(l1, config.lambda_feat);
        let seq_loss = tape.add(ce, l1)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, seq_loss)?,
            None => seq_loss,
        });
        gate_sum += gates.iter().filter(|&&g| g).count();
        total_positions += p;
        regress_vars.push(vars.regress);
        logit_vars.push(logits);
    }

    for (b, seq) in batch.iter().enumerate() {
        let p = seq.loss_positions();
        let logits = tape.value(logit_vars[b]);
        let predictable = match config.topk {
            TopK::Na => vec![true; p],
            TopK::K(k) => (0..p).map(|t| predictable_mask(logits.row(t), targets[b].labels[t], k)).collect(),
        };
        masks.push(AlignmentMasks {
            pass: n,
            topk: config.topk,
            predictable,
            cumulative: state.gates[b].clone(),
        });
        let regress = tape.value(regress_vars[b]);
        let d = regress.cols();
        let mut shifted = Vec::with_capacity(regress.len());
        shifted.extend_from_slice(state.sources[b][0].row(0));
        shifted.extend_from_slice(&regress.data()[..(seq.inputs() - 1) * d]);
        let mut sources = state.sources[b].clone();
        sources.push(Tensor::matrix(seq.inputs(), d, shifted)?);
        next_sources.push(sources);
    }

    let (loss, grads) = if gate_sum == 0 {
        (0.0, Vec::new())
    } else {
        let total = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let loss = tape.scale(total, 1.0 / gate_sum as f64);
        let grads = tape.backward(loss)?;
        (tape.value(loss).data()[0], grads.params().to_vec())
    };
    let next = PassState {
        pass: n + 1,
        sources: next_sources,
        gates: masks.iter().map(AlignmentMasks::advance).collect(),
    };
    Ok(PassOutput {
        loss,
        masked_positions: total_positions - gate_sum,
        total_positions,
        grads,
        masks,
        next,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub pass: usize,
    pub loss: f64,
    pub masked_fraction: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Fraction of gated-off loss positions per pass over the final epoch.
    pub masked_fraction: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Runs `config.epochs` epochs of passes `1..=config.steps` per batch, one optimizer step per batch.
pub fn run_schedule<F>(
    model: &mut DraftModel,
    data: &[TrainSequence],
    config: &TrainConfig,
    mut on_record: F,
) -> Result<TrainReport>
where
    F: FnMut(&TrainRecord),
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(config.optimizer.clone(), model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = vec![0.0; config.steps];
        let mut masked = vec![0usize; config.steps];
        let mut positions = vec![0usize; config.steps];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<TrainSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut state = PassState::initial(&batch);
            for pass in 0..config.steps {
                let out = training_pass(model, &batch, &state, config)?;
                model.params_mut().accumulate(&out.grads);
                loss_sum[pass] += out.loss;
                masked[pass] += out.masked_positions;
                positions[pass] += out.total_positions;
                state = out.next;
            }
            opt.step(model.params_mut());
            batches += 1;
        }
        let fractions: Vec<f64> = masked
            .iter()
            .zip(&positions)
            .map(|(&m, &p)| m as f64 / p.max(1) as f64)
            .collect();
        for pass in 0..config.steps {
            let rec = TrainRecord {
                epoch,
                pass: pass + 1,
                loss: loss_sum[pass] / batches as f64,
                masked_fraction: fractions[pass],
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_record(&rec);
            report.records.push(rec);
        }
        report.masked_fraction = fractions;
    }
    report.optimizer_steps = opt.steps_taken();
    Ok(report)
}
