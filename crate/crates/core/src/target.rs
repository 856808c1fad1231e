//! Toy decoder-only transformer used as the target model.
//!
//! The target exposes, per position, its final hidden state (the feature the
//! draft model regresses) and the logits of its LM head over that feature.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{sample_index, validate_corpus, Token};
use crate::error::{Error, Result};
use crate::layers::{AttentionPlan, DecoderLayer};
use crate::numerics::{kernels, AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("target.{key}"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config {
                key: "target.vocab_size".into(),
                reason: "needs at least 2 tokens".into(),
            });
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config {
                key: "target.n_heads".into(),
                reason: format!(
                    "d_model {} must split into an even head width across {} heads",
                    self.d_model, self.n_heads
                ),
            });
        }
        Ok(())
    }
}

/// Per-position features and logits; `logits` row `i` is the LM head applied to `features` row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetOutput {
    pub features: Tensor,
    pub logits: Tensor,
}

/// Handles to the embedding table and LM head, shared with draft models.
#[derive(Clone, Debug)]
pub struct SharedHead {
    pub embedding: Tensor,
    pub lm_weight: Tensor,
    pub lm_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct TargetModel {
    config: TargetConfig,
    params: ParamStore,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    norm_gain: ParamId,
    norm_bias: ParamId,
    lm_weight: ParamId,
    lm_bias: ParamId,
}

/// Applies an LM head (weight `[d, V]`, bias `[V]`) to feature rows on an existing tape.
pub(crate) fn apply_lm_head(tape: &mut Tape, features: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let w = tape.param(weight);
    let b = tape.param(bias);
    let logits = tape.matmul(features, w)?;
    tape.add_row(logits, b)
}

impl TargetModel {
    pub fn new(config: TargetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let embed = params.add("embed", Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng), true);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|i| DecoderLayer::init(&mut params, &format!("layer{i}"), d, config.n_heads, 4 * d, out_scale, &mut rng))
            .collect();
        let norm_gain = params.add("norm_gain", Tensor::filled(&[d], 1.0), true);
        let norm_bias = params.add("norm_bias", Tensor::zeros(&[d]), true);
        let lm_weight = params.add(
            "lm_weight",
            Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng),
            true,
        );
        let lm_bias = params.add("lm_bias", Tensor::zeros(&[config.vocab_size]), true);
        Ok(TargetModel {
            config,
            params,
            embed,
            layers,
            norm_gain,
            norm_bias,
            lm_weight,
            lm_bias,
        })
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn shared_head(&self) -> SharedHead {
        SharedHead {
            embedding: self.params.value(self.embed).clone(),
            lm_weight: self.params.value(self.lm_weight).clone(),
            lm_bias: self.params.value(self.lm_bias).clone(),
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn record(&self, tape: &mut Tape, tokens: &[Token], plan: &AttentionPlan) -> Result<(Var, Var)> {
        let table = tape.param(self.embed);
        let mut x = tape.gather_rows(table, tokens)?;
        for layer in &self.layers {
            x = layer.forward(tape, x, &[x], plan)?;
        }
        let g = tape.param(self.norm_gain);
        let b = tape.param(self.norm_bias);
        let features = tape.layer_norm(x, g, b)?;
        let logits = apply_lm_head(tape, features, self.lm_weight, self.lm_bias)?;
        Ok((features, logits))
    }

    /// Causal forward over `tokens`.
    pub fn forward(&self, tokens: &[Token]) -> Result<TargetOutput> {
        self.check_tokens(tokens)?;
        self.forward_with_plan(tokens, &AttentionPlan::causal(tokens.len()))
    }

    /// Forward under an arbitrary attention plan (e.g. a token tree). Row `i`
    /// is placed at rotary position `plan.query_positions[i]`.
    pub fn forward_with_plan(&self, tokens: &[Token], plan: &AttentionPlan) -> Result<TargetOutput> {
        if tokens.is_empty() || plan.n_query != tokens.len() || plan.n_key != tokens.len() {
            return Err(Error::InvalidInput(format!(
                "attention plan is {}x{} for {} tokens",
                plan.n_query,
                plan.n_key,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.config.vocab_size,
            });
        }
        let mut tape = Tape::new(&self.params);
        let (f, l) = self.record(&mut tape, tokens, plan)?;
        Ok(TargetOutput {
            features: tape.value(f).clone(),
            logits: tape.value(l).clone(),
        })
    }

    /// LM head over arbitrary feature rows `[n, d]`.
    pub fn lm_head(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let f = tape.leaf(features.clone());
        let l = apply_lm_head(&mut tape, f, self.lm_weight, self.lm_bias)?;
        Ok(tape.value(l).clone())
    }

    pub fn next_logits(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let out = self.forward(tokens)?;
        Ok(out.logits.row(out.logits.rows() - 1).to_vec())
    }

    /// Argmax of the last logits row; ties go to the lowest token id.
    pub fn greedy_next(&self, tokens: &[Token]) -> Result<Token> {
        Ok(kernels::argmax(&self.next_logits(tokens)?))
    }

    /// Samples from `softmax(logits / temperature)`; `temperature == 0` is greedy.
    pub fn sample_next<R: Rng + ?Sized>(&self, tokens: &[Token], temperature: f64, rng: &mut R) -> Result<Token> {
        let logits = self.next_logits(tokens)?;
        sample_from_logits(&logits, temperature, rng)
    }

    /// Plain autoregressive decoding, the reference for lossless speculative decoding.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[Token],
        new_tokens: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        let mut seq = prompt.to_vec();
        for _ in 0..new_tokens {
            let t = self.sample_next(&seq, temperature, rng)?;
            seq.push(t);
        }
        Ok(seq[prompt.len()..].to_vec())
    }

    /// Mean next-token cross-entropy of one sequence, recorded on `tape`.
    fn sequence_loss(&self, tape: &mut Tape, seq: &[Token]) -> Result<Var> {
        let n = seq.len() - 1;
        let (_, logits) = self.record(tape, &seq[..n], &AttentionPlan::causal(n))?;
        let weights = vec![1.0 / n as f64; n];
        tape.cross_entropy(logits, &seq[1..], &weights)
    }

    /// Mean per-token cross-entropy over a corpus without updating weights.
    pub fn evaluate(&self, corpus: &[Vec<Token>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus.iter().filter(|s| s.len() >= 2) {
            self.check_tokens(seq)?;
            let mut tape = Tape::new(&self.params);
            let loss = self.sequence_loss(&mut tape, seq)?;
            total += tape.value(loss).data()[0] * (seq.len() - 1) as f64;
            count += seq.len() - 1;
        }
        if count == 0 {
            return Err(Error::InvalidInput("corpus has no sequence of length >= 2".into()));
        }
        Ok(total / count as f64)
    }

    /// Trains on next-token prediction with AdamW; returns mean training loss per epoch.
    pub fn train_on_corpus(&mut self, corpus: &[Vec<Token>], epochs: usize, lr: f64) -> Result<Vec<f64>> {
        self.train_with(corpus, epochs, lr, 8, |_, _| {})
    }

    /// As [`TargetModel::train_on_corpus`] with an explicit batch size and a
    /// per-epoch callback `(epoch, mean_loss)`.
    pub fn train_with<F>(
        &mut self,
        corpus: &[Vec<Token>],
        epochs: usize,
        lr: f64,
        batch: usize,
        mut on_epoch: F,
    ) -> Result<Vec<f64>>
    where
        F: FnMut(usize, f64),
    {
        validate_corpus(corpus, self.config.vocab_size)?;
        let seqs: Vec<&Vec<Token>> = corpus.iter().filter(|s| s.len() >= 2).collect();
        if seqs.is_empty() {
            return Err(Error::InvalidInput("corpus has no sequence of length >= 2".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() - 1 > self.config.max_seq) {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq {}",
                s.len(),
                self.config.max_seq
            )));
        }
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                grad_clip: None,
                ..AdamWConfig::default()
            },
            &self.params,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7a29_e1d3);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        let batch = batch.max(1);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                for &i in chunk {
                    let grads = {
                        let mut tape = Tape::new(&self.params);
                        let loss = self.sequence_loss(&mut tape, seqs[i])?;
                        let scaled = tape.scale(loss, 1.0 / chunk.len() as f64);
                        epoch_loss += tape.value(loss).data()[0];
                        tape.backward(scaled)?.params().to_vec()
                    };
                    self.params.accumulate(&grads);
                }
                opt.step(&mut self.params);
            }
            let mean = epoch_loss / seqs.len() as f64;
            on_epoch(epoch, mean);
            history.push(mean);
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, "target", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, layout, values): (TargetConfig, _, _) = checkpoint::read(path, "target")?;
        let mut model = TargetModel::new(config)?;
        checkpoint::restore(path, &mut model.params, &layout, &values)?;
        Ok(model)
    }
}

/// Temperature sampling from raw logits; `temperature == 0` takes the argmax.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<Token> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        return Ok(kernels::argmax(logits));
    }
    let probs = softmax_with_temperature(logits, temperature);
    Ok(sample_index(&probs, rng))
}

pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax(&scaled)
}
