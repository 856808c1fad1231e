//! Token-alignable draft model.
//!
//! Input position `i` pairs a feature with the embedding of the token that
//! follows it. The pair is fused (token-guided fusion when enabled), passed
//! through one causal decoder layer, and split by two output heads: a
//! predict feature for the shared LM head and a regress feature that is fed
//! back as the next input feature.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::layers::{AttentionPlan, DecoderLayer};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::target::{apply_lm_head, SharedHead};

/// What fills the second slot of the normalise-and-expand step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondInput {
    #[default]
    TokenEmbedding,
    RawFeature,
    FusedH,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftVariant {
    pub use_tgf: bool,
    pub use_teh: bool,
    #[serde(default)]
    pub tgf_second_input: SecondInput,
}

impl Default for DraftVariant {
    fn default() -> Self {
        DraftVariant {
            use_tgf: true,
            use_teh: true,
            tgf_second_input: SecondInput::TokenEmbedding,
        }
    }
}

impl DraftVariant {
    /// Plain feature+token fusion with a single output head.
    pub fn baseline() -> Self {
        DraftVariant {
            use_tgf: false,
            use_teh: false,
            tgf_second_input: SecondInput::TokenEmbedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the up projection inside the fusion block.
    pub expansion_dim: usize,
    pub variant: DraftVariant,
    pub seed: u64,
}

impl DraftConfig {
    pub fn for_target(vocab_size: usize, d_model: usize, n_heads: usize, variant: DraftVariant, seed: u64) -> Self {
        DraftConfig {
            vocab_size,
            d_model,
            n_heads,
            expansion_dim: 4 * d_model,
            variant,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TgfParams {
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub ln_h_gain: ParamId,
    pub ln_h_bias: ParamId,
    pub ln_x_gain: ParamId,
    pub ln_x_bias: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_d: ParamId,
    pub b_d: ParamId,
}

#[derive(Clone, Debug)]
struct Fusion {
    w_m: ParamId,
    b_m: ParamId,
    /// Present only when token-guided fusion is enabled.
    tgf: Option<TgfExtra>,
}

#[derive(Clone, Debug)]
struct TgfExtra {
    ln_h_gain: ParamId,
    ln_h_bias: ParamId,
    ln_x_gain: ParamId,
    ln_x_bias: ParamId,
    w_u: ParamId,
    b_u: ParamId,
    w_d: ParamId,
    b_d: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DraftOutput {
    pub predict: Tensor,
    pub regress: Tensor,
}

/// Tape handles for one recorded draft forward.
#[derive(Clone, Copy, Debug)]
pub struct DraftVars {
    pub predict: Var,
    pub regress: Var,
}

#[derive(Clone, Debug)]
pub struct DraftModel {
    config: DraftConfig,
    params: ParamStore,
    embed: ParamId,
    lm_weight: ParamId,
    lm_bias: ParamId,
    fusion: Fusion,
    layer: DecoderLayer,
    head_p: (ParamId, ParamId),
    head_r: Option<(ParamId, ParamId)>,
}

impl DraftModel {
    pub fn new(config: DraftConfig, shared: &SharedHead) -> Result<Self> {
        let d = config.d_model;
        if shared.embedding.shape() != [config.vocab_size, d]
            || shared.lm_weight.shape() != [d, config.vocab_size]
            || shared.lm_bias.len() != config.vocab_size
        {
            return Err(Error::ShapeMismatch {
                expected: vec![config.vocab_size, d],
                actual: shared.embedding.shape().to_vec(),
            });
        }
        if d < 2 || config.n_heads == 0 || d % config.n_heads != 0 || (d / config.n_heads) % 2 != 0 {
            return Err(Error::Config {
                key: "draft.n_heads".into(),
                reason: format!("d_model {d} must split into an even head width across {} heads", config.n_heads),
            });
        }
        if config.expansion_dim == 0 {
            return Err(Error::Config {
                key: "draft.expansion_dim".into(),
                reason: "must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embed = params.add("embed", shared.embedding.clone(), false);
        let lm_weight = params.add("lm_weight", shared.lm_weight.clone(), false);
        let lm_bias = params.add("lm_bias", shared.lm_bias.clone(), false);

        let in_std = 1.0 / (2.0 * d as f64).sqrt();
        let w_m = params.add("fuse.w_m", Tensor::randn(&[2 * d, d], in_std, &mut rng), true);
        let b_m = params.add("fuse.b_m", Tensor::zeros(&[d]), true);
        let tgf = config.variant.use_tgf.then(|| {
            let e = config.expansion_dim;
            TgfExtra {
                ln_h_gain: params.add("tgf.ln_h_gain", Tensor::filled(&[d], 1.0), true),
                ln_h_bias: params.add("tgf.ln_h_bias", Tensor::zeros(&[d]), true),
                ln_x_gain: params.add("tgf.ln_x_gain", Tensor::filled(&[d], 1.0), true),
                ln_x_bias: params.add("tgf.ln_x_bias", Tensor::zeros(&[d]), true),
                w_u: params.add("tgf.w_u", Tensor::randn(&[2 * d, e], in_std, &mut rng), true),
                b_u: params.add("tgf.b_u", Tensor::zeros(&[e]), true),
                w_d: params.add(
                    "tgf.w_d",
                    Tensor::randn(&[e, d], 0.5 / (e as f64).sqrt(), &mut rng),
                    true,
                ),
                b_d: params.add("tgf.b_d", Tensor::zeros(&[d]), true),
            }
        });
        let layer = DecoderLayer::init(&mut params, "layer", d, config.n_heads, 4 * d, 1.0, &mut rng);
        let head_std = 1.0 / (d as f64).sqrt();
        let head_p = (
            params.add("head_p.w", Tensor::randn(&[d, d], head_std, &mut rng), true),
            params.add("head_p.b", Tensor::zeros(&[d]), true),
        );
        let head_r = config.variant.use_teh.then(|| {
            (
                params.add("head_r.w", Tensor::randn(&[d, d], head_std, &mut rng), true),
                params.add("head_r.b", Tensor::zeros(&[d]), true),
            )
        });
        Ok(DraftModel {
            config,
            params,
            embed,
            lm_weight,
            lm_bias,
            fusion: Fusion { w_m, b_m, tgf },
            layer,
            head_p,
            head_r,
        })
    }

    pub fn config(&self) -> &DraftConfig {
        &self.config
    }

    pub fn variant(&self) -> DraftVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Handles of the fusion-block parameters, when token-guided fusion is enabled.
    pub fn tgf_params(&self) -> Option<TgfParams> {
        self.fusion.tgf.as_ref().map(|t| TgfParams {
            w_m: self.fusion.w_m,
            b_m: self.fusion.b_m,
            ln_h_gain: t.ln_h_gain,
            ln_h_bias: t.ln_h_bias,
            ln_x_gain: t.ln_x_gain,
            ln_x_bias: t.ln_x_bias,
            w_u: t.w_u,
            b_u: t.b_u,
            w_d: t.w_d,
            b_d: t.b_d,
        })
    }

    /// Trainable parameter count (the frozen embedding and LM head are excluded).
    pub fn param_count(&self) -> usize {
        self.params.trainable_numel()
    }

    fn check(&self, tokens: &[Token], features: &Tensor) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty draft input".into()));
        }
        if features.rows() != tokens.len() || features.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                expected: vec![tokens.len(), self.config.d_model],
                actual: features.shape().to_vec(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the fusion of feature rows `f` with token-embedding rows `x`.
    pub fn record_fuse(&self, tape: &mut Tape, f: Var, x: Var) -> Result<Var> {
        let cat = tape.concat_cols(f, x)?;
        let w_m = tape.param(self.fusion.w_m);
        let b_m = tape.param(self.fusion.b_m);
        let h = tape.matmul(cat, w_m)?;
        let h = tape.add_row(h, b_m)?;
        let Some(t) = &self.fusion.tgf else {
            return Ok(h);
        };
        let (gh, bh) = (tape.param(t.ln_h_gain), tape.param(t.ln_h_bias));
        let (gx, bx) = (tape.param(t.ln_x_gain), tape.param(t.ln_x_bias));
        let nh = tape.layer_norm(h, gh, bh)?;
        let second = match self.config.variant.tgf_second_input {
            SecondInput::TokenEmbedding => x,
            SecondInput::RawFeature => f,
            SecondInput::FusedH => h,
        };
        let nx = tape.layer_norm(second, gx, bx)?;
        let cat2 = tape.concat_cols(nh, nx)?;
        let (w_u, b_u) = (tape.param(t.w_u), tape.param(t.b_u));
        let z = tape.matmul(cat2, w_u)?;
        let z = tape.add_row(z, b_u)?;
        let a = tape.silu(z);
        let (w_d, b_d) = (tape.param(t.w_d), tape.param(t.b_d));
        let o = tape.matmul(a, w_d)?;
        let o = tape.add_row(o, b_d)?;
        tape.add(o, h)
    }

    /// Fusion block on plain tensors: `f` and `x_emb` are `[n, d]`.
    pub fn tgf_fuse(&self, f: &Tensor, x_emb: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        if f.cols() != d || x_emb.cols() != d || f.rows() != x_emb.rows() {
            return Err(Error::ShapeMismatch {
                expected: f.shape().to_vec(),
                actual: x_emb.shape().to_vec(),
            });
        }
        let mut tape = Tape::new(&self.params);
        let fv = tape.leaf(f.clone());
        let xv = tape.leaf(x_emb.clone());
        let o = self.record_fuse(&mut tape, fv, xv)?;
        Ok(tape.value(o).clone())
    }

    pub fn embed_tokens(&self, tokens: &[Token]) -> Result<Tensor> {
        let table = self.params.value(self.embed);
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    size: self.config.vocab_size,
                });
            }
            out.extend_from_slice(table.row(t));
        }
        Tensor::matrix(tokens.len(), d, out)
    }

    /// General recorded forward.
    ///
    /// `feature_sources[s]` holds one feature row per input position; query
    /// row `i` reads its own input from source `query_source[i]`, and its
    /// attention to key `j` uses the source selected by `plan`.
    pub fn record(
        &self,
        tape: &mut Tape,
        tokens: &[Token],
        feature_sources: &[Tensor],
        query_source: &[usize],
        plan: &AttentionPlan,
    ) -> Result<DraftVars> {
        let n = tokens.len();
        if feature_sources.len() != plan.sources() || query_source.len() != n || plan.n_query != n || plan.n_key != n {
            return Err(Error::InvalidInput(format!(
                "draft forward got {} sources / {} query rows for a {}x{} plan over {} tokens",
                feature_sources.len(),
                query_source.len(),
                plan.n_query,
                plan.n_key,
                n
            )));
        }
        for f in feature_sources {
            self.check(tokens, f)?;
        }
        let x = tape.leaf(self.embed_tokens(tokens)?);
        let mut fused = Vec::with_capacity(feature_sources.len());
        for f in feature_sources {
            let fv = tape.leaf(f.clone());
            fused.push(self.record_fuse(tape, fv, x)?);
        }
        let query = if fused.len() == 1 {
            fused[0]
        } else {
            let d = self.config.d_model;
            let mut acc: Option<Var> = None;
            for (s, &src) in fused.iter().enumerate() {
                if !query_source.contains(&s) {
                    continue;
                }
                let sel: Vec<f64> = query_source
                    .iter()
                    .flat_map(|&q| std::iter::repeat_n(f64::from(u8::from(q == s)), d))
                    .collect();
                let part = tape.mul_const(src, &Tensor::matrix(n, d, sel)?)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, part)?,
                    None => part,
                });
            }
            acc.ok_or_else(|| Error::InvalidInput("query sources out of range".into()))?
        };
        let out = self.layer.forward(tape, query, &fused, plan)?;
        self.record_heads(tape, out)
    }

    fn record_heads(&self, tape: &mut Tape, out: Var) -> Result<DraftVars> {
        let (wp, bp) = (tape.param(self.head_p.0), tape.param(self.head_p.1));
        let p = tape.matmul(out, wp)?;
        let predict = tape.add_row(p, bp)?;
        let regress = match self.head_r {
            Some((wr, br)) => {
                let (wr, br) = (tape.param(wr), tape.param(br));
                let r = tape.matmul(out, wr)?;
                tape.add_row(r, br)?
            }
            None => predict,
        };
        Ok(DraftVars { predict, regress })
    }

    /// Records draft logits for predict-feature rows.
    pub fn record_logits(&self, tape: &mut Tape, predict: Var) -> Result<Var> {
        apply_lm_head(tape, predict, self.lm_weight, self.lm_bias)
    }

    /// Causal forward: row `i` of the output predicts the feature after input position `i`.
    pub fn forward(&self, tokens: &[Token], features: &Tensor) -> Result<DraftOutput> {
        self.forward_with_plan(tokens, features, &AttentionPlan::causal(tokens.len()))
    }

    pub fn forward_with_plan(&self, tokens: &[Token], features: &Tensor, plan: &AttentionPlan) -> Result<DraftOutput> {
        self.check(tokens, features)?;
        let mut tape = Tape::new(&self.params);
        let vars = self.record(&mut tape, tokens, std::slice::from_ref(features), &vec![0; tokens.len()], plan)?;
        Ok(DraftOutput {
            predict: tape.value(vars.predict).clone(),
            regress: tape.value(vars.regress).clone(),
        })
    }

    /// Fused layer inputs, one row per `(feature, token)` pair. Rows are
    /// independent, so blocks fused separately can be stacked.
    pub fn fuse_inputs(&self, tokens: &[Token], features: &Tensor) -> Result<Tensor> {
        self.check(tokens, features)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(self.embed_tokens(tokens)?);
        let f = tape.leaf(features.clone());
        let o = self.record_fuse(&mut tape, f, x)?;
        Ok(tape.value(o).clone())
    }

    /// Layer and heads over already fused rows, evaluated only for query rows
    /// `first..`; every row serves as a key. `plan` is `[n - first, n]`.
    /// Matches the corresponding rows of [`DraftModel::forward_with_plan`].
    pub fn forward_fused_rows(&self, fused: &Tensor, first: usize, plan: &AttentionPlan) -> Result<DraftOutput> {
        let (n, d) = (fused.rows(), fused.cols());
        if d != self.config.d_model || first >= n || plan.n_query != n - first || plan.n_key != n || plan.sources() != 1 {
            return Err(Error::InvalidInput(format!(
                "fused forward over {n} rows from {first} with a {}x{} plan",
                plan.n_query, plan.n_key
            )));
        }
        let mut tape = Tape::new(&self.params);
        let keys = tape.leaf(fused.clone());
        let query = tape.leaf(Tensor::matrix(n - first, d, fused.data()[first * d..].to_vec())?);
        let out = self.layer.forward(&mut tape, query, &[keys], plan)?;
        let vars = self.record_heads(&mut tape, out)?;
        Ok(DraftOutput {
            predict: tape.value(vars.predict).clone(),
            regress: tape.value(vars.regress).clone(),
        })
    }

    /// Shared LM head over predict-feature rows `[n, d]`.
    pub fn draft_logits(&self, predict: &Tensor) -> Result<Tensor> {
        if predict.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.d_model],
                actual: predict.shape().to_vec(),
            });
        }
        let mut tape = Tape::new(&self.params);
        let f = tape.leaf(predict.clone());
        let l = self.record_logits(&mut tape, f)?;
        Ok(tape.value(l).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, "draft", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, layout, values): (DraftConfig, Vec<checkpoint::ParamEntry>, Vec<f64>) =
            checkpoint::read(path, "draft")?;
        let d = config.d_model;
        let v = config.vocab_size;
        let placeholder = SharedHead {
            embedding: Tensor::zeros(&[v, d]),
            lm_weight: Tensor::zeros(&[d, v]),
            lm_bias: Tensor::zeros(&[v]),
        };
        let mut model = DraftModel::new(config, &placeholder)?;
        checkpoint::restore(path, &mut model.params, &layout, &values)?;
        Ok(model)
    }
}
