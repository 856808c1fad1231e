//! Pre-norm transformer decoder layer shared by the target and draft models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Which key/value rows each query row may attend to, and from which source.
///
/// Most callers use a single source. Multi-pass draft training feeds several
/// versions of the same positions (target features and earlier draft passes)
/// and picks, per `(query, key)` pair, which version the query sees.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    pub n_query: usize,
    pub n_key: usize,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
    /// One `[n_query, n_key]` 0/1 matrix per key source. Their supports are disjoint.
    pub selectors: Vec<Tensor>,
    allowed: Vec<bool>,
}

impl AttentionPlan {
    /// Single-source plan from a boolean `[n_query, n_key]` mask.
    pub fn from_mask(
        mask: Vec<bool>,
        query_positions: Vec<usize>,
        key_positions: Vec<usize>,
    ) -> Result<Self> {
        let (nq, nk) = (query_positions.len(), key_positions.len());
        if mask.len() != nq * nk {
            return Err(Error::ShapeMismatch {
                expected: vec![nq, nk],
                actual: vec![mask.len()],
            });
        }
        let sel = Tensor::matrix(nq, nk, mask.iter().map(|&m| m as u8 as f64).collect())?;
        Ok(AttentionPlan {
            n_query: nq,
            n_key: nk,
            query_positions,
            key_positions,
            selectors: vec![sel],
            allowed: mask,
        })
    }

    /// Standard causal plan over positions `0..n`.
    pub fn causal(n: usize) -> Self {
        let mask = (0..n * n).map(|i| i % n <= i / n).collect();
        let pos: Vec<usize> = (0..n).collect();
        Self::from_mask(mask, pos.clone(), pos).expect("square mask")
    }

    /// Causal plan where key `j` of query `i` comes from source `source(i, j)`.
    pub fn causal_multi_source<F>(n: usize, sources: usize, source: F) -> Self
    where
        F: Fn(usize, usize) -> usize,
    {
        let mut selectors = vec![Tensor::zeros(&[n, n]); sources];
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = source(i, j);
                selectors[s].data_mut()[i * n + j] = 1.0;
                allowed[i * n + j] = true;
            }
        }
        let pos: Vec<usize> = (0..n).collect();
        AttentionPlan {
            n_query: n,
            n_key: n,
            query_positions: pos.clone(),
            key_positions: pos,
            selectors,
            allowed,
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn sources(&self) -> usize {
        self.selectors.len()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub d_model: usize,
    pub n_heads: usize,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_up: ParamId,
    b_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

impl DecoderLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = |name: &str, shape: &[usize], s: f64, store: &mut ParamStore| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(shape, s, rng), true)
        };
        let wq = w("wq", &[d_model, d_model], std, store);
        let wk = w("wk", &[d_model, d_model], std, store);
        let wv = w("wv", &[d_model, d_model], std, store);
        let wo = w("wo", &[d_model, d_model], std * out_scale, store);
        let w_up = w("w_up", &[d_model, ffn_dim], std, store);
        let w_down = w("w_down", &[ffn_dim, d_model], out_scale / (ffn_dim as f64).sqrt(), store);
        let ones = Tensor::filled(&[d_model], 1.0);
        let zeros = Tensor::zeros(&[d_model]);
        DecoderLayer {
            d_model,
            n_heads,
            ln1_gain: store.add(format!("{prefix}.ln1_gain"), ones.clone(), true),
            ln1_bias: store.add(format!("{prefix}.ln1_bias"), zeros.clone(), true),
            ln2_gain: store.add(format!("{prefix}.ln2_gain"), ones, true),
            ln2_bias: store.add(format!("{prefix}.ln2_bias"), zeros, true),
            b_up: store.add(format!("{prefix}.b_up"), Tensor::zeros(&[ffn_dim]), true),
            b_down: store.add(format!("{prefix}.b_down"), Tensor::zeros(&[d_model]), true),
            wq,
            wk,
            wv,
            wo,
            w_up,
            w_down,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gain,
            self.ln2_bias,
            self.w_up,
            self.b_up,
            self.w_down,
            self.b_down,
        ]
    }

    /// `query` is `[n_query, d]`; each entry of `keys` is `[n_key, d]`, one per plan source.
    pub fn forward(&self, tape: &mut Tape, query: Var, keys: &[Var], plan: &AttentionPlan) -> Result<Var> {
        if keys.len() != plan.sources() {
            return Err(Error::InvalidInput(format!(
                "attention plan has {} sources but {} key inputs were given",
                plan.sources(),
                keys.len()
            )));
        }
        let head_dim = self.d_model / self.n_heads;
        let (g1, b1) = (tape.param(self.ln1_gain), tape.param(self.ln1_bias));
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );

        let qn = tape.layer_norm(query, g1, b1)?;
        let q = tape.matmul(qn, wq)?;
        let q = tape.rope(q, &plan.query_positions, head_dim)?;

        let mut ks = Vec::with_capacity(keys.len());
        let mut vs = Vec::with_capacity(keys.len());
        for &src in keys {
            let kn = if src == query { qn } else { tape.layer_norm(src, g1, b1)? };
            let k = tape.matmul(kn, wk)?;
            ks.push(tape.rope(k, &plan.key_positions, head_dim)?);
            vs.push(tape.matmul(kn, wv)?);
        }

        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads: Option<Var> = None;
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let mut scores: Option<Var> = None;
            let mut vh = Vec::with_capacity(ks.len());
            for (s, (&k, &v)) in ks.iter().zip(&vs).enumerate() {
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                vh.push(tape.slice_cols(v, h * head_dim, head_dim)?);
                let sc = tape.matmul_t(qh, kh)?;
                let sc = if ks.len() > 1 {
                    tape.mul_const(sc, &plan.selectors[s])?
                } else {
                    sc
                };
                scores = Some(match scores {
                    Some(acc) => tape.add(acc, sc)?,
                    None => sc,
                });
            }
            let scores = tape.scale(scores.expect("at least one source"), scale);
            let attn = tape.masked_softmax(scores, plan.allowed())?;
            let mut out: Option<Var> = None;
            for (s, &v) in vh.iter().enumerate() {
                let a = if vh.len() > 1 {
                    tape.mul_const(attn, &plan.selectors[s])?
                } else {
                    attn
                };
                let o = tape.matmul(a, v)?;
                out = Some(match out {
                    Some(acc) => tape.add(acc, o)?,
                    None => o,
                });
            }
            let out = out.expect("at least one source");
            heads = Some(match heads {
                Some(acc) => tape.concat_cols(acc, out)?,
                None => out,
            });
        }
        let attn_out = tape.matmul(heads.expect("at least one head"), wo)?;
        let x = tape.add(query, attn_out)?;

        let (g2, b2) = (tape.param(self.ln2_gain), tape.param(self.ln2_bias));
        let xn = tape.layer_norm(x, g2, b2)?;
        let (w_up, b_up) = (tape.param(self.w_up), tape.param(self.b_up));
        let up = tape.matmul(xn, w_up)?;
        let up = tape.add_row(up, b_up)?;
        let act = tape.silu(up);
        let (w_down, b_down) = (tape.param(self.w_down), tape.param(self.b_down));
        let down = tape.matmul(act, w_down)?;
        let down = tape.add_row(down, b_down)?;
        tape.add(x, down)
    }
}
