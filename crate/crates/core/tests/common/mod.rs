#![allow(dead_code)]
//! Independent oracles shared by the integration tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tokalign::draft::{DraftModel, SecondInput};
use tokalign::layers::AttentionPlan;
use tokalign::numerics::{ParamId, Tape, Tensor};
use tokalign::training::{key_source, TopK, TrainConfig, TrainSequence};

/// Top-k membership by full sort, ties to the lower id.
pub fn sort_topk(logits: &[f64], gt: usize, k: usize) -> bool {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx[..k.min(logits.len())].contains(&gt)
}

/// Scalar recomputation of passes `1..=passes`: each query row is answered by a
/// causal forward over the feature sequence that row is meant to see.
pub struct Oracle {
    pub losses: Vec<f64>,
    pub gates: Vec<Vec<Vec<bool>>>,
}

pub fn loss_oracle(draft: &DraftModel, batch: &[TrainSequence], config: &TrainConfig, passes: usize, hand: Option<(usize, &[Vec<bool>])>) -> Oracle {
    let mut losses = Vec::new();
    let mut all_gates = Vec::new();
    let mut sources: Vec<Vec<Vec<Vec<f64>>>> = batch
        .iter()
        .map(|s| vec![(0..s.tokens.len() - 1).map(|j| s.features.row(j).to_vec()).collect()])
        .collect();
    let mut gates: Vec<Vec<bool>> = batch.iter().map(|s| vec![true; s.tokens.len() - 2]).collect();
    for n in 1..=passes {
        if let Some((pass, g)) = hand {
            if pass == n {
                gates = g.to_vec();
            }
        }
        let mut num = 0.0;
        let mut den = 0usize;
        let mut next = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            let m = seq.tokens.len() - 1;
            let p = m - 1;
            let mut regress = Vec::new();
            let mut hits = Vec::new();
            for t in 0..m {
                let d = seq.features.cols();
                let rows: Vec<f64> = (0..=t).flat_map(|j| sources[b][key_source(t, j, n)][j].clone()).collect();
                let out = draft.forward(&seq.tokens[1..=t + 1], &Tensor::matrix(t + 1, d, rows).unwrap()).unwrap();
                let pred = out.predict.row(t).to_vec();
                let reg = out.regress.row(t).to_vec();
                let logits = draft.draft_logits(&Tensor::matrix(1, d, pred).unwrap()).unwrap();
                if t < p {
                    let label = seq.tokens[t + 2];
                    let l = logits.data();
                    let max = l.iter().copied().fold(f64::MIN, f64::max);
                    let lse = l.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    let ce = lse - l[label];
                    let tgt = seq.features.row(t + 1);
                    let l1 = reg.iter().zip(tgt).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64;
                    if gates[b][t] {
                        num += config.lambda_tok * ce + config.lambda_feat * l1;
                        den += 1;
                    }
                    hits.push(match config.topk {
                        TopK::Na => true,
                        TopK::K(k) => sort_topk(l, label, k),
                    });
                }
                regress.push(reg);
            }
            let mut src = vec![sources[b][0][0].clone()];
            src.extend(regress[..m - 1].iter().cloned());
            sources[b].push(src);
            next.push((0..p).map(|t| t == 0 || (gates[b][t - 1] && hits[t - 1])).collect::<Vec<_>>());
        }
        all_gates.push(gates.clone());
        losses.push(if den == 0 { 0.0 } else { num / den as f64 });
        gates = next;
    }
    Oracle { losses, gates: all_gates }
}

/// Uniform(-1, 1) values for every trainable parameter.
pub fn randomize(model: &mut DraftModel, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        if p.trainable {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
}

pub fn ln(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..v.len()).map(|i| (v[i] - mean) * inv * g[i] + b[i]).collect()
}

pub fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    (0..cols)
        .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

/// Straight-line fusion block for one row.
pub fn fusion_oracle(model: &DraftModel, f: &[f64], x: &[f64]) -> Vec<f64> {
    let p = model.tgf_params().unwrap();
    let val = |id| model.params().value(id);
    let cat: Vec<f64> = f.iter().chain(x).copied().collect();
    let h = affine(&cat, val(p.w_m), val(p.b_m).data());
    let nh = ln(&h, val(p.ln_h_gain).data(), val(p.ln_h_bias).data());
    let second = match model.variant().tgf_second_input {
        SecondInput::TokenEmbedding => x.to_vec(),
        SecondInput::RawFeature => f.to_vec(),
        SecondInput::FusedH => h.clone(),
    };
    let nx = ln(&second, val(p.ln_x_gain).data(), val(p.ln_x_bias).data());
    let cat2: Vec<f64> = nh.iter().chain(&nx).copied().collect();
    let z = affine(&cat2, val(p.w_u), val(p.b_u).data());
    let a: Vec<f64> = z.iter().map(|&z| z / (1.0 + (-z).exp())).collect();
    let o = affine(&a, val(p.w_d), val(p.b_d).data());
    o.iter().zip(&h).map(|(o, h)| o + h).collect()
}

/// Cross-entropy on shifted tokens plus a weighted l1 feature term; value and parameter grads.
pub fn draft_loss(m: &DraftModel, tokens: &[usize], f: &Tensor, tgt: &Tensor) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut tape = Tape::new(m.params());
    let vars = m.record(&mut tape, tokens, std::slice::from_ref(f), &vec![0; tokens.len()], &AttentionPlan::causal(tokens.len())).unwrap();
    let logits = m.record_logits(&mut tape, vars.predict).unwrap();
    let targets: Vec<usize> = tokens.iter().map(|t| (t + 1) % m.config().vocab_size).collect();
    let w = vec![1.0; tokens.len()];
    let ce = tape.cross_entropy(logits, &targets, &w).unwrap();
    let tv = tape.leaf(tgt.clone());
    let l1 = tape.l1(vars.regress, tv, &w).unwrap();
    let l1 = tape.scale(l1, 0.3);
    let total = tape.add(ce, l1).unwrap();
    let value = tape.value(total).data()[0];
    let grads = tape.backward(total).unwrap();
    (value, grads.params().to_vec())
}

