mod common;

use common::{loss_oracle as oracle, sort_topk};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokalign::draft::{DraftConfig, DraftModel, DraftVariant};
use tokalign::numerics::{AdamW, AdamWConfig, Tensor};
use tokalign::target::{TargetConfig, TargetModel};
use tokalign::training::{
    cumulative_mask, predictable_mask, run_schedule, training_pass, training_pass_with_targets,
    AlignmentMasks, PassState, TopK, TrainConfig, TrainSequence,
};

const V: usize = 8;
const D: usize = 8;

fn models(seed: u64, variant: DraftVariant) -> (TargetModel, DraftModel) {
    let target = TargetModel::new(TargetConfig {
        vocab_size: V,
        d_model: D,
        n_layers: 1,
        n_heads: 2,
        max_seq: 16,
        seed,
    })
    .unwrap();
    let draft = DraftModel::new(DraftConfig::for_target(V, D, 2, variant, seed + 100), &target.shared_head()).unwrap();
    (target, draft)
}

fn batch(target: &TargetModel, rng: &mut ChaCha8Rng, count: usize, len: usize) -> Vec<TrainSequence> {
    (0..count)
        .map(|_| {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..V)).collect();
            let out = target.forward(&tokens).unwrap();
            TrainSequence::new(tokens, out.features).unwrap()
        })
        .collect()
}

#[test]
fn predictable_mask_examples() {
    assert!(!predictable_mask(&[0.1, 2.0, 1.5, 0.0], 0, 2));
    assert!(predictable_mask(&[0.1, 2.0, 1.5, 0.0], 1, 1));
    for gt in 0..4 {
        assert!(predictable_mask(&[0.1, 2.0, 1.5, 0.0], gt, 4));
        assert!(predictable_mask(&[0.1, 2.0, 1.5, 0.0], gt, 9));
    }
    assert!(predictable_mask(&[1.0, 1.0, 1.0], 0, 1));
    assert!(!predictable_mask(&[1.0, 1.0, 1.0], 1, 1));
}

#[test]
fn cumulative_mask_examples() {
    let h = [true, true, false, true];
    for t in 0..6 {
        assert!(cumulative_mask(&h, t, 1));
    }
    assert!(!cumulative_mask(&[true, true, false], 3, 4));
    assert!(cumulative_mask(&[true; 5], 4, 5));
    assert!(cumulative_mask(&[false, true], 0, 3));
    assert!(!cumulative_mask(&[false, true], 1, 3));
}

proptest! {
    #[test]
    fn recursive_gates_match_window_product(history in prop::collection::vec(any::<bool>(), 1..12), passes in 1usize..6) {
        let p = history.len();
        let mut gates = vec![true; p];
        for n in 1..=passes {
            for t in 0..p {
                prop_assert_eq!(gates[t], cumulative_mask(&history, t, n));
            }
            let masks = AlignmentMasks { pass: n, topk: TopK::K(1), predictable: history.clone(), cumulative: gates.clone() };
            gates = masks.advance();
        }
    }

    #[test]
    fn predictable_mask_matches_sort(logits in prop::collection::vec(-3i32..3, 1..10), gt in 0usize..10, k in 1usize..12) {
        let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
        let gt = gt % logits.len();
        prop_assert_eq!(predictable_mask(&logits, gt, k), sort_topk(&logits, gt, k));
    }
}

#[test]
fn masked_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..12u64 {
        let variant = if case % 2 == 0 { DraftVariant::default() } else { DraftVariant::baseline() };
        let (target, draft) = models(case, variant);
        let topk = [TopK::K(1), TopK::K(2), TopK::K(3), TopK::Na][case as usize % 4];
        let config = TrainConfig { topk, lambda_feat: 0.7, ..TrainConfig::default() };
        let len = 4 + case as usize % 5;
        let data = batch(&target, &mut rng, 2, len);
        let want = oracle(&draft, &data, &config, 3, None);
        let mut state = PassState::initial(&data);
        for n in 0..3 {
            assert_eq!(state.gates, want.gates[n], "case {case} pass {}", n + 1);
            let out = training_pass(&draft, &data, &state, &config).unwrap();
            assert!((out.loss - want.losses[n]).abs() < 1e-10, "case {case} pass {}: {} vs {}", n + 1, out.loss, want.losses[n]);
            assert!(out.loss >= 0.0);
            state = out.next;
        }
    }
}

#[test]
fn hand_set_masks_on_six_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (target, draft) = models(3, DraftVariant::default());
    let data = batch(&target, &mut rng, 1, 8);
    let config = TrainConfig::default();
    let hand = vec![vec![true, false, true, true, false, false]];
    let want = oracle(&draft, &data, &config, 2, Some((2, &hand)));
    let first = training_pass(&draft, &data, &PassState::initial(&data), &config).unwrap();
    let mut state = first.next;
    state.gates = hand.clone();
    let out = training_pass(&draft, &data, &state, &config).unwrap();
    assert!((out.loss - want.losses[1]).abs() < 1e-10);
    assert_eq!(out.masked_positions, 3);
}

#[test]
fn fully_masked_pass_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (target, mut draft) = models(4, DraftVariant::default());
    let data = batch(&target, &mut rng, 2, 7);
    let config = TrainConfig::default();
    let first = training_pass(&draft, &data, &PassState::initial(&data), &config).unwrap();
    let mut state = first.next;
    state.gates.iter_mut().for_each(|g| g.fill(false));
    let out = training_pass(&draft, &data, &state, &config).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grads.is_empty());
    let before = draft.params().flat_values();
    let mut opt = AdamW::new(AdamWConfig::default(), draft.params());
    draft.params_mut().accumulate(&out.grads);
    opt.step(draft.params_mut());
    assert_eq!(draft.params().flat_values(), before);
}

#[test]
fn masked_targets_do_not_move_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..6u64 {
        let (target, draft) = models(10 + case, DraftVariant::default());
        let data = batch(&target, &mut rng, 2, 8);
        let config = TrainConfig::default();
        let first = training_pass(&draft, &data, &PassState::initial(&data), &config).unwrap();
        let mut state = first.next;
        state.gates = (0..2).map(|_| (0..6).map(|_| rng.random_bool(0.5)).collect()).collect();
        state.gates[0][0] = true;
        let targets: Vec<_> = data.iter().map(TrainSequence::targets).collect();
        let base = training_pass_with_targets(&draft, &data, &targets, &state, &config).unwrap();
        let mut moved = targets.clone();
        for (b, tg) in moved.iter_mut().enumerate() {
            for t in 0..6 {
                if !state.gates[b][t] {
                    tg.labels[t] = (tg.labels[t] + 1 + rng.random_range(0..V - 1)) % V;
                    for v in &mut tg.features.data_mut()[t * D..(t + 1) * D] {
                        *v = rng.random_range(-50.0..50.0);
                    }
                }
            }
        }
        let out = training_pass_with_targets(&draft, &data, &moved, &state, &config).unwrap();
        assert_eq!(out.loss, base.loss);
        assert_eq!(out.grads, base.grads);
    }
}

#[test]
fn feature_loss_vanishes_on_exact_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (target, draft) = models(5, DraftVariant::default());
    let data = batch(&target, &mut rng, 1, 6);
    let config = TrainConfig { lambda_tok: 0.0, ..TrainConfig::default() };
    let state = PassState::initial(&data);
    let m = data[0].tokens.len() - 1;
    let feats = Tensor::matrix(m, D, data[0].features.data()[..m * D].to_vec()).unwrap();
    let out = draft.forward(&data[0].tokens[1..], &feats).unwrap();
    let mut tg = data[0].targets();
    tg.features = Tensor::matrix(m - 1, D, out.regress.data()[..(m - 1) * D].to_vec()).unwrap();
    let res = training_pass_with_targets(&draft, &data, &[tg], &state, &config).unwrap();
    assert_eq!(res.loss, 0.0);
}

#[test]
fn single_step_schedule_never_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (target, mut draft) = models(6, DraftVariant::default());
    let data = batch(&target, &mut rng, 6, 8);
    let config = TrainConfig { steps: 1, epochs: 2, batch: 3, ..TrainConfig::default() };
    let mut lines = 0;
    let report = run_schedule(&mut draft, &data, &config, |_| lines += 1).unwrap();
    assert_eq!(lines, 2);
    assert_eq!(report.masked_fraction, vec![0.0]);
    assert_eq!(report.optimizer_steps, 4);
    let na = TrainConfig { steps: 3, topk: TopK::Na, epochs: 1, ..TrainConfig::default() };
    let report = run_schedule(&mut draft, &data, &na, |_| {}).unwrap();
    assert_eq!(report.masked_fraction, vec![0.0; 3]);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (target, draft) = models(7, DraftVariant::default());
    let data = batch(&target, &mut rng, 16, 10);
    let config = TrainConfig { epochs: 6, ..TrainConfig::default() };
    let mut a = draft.clone();
    let mut b = draft;
    let ra = run_schedule(&mut a, &data, &config, |_| {}).unwrap();
    let rb = run_schedule(&mut b, &data, &config, |_| {}).unwrap();
    assert_eq!(a.params().flat_values(), b.params().flat_values());
    let first = ra.records.iter().find(|r| r.pass == 1).unwrap().loss;
    let last = ra.records.iter().rev().find(|r| r.pass == 1).unwrap().loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(ra.records.len(), rb.records.len());
}

#[test]
fn bad_configs_are_rejected() {
    let (_, mut draft) = models(8, DraftVariant::default());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = models(8, DraftVariant::default()).0;
    let data = batch(&target, &mut rng, 1, 5);
    let config = TrainConfig { steps: 0, ..TrainConfig::default() };
    assert!(run_schedule(&mut draft, &data, &config, |_| {}).is_err());
    assert!(TrainSequence::new(vec![1, 2], Tensor::zeros(&[2, D])).is_err());
    let k: TrainConfig = toml::from_str("topk = \"NA\"").unwrap();
    assert_eq!(k.topk, TopK::Na);
    assert!(toml::from_str::<TrainConfig>("topk = 0").is_err());
}
