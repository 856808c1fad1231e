mod common;

use common::{draft_loss as loss, fusion_oracle as oracle, randomize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use tokalign::draft::{DraftConfig, DraftModel, DraftVariant, SecondInput};
use tokalign::layers::AttentionPlan;
use tokalign::numerics::{ParamId, Tape, Tensor};
use tokalign::target::{TargetConfig, TargetModel};

const D: usize = 8;
const V: usize = 12;

fn target() -> TargetModel {
    TargetModel::new(TargetConfig {
        vocab_size: V,
        d_model: D,
        n_layers: 1,
        n_heads: 2,
        max_seq: 32,
        seed: 3,
    })
    .unwrap()
}

fn draft(variant: DraftVariant, seed: u64) -> DraftModel {
    let t = target();
    DraftModel::new(DraftConfig::for_target(V, D, 2, variant, seed), &t.shared_head()).unwrap()
}

#[test]
fn fusion_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seconds = [SecondInput::TokenEmbedding, SecondInput::RawFeature, SecondInput::FusedH];
    for case in 0..100 {
        let variant = DraftVariant {
            use_tgf: true,
            use_teh: true,
            tgf_second_input: seconds[case % 3],
        };
        let mut m = draft(variant, case as u64);
        randomize(&mut m, &mut rng);
        let rows = 1 + case % 4;
        let f = Tensor::randn(&[rows, D], 2.0, &mut rng);
        let x = Tensor::randn(&[rows, D], 1.0, &mut rng);
        let got = m.tgf_fuse(&f, &x).unwrap();
        for r in 0..rows {
            let want = oracle(&m, f.row(r), x.row(r));
            for (a, b) in got.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_down_projection_passes_fused_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = draft(DraftVariant::default(), 1);
    randomize(&mut m, &mut rng);
    let p = m.tgf_params().unwrap();
    m.params_mut().get_mut(p.w_d).tensor.fill(0.0);
    m.params_mut().get_mut(p.b_d).tensor.fill(0.0);
    let f = Tensor::randn(&[3, D], 1.0, &mut rng);
    let x = Tensor::randn(&[3, D], 1.0, &mut rng);
    let o = m.tgf_fuse(&f, &x).unwrap();
    let base = draft(DraftVariant::baseline(), 1);
    let mut plain = base.clone();
    let (w_m, b_m) = (m.params().value(p.w_m).clone(), m.params().value(p.b_m).clone());
    let ids: Vec<ParamId> = plain.params().ids().collect();
    for id in ids {
        match plain.params().name(id) {
            "fuse.w_m" => plain.params_mut().get_mut(id).tensor = w_m.clone(),
            "fuse.b_m" => plain.params_mut().get_mut(id).tensor = b_m.clone(),
            _ => {}
        }
    }
    let h = plain.tgf_fuse(&f, &x).unwrap();
    assert!(o.max_abs_diff(&h) < 1e-12);
}

#[test]
fn zero_weights_give_zero_output() {
    let mut m = draft(DraftVariant::default(), 2);
    let p = m.tgf_params().unwrap();
    for id in [p.w_m, p.b_m, p.w_u, p.b_u, p.w_d, p.b_d] {
        m.params_mut().get_mut(id).tensor.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let o = m
        .tgf_fuse(&Tensor::randn(&[2, D], 1.0, &mut rng), &Tensor::randn(&[2, D], 1.0, &mut rng))
        .unwrap();
    assert!(o.data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_count_delta_is_fusion_block() {
    let full = draft(DraftVariant { use_teh: false, ..DraftVariant::default() }, 0);
    let base = draft(DraftVariant::baseline(), 0);
    let e = 4 * D;
    let expected = 2 * D * e + e + e * D + D + 4 * D;
    assert_eq!(full.param_count() - base.param_count(), expected);
    let teh = draft(DraftVariant { use_tgf: false, ..DraftVariant::default() }, 0);
    assert_eq!(teh.param_count() - base.param_count(), D * D + D);
}

#[test]
fn draft_forward_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = draft(DraftVariant::default(), 3);
    let tokens = vec![1, 4, 2, 7, 3];
    let f = Tensor::randn(&[5, D], 1.0, &mut rng);
    let mut g = f.clone();
    g.data_mut()[4 * D] += 0.5;
    let mut t2 = tokens.clone();
    t2[4] = 9;
    let a = m.forward(&tokens, &f).unwrap();
    let b = m.forward(&t2, &g).unwrap();
    assert_eq!(&a.predict.data()[..4 * D], &b.predict.data()[..4 * D]);
    assert_eq!(&a.regress.data()[..4 * D], &b.regress.data()[..4 * D]);
    assert_ne!(&a.predict.data()[4 * D..], &b.predict.data()[4 * D..]);
}

#[test]
fn shared_head_without_teh() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = draft(DraftVariant { use_teh: false, ..DraftVariant::default() }, 4);
    let out = m.forward(&[1, 2, 3], &Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    assert_eq!(out.predict, out.regress);
    let m = draft(DraftVariant::default(), 4);
    let out = m.forward(&[1, 2, 3], &Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    assert_ne!(out.predict, out.regress);
}

#[test]
fn multi_source_with_identical_sources_matches_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = draft(DraftVariant::default(), 5);
    let tokens = vec![3, 1, 4, 1, 5, 9];
    let f = Tensor::randn(&[6, D], 1.0, &mut rng);
    let single = m.forward(&tokens, &f).unwrap();
    let plan = AttentionPlan::causal_multi_source(6, 3, |i, j| (j + 3 - 1).saturating_sub(i).min(2) * usize::from(j > 0));
    let mut tape = Tape::new(m.params());
    let vars = m
        .record(&mut tape, &tokens, &[f.clone(), f.clone(), f], &[2, 2, 2, 2, 2, 0], &plan)
        .unwrap();
    assert!(tape.value(vars.predict).max_abs_diff(&single.predict) < 1e-12);
    assert!(tape.value(vars.regress).max_abs_diff(&single.regress) < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for variant in [DraftVariant::default(), DraftVariant::baseline()] {
        let mut m = draft(variant, 6);
        let tokens = vec![2, 5, 7, 1];
        let f = Tensor::randn(&[4, D], 1.0, &mut rng);
        let tgt = Tensor::randn(&[4, D], 1.0, &mut rng);
        let (_, grads) = loss(&m, &tokens, &f, &tgt);
        for (id, g) in grads {
            for _ in 0..3 {
                let k = rng.random_range(0..g.len());
                let orig = m.params().value(id).data()[k];
                let h = 1e-5;
                m.params_mut().get_mut(id).tensor.data_mut()[k] = orig + h;
                let up = loss(&m, &tokens, &f, &tgt).0;
                m.params_mut().get_mut(id).tensor.data_mut()[k] = orig - h;
                let down = loss(&m, &tokens, &f, &tgt).0;
                m.params_mut().get_mut(id).tensor.data_mut()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = g.data()[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4 || (num - ana).abs() < 1e-8, "{} [{k}]: {num} vs {ana}", m.params().name(id));
            }
        }
    }
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = draft(DraftVariant::default(), 7);
    let tokens = vec![2, 5, 7, 1, 3];
    let (_, grads) = loss(&m, &tokens, &Tensor::randn(&[5, D], 1.0, &mut rng), &Tensor::randn(&[5, D], 1.0, &mut rng));
    let trainable: Vec<ParamId> = m.params().ids().filter(|&id| m.params().get(id).trainable).collect();
    let grads: Vec<_> = grads.into_iter().filter(|(id, _)| m.params().get(*id).trainable).collect();
    assert_eq!(grads.len(), trainable.len());
    for (id, g) in grads {
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient", m.params().name(id));
    }
    let base = draft(DraftVariant::baseline(), 7);
    let (_, grads) = loss(&base, &tokens, &Tensor::randn(&[5, D], 1.0, &mut rng), &Tensor::randn(&[5, D], 1.0, &mut rng));
    assert!(grads.iter().all(|(id, _)| !base.params().name(*id).starts_with("tgf.")));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("draft.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = draft(
        DraftVariant {
            use_tgf: true,
            use_teh: false,
            tgf_second_input: SecondInput::FusedH,
        },
        8,
    );
    randomize(&mut m, &mut rng);
    m.save(&path).unwrap();
    let back = DraftModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params().flat_values(), m.params().flat_values());
    let f = Tensor::randn(&[3, D], 1.0, &mut rng);
    assert_eq!(back.forward(&[1, 2, 3], &f).unwrap(), m.forward(&[1, 2, 3], &f).unwrap());
    assert!(TargetModel::load(&path).is_err());
}
