mod common;

use common::{reference_logits, spread_params, tiny_config, XorShift};
use kdlab::corpus::Batch;
use kdlab::losses::{LmObjective, LossParams, MixedObjective, Objective};
use kdlab::model::{forward_logits, loss_and_grads, ModelConfig, ParameterSet};
use kdlab::Error;

fn random_tokens(rng: &mut XorShift, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

fn batch_from(rng: &mut XorShift, rows: usize, t: usize, vocab: usize) -> Batch {
    let windows: Vec<Vec<u32>> = (0..rows).map(|_| random_tokens(rng, t + 1, vocab)).collect();
    let refs: Vec<&[u32]> = windows.iter().map(|w| w.as_slice()).collect();
    Batch::from_windows(&refs, t).unwrap()
}

#[test]
fn tiny_model_matches_straight_line_reference() {
    let cfg = tiny_config(8, 11, 3);
    let p = spread_params(&cfg, 1);
    let tokens = [3u32, 10, 0];
    let logits = forward_logits(&p, &tokens, 1, 3).unwrap();
    let expected = reference_logits(&p, &tokens);
    for (t, row) in expected.iter().enumerate() {
        for (v, &e) in row.iter().enumerate() {
            let got = logits[t * 11 + v];
            assert!((got - e).abs() < 1e-12, "t={t} v={v} {got} vs {e}");
        }
    }
}

#[test]
fn grouped_two_layer_model_matches_reference() {
    let cfg = ModelConfig {
        hidden_dim: 12,
        num_layers: 2,
        mlp_dim: 20,
        query_heads: 4,
        kv_heads: 2,
        head_dim: 6,
        vocab_size: 9,
        rope_base: 500_000.0,
        norm_eps: 1e-5,
        context_len: 7,
    };
    let p = spread_params(&cfg, 2);
    let mut rng = XorShift::new(3);
    let a = random_tokens(&mut rng, 7, 9);
    let b = random_tokens(&mut rng, 7, 9);
    let both: Vec<u32> = a.iter().chain(&b).copied().collect();
    let logits = forward_logits(&p, &both, 2, 7).unwrap();
    for (row, tokens) in [&a, &b].iter().enumerate() {
        let expected = reference_logits(&p, tokens);
        for t in 0..7 {
            for v in 0..9 {
                let got = logits[(row * 7 + t) * 9 + v];
                assert!((got - expected[t][v]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn logits_are_causal() {
    let cfg = tiny_config(16, 32, 10);
    let p = spread_params(&cfg, 4);
    let mut rng = XorShift::new(5);
    let base = random_tokens(&mut rng, 10, 32);
    let reference = forward_logits(&p, &base, 1, 10).unwrap();
    for t in 0..9 {
        let mut perturbed = base.clone();
        for tok in perturbed[t + 1..].iter_mut() {
            *tok = (*tok + 7) % 32;
        }
        let out = forward_logits(&p, &perturbed, 1, 10).unwrap();
        let prefix = (t + 1) * 32;
        let same = reference[..prefix]
            .iter()
            .zip(&out[..prefix])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "prefix through position {t} changed");
        assert_ne!(reference[prefix..], out[prefix..]);
    }
}

#[test]
fn identical_rows_give_identical_logits_and_repeat_bitwise() {
    let cfg = ModelConfig {
        context_len: 16,
        ..ModelConfig::tiny()
    };
    let p = ParameterSet::<f32>::init(&cfg, 6).unwrap();
    let row: Vec<u32> = (0..16).map(|i| (i * 37 % 256) as u32).collect();
    let inputs: Vec<u32> = row.iter().chain(&row).chain(&row).copied().collect();
    let logits = forward_logits(&p, &inputs, 3, 16).unwrap();
    let per_row = 16 * 256;
    assert_eq!(logits[..per_row], logits[per_row..2 * per_row]);
    assert_eq!(logits[..per_row], logits[2 * per_row..]);
    assert!(logits.iter().all(|x| x.is_finite()));
    let again = forward_logits(&p, &inputs, 3, 16).unwrap();
    assert!(logits.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = tiny_config(8, 11, 3);
    let p = spread_params(&cfg, 7);
    assert!(matches!(
        forward_logits(&p, &[1, 11, 2], 1, 3),
        Err(Error::IdOutOfRange { id: 11, .. })
    ));
    assert!(matches!(
        forward_logits(&p, &[1, 2, 3, 4], 1, 4),
        Err(Error::ContextOverflow { len: 4, max: 3 })
    ));
    assert!(forward_logits(&p, &[1, 2], 1, 3).is_err());
}

fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn finite_difference_check<O: Objective<f64>>(p: &ParameterSet<f64>, batch: &Batch, objective: &O, coords: usize, seed: u64) -> f64 {
    let (_, grads) = loss_and_grads(p, batch, objective).unwrap();
    let mut rng = XorShift::new(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.below(p.len());
        let mut plus = p.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = p.clone();
        minus.as_mut_slice()[i] -= h;
        let lp = loss_and_grads(&plus, batch, objective).unwrap().0.loss;
        let lm = loss_and_grads(&minus, batch, objective).unwrap().0.loss;
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(relative_error(grads.as_slice()[i], numeric));
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = tiny_config(16, 32, 6);
    let p = spread_params(&cfg, 8);
    let mut rng = XorShift::new(9);
    let batch = batch_from(&mut rng, 2, 6, 32);
    let worst = finite_difference_check(&p, &batch, &LmObjective, 200, 10);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn distillation_gradients_match_central_differences() {
    let cfg = tiny_config(16, 32, 6);
    let p = spread_params(&cfg, 11);
    let teacher = spread_params(&cfg, 12);
    let mut rng = XorShift::new(13);
    let batch = batch_from(&mut rng, 2, 6, 32);
    let teacher_logits = forward_logits(&teacher, &batch.inputs, 2, 6).unwrap();
    for (alpha, tau) in [(0.5, 1.0), (1.0, 2.0)] {
        let obj = MixedObjective::new(LossParams::new(alpha, tau).unwrap(), &teacher_logits).unwrap();
        let worst = finite_difference_check(&p, &batch, &obj, 100, 14);
        assert!(worst < 1e-4, "alpha {alpha} tau {tau}: {worst}");
    }
}

#[test]
fn student_equal_to_frozen_teacher_gets_zero_distillation_gradient() {
    let cfg = tiny_config(8, 11, 4);
    let student = spread_params(&cfg, 15);
    let teacher = student.clone();
    let snapshot: Vec<u64> = teacher.as_slice().iter().map(|x| x.to_bits()).collect();
    let mut rng = XorShift::new(16);
    let batch = batch_from(&mut rng, 3, 4, 11);
    let teacher_logits = forward_logits(&teacher, &batch.inputs, 3, 4).unwrap();
    let obj = MixedObjective::new(LossParams::new(1.0, 1.0).unwrap(), &teacher_logits).unwrap();
    let (loss, grads) = loss_and_grads(&student, &batch, &obj).unwrap();
    assert!(loss.loss.abs() < 1e-15);
    assert!(grads.as_slice().iter().all(|&g| g == 0.0));
    let after: Vec<u64> = teacher.as_slice().iter().map(|x| x.to_bits()).collect();
    assert_eq!(snapshot, after);
}

#[test]
fn duplicating_rows_leaves_mean_loss_and_grads_unchanged() {
    let cfg = tiny_config(8, 11, 5);
    let p = spread_params(&cfg, 17);
    let mut rng = XorShift::new(18);
    let batch = batch_from(&mut rng, 2, 5, 11);
    let doubled = Batch {
        inputs: batch.inputs.iter().chain(&batch.inputs).copied().collect(),
        targets: batch.targets.iter().chain(&batch.targets).copied().collect(),
        batch_size: 4,
        context_len: 5,
        windows: Vec::new(),
    };
    let (a, ga) = loss_and_grads(&p, &batch, &LmObjective).unwrap();
    let (b, gb) = loss_and_grads(&p, &doubled, &LmObjective).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-14);
    for (x, y) in ga.as_slice().iter().zip(gb.as_slice()) {
        assert!((x - y).abs() < 1e-14);
    }
}
