use super::*;
use crate::dataset::make_dataset;
use crate::exec::Serial;
use crate::gradcheck::finite_diff_check;
use crate::model::default_vocab;
use proptest::prelude::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        d_vis: 8,
        n_vis_layers: 1,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq: 64,
        vocab_size: default_vocab().len(),
        mlp_ratio: 2,
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_stage1: 4,
        batch_stage2: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_ratio: 0.1,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, 100, &cfg), 0.0);
    assert_eq!(lr_at(10, 100, &cfg), 1e-3);
    assert!(lr_at(100, 100, &cfg).abs() < 1e-9);
    assert!((lr_at(55, 100, &cfg) - 5e-4).abs() < 1e-12);
    // ceil(0.03 * 10) = 1 warmup step
    let paper = TrainConfig::default();
    assert_eq!(lr_at(1, 10, &paper), paper.lr);
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(total in 1usize..400, ratio in 0.0f64..0.9) {
        let cfg = TrainConfig { warmup_ratio: ratio, ..TrainConfig::default() };
        let warm = libm::ceil(ratio * total as f64) as usize;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg)).collect();
        for s in 0..total {
            prop_assert!(lrs[s] >= 0.0 && lrs[s] <= cfg.lr * (1.0 + 1e-12));
            if s + 1 <= warm {
                prop_assert!(lrs[s + 1] >= lrs[s]);
            } else {
                prop_assert!(lrs[s + 1] <= lrs[s] + 1e-15);
            }
        }
        prop_assert!(lrs[total].abs() < 1e-9 || warm == total);
    }
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_stage2: 1, ..TrainConfig::default() },
        TrainConfig { tau: 0.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn zero_gradient_step_is_a_no_op() {
    let mut m = init_model(tiny_config(), 1).unwrap();
    let before = m.clone();
    let grads: Grads<f32> = m.params().iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect();
    let mut adam = Adam::new();
    for _ in 0..3 {
        adam.update(&mut m, &grads, 1e-2, 0.0).unwrap();
    }
    assert_eq!(m, before);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut m = init_model(tiny_config(), 2).unwrap();
    let before = m.param("llm.norm.b").unwrap().clone();
    let mut grads = Grads::new();
    let g: Vec<f32> = (0..before.numel()).map(|i| if i % 2 == 0 { 0.5 } else { -2.0 }).collect();
    grads.insert("llm.norm.b".to_string(), g.clone());
    Adam::new().update(&mut m, &grads, 1e-2, 0.0).unwrap();
    for ((a, b), gi) in m.param("llm.norm.b").unwrap().data().iter().zip(before.data()).zip(&g) {
        assert!(((b - a) as f64 - 1e-2 * gi.signum() as f64).abs() < 1e-6);
    }
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = Grads::new();
    g.insert("a".to_string(), vec![3.0f32, 0.0]);
    g.insert("b".to_string(), vec![4.0f32]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    let mut h = g.clone();
    clip_global_norm(&mut h, 0.0);
    assert_eq!(h, g);
}

#[test]
fn batches_cover_every_row_once_per_epoch() {
    let b = epoch_batches(10, 4, 2, 3, "shuffle");
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2, 4, 4, 2]);
    let mut first: Vec<usize> = b[..3].concat();
    first.sort();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    assert_eq!(epoch_batches(9, 4, 1, 3, "shuffle").len(), 2);
    assert_eq!(b, epoch_batches(10, 4, 2, 3, "shuffle"));
}

fn sample_groups(m: &Model, obj: Objective, seed: u64, hard: bool) -> Vec<Vec<SeqJob>> {
    let (pairs, triplets) = make_dataset(4, 4, seed).unwrap();
    match obj {
        Objective::Stage1 => stage1_groups(m, &pairs.iter().collect::<Vec<_>>(), hard).unwrap(),
        Objective::Stage2 => {
            let mut rng = substream(seed, "tpl");
            stage2_groups(m, &triplets.iter().collect::<Vec<_>>(), &TemplateBook::default(), hard, &mut rng).unwrap()
        }
    }
}

#[test]
fn split_tape_gradients_match_single_tape() {
    let ccfg = ContrastiveConfig::default();
    for (obj, hard) in [(Objective::Stage1, false), (Objective::Stage1, true), (Objective::Stage2, true), (Objective::Stage2, false)] {
        let mut m = init_model(tiny_config(), 3).unwrap();
        m.set_trainable(&[Component::Visual, Component::Adapter, Component::Llm]);
        let groups = sample_groups(&m, obj, 3, hard);
        let (loss, split) = batch_gradients(&m, obj, &groups, &ccfg, &Serial).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&m);
        let l = batch_loss(&mut tape, &mut b, obj, &groups, &ccfg).unwrap();
        assert!((tape.value(l)[0] as f64 - loss).abs() < 1e-5);
        tape.backward(l).unwrap();
        let mut single = Grads::new();
        b.collect_grads(&tape, &mut single);
        assert_eq!(split.keys().collect::<Vec<_>>(), single.keys().collect::<Vec<_>>());
        for (name, g) in &split {
            let s = &single[name];
            let scale = s.iter().fold(1e-3f32, |a, v| a.max(v.abs()));
            let diff = g.iter().zip(s).fold(0.0f32, |a, (x, y)| a.max((x - y).abs()));
            assert!(diff / scale < 1e-4, "{obj:?} {name}: {diff} vs scale {scale}");
        }
    }
}

/// Loss of a batch as a function of one parameter tensor, in f64.
fn loss_in(m: &Model<f64>, obj: Objective, groups: &[Vec<SeqJob>], name: &str) -> Result<f64> {
    let x = m.param(name).unwrap().clone();
    let ccfg = ContrastiveConfig::default();
    finite_diff_check(
        |tape, v| {
            let mut b = Binder::frozen(m);
            b.substitute(name, v)?;
            batch_loss(tape, &mut b, obj, groups, &ccfg)
        },
        &x,
        1e-5,
    )
}

#[test]
fn batch_loss_gradients_pass_finite_differences() {
    let m = init_model(tiny_config(), 4).unwrap();
    let m64 = m.cast::<f64>();
    for (obj, hard) in [(Objective::Stage1, false), (Objective::Stage1, true), (Objective::Stage2, true)] {
        let groups = sample_groups(&m, obj, 4, hard);
        for name in ["visual.patch.b", "adapter.fc2.b", "llm.block0.attn.v.b", "llm.norm.g"] {
            let err = loss_in(&m64, obj, &groups, name).unwrap();
            assert!(err < 1e-3, "{obj:?} {name}: {err}");
        }
    }
}

#[test]
fn stage1_trains_deterministically_and_lowers_loss() {
    let (pairs, _) = make_dataset(64, 2, 5).unwrap();
    let cfg = TrainConfig {
        epochs_stage1: 3,
        warmup_ratio: 0.1,
        ..tiny_train(5)
    };
    let m = init_model(tiny_config(), 5).unwrap();
    let a = run_stage1(m.clone(), &pairs, &cfg, &Serial).unwrap();
    let b = run_stage1(m.clone(), &pairs, &cfg, &Serial).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.curve.len(), 48);
    let first: f64 = a.curve[..16].iter().map(|r| r.loss).sum::<f64>() / 16.0;
    let last: f64 = a.curve[32..].iter().map(|r| r.loss).sum::<f64>() / 16.0;
    assert!(last < first, "{first} -> {last}");
    assert!(a.model.trainable_names().is_empty());
    for name in ["visual.patch.w", "adapter.fc1.w", "llm.tok_embed"] {
        assert_ne!(a.model.param(name).unwrap().data(), m.param(name).unwrap().data(), "{name}");
    }
}

#[test]
fn stage2_leaves_frozen_components_untouched() {
    let (_, triplets) = make_dataset(2, 24, 6).unwrap();
    let m = init_model(tiny_config(), 6).unwrap();
    let out = run_stage2(m.clone(), &triplets, &tiny_train(6), &TemplateBook::default(), &Serial).unwrap();
    for (name, t) in m.params() {
        let same = out.model.param(name).unwrap().data() == t.data();
        match Component::of(name).unwrap() {
            Component::Visual | Component::Adapter => assert!(same, "{name}"),
            _ => {}
        }
    }
    assert_ne!(out.model.param("llm.norm.g").unwrap().data(), m.param("llm.norm.g").unwrap().data());
}

#[test]
fn low_rank_stage2_only_moves_deltas() {
    let (_, triplets) = make_dataset(2, 16, 7).unwrap();
    let m = init_model(tiny_config(), 7).unwrap();
    let cfg = TrainConfig {
        use_low_rank: true,
        lora_r: 4,
        ..tiny_train(7)
    };
    let out = run_stage2(m.clone(), &triplets, &cfg, &TemplateBook::default(), &Serial).unwrap();
    for (name, t) in m.params() {
        assert_eq!(out.model.param(name).unwrap().data(), t.data(), "{name}");
    }
    let moved = out
        .model
        .names_in(Component::LowRank)
        .filter(|n| n.ends_with(".b"))
        .any(|n| out.model.param(n).unwrap().data().iter().any(|&v| v != 0.0));
    assert!(moved);
}

#[test]
fn initial_loss_is_near_log_batch() {
    let (pairs, _) = make_dataset(64, 2, 8).unwrap();
    let ccfg = ContrastiveConfig::default();
    let mut total = 0.0;
    for seed in 0..5 {
        let m = init_model(ModelConfig::toy(default_vocab().len()), seed).unwrap();
        let batch: Vec<&PairRecord> = pairs.iter().skip(seed as usize * 8).take(8).collect();
        let groups = stage1_groups(&m, &batch, false).unwrap();
        let mut tape = Tape::new();
        let l = batch_loss(&mut tape, &mut Binder::frozen(&m), Objective::Stage1, &groups, &ccfg).unwrap();
        total += tape.value(l)[0] as f64;
    }
    let mean = total / 5.0;
    assert!((mean - libm::log(8.0)).abs() < 0.5, "{mean}");
}

#[test]
fn degenerate_batches_are_rejected() {
    let m = init_model(tiny_config(), 9).unwrap();
    let mut groups = sample_groups(&m, Objective::Stage1, 9, false);
    groups[1].pop();
    let ccfg = ContrastiveConfig::default();
    assert!(matches!(
        batch_gradients(&m, Objective::Stage1, &groups, &ccfg, &Serial),
        Err(Error::DegenerateBatch(_))
    ));
    let (pairs, _) = make_dataset(1, 1, 9).unwrap();
    assert!(run_stage1(m, &pairs, &tiny_train(9), &Serial).is_err());
}

#[test]
fn ablation_has_one_row_per_arm_and_reruns_identically() {
    let (pairs, triplets) = make_dataset(8, 8, 10).unwrap();
    let bench = crate::dataset::make_circo_like(6, 12, 10).unwrap();
    let arms = &default_arms()[..4];
    let run = || ablation_matrix(arms, &[1, 2], &tiny_config(), &tiny_train(0), &pairs, &triplets, &bench, &[1, 5], &Serial).unwrap();
    let r = run();
    assert_eq!(r.rows.len(), arms.len());
    assert!(r.rows.iter().all(|row| row.reports.len() == 2));
    assert_eq!(r, run());
    assert!(r.mean_recall_at("stage1-only", 5).is_some());
}
