// SPDX-License-Identifier: Apache-2.0

use evf_core::allocator::allocation_plans_built;
use evf_core::checkpoint;
use evf_core::micro_model::BlockFfn;
use evf_core::router::routing_decisions_built;
use evf_core::training::{evaluate, train, TrainConfig};
use evf_core::{
    CapacityConfig, Error, MicroModel, Mode, ModelConfig, Stage, Strategy, SyntheticTask, TaskConfig, TokenBatch,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (MicroModel, SyntheticTask) {
    let cfg = ModelConfig { seed, ..Default::default() };
    let task = SyntheticTask::new(&cfg, &TaskConfig::default()).unwrap();
    (MicroModel::build(cfg).unwrap(), task)
}

fn stage2(seed: u64) -> (MicroModel, SyntheticTask) {
    let (mut m, task) = setup(seed);
    m.set_stage(Stage::Two).unwrap();
    (m, task)
}

#[test]
fn builds_are_deterministic() {
    let (a, task) = setup(3);
    let (b, _) = setup(3);
    assert_eq!(a.store.digest(|_| true), b.store.digest(|_| true));
    let batch = task.sample(3, &mut ChaCha8Rng::seed_from_u64(0));
    let la = a.logits(&batch, Mode::Multimodal, 0).unwrap();
    assert!(la.bit_eq(&b.logits(&batch, Mode::Multimodal, 0).unwrap()));
    let (c, _) = setup(4);
    assert_ne!(a.store.digest(|_| true), c.store.digest(|_| true));
}

#[test]
fn language_only_stage3_equals_stage2() {
    let (dense, task) = stage2(1);
    let mut evf = dense.clone();
    evf.set_stage(Stage::Three).unwrap();
    evf.jitter_trainable(0.5, &mut ChaCha8Rng::seed_from_u64(9));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let batch = task.sample_text(2, &mut rng);
        let want = dense.logits(&batch, Mode::LanguageOnly, 0).unwrap();
        assert!(evf.logits(&batch, Mode::LanguageOnly, 0).unwrap().bit_eq(&want));
    }
}

#[test]
fn fresh_stage3_halves_each_evf_ffn() {
    // With a zero router every gate is 0.5 and every token prefers the
    // language FFN; with capacity n nothing drops. Halving the down
    // projection of the dense FFN gives the same function.
    let (dense, task) = stage2(5);
    let mut evf = dense.clone();
    evf.set_capacity(CapacityConfig { capacity_factor: 2.0, ..Default::default() });
    evf.set_stage(Stage::Three).unwrap();
    let mut halved = dense.clone();
    for l in dense.cfg.evf_layers() {
        let BlockFfn::Dense(f) = &dense.blocks[l].ffn else { unreachable!() };
        for id in [f.down_weight, f.down_bias] {
            let p = halved.store.get_mut(id);
            p.value = p.value.scale(0.5);
        }
    }
    let batch = task.sample(3, &mut ChaCha8Rng::seed_from_u64(4));
    let got = evf.logits(&batch, Mode::Multimodal, 0).unwrap();
    let want = halved.logits(&batch, Mode::Multimodal, 0).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn language_only_never_routes() {
    let (mut m, task) = stage2(2);
    m.set_stage(Stage::Three).unwrap();
    let batch = task.sample_text(2, &mut ChaCha8Rng::seed_from_u64(1));
    let before = (routing_decisions_built(), allocation_plans_built());
    let pass = m.forward(&batch, Mode::LanguageOnly, 0).unwrap();
    assert_eq!((routing_decisions_built(), allocation_plans_built()), before);
    assert!(pass.evf.is_empty());
    let mm = task.sample(2, &mut ChaCha8Rng::seed_from_u64(1));
    m.forward(&mm, Mode::Multimodal, 0).unwrap();
    assert_eq!(routing_decisions_built(), before.0 + 2);
    assert!(matches!(m.forward(&mm, Mode::LanguageOnly, 0), Err(Error::Contract(_))));
}

#[test]
fn images_are_optional_in_multimodal_mode() {
    let (mut m, task) = stage2(2);
    m.set_stage(Stage::Three).unwrap();
    let text = task.sample_text(2, &mut ChaCha8Rng::seed_from_u64(6));
    let pass = m.forward(&text, Mode::Multimodal, 0).unwrap();
    assert_eq!(pass.tags.image_count(), 0);
    assert_eq!(pass.evf.len(), 2);
}

#[test]
fn checkpoints_round_trip() {
    let (mut m, task) = stage2(7);
    m.set_stage(Stage::Three).unwrap();
    m.set_strategy(Strategy::Gbpr);
    m.jitter_trainable(0.2, &mut ChaCha8Rng::seed_from_u64(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.stage, Stage::Three);
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.store.digest(|_| true), m.store.digest(|_| true));
    assert_eq!(back.store.frozen_digest(), m.store.frozen_digest());
    let batch = task.sample(2, &mut ChaCha8Rng::seed_from_u64(3));
    assert!(back.logits(&batch, Mode::Multimodal, 5).unwrap().bit_eq(&m.logits(&batch, Mode::Multimodal, 5).unwrap()));
    let mut truncated = std::fs::read(&path).unwrap();
    truncated.truncate(truncated.len() - 8);
    assert!(matches!(checkpoint::from_bytes(&truncated), Err(Error::Checkpoint(_))));
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let (mut m, task) = stage2(1);
    m.set_stage(Stage::Three).unwrap();
    let before = checkpoint::to_bytes(&m).unwrap();
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let summary = train(&mut m, &task, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(checkpoint::to_bytes(&m).unwrap(), before);
    assert_eq!(summary.initial_eval, summary.final_eval);
}

#[test]
fn stage2_training_reduces_loss() {
    let (mut m, task) = stage2(0);
    let cfg = TrainConfig { steps: 60, ..Default::default() };
    let mut seen = 0;
    let summary = train(&mut m, &task, &cfg, |metrics, telemetry| {
        assert_eq!(metrics.step, seen);
        assert!(telemetry.is_empty());
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 60);
    assert!(summary.final_eval < summary.initial_eval);
    assert_eq!(summary.frozen_digest_before, summary.frozen_digest_after);
}

#[test]
fn stage3_reports_telemetry_per_layer() {
    let (mut m, task) = stage2(0);
    m.set_stage(Stage::Three).unwrap();
    let cfg = TrainConfig { steps: 3, ..Default::default() };
    train(&mut m, &task, &cfg, |metrics, telemetry| {
        assert_eq!(telemetry.len(), 2);
        assert_eq!(metrics.layers.len(), 2);
        for t in telemetry {
            assert_eq!(t.stats.num_tokens, 4 * 12);
            assert_eq!(t.vision_probability_histogram.iter().sum::<usize>(), 48);
        }
        Ok(())
    })
    .unwrap();
    let batch = task.sample(2, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(evaluate(&m, &batch).unwrap().is_finite());
}

#[test]
fn leaving_stage3_is_rejected() {
    let (mut m, _) = stage2(0);
    m.set_stage(Stage::Three).unwrap();
    assert!(m.set_stage(Stage::Two).is_err());
    let text = TokenBatch::text_only(vec![vec![1, 2, 3]]);
    assert!(m.forward(&text, Mode::LanguageOnly, 0).is_ok());
}
