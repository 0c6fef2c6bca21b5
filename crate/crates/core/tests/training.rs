// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{decision_of, random_probs, random_tags};
use evf_core::graph::Graph;
use evf_core::router::Ffn;
use evf_core::training::{
    aux_loss, record_loss, regressive_loss, total_loss, AdamW, OptimizerConfig, DEFAULT_ALPHA,
};
use evf_core::{
    plan_allocation, CapacityConfig, MicroModel, Mode, ModalityTags, ModelConfig, ParamGroup, ParamStore,
    Parameter, Stage, Strategy, SyntheticTask, TaskConfig, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn aux_loss_matches_recount(seed in any::<u64>(), layers in 1usize..4, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CapacityConfig { seed, ..Default::default() };
        let mut decisions = Vec::new();
        let mut plans = Vec::new();
        for _ in 0..layers {
            let d = decision_of(&random_probs(&mut rng, n, false));
            let tags = ModalityTags::new(random_tags(&mut rng, n));
            let s = Strategy::ALL[rng.random_range(0..3)];
            plans.push(plan_allocation(&d, &tags, &cfg, s).unwrap().1);
            decisions.push(d);
        }
        let mut want = 0.0;
        for (p, d) in plans.iter().zip(&decisions) {
            let mut counts = [0usize; 2];
            let mut mass = [0.0f64; 2];
            for t in 0..n {
                if let Some(f) = p.assigned(t) {
                    counts[f.index()] += 1;
                }
                mass[0] += d.probabilities.get(t, 0);
                mass[1] += d.probabilities.get(t, 1);
            }
            prop_assert!(((mass[0] + mass[1]) / n as f64 - 1.0).abs() < 1e-12);
            want += (counts[0] as f64 * mass[0] + counts[1] as f64 * mass[1]) / (n * n) as f64;
        }
        want /= layers as f64;
        let pr: Vec<_> = plans.iter().collect();
        let dr: Vec<_> = decisions.iter().collect();
        let (got, loads) = aux_loss(&pr, &dr).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
        for l in &loads {
            prop_assert!((l.g_i + l.g_t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_scalar_loop(seed in any::<u64>(), n in 1usize..10, v in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[n, v], 5.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            want += -(row[t] - m - z.ln());
        }
        want /= n as f64;
        prop_assert!((regressive_loss(&logits, &targets).unwrap() - want).abs() < 1e-12);
        let mut g = Graph::new();
        let lv = g.input(logits);
        let ce = g.cross_entropy(lv, &targets).unwrap();
        prop_assert!((g.value(ce).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_is_regressive_plus_weighted_aux(r in 0.0f64..20.0, a in 0.0f64..2.0, alpha in 0.0f64..1.0) {
        let b = total_loss(r, a, alpha).unwrap();
        prop_assert!((b.total - (r + alpha * a)).abs() < 1e-12);
    }
}

#[test]
fn balanced_routing_minimizes_aux() {
    // Tokens prefer vision with probability 0.9 or language with 0.9; no drops.
    let n = 20;
    let cfg = CapacityConfig { capacity_factor: 2.0, ..Default::default() };
    let tags = ModalityTags::image_then_text(n / 2, n / 2);
    let sweep: Vec<f64> = (0..=n)
        .map(|k| {
            let probs: Vec<[f64; 2]> = (0..n).map(|t| if t < k { [0.1, 0.9] } else { [0.9, 0.1] }).collect();
            let d = decision_of(&probs);
            let (_, plan) = plan_allocation(&d, &tags, &cfg, Strategy::ImgGbpr).unwrap();
            aux_loss(&[&plan], &[&d]).unwrap().0
        })
        .collect();
    let best = (0..=n).min_by(|&a, &b| sweep[a].total_cmp(&sweep[b])).unwrap();
    assert_eq!(best, n / 2);
    // Uniform routing with an even split gives exactly one half.
    let d = decision_of(&vec![[0.5, 0.5]; n]);
    let (_, plan) = plan_allocation(&d, &tags, &cfg, Strategy::Gbpr).unwrap();
    let mut even = plan.clone();
    even.accepted.language = (0..n / 2).collect();
    even.accepted.vision = (n / 2..n).collect();
    assert_eq!(aux_loss(&[&even], &[&d]).unwrap().0, 0.5);
}

#[test]
fn adamw_matches_hand_stepped_updates() {
    let cfg = OptimizerConfig {
        learning_rate: 0.01,
        weight_decay: 0.1,
        warmup_ratio: 0.0,
        ..Default::default()
    };
    let total = 5;
    let mut store = ParamStore::new();
    let w = store.push(Parameter::new("w", ParamGroup::Router, Tensor::new(vec![2], vec![0.5, -1.0]).unwrap(), true));
    let frozen = store.push(Parameter::new("f", ParamGroup::Ffn, Tensor::new(vec![1], vec![3.0]).unwrap(), false));
    let grads = [[0.2, -0.1], [0.05, 0.3], [-0.4, 0.0], [0.1, 0.1], [1.0, -2.0]];
    let mut opt = AdamW::new(cfg, total);
    let (mut x, mut m, mut v) = ([0.5f64, -1.0], [0.0f64; 2], [0.0f64; 2]);
    for (step, gr) in grads.iter().enumerate() {
        store.get_mut(w).grad = Tensor::new(vec![2], gr.to_vec()).unwrap();
        store.get_mut(frozen).grad = Tensor::new(vec![1], vec![9.0]).unwrap();
        let lr = opt.step(&mut store, step);
        let want_lr = 0.5 * 0.01 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
        assert!((lr - want_lr).abs() < 1e-15);
        let t = (step + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * gr[i];
            v[i] = 0.95 * v[i] + 0.05 * gr[i] * gr[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.95f64.powi(t));
            x[i] -= want_lr * (mh / (vh.sqrt() + 1e-8) + 0.1 * x[i]);
            assert!((store.value(w).data()[i] - x[i]).abs() < 1e-12);
        }
        assert_eq!(store.value(frozen).data(), &[3.0]);
    }
}

#[test]
fn frozen_tensors_survive_many_updates() {
    let mut model = MicroModel::build(ModelConfig::default()).unwrap();
    model.set_stage(Stage::Three).unwrap();
    let before = model.store.frozen_digest();
    let mut opt = AdamW::new(OptimizerConfig { learning_rate: 0.1, ..Default::default() }, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for step in 0..1000 {
        for p in model.store.iter_mut() {
            p.grad = Tensor::randn(p.value.shape(), 1.0, &mut rng);
        }
        opt.step(&mut model.store, step);
    }
    assert_eq!(model.store.frozen_digest(), before);
    let moved = model.evf_layers().all(|(_, e)| !e.language_ffn.bit_eq(&e.vision_ffn, &model.store));
    assert!(moved);
}

fn stage3_pass(seed: u64) -> (MicroModel, evf_core::TokenBatch) {
    let cfg = ModelConfig::default();
    let mut model = MicroModel::build(cfg.clone()).unwrap();
    model.set_stage(Stage::Three).unwrap();
    model.jitter_trainable(0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    let task = SyntheticTask::new(&cfg, &TaskConfig::default()).unwrap();
    let batch = task.sample(2, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    (model, batch)
}

fn router_grads(model: &MicroModel, batch: &evf_core::TokenBatch, alpha: f64, aux_only: bool) -> Vec<Tensor> {
    let mut pass = model.forward(batch, Mode::Multimodal, 0).unwrap();
    let (vars, _) = record_loss(&mut pass, batch, alpha).unwrap();
    let target = if aux_only { vars.aux.unwrap() } else { vars.total };
    let grads = pass.graph.backward(target).unwrap();
    model
        .evf_layers()
        .map(|(_, e)| {
            let v = pass.graph.param_var(e.router.weight).unwrap();
            grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&[model.cfg.width, 2]))
        })
        .collect()
}

#[test]
fn aux_weight_scales_the_router_gradient() {
    let (model, batch) = stage3_pass(4);
    let plain = router_grads(&model, &batch, 0.0, false);
    let aux = router_grads(&model, &batch, 0.0, true);
    let mixed = router_grads(&model, &batch, DEFAULT_ALPHA, false);
    for ((p, a), m) in plain.iter().zip(&aux).zip(&mixed) {
        assert!(a.data().iter().any(|&v| v != 0.0));
        let want = p.add(&a.scale(DEFAULT_ALPHA)).unwrap();
        assert!(m.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn recorded_breakdown_is_consistent() {
    let (model, batch) = stage3_pass(8);
    let mut pass = model.forward(&batch, Mode::Multimodal, 3).unwrap();
    let (_, b) = record_loss(&mut pass, &batch, DEFAULT_ALPHA).unwrap();
    assert_eq!(b.layers.len(), 2);
    let mean = b.layers.iter().map(|l| l.aux).sum::<f64>() / 2.0;
    assert!((b.aux - mean).abs() < 1e-15);
    assert!((b.total - (b.regressive + 0.001 * b.aux)).abs() < 1e-12);
    let (rows, targets) = batch.next_token_targets();
    let logits = pass.graph.value(pass.logits).gather_rows(&rows).unwrap();
    assert!((regressive_loss(&logits, &targets).unwrap() - b.regressive).abs() < 1e-12);
    for (l, trace) in b.layers.iter().zip(&pass.evf) {
        assert_eq!(l.f_i, trace.plan.accepted[Ffn::Vision].len() as f64 / batch.num_tokens() as f64);
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = OptimizerConfig { learning_rate: 1.0, ..Default::default() };
    let total = 200;
    let warm = 6; // ceil(0.03 * 200)
    assert_eq!(cfg.warmup_steps(total), warm);
    for s in 0..total {
        let want = if s < warm {
            s as f64 / warm as f64
        } else {
            let p = (s - warm) as f64 / (total - warm) as f64;
            (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
        };
        assert!((cfg.lr_at(s, total) - want).abs() < 1e-15, "step {s}");
    }
}
