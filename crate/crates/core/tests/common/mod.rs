// SPDX-License-Identifier: Apache-2.0

//! Straight-line reference implementations shared by the integration tests.
//! They are written independently of the library code paths: selection by
//! repeated argmax instead of sorting, integer capacity arithmetic, and an
//! explicit replay of the documented shuffle protocol.

#![allow(dead_code)]

use evf_core::allocator::{Modality, REDISTRIBUTION_STREAM, SELECTION_STREAM};
use evf_core::router::Ffn;
use evf_core::seed::derive_seed;
use evf_core::router::RoutingDecision;
use evf_core::{plan_allocation, AllocationPlan, CapacityConfig, ModalityTags, Strategy, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Capacity factor written as a fraction so the oracle can use integers.
#[derive(Clone, Copy, Debug)]
pub struct Factor {
    pub num: usize,
    pub den: usize,
}

impl Factor {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

pub const FACTORS: [Factor; 5] = [
    Factor { num: 1, den: 2 },
    Factor { num: 1, den: 1 },
    Factor { num: 5, den: 4 },
    Factor { num: 3, den: 2 },
    Factor { num: 2, den: 1 },
];

pub fn oracle_capacity(n: usize, f: Factor) -> usize {
    (f.num * n).div_ceil(f.den * 2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OraclePlan {
    pub capacity: usize,
    pub language: Vec<usize>,
    pub vision: Vec<usize>,
    pub dropped: Vec<usize>,
    /// `(token, from, to)`, ascending by token.
    pub moved: Vec<(usize, Ffn, Ffn)>,
}

pub struct OracleInput<'a> {
    pub probs: &'a [[f64; 2]],
    pub tags: &'a [Modality],
    pub factor: Factor,
    pub redistribution: bool,
    /// Redistribute Random and GBPR rejects too, not only Img-GBPR ones.
    pub redistribute_all: bool,
    pub fraction: f64,
    pub seed: u64,
}

fn preferred(p: [f64; 2]) -> Ffn {
    if p[1] > p[0] {
        Ffn::Vision
    } else {
        Ffn::Language
    }
}

fn col(f: Ffn) -> usize {
    match f {
        Ffn::Language => 0,
        Ffn::Vision => 1,
    }
}

fn score(strategy: Strategy, p: [f64; 2], tag: Modality, f: Ffn) -> f64 {
    let bonus = match (strategy, tag, f) {
        (Strategy::ImgGbpr, Modality::Image, Ffn::Vision) => 1.0,
        (Strategy::ImgGbpr, Modality::Text, Ffn::Language) => 1.0,
        _ => 0.0,
    };
    p[col(f)] + bonus
}

/// Takes `k` items from `pool` by repeated argmax; earlier positions win ties.
fn take_best(pool: &mut Vec<usize>, k: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut taken = Vec::new();
    while taken.len() < k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if key(pool[i]) > key(pool[best]) {
                best = i;
            }
        }
        taken.push(pool.remove(best));
    }
    taken
}

fn shuffle_take(items: &[usize], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut a = items.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..a.len());
        a.swap(i, j);
    }
    let rest = a.split_off(k);
    (a, rest)
}

pub fn oracle_plan(input: &OracleInput, strategy: Strategy) -> OraclePlan {
    let n = input.probs.len();
    let cap = oracle_capacity(n, input.factor);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(input.seed, &[SELECTION_STREAM]));
    let mut kept: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut rejects = Vec::new();
    for f in [Ffn::Language, Ffn::Vision] {
        let mut cands: Vec<usize> = (0..n).filter(|&t| preferred(input.probs[t]) == f).collect();
        if cands.len() <= cap {
            kept[col(f)] = cands;
            continue;
        }
        if strategy == Strategy::Random {
            let (k, r) = shuffle_take(&cands, cap, &mut rng);
            kept[col(f)] = k;
            rejects.extend(r);
        } else {
            let key = |t: usize| score(strategy, input.probs[t], input.tags[t], f);
            kept[col(f)] = take_best(&mut cands, cap, key);
            rejects.extend(cands);
        }
    }

    let mut moved = Vec::new();
    let mut dropped = Vec::new();
    if input.redistribution && (strategy == Strategy::ImgGbpr || input.redistribute_all) {
        rejects.sort_unstable();
        let k = (input.fraction * rejects.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(input.seed, &[REDISTRIBUTION_STREAM]));
        // Random keeps the shuffled offer order; the others rank by score.
        let (offered, not_offered) = shuffle_take(&rejects, k, &mut rng);
        dropped.extend(not_offered);
        for to in [Ffn::Language, Ffn::Vision] {
            let from = if to == Ffn::Language { Ffn::Vision } else { Ffn::Language };
            let mut offers: Vec<usize> = offered
                .iter()
                .copied()
                .filter(|&t| preferred(input.probs[t]) == from)
                .collect();
            let room = cap - kept[col(to)].len();
            let taken = if strategy == Strategy::Random {
                let rest = offers.split_off(room.min(offers.len()));
                std::mem::replace(&mut offers, rest)
            } else {
                offers.sort_unstable();
                let key = |t: usize| score(strategy, input.probs[t], input.tags[t], to);
                take_best(&mut offers, room, key)
            };
            for t in taken {
                kept[col(to)].push(t);
                moved.push((t, from, to));
            }
            dropped.extend(offers);
        }
    } else {
        dropped = rejects;
    }
    for v in kept.iter_mut() {
        v.sort_unstable();
    }
    dropped.sort_unstable();
    moved.sort_unstable_by_key(|m| m.0);
    let [language, vision] = kept;
    OraclePlan {
        capacity: cap,
        language,
        vision,
        dropped,
        moved,
    }
}

/// Random routing probabilities. With `coarse` set they are multiples of
/// 1/8, so exact ties in probability and in preference are common.
pub fn random_probs(rng: &mut impl Rng, n: usize, coarse: bool) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let pv = if coarse {
                rng.random_range(0..=8) as f64 / 8.0
            } else {
                rng.random::<f64>()
            };
            [1.0 - pv, pv]
        })
        .collect()
}

pub fn random_tags(rng: &mut impl Rng, n: usize) -> Vec<Modality> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Modality::Image } else { Modality::Text })
        .collect()
}

pub fn decision_of(probs: &[[f64; 2]]) -> RoutingDecision {
    let rows: Vec<Vec<f64>> = probs.iter().map(|p| p.to_vec()).collect();
    let t = if rows.is_empty() { Tensor::zeros(&[0, 2]) } else { Tensor::from_rows(&rows).unwrap() };
    RoutingDecision::from_probabilities(t).unwrap()
}

pub fn library_plan(input: &OracleInput, strategy: Strategy) -> AllocationPlan {
    let cfg = CapacityConfig {
        capacity_factor: input.factor.value(),
        redistribution_fraction: input.fraction,
        redistribution: input.redistribution,
        redistribute_all: input.redistribute_all,
        seed: input.seed,
        ..Default::default()
    };
    let tags = ModalityTags::new(input.tags.to_vec());
    plan_allocation(&decision_of(input.probs), &tags, &cfg, strategy).unwrap().1
}

/// Describes the first disagreement between a library plan and the oracle.
pub fn compare(plan: &AllocationPlan, want: &OraclePlan) -> Result<(), String> {
    let got_moved: Vec<(usize, Ffn, Ffn)> =
        plan.redistributed.iter().map(|r| (r.token, r.from, r.to)).collect();
    let checks = [
        ("capacity", plan.capacity == want.capacity),
        ("language set", plan.accepted.language == want.language),
        ("vision set", plan.accepted.vision == want.vision),
        ("dropped set", plan.dropped == want.dropped),
        ("redistribution records", got_moved == want.moved),
        ("pending empty", plan.pending.is_empty()),
    ];
    match checks.iter().find(|c| !c.1) {
        None => Ok(()),
        Some((what, _)) => Err(format!("{what} differs: got {plan:?}, want {want:?}")),
    }
}
