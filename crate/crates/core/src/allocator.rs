// SPDX-License-Identifier: Apache-2.0

//! Capacity-constrained token allocation between the language and vision FFNs.
//!
//! Tokens are grouped by their preferred FFN. When a group holds more than
//! the per-FFN capacity `C`, the strategy decides which `C` tokens stay:
//!
//! * [`Strategy::Random`]: a seeded uniform `C`-subset; the rest are dropped.
//! * [`Strategy::Gbpr`]: the `C` highest routing probabilities; the rest are dropped.
//! * [`Strategy::ImgGbpr`]: the `C` highest priority scores (probability plus
//!   a modality prior). Rejected tokens go back into a pool, a seeded fraction
//!   `w_r` of which is offered to the other FFN, which takes them in score
//!   order while it has room.
//!
//! Batch and sequence dimensions are flattened before calling in here, so
//! the token indices are positions in the whole batch.
//!
//! Randomness comes from ChaCha8 streams derived from `CapacityConfig::seed`:
//! stream [`SELECTION_STREAM`] drives Random subset selection (language FFN
//! first, then vision), stream [`REDISTRIBUTION_STREAM`] picks the offered
//! subset of the reject pool. Both use a partial Fisher-Yates shuffle over
//! candidates listed in ascending token index, drawing
//! `random_range(i..len)` for position `i`.

use std::cell::Cell;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{Ffn, RoutingDecision};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const SELECTION_STREAM: u64 = 0;
pub const REDISTRIBUTION_STREAM: u64 = 1;

/// Img-GBPR prior `(language, vision)` added to image tokens.
pub const IMAGE_PRIOR: [f64; 2] = [0.0, 1.0];
/// Img-GBPR prior `(language, vision)` added to text tokens.
pub const TEXT_PRIOR: [f64; 2] = [1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityTags(Vec<Modality>);

impl ModalityTags {
    pub fn new(tags: Vec<Modality>) -> Self {
        ModalityTags(tags)
    }

    /// `images` image tokens followed by `texts` text tokens.
    pub fn image_then_text(images: usize, texts: usize) -> Self {
        let mut v = vec![Modality::Image; images];
        v.extend(std::iter::repeat_n(Modality::Text, texts));
        ModalityTags(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Modality {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[Modality] {
        &self.0
    }

    pub fn image_count(&self) -> usize {
        self.0.iter().filter(|&&m| m == Modality::Image).count()
    }

    pub fn text_count(&self) -> usize {
        self.0.len() - self.image_count()
    }

    pub fn concat(&self, other: &ModalityTags) -> ModalityTags {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        ModalityTags(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Gbpr,
    ImgGbpr,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Gbpr, Strategy::ImgGbpr];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Gbpr => "gbpr",
            Strategy::ImgGbpr => "img_gbpr",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(Strategy::Random),
            "gbpr" => Ok(Strategy::Gbpr),
            "img_gbpr" | "imggbpr" => Ok(Strategy::ImgGbpr),
            other => Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityConfig {
    pub capacity_factor: f64,
    pub num_ffns: usize,
    /// Fraction `w_r` of the reject pool offered to the other FFN.
    pub redistribution_fraction: f64,
    /// When false, rejects are dropped under every strategy.
    pub redistribution: bool,
    /// Also redistribute Random and GBPR rejects; otherwise only Img-GBPR
    /// rejects are offered to the other FFN.
    pub redistribute_all: bool,
    pub seed: u64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig {
            capacity_factor: 1.5,
            num_ffns: 2,
            redistribution_fraction: 1.0,
            redistribution: true,
            redistribute_all: false,
            seed: 0,
        }
    }
}

impl CapacityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::config("capacity_factor", "must be a positive finite number"));
        }
        if self.num_ffns != 2 {
            return Err(Error::config("num_ffns", "an EVF layer has exactly two FFNs"));
        }
        if !(0.0..=1.0).contains(&self.redistribution_fraction) {
            return Err(Error::config("redistribution_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Whether rejects of `strategy` are offered to the other FFN.
    pub fn redistributes(&self, strategy: Strategy) -> bool {
        self.redistribution && (strategy == Strategy::ImgGbpr || self.redistribute_all)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CapacityConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Per-FFN capacity `ceil(capacity_factor * n / num_ffns)`.
pub fn compute_capacity(n: usize, cfg: &CapacityConfig) -> Result<usize> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let c = (cfg.capacity_factor * n as f64 / cfg.num_ffns as f64).ceil() as usize;
    Ok(c.max(1))
}

/// A value per FFN.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerFfn<T> {
    pub language: T,
    pub vision: T,
}

impl<T> Index<Ffn> for PerFfn<T> {
    type Output = T;
    fn index(&self, ffn: Ffn) -> &T {
        match ffn {
            Ffn::Language => &self.language,
            Ffn::Vision => &self.vision,
        }
    }
}

impl<T> IndexMut<Ffn> for PerFfn<T> {
    fn index_mut(&mut self, ffn: Ffn) -> &mut T {
        match ffn {
            Ffn::Language => &mut self.language,
            Ffn::Vision => &mut self.vision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorityScores {
    pub strategy: Strategy,
    /// `[n, 2]`, columns `(language, vision)`.
    pub scores: Tensor,
}

impl PriorityScores {
    pub fn score(&self, token: usize, ffn: Ffn) -> f64 {
        self.scores.get(token, ffn.index())
    }
}

/// Routing probability plus, for Img-GBPR, the modality prior.
///
/// Random allocation never reads the scores; it gets the bare probabilities.
pub fn priority_scores(
    decision: &RoutingDecision,
    tags: &ModalityTags,
    strategy: Strategy,
) -> Result<PriorityScores> {
    if tags.len() != decision.len() {
        return Err(Error::contract(format!(
            "{} modality tags for {} routed tokens",
            tags.len(),
            decision.len()
        )));
    }
    let mut scores = decision.probabilities.clone();
    if strategy == Strategy::ImgGbpr {
        for (i, m) in tags.as_slice().iter().enumerate() {
            let prior = match m {
                Modality::Image => IMAGE_PRIOR,
                Modality::Text => TEXT_PRIOR,
            };
            for (c, p) in prior.iter().enumerate() {
                let v = scores.get(i, c) + p;
                scores.set(i, c, v);
            }
        }
    }
    Ok(PriorityScores { strategy, scores })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redistribution {
    pub token: usize,
    pub from: Ffn,
    pub to: Ffn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub strategy: Strategy,
    pub capacity: usize,
    pub num_tokens: usize,
    /// Accepted token indices per FFN, ascending.
    pub accepted: PerFfn<Vec<usize>>,
    /// Tokens processed by neither FFN, ascending.
    pub dropped: Vec<usize>,
    /// Img-GBPR rejects waiting for [`redistribute`]; empty in final plans.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<usize>,
    /// Rejected tokens moved to the other FFN, ascending by token.
    pub redistributed: Vec<Redistribution>,
    pub loads: PerFfn<usize>,
    /// FFN that processes each token, `None` when dropped or pending.
    pub assignment: Vec<Option<Ffn>>,
}

impl AllocationPlan {
    pub fn assigned(&self, token: usize) -> Option<Ffn> {
        self.assignment[token]
    }

    pub fn accepted_count(&self) -> usize {
        self.loads.language + self.loads.vision
    }

    fn rebuild_bookkeeping(&mut self) {
        for ffn in Ffn::BOTH {
            self.accepted[ffn].sort_unstable();
        }
        self.dropped.sort_unstable();
        self.pending.sort_unstable();
        self.redistributed.sort_by_key(|r| r.token);
        self.loads = PerFfn {
            language: self.accepted.language.len(),
            vision: self.accepted.vision.len(),
        };
        self.assignment = vec![None; self.num_tokens];
        for ffn in Ffn::BOTH {
            for &t in &self.accepted[ffn] {
                self.assignment[t] = Some(ffn);
            }
        }
    }

    /// Moves any pending rejects to the dropped list.
    pub fn finalize(mut self) -> Self {
        let pending = std::mem::take(&mut self.pending);
        self.dropped.extend(pending);
        self.rebuild_bookkeeping();
        self
    }

    /// Checks capacity, partition and redistribution invariants.
    pub fn validate(&self, decision: &RoutingDecision) -> Result<()> {
        let mut seen = vec![0u8; self.num_tokens];
        for ffn in Ffn::BOTH {
            if self.accepted[ffn].len() > self.capacity {
                return Err(Error::contract(format!(
                    "{ffn:?} FFN accepted {} tokens over capacity {}",
                    self.accepted[ffn].len(),
                    self.capacity
                )));
            }
            for &t in &self.accepted[ffn] {
                seen[t] += 1;
            }
        }
        for &t in self.dropped.iter().chain(&self.pending) {
            seen[t] += 1;
        }
        if let Some(t) = seen.iter().position(|&c| c != 1) {
            return Err(Error::contract(format!(
                "token {t} appears {} times across buckets",
                seen[t]
            )));
        }
        for r in &self.redistributed {
            if decision.preferred[r.token] != r.from
                || r.to != r.from.other()
                || self.assignment[r.token] != Some(r.to)
            {
                return Err(Error::contract(format!("bad redistribution record {r:?}")));
            }
        }
        Ok(())
    }
}

/// Picks `k` of `items` with a partial Fisher-Yates shuffle; returns
/// `(chosen, rest)` in shuffled order.
fn partial_shuffle_split(items: &[usize], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut arr = items.to_vec();
    let len = arr.len();
    for i in 0..k.min(len) {
        let j = rng.random_range(i..len);
        arr.swap(i, j);
    }
    let rest = arr.split_off(k.min(len));
    (arr, rest)
}

/// Sorts tokens by descending score in `ffn`'s column, ties to lower index.
fn by_priority(tokens: &mut [usize], scores: &PriorityScores, ffn: Ffn) {
    tokens.sort_by(|&a, &b| {
        scores
            .score(b, ffn)
            .total_cmp(&scores.score(a, ffn))
            .then(a.cmp(&b))
    });
}

thread_local! {
    static PLANS_BUILT: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`AllocationPlan`]s produced by [`allocate`] on this thread.
pub fn allocation_plans_built() -> usize {
    PLANS_BUILT.with(Cell::get)
}

/// Groups tokens by preferred FFN and applies the capacity cut.
pub fn allocate(
    decision: &RoutingDecision,
    scores: &PriorityScores,
    tags: &ModalityTags,
    cfg: &CapacityConfig,
    strategy: Strategy,
) -> Result<AllocationPlan> {
    let n = decision.len();
    if tags.len() != n || scores.scores.rows() != n {
        return Err(Error::contract(format!(
            "allocation inputs disagree: {n} decisions, {} tags, {} score rows",
            tags.len(),
            scores.scores.rows()
        )));
    }
    if strategy != Strategy::Random && scores.strategy != strategy {
        return Err(Error::contract(format!(
            "{} scores passed to {strategy} allocation",
            scores.strategy
        )));
    }
    let capacity = compute_capacity(n, cfg)?;
    PLANS_BUILT.with(|c| c.set(c.get() + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SELECTION_STREAM]));

    let mut plan = AllocationPlan {
        strategy,
        capacity,
        num_tokens: n,
        accepted: PerFfn::default(),
        dropped: Vec::new(),
        pending: Vec::new(),
        redistributed: Vec::new(),
        loads: PerFfn::default(),
        assignment: Vec::new(),
    };

    for ffn in Ffn::BOTH {
        let candidates: Vec<usize> = (0..n).filter(|&t| decision.preferred[t] == ffn).collect();
        let (kept, rejected) = if candidates.len() <= capacity {
            (candidates, Vec::new())
        } else {
            match strategy {
                Strategy::Random => partial_shuffle_split(&candidates, capacity, &mut rng),
                Strategy::Gbpr | Strategy::ImgGbpr => {
                    let mut ranked = candidates;
                    by_priority(&mut ranked, scores, ffn);
                    let rejected = ranked.split_off(capacity);
                    (ranked, rejected)
                }
            }
        };
        plan.accepted[ffn] = kept;
        if cfg.redistributes(strategy) {
            plan.pending.extend(rejected);
        } else {
            plan.dropped.extend(rejected);
        }
    }
    plan.rebuild_bookkeeping();
    Ok(plan)
}

/// Offers a seeded fraction of the pending rejects to the other FFN. The
/// receiving FFN takes offers by score, or in shuffled order under Random.
pub fn redistribute(
    plan: AllocationPlan,
    decision: &RoutingDecision,
    scores: &PriorityScores,
    cfg: &CapacityConfig,
) -> Result<AllocationPlan> {
    if plan.strategy != Strategy::Random && scores.strategy != plan.strategy {
        return Err(Error::contract(format!(
            "{} scores passed to {} redistribution",
            scores.strategy, plan.strategy
        )));
    }
    cfg.validate()?;
    let mut plan = plan;
    let pool = std::mem::take(&mut plan.pending);
    let offer_count = (cfg.redistribution_fraction * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[REDISTRIBUTION_STREAM]));
    let (offered, not_offered) = partial_shuffle_split(&pool, offer_count, &mut rng);
    plan.dropped.extend(not_offered);

    for to in Ffn::BOTH {
        let from = to.other();
        let mut offers: Vec<usize> = offered
            .iter()
            .copied()
            .filter(|&t| decision.preferred[t] == from)
            .collect();
        if plan.strategy != Strategy::Random {
            by_priority(&mut offers, scores, to);
        }
        let room = plan.capacity.saturating_sub(plan.accepted[to].len());
        let overflow = offers.split_off(room.min(offers.len()));
        for &token in &offers {
            plan.accepted[to].push(token);
            plan.redistributed.push(Redistribution { token, from, to });
        }
        plan.dropped.extend(overflow);
    }
    plan.rebuild_bookkeeping();
    Ok(plan)
}

/// Scores, allocates and redistributes where `cfg` asks for it.
pub fn plan_allocation(
    decision: &RoutingDecision,
    tags: &ModalityTags,
    cfg: &CapacityConfig,
    strategy: Strategy,
) -> Result<(PriorityScores, AllocationPlan)> {
    let scores = priority_scores(decision, tags, strategy)?;
    let mut plan = allocate(decision, &scores, tags, cfg, strategy)?;
    if cfg.redistributes(strategy) {
        plan = redistribute(plan, decision, &scores, cfg)?;
    }
    Ok((scores, plan.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAcceptance {
    pub total: usize,
    pub accepted: usize,
}

impl ModalityAcceptance {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.accepted as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub num_tokens: usize,
    pub success_rate: f64,
    pub drop_rate: f64,
    pub loads: PerFfn<usize>,
    pub image: ModalityAcceptance,
    pub text: ModalityAcceptance,
}

pub fn allocation_stats(plan: &AllocationPlan, tags: &ModalityTags) -> AllocationStats {
    let accepted = plan.accepted_count();
    let success_rate = accepted as f64 / plan.num_tokens as f64;
    let mut image = ModalityAcceptance { total: 0, accepted: 0 };
    let mut text = ModalityAcceptance { total: 0, accepted: 0 };
    for (t, m) in tags.as_slice().iter().enumerate() {
        let bucket = match m {
            Modality::Image => &mut image,
            Modality::Text => &mut text,
        };
        bucket.total += 1;
        if plan.assignment[t].is_some() {
            bucket.accepted += 1;
        }
    }
    AllocationStats {
        num_tokens: plan.num_tokens,
        success_rate,
        drop_rate: 1.0 - success_rate,
        loads: plan.loads.clone(),
        image,
        text,
    }
}
