// SPDX-License-Identifier: Apache-2.0

//! The EVF sub-layer: route, score, allocate, run both FFNs on their
//! accepted tokens, scale by the routing probability, scatter back.
//!
//! Dropped tokens get a zero row; the surrounding residual connection
//! carries them through unchanged. The allocation itself is a discrete
//! decision and passes no gradient; the router learns through the gate.

use serde::{Deserialize, Serialize};

use crate::allocator::{
    allocation_stats, plan_allocation, AllocationPlan, AllocationStats, CapacityConfig,
    ModalityTags, PriorityScores, Strategy,
};
use crate::error::{Error, Result};
use crate::ffn::{ffn_forward, FfnParams};
use crate::graph::{Graph, Var};
use crate::param::{ParamGroup, ParamStore};
use crate::router::{route, Ffn, RoutedVars, RouterParams, RoutingDecision};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvfLayerParams {
    pub router: RouterParams,
    pub language_ffn: FfnParams,
    pub vision_ffn: FfnParams,
    pub cfg: CapacityConfig,
    pub strategy: Strategy,
}

impl EvfLayerParams {
    /// Splits a dense FFN into an EVF layer. The dense tensors stay in place
    /// as the frozen language FFN; the vision FFN is a bit-exact copy and the
    /// router starts at zero, so every token first routes at `(0.5, 0.5)`.
    pub fn init_stage3_from_dense(
        store: &mut ParamStore,
        dense: &FfnParams,
        prefix: &str,
        cfg: CapacityConfig,
        strategy: Strategy,
    ) -> Self {
        let width = dense.width(store);
        dense.set_trainable(store, false);
        let vision_ffn =
            dense.duplicate(store, &format!("{prefix}.vision_ffn"), ParamGroup::VisionFfn, true);
        let router = RouterParams::zeros(store, &format!("{prefix}.router"), width, true);
        EvfLayerParams {
            router,
            language_ffn: *dense,
            vision_ffn,
            cfg,
            strategy,
        }
    }

    pub fn ffn(&self, which: Ffn) -> &FfnParams {
        match which {
            Ffn::Language => &self.language_ffn,
            Ffn::Vision => &self.vision_ffn,
        }
    }

    /// Multimodal forward on plain tensors.
    pub fn forward_multimodal_tensor(
        &self,
        store: &ParamStore,
        tokens: &Tensor,
        tags: &ModalityTags,
        seed: u64,
    ) -> Result<(Tensor, RoutingDecision, AllocationPlan)> {
        let mut g = Graph::new();
        let x = g.input(tokens.clone());
        let out = forward_multimodal(&mut g, store, self, x, tags, seed)?;
        Ok((g.value(out.output).clone(), out.decision, out.plan))
    }

    /// Language-only forward on plain tensors.
    pub fn forward_language_only_tensor(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(tokens.clone());
        let out = forward_language_only(&mut g, store, self, x)?;
        Ok(g.value(out).clone())
    }
}

/// Everything a multimodal EVF forward produces.
#[derive(Clone, Debug)]
pub struct EvfForward {
    pub output: Var,
    pub routed: RoutedVars,
    pub decision: RoutingDecision,
    pub scores: PriorityScores,
    pub plan: AllocationPlan,
}

/// Full routing path. `seed` replaces `layer.cfg.seed` for this call.
pub fn forward_multimodal(
    g: &mut Graph,
    store: &ParamStore,
    layer: &EvfLayerParams,
    tokens: Var,
    tags: &ModalityTags,
    seed: u64,
) -> Result<EvfForward> {
    let n = g.value(tokens).rows();
    if tags.len() != n {
        return Err(Error::contract(format!("{} modality tags for {n} tokens", tags.len())));
    }
    let (routed, decision) = route(g, store, &layer.router, tokens)?;
    let cfg = layer.cfg.with_seed(seed);
    let (scores, plan) = plan_allocation(&decision, tags, &cfg, layer.strategy)?;

    let mut parts = Vec::with_capacity(2);
    for which in Ffn::BOTH {
        let idx = &plan.accepted[which];
        if idx.is_empty() {
            continue;
        }
        let xs = g.gather_rows(tokens, idx)?;
        let ys = ffn_forward(g, store, layer.ffn(which), xs)?;
        let probs = g.gather_rows(routed.probabilities, idx)?;
        let gate = g.slice_cols(probs, which.index(), 1)?;
        let ys = g.scale_rows(ys, gate)?;
        parts.push(g.scatter_rows(ys, idx, n)?);
    }
    let output = match parts.as_slice() {
        [] => g.input(Tensor::zeros(g.value(tokens).shape())),
        [only] => *only,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!("two FFNs"),
    };
    Ok(EvfForward {
        output,
        routed,
        decision,
        scores,
        plan,
    })
}

/// Inference path for text-only inputs: the untouched language FFN, no
/// router, no gate, no capacity.
pub fn forward_language_only(
    g: &mut Graph,
    store: &ParamStore,
    layer: &EvfLayerParams,
    tokens: Var,
) -> Result<Var> {
    ffn_forward(g, store, &layer.language_ffn, tokens)
}

pub const HISTOGRAM_BINS: usize = 10;

/// Per-layer record written once per training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTelemetry {
    pub step: usize,
    pub layer: usize,
    pub strategy: Strategy,
    pub capacity: usize,
    #[serde(flatten)]
    pub stats: AllocationStats,
    /// Mean routing probability `(language, vision)`.
    pub mean_probabilities: [f64; 2],
    /// Counts of vision-column probabilities in ten equal bins over `[0, 1]`.
    pub vision_probability_histogram: Vec<usize>,
}

impl LayerTelemetry {
    pub fn new(
        step: usize,
        layer: usize,
        decision: &RoutingDecision,
        plan: &AllocationPlan,
        tags: &ModalityTags,
    ) -> Self {
        let n = decision.len().max(1) as f64;
        let mut hist = vec![0; HISTOGRAM_BINS];
        let mut mean = [0.0; 2];
        for t in 0..decision.len() {
            let pv = decision.probability(t, Ffn::Vision);
            mean[0] += decision.probability(t, Ffn::Language) / n;
            mean[1] += pv / n;
            let bin = ((pv * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            hist[bin] += 1;
        }
        LayerTelemetry {
            step,
            layer,
            strategy: plan.strategy,
            capacity: plan.capacity,
            stats: allocation_stats(plan, tags),
            mean_probabilities: mean,
            vision_probability_histogram: hist,
        }
    }
}
