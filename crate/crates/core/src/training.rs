// SPDX-License-Identifier: Apache-2.0

//! Losses, AdamW, the training loop and the finite-difference audit.
//!
//! The total loss is `L_regressive + alpha * L_aux`, where per EVF layer
//! `L_aux = F_i G_i + F_t G_t`: `F` is the fraction of the batch each FFN
//! actually processed and `G` the mean routing probability of that FFN.
//! Per-layer terms are averaged over EVF layers. `F` is a count and carries
//! no gradient; `G` does.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::AllocationPlan;
use crate::error::{Error, Result};
use crate::evf_layer::LayerTelemetry;
use crate::gradcheck::relative_error;
use crate::graph::{log_sum_exp, Var};
use crate::micro_model::{EvfTrace, ForwardPass, MicroModel, Mode, SyntheticTask, TokenBatch};
use crate::param::{ParamId, ParamStore};
use crate::router::{Ffn, RoutingDecision};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.001;

/// Load statistics of one EVF layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    /// Fraction of tokens processed by the vision FFN.
    pub f_i: f64,
    /// Fraction of tokens processed by the language FFN.
    pub f_t: f64,
    /// Mean vision routing probability.
    pub g_i: f64,
    /// Mean language routing probability.
    pub g_t: f64,
    pub aux: f64,
    pub drop_rate: f64,
}

impl LayerLoad {
    pub fn from_plan(layer: usize, plan: &AllocationPlan, decision: &RoutingDecision) -> Self {
        let n = plan.num_tokens as f64;
        let f_i = plan.accepted.vision.len() as f64 / n;
        let f_t = plan.accepted.language.len() as f64 / n;
        let mut g = [0.0; 2];
        for t in 0..decision.len() {
            for ffn in Ffn::BOTH {
                g[ffn.index()] += decision.probability(t, ffn);
            }
        }
        let (g_t, g_i) = (g[0] / n, g[1] / n);
        LayerLoad {
            layer,
            f_i,
            f_t,
            g_i,
            g_t,
            aux: f_i * g_i + f_t * g_t,
            drop_rate: plan.dropped.len() as f64 / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regressive: f64,
    pub aux: f64,
    pub alpha: f64,
    pub total: f64,
    pub layers: Vec<LayerLoad>,
}

/// Mean auxiliary loss over EVF layers, with the per-layer statistics.
pub fn aux_loss(plans: &[&AllocationPlan], decisions: &[&RoutingDecision]) -> Result<(f64, Vec<LayerLoad>)> {
    if plans.is_empty() {
        return Err(Error::contract("auxiliary loss needs at least one EVF layer"));
    }
    if plans.len() != decisions.len() {
        return Err(Error::contract(format!(
            "{} plans for {} routing decisions",
            plans.len(),
            decisions.len()
        )));
    }
    let loads: Vec<LayerLoad> = plans
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(i, (p, d))| LayerLoad::from_plan(i, p, d))
        .collect();
    let mean = loads.iter().map(|l| l.aux).sum::<f64>() / loads.len() as f64;
    Ok((mean, loads))
}

pub fn total_loss(regressive: f64, aux: f64, alpha: f64) -> Result<LossBreakdown> {
    for (name, v) in [("regressive loss", regressive), ("aux loss", aux), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
    }
    Ok(LossBreakdown {
        regressive,
        aux,
        alpha,
        total: regressive + alpha * aux,
        layers: Vec::new(),
    })
}

/// Mean next-token cross-entropy of `targets` under `logits` (`[n, V]`).
pub fn regressive_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.expect_matrix("regressive_loss")?;
    if targets.len() != n {
        return Err(Error::dim("regressive_loss", logits.shape(), &[targets.len()]));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::contract(format!("target {t} outside vocabulary {v}")));
        }
        total += log_sum_exp(logits.row(i)) - logits.get(i, t);
    }
    Ok(total / n as f64)
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub regressive: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// Records `L_total` on the forward pass graph.
pub fn record_loss(pass: &mut ForwardPass, batch: &TokenBatch, alpha: f64) -> Result<(LossVars, LossBreakdown)> {
    let (rows, targets) = batch.next_token_targets();
    let g = &mut pass.graph;
    let picked = g.gather_rows(pass.logits, &rows)?;
    let regressive = g.cross_entropy(picked, &targets)?;

    let mut layers = Vec::new();
    let aux = if pass.evf.is_empty() {
        None
    } else {
        let mut terms = Vec::with_capacity(pass.evf.len());
        for trace in &pass.evf {
            let load = LayerLoad::from_plan(trace.layer, &trace.plan, &trace.decision);
            let gmean = g.mean_rows(trace.probabilities)?;
            let f = g.input(Tensor::new(vec![1, 2], vec![load.f_t, load.f_i])?);
            let prod = g.mul(gmean, f)?;
            terms.push(g.sum(prod));
            layers.push(load);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Some(g.scale(acc, 1.0 / terms.len() as f64))
    };
    let total = match aux {
        Some(a) => {
            let weighted = g.scale(a, alpha);
            g.add(regressive, weighted)?
        }
        None => regressive,
    };
    let breakdown = LossBreakdown {
        regressive: g.value(regressive).item(),
        aux: aux.map_or(0.0, |a| g.value(a).item()),
        alpha,
        total: g.value(total).item(),
        layers,
    };
    Ok((
        LossVars {
            regressive,
            aux,
            total,
        },
        breakdown,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
        }
    }
}

impl OptimizerConfig {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }

    /// Linear warmup from zero, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup_steps(total_steps);
        if step < warmup {
            return self.learning_rate * step as f64 / warmup as f64;
        }
        let span = total_steps.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// AdamW over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub total_steps: usize,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Self {
        AdamW {
            cfg,
            total_steps,
            state: HashMap::new(),
        }
    }

    /// Applies one update at schedule position `step`; returns the lr used.
    /// Frozen parameters are not read or written.
    pub fn step(&mut self, store: &mut ParamStore, step: usize) -> f64 {
        let lr = self.cfg.lr_at(step, self.total_steps);
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let n = p.value.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
    pub data_seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            alpha: DEFAULT_ALPHA,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            data_seed: 7,
            eval_batch_size: 16,
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub l_regressive: f64,
    pub l_aux: f64,
    pub l_total: f64,
    pub layers: Vec<LayerLoad>,
    pub drop_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: u8,
    pub steps: usize,
    /// `L_regressive` on the fixed evaluation batch before the first step.
    pub initial_eval: f64,
    /// `L_regressive` on the same batch after the last step.
    pub final_eval: f64,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

/// Multimodal `L_regressive` on `batch` without touching gradients.
pub fn evaluate(model: &MicroModel, batch: &TokenBatch) -> Result<f64> {
    let mut pass = model.forward(batch, Mode::Multimodal, u64::MAX)?;
    let (_, breakdown) = record_loss(&mut pass, batch, 0.0)?;
    Ok(breakdown.regressive)
}

/// Trains `model` in its current stage on freshly sampled batches. `sink`
/// receives every step's metrics and per-layer telemetry.
pub fn train(
    model: &mut MicroModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&StepMetrics, &[LayerTelemetry]) -> Result<()>,
) -> Result<TrainSummary> {
    let stage = model.stage;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data_seed, &[u64::MAX]));
    let eval_batch = task.sample(cfg.eval_batch_size, &mut eval_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data_seed, &[stage.number() as u64]));
    let frozen_digest_before = model.store.frozen_digest();
    let initial_eval = evaluate(model, &eval_batch)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), cfg.steps);

    for step in 0..cfg.steps {
        let batch = task.sample(cfg.batch_size, &mut rng);
        let mut pass = model.forward(&batch, Mode::Multimodal, step as u64)?;
        let (vars, breakdown) = record_loss(&mut pass, &batch, cfg.alpha)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss at step {step}")));
        }
        model.store.zero_grads();
        pass.graph.backward_into(vars.total, &mut model.store)?;
        let lr = opt.step(&mut model.store, step);
        let telemetry = pass.telemetry(step);
        let drop_rate = if breakdown.layers.is_empty() {
            0.0
        } else {
            breakdown.layers.iter().map(|l| l.drop_rate).sum::<f64>() / breakdown.layers.len() as f64
        };
        let metrics = StepMetrics {
            stage: stage.number(),
            step,
            lr,
            l_regressive: breakdown.regressive,
            l_aux: breakdown.aux,
            l_total: breakdown.total,
            layers: breakdown.layers,
            drop_rate,
        };
        sink(&metrics, &telemetry)?;
    }
    Ok(TrainSummary {
        stage: stage.number(),
        steps: cfg.steps,
        initial_eval,
        final_eval: evaluate(model, &eval_batch)?,
        frozen_digest_before,
        frozen_digest_after: model.store.frozen_digest(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub alpha: f64,
    /// Allocation seed step used for every evaluation.
    pub step: u64,
    /// Negative control: perturbs the analytic gradient before comparing.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: crate::gradcheck::DEFAULT_EPS,
            alpha: DEFAULT_ALPHA,
            step: 0,
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub alpha: f64,
    pub loss: f64,
    pub scalars_checked: usize,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

fn plans_match(a: &[EvfTrace], b: &[EvfTrace]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.plan == y.plan && x.decision.preferred == y.decision.preferred)
}

/// Central differences of `L_total` against the tape gradient for every
/// trainable scalar. Fails with [`Error::UnstableInstance`] if any
/// perturbation changes a routing preference or allocation plan.
pub fn grad_check(model: &MicroModel, batch: &TokenBatch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut pass = model.forward(batch, Mode::Multimodal, opts.step)?;
    let (vars, breakdown) = record_loss(&mut pass, batch, opts.alpha)?;
    let grads = pass.graph.backward(vars.total)?;
    let reference = pass.evf.clone();

    let eval = |m: &MicroModel| -> Result<f64> {
        let mut p = m.forward(batch, Mode::Multimodal, opts.step)?;
        if !plans_match(&p.evf, &reference) {
            return Err(Error::UnstableInstance(
                "a perturbation changed the token allocation".into(),
            ));
        }
        Ok(record_loss(&mut p, batch, opts.alpha)?.1.total)
    };

    let mut params = Vec::new();
    let mut scalars_checked = 0;
    let mut worst: f64 = 0.0;
    let mut corrupted = !opts.corrupt_gradient;
    for (id, p) in model.store.iter().filter(|(_, p)| p.trainable) {
        let var = pass.graph.param_var(id);
        let mut analytic = var
            .and_then(|v| grads.wrt(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        if !corrupted {
            analytic.data_mut()[0] += 1e-2 * (1.0 + analytic.data()[0].abs());
            corrupted = true;
        }
        let numeric: Vec<f64> = (0..p.value.numel())
            .into_par_iter()
            .map_init(
                || model.clone(),
                |m, i| -> Result<f64> {
                    let orig = m.store.value(id).data()[i];
                    m.store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
                    let plus = eval(m);
                    m.store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
                    let minus = eval(m);
                    m.store.get_mut(id).value.data_mut()[i] = orig;
                    Ok((plus? - minus?) / (2.0 * opts.eps))
                },
            )
            .collect::<Result<_>>()?;
        let max_rel_error = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        worst = worst.max(max_rel_error);
        scalars_checked += numeric.len();
        params.push(ParamCheck {
            name: p.name.clone(),
            scalars: numeric.len(),
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        alpha: opts.alpha,
        loss: breakdown.total,
        scalars_checked,
        max_rel_error: worst,
        params,
    })
}
