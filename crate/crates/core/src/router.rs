// SPDX-License-Identifier: Apache-2.0

//! Two-way linear router: logits `x W`, softmax-normalized per token.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamGroup, ParamId, ParamStore, Parameter};
use crate::tensor::Tensor;

/// The two FFNs of an EVF layer. The discriminant is the router column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ffn {
    Language = 0,
    Vision = 1,
}

impl Ffn {
    pub const BOTH: [Ffn; 2] = [Ffn::Language, Ffn::Vision];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Ffn {
        match self {
            Ffn::Language => Ffn::Vision,
            Ffn::Vision => Ffn::Language,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouterParams {
    /// `[d, 2]`; column 0 is the language logit, column 1 the vision logit.
    pub weight: ParamId,
}

impl RouterParams {
    pub fn zeros(store: &mut ParamStore, prefix: &str, width: usize, trainable: bool) -> Self {
        Self::from_tensor(store, prefix, Tensor::zeros(&[width, 2]), trainable)
    }

    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self::from_tensor(store, prefix, Tensor::randn(&[width, 2], std, rng), trainable)
    }

    pub fn from_tensor(store: &mut ParamStore, prefix: &str, weight: Tensor, trainable: bool) -> Self {
        assert_eq!(weight.shape().len(), 2);
        assert_eq!(weight.cols(), 2, "router weight must have two columns");
        let weight = store.push(Parameter::new(
            format!("{prefix}.weight"),
            ParamGroup::Router,
            weight,
            trainable,
        ));
        RouterParams { weight }
    }
}

/// Per-token routing logits, probabilities and preferred FFN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub preferred: Vec<Ffn>,
}

impl RoutingDecision {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let (_, k) = logits.expect_matrix("route")?;
        if k != 2 {
            return Err(Error::dim("route", logits.shape(), &[logits.rows(), 2]));
        }
        let probabilities = logits.softmax_rows(false)?;
        let preferred = preferred_ffns(&logits);
        Ok(RoutingDecision {
            logits,
            probabilities,
            preferred,
        })
    }

    /// Builds a decision from given probabilities; logits are set to their
    /// log so that softmax reproduces the input. Rows must sum to one.
    pub fn from_probabilities(probabilities: Tensor) -> Result<Self> {
        let (n, k) = probabilities.expect_matrix("route")?;
        if k != 2 {
            return Err(Error::dim("route", probabilities.shape(), &[n, 2]));
        }
        for i in 0..n {
            let row = probabilities.row(i);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "probability row {i} is not a distribution: {row:?}"
                )));
            }
        }
        let logits = probabilities.map(f64::ln);
        let preferred = preferred_ffns(&probabilities);
        Ok(RoutingDecision {
            logits,
            probabilities,
            preferred,
        })
    }

    pub fn len(&self) -> usize {
        self.preferred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preferred.is_empty()
    }

    pub fn probability(&self, token: usize, ffn: Ffn) -> f64 {
        self.probabilities.get(token, ffn.index())
    }
}

/// Row argmax of a two-column matrix; exact ties go to the language FFN.
fn preferred_ffns(m: &Tensor) -> Vec<Ffn> {
    (0..m.rows())
        .map(|i| {
            if m.get(i, 1) > m.get(i, 0) {
                Ffn::Vision
            } else {
                Ffn::Language
            }
        })
        .collect()
}

thread_local! {
    static DECISIONS_BUILT: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`RoutingDecision`]s produced by routing on this thread.
pub fn routing_decisions_built() -> usize {
    DECISIONS_BUILT.with(Cell::get)
}

fn count_decision() {
    DECISIONS_BUILT.with(|c| c.set(c.get() + 1));
}

/// Graph handles for a routed batch.
#[derive(Clone, Copy, Debug)]
pub struct RoutedVars {
    pub logits: Var,
    pub probabilities: Var,
}

/// Records routing on `g` and returns both the graph handles and the
/// materialized decision.
pub fn route(
    g: &mut Graph,
    store: &ParamStore,
    router: &RouterParams,
    tokens: Var,
) -> Result<(RoutedVars, RoutingDecision)> {
    let w = store.value(router.weight);
    let x = g.value(tokens);
    if x.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::dim("route", x.shape(), w.shape()));
    }
    count_decision();
    let wv = g.param(store, router.weight);
    let logits = g.matmul(tokens, wv)?;
    let probabilities = g.softmax_rows(logits)?;
    let decision = RoutingDecision {
        logits: g.value(logits).clone(),
        probabilities: g.value(probabilities).clone(),
        preferred: preferred_ffns(g.value(logits)),
    };
    Ok((
        RoutedVars {
            logits,
            probabilities,
        },
        decision,
    ))
}

/// Routing on plain tensors, outside any graph.
pub fn route_tensor(weight: &Tensor, tokens: &Tensor) -> Result<RoutingDecision> {
    if tokens.shape().len() != 2 || weight.shape().len() != 2 || tokens.cols() != weight.rows() {
        return Err(Error::dim("route", tokens.shape(), weight.shape()));
    }
    count_decision();
    RoutingDecision::from_logits(tokens.matmul(weight)?)
}
