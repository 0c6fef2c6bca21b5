// SPDX-License-Identifier: Apache-2.0

//! Two-layer feed-forward block: up-projection, GELU, down-projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamGroup, ParamId, ParamStore, Parameter};
use crate::tensor::Tensor;

/// Handles to the four tensors of one FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub down_weight: ParamId,
    pub down_bias: ParamId,
}

impl FfnParams {
    /// Gaussian weights scaled by fan-in, zero biases.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        width: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let up = Tensor::randn(&[width, hidden], 1.0 / (width as f64).sqrt(), rng);
        let down = Tensor::randn(&[hidden, width], 1.0 / (hidden as f64).sqrt(), rng);
        Self::from_tensors(
            store,
            prefix,
            group,
            trainable,
            [up, Tensor::zeros(&[hidden]), down, Tensor::zeros(&[width])],
        )
    }

    /// Registers explicit `[up_weight, up_bias, down_weight, down_bias]`.
    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        trainable: bool,
        [up_w, up_b, down_w, down_b]: [Tensor; 4],
    ) -> Self {
        let mut add = |name: &str, t: Tensor| {
            store.push(Parameter::new(format!("{prefix}.{name}"), group, t, trainable))
        };
        FfnParams {
            up_weight: add("up.weight", up_w),
            up_bias: add("up.bias", up_b),
            down_weight: add("down.weight", down_w),
            down_bias: add("down.bias", down_b),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.up_weight, self.up_bias, self.down_weight, self.down_bias]
    }

    /// Registers a bit-exact copy of this FFN under a new prefix and group.
    pub fn duplicate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        trainable: bool,
    ) -> Self {
        let tensors = self.ids().map(|id| store.value(id).clone());
        Self::from_tensors(store, prefix, group, trainable, tensors)
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.up_weight).rows()
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.up_weight).cols()
    }

    pub fn is_trainable(&self, store: &ParamStore) -> bool {
        self.ids().iter().all(|&id| store.get(id).trainable)
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.ids() {
            store.get_mut(id).trainable = trainable;
        }
    }

    pub fn bit_eq(&self, other: &FfnParams, store: &ParamStore) -> bool {
        self.ids()
            .iter()
            .zip(other.ids().iter())
            .all(|(&a, &b)| store.value(a).bit_eq(store.value(b)))
    }

    /// Evaluates the FFN on plain tensors without recording gradients.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = ffn_forward(&mut g, store, self, xv)?;
        Ok(g.value(out).clone())
    }
}

/// `gelu(x W_up + b_up) W_down + b_down` recorded on `g`.
pub fn ffn_forward(g: &mut Graph, store: &ParamStore, p: &FfnParams, x: Var) -> Result<Var> {
    let width = p.width(store);
    let xv = g.value(x);
    if xv.shape().len() != 2 || xv.cols() != width {
        return Err(Error::dim("ffn_forward", xv.shape(), &[xv.shape()[0], width]));
    }
    let up_w = g.param(store, p.up_weight);
    let up_b = g.param(store, p.up_bias);
    let down_w = g.param(store, p.down_weight);
    let down_b = g.param(store, p.down_bias);
    let h = g.matmul(x, up_w)?;
    let h = g.add_row_vector(h, up_b)?;
    let h = g.gelu(h);
    let y = g.matmul(h, down_w)?;
    g.add_row_vector(y, down_b)
}
