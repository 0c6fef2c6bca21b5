// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks for graph-built functions.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences at `eps = 1e-5` on an O(1) loss carry about 1e-10
/// of round-off, which is 1e-4 relative at a gradient of 1e-6.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference derivative of a scalar function of one tensor.
pub fn numerical_gradient(
    x: &Tensor,
    eps: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// Compares the tape gradient of `build` (which must return a scalar) with
/// central differences for every input. Returns the max relative error.
pub fn check_gradients(
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.tracked_input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = numerical_gradient(input, eps, |probe| {
            let mut values = inputs.to_vec();
            values[k] = probe.clone();
            eval(&values)
        })?;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let e = relative_error(*a, *n);
            if !e.is_finite() {
                return Err(Error::Numeric(format!("gradient check of input {k}")));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
