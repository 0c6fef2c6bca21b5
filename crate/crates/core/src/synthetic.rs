// SPDX-License-Identifier: Apache-2.0

//! Routing instances drawn from a skewed router, standing in for a router
//! that training has pushed toward the vision FFN.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::allocator::{Modality, ModalityTags};
use crate::error::Result;
use crate::router::RoutingDecision;
use crate::tensor::Tensor;

/// Spread of the per-token vision-minus-language logit around its mean.
pub const LOGIT_SPREAD: f64 = 0.5;

/// `n` tokens whose vision-minus-language logit is
/// `ln(skew / (1 - skew)) + LOGIT_SPREAD * z`, `z ~ N(0, 1)`, so `skew` is
/// roughly the mean vision probability. Each token is an image token with
/// probability `image_fraction`.
pub fn skewed_instance<R: Rng + ?Sized>(
    n: usize,
    skew: f64,
    image_fraction: f64,
    rng: &mut R,
) -> Result<(RoutingDecision, ModalityTags)> {
    let centre = (skew / (1.0 - skew)).ln();
    let normal = Normal::new(centre, LOGIT_SPREAD).expect("finite spread");
    let mut logits = Vec::with_capacity(2 * n);
    let mut tags = Vec::with_capacity(n);
    for _ in 0..n {
        let diff: f64 = normal.sample(rng);
        logits.extend_from_slice(&[0.0, diff]);
        tags.push(if rng.random_bool(image_fraction) {
            Modality::Image
        } else {
            Modality::Text
        });
    }
    let decision = RoutingDecision::from_logits(Tensor::new(vec![n, 2], logits)?)?;
    Ok((decision, ModalityTags::new(tags)))
}
