// SPDX-License-Identifier: Apache-2.0

//! Token fixtures for `allocate-trace`: one token per line,
//! `image|text p_lang p_vis`. Blank lines and `#` comments are skipped.

use evf_core::{Modality, ModalityTags, RoutingDecision, Tensor};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub tags: ModalityTags,
    pub probabilities: Vec<[f64; 2]>,
}

impl Fixture {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut tags = Vec::new();
        let mut probabilities = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: String| CliError::Validation(format!("fixture line {}: {why}", i + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [modality, pl, pv] = fields[..] else {
                return Err(bad(format!("expected `image|text p_lang p_vis`, got `{line}`")));
            };
            let tag = match modality {
                "image" => Modality::Image,
                "text" => Modality::Text,
                other => return Err(bad(format!("unknown modality `{other}`"))),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
            let p = [num(pl)?, num(pv)?];
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(bad(format!("probabilities {p:?} do not form a distribution")));
            }
            tags.push(tag);
            probabilities.push(p);
        }
        if probabilities.is_empty() {
            return Err(CliError::Validation("fixture has no tokens".into()));
        }
        Ok(Fixture {
            tags: ModalityTags::new(tags),
            probabilities,
        })
    }

    pub fn decision(&self) -> CliResult<RoutingDecision> {
        let rows: Vec<Vec<f64>> = self.probabilities.iter().map(|p| p.to_vec()).collect();
        Ok(RoutingDecision::from_probabilities(Tensor::from_rows(&rows)?)?)
    }
}
