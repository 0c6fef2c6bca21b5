// SPDX-License-Identifier: Apache-2.0

//! Reporting for the acceptance suite in `tests/acceptance.rs`: every
//! criterion runs under a wall-clock budget and prints one line.

use std::fmt;
use std::time::{Duration, Instant};

/// Result of a criterion body: whether its checks held, plus a summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub id: &'static str,
    pub title: &'static str,
    pub outcome: Outcome,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.outcome.passed && self.elapsed <= self.budget
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{} {status} {}: {} [{:.1}s of {}s]",
            self.id,
            self.title,
            self.outcome.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )?;
        if self.outcome.passed && !self.passed() {
            write!(f, " (over budget)")?;
        }
        Ok(())
    }
}

/// Runs `body`, timing it. An `Err` from the body counts as a failure.
pub fn run(
    id: &'static str,
    title: &'static str,
    budget_secs: u64,
    body: impl FnOnce() -> Result<Outcome, String>,
) -> Verdict {
    let start = Instant::now();
    let outcome = body().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let verdict = Verdict {
        id,
        title,
        outcome,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_secs),
    };
    println!("{verdict}");
    verdict
}

/// Median of a non-empty sample.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}
