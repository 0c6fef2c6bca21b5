// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evf_core::allocator::allocation_stats;
use evf_core::seed::derive_seed;
use evf_core::training::{grad_check, train, GradCheckOptions, GradCheckReport, TrainSummary};
use evf_core::{
    checkpoint, plan_allocation, AllocationPlan, AllocationStats, CapacityConfig, Error, MicroModel, Stage,
    Strategy, SyntheticTask, TaskConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{write_json, RunConfig};
use crate::error::{CliError, CliResult};
use crate::fixture::Fixture;
use crate::report;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub instance: usize,
    /// Samples drawn before a stable one was found, including it.
    pub tries: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub stage: Stage,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub instances: Vec<InstanceCheck>,
}

fn final_stage(cfg: &RunConfig) -> Stage {
    cfg.stages.last().copied().unwrap_or(Stage::Three)
}

/// Samples a model and batch whose allocation survives every
/// perturbation, up to `max_tries` times.
fn check_instance(cfg: &RunConfig, instance: usize) -> CliResult<InstanceCheck> {
    let g = &cfg.grad_check;
    let task_cfg = TaskConfig {
        image_tokens: g.image_tokens,
        text_len: g.text_len,
        ..cfg.task.clone()
    };
    let task = SyntheticTask::new(&cfg.model, &task_cfg)?;
    let opts = GradCheckOptions {
        eps: g.eps,
        alpha: g.alpha,
        step: 0,
        corrupt_gradient: g.corrupt_gradient,
    };
    let mut base = MicroModel::build(cfg.model.clone())?;
    base.set_stage(final_stage(cfg))?;
    if g.freeze_all {
        base.store.freeze_all();
    }
    for attempt in 0..g.max_tries {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[instance as u64, attempt as u64]));
        let mut model = base.clone();
        model.jitter_trainable(g.jitter, &mut rng);
        let batch = task.sample(g.batch_size, &mut rng);
        match grad_check(&model, &batch, &GradCheckOptions { step: attempt as u64, ..opts.clone() }) {
            Ok(report) => {
                return Ok(InstanceCheck {
                    instance,
                    tries: attempt + 1,
                    report,
                })
            }
            Err(Error::UnstableInstance(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CliError::Numeric(format!(
        "instance {instance}: no stable sample in {} tries",
        g.max_tries
    )))
}

/// Runs the configured number of gradient checks and writes
/// `grad_check.json`. Fails with a numeric error when any instance is at or
/// above the tolerance.
pub fn cmd_grad_check(cfg: &RunConfig) -> CliResult<GradCheckSummary> {
    let dir = cfg.prepare_output()?;
    let instances = (0..cfg.grad_check.instances)
        .map(|i| check_instance(cfg, i))
        .collect::<CliResult<Vec<_>>>()?;
    let max_rel_error = instances.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let summary = GradCheckSummary {
        stage: final_stage(cfg),
        tolerance: cfg.grad_check.tolerance,
        max_rel_error,
        passed: max_rel_error < cfg.grad_check.tolerance,
        instances,
    };
    write_json(&dir.join("grad_check.json"), &summary)?;
    if !summary.passed {
        return Err(CliError::Numeric(format!(
            "max relative error {max_rel_error:.3e} is not below {:.1e}",
            summary.tolerance
        )));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub strategy: Strategy,
    /// Whether this strategy's rejects were offered to the other FFN.
    pub redistributes: bool,
    pub plan: AllocationPlan,
    pub stats: AllocationStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationTrace {
    pub num_tokens: usize,
    pub capacity: usize,
    pub config: CapacityConfig,
    pub strategies: Vec<StrategyTrace>,
    /// The same fixture with `redistribute_all` flipped.
    pub other_configuration: Vec<StrategyTrace>,
}

fn strategy_traces(fixture: &Fixture, capacity: &CapacityConfig) -> CliResult<Vec<StrategyTrace>> {
    let decision = fixture.decision()?;
    let mut traces = Vec::new();
    for strategy in Strategy::ALL {
        let (_, plan) = plan_allocation(&decision, &fixture.tags, capacity, strategy)?;
        plan.validate(&decision)?;
        let stats = allocation_stats(&plan, &fixture.tags);
        traces.push(StrategyTrace {
            strategy,
            redistributes: capacity.redistributes(strategy),
            plan,
            stats,
        });
    }
    Ok(traces)
}

/// Plans for every strategy on one fixture, under `capacity` and under
/// `capacity` with `redistribute_all` flipped.
pub fn allocation_trace(fixture: &Fixture, capacity: &CapacityConfig) -> CliResult<AllocationTrace> {
    let strategies = strategy_traces(fixture, capacity)?;
    let flipped = CapacityConfig {
        redistribute_all: !capacity.redistribute_all,
        ..capacity.clone()
    };
    Ok(AllocationTrace {
        num_tokens: fixture.tags.len(),
        capacity: strategies[0].plan.capacity,
        config: capacity.clone(),
        other_configuration: strategy_traces(fixture, &flipped)?,
        strategies,
    })
}

/// Reads a fixture, writes `allocate_trace.json`, returns the trace.
pub fn cmd_allocate_trace(cfg: &RunConfig, input: &Path) -> CliResult<AllocationTrace> {
    let text = fs::read_to_string(input).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let fixture = Fixture::parse(&text)?;
    let trace = allocation_trace(&fixture, &cfg.model.capacity)?;
    let dir = cfg.prepare_output()?;
    write_json(&dir.join("allocate_trace.json"), &trace)?;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub output_dir: PathBuf,
    pub stages: Vec<TrainSummary>,
    pub checkpoints: Vec<PathBuf>,
}

fn jsonl_line(w: &mut impl Write, value: &impl Serialize) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains through `cfg.stages`, writing `metrics.jsonl`, `telemetry.jsonl`,
/// one checkpoint per stage and `summary.json`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainRun> {
    let dir = cfg.prepare_output()?;
    let task = SyntheticTask::new(&cfg.model, &cfg.task)?;
    let mut model = MicroModel::build(cfg.model.clone())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut telemetry = BufWriter::new(File::create(dir.join("telemetry.jsonl"))?);
    let mut stages = Vec::new();
    let mut checkpoints = Vec::new();
    for &stage in &cfg.stages {
        model.set_stage(stage)?;
        let summary = train(&mut model, &task, &cfg.train, |m, t| {
            jsonl_line(&mut metrics, m).map_err(|e| Error::Numeric(e.to_string()))?;
            for rec in t {
                jsonl_line(&mut telemetry, rec).map_err(|e| Error::Numeric(e.to_string()))?;
            }
            Ok(())
        })?;
        let path = dir.join(format!("stage{}.ckpt", stage.number()));
        checkpoint::save(&model, &path)?;
        checkpoints.push(path);
        stages.push(summary);
    }
    metrics.flush()?;
    telemetry.flush()?;
    let run = TrainRun {
        output_dir: dir.clone(),
        stages,
        checkpoints,
    };
    write_json(&dir.join("summary.json"), &run)?;
    Ok(run)
}

/// Aggregates telemetry files into the per-layer success table.
pub fn cmd_telemetry_report(files: &[PathBuf]) -> CliResult<String> {
    if files.is_empty() {
        return Err(CliError::Validation("telemetry report needs at least one file".into()));
    }
    let records = report::read_telemetry(files)?;
    Ok(report::render_csv(&report::aggregate(&records)?))
}
