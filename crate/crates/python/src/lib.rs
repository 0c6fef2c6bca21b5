// SPDX-License-Identifier: Apache-2.0

//! Python bindings: capacity, routing, allocation, losses and the micro
//! model with its synthetic task.
//!
//! ```python
//! import evf
//! plan = evf.allocate([[0.2, 0.8], [0.6, 0.4]], ["image", "text"], strategy="gbpr")
//! plan.vision, plan.dropped
//! ```

use std::path::PathBuf;

use evf_core::training::{self, TrainConfig};
use evf_core::{
    checkpoint, AllocationPlan, CapacityConfig, MicroModel, Modality, ModalityTags, Mode, ModelConfig,
    RoutingDecision, Stage, Strategy, SyntheticTask, TaskConfig, Tensor, TokenBatch,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: evf_core::Error) -> PyErr {
    use evf_core::Error as E;
    match e {
        E::Numeric(_) | E::UnstableInstance(_) => PyArithmeticError::new_err(e.to_string()),
        E::Io(_) | E::Checkpoint(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>, width: usize) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, width]));
    }
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn modality(s: &str) -> PyResult<Modality> {
    match s {
        "image" => Ok(Modality::Image),
        "text" => Ok(Modality::Text),
        other => Err(PyValueError::new_err(format!("unknown modality `{other}`"))),
    }
}

fn strategy(s: &str) -> PyResult<Strategy> {
    s.parse().map_err(to_py)
}

fn ffn_name(f: evf_core::Ffn) -> &'static str {
    match f {
        evf_core::Ffn::Language => "language",
        evf_core::Ffn::Vision => "vision",
    }
}

/// Per-FFN capacity `ceil(capacity_factor * n / 2)`.
#[pyfunction]
#[pyo3(signature = (n, capacity_factor=1.5))]
fn compute_capacity(n: usize, capacity_factor: f64) -> PyResult<usize> {
    let cfg = CapacityConfig {
        capacity_factor,
        ..Default::default()
    };
    evf_core::compute_capacity(n, &cfg).map_err(to_py)
}

/// Routing of `tokens` (`[n, d]`) through `weight` (`[d, 2]`).
#[pyclass(name = "Routing", frozen)]
struct PyRouting {
    inner: RoutingDecision,
}

#[pymethods]
impl PyRouting {
    #[getter]
    fn probabilities(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.probabilities)
    }

    #[getter]
    fn logits(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.logits)
    }

    /// `"language"` or `"vision"` per token; ties go to language.
    #[getter]
    fn preferred(&self) -> Vec<&'static str> {
        self.inner.preferred.iter().map(|&f| ffn_name(f)).collect()
    }
}

#[pyfunction]
fn route(weight: Vec<Vec<f64>>, tokens: Vec<Vec<f64>>) -> PyResult<PyRouting> {
    let w = matrix(weight, 2)?;
    let x = matrix(tokens, w.rows())?;
    let inner = evf_core::route_tensor(&w, &x).map_err(to_py)?;
    Ok(PyRouting { inner })
}

#[pyclass(name = "AllocationPlan", frozen)]
struct PyPlan {
    inner: AllocationPlan,
    decision: RoutingDecision,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity
    }

    #[getter]
    fn language(&self) -> Vec<usize> {
        self.inner.accepted.language.clone()
    }

    #[getter]
    fn vision(&self) -> Vec<usize> {
        self.inner.accepted.vision.clone()
    }

    #[getter]
    fn dropped(&self) -> Vec<usize> {
        self.inner.dropped.clone()
    }

    /// `(token, from, to)` for every redistributed token.
    #[getter]
    fn redistributed(&self) -> Vec<(usize, &'static str, &'static str)> {
        self.inner
            .redistributed
            .iter()
            .map(|r| (r.token, ffn_name(r.from), ffn_name(r.to)))
            .collect()
    }

    /// FFN that processes each token, `None` for dropped tokens.
    #[getter]
    fn assignment(&self) -> Vec<Option<&'static str>> {
        self.inner.assignment.iter().map(|a| a.map(ffn_name)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "AllocationPlan(strategy={}, capacity={}, language={}, vision={}, dropped={})",
            self.inner.strategy,
            self.inner.capacity,
            self.inner.loads.language,
            self.inner.loads.vision,
            self.inner.dropped.len()
        )
    }
}

/// Allocates tokens given their `(p_lang, p_vis)` rows and modalities.
#[pyfunction]
#[pyo3(signature = (
    probabilities, modalities, strategy="img_gbpr", capacity_factor=1.5,
    redistribution_fraction=1.0, redistribution=true, redistribute_all=false, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn allocate(
    probabilities: Vec<Vec<f64>>,
    modalities: Vec<String>,
    strategy: &str,
    capacity_factor: f64,
    redistribution_fraction: f64,
    redistribution: bool,
    redistribute_all: bool,
    seed: u64,
) -> PyResult<PyPlan> {
    let decision = RoutingDecision::from_probabilities(matrix(probabilities, 2)?).map_err(to_py)?;
    let tags = ModalityTags::new(modalities.iter().map(|m| modality(m)).collect::<PyResult<_>>()?);
    let cfg = CapacityConfig {
        capacity_factor,
        redistribution_fraction,
        redistribution,
        redistribute_all,
        seed,
        ..Default::default()
    };
    let (_, inner) = evf_core::plan_allocation(&decision, &tags, &cfg, self::strategy(strategy)?).map_err(to_py)?;
    Ok(PyPlan { inner, decision })
}

/// Mean over layers of `F_t * G_t + F_i * G_i`.
#[pyfunction]
fn aux_loss(plans: Vec<PyRef<'_, PyPlan>>) -> PyResult<f64> {
    let p: Vec<&AllocationPlan> = plans.iter().map(|p| &p.inner).collect();
    let d: Vec<&RoutingDecision> = plans.iter().map(|p| &p.decision).collect();
    Ok(training::aux_loss(&p, &d).map_err(to_py)?.0)
}

/// `regressive + alpha * aux`.
#[pyfunction]
#[pyo3(signature = (regressive, aux, alpha=training::DEFAULT_ALPHA))]
fn total_loss(regressive: f64, aux: f64, alpha: f64) -> PyResult<f64> {
    Ok(training::total_loss(regressive, aux, alpha).map_err(to_py)?.total)
}

/// Mean next-token cross-entropy of `targets` under `logits`.
#[pyfunction]
fn regressive_loss(logits: Vec<Vec<f64>>, targets: Vec<usize>) -> PyResult<f64> {
    let width = logits.first().map_or(0, Vec::len);
    training::regressive_loss(&matrix(logits, width)?, &targets).map_err(to_py)
}

/// Micro transformer with its synthetic multimodal task.
#[pyclass(name = "MicroModel")]
struct PyModel {
    model: MicroModel,
    task: SyntheticTask,
}

fn batch_from(text: Vec<Vec<usize>>, images: Option<Vec<Vec<Vec<f64>>>>, feature_width: usize) -> PyResult<TokenBatch> {
    let images = images
        .unwrap_or_default()
        .into_iter()
        .map(|m| matrix(m, feature_width))
        .collect::<PyResult<_>>()?;
    Ok(TokenBatch { text, images })
}

fn mode(s: &str) -> PyResult<Mode> {
    match s {
        "multimodal" => Ok(Mode::Multimodal),
        "language_only" => Ok(Mode::LanguageOnly),
        other => Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    }
}

#[pymethods]
impl PyModel {
    /// `config` and `task` are JSON objects; missing fields take defaults.
    #[new]
    #[pyo3(signature = (config=None, task=None))]
    fn new(config: Option<&str>, task: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config.unwrap_or("{}")).map_err(json_err)?;
        let task_cfg: TaskConfig = serde_json::from_str(task.unwrap_or("{}")).map_err(json_err)?;
        let task = SyntheticTask::new(&cfg, &task_cfg).map_err(to_py)?;
        Ok(PyModel {
            model: MicroModel::build(cfg).map_err(to_py)?,
            task,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, task=None))]
    fn load(path: PathBuf, task: Option<&str>) -> PyResult<Self> {
        let model = checkpoint::load(path).map_err(to_py)?;
        let task_cfg: TaskConfig = serde_json::from_str(task.unwrap_or("{}")).map_err(json_err)?;
        let task = SyntheticTask::new(&model.cfg, &task_cfg).map_err(to_py)?;
        Ok(PyModel { model, task })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.model, path).map_err(to_py)
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.model.stage.number()
    }

    fn set_stage(&mut self, stage: u8) -> PyResult<()> {
        let s = Stage::from_number(stage).map_err(to_py)?;
        self.model.set_stage(s).map_err(to_py)
    }

    fn set_strategy(&mut self, strategy: &str) -> PyResult<()> {
        self.model.set_strategy(self::strategy(strategy)?);
        Ok(())
    }

    /// SHA-256 over every frozen tensor.
    fn frozen_digest(&self) -> String {
        self.model.store.frozen_digest()
    }

    /// Logits `[tokens, vocab]` for the flattened batch.
    #[pyo3(signature = (text, images=None, mode="multimodal", step=0))]
    fn logits(
        &self,
        text: Vec<Vec<usize>>,
        images: Option<Vec<Vec<Vec<f64>>>>,
        mode: &str,
        step: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let batch = batch_from(text, images, self.model.cfg.image_feature_width)?;
        let t = self.model.logits(&batch, self::mode(mode)?, step).map_err(to_py)?;
        Ok(rows_of(&t))
    }

    /// Draws `(text, images)` from the synthetic task.
    #[pyo3(signature = (batch_size, seed=0))]
    fn sample(&self, batch_size: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>) {
        let b = self.task.sample(batch_size, &mut ChaCha8Rng::seed_from_u64(seed));
        (b.text, b.images.iter().map(rows_of).collect())
    }

    /// Trains in the current stage; returns the summary as JSON.
    #[pyo3(signature = (steps, learning_rate=None, seed=7))]
    fn train(&mut self, steps: usize, learning_rate: Option<f64>, seed: u64) -> PyResult<String> {
        let mut cfg = TrainConfig {
            steps,
            data_seed: seed,
            ..Default::default()
        };
        if let Some(lr) = learning_rate {
            cfg.optimizer.learning_rate = lr;
        }
        let summary = training::train(&mut self.model, &self.task, &cfg, |_, _| Ok(())).map_err(to_py)?;
        serde_json::to_string(&summary).map_err(json_err)
    }

    /// One optimizer-free loss evaluation on a sampled batch: `(regressive, aux, total)`.
    #[pyo3(signature = (batch_size=4, seed=0, alpha=training::DEFAULT_ALPHA))]
    fn loss(&self, batch_size: usize, seed: u64, alpha: f64) -> PyResult<(f64, f64, f64)> {
        let batch = self.task.sample(batch_size, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut pass = self.model.forward(&batch, Mode::Multimodal, 0).map_err(to_py)?;
        let (_, b) = training::record_loss(&mut pass, &batch, alpha).map_err(to_py)?;
        Ok((b.regressive, b.aux, b.total))
    }

    fn __repr__(&self) -> String {
        format!(
            "MicroModel(stage={}, depth={}, width={}, evf_layers={:?})",
            self.model.stage.number(),
            self.model.cfg.depth,
            self.model.cfg.width,
            self.model.evf_layers().map(|(i, _)| i).collect::<Vec<_>>()
        )
    }
}


#[pymodule]
fn evf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(aux_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(regressive_loss, m)?)?;
    m.add_class::<PyRouting>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyModel>()?;
    m.add("DEFAULT_ALPHA", training::DEFAULT_ALPHA)?;
    Ok(())
}
