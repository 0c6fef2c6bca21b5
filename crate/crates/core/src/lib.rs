// SPDX-License-Identifier: Apache-2.0

//! Elastic vision FFN (EVF) layers for multimodal transformers.
//!
//! An EVF layer holds a frozen language FFN, a trainable vision FFN and a
//! two-way router. Tokens are routed, ranked and allocated to the FFNs under
//! a per-FFN capacity; in language-only mode the layer is exactly the
//! original dense FFN.

pub mod allocator;
pub mod checkpoint;
pub mod error;
pub mod evf_layer;
pub mod ffn;
pub mod gradcheck;
pub mod graph;
pub mod micro_model;
pub mod param;
pub mod router;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use allocator::{
    allocate, allocation_stats, compute_capacity, plan_allocation, priority_scores, redistribute,
    AllocationPlan, AllocationStats, CapacityConfig, Modality, ModalityTags, PriorityScores,
    Strategy,
};
pub use error::{Error, Result};

pub use ffn::{ffn_forward, FfnParams};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use router::{route, route_tensor, Ffn, RouterParams, RoutingDecision};
pub use tensor::Tensor;
pub use evf_layer::{EvfLayerParams, LayerTelemetry};
pub use micro_model::{MicroModel, Mode, ModelConfig, Stage, SyntheticTask, TaskConfig, TokenBatch};
pub use training::{train, GradCheckOptions, GradCheckReport, TrainConfig};
