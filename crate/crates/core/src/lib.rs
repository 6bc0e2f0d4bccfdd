//! Time-aware selective-scan state-space model for irregularly sampled
//! longitudinal imaging.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and a reverse-mode tape.
//! - [`scan`]: gap-stretched ZOH selective scan over a flattened visit grid.
//! - [`fusion`]: softmax-mixed depthwise 3D neighborhood fusion.
//! - [`block`]: one scan + fusion block and the block stack.
//! - [`model`]: toy view encoder, view fusion, pooling to a patient embedding.
//! - [`hazard`]: additive hazard head and reweighted horizon cross-entropy.
//! - [`synth`]: synthetic longitudinal cohort and its on-disk format.
//! - [`metrics`]: Harrell's c-index and horizon AUC.
//! - [`profiler`]: analytic parameter/FLOP counts and measured throughput.
//! - [`train`]: configuration, optimizer, training and cross-validation.

pub mod block;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hazard;
pub mod metrics;
pub mod model;
pub mod profiler;
pub mod scan;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use block::{Block, BlockConfig, BlockStack, FusionMode, Grid};
pub use error::{Error, Result};
pub use fusion::{FusionParams, KernelSet};
pub use gradcheck::{check_model, grad_check, GradCheckReport, ModelCheckConfig};
pub use hazard::{ClassWeights, Outcome, RiskOutput};
pub use metrics::{auc_at, c_index, MetricsReport, ScoredOutcome};
pub use model::{ImageConfig, Model, ModelConfig, Prediction, Visit, VisitContent};
pub use synth::{CohortSpec, DatasetManifest, PatientRecord};
pub use scan::{ScanOrder, ScanParams, TokenSequence};
pub use tape::{GradTape, Gradients, ParamId, ParamStore, Var};
pub use tensor::Tensor;
pub use train::{Ablation, Checkpoint, TrainConfig, Trainer};
