//! Dual-view multi-modal attention fusion of mammogram feature pyramids and
//! BI-RADS lesion descriptors, together with the autodiff tensors and the
//! training loop it runs on.

pub mod attention;
pub mod backbone;
pub mod birads;
pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod data;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{ViewSource, WiringConfig};
pub use birads::{DescriptorCategory, DescriptorVector, DescriptorVocabulary, LesionDescriptorSet};
pub use config::ConfigMap;
pub use cv::{run_cv, CvReport, CvSettings};
pub use data::{AugmentationPolicy, CaseRecord, Dataset, FoldPlan, SynthConfig};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{DualBranchModel, ModelConfig, SkipMode};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{LossTrace, TrainConfig};
