//! Contrastive pre-training, fine-tuning and distillation for information
//! cascade graphs.
//!
//! Modules build on each other bottom-up: [`graph`] and [`ingest`] hold the
//! data model, [`augment`] produces views, [`autodiff`] is the numeric
//! substrate for [`encoder`] and [`train`], and [`eval`] with [`config`]
//! wires complete experiments.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod seed;
pub mod train;

pub use augment::{aug_rwr, aug_sim, fit_global_rate, make_views, AugmentParams, Strategy};
pub use autodiff::{Adam, Graph, ParamSet, Tensor, Var};
pub use config::{ExperimentConfig, Phase, Task};
pub use encoder::{node_features, EncoderConfig, EncoderModel, HeadDesign, NodeFeatureSpec};
pub use eval::{run_experiment, MetricsReport, RunError};
pub use graph::{Adoption, CascadeGraph, GraphError, ObservationWindow};
pub use ingest::{CascadeDataset, DatasetConfig, LabeledCascade, Split};
pub use train::{distill, finetune, pretrain, EarlyStopping, MetricsSink};
