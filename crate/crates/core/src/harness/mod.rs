//! Task streams, the experiment driver, metrics and persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod tasks;

pub use checkpoint::{load_backbone, load_state, save_backbone, save_state};
pub use config::{DataSource, ExperimentConfig, Mode};
pub use experiment::{
    ablate_routing, avg_task_accuracy, prepare, pretrain_backbone, run_continual, run_modes, task_data, ContinualState,
    Footprint, MetricsLog, Prepared, RoutingMode,
};
