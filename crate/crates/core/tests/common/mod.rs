use moacl::adapters::Capacity;
use moacl::backbone::FrozenWeights;
use moacl::harness::{
    prepare, pretrain_backbone, run_continual, task_data, ContinualState, ExperimentConfig, MetricsLog, Prepared,
};

/// Four classes in two tasks with one adapter slot, so the second task fuses.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        tasks: 2,
        classes: 4,
        capacity: Capacity::Finite(1),
        replay: 8,
        train_per_class: 20,
        test_per_class: 10,
        epochs_adapter: 2,
        epochs_ae: 2,
        epochs_distill: 2,
        pretext_classes: 3,
        pretext_per_class: 20,
        pretrain_epochs: 1,
        ..ExperimentConfig::default()
    }
}

pub fn tiny_run(cfg: &ExperimentConfig) -> (FrozenWeights, Prepared, MetricsLog, ContinualState) {
    let (frozen, _) = pretrain_backbone(cfg).unwrap();
    let data = task_data(cfg).unwrap();
    let p = prepare(cfg, &data, &frozen).unwrap();
    let (log, state) = run_continual(cfg, &frozen, &p).unwrap();
    (frozen, p, log, state)
}
