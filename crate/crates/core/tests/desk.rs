use std::sync::OnceLock;

use moacl::adapters::{slot_accuracy, train_adapter, AdapterSlot, Capacity, Sample, SlotId, TrainConfig};
use moacl::backbone::{BackboneConfig, BackboneWeights, FrozenWeights, TokenSequence};
use moacl::fusion::select_donor;
use moacl::harness::{prepare, pretrain_backbone, run_continual, task_data, ExperimentConfig, Prepared};
use moacl::numerics::{rng, AdamWConfig, Tensor};
use moacl::router::{train_ae, AeConfig, AeKind, AeLayer, RouterBank, TaskAutoencoder};

fn desk() -> &'static (FrozenWeights, Prepared) {
    static DESK: OnceLock<(FrozenWeights, Prepared)> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let (frozen, _) = pretrain_backbone(&cfg).unwrap();
        let p = prepare(&cfg, &task_data(&cfg).unwrap(), &frozen).unwrap();
        (frozen, p)
    })
}

#[test]
fn two_class_pretext_converges() {
    let cfg = ExperimentConfig {
        pretext_classes: 2,
        pretext_per_class: 100,
        pretrain_epochs: 20,
        ..ExperimentConfig::default()
    };
    let (_, report) = pretrain_backbone(&cfg).unwrap();
    assert!(report.train_accuracy > 0.9, "{}", report.train_accuracy);
}

#[test]
fn adapter_fits_separable_toy_task() {
    let cfg = BackboneConfig::default();
    let frozen = FrozenWeights::freeze(cfg, BackboneWeights::init(&cfg, &mut rng(5)).unwrap()).unwrap();
    let mut r = rng(6);
    let data: Vec<Sample> = (0..60)
        .map(|i| {
            let label = i % 2;
            let shift = if label == 0 { 1.0 } else { -1.0 };
            let t = Tensor::randn(&[cfg.seq_len(), cfg.dim], 0.3, &mut r).map(|v| v + shift);
            Sample {
                tokens: TokenSequence::new(t, &cfg).unwrap(),
                label: 10 + label,
            }
        })
        .collect();
    let mut slot = AdapterSlot::new(SlotId(0), 4, cfg.layers, cfg.dim, &[10, 11], 7).unwrap();
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 16,
        optimizer: AdamWConfig::with_lr(1e-3),
        seed: 8,
    };
    train_adapter(&mut slot, &data, &frozen, &tc).unwrap();
    let acc = slot_accuracy(&slot, &data, &frozen).unwrap();
    assert!(acc > 0.95, "{acc}");
}

#[test]
fn donor_is_the_lowest_mean_loss() {
    let mut r = rng(11);
    let mut router = RouterBank::new();
    for _ in 0..3 {
        let layers = vec![
            AeLayer {
                w: Tensor::randn(&[2, 6], 0.5, &mut r),
                b: None,
            },
            AeLayer {
                w: Tensor::randn(&[6, 2], 0.5, &mut r),
                b: None,
            },
        ];
        router
            .push(TaskAutoencoder::from_layers(AeKind::Shallow, layers).unwrap())
            .unwrap();
    }
    let inputs = Tensor::uniform(&[10, 6], 0.0, 1.0, &mut r);
    let means: Vec<f64> = router
        .aes()
        .iter()
        .map(|ae| (0..10).map(|i| ae.loss(inputs.row(i)).unwrap() as f64).sum::<f64>() / 10.0)
        .collect();
    let best = (0..3).fold(0, |b, i| if means[i] < means[b] { i } else { b });
    assert_eq!(select_donor(&router, &inputs, 3).unwrap(), best);
    assert_eq!(select_donor(&router, &inputs, 1).unwrap(), 0);
    assert!(select_donor(&router, &inputs, 0).is_err());
}

#[test]
fn resampled_task_selects_its_twin() {
    let (_, p) = desk();
    let mut router = RouterBank::new();
    for (t, inputs) in p.train_inputs.iter().enumerate() {
        let mut ae = TaskAutoencoder::new(AeKind::Shallow, inputs.cols(), 1, t as u64).unwrap();
        train_ae(&mut ae, inputs, &AeConfig::default(), t as u64).unwrap();
        router.push(ae).unwrap();
    }
    for (k, held_out) in p.test_inputs.iter().enumerate() {
        assert_eq!(select_donor(&router, held_out, router.len()).unwrap(), k);
    }
}

#[test]
fn routed_accuracy_tracks_forced_oracle() {
    let (frozen, p) = desk();
    let (log, state) = run_continual(&ExperimentConfig::default(), frozen, p).unwrap();
    let mean_loss = |ae: &TaskAutoencoder, x: &Tensor| {
        (0..x.rows()).map(|i| ae.loss(x.row(i)).unwrap()).sum::<f32>() / x.rows() as f32
    };
    let n = p.train_inputs.len();
    for (e, ae) in state.router.aes().iter().enumerate() {
        let own = mean_loss(ae, &p.train_inputs[e]);
        let others = (0..n)
            .filter(|&t| t != e)
            .map(|t| mean_loss(ae, &p.train_inputs[t]))
            .sum::<f32>()
            / (n - 1) as f32;
        assert!(own <= others, "ae {e}: own {own} vs other tasks {others}");
    }
    let oracle = log.forced_final.iter().sum::<f32>() / log.forced_final.len() as f32;
    assert!(
        (oracle - log.avg_acc).abs() <= 0.02,
        "routed {} vs forced {oracle}",
        log.avg_acc
    );
}

#[test]
fn distillation_beats_plain_training_on_the_donor() {
    let (frozen, p) = desk();
    let run = |alpha| {
        let cfg = ExperimentConfig {
            capacity: Capacity::Finite(4),
            alpha,
            ..ExperimentConfig::default()
        };
        run_continual(&cfg, frozen, p).unwrap().0
    };
    let (fused, control) = (run(0.5), run(1.0));
    assert_eq!(fused.fusions.len(), 1);
    let donor = fused.fusions[0].donor_task;
    assert_eq!(control.fusions[0].donor_task, donor);
    assert!(
        fused.forced_final[donor] > control.forced_final[donor],
        "{} vs {}",
        fused.forced_final[donor],
        control.forced_final[donor]
    );
}
