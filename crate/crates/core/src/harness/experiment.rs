//! The continual-learning driver: per task, fit an autoencoder, herd a
//! replay memory, then either grow the adapter bank or fuse into it.

use std::time::Instant;

use log::info;
use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, Mode};
use super::data::{glyph_classes, read_mnist_dir, DataSplit, Dataset, GlyphConfig};
use super::tasks::{make_permutations, make_splits, permute, TaskSpec};
use crate::adapters::{predict, train_adapter, AdapterBank, AdapterSlot, Gate, Sample, SlotId, TrainConfig};
use crate::backbone::{pretrain, BackboneWeights, FrozenWeights, PretextSet, PretrainConfig, PretrainReport};
use crate::error::{Error, Result};
use crate::fusion::{capacity_gate, distill_fuse, select_donor, CapacityDecision, FusionConfig, FusionEvent};
use crate::memory::{herd_select, ReplayItem, ReplayMemory};
use crate::numerics::{derive_seed, rng, AdamWConfig, Tensor};
use crate::router::{
    ae_inputs, route_input, routing_heatmap, train_ae, AeConfig, GateMap, RouterBank, TaskAutoencoder,
};

const SPLIT_STREAM: u64 = 1;
const PERM_STREAM: u64 = 2;
const AE_INIT: u64 = 100;
const AE_TRAIN: u64 = 200;
const SLOT_INIT: u64 = 300;
const SLOT_TRAIN: u64 = 400;

/// Glyph settings shared by the task stream and the pretext set.
fn glyph_config(cfg: &ExperimentConfig, train: usize, test: usize) -> GlyphConfig {
    GlyphConfig {
        classes: cfg.classes + cfg.pretext_classes,
        train_per_class: train,
        test_per_class: test,
        size: cfg.backbone.image_h,
        cell: cfg.backbone.patch,
        frame: cfg.glyph_frame,
        pool: cfg.glyph_pool,
        stamps: cfg.glyph_stamps,
        jitter: cfg.glyph_jitter,
        noise: cfg.glyph_noise,
        seed: cfg.glyph_seed,
        ..Default::default()
    }
}

/// Pretext images: glyph classes numbered after the task classes, so they
/// never coincide with a task label.
pub fn pretext_set(cfg: &ExperimentConfig) -> PretextSet {
    let ids: Vec<usize> = (cfg.classes..cfg.classes + cfg.pretext_classes).collect();
    let split = glyph_classes(&glyph_config(cfg, cfg.pretext_per_class, 0), &ids);
    PretextSet {
        images: split.train.images,
        labels: split.train.labels,
    }
}

/// Pretrains and freezes the backbone. Depends only on the backbone, glyph
/// and pretext settings, not on the experiment seed.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<(FrozenWeights, PretrainReport)> {
    cfg.backbone.validate()?;
    let weights = BackboneWeights::init(&cfg.backbone, &mut rng(cfg.backbone_seed))?;
    let pc = PretrainConfig {
        epochs: cfg.pretrain_epochs,
        batch_size: 64,
        optimizer: AdamWConfig::with_lr(cfg.pretrain_lr),
        seed: derive_seed(cfg.backbone_seed, 1),
    };
    let reserved: Vec<usize> = (0..cfg.classes).collect();
    pretrain(cfg.backbone, weights, &pretext_set(cfg), &reserved, &pc)
}

pub fn task_data(cfg: &ExperimentConfig) -> Result<DataSplit> {
    let classes: Vec<usize> = (0..cfg.classes).collect();
    match &cfg.dataset {
        DataSource::Synthetic => Ok(glyph_classes(
            &glyph_config(cfg, cfg.train_per_class, cfg.test_per_class),
            &classes,
        )),
        DataSource::Idx(dir) => {
            let full = read_mnist_dir(dir)?;
            Ok(DataSplit {
                train: full.train.filter(&classes).take_per_class(cfg.train_per_class),
                test: full.test.filter(&classes).take_per_class(cfg.test_per_class),
            })
        }
    }
}

pub fn task_stream(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    let classes: Vec<usize> = (0..cfg.classes).collect();
    match cfg.mode {
        Mode::Split => make_splits(&classes, cfg.tasks, derive_seed(cfg.seed, SPLIT_STREAM)),
        Mode::Permutation => make_permutations(
            &classes,
            cfg.backbone.image_h * cfg.backbone.image_w,
            cfg.tasks,
            derive_seed(cfg.seed, PERM_STREAM),
            cfg.identity_first,
        ),
    }
}

/// Embedded train and test samples of every task.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tasks: Vec<TaskSpec>,
    pub train: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
    /// Autoencoder inputs of `train` and `test`, one row per sample.
    pub train_inputs: Vec<Tensor>,
    pub test_inputs: Vec<Tensor>,
}

fn embed_task(ds: &Dataset, task: &TaskSpec, frozen: &FrozenWeights) -> Result<Vec<Sample>> {
    let sub = ds.filter(&task.classes);
    if sub.is_empty() {
        return Err(Error::Config(format!("task {} has no samples", task.id)));
    }
    let images: Vec<Tensor> = match &task.permutation {
        Some(p) => sub.images.iter().map(|im| permute(im, p)).collect::<Result<_>>()?,
        None => sub.images,
    };
    let mut out = Vec::with_capacity(images.len());
    for (chunk, labels) in images.chunks(256).zip(sub.labels.chunks(256)) {
        for (tokens, &label) in frozen.embed_batch(chunk)?.into_iter().zip(labels) {
            out.push(Sample { tokens, label });
        }
    }
    Ok(out)
}

/// Builds the task stream and runs every image through the frozen embedding once.
pub fn prepare(cfg: &ExperimentConfig, data: &DataSplit, frozen: &FrozenWeights) -> Result<Prepared> {
    cfg.validate()?;
    let tasks = task_stream(cfg)?;
    let mut p = Prepared {
        tasks: tasks.clone(),
        train: Vec::new(),
        test: Vec::new(),
        train_inputs: Vec::new(),
        test_inputs: Vec::new(),
    };
    for t in &tasks {
        let train = embed_task(&data.train, t, frozen)?;
        let test = embed_task(&data.test, t, frozen)?;
        p.train_inputs.push(ae_inputs(train.iter().map(|s| &s.tokens))?);
        p.test_inputs.push(ae_inputs(test.iter().map(|s| &s.tokens))?);
        p.train.push(train);
        p.test.push(test);
    }
    Ok(p)
}

/// Everything learned during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub config: ExperimentConfig,
    pub frozen: FrozenWeights,
    pub bank: AdapterBank,
    pub router: RouterBank,
    pub gate_map: GateMap,
    pub memory: ReplayMemory,
}

impl ContinualState {
    pub fn new(config: ExperimentConfig, frozen: FrozenWeights) -> Self {
        let bank = AdapterBank::new(config.capacity);
        ContinualState {
            config,
            frozen,
            bank,
            router: RouterBank::new(),
            gate_map: GateMap::new(),
            memory: ReplayMemory::new(),
        }
    }

    pub fn footprint(&self) -> Footprint {
        let lora = self.bank.lora_param_count();
        let heads = self.bank.head_param_count();
        let router = self.router.param_count();
        Footprint {
            adapters: self.bank.len(),
            lora,
            heads,
            router,
            total: lora + heads + router,
        }
    }
}

/// Trainable parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub adapters: usize,
    pub lora: usize,
    pub heads: usize,
    pub router: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RoutingMode {
    /// Minimum reconstruction loss, resolved through the gate map.
    Generative,
    /// Every input goes to the most recently created adapter.
    Latest,
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseTiming {
    pub task: usize,
    pub phase: &'static str,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsLog {
    pub seed: u64,
    pub routing: RoutingMode,
    /// Accuracy of each task after the final task, routed without task ids.
    pub final_acc: Vec<f32>,
    /// Mean routed accuracy over the tasks seen so far, after each task.
    pub running_avg: Vec<f32>,
    /// Each task's accuracy with its own gate forced, right after it was learned.
    pub forced_after_task: Vec<f32>,
    /// The same forced accuracies re-measured after the final task.
    pub forced_final: Vec<f32>,
    /// Slot each task resolves to after the final task.
    pub routed_to: Vec<SlotId>,
    /// `[task][slot id]` counts of where test samples were sent at the end.
    pub confusion: Vec<Vec<usize>>,
    /// `[task][ae]` counts of the winning autoencoder at the end.
    pub ae_confusion: Vec<Vec<usize>>,
    /// Footprint after each task.
    pub footprint: Vec<Footprint>,
    pub heatmap: Vec<Vec<f32>>,
    pub fusions: Vec<FusionEvent>,
    pub timings: Vec<PhaseTiming>,
    pub avg_acc: f32,
}

impl MetricsLog {
    /// Fraction of test samples whose winning autoencoder is their own task's.
    pub fn routing_fidelity(&self) -> f32 {
        let total: usize = self.ae_confusion.iter().flatten().sum();
        let hits: usize = (0..self.ae_confusion.len())
            .map(|i| self.ae_confusion[i].get(i).copied().unwrap_or(0))
            .sum();
        hits as f32 / total.max(1) as f32
    }
}

struct Evaluation {
    correct: usize,
    slots: Vec<SlotId>,
    aes: Vec<usize>,
}

fn evaluate(state: &ContinualState, test: &[Sample], inputs: &Tensor, mode: RoutingMode) -> Result<Evaluation> {
    let mut ev = Evaluation {
        correct: 0,
        slots: Vec::with_capacity(test.len()),
        aes: Vec::with_capacity(test.len()),
    };
    let latest = state.bank.latest().ok_or(Error::NoAdapter)?.id;
    for (i, s) in test.iter().enumerate() {
        let route = route_input(inputs.row(i), &state.router, &state.gate_map, &state.bank)?;
        let gate = match mode {
            RoutingMode::Generative => route.gate,
            RoutingMode::Latest => Gate::for_slot(&state.bank, latest)?,
        };
        let p = predict(&s.tokens, &gate, &state.bank, &state.frozen)?;
        ev.correct += usize::from(p.label == s.label);
        ev.slots.push(p.slot);
        ev.aes.push(route.task);
    }
    Ok(ev)
}

fn forced_accuracy(state: &ContinualState, task: usize, test: &[Sample]) -> Result<f32> {
    let gate = Gate::for_slot(&state.bank, state.gate_map.resolve(task)?)?;
    let mut correct = 0usize;
    for s in test {
        correct += usize::from(predict(&s.tokens, &gate, &state.bank, &state.frozen)?.label == s.label);
    }
    Ok(correct as f32 / test.len().max(1) as f32)
}

pub fn avg_task_accuracy(accs: &[f32]) -> Result<f32> {
    if accs.is_empty() {
        return Err(Error::Config("average accuracy of no tasks".into()));
    }
    Ok((accs.iter().map(|&a| a as f64).sum::<f64>() / accs.len() as f64) as f32)
}

fn train_config(cfg: &ExperimentConfig, epochs: usize, task: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_train,
        optimizer: AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::with_lr(cfg.lr_adapter)
        },
        seed: derive_seed(cfg.seed, SLOT_TRAIN + task as u64),
    }
}

fn ae_config(cfg: &ExperimentConfig) -> AeConfig {
    AeConfig {
        kind: cfg.ae_kind,
        latent: cfg.ae_latent,
        epochs: cfg.epochs_ae,
        batch_size: cfg.batch_ae,
        lr: cfg.lr_ae,
    }
}

/// Learns one task into `state`. Returns the fusion record if the bank was full.
pub fn learn_task(
    state: &mut ContinualState,
    p: &Prepared,
    t: usize,
    timings: &mut Vec<PhaseTiming>,
) -> Result<Option<FusionEvent>> {
    let cfg = state.config.clone();
    let task = &p.tasks[t];
    let d = cfg.backbone.dim;
    let mut clock = Instant::now();
    let mut lap = |phase: &'static str, timings: &mut Vec<PhaseTiming>| {
        timings.push(PhaseTiming {
            task: t,
            phase,
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let ac = ae_config(&cfg);
    let mut ae = TaskAutoencoder::new(ac.kind, d, ac.latent, derive_seed(cfg.seed, AE_INIT + t as u64))
        .map_err(|e| e.at_task(t, "autoencoder"))?;
    train_ae(
        &mut ae,
        &p.train_inputs[t],
        &ac,
        derive_seed(cfg.seed, AE_TRAIN + t as u64),
    )
    .map_err(|e| e.at_task(t, "autoencoder"))?;
    let mem = herd_select(&ae, &p.train[t], &task.classes, cfg.replay).map_err(|e| e.at_task(t, "memory"))?;
    state.memory.insert(t, mem);
    state.router.push(ae).map_err(|e| e.at_task(t, "autoencoder"))?;
    lap("router", timings);

    let slot = AdapterSlot::new(
        SlotId(t),
        cfg.rank,
        cfg.backbone.layers,
        d,
        &task.classes,
        derive_seed(cfg.seed, SLOT_INIT + t as u64),
    )
    .map_err(|e| e.at_task(t, "adapter"))?;
    let event = match capacity_gate(t + 1, cfg.capacity) {
        CapacityDecision::Grow => {
            let mut slot = slot;
            train_adapter(
                &mut slot,
                &p.train[t],
                &state.frozen,
                &train_config(&cfg, cfg.epochs_adapter, t),
            )
            .map_err(|e| e.at_task(t, "adapter"))?;
            state.bank.push(slot).map_err(|e| e.at_task(t, "adapter"))?;
            state.gate_map.push(SlotId(t));
            lap("adapter", timings);
            None
        }
        CapacityDecision::Fuse => {
            let donor = select_donor(&state.router, &p.train_inputs[t], t).map_err(|e| e.at_task(t, "fusion"))?;
            let donor_slot = state.gate_map.resolve(donor)?;
            let replay: Vec<ReplayItem> = state
                .gate_map
                .tasks_of(donor_slot)
                .into_iter()
                .filter_map(|k| state.memory.get(k))
                .flat_map(|m| m.items.iter().cloned())
                .collect();
            let fc = FusionConfig {
                capacity: cfg.capacity,
                alpha: cfg.alpha,
                replay_batch: cfg.batch_replay,
                train: train_config(&cfg, cfg.epochs_distill, t),
            };
            let ev = distill_fuse(
                slot,
                donor,
                &replay,
                &p.train[t],
                &mut state.bank,
                &mut state.gate_map,
                &state.frozen,
                &fc,
            )
            .map_err(|e| e.at_task(t, "fusion"))?;
            lap("fusion", timings);
            Some(ev)
        }
    };
    state.gate_map.validate(&state.bank)?;
    Ok(event)
}

/// Runs the whole stream once and reports metrics for each routing mode
/// in `modes`. Training never depends on the routing mode, so one pass
/// serves all of them.
pub fn run_modes(
    cfg: &ExperimentConfig,
    frozen: &FrozenWeights,
    p: &Prepared,
    modes: &[RoutingMode],
) -> Result<(Vec<MetricsLog>, ContinualState)> {
    cfg.validate()?;
    let n = p.tasks.len();
    let mut state = ContinualState::new(cfg.clone(), frozen.clone());
    let mut logs: Vec<MetricsLog> = modes
        .iter()
        .map(|&routing| MetricsLog {
            seed: cfg.seed,
            routing,
            final_acc: Vec::new(),
            running_avg: Vec::new(),
            forced_after_task: Vec::new(),
            forced_final: Vec::new(),
            routed_to: Vec::new(),
            confusion: Vec::new(),
            ae_confusion: Vec::new(),
            footprint: Vec::new(),
            heatmap: Vec::new(),
            fusions: Vec::new(),
            timings: Vec::new(),
            avg_acc: 0.0,
        })
        .collect();
    let mut timings = Vec::new();
    let mut fusions = Vec::new();
    let mut forced_after = Vec::new();
    let mut footprints = Vec::new();
    for t in 0..n {
        fusions.extend(learn_task(&mut state, p, t, &mut timings)?);
        forced_after.push(forced_accuracy(&state, t, &p.test[t]).map_err(|e| e.at_task(t, "evaluation"))?);
        footprints.push(state.footprint());
        let clock = Instant::now();
        for log in logs.iter_mut() {
            let mut accs = Vec::with_capacity(t + 1);
            for i in 0..=t {
                let ev = evaluate(&state, &p.test[i], &p.test_inputs[i], log.routing)
                    .map_err(|e| e.at_task(i, "evaluation"))?;
                accs.push(ev.correct as f32 / p.test[i].len() as f32);
                if t + 1 == n {
                    let mut row = vec![0; n];
                    ev.slots.iter().for_each(|s| row[s.0.min(n - 1)] += 1);
                    log.confusion.push(row);
                    let mut row = vec![0; n];
                    ev.aes.iter().for_each(|&a| row[a] += 1);
                    log.ae_confusion.push(row);
                }
            }
            log.running_avg.push(avg_task_accuracy(&accs)?);
            if t + 1 == n {
                log.final_acc = accs;
            }
        }
        timings.push(PhaseTiming {
            task: t,
            phase: "evaluation",
            seconds: clock.elapsed().as_secs_f64(),
        });
        info!(
            "task {t}: running accuracy {:?}",
            logs.iter().map(|l| l.running_avg[t]).collect::<Vec<_>>()
        );
    }
    let forced_final: Vec<f32> = (0..n)
        .map(|t| forced_accuracy(&state, t, &p.test[t]))
        .collect::<Result<_>>()?;
    let heatmap = routing_heatmap(&state.router, &p.test_inputs)?;
    let heat: Vec<Vec<f32>> = (0..heatmap.rows()).map(|r| heatmap.row(r).to_vec()).collect();
    for log in logs.iter_mut() {
        log.avg_acc = avg_task_accuracy(&log.final_acc)?;
        log.forced_after_task = forced_after.clone();
        log.forced_final = forced_final.clone();
        log.routed_to = state.gate_map.table().to_vec();
        log.footprint = footprints.clone();
        log.heatmap = heat.clone();
        log.fusions = fusions.clone();
        log.timings = timings.clone();
    }
    Ok((logs, state))
}

/// Full method with generative routing.
pub fn run_continual(
    cfg: &ExperimentConfig,
    frozen: &FrozenWeights,
    p: &Prepared,
) -> Result<(MetricsLog, ContinualState)> {
    let (mut logs, state) = run_modes(cfg, frozen, p, &[RoutingMode::Generative])?;
    Ok((logs.pop().unwrap(), state))
}

/// Same pipeline, with every test input sent to the newest adapter.
pub fn ablate_routing(cfg: &ExperimentConfig, frozen: &FrozenWeights, p: &Prepared) -> Result<MetricsLog> {
    let (mut logs, _) = run_modes(cfg, frozen, p, &[RoutingMode::Latest])?;
    Ok(logs.pop().unwrap())
}
