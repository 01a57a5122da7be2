//! Adapter fusion under a finite adapter budget.
//!
//! When the bank is full, the new task's adapter is trained against its own
//! labels and against the donor adapter's soft outputs on replayed
//! exemplars. The donor is then removed and its tasks are redirected.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    apply_step, slot_logits, slot_probabilities, stack_tokens, AdapterBank, AdapterSlot, Capacity, Sample, SlotId,
    TrainConfig, TrainReport,
};
use crate::backbone::{FrozenWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::memory::{replay_batches, ReplayItem};
use crate::numerics::{derive_seed, rng, AdamW, Tape, Tensor};
use crate::router::{argmin, GateMap, RouterBank};

const REPLAY_STREAM: u64 = 0x5245_504c;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub capacity: Capacity,
    pub alpha: f32,
    pub replay_batch: usize,
    pub train: TrainConfig,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.capacity == Capacity::Finite(0) {
            return Err(Error::Config("capacity must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapacityDecision {
    Grow,
    Fuse,
}

/// Whether the `t`-th task (1-based) gets a fresh adapter slot.
pub fn capacity_gate(t: usize, capacity: Capacity) -> CapacityDecision {
    match capacity {
        Capacity::Finite(e) if t > e => CapacityDecision::Fuse,
        _ => CapacityDecision::Grow,
    }
}

/// Task among the first `prior` whose autoencoder has the lowest mean loss
/// on the rows of `inputs`.
pub fn select_donor(router: &RouterBank, inputs: &Tensor, prior: usize) -> Result<usize> {
    let prior = prior.min(router.len());
    if prior == 0 {
        return Err(Error::Fusion("no earlier task to fuse with".into()));
    }
    if inputs.rows() == 0 {
        return Err(Error::Fusion("donor selection needs new-task data".into()));
    }
    let means: Vec<f32> = router.aes()[..prior]
        .iter()
        .map(|ae| {
            let mut total = 0.0f64;
            for r in 0..inputs.rows() {
                total += ae.loss(inputs.row(r))? as f64;
            }
            Ok((total / inputs.rows() as f64) as f32)
        })
        .collect::<Result<_>>()?;
    Ok(argmin(&means))
}

/// Donor probabilities on each replayed exemplar, over the donor's classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub classes: Vec<usize>,
    pub probs: Tensor,
}

pub fn soft_targets(donor: &AdapterSlot, replay: &[ReplayItem], frozen: &FrozenWeights) -> Result<SoftTargets> {
    let tokens: Vec<TokenSequence> = replay.iter().map(|r| r.tokens.clone()).collect();
    let rows = slot_probabilities(donor, &tokens, frozen)?;
    let probs = if rows.is_empty() {
        Tensor::zeros(&[0, donor.class_ids.len()])
    } else {
        Tensor::from_rows(&rows)?
    };
    Ok(SoftTargets {
        classes: donor.class_ids.clone(),
        probs,
    })
}

/// Trains `slot` on `alpha * CE(data) + (1 - alpha) * L2(replay)`.
///
/// The L2 term is the per-sample squared distance between the slot's
/// probabilities restricted to `targets.classes` and the targets, averaged
/// over the replay batch. New-task batches are drawn exactly as in
/// [`train_adapter`](crate::adapters::train_adapter); replay batches come
/// from a separate stream.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    slot: &mut AdapterSlot,
    data: &[Sample],
    replay: &[ReplayItem],
    targets: &SoftTargets,
    frozen: &FrozenWeights,
    alpha: f32,
    replay_batch: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if replay.len() != targets.probs.rows() {
        return Err(Error::shape(
            "distill targets",
            &[replay.len()],
            &[targets.probs.rows()],
        ));
    }
    let labels: Vec<usize> = data.iter().map(|s| slot.local_index(s.label)).collect::<Result<_>>()?;
    let cols: Vec<usize> = targets
        .classes
        .iter()
        .map(|&c| slot.local_index(c))
        .collect::<Result<_>>()?;
    let use_ce = alpha > 0.0;
    let use_l2 = alpha < 1.0 && !replay.is_empty();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut r = rng(cfg.seed);
    let mut replay_rng = rng(derive_seed(cfg.seed, REPLAY_STREAM));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let rb = if use_l2 {
            replay_batches(replay.len(), replay_batch, &mut replay_rng)?
        } else {
            Vec::new()
        };
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut tape = Tape::new();
            let bb = frozen.register(&mut tape);
            let sv = slot.register(&mut tape, true);
            let mut loss = None;
            if use_ce {
                let x = tape.constant(stack_tokens(chunk.iter().map(|&i| &data[i].tokens))?);
                let logits = slot_logits(&mut tape, &bb, frozen, x, &sv)?;
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let ce = tape.cross_entropy(logits, &y)?;
                total += tape.value(ce).item() * chunk.len() as f32;
                loss = Some(tape.scale(ce, alpha));
            }
            if use_l2 {
                let idx = &rb[bi % rb.len()];
                let x = tape.constant(stack_tokens(idx.iter().map(|&i| &replay[i].tokens))?);
                let logits = slot_logits(&mut tape, &bb, frozen, x, &sv)?;
                let p = tape.softmax(logits, 1)?;
                let p = tape.select_cols(p, &cols)?;
                let rows: Vec<Vec<f32>> = idx.iter().map(|&i| targets.probs.row(i).to_vec()).collect();
                let t = tape.constant(Tensor::from_rows(&rows)?);
                let l2 = tape.mse(p, t)?;
                let l2 = tape.scale(l2, (1.0 - alpha) * cols.len() as f32);
                loss = Some(match loss {
                    Some(ce) => tape.add(ce, l2)?,
                    None => l2,
                });
            }
            let Some(loss) = loss else { continue };
            let vars = sv.vars();
            let grads = tape.backward(loss)?;
            apply_step(slot, &mut opt, &vars, grads)?;
        }
        report.epoch_losses.push(total / data.len().max(1) as f32);
    }
    Ok(report)
}

/// Record of one fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionEvent {
    pub task: usize,
    pub donor_task: usize,
    pub donor_slot: SlotId,
    pub new_slot: SlotId,
    pub alpha: f32,
    pub replay_size: usize,
    pub params_before: usize,
    pub params_after: usize,
}

/// Distills the slot serving `donor_task` into `new_slot`, then swaps the
/// donor out of `bank` and redirects its tasks in `map`.
///
/// `replay` holds exemplars of every task routed to the donor slot. The
/// bank and map are only touched once training has succeeded.
#[allow(clippy::too_many_arguments)]
pub fn distill_fuse(
    mut new_slot: AdapterSlot,
    donor_task: usize,
    replay: &[ReplayItem],
    data: &[Sample],
    bank: &mut AdapterBank,
    map: &mut GateMap,
    frozen: &FrozenWeights,
    cfg: &FusionConfig,
) -> Result<FusionEvent> {
    cfg.validate()?;
    let donor_id = map.resolve(donor_task)?;
    if donor_id == new_slot.id {
        return Err(Error::Fusion(format!("slot {donor_id} cannot be its own donor")));
    }
    let donor = bank
        .get(donor_id)
        .ok_or_else(|| Error::Integrity(format!("donor slot {donor_id} is not live")))?
        .clone();
    if replay.is_empty() {
        warn!(
            "task {}: empty replay memory, fusing with cross-entropy only",
            new_slot.id
        );
    }
    let targets = soft_targets(&donor, replay, frozen)?;
    new_slot.extend_head(&donor.class_ids, derive_seed(cfg.train.seed, donor_id.0 as u64))?;
    let alpha = if replay.is_empty() { 1.0 } else { cfg.alpha };
    distill(
        &mut new_slot,
        data,
        replay,
        &targets,
        frozen,
        alpha,
        cfg.replay_batch,
        &cfg.train,
    )?;

    let params_before = bank.param_count();
    let new_id = new_slot.id;
    bank.replace(donor_id, new_slot)?;
    map.push(new_id);
    map.remap(donor_task, new_id, bank)?;
    let event = FusionEvent {
        task: new_id.0,
        donor_task,
        donor_slot: donor_id,
        new_slot: new_id,
        alpha,
        replay_size: replay.len(),
        params_before,
        params_after: bank.param_count(),
    };
    info!("fusion {}", serde_json::to_string(&event).unwrap_or_default());
    Ok(event)
}
