//! Bank of per-task low-rank adapters with one-hot gating.
//!
//! Every slot carries a rank-`r` pair `(A, B)` for each of the Q, K, V and O
//! projections of every layer, plus its own classification head over a list
//! of global class ids. `B` starts at zero so a fresh slot changes nothing.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterVars, BackboneVars, FrozenWeights, LoraVars, Projection, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{rng, softmax_slice, AdamW, AdamWConfig, Rng, Tape, Tensor, Var};

const HEAD_INIT_STD: f64 = 0.01;

/// Stable identity of an adapter slot. A slot created while learning task
/// `t` has id `t`, so the initial gate map is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId(pub usize);

impl std::fmt::Display for SlotId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `[r, D]`
    pub a: Tensor,
    /// `[D, r]`
    pub b: Tensor,
}

impl LoraPair {
    pub fn new(rank: usize, dim: usize, rng: &mut Rng) -> Self {
        LoraPair {
            a: Tensor::randn(&[rank, dim], (1.0 / rank as f64).sqrt(), rng),
            b: Tensor::zeros(&[dim, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `B A`, shape `[D, D]`.
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSlot {
    pub id: SlotId,
    pub layers: Vec<[LoraPair; 4]>,
    /// `[classes, D]`
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub class_ids: Vec<usize>,
}

/// One slot's tensors registered on a tape.
pub struct SlotVars {
    pub adapter: AdapterVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl SlotVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.adapter.layers {
            for p in layer {
                out.push(p.a);
                out.push(p.b);
            }
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

impl AdapterSlot {
    pub fn new(id: SlotId, rank: usize, layers: usize, dim: usize, class_ids: &[usize], seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if class_ids.is_empty() {
            return Err(Error::Config("adapter needs at least one class".into()));
        }
        check_unique(class_ids)?;
        let mut r = rng(seed);
        let layers = (0..layers)
            .map(|_| std::array::from_fn(|_| LoraPair::new(rank, dim, &mut r)))
            .collect();
        Ok(AdapterSlot {
            id,
            layers,
            head_w: Tensor::randn(&[class_ids.len(), dim], HEAD_INIT_STD, &mut r),
            head_b: Tensor::zeros(&[class_ids.len()]),
            class_ids: class_ids.to_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, |l| l[0].rank())
    }

    pub fn dim(&self) -> usize {
        self.head_w.cols()
    }

    pub fn pair(&self, layer: usize, proj: Projection) -> Option<&LoraPair> {
        self.layers.get(layer).map(|l| &l[proj as usize])
    }

    /// Adds head rows for classes not yet covered, appended after the
    /// existing ones.
    pub fn extend_head(&mut self, classes: &[usize], seed: u64) -> Result<()> {
        let fresh: Vec<usize> = classes
            .iter()
            .copied()
            .filter(|c| !self.class_ids.contains(c))
            .collect();
        check_unique(&fresh)?;
        if fresh.is_empty() {
            return Ok(());
        }
        let d = self.dim();
        let mut r = rng(seed);
        let extra = Tensor::randn(&[fresh.len(), d], HEAD_INIT_STD, &mut r);
        let mut w = self.head_w.data().to_vec();
        w.extend_from_slice(extra.data());
        let mut b = self.head_b.data().to_vec();
        b.extend(std::iter::repeat_n(0.0, fresh.len()));
        self.class_ids.extend(fresh);
        self.head_w = Tensor::new(&[self.class_ids.len(), d], w)?;
        self.head_b = Tensor::new(&[self.class_ids.len()], b)?;
        Ok(())
    }

    pub fn local_index(&self, label: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Label {
                label,
                classes: self.class_ids.clone(),
            })
    }

    pub fn lora_param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(|p| p.a.len() + p.b.len())
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_w.len() + self.head_b.len()
    }

    pub fn param_count(&self) -> usize {
        self.lora_param_count() + self.head_param_count()
    }

    /// Tensors in canonical order: per layer, per projection `(A, B)`, then the head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for p in layer {
                out.push(&p.a);
                out.push(&p.b);
            }
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for p in layer.iter_mut() {
                out.push(&mut p.a);
                out.push(&mut p.b);
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> SlotVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                std::array::from_fn(|i| LoraVars {
                    a: reg(&l[i].a),
                    b: reg(&l[i].b),
                })
            })
            .collect();
        SlotVars {
            adapter: AdapterVars { layers },
            head_w: reg(&self.head_w),
            head_b: reg(&self.head_b),
        }
    }
}

fn check_unique(ids: &[usize]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate class ids in {ids:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    Finite(usize),
    Unlimited,
}

impl Capacity {
    pub fn admits(&self, slots: usize) -> bool {
        match *self {
            Capacity::Finite(e) => slots <= e,
            Capacity::Unlimited => true,
        }
    }
}

impl std::fmt::Display for Capacity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Capacity::Finite(e) => write!(f, "{e}"),
            Capacity::Unlimited => write!(f, "unlimited"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    slots: Vec<AdapterSlot>,
    capacity: Capacity,
}

impl AdapterBank {
    pub fn new(capacity: Capacity) -> Self {
        AdapterBank {
            slots: Vec::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        !self.capacity.admits(self.slots.len() + 1)
    }

    pub fn position(&self, id: SlotId) -> Option<usize> {
        self.slots.iter().position(|s| s.id == id)
    }

    pub fn get(&self, id: SlotId) -> Option<&AdapterSlot> {
        self.slots.iter().find(|s| s.id == id)
    }

    pub fn contains(&self, id: SlotId) -> bool {
        self.position(id).is_some()
    }

    /// Most recently created slot.
    pub fn latest(&self) -> Option<&AdapterSlot> {
        self.slots.iter().max_by_key(|s| s.id)
    }

    pub fn push(&mut self, slot: AdapterSlot) -> Result<()> {
        if self.is_full() {
            return Err(Error::Capacity(self.slots.len()));
        }
        if self.contains(slot.id) {
            return Err(Error::Integrity(format!("slot {} already exists", slot.id)));
        }
        self.slots.push(slot);
        Ok(())
    }

    /// Removes `old` and inserts `new` in one step, keeping the bank size.
    pub fn replace(&mut self, old: SlotId, new: AdapterSlot) -> Result<AdapterSlot> {
        let pos = self
            .position(old)
            .ok_or_else(|| Error::Integrity(format!("slot {old} is not live")))?;
        if new.id != old && self.contains(new.id) {
            return Err(Error::Integrity(format!("slot {} already exists", new.id)));
        }
        let removed = self.slots.remove(pos);
        self.slots.push(new);
        Ok(removed)
    }

    pub fn lora_param_count(&self) -> usize {
        self.slots.iter().map(AdapterSlot::lora_param_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.slots.iter().map(AdapterSlot::head_param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(AdapterSlot::param_count).sum()
    }

    pub(crate) fn from_parts(slots: Vec<AdapterSlot>, capacity: Capacity) -> Result<Self> {
        if !capacity.admits(slots.len()) {
            return Err(Error::Capacity(slots.len()));
        }
        Ok(AdapterBank { slots, capacity })
    }
}

/// One-hot (or all-zero) gating weights over the bank's slot positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    weights: Vec<f32>,
}

impl Gate {
    pub fn one_hot(len: usize, active: usize) -> Result<Self> {
        if active >= len {
            return Err(Error::Routing(format!("gate position {active} out of {len} slots")));
        }
        let mut weights = vec![0.0; len];
        weights[active] = 1.0;
        Ok(Gate { weights })
    }

    pub fn none(len: usize) -> Self {
        Gate {
            weights: vec![0.0; len],
        }
    }

    /// Accepts only entries in `{0, 1}` with at most one active.
    pub fn from_weights(weights: Vec<f32>) -> Result<Self> {
        if weights.iter().any(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::Routing(format!("gate entries must be 0 or 1: {weights:?}")));
        }
        if weights.iter().filter(|&&w| w == 1.0).count() > 1 {
            return Err(Error::Routing(format!(
                "gate has more than one active entry: {weights:?}"
            )));
        }
        Ok(Gate { weights })
    }

    /// Gate selecting slot `id` of `bank`.
    pub fn for_slot(bank: &AdapterBank, id: SlotId) -> Result<Self> {
        let pos = bank
            .position(id)
            .ok_or_else(|| Error::Routing(format!("gate references missing slot {id}")))?;
        Gate::one_hot(bank.len(), pos)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn active(&self) -> Option<usize> {
        self.weights.iter().position(|&w| w == 1.0)
    }

    fn resolve<'a>(&self, bank: &'a AdapterBank) -> Result<Option<&'a AdapterSlot>> {
        if self.weights.len() != bank.len() {
            return Err(Error::Routing(format!(
                "gate over {} slots used with a bank of {}",
                self.weights.len(),
                bank.len()
            )));
        }
        Ok(self.active().map(|p| &bank.slots[p]))
    }
}

/// `v W^T + sum_e gate(e) v A_e^T B_e^T` for one projection, outside of any
/// training graph. `v` is `[tokens, D]`, `w` is the frozen `[D, D]` matrix.
pub fn adapted_projection(
    w: &Tensor,
    v: &Tensor,
    gate: &Gate,
    bank: &AdapterBank,
    layer: usize,
    proj: Projection,
) -> Result<Tensor> {
    let slot = gate.resolve(bank)?;
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let x = tape.constant(v.clone());
    let mut out = tape.linear(x, wv, None)?;
    if let Some(slot) = slot {
        let pair = slot.pair(layer, proj).ok_or(Error::Index {
            what: "adapter layer",
            index: layer,
            len: slot.layers.len(),
        })?;
        let a = tape.constant(pair.a.clone());
        let b = tape.constant(pair.b.clone());
        let low = tape.linear(x, a, None)?;
        let delta = tape.linear(low, b, None)?;
        out = tape.add(out, delta)?;
    }
    Ok(tape.value(out).clone())
}

/// Token sequence with its global class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    pub label: usize,
}

pub(crate) fn stack_tokens<'a>(items: impl Iterator<Item = &'a TokenSequence>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.map(|t| t.tensor()).collect();
    Tensor::stack_rows(&refs)
}

/// Head logits for a stacked batch of token sequences under one slot.
pub(crate) fn slot_logits(
    tape: &mut Tape,
    bb: &BackboneVars,
    frozen: &FrozenWeights,
    x: Var,
    sv: &SlotVars,
) -> Result<Var> {
    let cfg = frozen.config();
    let y = bb.blocks(tape, x, cfg, Some(&sv.adapter))?;
    let f = bb.readout(tape, y, cfg)?;
    tape.linear(f, sv.head_w, Some(sv.head_b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            optimizer: AdamWConfig::with_lr(1e-3),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean cross-entropy of the mini-batches seen in each epoch.
    pub epoch_losses: Vec<f32>,
}

pub(crate) fn apply_step(
    slot: &mut AdapterSlot,
    opt: &mut AdamW,
    vars: &[Var],
    mut grads: crate::numerics::Gradients,
) -> Result<()> {
    let shapes: Vec<Vec<usize>> = slot.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let gs: Vec<Tensor> = vars
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s)))
        .collect();
    let grefs: Vec<&Tensor> = gs.iter().collect();
    opt.step(&mut slot.tensors_mut(), &grefs)
}

/// Cross-entropy training of one slot on task data. Only the slot changes.
pub fn train_adapter(
    slot: &mut AdapterSlot,
    data: &[Sample],
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let labels: Vec<usize> = data.iter().map(|s| slot.local_index(s.label)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut r = rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bb = frozen.register(&mut tape);
            let sv = slot.register(&mut tape, true);
            let x = tape.constant(stack_tokens(chunk.iter().map(|&i| &data[i].tokens))?);
            let logits = slot_logits(&mut tape, &bb, frozen, x, &sv)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &y)?;
            total += tape.value(loss).item() * chunk.len() as f32;
            let vars = sv.vars();
            let grads = tape.backward(loss)?;
            apply_step(slot, &mut opt, &vars, grads)?;
        }
        let mean = total / data.len().max(1) as f32;
        debug!("slot {} epoch {epoch}: ce {mean:.4}", slot.id);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Global class id at the argmax.
    pub label: usize,
    /// Probabilities over the routed slot's `class_ids`.
    pub probs: Vec<f32>,
    pub slot: SlotId,
}

/// Class probabilities of the slot selected by `gate`.
pub fn predict(tokens: &TokenSequence, gate: &Gate, bank: &AdapterBank, frozen: &FrozenWeights) -> Result<Prediction> {
    if bank.is_empty() {
        return Err(Error::NoAdapter);
    }
    let slot = gate
        .resolve(bank)?
        .ok_or_else(|| Error::Routing("prediction requires an active gate".into()))?;
    let probs = slot_probabilities(slot, std::slice::from_ref(tokens), frozen)?
        .pop()
        .unwrap();
    let label = slot.class_ids[crate::numerics::argmax(&probs)];
    Ok(Prediction {
        label,
        probs,
        slot: slot.id,
    })
}

/// Softmax head outputs of `slot` for each token sequence.
pub fn slot_probabilities(
    slot: &AdapterSlot,
    tokens: &[TokenSequence],
    frozen: &FrozenWeights,
) -> Result<Vec<Vec<f32>>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bb = frozen.register(&mut tape);
    let sv = slot.register(&mut tape, false);
    let x = tape.constant(stack_tokens(tokens.iter())?);
    let logits = slot_logits(&mut tape, &bb, frozen, x, &sv)?;
    let lv = tape.value(logits);
    Ok((0..lv.rows()).map(|r| softmax_slice(lv.row(r))).collect())
}

/// Backbone output tokens with `slot`'s deltas applied to every projection.
pub fn adapted_forward(slot: &AdapterSlot, tokens: &TokenSequence, frozen: &FrozenWeights) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let bb = frozen.register(&mut tape);
    let sv = slot.register(&mut tape, false);
    let x = tape.constant(tokens.tensor().clone());
    let y = bb.blocks(&mut tape, x, frozen.config(), Some(&sv.adapter))?;
    TokenSequence::new(tape.value(y).clone(), frozen.config())
}

/// Fraction of `data` classified correctly by `slot` (one sample at a time).
pub fn slot_accuracy(slot: &AdapterSlot, data: &[Sample], frozen: &FrozenWeights) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        let p = slot_probabilities(slot, std::slice::from_ref(&s.tokens), frozen)?;
        if slot.class_ids[crate::numerics::argmax(&p[0])] == s.label {
            correct += 1;
        }
    }
    Ok(correct as f32 / data.len() as f32)
}
