//! Per-task autoencoders used as novelty detectors, and the task to slot
//! gate map.
//!
//! Each autoencoder sees the sigmoid of the token-axis mean of the frozen
//! embedding output. Routing picks the task whose autoencoder reconstructs
//! the input best, then resolves that task through the gate map.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, Gate, SlotId};
use crate::backbone::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{rng, sigmoid, AdamW, AdamWConfig, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AeKind {
    /// `G F x` with no biases.
    Shallow,
    /// Four linear layers `D -> h -> s -> h -> D` with biases and sigmoids
    /// between layers.
    Deep { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub kind: AeKind,
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            kind: AeKind::Shallow,
            latent: 1,
            epochs: 10,
            batch_size: 32,
            lr: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeLayer {
    /// `[out, in]`
    pub w: Tensor,
    pub b: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAutoencoder {
    kind: AeKind,
    layers: Vec<AeLayer>,
}

impl TaskAutoencoder {
    pub fn new(kind: AeKind, input_dim: usize, latent: usize, seed: u64) -> Result<Self> {
        if latent == 0 || input_dim == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        let mut r = rng(seed);
        let mut layer = |out: usize, inp: usize, bias: bool| AeLayer {
            w: Tensor::randn(&[out, inp], (1.0 / inp as f64).sqrt(), &mut r),
            b: bias.then(|| Tensor::zeros(&[out])),
        };
        let layers = match kind {
            AeKind::Shallow => {
                let enc = layer(latent, input_dim, false);
                let dec = AeLayer {
                    w: Tensor::zeros(&[input_dim, latent]),
                    b: None,
                };
                vec![enc, dec]
            }
            AeKind::Deep { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("autoencoder hidden width must be positive".into()));
                }
                vec![
                    layer(hidden, input_dim, true),
                    layer(latent, hidden, true),
                    layer(hidden, latent, true),
                    layer(input_dim, hidden, true),
                ]
            }
        };
        Ok(TaskAutoencoder { kind, layers })
    }

    pub fn from_layers(kind: AeKind, layers: Vec<AeLayer>) -> Result<Self> {
        let want = match kind {
            AeKind::Shallow => 2,
            AeKind::Deep { .. } => 4,
        };
        let chained = layers.windows(2).all(|w| w[0].w.rows() == w[1].w.cols());
        let biased = layers.iter().all(|l| {
            l.b.as_ref().is_none_or(|b| b.shape() == [l.w.rows()])
                && (l.b.is_some() == matches!(kind, AeKind::Deep { .. }))
        });
        if layers.len() != want || !chained || !biased {
            return Err(Error::Integrity("autoencoder layers do not match their kind".into()));
        }
        let ae = TaskAutoencoder { kind, layers };
        if ae.output_dim() != ae.input_dim() {
            return Err(Error::Integrity("autoencoder output width differs from input".into()));
        }
        Ok(ae)
    }

    pub fn kind(&self) -> AeKind {
        self.kind
    }

    fn is_deep(&self) -> bool {
        matches!(self.kind, AeKind::Deep { .. })
    }

    pub fn layers(&self) -> &[AeLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.layers.len() / 2 - 1].w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            if let Some(b) = &mut l.b {
                out.push(b);
            }
        }
        out
    }

    fn check_width(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("autoencoder input", &[self.input_dim()], &[x.len()]));
        }
        Ok(())
    }

    fn apply(&self, layer: &AeLayer, x: &[f32]) -> Vec<f32> {
        let (out, inp) = (layer.w.rows(), layer.w.cols());
        let w = layer.w.data();
        (0..out)
            .map(|o| {
                let dot: f32 = w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum();
                dot + layer.b.as_ref().map_or(0.0, |b| b.data()[o])
            })
            .collect()
    }

    fn run(&self, x: &[f32], upto: usize) -> Vec<f32> {
        let mut h = x.to_vec();
        let squash = self.is_deep();
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            if squash && i > 0 {
                h.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            h = self.apply(layer, &h);
        }
        h
    }

    /// Latent code of an already squashed input.
    pub fn encode(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_width(x)?;
        Ok(self.run(x, self.layers.len() / 2))
    }

    pub fn reconstruct(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_width(x)?;
        Ok(self.run(x, self.layers.len()))
    }

    /// Mean squared reconstruction error of an already squashed input.
    pub fn loss(&self, x: &[f32]) -> Result<f32> {
        let y = self.reconstruct(x)?;
        Ok(x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / x.len() as f32)
    }

    fn register(&self, tape: &mut Tape) -> Vec<(Var, Option<Var>)> {
        self.layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), l.b.as_ref().map(|b| tape.param(b.clone()))))
            .collect()
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &[(Var, Option<Var>)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in vars.iter().enumerate() {
            if self.is_deep() && i > 0 {
                h = tape.sigmoid(h);
            }
            h = tape.linear(h, w, b)?;
        }
        Ok(h)
    }
}

/// `sigmoid(mean over tokens)` as a `D`-vector.
pub fn ae_input(tokens: &TokenSequence) -> Result<Vec<f32>> {
    let t = tokens.tensor();
    if t.rows() == 0 {
        return Err(Error::Routing("empty token sequence".into()));
    }
    let d = t.cols();
    let mut acc = vec![0.0f32; d];
    for r in 0..t.rows() {
        acc.iter_mut().zip(t.row(r)).for_each(|(a, v)| *a += v);
    }
    let n = t.rows() as f32;
    Ok(acc.into_iter().map(|a| sigmoid(a / n)).collect())
}

/// Stacked autoencoder inputs, `[n, D]`.
pub fn ae_inputs<'a>(tokens: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = tokens.into_iter().map(ae_input).collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Routing("no inputs".into()));
    }
    Tensor::from_rows(&rows)
}

/// Fits `ae` to the rows of `inputs` by mean squared reconstruction error.
/// Returns the mean loss of each epoch.
pub fn train_ae(ae: &mut TaskAutoencoder, inputs: &Tensor, cfg: &AeConfig, seed: u64) -> Result<Vec<f32>> {
    if inputs.cols() != ae.input_dim() {
        return Err(Error::shape("train_ae", &[ae.input_dim()], &[inputs.cols()]));
    }
    let n = inputs.rows();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::with_lr(cfg.lr)
    });
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<Vec<f32>> = chunk.iter().map(|&i| inputs.row(i).to_vec()).collect();
            let mut tape = Tape::new();
            let vars = ae.register(&mut tape);
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let y = ae.forward_tape(&mut tape, &vars, x)?;
            let loss = tape.mse(y, x)?;
            total += tape.value(loss).item() * chunk.len() as f32;
            let flat: Vec<Var> = vars.iter().flat_map(|&(w, b)| std::iter::once(w).chain(b)).collect();
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor> = flat.iter().map(|&v| g.take(v).unwrap()).collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut ae.tensors_mut(), &grefs)?;
        }
        let mean = total / n.max(1) as f32;
        debug!("ae epoch {epoch}: mse {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

pub fn reconstruction_loss(ae: &TaskAutoencoder, tokens: &TokenSequence) -> Result<f32> {
    ae.loss(&ae_input(tokens)?)
}

/// All task autoencoders seen so far, in task order. Never shrinks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterBank {
    aes: Vec<TaskAutoencoder>,
}

impl RouterBank {
    pub fn new() -> Self {
        RouterBank::default()
    }

    pub fn push(&mut self, ae: TaskAutoencoder) -> Result<()> {
        if let Some(first) = self.aes.first() {
            if first.input_dim() != ae.input_dim() {
                return Err(Error::shape("router bank", &[first.input_dim()], &[ae.input_dim()]));
            }
        }
        self.aes.push(ae);
        Ok(())
    }

    pub fn aes(&self) -> &[TaskAutoencoder] {
        &self.aes
    }

    pub fn len(&self) -> usize {
        self.aes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.aes.iter().map(TaskAutoencoder::param_count).sum()
    }

    pub fn losses(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.aes.iter().map(|ae| ae.loss(x)).collect()
    }

    /// Index of the smallest loss among the first `limit` autoencoders.
    pub fn best(&self, x: &[f32], limit: usize) -> Result<usize> {
        let limit = limit.min(self.aes.len());
        if limit == 0 {
            return Err(Error::Routing("router bank is empty".into()));
        }
        let losses: Vec<f32> = self.aes[..limit].iter().map(|ae| ae.loss(x)).collect::<Result<_>>()?;
        Ok(argmin(&losses))
    }
}

/// First index of the minimum; NaN never wins.
pub fn argmin(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Task index to adapter slot table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateMap {
    table: Vec<SlotId>,
}

impl GateMap {
    pub fn new() -> Self {
        GateMap::default()
    }

    pub fn identity(tasks: usize) -> Self {
        GateMap {
            table: (0..tasks).map(SlotId).collect(),
        }
    }

    pub fn from_table(table: Vec<SlotId>) -> Self {
        GateMap { table }
    }

    pub fn table(&self) -> &[SlotId] {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn push(&mut self, slot: SlotId) {
        self.table.push(slot);
    }

    pub fn resolve(&self, task: usize) -> Result<SlotId> {
        self.table.get(task).copied().ok_or(Error::Index {
            what: "gate map task",
            index: task,
            len: self.table.len(),
        })
    }

    /// Tasks currently routed to `slot`.
    pub fn tasks_of(&self, slot: SlotId) -> Vec<usize> {
        (0..self.table.len()).filter(|&t| self.table[t] == slot).collect()
    }

    /// Points `donor` and every task sharing its slot at `target`.
    pub fn remap(&mut self, donor: usize, target: SlotId, bank: &AdapterBank) -> Result<()> {
        if !bank.contains(target) {
            return Err(Error::Integrity(format!("remap target slot {target} is not live")));
        }
        let old = self.resolve(donor)?;
        self.table.iter_mut().filter(|s| **s == old).for_each(|s| *s = target);
        Ok(())
    }

    /// Every entry resolves to a live slot, and every live slot is reached.
    pub fn validate(&self, bank: &AdapterBank) -> Result<()> {
        if let Some(s) = self.table.iter().find(|s| !bank.contains(**s)) {
            return Err(Error::Integrity(format!("gate map entry points at removed slot {s}")));
        }
        if let Some(s) = bank.slots().iter().find(|s| !self.table.contains(&s.id)) {
            return Err(Error::Integrity(format!(
                "slot {} is unreachable from the gate map",
                s.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub gate: Gate,
    /// Task whose autoencoder won.
    pub task: usize,
    pub slot: SlotId,
}

pub fn route(tokens: &TokenSequence, router: &RouterBank, map: &GateMap, bank: &AdapterBank) -> Result<Route> {
    route_input(&ae_input(tokens)?, router, map, bank)
}

/// [`route`] on an already squashed input.
pub fn route_input(x: &[f32], router: &RouterBank, map: &GateMap, bank: &AdapterBank) -> Result<Route> {
    let task = router.best(x, router.len())?;
    let slot = map.resolve(task)?;
    Ok(Route {
        gate: Gate::for_slot(bank, slot)?,
        task,
        slot,
    })
}

/// `[tasks, aes]` mean reconstruction losses, min-max normalized per row.
/// Constant rows become all zero.
pub fn routing_heatmap(router: &RouterBank, eval: &[Tensor]) -> Result<Tensor> {
    if router.is_empty() {
        return Err(Error::Routing("router bank is empty".into()));
    }
    let e = router.len();
    let mut out = Vec::with_capacity(eval.len() * e);
    for (i, set) in eval.iter().enumerate() {
        if set.rows() == 0 {
            return Err(Error::Routing(format!("task {i} has no evaluation data")));
        }
        let mut row = vec![0.0f64; e];
        for r in 0..set.rows() {
            for (acc, l) in row.iter_mut().zip(router.losses(set.row(r))?) {
                *acc += l as f64;
            }
        }
        let n = set.rows() as f64;
        let row: Vec<f64> = row.into_iter().map(|v| v / n).collect();
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend(
            row.iter()
                .map(|&v| if hi > lo { ((v - lo) / (hi - lo)) as f32 } else { 0.0 }),
        );
    }
    Tensor::new(&[eval.len(), e], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterSlot, Capacity};
    use crate::backbone::BackboneConfig;

    fn cfg(d: usize) -> BackboneConfig {
        BackboneConfig {
            image_h: 4,
            image_w: 4,
            channels: 1,
            patch: 2,
            dim: d,
            layers: 1,
            heads: 1,
            mlp_dim: 4,
        }
    }

    fn seq(rows: Vec<Vec<f32>>) -> TokenSequence {
        let d = rows[0].len();
        let mut all = rows.clone();
        while all.len() < 5 {
            all.push(rows[0].clone());
        }
        TokenSequence::new(Tensor::from_rows(&all).unwrap(), &cfg(d)).unwrap()
    }

    #[test]
    fn ae_input_examples() {
        let z = seq(vec![vec![0.0; 3]]);
        assert_eq!(ae_input(&z).unwrap(), vec![0.5; 3]);
        let u = vec![0.3, -1.0, 2.0];
        let same = seq(vec![u.clone()]);
        let got = ae_input(&same).unwrap();
        for (g, v) in got.iter().zip(&u) {
            assert!((g - sigmoid(*v)).abs() < 1e-6);
        }
        let w = vec![1.0, 1.0, -3.0];
        let rows = vec![u.clone(), w.clone(), u.clone(), w.clone(), u.clone()];
        let t = TokenSequence::new(Tensor::from_rows(&rows).unwrap(), &cfg(3)).unwrap();
        let got = ae_input(&t).unwrap();
        for j in 0..3 {
            let m = (3.0 * u[j] as f64 + 2.0 * w[j] as f64) / 5.0;
            assert!((got[j] as f64 - 1.0 / (1.0 + (-m).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut ae = TaskAutoencoder::new(AeKind::Shallow, 3, 3, 0).unwrap();
        ae.layers[0].w = Tensor::eye(3);
        ae.layers[1].w = Tensor::eye(3);
        let x = [0.2, 0.7, 0.9];
        assert_eq!(ae.loss(&x).unwrap(), 0.0);
        ae.layers[0].w = Tensor::zeros(&[3, 3]);
        let want = x.iter().map(|v| v * v).sum::<f32>() / 3.0;
        assert!((ae.loss(&x).unwrap() - want).abs() < 1e-7);
        assert!(ae.loss(&[0.1, 0.2]).is_err());
    }

    fn oracle_loss(ae: &TaskAutoencoder, x: &[f32]) -> f64 {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let deep = matches!(ae.kind(), AeKind::Deep { .. });
        for (i, l) in ae.layers().iter().enumerate() {
            if deep && i > 0 {
                h = h.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            }
            let mut next = vec![0.0; l.w.rows()];
            for (o, n) in next.iter_mut().enumerate() {
                for (j, hv) in h.iter().enumerate() {
                    *n += l.w.data()[o * l.w.cols() + j] as f64 * hv;
                }
                if let Some(b) = &l.b {
                    *n += b.data()[o] as f64;
                }
            }
            h = next;
        }
        x.iter().zip(&h).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for (seed, kind) in [(1, AeKind::Shallow), (2, AeKind::Deep { hidden: 5 })] {
            let ae = TaskAutoencoder::new(kind, 6, 2, seed).unwrap();
            let x = Tensor::uniform(&[6], 0.0, 1.0, &mut rng(seed + 10));
            let got = ae.loss(x.data()).unwrap() as f64;
            assert!((got - oracle_loss(&ae, x.data())).abs() < 1e-6);
            assert_eq!(ae.encode(x.data()).unwrap().len(), 2);
        }
        let deep = TaskAutoencoder::new(AeKind::Deep { hidden: 32 }, 32, 1, 0).unwrap();
        assert_eq!(deep.param_count(), 32 * 32 + 32 + 32 + 1 + 32 + 32 + 32 * 32 + 32);
    }

    #[test]
    fn train_ae_noop_decrease_and_determinism() {
        let x = Tensor::new(&[40, 4], [0.9f32, 0.1, 0.8, 0.3].repeat(40)).unwrap();
        let cfg = AeConfig {
            epochs: 0,
            ..Default::default()
        };
        let mut ae = TaskAutoencoder::new(AeKind::Shallow, 4, 1, 3).unwrap();
        let orig = ae.clone();
        train_ae(&mut ae, &x, &cfg, 0).unwrap();
        assert_eq!(ae, orig);
        let cfg = AeConfig {
            epochs: 30,
            batch_size: 8,
            ..Default::default()
        };
        let losses = train_ae(&mut ae, &x, &cfg, 0).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.1));
        let mut again = orig.clone();
        train_ae(&mut again, &x, &cfg, 0).unwrap();
        assert_eq!(ae, again);
    }

    #[test]
    fn routing_selects_perfect_reconstructor_and_breaks_ties_low() {
        let mut perfect = TaskAutoencoder::new(AeKind::Shallow, 3, 3, 0).unwrap();
        perfect.layers[0].w = Tensor::eye(3);
        perfect.layers[1].w = Tensor::eye(3);
        let other = TaskAutoencoder::new(AeKind::Shallow, 3, 1, 1).unwrap();
        let mut router = RouterBank::new();
        router.push(other.clone()).unwrap();
        router.push(perfect.clone()).unwrap();
        router.push(perfect).unwrap();
        let mut bank = AdapterBank::new(Capacity::Unlimited);
        for id in 0..3 {
            bank.push(AdapterSlot::new(SlotId(id), 1, 1, 3, &[id], 0).unwrap())
                .unwrap();
        }
        let map = GateMap::identity(3);
        let r = route(&seq(vec![vec![0.1, 0.2, -0.3]]), &router, &map, &bank).unwrap();
        assert_eq!(r.task, 1);
        assert_eq!(r.gate.active(), Some(1));

        let empty = RouterBank::new();
        assert!(route(&seq(vec![vec![0.0; 3]]), &empty, &map, &bank).is_err());
    }

    #[test]
    fn remap_examples() {
        let mut bank = AdapterBank::new(Capacity::Unlimited);
        for id in [1, 2] {
            bank.push(AdapterSlot::new(SlotId(id), 1, 1, 3, &[id], 0).unwrap())
                .unwrap();
        }
        let mut map = GateMap::identity(3);
        map.table[0] = SlotId(1);
        let before = map.clone();
        map.remap(2, SlotId(2), &bank).unwrap();
        assert_eq!(map, before);
        map.remap(0, SlotId(2), &bank).unwrap();
        assert_eq!(map.table(), &[SlotId(2), SlotId(2), SlotId(2)]);
        assert!(map.remap(0, SlotId(7), &bank).is_err());
    }

    #[test]
    fn remap_chain_follows_the_newest_slot() {
        let mut bank = AdapterBank::new(Capacity::Finite(3));
        for id in 0..3 {
            bank.push(AdapterSlot::new(SlotId(id), 1, 1, 3, &[id], 0).unwrap())
                .unwrap();
        }
        let mut map = GateMap::identity(3);
        bank.replace(SlotId(0), AdapterSlot::new(SlotId(3), 1, 1, 3, &[3], 0).unwrap())
            .unwrap();
        map.push(SlotId(3));
        map.remap(0, SlotId(3), &bank).unwrap();
        map.validate(&bank).unwrap();
        bank.replace(SlotId(3), AdapterSlot::new(SlotId(4), 1, 1, 3, &[4], 0).unwrap())
            .unwrap();
        map.push(SlotId(4));
        map.remap(3, SlotId(4), &bank).unwrap();
        assert_eq!(map.table(), &[SlotId(4), SlotId(1), SlotId(2), SlotId(4), SlotId(4)]);
        map.validate(&bank).unwrap();
    }

    #[test]
    fn heatmap_shape_and_degenerate_rows() {
        let ae = TaskAutoencoder::new(AeKind::Shallow, 4, 1, 0).unwrap();
        let mut router = RouterBank::new();
        router.push(ae.clone()).unwrap();
        router.push(ae).unwrap();
        let eval = vec![
            Tensor::uniform(&[5, 4], 0.0, 1.0, &mut rng(1)),
            Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng(2)),
            Tensor::uniform(&[2, 4], 0.0, 1.0, &mut rng(3)),
        ];
        let h = routing_heatmap(&router, &eval).unwrap();
        assert_eq!(h.shape(), &[3, 2]);
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(routing_heatmap(&router, &[Tensor::zeros(&[0, 4])]).is_err());
    }

    #[test]
    fn argmin_ties_and_nan() {
        assert_eq!(argmin(&[1.0, 0.5, 0.5]), 1);
        assert_eq!(argmin(&[f32::NAN, 2.0, 3.0]), 1);
        assert_eq!(argmin(&[4.0]), 0);
    }
}
