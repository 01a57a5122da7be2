//! Tiny pre-norm patch transformer used as the frozen feature extractor.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{rng, AdamW, AdamWConfig, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_h: 28,
            image_w: 28,
            channels: 1,
            patch: 7,
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_h,
            self.image_w,
            self.channels,
            self.patch,
            self.dim,
            self.heads,
            self.mlp_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero-sized backbone dimension in {self:?}")));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

/// Splits an `[H, W, C]` image into row-major non-overlapping patches,
/// each flattened as `(row, col, channel)`.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let want = [cfg.image_h, cfg.image_w, cfg.channels];
    if image.shape() != want {
        return Err(Error::shape("patchify", image.shape(), &want));
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.image_w);
    let (gh, gw) = (cfg.image_h / p, cfg.image_w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = (py * p + y) * w + px * p;
                out.extend_from_slice(&src[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, cfg.patch_width()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let want = [cfg.num_patches(), cfg.patch_width()];
    if patches.shape() != want {
        return Err(Error::shape("unpatchify", patches.shape(), &want));
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.image_w);
    let gw = cfg.image_w / p;
    let mut out = vec![0.0; cfg.pixels()];
    for (i, patch) in patches.data().chunks(cfg.patch_width()).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..p {
            let row = (py * p + y) * w + px * p;
            out[row * c..(row + p) * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(&[cfg.image_h, cfg.image_w, cfg.channels], out)
}

/// Embedding-layer output for one image: `[seq_len, dim]`, class token first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(tokens: Tensor, cfg: &BackboneConfig) -> Result<Self> {
        let want = [cfg.seq_len(), cfg.dim];
        if tokens.shape() != want {
            return Err(Error::shape("token sequence", tokens.shape(), &want));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Which attention projection an adapter pair modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query = 0,
    Key = 1,
    Value = 2,
    Output = 3,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];
}

/// Tape handles of one low-rank pair: `a` is `[r, D]`, `b` is `[D, r]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
}

/// Low-rank deltas for every layer, indexed by [`Projection`].
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub layers: Vec<[LoraVars; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All backbone parameters. Projection matrices are stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
}

impl BackboneWeights {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let lin = |o: usize, i: usize, rng: &mut Rng| Tensor::randn(&[o, i], 1.0 / (i as f64).sqrt(), rng);
        let patch_w = lin(d, cfg.patch_width(), rng);
        let cls = Tensor::randn(&[1, d], 0.02, rng);
        let pos = Tensor::randn(&[cfg.seq_len(), d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                wq: lin(d, d, rng),
                bq: Tensor::zeros(&[d]),
                wk: lin(d, d, rng),
                bk: Tensor::zeros(&[d]),
                wv: lin(d, d, rng),
                bv: Tensor::zeros(&[d]),
                wo: lin(d, d, rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w1: lin(cfg.mlp_dim, d, rng),
                b1: Tensor::zeros(&[cfg.mlp_dim]),
                w2: lin(d, cfg.mlp_dim, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(BackboneWeights {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_g: Tensor::ones(&[d]),
            norm_b: Tensor::zeros(&[d]),
        })
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w1,
                &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.norm_g, &self.norm_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.norm_g, &mut self.norm_b]);
        out
    }

    /// Rebuilds weights from tensors in [`tensors`](Self::tensors) order.
    pub fn from_tensors(cfg: &BackboneConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = BackboneWeights::init(cfg, &mut rng(0))?;
        let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if shapes.len() != tensors.len() {
            return Err(Error::shape("backbone tensors", &[shapes.len()], &[tensors.len()]));
        }
        let mut out = template;
        for ((slot, t), shape) in out.tensors_mut().into_iter().zip(tensors).zip(shapes) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("backbone tensor", &shape, t.shape()));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BackboneVars {
            patch_w: reg(&self.patch_w),
            patch_b: reg(&self.patch_b),
            cls: reg(&self.cls),
            pos: reg(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1: (reg(&b.ln1_g), reg(&b.ln1_b)),
                    q: (reg(&b.wq), reg(&b.bq)),
                    k: (reg(&b.wk), reg(&b.bk)),
                    v: (reg(&b.wv), reg(&b.bv)),
                    o: (reg(&b.wo), reg(&b.bo)),
                    ln2: (reg(&b.ln2_g), reg(&b.ln2_b)),
                    fc1: (reg(&b.w1), reg(&b.b1)),
                    fc2: (reg(&b.w2), reg(&b.b2)),
                })
                .collect(),
            norm: (reg(&self.norm_g), reg(&self.norm_b)),
        }
    }
}

struct BlockVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Backbone tensors registered on one tape.
pub struct BackboneVars {
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    norm: (Var, Var),
}

impl BackboneVars {
    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            for (w, bias) in [b.ln1, b.q, b.k, b.v, b.o, b.ln2, b.fc1, b.fc2] {
                out.push(w);
                out.push(bias);
            }
        }
        out.extend([self.norm.0, self.norm.1]);
        out
    }

    /// `[batch * patches, patch_width]` -> `[batch * seq_len, dim]`.
    pub fn embed(&self, tape: &mut Tape, patches: Var, cfg: &BackboneConfig) -> Result<Var> {
        let x = tape.linear(patches, self.patch_w, Some(self.patch_b))?;
        let x = tape.prepend_row(x, self.cls, cfg.num_patches())?;
        tape.add_tiled(x, self.pos)
    }

    /// Runs every attention block; with `adapter` set, each Q/K/V/O
    /// projection adds its low-rank delta.
    pub fn blocks(
        &self,
        tape: &mut Tape,
        mut x: Var,
        cfg: &BackboneConfig,
        adapter: Option<&AdapterVars>,
    ) -> Result<Var> {
        if let Some(a) = adapter {
            if a.layers.len() != self.blocks.len() {
                return Err(Error::Routing(format!(
                    "adapter has {} layers, backbone has {}",
                    a.layers.len(),
                    self.blocks.len()
                )));
            }
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let lora = |p: Projection| adapter.map(|a| a.layers[l][p as usize]);
            let h = tape.layer_norm(x, b.ln1.0, b.ln1.1)?;
            let q = project(tape, h, b.q, lora(Projection::Query))?;
            let k = project(tape, h, b.k, lora(Projection::Key))?;
            let v = project(tape, h, b.v, lora(Projection::Value))?;
            let att = tape.attention(q, k, v, cfg.heads, cfg.seq_len())?;
            let o = project(tape, att, b.o, lora(Projection::Output))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, b.ln2.0, b.ln2.1)?;
            let m = tape.linear(h, b.fc1.0, Some(b.fc1.1))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, b.fc2.0, Some(b.fc2.1))?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Normalized class-token rows, `[batch, dim]`.
    pub fn readout(&self, tape: &mut Tape, x: Var, cfg: &BackboneConfig) -> Result<Var> {
        let t = cfg.seq_len();
        let batch = tape.value(x).rows() / t;
        let idx: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = tape.select_rows(x, &idx)?;
        tape.layer_norm(cls, self.norm.0, self.norm.1)
    }
}

/// `W h + b`, plus `B (A h)` when a low-rank pair is supplied.
fn project(tape: &mut Tape, h: Var, (w, b): (Var, Var), lora: Option<LoraVars>) -> Result<Var> {
    let base = tape.linear(h, w, Some(b))?;
    match lora {
        None => Ok(base),
        Some(LoraVars { a, b: up }) => {
            let low = tape.linear(h, a, None)?;
            let delta = tape.linear(low, up, None)?;
            tape.add(base, delta)
        }
    }
}

/// Backbone weights after pretraining. Never registered as tracked leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    config: BackboneConfig,
    weights: BackboneWeights,
    digest: String,
}

impl FrozenWeights {
    pub fn freeze(config: BackboneConfig, weights: BackboneWeights) -> Result<Self> {
        config.validate()?;
        let digest = weights_digest(&config, &weights);
        Ok(FrozenWeights {
            config,
            weights,
            digest,
        })
    }

    /// Restores frozen weights and checks them against a stored digest.
    pub fn restore(config: BackboneConfig, weights: BackboneWeights, digest: &str) -> Result<Self> {
        let fw = Self::freeze(config, weights)?;
        if fw.digest != digest {
            return Err(Error::Integrity(format!(
                "backbone digest {} does not match stored {digest}",
                fw.digest
            )));
        }
        Ok(fw)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn recompute_digest(&self) -> String {
        weights_digest(&self.config, &self.weights)
    }

    pub fn verify(&self) -> Result<()> {
        let now = self.recompute_digest();
        if now != self.digest {
            return Err(Error::Integrity(format!(
                "frozen backbone changed: {now} != {}",
                self.digest
            )));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        self.weights.register(tape, false)
    }

    pub fn embed(&self, image: &Tensor) -> Result<TokenSequence> {
        Ok(self.embed_batch(std::slice::from_ref(image))?.pop().unwrap())
    }

    pub fn embed_batch(&self, images: &[Tensor]) -> Result<Vec<TokenSequence>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let patches: Vec<Tensor> = images
            .iter()
            .map(|im| patchify(im, &self.config))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = patches.iter().collect();
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let p = tape.constant(Tensor::stack_rows(&refs)?);
        let x = vars.embed(&mut tape, p, &self.config)?;
        let t = self.config.seq_len();
        let d = self.config.dim;
        tape.value(x)
            .data()
            .chunks(t * d)
            .map(|c| TokenSequence::new(Tensor::new(&[t, d], c.to_vec())?, &self.config))
            .collect()
    }

    /// Attention blocks over a single token sequence, returning the output tokens.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.constant(tokens.tensor().clone());
        let y = vars.blocks(&mut tape, x, &self.config, None)?;
        TokenSequence::new(tape.value(y).clone(), &self.config)
    }
}

fn weights_digest(cfg: &BackboneConfig, w: &BackboneWeights) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for t in w.tensors() {
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        h.update(t.le_bytes());
    }
    hex::encode(h.finalize())
}

/// Labeled images for supervised pretraining.
#[derive(Clone, Debug)]
pub struct PretextSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            batch_size: 64,
            optimizer: AdamWConfig::with_lr(3e-3),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f32,
}

/// Supervised pretraining on a pretext set, then freezing.
///
/// `reserved` lists classes used by the continual tasks; any overlap with
/// the pretext labels is rejected.
pub fn pretrain(
    cfg: BackboneConfig,
    mut weights: BackboneWeights,
    data: &PretextSet,
    reserved: &[usize],
    pc: &PretrainConfig,
) -> Result<(FrozenWeights, PretrainReport)> {
    cfg.validate()?;
    let mut classes: Vec<usize> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if let Some(c) = classes.iter().find(|c| reserved.contains(c)) {
        return Err(Error::Config(format!(
            "pretext class {c} overlaps the continual-task classes"
        )));
    }
    if data.images.len() != data.labels.len() {
        return Err(Error::shape("pretext", &[data.images.len()], &[data.labels.len()]));
    }
    let local: Vec<usize> = data.labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
    let patches: Vec<Tensor> = data.images.iter().map(|im| patchify(im, &cfg)).collect::<Result<_>>()?;

    let mut r = rng(pc.seed);
    let mut head_w = Tensor::randn(&[classes.len().max(1), cfg.dim], 0.02, &mut r);
    let mut head_b = Tensor::zeros(&[classes.len().max(1)]);
    let mut opt = AdamW::new(pc.optimizer);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        train_accuracy: 0.0,
    };

    for epoch in 0..pc.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(pc.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = weights.register(&mut tape, true);
            let hw = tape.param(head_w.clone());
            let hb = tape.param(head_b.clone());
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &patches[i]).collect();
            let p = tape.constant(Tensor::stack_rows(&refs)?);
            let x = vars.embed(&mut tape, p, &cfg)?;
            let x = vars.blocks(&mut tape, x, &cfg, None)?;
            let f = vars.readout(&mut tape, x, &cfg)?;
            let logits = tape.linear(f, hw, Some(hb))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| local[i]).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            total += tape.value(loss).item() * chunk.len() as f32;
            let all = vars.vars();
            let mut g = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = all.iter().map(|&v| g.take(v).unwrap()).collect();
            grads.push(g.take(hw).unwrap());
            grads.push(g.take(hb).unwrap());
            let mut params = weights.tensors_mut();
            params.push(&mut head_w);
            params.push(&mut head_b);
            let grefs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut params, &grefs)?;
        }
        let mean = total / patches.len().max(1) as f32;
        debug!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }

    if !patches.is_empty() {
        let mut correct = 0usize;
        for chunk in (0..patches.len()).collect::<Vec<_>>().chunks(256) {
            let mut tape = Tape::new();
            let vars = weights.register(&mut tape, false);
            let hw = tape.constant(head_w.clone());
            let hb = tape.constant(head_b.clone());
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &patches[i]).collect();
            let p = tape.constant(Tensor::stack_rows(&refs)?);
            let x = vars.embed(&mut tape, p, &cfg)?;
            let x = vars.blocks(&mut tape, x, &cfg, None)?;
            let f = vars.readout(&mut tape, x, &cfg)?;
            let logits = tape.linear(f, hw, Some(hb))?;
            let lv = tape.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                if crate::numerics::argmax(lv.row(r)) == local[i] {
                    correct += 1;
                }
            }
        }
        report.train_accuracy = correct as f32 / patches.len() as f32;
    }
    Ok((FrozenWeights::freeze(cfg, weights)?, report))
}
