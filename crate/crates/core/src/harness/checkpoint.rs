//! Binary checkpoints.
//!
//! Layout: magic `RTCL`, `u32` version, `u32` section count, then per
//! section a `u16`-prefixed name, a `u64` payload length, the SHA-256 of
//! the payload, and the payload. All integers and floats are little-endian;
//! tensors are a `u32` rank, `u32` dims, then `f32` data. The whole file is
//! split and hash-checked before any state is rebuilt.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiment::ContinualState;
use crate::adapters::{AdapterBank, AdapterSlot, Capacity, SlotId};
use crate::backbone::{BackboneConfig, BackboneWeights, FrozenWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::memory::{ReplayItem, ReplayMemory, TaskMemory};
use crate::numerics::{rng, Tensor};
use crate::router::{AeKind, AeLayer, GateMap, RouterBank, TaskAutoencoder};

const MAGIC: &[u8; 4] = b"RTCL";
const VERSION: u32 = 1;

const CONFIG: &str = "config";
const BACKBONE: &str = "backbone";
const ADAPTERS: &str = "adapters";
const ROUTER: &str = "router";
const MEMORY: &str = "memory";

fn corrupt(section: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        reason: reason.into(),
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, xs: &[f32]) {
        self.u32(xs.len());
        for x in xs {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn ids(&mut self, xs: &[usize]) {
        self.u32(xs.len());
        for &x in xs {
            self.u64(x as u64);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        self.0.extend(t.le_bytes());
    }
}

struct Reader<'a> {
    section: &'a str,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(section: &'a str, buf: &'a [u8]) -> Self {
        Reader { section, buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(self.section, format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| corrupt(self.section, format!("value {v} too large")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn f32_block(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| corrupt(self.section, "length overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()?;
        self.f32_block(n)
    }
    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(corrupt(self.section, format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(self.section, "tensor size overflow"))?;
        let data = self.f32_block(n)?;
        Tensor::new(&shape, data).map_err(|e| corrupt(self.section, e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(corrupt(
                self.section,
                format!("{} trailing bytes", self.buf.len() - self.at),
            ));
        }
        Ok(())
    }
}

fn container(sections: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(sections.len());
    for (name, payload) in sections {
        w.0.extend((name.len() as u16).to_le_bytes());
        w.0.extend_from_slice(name.as_bytes());
        w.bytes(payload);
        w.0.extend(Sha256::digest(payload));
    }
    w.0
}

/// Splits a container into named, hash-verified payloads.
fn sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    let mut r = Reader::new("header", bytes);
    if r.take(4)? != MAGIC {
        return Err(corrupt("header", "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(corrupt("header", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out: Vec<(String, &[u8])> = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let len = {
            let b = r.take(2)?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("header", "section name is not UTF-8"))?
            .to_string();
        let payload = r.bytes().map_err(|_| corrupt(&name, "truncated payload"))?;
        let hash = r.take(32).map_err(|_| corrupt(&name, "truncated hash"))?;
        if Sha256::digest(payload).as_slice() != hash {
            return Err(corrupt(&name, "hash mismatch"));
        }
        if out.iter().any(|(n, _)| *n == name) {
            return Err(corrupt(&name, "duplicate section"));
        }
        out.push((name, payload));
    }
    r.finish()?;
    Ok(out)
}

fn find<'a>(secs: &[(String, &'a [u8])], name: &str) -> Result<&'a [u8]> {
    secs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| *p)
        .ok_or_else(|| corrupt(name, "missing"))
}

fn encode_backbone(frozen: &FrozenWeights) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&serde_json::to_vec(frozen.config()).expect("config serializes"));
    w.bytes(frozen.digest().as_bytes());
    let ts = frozen.weights().tensors();
    w.u32(ts.len());
    for t in ts {
        w.tensor(t);
    }
    w.0
}

/// Copies decoded tensors into `dst`, which fixes the expected shapes.
fn fill(section: &str, dst: Vec<&mut Tensor>, src: Vec<Tensor>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(corrupt(
            section,
            format!("expected {} tensors, found {}", dst.len(), src.len()),
        ));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(corrupt(
                section,
                format!("tensor shape {:?}, expected {:?}", s.shape(), d.shape()),
            ));
        }
        *d = s;
    }
    Ok(())
}

fn decode_backbone(p: &[u8]) -> Result<FrozenWeights> {
    let mut r = Reader::new(BACKBONE, p);
    let cfg: BackboneConfig = serde_json::from_slice(r.bytes()?).map_err(|e| corrupt(BACKBONE, e.to_string()))?;
    let digest = std::str::from_utf8(r.bytes()?)
        .map_err(|_| corrupt(BACKBONE, "digest is not UTF-8"))?
        .to_string();
    let n = r.u32()?;
    let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mut w = BackboneWeights::init(&cfg, &mut rng(0)).map_err(|e| corrupt(BACKBONE, e.to_string()))?;
    fill(BACKBONE, w.tensors_mut(), tensors)?;
    FrozenWeights::restore(cfg, w, &digest).map_err(|e| corrupt(BACKBONE, e.to_string()))
}

fn encode_adapters(bank: &AdapterBank) -> Vec<u8> {
    let mut w = Writer::default();
    match bank.capacity() {
        Capacity::Unlimited => w.u8(0),
        Capacity::Finite(e) => {
            w.u8(1);
            w.u64(e as u64);
        }
    }
    w.u32(bank.len());
    for s in bank.slots() {
        w.u64(s.id.0 as u64);
        w.u32(s.rank());
        w.u32(s.layers.len());
        w.u32(s.dim());
        w.ids(&s.class_ids);
        for t in s.tensors() {
            w.tensor(t);
        }
    }
    w.0
}

fn decode_adapters(p: &[u8]) -> Result<AdapterBank> {
    let mut r = Reader::new(ADAPTERS, p);
    let capacity = match r.u8()? {
        0 => Capacity::Unlimited,
        1 => Capacity::Finite(r.usize()?),
        t => return Err(corrupt(ADAPTERS, format!("capacity tag {t}"))),
    };
    let n = r.u32()?;
    let mut slots = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let id = SlotId(r.usize()?);
        let (rank, layers, dim) = (r.u32()?, r.u32()?, r.u32()?);
        let classes = r.ids()?;
        let mut slot =
            AdapterSlot::new(id, rank, layers, dim, &classes, 0).map_err(|e| corrupt(ADAPTERS, e.to_string()))?;
        let count = slot.tensors().len();
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        fill(ADAPTERS, slot.tensors_mut(), tensors)?;
        slots.push(slot);
    }
    r.finish()?;
    AdapterBank::from_parts(slots, capacity).map_err(|e| corrupt(ADAPTERS, e.to_string()))
}

fn encode_router(router: &RouterBank, map: &GateMap) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(router.len());
    for ae in router.aes() {
        match ae.kind() {
            AeKind::Shallow => w.u8(0),
            AeKind::Deep { hidden } => {
                w.u8(1);
                w.u32(hidden);
            }
        }
        w.u32(ae.layers().len());
        for l in ae.layers() {
            w.tensor(&l.w);
            match &l.b {
                Some(b) => {
                    w.u8(1);
                    w.tensor(b);
                }
                None => w.u8(0),
            }
        }
    }
    let table: Vec<usize> = map.table().iter().map(|s| s.0).collect();
    w.ids(&table);
    w.0
}

fn decode_router(p: &[u8]) -> Result<(RouterBank, GateMap)> {
    let mut r = Reader::new(ROUTER, p);
    let n = r.u32()?;
    let mut router = RouterBank::new();
    for _ in 0..n {
        let kind = match r.u8()? {
            0 => AeKind::Shallow,
            1 => AeKind::Deep { hidden: r.u32()? },
            t => return Err(corrupt(ROUTER, format!("autoencoder tag {t}"))),
        };
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let w = r.tensor()?;
            let b = match r.u8()? {
                0 => None,
                1 => Some(r.tensor()?),
                t => return Err(corrupt(ROUTER, format!("bias tag {t}"))),
            };
            layers.push(AeLayer { w, b });
        }
        let ae = TaskAutoencoder::from_layers(kind, layers).map_err(|e| corrupt(ROUTER, e.to_string()))?;
        router.push(ae).map_err(|e| corrupt(ROUTER, e.to_string()))?;
    }
    let map = GateMap::from_table(r.ids()?.into_iter().map(SlotId).collect());
    r.finish()?;
    Ok((router, map))
}

fn encode_memory(mem: &ReplayMemory) -> Vec<u8> {
    let mut w = Writer::default();
    let tasks: Vec<_> = mem.tasks().collect();
    w.u32(tasks.len());
    for (task, m) in tasks {
        w.u64(task as u64);
        w.u64(m.budget as u64);
        w.ids(&m.classes);
        w.u32(m.items.len());
        for it in &m.items {
            w.u64(it.label as u64);
            w.f32s(&it.latent);
            w.tensor(it.tokens.tensor());
        }
    }
    w.0
}

fn decode_memory(p: &[u8], cfg: &BackboneConfig) -> Result<ReplayMemory> {
    let mut r = Reader::new(MEMORY, p);
    let mut mem = ReplayMemory::new();
    let n = r.u32()?;
    for _ in 0..n {
        let task = r.usize()?;
        let budget = r.usize()?;
        let classes = r.ids()?;
        let count = r.u32()?;
        let mut items = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let label = r.usize()?;
            let latent = r.f32s()?;
            let tokens = TokenSequence::new(r.tensor()?, cfg).map_err(|e| corrupt(MEMORY, e.to_string()))?;
            items.push(ReplayItem { tokens, label, latent });
        }
        mem.insert(task, TaskMemory { items, budget, classes });
    }
    r.finish()?;
    Ok(mem)
}

/// A file holding only a frozen backbone.
pub fn encode_backbone_file(frozen: &FrozenWeights) -> Vec<u8> {
    container(&[(BACKBONE, encode_backbone(frozen))])
}

/// Reads the backbone section of any checkpoint.
pub fn decode_backbone_file(bytes: &[u8]) -> Result<FrozenWeights> {
    let secs = sections(bytes)?;
    decode_backbone(find(&secs, BACKBONE)?)
}

pub fn encode_state(state: &ContinualState) -> Vec<u8> {
    container(&[
        (CONFIG, state.config.to_text().into_bytes()),
        (BACKBONE, encode_backbone(&state.frozen)),
        (ADAPTERS, encode_adapters(&state.bank)),
        (ROUTER, encode_router(&state.router, &state.gate_map)),
        (MEMORY, encode_memory(&state.memory)),
    ])
}

pub fn decode_state(bytes: &[u8]) -> Result<ContinualState> {
    let secs = sections(bytes)?;
    let text = std::str::from_utf8(find(&secs, CONFIG)?).map_err(|_| corrupt(CONFIG, "not UTF-8"))?;
    let config = ExperimentConfig::from_text(text).map_err(|e| corrupt(CONFIG, e.to_string()))?;
    let frozen = decode_backbone(find(&secs, BACKBONE)?)?;
    if *frozen.config() != config.backbone {
        return Err(corrupt(BACKBONE, "backbone shape differs from the stored config"));
    }
    let bank = decode_adapters(find(&secs, ADAPTERS)?)?;
    let (router, gate_map) = decode_router(find(&secs, ROUTER)?)?;
    if router.len() != gate_map.len() {
        return Err(corrupt(
            ROUTER,
            format!("{} autoencoders but {} gate entries", router.len(), gate_map.len()),
        ));
    }
    gate_map.validate(&bank).map_err(|e| corrupt(ROUTER, e.to_string()))?;
    let memory = decode_memory(find(&secs, MEMORY)?, frozen.config())?;
    Ok(ContinualState {
        config,
        frozen,
        bank,
        router,
        gate_map,
        memory,
    })
}

pub fn save_state(path: &Path, state: &ContinualState) -> Result<()> {
    fs::write(path, encode_state(state))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<ContinualState> {
    decode_state(&fs::read(path)?)
}

pub fn save_backbone(path: &Path, frozen: &FrozenWeights) -> Result<()> {
    fs::write(path, encode_backbone_file(frozen))?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<FrozenWeights> {
    decode_backbone_file(&fs::read(path)?)
}
