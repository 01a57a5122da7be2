//! Experiment configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::Capacity;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::router::AeKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Split,
    Permutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    /// Directory with MNIST-layout IDX files.
    Idx(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DataSource,
    pub tasks: usize,
    /// Task classes in the stream: split across tasks, or shared by every
    /// permutation.
    pub classes: usize,
    pub identity_first: bool,
    pub capacity: Capacity,
    pub replay: usize,
    pub alpha: f32,
    pub rank: usize,
    pub ae_kind: AeKind,
    pub ae_latent: usize,
    pub lr_adapter: f64,
    pub lr_ae: f64,
    pub weight_decay: f64,
    pub batch_train: usize,
    pub batch_test: usize,
    pub batch_ae: usize,
    pub batch_replay: usize,
    pub epochs_adapter: usize,
    pub epochs_ae: usize,
    pub epochs_distill: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub glyph_seed: u64,
    pub glyph_frame: usize,
    pub glyph_pool: usize,
    pub glyph_stamps: usize,
    pub glyph_jitter: f64,
    pub glyph_noise: f64,
    pub pretext_classes: usize,
    pub pretext_per_class: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub backbone_seed: u64,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Split,
            dataset: DataSource::Synthetic,
            tasks: 5,
            classes: 10,
            identity_first: false,
            capacity: Capacity::Finite(5),
            replay: 64,
            alpha: 0.5,
            rank: 4,
            ae_kind: AeKind::Shallow,
            ae_latent: 1,
            lr_adapter: 1e-3,
            lr_ae: 5e-3,
            weight_decay: 0.01,
            batch_train: 128,
            batch_test: 1,
            batch_ae: 32,
            batch_replay: 32,
            epochs_adapter: 20,
            epochs_ae: 10,
            epochs_distill: 20,
            train_per_class: 200,
            test_per_class: 60,
            glyph_seed: 0,
            glyph_frame: 0,
            glyph_pool: 8,
            glyph_stamps: 6,
            glyph_jitter: 0.3,
            glyph_noise: 0.05,
            pretext_classes: 6,
            pretext_per_class: 200,
            pretrain_epochs: 8,
            pretrain_lr: 3e-3,
            backbone_seed: 0,
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_capacity(value: &str) -> Result<Capacity> {
    if value.eq_ignore_ascii_case("unlimited") {
        return Ok(Capacity::Unlimited);
    }
    let e: usize = parse("capacity", value)?;
    if e == 0 {
        return Err(Error::Config("capacity must be at least 1 or \"unlimited\"".into()));
    }
    Ok(Capacity::Finite(e))
}

impl ExperimentConfig {
    /// Defaults suited to the permutation stream.
    pub fn permutation() -> Self {
        ExperimentConfig {
            mode: Mode::Permutation,
            tasks: 10,
            capacity: Capacity::Unlimited,
            ae_kind: AeKind::Deep { hidden: 32 },
            train_per_class: 60,
            test_per_class: 30,
            glyph_frame: 1,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => {
                self.mode = match v {
                    "split" => Mode::Split,
                    "permutation" => Mode::Permutation,
                    _ => return Err(Error::Config(format!("unknown mode {v:?}"))),
                }
            }
            "dataset" => {
                self.dataset = match v.strip_prefix("idx:") {
                    Some(dir) => DataSource::Idx(PathBuf::from(dir)),
                    None if v == "synthetic" => DataSource::Synthetic,
                    None => return Err(Error::Config(format!("unknown dataset {v:?}"))),
                }
            }
            "tasks" => self.tasks = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "identity_first" => self.identity_first = parse(key, v)?,
            "capacity" => self.capacity = parse_capacity(v)?,
            "replay" => self.replay = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "ae_kind" => {
                self.ae_kind = match v {
                    "shallow" => AeKind::Shallow,
                    "deep" => AeKind::Deep { hidden: 32 },
                    _ => match v.strip_prefix("deep:") {
                        Some(h) => AeKind::Deep { hidden: parse(key, h)? },
                        None => return Err(Error::Config(format!("unknown ae_kind {v:?}"))),
                    },
                }
            }
            "ae_latent" => self.ae_latent = parse(key, v)?,
            "lr_adapter" => self.lr_adapter = parse(key, v)?,
            "lr_ae" => self.lr_ae = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_train" => self.batch_train = parse(key, v)?,
            "batch_test" => self.batch_test = parse(key, v)?,
            "batch_ae" => self.batch_ae = parse(key, v)?,
            "batch_replay" => self.batch_replay = parse(key, v)?,
            "epochs_adapter" => self.epochs_adapter = parse(key, v)?,
            "epochs_ae" => self.epochs_ae = parse(key, v)?,
            "epochs_distill" => self.epochs_distill = parse(key, v)?,
            "train_per_class" => self.train_per_class = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "glyph_seed" => self.glyph_seed = parse(key, v)?,
            "glyph_frame" => self.glyph_frame = parse(key, v)?,
            "glyph_pool" => self.glyph_pool = parse(key, v)?,
            "glyph_stamps" => self.glyph_stamps = parse(key, v)?,
            "glyph_jitter" => self.glyph_jitter = parse(key, v)?,
            "glyph_noise" => self.glyph_noise = parse(key, v)?,
            "pretext_classes" => self.pretext_classes = parse(key, v)?,
            "pretext_per_class" => self.pretext_per_class = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "backbone_seed" => self.backbone_seed = parse(key, v)?,
            "dim" => self.backbone.dim = parse(key, v)?,
            "layers" => self.backbone.layers = parse(key, v)?,
            "heads" => self.backbone.heads = parse(key, v)?,
            "mlp_dim" => self.backbone.mlp_dim = parse(key, v)?,
            "patch" => self.backbone.patch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Starts from the defaults of the mode named in `text` (if any).
    pub fn from_text(text: &str) -> Result<Self> {
        let permutation = text.lines().any(|l| {
            let l = l.split('#').next().unwrap_or("");
            l.split_once('=')
                .is_some_and(|(k, v)| k.trim() == "mode" && v.trim() == "permutation")
        });
        let mut cfg = if permutation {
            ExperimentConfig::permutation()
        } else {
            ExperimentConfig::default()
        };
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            Mode::Split => "split",
            Mode::Permutation => "permutation",
        };
        let dataset = match &self.dataset {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Idx(p) => format!("idx:{}", p.display()),
        };
        let ae_kind = match self.ae_kind {
            AeKind::Shallow => "shallow".to_string(),
            AeKind::Deep { hidden } => format!("deep:{hidden}"),
        };
        let b = &self.backbone;
        let rows: Vec<(&str, String)> = vec![
            ("mode", mode.into()),
            ("dataset", dataset),
            ("tasks", self.tasks.to_string()),
            ("classes", self.classes.to_string()),
            ("identity_first", self.identity_first.to_string()),
            ("capacity", self.capacity.to_string()),
            ("replay", self.replay.to_string()),
            ("alpha", self.alpha.to_string()),
            ("rank", self.rank.to_string()),
            ("ae_kind", ae_kind),
            ("ae_latent", self.ae_latent.to_string()),
            ("lr_adapter", self.lr_adapter.to_string()),
            ("lr_ae", self.lr_ae.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_train", self.batch_train.to_string()),
            ("batch_test", self.batch_test.to_string()),
            ("batch_ae", self.batch_ae.to_string()),
            ("batch_replay", self.batch_replay.to_string()),
            ("epochs_adapter", self.epochs_adapter.to_string()),
            ("epochs_ae", self.epochs_ae.to_string()),
            ("epochs_distill", self.epochs_distill.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("glyph_seed", self.glyph_seed.to_string()),
            ("glyph_frame", self.glyph_frame.to_string()),
            ("glyph_pool", self.glyph_pool.to_string()),
            ("glyph_stamps", self.glyph_stamps.to_string()),
            ("glyph_jitter", self.glyph_jitter.to_string()),
            ("glyph_noise", self.glyph_noise.to_string()),
            ("pretext_classes", self.pretext_classes.to_string()),
            ("pretext_per_class", self.pretext_per_class.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("dim", b.dim.to_string()),
            ("layers", b.layers.to_string()),
            ("heads", b.heads.to_string()),
            ("mlp_dim", b.mlp_dim.to_string()),
            ("patch", b.patch.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.tasks == 0 {
            return fail("tasks must be at least 1");
        }
        if self.capacity == Capacity::Finite(0) {
            return fail("capacity must be at least 1 or \"unlimited\"");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if self.lr_adapter <= 0.0 || self.lr_ae <= 0.0 || self.pretrain_lr <= 0.0 {
            return fail("learning rates must be positive");
        }
        if self.rank == 0 || self.ae_latent == 0 {
            return fail("rank and ae_latent must be positive");
        }
        if self.batch_test != 1 {
            return fail("batch_test must be 1: routing is decided per sample");
        }
        if self.batch_train == 0 || self.batch_ae == 0 || self.batch_replay == 0 {
            return fail("batch sizes must be positive");
        }
        if self.classes == 0 {
            return fail("classes must be positive");
        }
        if self.mode == Mode::Split && !self.classes.is_multiple_of(self.tasks) {
            return fail("classes must divide evenly across tasks in split mode");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("train_per_class and test_per_class must be positive");
        }
        if self.fusion_possible() && self.replay < self.classes_per_task() {
            return fail("replay must hold at least one exemplar per class");
        }
        self.backbone.validate()?;
        let grid = (self.backbone.image_h / self.backbone.patch).pow(2);
        if self.dataset == DataSource::Synthetic
            && !(self.glyph_stamps >= 1 && self.glyph_stamps <= self.glyph_pool && self.glyph_pool <= grid)
        {
            return fail("glyphs need 1 <= glyph_stamps <= glyph_pool <= number of patches");
        }
        Ok(())
    }

    pub fn classes_per_task(&self) -> usize {
        match self.mode {
            Mode::Split => self.classes / self.tasks.max(1),
            Mode::Permutation => self.classes,
        }
    }

    pub fn fusion_possible(&self) -> bool {
        matches!(self.capacity, Capacity::Finite(e) if e < self.tasks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::permutation();
        cfg.capacity = Capacity::Finite(3);
        cfg.alpha = 0.25;
        cfg.dataset = DataSource::Idx(PathBuf::from("/data/mnist"));
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_and_validation() {
        assert!(ExperimentConfig::from_text("bogus = 1").is_err());
        assert!(ExperimentConfig::from_text("tasks").is_err());
        assert!(ExperimentConfig::from_text("capacity = 0").is_err());
        let cfg = ExperimentConfig::from_text("# comment\ncapacity = unlimited\nseed = 4 # trailing\n").unwrap();
        assert_eq!(cfg.capacity, Capacity::Unlimited);
        assert_eq!(cfg.seed, 4);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.classes = 9;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.batch_test = 4;
        assert!(bad.validate().is_err());
    }
}
