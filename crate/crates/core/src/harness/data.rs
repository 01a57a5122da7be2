//! Image datasets: a synthetic motif-glyph generator and an IDX reader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng, Rng, Tensor};

/// Labeled images, each `[H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Samples whose label is in `classes`, in dataset order.
    pub fn filter(&self, classes: &[usize]) -> Dataset {
        let mut out = Dataset::default();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            if classes.contains(&l) {
                out.images.push(im.clone());
                out.labels.push(l);
            }
        }
        out
    }

    /// At most `n` samples of every class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut seen = std::collections::HashMap::new();
        let mut out = Dataset::default();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            let c = seen.entry(l).or_insert(0usize);
            if *c < n {
                *c += 1;
                out.images.push(im.clone());
                out.labels.push(l);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    /// Side of the square motif cell; `size` must be a multiple of it.
    pub cell: usize,
    pub strokes: usize,
    /// Grid cells a class may stamp its motif into.
    pub pool: usize,
    /// Cells of the pool stamped in every image.
    pub stamps: usize,
    /// Width in pixels of a constant border drawn on every image.
    pub frame: usize,
    /// Standard deviation of stroke end-point jitter, in pixels.
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            classes: 16,
            train_per_class: 200,
            test_per_class: 60,
            size: 28,
            cell: 7,
            strokes: 2,
            pool: 8,
            stamps: 6,
            frame: 0,
            jitter: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

struct Prototype {
    strokes: Vec<Stroke>,
    cells: Vec<usize>,
    /// Brings every motif to the same total ink.
    gain: f64,
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn draw_motif(r: &mut Rng, cfg: &GlyphConfig) -> Vec<Stroke> {
    let hi = cfg.cell as f64 - 1.0;
    let min_len = cfg.cell as f64 / 2.0;
    (0..cfg.strokes)
        .map(|_| {
            let a = (r.random_range(0.0..hi), r.random_range(0.0..hi));
            let b = loop {
                let b = (r.random_range(0.0..hi), r.random_range(0.0..hi));
                if ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt() >= min_len {
                    break b;
                }
            };
            Stroke {
                a,
                b,
                width: r.random_range(0.5..0.9),
            }
        })
        .collect()
}

fn motif_cell(strokes: &[Stroke], cell: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..cell * cell)
        .map(|i| ink(strokes, ((i / cell) as f64, (i % cell) as f64)))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

const MOTIF_TRIES: usize = 512;
const MOTIF_INK: f64 = 8.0;

/// Motifs for classes `0..n`. Each class keeps the candidate, out of a
/// seeded batch, least similar to the motifs of lower class ids, so a
/// class looks the same whichever subset of classes is generated.
fn prototypes(n: usize, cfg: &GlyphConfig) -> Vec<Prototype> {
    let grid = cfg.size / cfg.cell;
    let mut chosen = Vec::with_capacity(n);
    let mut cells: Vec<Vec<f64>> = Vec::with_capacity(n);
    for class in 0..n {
        let mut r = rng(derive_seed(cfg.seed, class as u64 + 1));
        let mut best: Option<(f64, Vec<Stroke>, Vec<f64>)> = None;
        for _ in 0..MOTIF_TRIES {
            let m = draw_motif(&mut r, cfg);
            let c = motif_cell(&m, cfg.cell);
            let sim = cells
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>())
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|b| sim < b.0) {
                best = Some((sim, m, c));
            }
        }
        let (_, m, c) = best.expect("at least one motif candidate");
        let total: f64 = (0..cfg.cell * cfg.cell)
            .map(|i| ink(&m, ((i / cfg.cell) as f64, (i % cfg.cell) as f64)))
            .sum();
        let mut pool: Vec<usize> = (0..grid * grid).collect();
        pool.shuffle(&mut rng(derive_seed(cfg.seed ^ 0x706f_6f6c, class as u64)));
        pool.truncate(cfg.pool);
        chosen.push(Prototype {
            strokes: m,
            cells: pool,
            gain: (MOTIF_INK / total).min(1.0),
        });
        cells.push(c);
    }
    chosen
}

fn segment_distance(p: (f64, f64), s: &Stroke) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn ink(strokes: &[Stroke], p: (f64, f64)) -> f64 {
    strokes
        .iter()
        .map(|s| {
            let d = segment_distance(p, s);
            (-d * d / (2.0 * s.width * s.width)).exp()
        })
        .fold(0.0, f64::max)
}

fn glyph_sample(proto: &Prototype, cfg: &GlyphConfig, r: &mut Rng) -> Tensor {
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("jitter");
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("noise");
    let grid = cfg.size / cfg.cell;
    let mut cells = proto.cells.clone();
    cells.shuffle(r);
    let mut px = vec![0.0f64; cfg.size * cfg.size];
    for &c in cells.iter().take(cfg.stamps) {
        let strokes: Vec<Stroke> = proto
            .strokes
            .iter()
            .map(|s| Stroke {
                a: (s.a.0 + jitter.sample(r), s.a.1 + jitter.sample(r)),
                b: (s.b.0 + jitter.sample(r), s.b.1 + jitter.sample(r)),
                width: s.width * r.random_range(0.85..1.15),
            })
            .collect();
        let gain = proto.gain * r.random_range(0.8..1.0);
        let (oy, ox) = ((c / grid) * cfg.cell, (c % grid) * cfg.cell);
        for y in 0..cfg.cell {
            for x in 0..cfg.cell {
                px[(oy + y) * cfg.size + ox + x] = gain * ink(&strokes, (y as f64, x as f64));
            }
        }
    }
    let n = cfg.size;
    for (i, v) in px.iter_mut().enumerate() {
        let (y, x) = (i / n, i % n);
        if y.min(x).min(n - 1 - y).min(n - 1 - x) < cfg.frame {
            *v = 1.0;
        }
    }
    let px = px
        .into_iter()
        .map(|v| (v + noise.sample(r)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(&[cfg.size, cfg.size, 1], px).expect("glyph shape")
}

/// Seeded motif glyphs: every class has a fixed stroke motif that fits one
/// grid cell and a fixed pool of cells. Each image stamps the motif into a
/// random subset of the pool with
/// perturbed end points, width and contrast, plus pixel noise.
pub fn glyphs(cfg: &GlyphConfig) -> DataSplit {
    glyph_classes(cfg, &(0..cfg.classes).collect::<Vec<_>>())
}

/// Glyphs of the given class ids only. A class looks the same whichever
/// set it is generated in.
pub fn glyph_classes(cfg: &GlyphConfig, classes: &[usize]) -> DataSplit {
    let mut split = DataSplit::default();
    let protos = prototypes(classes.iter().max().map_or(0, |m| m + 1), cfg);
    for &class in classes {
        let proto = &protos[class];
        let mut r = rng(derive_seed(cfg.seed ^ 0x6c79_7068, class as u64));
        for i in 0..cfg.train_per_class + cfg.test_per_class {
            let set = if i < cfg.train_per_class {
                &mut split.train
            } else {
                &mut split.test
            };
            set.images.push(glyph_sample(proto, cfg, &mut r));
            set.labels.push(class);
        }
    }
    split
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Config(format!("{}: truncated IDX header", path.display())))
}

fn read_idx(path: &Path, want_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    let (dtype, dims) = ((magic >> 8) & 0xff, (magic & 0xff) as usize);
    if magic >> 16 != 0 || dtype != 0x08 || dims != want_dims {
        return Err(Error::Config(format!(
            "{}: expected an unsigned-byte IDX file with {want_dims} dimensions",
            path.display()
        )));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|i| be_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * dims;
    let n: usize = shape.iter().product();
    let body = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Config(format!("{}: truncated IDX body", path.display())))?;
    Ok((shape, body.to_vec()))
}

/// Reads an IDX image file and its label file.
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (shape, px) = read_idx(images, 3)?;
    let (lshape, lb) = read_idx(labels, 1)?;
    if shape[0] != lshape[0] {
        return Err(Error::Config(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            shape[0],
            labels.display(),
            lshape[0]
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let images = px
        .chunks(h * w)
        .map(|c| Tensor::new(&[h, w, 1], c.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images,
        labels: lb.into_iter().map(usize::from).collect(),
    })
}

/// MNIST-layout directory: `train-images-idx3-ubyte` and friends.
pub fn read_mnist_dir(dir: &Path) -> Result<DataSplit> {
    Ok(DataSplit {
        train: read_idx_pair(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?,
        test: read_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
    })
}
