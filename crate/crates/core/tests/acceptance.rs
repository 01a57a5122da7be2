//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use moacl::adapters::{adapted_forward, predict, AdapterBank, AdapterSlot, Capacity, Sample, SlotId};
use moacl::backbone::{BackboneConfig, FrozenWeights, TokenSequence};
use moacl::harness::checkpoint::{decode_state, encode_state};
use moacl::harness::metrics::metrics_csv;
use moacl::harness::{
    prepare, pretrain_backbone, run_continual, run_modes, task_data, ContinualState, ExperimentConfig, MetricsLog,
    Prepared, RoutingMode,
};
use moacl::memory::herd_select;
use moacl::numerics::{grad_check, rng, Rng, Tape, Tensor, Var};
use moacl::router::{route, route_input, AeKind, AeLayer, GateMap, RouterBank, TaskAutoencoder};

const SEEDS: [u64; 3] = [0, 1, 2];
const LORA_PER_ADAPTER: usize = 4 * 2 * 2 * 4 * 32;
const HEAD_PER_CLASS: usize = 32 + 1;
const SHALLOW_AE: usize = 2 * 32;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {}", v.detail);
}

fn mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- gradients

type Build = fn(&mut Tape<f64>, &[Var]) -> moacl::Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn cases() -> Vec<OpCase> {
    let case = |name, shapes: &[&[usize]], build| OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
    };
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_bt", &[&[3, 4], &[5, 4]], |t, v| t.matmul_opt(v[0], v[1], true)),
        case("linear", &[&[3, 4], &[5, 4], &[5]], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case("linear_nobias", &[&[3, 4], &[5, 4]], |t, v| t.linear(v[0], v[1], None)),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[3, 4]], |t, v| Ok(t.scale(v[0], 0.7))),
        case("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1])),
        case("add_tiled", &[&[6, 4], &[2, 4]], |t, v| t.add_tiled(v[0], v[1])),
        case("sigmoid", &[&[3, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        case("gelu", &[&[3, 4]], |t, v| Ok(t.gelu(v[0]))),
        case("softmax0", &[&[3, 4]], |t, v| t.softmax(v[0], 0)),
        case("softmax1", &[&[3, 4]], |t, v| t.softmax(v[0], 1)),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        case("attention", &[&[6, 4], &[6, 4], &[6, 4]], |t, v| {
            t.attention(v[0], v[1], v[2], 2, 3)
        }),
        case("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[2, 0, 1, 2])),
        case("mse", &[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1])),
        case("sum", &[&[3, 4]], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[3, 4]], |t, v| Ok(t.mean(v[0]))),
        case("select_rows", &[&[4, 3]], |t, v| t.select_rows(v[0], &[2, 0, 2])),
        case("select_cols", &[&[3, 4]], |t, v| t.select_cols(v[0], &[3, 1, 1])),
        case("prepend_row", &[&[4, 3], &[3]], |t, v| t.prepend_row(v[0], v[1], 2)),
    ]
}

/// `sum(op(params) * R)` with a fixed random `R`, so every output element
/// contributes a distinct weight.
fn projected(build: Build, seed: u64) -> impl Fn(&mut Tape<f64>, &[Var]) -> moacl::Result<Var> {
    move |t, v| {
        let out = build(t, v)?;
        let shape = t.value(out).shape().to_vec();
        let r = t.constant(Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng(seed)));
        let y = t.mul(out, r)?;
        Ok(t.sum(y))
    }
}

fn gradient_integrity() -> Verdict {
    let clock = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for (ci, case) in cases().iter().enumerate() {
        for trial in 0..20u64 {
            let mut r = rng(1000 * ci as u64 + trial);
            let params: Vec<Tensor<f64>> = case
                .shapes
                .iter()
                .map(|s| Tensor::<f64>::uniform(s, -1.5, 1.5, &mut r))
                .collect();
            match grad_check(projected(case.build, r.random()), &params, 1e-4, 1e-3) {
                Ok(rep) => {
                    if rep.max_rel_error > worst.0 {
                        worst = (rep.max_rel_error, case.name);
                    }
                    if !rep.passed {
                        failed.push(format!("{}#{trial}", case.name));
                    }
                }
                Err(e) => failed.push(format!("{}#{trial}: {e}", case.name)),
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let ok = failed.is_empty() && secs < 30.0;
    verdict(
        ok,
        format!(
            "{} ops x 20 trials, worst rel err {:.2e} ({}), {secs:.2}s, failures {:?}",
            cases().len(),
            worst.0,
            worst.1,
            failed
        ),
    )
}

// ---------------------------------------------------------------- zero delta

fn zero_delta(frozen: &FrozenWeights) -> Verdict {
    let cfg = *frozen.config();
    let mut r = rng(77);
    let mut worst = 0.0f32;
    for i in 0..100u64 {
        let tokens = TokenSequence::new(Tensor::randn(&[cfg.seq_len(), cfg.dim], 1.0, &mut r), &cfg).unwrap();
        let slot = AdapterSlot::new(SlotId(0), 4, cfg.layers, cfg.dim, &[0, 1], i).unwrap();
        let a = adapted_forward(&slot, &tokens, frozen).unwrap();
        let b = frozen.forward(&tokens).unwrap();
        worst = worst.max(a.tensor().max_abs_diff(b.tensor()));
    }
    verdict(
        worst <= 1e-6,
        format!("max |adapted - frozen| = {worst:.3e} over 100 inputs"),
    )
}

// ---------------------------------------------------------------- split runs

struct SplitRun {
    generative: MetricsLog,
    latest: Option<MetricsLog>,
    state: ContinualState,
}

struct SplitSuite {
    /// Keyed by `(capacity, replay, seed)`.
    runs: BTreeMap<(usize, usize, u64), SplitRun>,
    /// Pretraining, embedding and the E=5 run of seed 0.
    end_to_end_secs: f64,
    frozen: FrozenWeights,
}

fn split_config(capacity: usize, replay: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        capacity: Capacity::Finite(capacity),
        replay,
        seed,
        ..ExperimentConfig::default()
    }
}

fn split_suite() -> SplitSuite {
    let clock = Instant::now();
    let base = ExperimentConfig::default();
    let (frozen, _) = pretrain_backbone(&base).unwrap();
    let mut runs = BTreeMap::new();
    let mut end_to_end_secs = 0.0;
    for &seed in &SEEDS {
        let cfg = split_config(5, 64, seed);
        let data = task_data(&cfg).unwrap();
        let p = prepare(&cfg, &data, &frozen).unwrap();
        let (mut logs, state) = run_modes(&cfg, &frozen, &p, &[RoutingMode::Generative, RoutingMode::Latest]).unwrap();
        if seed == 0 {
            end_to_end_secs = clock.elapsed().as_secs_f64();
        }
        let latest = logs.pop();
        let generative = logs.pop().unwrap();
        eprintln!("seed {seed} E=5: avg {:.4}", generative.avg_acc);
        runs.insert(
            (5, 64, seed),
            SplitRun {
                generative,
                latest,
                state,
            },
        );
        for (e, m) in [(3, 64), (2, 64), (3, 16), (3, 32)] {
            let cfg = split_config(e, m, seed);
            let (generative, state) = run_continual(&cfg, &frozen, &p).unwrap();
            eprintln!("seed {seed} E={e} M={m}: avg {:.4}", generative.avg_acc);
            runs.insert(
                (e, m, seed),
                SplitRun {
                    generative,
                    latest: None,
                    state,
                },
            );
        }
    }
    SplitSuite {
        runs,
        end_to_end_secs,
        frozen,
    }
}

impl SplitSuite {
    fn run(&self, e: usize, m: usize, seed: u64) -> &SplitRun {
        &self.runs[&(e, m, seed)]
    }

    fn mean_avg(&self, e: usize, m: usize) -> f64 {
        let accs: Vec<f32> = SEEDS.iter().map(|&s| self.run(e, m, s).generative.avg_acc).collect();
        mean(&accs)
    }
}

fn task_isolation(s: &SplitSuite) -> Verdict {
    let mut bad = Vec::new();
    for &seed in &SEEDS {
        let log = &s.run(5, 64, seed).generative;
        for (t, (a, b)) in log.forced_after_task.iter().zip(&log.forced_final).enumerate() {
            if a.to_bits() != b.to_bits() {
                bad.push(format!("seed {seed} task {t}: {a} -> {b}"));
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!("E=5, {} seeds, changed forced accuracies {:?}", SEEDS.len(), bad),
    )
}

fn routing_fidelity(s: &SplitSuite) -> Verdict {
    let log = &s.run(5, 64, 0).generative;
    let fid = log.routing_fidelity();
    let diagonal = log.heatmap.iter().enumerate().all(|(i, row)| {
        let min = row.iter().cloned().fold(f32::INFINITY, f32::min);
        row.iter().position(|&v| v == min) == Some(i)
    });
    verdict(
        fid >= 0.95 && diagonal && s.end_to_end_secs < 300.0,
        format!(
            "fidelity {fid:.4}, heatmap argmin on diagonal {diagonal}, end-to-end {:.1}s",
            s.end_to_end_secs
        ),
    )
}

fn routing_gap(s: &SplitSuite) -> Verdict {
    let gaps: Vec<f32> = SEEDS
        .iter()
        .map(|&seed| {
            let r = s.run(5, 64, seed);
            r.generative.avg_acc - r.latest.as_ref().unwrap().avg_acc
        })
        .collect();
    let g = mean(&gaps);
    verdict(
        g >= 0.20,
        format!("mean generative - latest = {g:.4} (per seed {gaps:?})"),
    )
}

fn capacity_order(s: &SplitSuite) -> Verdict {
    let (e5, e3, e2) = (s.mean_avg(5, 64), s.mean_avg(3, 64), s.mean_avg(2, 64));
    verdict(e5 >= e3 && e3 >= e2, format!("E5 {e5:.4} >= E3 {e3:.4} >= E2 {e2:.4}"))
}

fn replay_order(s: &SplitSuite) -> Verdict {
    let (a, b, c) = (s.mean_avg(3, 16), s.mean_avg(3, 32), s.mean_avg(3, 64));
    verdict(a <= b && b <= c, format!("E=3: M16 {a:.4} <= M32 {b:.4} <= M64 {c:.4}"))
}

fn footprint(s: &SplitSuite) -> Verdict {
    let mut bad = Vec::new();
    for e in [5, 3, 2] {
        let run = s.run(e, 64, 0);
        let log = &run.generative;
        for (t, f) in log.footprint.iter().enumerate() {
            let n = (t + 1).min(e);
            let lora = n * LORA_PER_ADAPTER;
            let total = lora + 2 * (t + 1) * HEAD_PER_CLASS + (t + 1) * SHALLOW_AE;
            if f.adapters != n || f.lora != lora || f.total != total {
                bad.push(format!("E={e} task {t}: {f:?}, expected lora {lora} total {total}"));
            }
        }
        let last = log.footprint.last().unwrap();
        let state = &run.state;
        if state.footprint() != *last || state.bank.len() != last.adapters || state.router.len() != log.footprint.len()
        {
            bad.push(format!("E={e}: final state disagrees with last footprint"));
        }
    }
    verdict(bad.is_empty(), format!("E in {{5,3,2}}, mismatches {bad:?}"))
}

fn probe_predictions(state: &ContinualState, p: &Prepared) -> Vec<(usize, usize, SlotId, Vec<u32>)> {
    let mut out = Vec::new();
    for test in &p.test {
        for s in test.iter().step_by(15) {
            let r = route(&s.tokens, &state.router, &state.gate_map, &state.bank).unwrap();
            let pr = predict(&s.tokens, &r.gate, &state.bank, &state.frozen).unwrap();
            out.push((
                r.task,
                pr.label,
                pr.slot,
                pr.probs.iter().map(|v| v.to_bits()).collect(),
            ));
        }
    }
    out
}

fn determinism(s: &SplitSuite) -> Verdict {
    let cfg = split_config(5, 64, 0);
    let (frozen, _) = pretrain_backbone(&cfg).unwrap();
    let same_backbone = frozen.digest() == s.frozen.digest();
    let data = task_data(&cfg).unwrap();
    let p = prepare(&cfg, &data, &frozen).unwrap();
    let (log, state) = run_continual(&cfg, &frozen, &p).unwrap();
    let first = s.run(5, 64, 0);
    let csv_same = metrics_csv(&log) == metrics_csv(&first.generative);
    let bytes = encode_state(&first.state);
    let decoded = decode_state(&bytes).unwrap();
    let round_trip = encode_state(&decoded) == bytes && encode_state(&state) == bytes;
    let probes = probe_predictions(&first.state, &p) == probe_predictions(&decoded, &p);
    verdict(
        same_backbone && csv_same && round_trip && probes,
        format!(
            "backbone digest equal {same_backbone}, metrics.csv equal {csv_same}, \
             checkpoint bytes equal {round_trip}, probe predictions equal {probes}"
        ),
    )
}

// ---------------------------------------------------------------- permutation

fn permutation_retention() -> Verdict {
    let base = ExperimentConfig::permutation();
    let (frozen, _) = pretrain_backbone(&base).unwrap();
    let mut first = Vec::new();
    let mut last = Vec::new();
    for &seed in &SEEDS {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let data = task_data(&cfg).unwrap();
        let p = prepare(&cfg, &data, &frozen).unwrap();
        let (log, _) = run_continual(&cfg, &frozen, &p).unwrap();
        eprintln!("permutation seed {seed}: running avg {:?}", log.running_avg);
        first.push(log.running_avg[0]);
        last.push(*log.running_avg.last().unwrap());
    }
    let (a, b) = (mean(&first), mean(&last));
    verdict(
        (a - b).abs() <= 0.05,
        format!(
            "after first task {a:.4}, after task {} {b:.4}, |diff| {:.4}",
            base.tasks,
            (a - b).abs()
        ),
    )
}

// ---------------------------------------------------------------- oracles

fn random_layer(out: usize, inp: usize, bias: bool, r: &mut Rng) -> AeLayer {
    AeLayer {
        w: Tensor::randn(&[out, inp], 0.6, r),
        b: bias.then(|| Tensor::randn(&[out], 0.3, r)),
    }
}

fn random_ae(dim: usize, r: &mut Rng) -> TaskAutoencoder {
    let latent = r.random_range(1..=3);
    if r.random_bool(0.5) {
        let layers = vec![random_layer(latent, dim, false, r), random_layer(dim, latent, false, r)];
        TaskAutoencoder::from_layers(AeKind::Shallow, layers).unwrap()
    } else {
        let h = r.random_range(latent..=8);
        let layers = vec![
            random_layer(h, dim, true, r),
            random_layer(latent, h, true, r),
            random_layer(h, latent, true, r),
            random_layer(dim, h, true, r),
        ];
        TaskAutoencoder::from_layers(AeKind::Deep { hidden: h }, layers).unwrap()
    }
}

fn sigmoid64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Straight f64 evaluation of the layers, stopping after `upto` of them.
fn ae_forward64(ae: &TaskAutoencoder, x: &[f64], upto: usize) -> Vec<f64> {
    let deep = matches!(ae.kind(), AeKind::Deep { .. });
    let mut h = x.to_vec();
    for (i, l) in ae.layers()[..upto].iter().enumerate() {
        if deep && i > 0 {
            h = h.into_iter().map(sigmoid64).collect();
        }
        let (rows, cols) = (l.w.rows(), l.w.cols());
        h = (0..rows)
            .map(|o| {
                let dot: f64 = (0..cols).map(|c| l.w.data()[o * cols + c] as f64 * h[c]).sum();
                dot + l.b.as_ref().map_or(0.0, |b| b.data()[o] as f64)
            })
            .collect();
    }
    h
}

fn squash64(tokens: &TokenSequence) -> Vec<f64> {
    let t = tokens.tensor();
    (0..t.cols())
        .map(|c| sigmoid64((0..t.rows()).map(|r| t.row(r)[c] as f64).sum::<f64>() / t.rows() as f64))
        .collect()
}

fn herding_oracle() -> Verdict {
    let cfg = BackboneConfig::default();
    let mut r = rng(8);
    let mut bad = Vec::new();
    for trial in 0..50 {
        let ae = random_ae(cfg.dim, &mut r);
        let n = r.random_range(20..=200);
        let mut class_pool: Vec<usize> = (0..10).collect();
        class_pool.shuffle(&mut r);
        let classes: Vec<usize> = class_pool[..r.random_range(1..=4)].to_vec();
        let budget = r.random_range(classes.len()..=3 * classes.len() + 40);
        let data: Vec<Sample> = (0..n)
            .map(|_| Sample {
                tokens: TokenSequence::new(Tensor::randn(&[cfg.seq_len(), cfg.dim], 1.0, &mut r), &cfg).unwrap(),
                label: *classes.choose(&mut r).unwrap(),
            })
            .collect();

        let latents: Vec<Vec<f64>> = data
            .iter()
            .map(|s| ae_forward64(&ae, &squash64(&s.tokens), ae.layers().len() / 2))
            .collect();
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        let u = sorted.len();
        let mut expected = Vec::new();
        for (k, &class) in sorted.iter().enumerate() {
            let quota = budget / u + usize::from(k < budget % u);
            let members: Vec<usize> = (0..n).filter(|&i| data[i].label == class).collect();
            if members.is_empty() {
                continue;
            }
            let dim = latents[0].len();
            let center: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|&i| latents[i][j]).sum::<f64>() / members.len() as f64)
                .collect();
            let mut ranked: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| {
                    let d: f64 = latents[i].iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d.sqrt(), i)
                })
                .collect();
            ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expected.extend(ranked.into_iter().take(quota).map(|(_, i)| i));
        }

        let mem = herd_select(&ae, &data, &classes, budget).unwrap();
        let matches = mem.items.len() == expected.len()
            && mem
                .items
                .iter()
                .zip(&expected)
                .all(|(item, &i)| item.label == data[i].label && item.tokens == data[i].tokens);
        if !matches {
            bad.push(trial);
        }
    }
    verdict(
        bad.is_empty(),
        format!("50 random tasks vs f64 full sort, mismatched trials {bad:?}"),
    )
}

fn routing_oracle() -> Verdict {
    let dim = 8;
    let mut r = rng(9);
    let mut bad = Vec::new();
    let mut ties = 0;
    for trial in 0..100 {
        let tasks = r.random_range(1..=6);
        let mut aes: Vec<TaskAutoencoder> = Vec::new();
        for _ in 0..tasks {
            if !aes.is_empty() && r.random_bool(0.3) {
                let j = r.random_range(0..aes.len());
                aes.push(aes[j].clone());
            } else {
                aes.push(random_ae(dim, &mut r));
            }
        }
        let mut router = RouterBank::new();
        aes.iter().for_each(|ae| router.push(ae.clone()).unwrap());
        let slots = r.random_range(1..=tasks);
        let mut bank = AdapterBank::new(Capacity::Unlimited);
        let ids: Vec<usize> = (0..slots).map(|j| 3 * j + 1).collect();
        for (j, &id) in ids.iter().enumerate() {
            bank.push(AdapterSlot::new(SlotId(id), 1, 1, 4, &[j], j as u64).unwrap())
                .unwrap();
        }
        let map = GateMap::from_table((0..tasks).map(|_| SlotId(*ids.choose(&mut r).unwrap())).collect());
        let x: Vec<f32> = (0..dim).map(|_| r.random_range(0.0..1.0)).collect();

        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let losses: Vec<f64> = aes
            .iter()
            .map(|ae| {
                let y = ae_forward64(ae, &x64, ae.layers().len());
                x64.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dim as f64
            })
            .collect();
        let best = (0..tasks).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
        if (0..tasks).filter(|&i| losses[i] == losses[best]).count() > 1 {
            ties += 1;
        }
        let slot = map.table()[best];
        let pos = ids.iter().position(|&id| SlotId(id) == slot).unwrap();
        let mut one_hot = vec![0.0f32; slots];
        one_hot[pos] = 1.0;

        let got = route_input(&x, &router, &map, &bank).unwrap();
        if got.task != best || got.slot != slot || got.gate.weights() != one_hot.as_slice() {
            bad.push(trial);
        }
    }
    verdict(
        bad.is_empty(),
        format!("100 random banks vs f64 enumeration ({ties} with exact ties), mismatched trials {bad:?}"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut check = |id: usize, name: &str, v: Verdict| {
        report(id, name, &v);
        failed += usize::from(!v.pass);
    };
    check(1, "gradient integrity", gradient_integrity());
    let suite = split_suite();
    check(2, "zero-delta adapter", zero_delta(&suite.frozen));
    check(3, "task isolation", task_isolation(&suite));
    check(4, "routing fidelity", routing_fidelity(&suite));
    check(5, "routing matters", routing_gap(&suite));
    check(6, "capacity tradeoff", capacity_order(&suite));
    check(7, "replay budget", replay_order(&suite));
    check(8, "herding oracle", herding_oracle());
    check(9, "routing oracle", routing_oracle());
    check(10, "parameter footprint", footprint(&suite));
    check(11, "permutation retention", permutation_retention());
    check(12, "determinism", determinism(&suite));
    if failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
