use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use moacl::harness::config::parse_capacity;
use moacl::harness::metrics::{heatmap_csv, mean_std, read_metrics_csv, write_metrics};
use moacl::harness::{
    load_backbone, load_state, prepare, pretrain_backbone, run_modes, save_backbone, save_state, task_data,
    ExperimentConfig, MetricsLog, RoutingMode,
};
use moacl::router::routing_heatmap;
use moacl::Error;

const BACKBONE_FILE: &str = "backbone.ckpt";
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Parser)]
#[command(
    name = "moacl",
    version,
    about = "Continual learning with a routed bank of low-rank adapters"
)]
struct Cli {
    /// Log progress and fusion events to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone, writing `backbone.ckpt`.
    Pretrain(Common),
    /// Train the full method over the task stream.
    Run(Common),
    /// Train once and compare generative routing with latest-adapter routing.
    Ablate(Common),
    /// Recompute the normalized reconstruction-loss heatmap from a checkpoint.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the `metrics.csv` files of several runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Adapter capacity: a positive count or "unlimited".
    #[arg(long)]
    capacity: Option<String>,
    #[arg(long)]
    replay: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse a pretrained backbone file instead of pretraining.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
                ExperimentConfig::from_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(t) = self.tasks {
            cfg.tasks = t;
        }
        if let Some(c) = &self.capacity {
            cfg.capacity = parse_capacity(c)?;
        }
        if let Some(m) = self.replay {
            cfg.replay = m;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn backbone(&self, cfg: &ExperimentConfig) -> Result<moacl::backbone::FrozenWeights, Failure> {
        match &self.backbone {
            Some(p) => {
                let frozen = load_backbone(p).map_err(|e| in_file(p, e))?;
                if *frozen.config() != cfg.backbone {
                    return Err(Failure::Usage(format!(
                        "{} holds a backbone of a different shape than the config",
                        p.display()
                    )));
                }
                Ok(frozen)
            }
            None => {
                let (frozen, report) = pretrain_backbone(cfg)?;
                info!("pretrained backbone: accuracy {:.4}", report.train_accuracy);
                Ok(frozen)
            }
        }
    }
}

fn in_file(path: &std::path::Path, e: Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn summary(log: &MetricsLog) -> String {
    let mode = match log.routing {
        RoutingMode::Generative => "generative",
        RoutingMode::Latest => "latest",
    };
    let params = log.footprint.last().map_or(0, |f| f.total);
    format!(
        "{mode}: avg accuracy {:.4}, routing fidelity {:.4}, trainable params {params}, fusions {}",
        log.avg_acc,
        log.routing_fidelity(),
        log.fusions.len()
    )
}

fn train(c: &Common, modes: &[RoutingMode]) -> Result<Vec<MetricsLog>, Failure> {
    let cfg = c.config()?;
    let frozen = c.backbone(&cfg)?;
    let data = task_data(&cfg)?;
    let p = prepare(&cfg, &data, &frozen)?;
    let (logs, state) = run_modes(&cfg, &frozen, &p, modes)?;
    fs::create_dir_all(&c.out)?;
    save_state(&c.out.join(CHECKPOINT_FILE), &state)?;
    fs::write(c.out.join("config.txt"), cfg.to_text())?;
    Ok(logs)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = c.config()?;
            let (frozen, report) = pretrain_backbone(&cfg)?;
            fs::create_dir_all(&c.out)?;
            let path = c.out.join(BACKBONE_FILE);
            save_backbone(&path, &frozen)?;
            println!(
                "pretext accuracy {:.4}, final loss {:.6}, digest {}",
                report.train_accuracy,
                report.epoch_losses.last().copied().unwrap_or(f32::NAN),
                frozen.digest()
            );
            println!("wrote {}", path.display());
        }
        Command::Run(c) => {
            let logs = train(&c, &[RoutingMode::Generative])?;
            write_metrics(&c.out, &logs[0])?;
            println!("{}", summary(&logs[0]));
            println!("wrote {}", c.out.display());
        }
        Command::Ablate(c) => {
            let logs = train(&c, &[RoutingMode::Generative, RoutingMode::Latest])?;
            for (log, dir) in logs.iter().zip(["generative", "latest"]) {
                write_metrics(&c.out.join(dir), log)?;
                println!("{}", summary(log));
            }
            println!("routing gap {:.2} points", 100.0 * (logs[0].avg_acc - logs[1].avg_acc));
        }
        Command::Heatmap { checkpoint, out } => {
            let state = load_state(&checkpoint).map_err(|e| in_file(&checkpoint, e))?;
            let data = task_data(&state.config)?;
            let p = prepare(&state.config, &data, &state.frozen)?;
            let heat = routing_heatmap(&state.router, &p.test_inputs)?;
            let rows: Vec<Vec<f32>> = (0..heat.rows()).map(|r| heat.row(r).to_vec()).collect();
            let csv = heatmap_csv(&rows);
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("heatmap.csv"), csv)?;
                    println!("wrote {}", dir.join("heatmap.csv").display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Report { runs } => report(&runs)?,
    }
    Ok(())
}

fn report(runs: &[PathBuf]) -> Result<(), Failure> {
    let mut accs = Vec::new();
    for dir in runs {
        let path = if dir.is_dir() {
            dir.join("metrics.csv")
        } else {
            dir.clone()
        };
        let text =
            fs::read_to_string(&path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let s = read_metrics_csv(&text)?;
        println!(
            "{}: seed {}, tasks {}, avg accuracy {:.4}, trainable params {}",
            path.display(),
            s.seed,
            s.tasks,
            s.avg_acc,
            s.params_trainable
        );
        accs.push(s.avg_acc);
    }
    let (m, sd) = mean_std(&accs);
    println!("mean avg accuracy {:.4} ± {:.4} over {} runs", m, sd, accs.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
