//! Command-line surface for the channel-pruning toolkit.
//!
//! Each subcommand covers one pipeline stage and exchanges the file formats
//! defined by the library (model containers, `stats.json`, `masks.json`);
//! `run-all` drives the whole pipeline from a single TOML config. Commands
//! never mutate their input files. Exit codes: 0 success, 1 pipeline failure,
//! 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnprune::arch;
use attnprune::attention::MitigationSchedule;
use attnprune::cost;
use attnprune::graph::NetworkGraph;
use attnprune::io::{load_model, save_model};
use attnprune::pipeline::data::CIFAR10_NORM;
use attnprune::pipeline::{
    load_cifar10_binary, make_synth_dataset, run_all, AugmentCfg, Dataset, RunConfig,
};
use attnprune::pipeline::train::{self, TrainConfig};
use attnprune::solver::{self, CompressionRequest, MasksFile, SearchMode};
use attnprune::stats::StatsFile;
use attnprune::surgery;
use attnprune::{Error, Result};

/// Name of the environment variable that redirects relative output paths.
const OUT_DIR_ENV: &str = "ATTNPRUNE_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "attnprune",
    about = "Channel pruning driven by attention statistics",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataOpts {
    /// Generate a seeded synthetic dataset with this many samples
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
    /// Noise level for the synthetic dataset
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// CIFAR-10 binary batch file (3073-byte records)
    #[arg(long, value_name = "FILE", conflicts_with = "synth")]
    cifar: Option<PathBuf>,
}

impl DataOpts {
    fn load(&self, classes: usize, res: (usize, usize), split: &str, seed: u64) -> Result<Dataset> {
        match (self.synth, &self.cifar) {
            (Some(n), None) => make_synth_dataset(seed, n, classes, res, self.noise),
            (None, Some(path)) => load_cifar10_binary(path, split, CIFAR10_NORM),
            _ => Err(Error::Config(
                "exactly one of --synth or --cifar is required".into(),
            )),
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Multiply the learning rate by this factor every --lr-decay-every epochs
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    /// 0 disables the decay schedule
    #[arg(long, default_value_t = 0)]
    lr_decay_every: usize,
    /// Random horizontal flips during training
    #[arg(long)]
    hflip: bool,
    /// Zero-pad this many pixels per side, then random-crop back
    #[arg(long, default_value_t = 0)]
    pad: usize,
}

impl TrainOpts {
    fn to_config(&self, seed: u64, res: (usize, usize)) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            lr_decay_every: if self.lr_decay_every == 0 {
                usize::MAX
            } else {
                self.lr_decay_every
            },
            momentum: self.momentum,
            seed,
            augment: AugmentCfg {
                hflip: self.hflip,
                pad: self.pad,
                crop: (self.pad > 0).then_some(res),
            },
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a base network from scratch and save it
    TrainBase {
        #[arg(long)]
        arch: String,
        /// Input resolution, e.g. `32` or `32x32`
        #[arg(long)]
        res: String,
        #[arg(long)]
        classes: usize,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Freeze the base network and attach attention modules
    Attach {
        #[arg(long)]
        model: PathBuf,
        /// Gate construction: `softmax` or `sigmoid`
        #[arg(long, default_value = "softmax")]
        gate: String,
        #[arg(long, default_value_t = 3)]
        kernel_size: usize,
        /// Instrument FC layers (skips the depthwise + pooling stages)
        #[arg(long)]
        fc_mode: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attached attention modules against the frozen base
    TrainAttn {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        /// Target mitigation strength reached after the warmup
        #[arg(long)]
        alpha: f64,
        /// Optimizer steps over which alpha ramps from 0 to the target
        #[arg(long)]
        warmup_steps: u64,
        /// Optional second phase at fixed alpha
        #[arg(long, default_value_t = 0)]
        phase2_epochs: usize,
        #[arg(long, default_value_t = 0.0)]
        phase2_lr: f64,
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the softmax gate outputs over a dataset into stats.json
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        /// Mitigation strength used during the pass
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Also export the per-class statistics matrix
        #[arg(long)]
        per_class: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a compression ratio into per-layer channel masks
    Solve {
        #[arg(long)]
        stats: PathBuf,
        /// Fraction of channels to remove across all instrumented layers
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 10_000)]
        grid_steps: usize,
        #[arg(long, default_value_t = 1)]
        min_keep: usize,
        /// Enumerate the breakpoints of g(t) instead of grid search
        #[arg(long)]
        exact: bool,
        /// Model container; needed to route residual-branch layers to samplers
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut masked channels out of the network
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the surgery report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Unfreeze and retrain a pruned network
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy of a saved model on a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count parameters and FLOPs of an architecture
    Count {
        #[arg(long)]
        arch: String,
        /// Input resolution, e.g. `224` or `224x224`
        #[arg(long)]
        res: String,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Count fused multiply-adds as one operation instead of two
        #[arg(long)]
        fma: bool,
        /// Print the per-layer breakdown table
        #[arg(long)]
        table: bool,
    },
    /// Export plot-ready CSV: the g(t) curve and every per-layer statistic
    Report {
        #[arg(long)]
        stats: PathBuf,
        /// Number of curve samples over [0, t_max]
        #[arg(long, default_value_t = 10_000)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline from one TOML config
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed in the config file
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory (default: current directory)
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_res(text: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad resolution component {s:?}")))
    };
    match text.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let side = parse(text)?;
            Ok((side, side))
        }
    }
}

/// Apply the output-directory override to relative paths.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn prepared_out(p: &Path) -> Result<PathBuf> {
    let full = out_path(p);
    if let Some(parent) = full.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(full)
}

fn graph_res(graph: &NetworkGraph) -> (usize, usize) {
    graph.input_hw
}

fn print_accuracy(label: &str, acc: &train::Accuracy) {
    match acc.top5 {
        Some(t5) => println!(
            "{label}top-1 {:.4}  top-5 {t5:.4}  ({} samples)",
            acc.top1, acc.samples
        ),
        None => println!("{label}top-1 {:.4}  ({} samples)", acc.top1, acc.samples),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainBase { arch: name, res, classes, data, train: topts, seed, out } => {
            let res = parse_res(&res)?;
            let ds = data.load(classes, res, "train", seed)?;
            let mut graph = arch::build_architecture(&name, res, classes, Some(seed))?;
            let logs = train::train_base(&mut graph, &ds, &topts.to_config(seed, res))?;
            if let Some(last) = logs.last() {
                println!("final epoch loss {:.6}", last.loss);
            }
            save_model(&graph, &prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Attach { model, gate, kernel_size, fc_mode, seed, out } => {
            let mut graph = load_model(&model)?;
            graph.freeze_base();
            graph.attach_attention(None, fc_mode, &gate, kernel_size, seed)?;
            println!("attached {} attention modules", graph.attachments.len());
            save_model(&graph, &prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::TrainAttn {
            model, data, alpha, warmup_steps, phase2_epochs, phase2_lr, train: topts, seed, out,
        } => {
            let mut graph = load_model(&model)?;
            let res = graph_res(&graph);
            let ds = data.load(graph.num_classes, res, "train", seed)?;
            let schedule = MitigationSchedule::new(alpha, warmup_steps)?;
            let phase2 = (phase2_epochs > 0).then_some((phase2_epochs, phase2_lr));
            train::train_attention(&mut graph, &ds, &topts.to_config(seed, res), &schedule, phase2)?;
            save_model(&graph, &prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Stats { model, data, alpha, batch_size, per_class, seed, out } => {
            let mut graph = load_model(&model)?;
            let res = graph_res(&graph);
            let ds = data.load(graph.num_classes, res, "train", seed)?;
            let mut stats = train::collect_stats(&mut graph, &ds, alpha, batch_size, per_class)?;
            let file = stats.to_file()?;
            file.save(&prepared_out(&out)?)?;
            println!(
                "averaged {} samples over {} layers",
                file.sample_count,
                file.layers.len()
            );
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Solve { stats, ratio, grid_steps, min_keep, exact, model, out } => {
            let file = StatsFile::load(&stats)?;
            let request = CompressionRequest {
                r: ratio,
                t_max: None,
                grid_steps,
                min_keep,
            };
            let mode = if exact { SearchMode::Breakpoints } else { SearchMode::Grid };
            let mut solution = solver::solve_threshold(&file.criterion(), &request, mode)?;
            if let Some(path) = model {
                let graph = load_model(&path)?;
                solution.masks = solver::derive_residual_masks(solution.masks, &graph)?;
            }
            println!("t* = {:.6}", solution.t_star);
            println!("g(t*) = {:.6}", solution.g_t_star);
            println!("achieved ratio = {:.6}", solution.achieved_ratio);
            MasksFile::from_solution(&solution).save(&prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Prune { model, masks, out, report } => {
            let mut graph = load_model(&model)?;
            let mask = MasksFile::load(&masks)?.to_mask();
            let rep = surgery::apply_masks(&mut graph, &mask)?;
            println!(
                "params {} -> {}  ({} removed)",
                rep.params_before, rep.params_after, rep.params_removed
            );
            println!("flops  {} -> {}", rep.flops_before, rep.flops_after);
            if let Some(path) = report {
                rep.save(&prepared_out(&path)?)?;
                println!("wrote {}", out_path(&path).display());
            }
            save_model(&graph, &prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Finetune { model, data, train: topts, seed, out } => {
            let mut graph = load_model(&model)?;
            let res = graph_res(&graph);
            let ds = data.load(graph.num_classes, res, "train", seed)?;
            let logs = train::finetune(&mut graph, &ds, &topts.to_config(seed, res))?;
            if let Some(last) = logs.last() {
                println!("final epoch loss {:.6}", last.loss);
            }
            save_model(&graph, &prepared_out(&out)?)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::Eval { model, data, batch_size, seed } => {
            let mut graph = load_model(&model)?;
            let res = graph_res(&graph);
            let ds = data.load(graph.num_classes, res, "eval", seed)?;
            let acc = train::evaluate(&mut graph, &ds, None, batch_size)?;
            print_accuracy("", &acc);
            Ok(())
        }
        Cmd::Count { arch: name, res, classes, fma, table } => {
            let res = parse_res(&res)?;
            let graph = arch::build_architecture(&name, res, classes, None)?;
            let report = cost::cost_report(&graph, res, fma)?;
            println!(
                "{} params, {} FLOPs",
                cost::human(report.total_params),
                cost::human(report.total_flops)
            );
            if table {
                print!("{}", cost::render_table(&report));
            }
            Ok(())
        }
        Cmd::Report { stats, grid, out } => {
            let file = StatsFile::load(&stats)?;
            let text = report_csv(&file, grid)?;
            let path = prepared_out(&out)?;
            std::fs::write(&path, text)?;
            println!("wrote {}", out_path(&out).display());
            Ok(())
        }
        Cmd::RunAll { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_path(&out);
            let manifest = run_all(&cfg, &dir)?;
            print_accuracy("baseline   ", &manifest.baseline_accuracy);
            print_accuracy("pruned     ", &manifest.pruned_accuracy);
            print_accuracy("finetuned  ", &manifest.finetuned_accuracy);
            println!("t* = {:.6}", manifest.t_star);
            println!("achieved ratio = {:.6}", manifest.achieved_ratio);
            println!(
                "params {} -> {}",
                manifest.params_before, manifest.params_after
            );
            println!("flops  {} -> {}", manifest.flops_before, manifest.flops_after);
            println!("artifacts in {}", dir.display());
            Ok(())
        }
    }
}

/// Plot-ready CSV: `grid` samples of the g(t) curve followed by one row per
/// channel of every layer's statistic vector.
fn report_csv(file: &StatsFile, grid: usize) -> Result<String> {
    if grid < 2 {
        return Err(Error::Config("--grid must be at least 2".into()));
    }
    let criterion: BTreeMap<String, Vec<f64>> = file.criterion();
    // same upper bound the solver uses: just past the largest scaled value
    let top = criterion
        .values()
        .map(|a| {
            let c = a.len() as f64;
            a.iter().cloned().fold(0.0, f64::max) * c
        })
        .fold(0.0, f64::max);
    let t_max = top + top.max(1.0) * 1e-6;
    let mut out = String::from("# kind,layer,index,t,value\n");
    for i in 0..grid {
        let t = t_max * i as f64 / (grid - 1) as f64;
        let g = solver::global_ratio(&criterion, t);
        out.push_str(&format!("curve,,{i},{t},{g}\n"));
    }
    for layer in &file.layers {
        for (c, a) in layer.a.iter().enumerate() {
            out.push_str(&format!("stat,{},{c},,{a}\n", layer.id));
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    // clap handles usage errors itself (exit 2)
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
