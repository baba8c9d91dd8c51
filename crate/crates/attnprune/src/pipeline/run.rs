//! The one-config pipeline: base training, attention training, statistics,
//! threshold solving, surgery, fine-tuning — emitting every artifact plus a
//! manifest of input settings and artifact checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch;
use crate::attention::MitigationSchedule;
use crate::cost;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::io::{load_model, save_model};
use crate::pipeline::data::{load_cifar10_binary, make_synth_dataset, AugmentCfg, Dataset, CIFAR10_NORM};
use crate::pipeline::train::{self, Accuracy, TrainConfig};
use crate::solver::{self, CompressionRequest, MasksFile, SearchMode};
use crate::surgery;

fn default_one() -> f64 {
    1.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    16
}
fn default_grid() -> usize {
    10_000
}
fn default_min_keep() -> usize {
    1
}
fn default_gate() -> String {
    "softmax".into()
}
fn default_kernel() -> usize {
    3
}
fn default_augment() -> AugmentCfg {
    AugmentCfg::OFF
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub lr_decay: f64,
    /// 0 disables decay
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_augment")]
    pub augment: AugmentCfg,
}

impl PhaseConfig {
    fn to_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            lr_decay_every: if self.lr_decay_every == 0 { usize::MAX } else { self.lr_decay_every },
            momentum: self.momentum,
            seed,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synth {
        n: usize,
        #[serde(default)]
        eval_n: usize,
        noise: f64,
    },
    Cifar10 {
        train_path: PathBuf,
        eval_path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub phase2_epochs: usize,
    #[serde(default)]
    pub phase2_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub alpha_target: f64,
    pub warmup_steps: u64,
    #[serde(default = "default_gate")]
    pub gate: String,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub fc_mode: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    pub ratio: f64,
    #[serde(default = "default_grid")]
    pub grid_steps: usize,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
    #[serde(default)]
    pub per_class_stats: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub arch: String,
    pub resolution: (usize, usize),
    pub classes: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub base: PhaseConfig,
    pub attention: AttentionConfig,
    pub solve: SolveConfig,
    pub finetune: PhaseConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Everything a reader needs to reproduce and audit a run: the full input
/// configuration and a SHA-256 per emitted artifact. Deliberately free of
/// timestamps so identical runs produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub baseline_accuracy: Accuracy,
    pub pruned_accuracy: Accuracy,
    pub finetuned_accuracy: Accuracy,
    pub t_star: f64,
    pub achieved_ratio: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synth { n, eval_n, noise } => {
            let eval_n = if *eval_n == 0 { (n / 4).max(cfg.classes) } else { *eval_n };
            let train = make_synth_dataset(cfg.seed ^ 0x5d00d5, *n, cfg.classes, cfg.resolution, *noise)?;
            let eval = make_synth_dataset(cfg.seed ^ 0xe7a1e0, eval_n, cfg.classes, cfg.resolution, *noise)?;
            Ok((train, eval))
        }
        DatasetConfig::Cifar10 { train_path, eval_path } => Ok((
            load_cifar10_binary(train_path, "train", CIFAR10_NORM)?,
            load_cifar10_binary(eval_path, "eval", CIFAR10_NORM)?,
        )),
    }
}

/// Execute the full pipeline, writing artifacts into `out_dir`.
pub fn run_all(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let (train_ds, eval_ds) = load_datasets(cfg)?;

    // phase 1: the "pre-trained" base
    let mut graph = arch::build_architecture(&cfg.arch, cfg.resolution, cfg.classes, Some(cfg.seed))?;
    train::train_base(&mut graph, &train_ds, &cfg.base.to_train(cfg.seed))?;
    let base_path = out_dir.join("base_model.bin");
    save_model(&graph, &base_path)?;
    let baseline_accuracy = train::evaluate(&mut graph, &eval_ds, None, cfg.base.batch_size)?;

    // phase 2: attention modules against the frozen base
    graph.freeze_base();
    graph.attach_attention(None, cfg.attention.fc_mode, &cfg.attention.gate, cfg.attention.kernel_size, cfg.seed)?;
    let schedule = MitigationSchedule::new(cfg.attention.alpha_target, cfg.attention.warmup_steps)?;
    let attn_cfg = TrainConfig {
        epochs: cfg.attention.epochs,
        batch_size: cfg.attention.batch_size,
        lr: cfg.attention.lr,
        lr_decay: 1.0,
        lr_decay_every: usize::MAX,
        momentum: cfg.attention.momentum,
        seed: cfg.seed.wrapping_add(1),
        augment: AugmentCfg::OFF,
    };
    let phase2 = (cfg.attention.phase2_epochs > 0).then_some((cfg.attention.phase2_epochs, cfg.attention.phase2_lr));
    train::train_attention(&mut graph, &train_ds, &attn_cfg, &schedule, phase2)?;
    let attn_path = out_dir.join("attn_model.bin");
    save_model(&graph, &attn_path)?;

    // phase 3: statistics
    let mut stats = train::collect_stats(
        &mut graph,
        &train_ds,
        cfg.attention.alpha_target,
        cfg.attention.batch_size,
        cfg.solve.per_class_stats,
    )?;
    let stats_file = stats.to_file()?;
    let stats_path = out_dir.join("stats.json");
    stats_file.save(&stats_path)?;

    // phase 4: threshold and masks
    let request = CompressionRequest {
        r: cfg.solve.ratio,
        t_max: None,
        grid_steps: cfg.solve.grid_steps,
        min_keep: cfg.solve.min_keep,
    };
    let mut solution = solver::solve_threshold(&stats_file.criterion(), &request, SearchMode::Grid)?;
    solution.masks = solver::derive_residual_masks(solution.masks, &graph)?;
    let masks_path = out_dir.join("masks.json");
    MasksFile::from_solution(&solution).save(&masks_path)?;

    // phase 5: surgery
    let report = surgery::apply_masks(&mut graph, &solution.masks)?;
    let report_path = out_dir.join("surgery_report.json");
    report.save(&report_path)?;
    let cost_after = cost::cost_report(&graph, cfg.resolution, false)?;
    let cost_path = out_dir.join("cost_report.json");
    {
        let mut text = serde_json::to_string_pretty(&cost_after)?;
        text.push('\n');
        std::fs::write(&cost_path, text)?;
    }
    let pruned_accuracy = train::evaluate(&mut graph, &eval_ds, None, cfg.finetune.batch_size)?;

    // phase 6: fine-tune
    train::finetune(&mut graph, &train_ds, &cfg.finetune.to_train(cfg.seed.wrapping_add(2)))?;
    let pruned_path = out_dir.join("pruned_model.bin");
    save_model(&graph, &pruned_path)?;
    let finetuned_accuracy = train::evaluate(&mut graph, &eval_ds, None, cfg.finetune.batch_size)?;

    let mut artifacts = BTreeMap::new();
    for path in [&base_path, &attn_path, &stats_path, &masks_path, &report_path, &cost_path, &pruned_path] {
        artifacts.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256_hex(path)?,
        );
    }
    let manifest = Manifest {
        config: cfg.clone(),
        baseline_accuracy,
        pruned_accuracy,
        finetuned_accuracy,
        t_star: solution.t_star,
        achieved_ratio: solution.achieved_ratio,
        params_before: report.params_before,
        params_after: report.params_after,
        flops_before: report.flops_before,
        flops_after: report.flops_after,
        artifacts,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reload the base checkpoint of a previous run (used by the CLI's staged
/// subcommands).
pub fn load_checkpoint(path: &Path) -> Result<NetworkGraph> {
    load_model(path)
}
