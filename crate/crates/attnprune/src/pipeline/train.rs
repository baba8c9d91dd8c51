//! Training loops: base training, frozen-base attention training with the
//! mitigation ramp, statistics collection, fine-tuning, and evaluation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attention::MitigationSchedule;
use crate::error::{Error, Result};
use crate::graph::{Mode, NetworkGraph};
use crate::pipeline::data::{augment, AugmentCfg, Dataset};
use crate::stats::AttentionStats;
use crate::tensor::{SgdMomentum, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// multiplicative decay applied every `lr_decay_every` epochs
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentCfg,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            lr_decay: 1.0,
            lr_decay_every: usize::MAX,
            momentum: 0.9,
            seed,
            augment: AugmentCfg::OFF,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 || self.lr_decay_every == usize::MAX {
            return self.lr;
        }
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-epoch averages reported by the loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub alpha: Option<f64>,
}

fn epoch_seed(base: u64, epoch: usize, salt: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
        .wrapping_add(salt << 32)
}

/// One pass of minibatch SGD. `alpha_of_step` supplies the mitigation factor
/// per optimizer step (None when no modules are attached).
fn sgd_epoch(
    graph: &mut NetworkGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
    optim: &mut SgdMomentum,
    epoch: usize,
    global_step: &mut u64,
    alpha_of_step: &dyn Fn(u64) -> Option<f64>,
) -> Result<f64> {
    let order = dataset.shuffled_indices(epoch_seed(cfg.seed, epoch, 1));
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let (mut images, labels) = dataset.batch(chunk)?;
        if !cfg.augment.is_identity() {
            images = augment(&images, &cfg.augment, epoch_seed(cfg.seed, epoch, 2).wrapping_add(*global_step))?;
        }
        let alpha = alpha_of_step(*global_step);
        let mut tape = Tape::new();
        let pass = graph.forward(&mut tape, &images, Mode::Train, alpha)?;
        let loss = tape.cross_entropy_loss(pass.logits, &labels)?;
        let loss_val = tape.value(loss).data[0];
        if !loss_val.is_finite() {
            return Err(Error::InvalidState(format!(
                "training diverged: loss {loss_val} at epoch {epoch}, step {global_step}"
            )));
        }
        loss_sum += loss_val;
        batches += 1;
        let grads = tape.backward(loss)?;
        optim.set_lr(cfg.lr_at_epoch(epoch));
        optim.step(graph.all_params_mut().into_iter(), &grads)?;
        *global_step += 1;
    }
    Ok(loss_sum / batches.max(1) as f64)
}

/// Standard supervised training of the full network.
pub fn train_base(graph: &mut NetworkGraph, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if graph.base_frozen {
        return Err(Error::InvalidState("cannot train a frozen base network".into()));
    }
    if !graph.attachments.is_empty() {
        return Err(Error::InvalidState("detach attention modules before base training".into()));
    }
    let mut optim = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let mut logs = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let loss = sgd_epoch(graph, dataset, cfg, &mut optim, epoch, &mut step, &|_| None)?;
        logs.push(EpochLog {
            epoch,
            lr: cfg.lr_at_epoch(epoch),
            loss,
            alpha: None,
        });
    }
    Ok(logs)
}

/// Train only the attention modules against the frozen base.
///
/// Phase 1 runs `cfg.epochs` at `cfg.lr` while alpha ramps along `schedule`;
/// phase 2, when given, holds alpha at the target for `phase2.0` epochs at
/// learning rate `phase2.1`.
pub fn train_attention(
    graph: &mut NetworkGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
    schedule: &MitigationSchedule,
    phase2: Option<(usize, f64)>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if !graph.base_frozen {
        return Err(Error::InvalidState("base must be frozen before attention training".into()));
    }
    if graph.attachments.is_empty() {
        return Err(Error::InvalidState("no attention modules attached".into()));
    }
    // freezing must be total
    for layer in &graph.layers {
        for p in layer.params.values() {
            if p.requires_grad {
                return Err(Error::InvalidState(format!(
                    "base parameter {} is trainable during attention training",
                    p.id.0
                )));
            }
        }
    }
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let phase1_steps = steps_per_epoch * cfg.epochs as u64;
    if cfg.epochs > 0 && schedule.warmup_steps > phase1_steps {
        return Err(Error::InvalidInput(format!(
            "warmup ({} steps) exceeds phase 1 ({phase1_steps} steps)",
            schedule.warmup_steps
        )));
    }
    let checksum = graph.base_param_checksum();

    let mut optim = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let mut logs = Vec::new();
    let mut step = 0u64;
    let total_epochs = cfg.epochs + phase2.map(|(e, _)| e).unwrap_or(0);
    for epoch in 0..total_epochs {
        let mut epoch_cfg = cfg.clone();
        if epoch >= cfg.epochs {
            // phase 2: fixed alpha, second learning rate
            let (_, lr2) = phase2.expect("epoch bound implies phase 2");
            epoch_cfg.lr = lr2;
            epoch_cfg.lr_decay_every = usize::MAX;
        }
        let loss = sgd_epoch(graph, dataset, &epoch_cfg, &mut optim, epoch, &mut step, &|s| {
            Some(schedule.alpha_at(s))
        })?;
        logs.push(EpochLog {
            epoch,
            lr: epoch_cfg.lr_at_epoch(epoch),
            loss,
            alpha: Some(schedule.alpha_at(step.saturating_sub(1))),
        });
    }

    if graph.base_param_checksum() != checksum {
        return Err(Error::InvalidState("base parameters changed during attention training".into()));
    }
    Ok(logs)
}

/// One deterministic eval-mode pass accumulating the softmax outputs.
pub fn collect_stats(
    graph: &mut NetworkGraph,
    dataset: &Dataset,
    alpha_final: f64,
    batch_size: usize,
    per_class: bool,
) -> Result<AttentionStats> {
    if graph.attachments.is_empty() {
        return Err(Error::InvalidState("no attention modules to collect statistics from".into()));
    }
    let layer_channels: BTreeMap<String, usize> = graph
        .attachments
        .iter()
        .map(|(id, m)| (id.clone(), m.meta.channels))
        .collect();
    let classes = per_class.then_some(dataset.num_classes);
    let mut stats = AttentionStats::new(&layer_channels, alpha_final, classes);
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let pass = graph.forward(&mut tape, &images, Mode::Eval, Some(alpha_final))?;
        for (layer_id, s) in &pass.gates {
            stats.accumulate(layer_id, tape.value(*s), per_class.then_some(labels.as_slice()))?;
        }
    }
    Ok(stats)
}

/// Post-surgery training of the pruned network.
pub fn finetune(graph: &mut NetworkGraph, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if !graph.attachments.is_empty() {
        return Err(Error::InvalidState("detach attention modules before fine-tuning".into()));
    }
    graph.unfreeze_base();
    train_base(graph, dataset, cfg)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// present when the task has at least five classes
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Deterministic eval-mode accuracy.
pub fn evaluate(graph: &mut NetworkGraph, dataset: &Dataset, alpha: Option<f64>, batch_size: usize) -> Result<Accuracy> {
    let k = dataset.num_classes;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = dataset.batch(chunk)?;
        let logits = graph.forward_logits(&images, Mode::Eval, alpha)?;
        let classes = logits.shape[1];
        for (ni, &label) in labels.iter().enumerate() {
            let row = &logits.data[ni * classes..(ni + 1) * classes];
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if order[0] == label {
                top1 += 1;
            }
            if order.iter().take(5).any(|&c| c == label) {
                top5 += 1;
            }
        }
    }
    let n = dataset.len().max(1);
    Ok(Accuracy {
        top1: top1 as f64 / n as f64,
        top5: (k >= 5).then(|| top5 as f64 / n as f64),
        samples: dataset.len(),
    })
}
