//! Structural removal of pruned channels.
//!
//! A keep-mask on layer l's input removes the matching input slices of l's
//! kernel and, when the producing tensor is owned by a single path, the
//! producer's output channels and every batch-norm/bias entry in between.
//! Shared tensors (residual trunks, multi-consumer outputs, the graph input)
//! keep their full width; the consumer instead selects its surviving channels
//! at its input.

use serde::{Deserialize, Serialize};

use crate::cost;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, PruneRoute};
use crate::solver::PruneMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeryRow {
    pub id: String,
    pub channels_before: usize,
    pub channels_after: usize,
    /// true when realized by an input sampler instead of structural removal
    pub sampled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub rows: Vec<SurgeryRow>,
    pub params_before: u64,
    pub params_after: u64,
    pub params_removed: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub touched: Vec<String>,
}

impl SurgeryReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Keep `keep[i]`-flagged entries along dimension `dim` (0 or 1).
fn select_dim(t: &Tensor, dim: usize, keep: &[bool]) -> Result<Tensor> {
    if dim >= t.shape.len() || t.shape[dim] != keep.len() {
        return Err(Error::dim(
            "channel selection",
            format!("dim {dim} of {:?}", t.shape),
            keep.len(),
        ));
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let outer: usize = t.shape[..dim].iter().product();
    let inner: usize = t.shape[dim + 1..].iter().product();
    let mut shape = t.shape.clone();
    shape[dim] = kept;
    let mut data = Vec::with_capacity(outer * kept * inner);
    for o in 0..outer {
        for (c, &k) in keep.iter().enumerate() {
            if k {
                let start = (o * t.shape[dim] + c) * inner;
                data.extend_from_slice(&t.data[start..start + inner]);
            }
        }
    }
    Tensor::from_vec(&shape, data)
}

/// How a mask relates to the layer it targets.
enum MaskState {
    Fresh,
    AlreadyApplied,
}

fn mask_state(graph: &NetworkGraph, id: &str, flags: &[bool]) -> Result<MaskState> {
    let layer = graph.layer(id)?;
    let effective = graph.effective_in_channels(layer);
    let kept = flags.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Err(Error::InvalidInput(format!("mask for '{id}' keeps no channels")));
    }
    if flags.len() == effective {
        if flags.iter().all(|&k| k) {
            return Ok(MaskState::AlreadyApplied); // nothing to remove
        }
        if let Some(sel) = &layer.input_select {
            // a sampler is installed and the mask still addresses the full
            // width: treat an identical mask as already applied
            if sel == flags {
                return Ok(MaskState::AlreadyApplied);
            }
        }
        return Ok(MaskState::Fresh);
    }
    if kept == effective {
        let sampler_match = layer.input_select.as_deref().map(|s| s == flags).unwrap_or(true);
        if sampler_match {
            return Ok(MaskState::AlreadyApplied);
        }
    }
    Err(Error::dim(format!("mask for '{id}'"), effective, flags.len()))
}

/// Shrink a layer's kernel along its input-channel dimension.
fn shrink_consumer_input(graph: &mut NetworkGraph, id: &str, flags: &[bool]) -> Result<()> {
    let kept = flags.iter().filter(|&&k| k).count();
    let layer = graph.layer_mut(id)?;
    match layer.kind.clone() {
        LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
            if let Some(w) = layer.params.get_mut("weight") {
                w.value = select_dim(&w.value, 1, flags)?;
            }
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "mask targets '{id}' of kind {other:?}; only conv/fc inputs are prunable"
            )))
        }
    }
    layer.in_channels = kept;
    Ok(())
}

/// Remove output channels of the producer and the per-channel entries of
/// every transparent layer on the chain.
fn shrink_producer_side(graph: &mut NetworkGraph, producer: &str, chain: &[String], flags: &[bool]) -> Result<()> {
    let kept = flags.iter().filter(|&&k| k).count();
    for node_id in chain {
        let node = graph.layer_mut(node_id)?;
        match node.kind.clone() {
            LayerKind::BatchNorm => {
                for role in ["gamma", "beta"] {
                    if let Some(p) = node.params.get_mut(role) {
                        p.value = select_dim(&p.value, 0, flags)?;
                    }
                }
                if let Some(m) = &mut node.running_mean {
                    *m = select_dim(m, 0, flags)?;
                }
                if let Some(v) = &mut node.running_var {
                    *v = select_dim(v, 0, flags)?;
                }
            }
            LayerKind::DepthwiseConv { .. } => {
                if let Some(w) = node.params.get_mut("weight") {
                    w.value = select_dim(&w.value, 0, flags)?;
                }
            }
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Gap => {}
            other => {
                return Err(Error::InvalidState(format!(
                    "unexpected kind {other:?} on producer chain at '{node_id}'"
                )))
            }
        }
        node.in_channels = kept;
        node.out_channels = kept;
    }
    let prod = graph.layer_mut(producer)?;
    if let Some(w) = prod.params.get_mut("weight") {
        w.value = select_dim(&w.value, 0, flags)?;
    }
    if let Some(b) = prod.params.get_mut("bias") {
        b.value = select_dim(&b.value, 0, flags)?;
    }
    prod.out_channels = kept;
    Ok(())
}

/// Cut every masked channel out of the graph, install samplers where the
/// source tensor is shared, detach attention modules, and revalidate.
pub fn apply_masks(graph: &mut NetworkGraph, masks: &PruneMask) -> Result<SurgeryReport> {
    let before = cost::cost_report(graph, graph.input_hw, false)?;
    let mut rows = Vec::new();
    let mut touched = Vec::new();

    for (id, flags) in &masks.keep {
        match mask_state(graph, id, flags)? {
            MaskState::AlreadyApplied => continue,
            MaskState::Fresh => {}
        }
        let kept = flags.iter().filter(|&&k| k).count();
        let route = graph.prune_route(id)?;
        let sampled = route.is_sampler() || masks.residual_samplers.contains_key(id);
        if sampled {
            {
                let layer = graph.layer_mut(id)?;
                if layer.input_select.is_some() {
                    return Err(Error::InvalidState(format!(
                        "layer '{id}' already has a sampler; refusing to stack another"
                    )));
                }
                layer.input_select = Some(flags.clone());
            }
            shrink_consumer_input(graph, id, flags)?;
            touched.push(id.clone());
        } else {
            let PruneRoute::Structural { producer, chain } = route else { unreachable!() };
            shrink_consumer_input(graph, id, flags)?;
            shrink_producer_side(graph, &producer, &chain, flags)?;
            touched.push(id.clone());
            touched.push(producer);
            touched.extend(chain);
        }
        rows.push(SurgeryRow {
            id: id.clone(),
            channels_before: flags.len(),
            channels_after: kept,
            sampled,
        });
    }

    graph.detach_attention();
    graph.validate()?;
    let after = cost::cost_report(graph, graph.input_hw, false)?;
    touched.sort();
    touched.dedup();
    Ok(SurgeryReport {
        rows,
        params_before: before.total_params,
        params_after: after.total_params,
        params_removed: before.total_params - after.total_params,
        flops_before: before.total_flops,
        flops_after: after.total_flops,
        touched,
    })
}
