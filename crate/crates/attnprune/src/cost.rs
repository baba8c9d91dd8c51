//! Parameter and floating-point-operation accounting.
//!
//! Parameters count weights, biases, and batch-norm scale/shift. FLOPs count
//! only convolutional and FC layers; with `fma = false` every
//! multiply-accumulate is two operations, with `fma = true` one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRow {
    pub id: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub resolution: (usize, usize),
    pub fma: bool,
    pub total_params: u64,
    pub total_flops: u64,
    pub rows: Vec<CostRow>,
}

/// Percentage reductions between two reports, 1 - after/before.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReduction {
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

pub fn count_params(graph: &NetworkGraph) -> u64 {
    layer_costs(graph, graph.input_hw, false)
        .map(|rows| rows.iter().map(|r| r.params).sum())
        .unwrap_or(0)
}

pub fn count_flops(graph: &NetworkGraph, resolution: (usize, usize), fma: bool) -> Result<u64> {
    Ok(layer_costs(graph, resolution, fma)?.iter().map(|r| r.flops).sum())
}

pub fn cost_report(graph: &NetworkGraph, resolution: (usize, usize), fma: bool) -> Result<CostReport> {
    let rows = layer_costs(graph, resolution, fma)?;
    Ok(CostReport {
        arch: graph.name.clone(),
        resolution,
        fma,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

fn layer_costs(graph: &NetworkGraph, resolution: (usize, usize), fma: bool) -> Result<Vec<CostRow>> {
    let mut probe = shallow_shape_copy(graph);
    probe.input_hw = resolution;
    let shapes = probe.infer_shapes()?;
    let mac_ops: u64 = if fma { 1 } else { 2 };
    let mut rows = Vec::new();
    for layer in &graph.layers {
        let c_in = graph.effective_in_channels(layer) as u64;
        let c_out = layer.out_channels as u64;
        let out = shapes[&layer.id];
        let (params, flops) = match &layer.kind {
            LayerKind::Conv { kernel, bias, .. } => {
                let kk = (kernel.0 * kernel.1) as u64;
                let p = c_out * c_in * kk + if *bias { c_out } else { 0 };
                let f = mac_ops * c_out * c_in * kk * (out.h * out.w) as u64;
                (p, f)
            }
            LayerKind::DepthwiseConv { kernel, .. } => {
                let kk = (kernel.0 * kernel.1) as u64;
                let p = c_in * kk;
                let f = mac_ops * c_in * kk * (out.h * out.w) as u64;
                (p, f)
            }
            LayerKind::Fc { bias } => {
                let p = c_out * c_in + if *bias { c_out } else { 0 };
                let f = mac_ops * c_out * c_in;
                (p, f)
            }
            LayerKind::BatchNorm => (2 * c_out, 0),
            _ => (0, 0),
        };
        rows.push(CostRow {
            id: layer.id.clone(),
            kind: kind_label(&layer.kind).to_string(),
            params,
            flops,
        });
    }
    Ok(rows)
}

/// Topology-only clone, enough for shape inference at another resolution.
fn shallow_shape_copy(graph: &NetworkGraph) -> NetworkGraph {
    NetworkGraph {
        name: graph.name.clone(),
        layers: graph
            .layers
            .iter()
            .map(|l| crate::graph::Layer {
                id: l.id.clone(),
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                prunable: l.prunable,
                params: Default::default(),
                running_mean: None,
                running_var: None,
                input_select: l.input_select.clone(),
            })
            .collect(),
        input_channels: graph.input_channels,
        input_hw: graph.input_hw,
        num_classes: graph.num_classes,
        shape_only: true,
        base_frozen: false,
        attachments: Default::default(),
    }
}

fn kind_label(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv { .. } => "conv",
        LayerKind::DepthwiseConv { .. } => "depthwise_conv",
        LayerKind::Fc { .. } => "fc",
        LayerKind::BatchNorm => "batchnorm",
        LayerKind::Relu => "relu",
        LayerKind::MaxPool { .. } => "maxpool",
        LayerKind::Gap => "gap",
        LayerKind::Flatten => "flatten",
        LayerKind::ResidualAdd => "residual_add",
    }
}

pub fn compare(before: &CostReport, after: &CostReport) -> Result<CostReduction> {
    if before.fma != after.fma {
        return Err(Error::InvalidInput("cannot compare reports with different fma modes".into()));
    }
    let pct = |b: u64, a: u64| {
        if b == 0 {
            0.0
        } else {
            100.0 * (1.0 - a as f64 / b as f64)
        }
    };
    Ok(CostReduction {
        params_before: before.total_params,
        params_after: after.total_params,
        flops_before: before.total_flops,
        flops_after: after.total_flops,
        params_reduction_pct: pct(before.total_params, after.total_params),
        flops_reduction_pct: pct(before.total_flops, after.total_flops),
    })
}

/// Display helper matching the tables' convention: two decimals of M/B.
pub fn human(v: u64) -> String {
    if v >= 1_000_000_000 {
        format!("{:.2}B", v as f64 / 1e9)
    } else if v >= 1_000_000 {
        format!("{:.2}M", v as f64 / 1e6)
    } else {
        v.to_string()
    }
}

/// Aligned plain-text table of a report.
pub fn render_table(report: &CostReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<14} {:>14} {:>16}\n",
        "layer", "kind", "params", "flops"
    ));
    for row in &report.rows {
        if row.params == 0 && row.flops == 0 {
            continue;
        }
        out.push_str(&format!(
            "{:<16} {:<14} {:>14} {:>16}\n",
            row.id, row.kind, row.params, row.flops
        ));
    }
    out.push_str(&format!(
        "{:<16} {:<14} {:>14} {:>16}\n",
        "total",
        "",
        format!("{} ({})", report.total_params, human(report.total_params)),
        format!("{} ({})", report.total_flops, human(report.total_flops)),
    ));
    out
}
