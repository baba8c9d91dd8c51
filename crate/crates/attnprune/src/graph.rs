//! Ordered layer graphs with channel bookkeeping.
//!
//! A graph is a topologically ordered list of layers; each layer names its
//! producers, so residual skips are ordinary extra edges into an add layer.
//! Large architectures can be built shape-only (no parameter storage) for
//! cost accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionModule;
use crate::error::{Error, Result};
use crate::tensor::{Param, ParamId, Tape, Tensor, Var};

/// Pseudo-id of the graph input.
pub const INPUT: &str = "@input";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    },
    DepthwiseConv {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    Fc {
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        k: usize,
    },
    Gap,
    Flatten,
    ResidualAdd,
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }
    pub fn is_fc(&self) -> bool {
        matches!(self, LayerKind::Fc { .. })
    }
}

/// One layer: kind, channel extents, producers, and (optionally) parameters.
#[derive(Debug, Clone)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub prunable: bool,
    /// weight / bias / gamma / beta, keyed by role.
    pub params: BTreeMap<String, Param>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    /// Residual sampler: keep-mask applied to this layer's input channels
    /// before the layer itself (the trunk stays full width).
    pub input_select: Option<Vec<bool>>,
}

impl Layer {
    fn param(&self, role: &str) -> Result<&Param> {
        self.params
            .get(role)
            .ok_or_else(|| Error::InvalidState(format!("layer {} missing parameter '{role}'", self.id)))
    }
}

/// Serializable topology (parameters live in the container blob).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerTopo {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_select: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer output extents from shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeInfo {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// true once spatial structure is gone (after flatten/GAP/FC).
    pub flat: bool,
}

#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub name: String,
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    pub shape_only: bool,
    /// When set, base parameters are gradient-frozen and base batch norms run
    /// on their stored statistics even in train mode.
    pub base_frozen: bool,
    pub attachments: BTreeMap<String, AttentionModule>,
}

/// Logits plus the per-layer softmax vectors captured during the pass.
pub struct ForwardPass {
    pub logits: Var,
    pub gates: Vec<(String, Var)>,
}

/// Result of the producer-chain walk behind a prunable layer's input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneRoute {
    /// the producer's output channels can be removed; `chain` lists the
    /// channel-transparent layers in between (walked consumer-to-producer)
    Structural { producer: String, chain: Vec<String> },
    /// the input tensor is shared or unowned; select channels at the input
    Sampler { reason: String },
}

impl PruneRoute {
    pub fn is_sampler(&self) -> bool {
        matches!(self, PruneRoute::Sampler { .. })
    }
}

impl NetworkGraph {
    pub fn layer(&self, id: &str) -> Result<&Layer> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::InvalidState(format!("no layer '{id}'")))
    }

    pub fn layer_mut(&mut self, id: &str) -> Result<&mut Layer> {
        self.layers
            .iter_mut()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::InvalidState(format!("no layer '{id}'")))
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// First conv layer in execution order; never a pruning target.
    pub fn first_conv_id(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|l| l.kind.is_conv() || matches!(l.kind, LayerKind::DepthwiseConv { .. }))
            .map(|l| l.id.as_str())
    }

    /// Ids of prunable conv layers (or prunable FC layers in fc_mode order).
    pub fn prunable_ids(&self, fc_mode: bool) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.prunable && if fc_mode { l.kind.is_fc() } else { l.kind.is_conv() })
            .map(|l| l.id.clone())
            .collect()
    }

    /// Effective input channel count of a layer, after its sampler.
    pub fn effective_in_channels(&self, layer: &Layer) -> usize {
        match &layer.input_select {
            Some(mask) => mask.iter().filter(|&&k| k).count(),
            None => layer.in_channels,
        }
    }

    /// Per-layer output shapes for the given input resolution.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, ShapeInfo>> {
        let mut shapes: BTreeMap<String, ShapeInfo> = BTreeMap::new();
        let input_shape = ShapeInfo {
            c: self.input_channels,
            h: self.input_hw.0,
            w: self.input_hw.1,
            flat: false,
        };
        for layer in &self.layers {
            let src = self.resolve_shape(&shapes, layer, &input_shape)?;
            let c_in = match &layer.input_select {
                Some(mask) => mask.iter().filter(|&&k| k).count(),
                None => src.c,
            };
            if c_in != layer.in_channels {
                return Err(Error::dim(
                    format!("layer {} input channels", layer.id),
                    layer.in_channels,
                    c_in,
                ));
            }
            let out = match &layer.kind {
                LayerKind::Conv { kernel, stride, padding, .. } | LayerKind::DepthwiseConv { kernel, stride, padding } => {
                    if src.flat {
                        return Err(Error::InvalidState(format!("layer {}: conv on flattened input", layer.id)));
                    }
                    let oh = (src.h + 2 * padding).checked_sub(kernel.0).map(|v| v / stride + 1);
                    let ow = (src.w + 2 * padding).checked_sub(kernel.1).map(|v| v / stride + 1);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => ShapeInfo {
                            c: layer.out_channels,
                            h: oh,
                            w: ow,
                            flat: false,
                        },
                        _ => {
                            return Err(Error::dim(
                                format!("layer {} output extent", layer.id),
                                "positive",
                                format!("{}x{}", src.h, src.w),
                            ))
                        }
                    }
                }
                LayerKind::Fc { .. } => ShapeInfo {
                    c: layer.out_channels,
                    h: 1,
                    w: 1,
                    flat: true,
                },
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::ResidualAdd => ShapeInfo {
                    c: layer.out_channels,
                    ..src
                },
                LayerKind::MaxPool { k } => {
                    if src.h % k != 0 || src.w % k != 0 {
                        return Err(Error::dim(
                            format!("layer {} pooled extent", layer.id),
                            format!("multiple of {k}"),
                            format!("{}x{}", src.h, src.w),
                        ));
                    }
                    ShapeInfo {
                        c: src.c,
                        h: src.h / k,
                        w: src.w / k,
                        flat: false,
                    }
                }
                LayerKind::Gap => ShapeInfo {
                    c: src.c,
                    h: 1,
                    w: 1,
                    flat: true,
                },
                LayerKind::Flatten => ShapeInfo {
                    c: src.c * src.h * src.w,
                    h: 1,
                    w: 1,
                    flat: true,
                },
            };
            // declared out_channels must match what the kind produces
            let produced = match &layer.kind {
                LayerKind::Conv { .. } | LayerKind::DepthwiseConv { .. } | LayerKind::Fc { .. } => layer.out_channels,
                _ => out.c,
            };
            if produced != layer.out_channels {
                return Err(Error::dim(format!("layer {} out channels", layer.id), layer.out_channels, produced));
            }
            shapes.insert(layer.id.clone(), out);
        }
        Ok(shapes)
    }

    fn resolve_shape(
        &self,
        shapes: &BTreeMap<String, ShapeInfo>,
        layer: &Layer,
        input_shape: &ShapeInfo,
    ) -> Result<ShapeInfo> {
        let mut resolved = Vec::new();
        for src in &layer.inputs {
            let s = if src == INPUT {
                *input_shape
            } else {
                *shapes
                    .get(src)
                    .ok_or_else(|| Error::InvalidState(format!("layer {}: unknown producer '{src}'", layer.id)))?
            };
            resolved.push(s);
        }
        match (&layer.kind, resolved.as_slice()) {
            (LayerKind::ResidualAdd, [a, b]) => {
                if a != b {
                    return Err(Error::dim(
                        format!("residual add {}", layer.id),
                        format!("{}x{}x{}", a.c, a.h, a.w),
                        format!("{}x{}x{}", b.c, b.h, b.w),
                    ));
                }
                Ok(*a)
            }
            (LayerKind::ResidualAdd, other) => Err(Error::dim(
                format!("residual add {}", layer.id),
                "two inputs",
                other.len(),
            )),
            (_, [one]) => Ok(*one),
            (_, other) => Err(Error::dim(format!("layer {}", layer.id), "one input", other.len())),
        }
    }

    /// Structural checks: ordering, channel consistency, first-conv rule,
    /// parameter shapes when parameters are present.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.id.clone()) {
                return Err(Error::InvalidState(format!("duplicate layer id '{}'", layer.id)));
            }
            for src in &layer.inputs {
                if src != INPUT && !seen.contains(src) {
                    return Err(Error::InvalidState(format!(
                        "layer {} consumes '{src}' before it is produced",
                        layer.id
                    )));
                }
            }
            if let Some(mask) = &layer.input_select {
                if !mask.iter().any(|&k| k) {
                    return Err(Error::InvalidState(format!("layer {}: sampler keeps no channels", layer.id)));
                }
            }
        }
        if let Some(first) = self.first_conv_id() {
            let l = self.layer(first)?;
            if l.prunable {
                return Err(Error::InvalidState(format!("first conv layer '{first}' must not be prunable")));
            }
        }
        self.infer_shapes()?;
        if !self.shape_only {
            for layer in &self.layers {
                self.check_params(layer)?;
            }
        }
        Ok(())
    }

    fn check_params(&self, layer: &Layer) -> Result<()> {
        let c_in = self.effective_in_channels(layer);
        let expect = |p: &Param, shape: &[usize]| -> Result<()> {
            if p.value.shape != shape {
                return Err(Error::dim(
                    format!("parameter {}", p.id),
                    format!("{shape:?}"),
                    format!("{:?}", p.value.shape),
                ));
            }
            Ok(())
        };
        match &layer.kind {
            LayerKind::Conv { kernel, bias, .. } => {
                expect(layer.param("weight")?, &[layer.out_channels, c_in, kernel.0, kernel.1])?;
                if *bias {
                    expect(layer.param("bias")?, &[layer.out_channels])?;
                }
            }
            LayerKind::DepthwiseConv { kernel, .. } => {
                expect(layer.param("weight")?, &[c_in, 1, kernel.0, kernel.1])?;
            }
            LayerKind::Fc { bias } => {
                expect(layer.param("weight")?, &[layer.out_channels, c_in])?;
                if *bias {
                    expect(layer.param("bias")?, &[layer.out_channels])?;
                }
            }
            LayerKind::BatchNorm => {
                expect(layer.param("gamma")?, &[layer.out_channels])?;
                expect(layer.param("beta")?, &[layer.out_channels])?;
                if layer.running_mean.is_none() || layer.running_var.is_none() {
                    return Err(Error::InvalidState(format!("batch norm {} missing running stats", layer.id)));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Run the network on a batch. Attention modules, when attached, gate the
    /// input of their layer; `alpha` must be given exactly when modules exist.
    pub fn forward(&mut self, tape: &mut Tape, batch: &Tensor, mode: Mode, alpha: Option<f64>) -> Result<ForwardPass> {
        if self.shape_only {
            return Err(Error::InvalidState("cannot run a shape-only graph".into()));
        }
        if batch.shape.len() != 4 || batch.shape[1] != self.input_channels {
            return Err(Error::dim(
                "forward input",
                format!("NCHW with C={}", self.input_channels),
                format!("{:?}", batch.shape),
            ));
        }
        match (self.attachments.is_empty(), alpha) {
            (false, None) => {
                return Err(Error::InvalidInput("alpha required when attention modules are attached".into()))
            }
            (true, Some(_)) => {
                return Err(Error::InvalidInput("alpha given but no attention modules attached".into()))
            }
            _ => {}
        }
        let train = mode == Mode::Train;
        let input_var = tape.leaf(batch.clone());
        let mut vals: BTreeMap<String, Var> = BTreeMap::new();
        let mut gates = Vec::new();
        let mut last = input_var;

        // split borrows: attachments are taken out while iterating layers
        let mut attachments = std::mem::take(&mut self.attachments);
        let result = (|| -> Result<Var> {
            for i in 0..self.layers.len() {
                let (id, inputs, select) = {
                    let l = &self.layers[i];
                    (l.id.clone(), l.inputs.clone(), l.input_select.clone())
                };
                let mut srcs = Vec::new();
                for s in &inputs {
                    let v = if s == INPUT {
                        input_var
                    } else {
                        *vals
                            .get(s)
                            .ok_or_else(|| Error::InvalidState(format!("layer {id}: producer '{s}' not evaluated")))?
                    };
                    srcs.push(v);
                }
                let mut x = srcs[0];
                if let Some(mask) = &select {
                    let keep: Vec<usize> = mask
                        .iter()
                        .enumerate()
                        .filter_map(|(c, &k)| k.then_some(c))
                        .collect();
                    x = tape.channel_select(x, &keep)?;
                }
                if let Some(module) = attachments.get_mut(&id) {
                    let (scaled, s) = module.forward(tape, x, alpha.unwrap_or(0.0), train)?;
                    gates.push((id.clone(), s));
                    x = scaled;
                }
                let layer = &mut self.layers[i];
                let base_train = train && !self.base_frozen;
                let out = match layer.kind.clone() {
                    LayerKind::Conv { stride, padding, bias, .. } => {
                        let w = tape.param(layer.param("weight")?);
                        let b = if bias { Some(tape.param(layer.param("bias")?)) } else { None };
                        tape.conv2d(x, w, b, stride, padding)?
                    }
                    LayerKind::DepthwiseConv { stride, padding, .. } => {
                        let w = tape.param(layer.param("weight")?);
                        tape.depthwise_conv2d(x, w, stride, padding)?
                    }
                    LayerKind::Fc { bias } => {
                        let w = tape.param(layer.param("weight")?);
                        let b = if bias { Some(tape.param(layer.param("bias")?)) } else { None };
                        tape.linear(x, w, b)?
                    }
                    LayerKind::BatchNorm => {
                        let g = tape.param(layer.param("gamma")?);
                        let b = tape.param(layer.param("beta")?);
                        let mean = layer.running_mean.as_mut().expect("validated");
                        let var = layer.running_var.as_mut().expect("validated");
                        tape.batchnorm(x, g, b, mean, var, base_train, 0.1, 1e-5)?
                    }
                    LayerKind::Relu => tape.relu(x),
                    LayerKind::MaxPool { k } => tape.max_pool(x, k)?,
                    LayerKind::Gap => tape.global_average_pool(x)?,
                    LayerKind::Flatten => tape.flatten(x)?,
                    LayerKind::ResidualAdd => {
                        if srcs.len() != 2 {
                            return Err(Error::dim(format!("residual add {id}"), "two inputs", srcs.len()));
                        }
                        tape.add(srcs[0], srcs[1])?
                    }
                };
                vals.insert(id, out);
                last = out;
            }
            Ok(last)
        })();
        self.attachments = attachments;
        let logits = result?;
        Ok(ForwardPass { logits, gates })
    }

    /// Convenience single-shot forward returning plain tensors.
    pub fn forward_logits(&mut self, batch: &Tensor, mode: Mode, alpha: Option<f64>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, mode, alpha)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Freeze every base-layer parameter and lock base batch norms to their
    /// stored statistics.
    pub fn freeze_base(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params.values_mut() {
                p.requires_grad = false;
            }
        }
        self.base_frozen = true;
    }

    pub fn unfreeze_base(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params.values_mut() {
                p.requires_grad = true;
            }
        }
        self.base_frozen = false;
    }

    /// Attach one attention module per target layer.
    ///
    /// `targets = None` means every prunable layer of the requested kind
    /// (conv layers normally, FC layers in fc_mode).
    pub fn attach_attention(
        &mut self,
        targets: Option<&[String]>,
        fc_mode: bool,
        gate: &str,
        kernel_size: usize,
        seed: u64,
    ) -> Result<()> {
        let ids: Vec<String> = match targets {
            Some(list) => list.to_vec(),
            None => self.prunable_ids(fc_mode),
        };
        if ids.is_empty() {
            return Err(Error::InvalidInput("no attachment targets".into()));
        }
        let first_conv = self.first_conv_id().map(str::to_string);
        for (i, id) in ids.iter().enumerate() {
            if Some(id.as_str()) == first_conv.as_deref() {
                return Err(Error::InvalidInput(format!(
                    "layer '{id}' is the first convolution; its influence is too wide to prune"
                )));
            }
            let layer = self.layer(id)?;
            if !layer.prunable {
                return Err(Error::InvalidInput(format!("layer '{id}' is not prunable")));
            }
            if fc_mode != layer.kind.is_fc() {
                return Err(Error::InvalidInput(format!(
                    "layer '{id}' kind does not match fc_mode={fc_mode}"
                )));
            }
            if self.attachments.contains_key(id) {
                return Err(Error::InvalidInput(format!("layer '{id}' already has an attention module")));
            }
            let channels = self.effective_in_channels(layer);
            let module = AttentionModule::new(id, channels, fc_mode, gate, kernel_size, seed.wrapping_add(i as u64))?;
            self.attachments.insert(id.clone(), module);
        }
        Ok(())
    }

    /// Remove all attention modules; repeated calls are no-ops.
    pub fn detach_attention(&mut self) {
        self.attachments.clear();
    }

    /// All parameters (base layers plus attention modules).
    pub fn all_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for layer in &self.layers {
            out.extend(layer.params.values());
        }
        for m in self.attachments.values() {
            out.extend(m.params());
        }
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.params.values_mut());
        }
        for m in self.attachments.values_mut() {
            out.extend(m.params_mut());
        }
        out
    }

    /// Checksum over base-layer parameter bytes; used to assert the freeze
    /// contract across attention training.
    pub fn base_param_checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for (role, p) in &layer.params {
                hasher.update(layer.id.as_bytes());
                hasher.update(role.as_bytes());
                for v in &p.value.data {
                    hasher.update(v.to_le_bytes());
                }
            }
            for t in [&layer.running_mean, &layer.running_var].into_iter().flatten() {
                for v in &t.data {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().into()
    }

    /// How many layers consume each tensor id.
    pub fn consumer_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for layer in &self.layers {
            for src in &layer.inputs {
                *counts.entry(src.as_str()).or_default() += 1;
            }
        }
        counts
    }

    /// Decide how a keep-mask on `layer_id`'s input can be realized.
    ///
    /// Walking back through channel-transparent layers, a producer conv/FC
    /// that feeds only this path can be structurally shrunk; anything shared
    /// (residual trunk, multi-consumer tensor, the graph input) or reached
    /// through a flatten must instead be sampled at the layer's input.
    pub fn prune_route(&self, layer_id: &str) -> Result<PruneRoute> {
        let layer = self.layer(layer_id)?;
        if layer.inputs.len() != 1 {
            return Ok(PruneRoute::Sampler { reason: "multi-input layer".into() });
        }
        let consumers = self.consumer_counts();
        let mut chain = Vec::new();
        let mut cur = layer.inputs[0].clone();
        loop {
            if cur == INPUT {
                return Ok(PruneRoute::Sampler { reason: "graph input".into() });
            }
            if consumers.get(cur.as_str()).copied().unwrap_or(0) > 1 {
                return Ok(PruneRoute::Sampler { reason: format!("'{cur}' has multiple consumers") });
            }
            let node = self.layer(&cur)?;
            match &node.kind {
                LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                    return Ok(PruneRoute::Structural { producer: cur, chain })
                }
                LayerKind::BatchNorm
                | LayerKind::Relu
                | LayerKind::MaxPool { .. }
                | LayerKind::Gap
                | LayerKind::DepthwiseConv { .. } => {
                    if node.inputs.len() != 1 {
                        return Err(Error::InvalidState(format!("layer '{cur}' should have one input")));
                    }
                    chain.push(cur.clone());
                    cur = node.inputs[0].clone();
                }
                LayerKind::Flatten => {
                    return Ok(PruneRoute::Sampler { reason: "flattened features".into() })
                }
                LayerKind::ResidualAdd => {
                    return Ok(PruneRoute::Sampler { reason: "residual trunk".into() })
                }
            }
        }
    }

    pub fn topology(&self) -> Vec<LayerTopo> {
        self.layers
            .iter()
            .map(|l| LayerTopo {
                id: l.id.clone(),
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                prunable: l.prunable,
                input_select: l.input_select.clone(),
            })
            .collect()
    }
}

/// Helper used by architecture builders and the custom-spec loader.
pub struct GraphBuilder {
    name: String,
    input_channels: usize,
    input_hw: (usize, usize),
    num_classes: usize,
    shape_only: bool,
    rng: Option<rand_chacha::ChaCha8Rng>,
    layers: Vec<Layer>,
    prev: String,
    cur_channels: usize,
    seen_conv: bool,
}

impl GraphBuilder {
    /// `seed = None` builds shape-only (no parameter storage).
    pub fn new(name: &str, input_channels: usize, input_hw: (usize, usize), num_classes: usize, seed: Option<u64>) -> Self {
        use rand::SeedableRng;
        GraphBuilder {
            name: name.to_string(),
            input_channels,
            input_hw,
            num_classes,
            shape_only: seed.is_none(),
            rng: seed.map(rand_chacha::ChaCha8Rng::seed_from_u64),
            layers: Vec::new(),
            prev: INPUT.to_string(),
            cur_channels: input_channels,
            seen_conv: false,
        }
    }

    pub fn last_id(&self) -> &str {
        &self.prev
    }

    pub fn current_channels(&self) -> usize {
        self.cur_channels
    }

    /// Rewind the "previous layer" cursor, for branching topologies.
    pub fn set_cursor(&mut self, id: &str, channels: usize) {
        self.prev = id.to_string();
        self.cur_channels = channels;
    }

    fn he_tensor(&mut self, shape: &[usize], fan_in: usize) -> Option<Tensor> {
        use rand::Rng;
        let rng = self.rng.as_mut()?;
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        // Box-Muller from uniform draws keeps the generator version-stable
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Some(Tensor::from_vec(shape, data).unwrap())
    }

    pub fn conv(&mut self, id: &str, out_c: usize, k: usize, stride: usize, padding: usize, bias: bool, prunable: bool) -> &mut Self {
        let in_c = self.cur_channels;
        let mut params = BTreeMap::new();
        if let Some(w) = self.he_tensor(&[out_c, in_c, k, k], in_c * k * k) {
            params.insert("weight".into(), Param::new(ParamId::new(id, "weight"), w));
            if bias {
                params.insert("bias".into(), Param::new(ParamId::new(id, "bias"), Tensor::zeros(&[out_c])));
            }
        }
        let prunable = prunable && self.seen_conv;
        self.seen_conv = true;
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::Conv {
                kernel: (k, k),
                stride,
                padding,
                bias,
            },
            inputs: vec![self.prev.clone()],
            in_channels: in_c,
            out_channels: out_c,
            prunable,
            params,
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self.cur_channels = out_c;
        self
    }

    pub fn depthwise(&mut self, id: &str, k: usize, stride: usize, padding: usize) -> &mut Self {
        let c = self.cur_channels;
        let mut params = BTreeMap::new();
        if let Some(w) = self.he_tensor(&[c, 1, k, k], k * k) {
            params.insert("weight".into(), Param::new(ParamId::new(id, "weight"), w));
        }
        self.seen_conv = true;
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::DepthwiseConv {
                kernel: (k, k),
                stride,
                padding,
            },
            inputs: vec![self.prev.clone()],
            in_channels: c,
            out_channels: c,
            prunable: false,
            params,
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self
    }

    pub fn bn(&mut self, id: &str) -> &mut Self {
        let c = self.cur_channels;
        let mut params = BTreeMap::new();
        let (mut mean, mut var) = (None, None);
        if self.rng.is_some() {
            params.insert("gamma".into(), Param::new(ParamId::new(id, "gamma"), Tensor::full(&[c], 1.0)));
            params.insert("beta".into(), Param::new(ParamId::new(id, "beta"), Tensor::zeros(&[c])));
            mean = Some(Tensor::zeros(&[c]));
            var = Some(Tensor::full(&[c], 1.0));
        }
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::BatchNorm,
            inputs: vec![self.prev.clone()],
            in_channels: c,
            out_channels: c,
            prunable: false,
            params,
            running_mean: mean,
            running_var: var,
            input_select: None,
        });
        self
    }

    pub fn relu(&mut self, id: &str) -> &mut Self {
        self.simple(id, LayerKind::Relu)
    }

    pub fn max_pool(&mut self, id: &str, k: usize) -> &mut Self {
        self.simple(id, LayerKind::MaxPool { k })
    }

    pub fn gap(&mut self, id: &str) -> &mut Self {
        self.simple(id, LayerKind::Gap)
    }

    /// Flatten NCHW to features; `spatial` is the per-channel element count.
    pub fn flatten(&mut self, id: &str, spatial: usize) -> &mut Self {
        let c = self.cur_channels;
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::Flatten,
            inputs: vec![self.prev.clone()],
            in_channels: c,
            out_channels: c * spatial,
            prunable: false,
            params: BTreeMap::new(),
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self.cur_channels = c * spatial;
        self
    }

    pub fn fc(&mut self, id: &str, out_c: usize, bias: bool, prunable: bool) -> &mut Self {
        let in_c = self.cur_channels;
        let mut params = BTreeMap::new();
        if let Some(w) = self.he_tensor(&[out_c, in_c], in_c) {
            params.insert("weight".into(), Param::new(ParamId::new(id, "weight"), w));
            if bias {
                params.insert("bias".into(), Param::new(ParamId::new(id, "bias"), Tensor::zeros(&[out_c])));
            }
        }
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::Fc { bias },
            inputs: vec![self.prev.clone()],
            in_channels: in_c,
            out_channels: out_c,
            prunable,
            params,
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self.cur_channels = out_c;
        self
    }

    pub fn residual_add(&mut self, id: &str, a: &str, b: &str, channels: usize) -> &mut Self {
        self.push(Layer {
            id: id.into(),
            kind: LayerKind::ResidualAdd,
            inputs: vec![a.to_string(), b.to_string()],
            in_channels: channels,
            out_channels: channels,
            prunable: false,
            params: BTreeMap::new(),
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self.cur_channels = channels;
        self
    }

    fn simple(&mut self, id: &str, kind: LayerKind) -> &mut Self {
        let c = self.cur_channels;
        self.push(Layer {
            id: id.into(),
            kind,
            inputs: vec![self.prev.clone()],
            in_channels: c,
            out_channels: c,
            prunable: false,
            params: BTreeMap::new(),
            running_mean: None,
            running_var: None,
            input_select: None,
        });
        self
    }

    fn push(&mut self, layer: Layer) {
        self.prev = layer.id.clone();
        self.layers.push(layer);
    }

    pub fn finish(self) -> Result<NetworkGraph> {
        let graph = NetworkGraph {
            name: self.name,
            layers: self.layers,
            input_channels: self.input_channels,
            input_hw: self.input_hw,
            num_classes: self.num_classes,
            shape_only: self.shape_only,
            base_frozen: false,
            attachments: BTreeMap::new(),
        };
        graph.validate()?;
        Ok(graph)
    }
}
