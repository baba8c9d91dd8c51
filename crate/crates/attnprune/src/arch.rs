//! Built-in architectures behind a name-keyed registry.
//!
//! ImageNet-scale networks build shape-only (no parameter storage) so cost
//! accounting never allocates hundreds of millions of values; the desk-scale
//! networks (tiny_cnn, vgg10) build fully parameterized and trainable.

use serde::Deserialize;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NetworkGraph};

pub trait ArchBuilder: Sync {
    fn name(&self) -> &'static str;

    /// `seed = None` builds shape-only; `Some(seed)` initializes parameters.
    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph>;
}

static BUILDERS: &[&dyn ArchBuilder] = &[&TinyCnn, &Vgg10, &Vgg16, &ResNet18, &ResNet50, &MobileNet075];

pub fn builders() -> &'static [&'static dyn ArchBuilder] {
    BUILDERS
}

pub fn arch_names() -> Vec<&'static str> {
    BUILDERS.iter().map(|b| b.name()).collect()
}

pub fn build_architecture(
    name: &str,
    resolution: (usize, usize),
    num_classes: usize,
    seed: Option<u64>,
) -> Result<NetworkGraph> {
    BUILDERS
        .iter()
        .find(|b| b.name() == name)
        .ok_or_else(|| Error::UnknownArchitecture(name.to_string()))?
        .build(resolution, num_classes, seed)
}

fn require_shape_only(name: &str, seed: Option<u64>) -> Result<()> {
    if seed.is_some() {
        return Err(Error::InvalidInput(format!(
            "{name} is supported shape-only; parameterized builds are limited to desk-scale networks"
        )));
    }
    Ok(())
}

fn require_divisible(name: &str, resolution: (usize, usize), by: usize) -> Result<()> {
    if resolution.0 % by != 0 || resolution.1 % by != 0 || resolution.0 == 0 {
        return Err(Error::InvalidInput(format!(
            "{name} needs a resolution divisible by {by}, got {}x{}",
            resolution.0, resolution.1
        )));
    }
    Ok(())
}

/// Three conv blocks (8, 16, 32 channels) with batch norm, GAP head.
pub struct TinyCnn;

impl ArchBuilder for TinyCnn {
    fn name(&self) -> &'static str {
        "tiny_cnn"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_divisible("tiny_cnn", resolution, 4)?;
        let mut b = GraphBuilder::new("tiny_cnn", 3, resolution, num_classes, seed);
        b.conv("conv1", 8, 3, 1, 1, false, false)
            .bn("bn1")
            .relu("relu1")
            .max_pool("pool1", 2)
            .conv("conv2", 16, 3, 1, 1, false, true)
            .bn("bn2")
            .relu("relu2")
            .max_pool("pool2", 2)
            .conv("conv3", 32, 3, 1, 1, false, true)
            .bn("bn3")
            .relu("relu3")
            .gap("gap")
            .fc("fc", num_classes, true, true);
        b.finish()
    }
}

/// The first ten convolutional layers of the 16-layer VGG stack with the FC
/// head replaced by GAP.
pub struct Vgg10;

impl ArchBuilder for Vgg10 {
    fn name(&self) -> &'static str {
        "vgg10"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_divisible("vgg10", resolution, 8)?;
        let mut b = GraphBuilder::new("vgg10", 3, resolution, num_classes, seed);
        b.conv("conv1_1", 64, 3, 1, 1, true, false)
            .relu("relu1_1")
            .conv("conv1_2", 64, 3, 1, 1, true, true)
            .relu("relu1_2")
            .max_pool("pool1", 2)
            .conv("conv2_1", 128, 3, 1, 1, true, true)
            .relu("relu2_1")
            .conv("conv2_2", 128, 3, 1, 1, true, true)
            .relu("relu2_2")
            .max_pool("pool2", 2)
            .conv("conv3_1", 256, 3, 1, 1, true, true)
            .relu("relu3_1")
            .conv("conv3_2", 256, 3, 1, 1, true, true)
            .relu("relu3_2")
            .conv("conv3_3", 256, 3, 1, 1, true, true)
            .relu("relu3_3")
            .max_pool("pool3", 2)
            .conv("conv4_1", 512, 3, 1, 1, true, true)
            .relu("relu4_1")
            .conv("conv4_2", 512, 3, 1, 1, true, true)
            .relu("relu4_2")
            .conv("conv4_3", 512, 3, 1, 1, true, true)
            .relu("relu4_3")
            .gap("gap")
            .fc("fc", num_classes, true, true);
        b.finish()
    }
}

/// Full 16-layer VGG with the three-FC head; shape-only.
pub struct Vgg16;

impl ArchBuilder for Vgg16 {
    fn name(&self) -> &'static str {
        "vgg16"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_shape_only("vgg16", seed)?;
        require_divisible("vgg16", resolution, 32)?;
        let mut b = GraphBuilder::new("vgg16", 3, resolution, num_classes, None);
        let blocks: &[(usize, usize)] = &[(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
        let mut first = true;
        for (bi, &(c, n)) in blocks.iter().enumerate() {
            for li in 0..n {
                let id = format!("conv{}_{}", bi + 1, li + 1);
                b.conv(&id, c, 3, 1, 1, true, !first);
                first = false;
                b.relu(&format!("relu{}_{}", bi + 1, li + 1));
            }
            b.max_pool(&format!("pool{}", bi + 1), 2);
        }
        let spatial = (resolution.0 / 32) * (resolution.1 / 32);
        b.flatten("flatten", spatial)
            .fc("fc1", 4096, true, true)
            .relu("relu_fc1")
            .fc("fc2", 4096, true, true)
            .relu("relu_fc2")
            .fc("fc3", num_classes, true, true);
        b.finish()
    }
}

fn basic_block(b: &mut GraphBuilder, name: &str, out_c: usize, stride: usize) {
    let (entry, entry_c) = (b.last_id().to_string(), b.current_channels());
    b.conv(&format!("{name}_conv1"), out_c, 3, stride, 1, false, true)
        .bn(&format!("{name}_bn1"))
        .relu(&format!("{name}_relu1"))
        .conv(&format!("{name}_conv2"), out_c, 3, 1, 1, false, true)
        .bn(&format!("{name}_bn2"));
    let trunk = b.last_id().to_string();
    let shortcut = if stride != 1 || entry_c != out_c {
        b.set_cursor(&entry, entry_c);
        b.conv(&format!("{name}_down"), out_c, 1, stride, 0, false, false)
            .bn(&format!("{name}_down_bn"));
        b.last_id().to_string()
    } else {
        entry
    };
    b.residual_add(&format!("{name}_add"), &trunk, &shortcut, out_c);
    b.relu(&format!("{name}_relu2"));
}

/// 18-layer residual network (two 3x3 convs per block); shape-only.
pub struct ResNet18;

impl ArchBuilder for ResNet18 {
    fn name(&self) -> &'static str {
        "resnet18"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_shape_only("resnet18", seed)?;
        require_divisible("resnet18", resolution, 32)?;
        let mut b = GraphBuilder::new("resnet18", 3, resolution, num_classes, None);
        b.conv("conv1", 64, 7, 2, 3, false, false)
            .bn("bn1")
            .relu("relu1")
            .max_pool("pool1", 2);
        for (si, &c) in [64usize, 128, 256, 512].iter().enumerate() {
            for blk in 0..2 {
                let stride = if si > 0 && blk == 0 { 2 } else { 1 };
                basic_block(&mut b, &format!("s{}b{}", si + 1, blk + 1), c, stride);
            }
        }
        b.gap("gap").fc("fc", num_classes, true, true);
        b.finish()
    }
}

fn bottleneck_block(b: &mut GraphBuilder, name: &str, width: usize, stride: usize) {
    let out_c = width * 4;
    let (entry, entry_c) = (b.last_id().to_string(), b.current_channels());
    // stride on the first 1x1, the original residual-network convention
    b.conv(&format!("{name}_conv1"), width, 1, stride, 0, false, true)
        .bn(&format!("{name}_bn1"))
        .relu(&format!("{name}_relu1"))
        .conv(&format!("{name}_conv2"), width, 3, 1, 1, false, true)
        .bn(&format!("{name}_bn2"))
        .relu(&format!("{name}_relu2"))
        .conv(&format!("{name}_conv3"), out_c, 1, 1, 0, false, true)
        .bn(&format!("{name}_bn3"));
    let trunk = b.last_id().to_string();
    let shortcut = if stride != 1 || entry_c != out_c {
        b.set_cursor(&entry, entry_c);
        b.conv(&format!("{name}_down"), out_c, 1, stride, 0, false, false)
            .bn(&format!("{name}_down_bn"));
        b.last_id().to_string()
    } else {
        entry
    };
    b.residual_add(&format!("{name}_add"), &trunk, &shortcut, out_c);
    b.relu(&format!("{name}_relu3"));
}

/// 50-layer bottleneck residual network; shape-only.
pub struct ResNet50;

impl ArchBuilder for ResNet50 {
    fn name(&self) -> &'static str {
        "resnet50"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_shape_only("resnet50", seed)?;
        require_divisible("resnet50", resolution, 32)?;
        let mut b = GraphBuilder::new("resnet50", 3, resolution, num_classes, None);
        b.conv("conv1", 64, 7, 2, 3, false, false)
            .bn("bn1")
            .relu("relu1")
            .max_pool("pool1", 2);
        let stages: &[(usize, usize)] = &[(64, 3), (128, 4), (256, 6), (512, 3)];
        for (si, &(w, n)) in stages.iter().enumerate() {
            for blk in 0..n {
                let stride = if si > 0 && blk == 0 { 2 } else { 1 };
                bottleneck_block(&mut b, &format!("s{}b{}", si + 1, blk + 1), w, stride);
            }
        }
        b.gap("gap").fc("fc", num_classes, true, true);
        b.finish()
    }
}

/// Depthwise-separable network at width multiplier 0.75; shape-only.
/// Only the pointwise (1x1) convolutions are pruning targets.
pub struct MobileNet075;

impl ArchBuilder for MobileNet075 {
    fn name(&self) -> &'static str {
        "mobilenet_075"
    }

    fn build(&self, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
        require_shape_only("mobilenet_075", seed)?;
        require_divisible("mobilenet_075", resolution, 32)?;
        let scale = |c: usize| c * 3 / 4;
        let mut b = GraphBuilder::new("mobilenet_075", 3, resolution, num_classes, None);
        b.conv("conv1", scale(32), 3, 2, 1, false, false)
            .bn("conv1_bn")
            .relu("conv1_relu");
        // (pointwise output channels, depthwise stride)
        let blocks: &[(usize, usize)] = &[
            (64, 1),
            (128, 2),
            (128, 1),
            (256, 2),
            (256, 1),
            (512, 2),
            (512, 1),
            (512, 1),
            (512, 1),
            (512, 1),
            (512, 1),
            (1024, 2),
            (1024, 1),
        ];
        for (i, &(c, stride)) in blocks.iter().enumerate() {
            let n = i + 2;
            b.depthwise(&format!("dw{n}"), 3, stride, 1)
                .bn(&format!("dw{n}_bn"))
                .relu(&format!("dw{n}_relu"))
                .conv(&format!("pw{n}"), scale(c), 1, 1, 0, false, true)
                .bn(&format!("pw{n}_bn"))
                .relu(&format!("pw{n}_relu"));
        }
        b.gap("gap").fc("fc", num_classes, true, true);
        b.finish()
    }
}

// --- custom architectures from a spec file -------------------------------

#[derive(Debug, Deserialize)]
struct CustomSpec {
    input_channels: usize,
    layers: Vec<CustomLayer>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum CustomLayer {
    Conv {
        id: String,
        out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default = "yes")]
        prunable: bool,
    },
    Depthwise {
        id: String,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Bn {
        id: String,
    },
    Relu {
        id: String,
    },
    MaxPool {
        id: String,
        k: usize,
    },
    Gap {
        id: String,
    },
    Flatten {
        id: String,
    },
    Fc {
        id: String,
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        prunable: bool,
    },
    ResidualAdd {
        id: String,
        a: String,
        b: String,
    },
    /// Move the builder cursor to an earlier layer, to start a branch.
    Cursor {
        id: String,
    },
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

/// Build a network from a JSON layer listing.
pub fn build_custom(path: &Path, resolution: (usize, usize), num_classes: usize, seed: Option<u64>) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path)?;
    let spec: CustomSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("custom architecture {}: {e}", path.display())))?;
    let mut b = GraphBuilder::new(
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom"),
        spec.input_channels,
        resolution,
        num_classes,
        seed,
    );
    let mut widths: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for layer in &spec.layers {
        match layer {
            CustomLayer::Conv { id, out, k, stride, padding, bias, prunable } => {
                b.conv(id, *out, *k, *stride, *padding, *bias, *prunable);
            }
            CustomLayer::Depthwise { id, k, stride, padding } => {
                b.depthwise(id, *k, *stride, *padding);
            }
            CustomLayer::Bn { id } => {
                b.bn(id);
            }
            CustomLayer::Relu { id } => {
                b.relu(id);
            }
            CustomLayer::MaxPool { id, k } => {
                b.max_pool(id, *k);
            }
            CustomLayer::Gap { id } => {
                b.gap(id);
            }
            CustomLayer::Flatten { id } => {
                // spatial extent filled in by validation via declared channels;
                // the builder needs the multiplier, so recompute it lazily
                return Err(Error::Config(format!(
                    "flatten '{id}': use gap for custom heads; flatten needs explicit spatial extents"
                )));
            }
            CustomLayer::Fc { id, out, bias, prunable } => {
                b.fc(id, *out, *bias, *prunable);
            }
            CustomLayer::ResidualAdd { id, a, b: rhs } => {
                let c = *widths
                    .get(a)
                    .ok_or_else(|| Error::Config(format!("residual_add '{id}': unknown input '{a}'")))?;
                b.residual_add(id, a, rhs, c);
            }
            CustomLayer::Cursor { id } => {
                let c = *widths
                    .get(id)
                    .ok_or_else(|| Error::Config(format!("cursor: unknown layer '{id}'")))?;
                b.set_cursor(id, c);
            }
        }
        widths.insert(
            match layer {
                CustomLayer::Conv { id, .. }
                | CustomLayer::Depthwise { id, .. }
                | CustomLayer::Bn { id }
                | CustomLayer::Relu { id }
                | CustomLayer::MaxPool { id, .. }
                | CustomLayer::Gap { id }
                | CustomLayer::Flatten { id }
                | CustomLayer::Fc { id, .. }
                | CustomLayer::ResidualAdd { id, .. }
                | CustomLayer::Cursor { id } => id.clone(),
            },
            b.current_channels(),
        );
    }
    b.finish()
}
