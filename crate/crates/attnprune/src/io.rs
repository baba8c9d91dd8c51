//! Model container: versioned header, canonical JSON topology and tensor
//! index, raw little-endian f64 blob, whole-file SHA-256 trailer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionMeta, AttentionModule};
use crate::error::{Error, Result};
use crate::graph::{Layer, LayerTopo, NetworkGraph};
use crate::tensor::{Param, ParamId, Tensor};

const MAGIC: &[u8; 8] = b"CHPRUNE\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
    offset: u64,
    /// requires_grad for parameters; false for running statistics
    grad: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    input_channels: usize,
    input_hw: (usize, usize),
    num_classes: usize,
    shape_only: bool,
    base_frozen: bool,
    dtype: String,
    topology: Vec<LayerTopo>,
    attention: Vec<AttentionMeta>,
    tensors: Vec<TensorEntry>,
}

fn push_tensor(entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>, key: String, t: &Tensor, grad: bool) {
    entries.push(TensorEntry {
        key,
        shape: t.shape.clone(),
        offset: blob.len() as u64,
        grad,
    });
    for v in &t.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_model(graph: &NetworkGraph, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for layer in &graph.layers {
        for (role, p) in &layer.params {
            push_tensor(&mut entries, &mut blob, format!("base/{}/{role}", layer.id), &p.value, p.requires_grad);
        }
        if let Some(m) = &layer.running_mean {
            push_tensor(&mut entries, &mut blob, format!("base/{}/@mean", layer.id), m, false);
        }
        if let Some(v) = &layer.running_var {
            push_tensor(&mut entries, &mut blob, format!("base/{}/@var", layer.id), v, false);
        }
    }
    let mut attention = Vec::new();
    for (id, module) in &graph.attachments {
        attention.push(module.meta.clone());
        for p in module.params() {
            let role = p.id.0.rsplit('.').next().unwrap_or("?").to_string();
            push_tensor(&mut entries, &mut blob, format!("attn/{id}/{role}"), &p.value, p.requires_grad);
        }
        push_tensor(&mut entries, &mut blob, format!("attn/{id}/@mean"), &module.bn_mean, false);
        push_tensor(&mut entries, &mut blob, format!("attn/{id}/@var"), &module.bn_var, false);
    }

    let header = Header {
        name: graph.name.clone(),
        input_channels: graph.input_channels,
        input_hw: graph.input_hw,
        num_classes: graph.num_classes,
        shape_only: graph.shape_only,
        base_frozen: graph.base_frozen,
        dtype: "f64".into(),
        topology: graph.topology(),
        attention,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(header_json.len() + blob.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * 8;
    if end > blob.len() {
        return Err(Error::Format(format!("tensor '{}' overruns the blob", entry.key)));
    }
    let data = blob[start..end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

pub fn load_model(path: &Path) -> Result<NetworkGraph> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Format("file too short for a model container".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != trailer {
        return Err(Error::Format("checksum mismatch: file corrupt or truncated".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + header_len > body.len() {
        return Err(Error::Format("header length overruns the file".into()));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype '{}'", header.dtype)));
    }
    let blob = &body[20 + header_len..];

    let by_key: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.key.as_str(), e)).collect();
    let fetch = |key: &str| -> Result<(Tensor, bool)> {
        let e = by_key
            .get(key)
            .ok_or_else(|| Error::Format(format!("container missing tensor '{key}'")))?;
        Ok((read_tensor(blob, e)?, e.grad))
    };

    let mut layers = Vec::new();
    for topo in &header.topology {
        let mut params = BTreeMap::new();
        let mut running_mean = None;
        let mut running_var = None;
        if !header.shape_only {
            for e in &header.tensors {
                let prefix = format!("base/{}/", topo.id);
                if let Some(role) = e.key.strip_prefix(&prefix) {
                    let t = read_tensor(blob, e)?;
                    match role {
                        "@mean" => running_mean = Some(t),
                        "@var" => running_var = Some(t),
                        role => {
                            let mut p = Param::new(ParamId::new(&topo.id, role), t);
                            p.requires_grad = e.grad;
                            params.insert(role.to_string(), p);
                        }
                    }
                }
            }
        }
        layers.push(Layer {
            id: topo.id.clone(),
            kind: topo.kind.clone(),
            inputs: topo.inputs.clone(),
            in_channels: topo.in_channels,
            out_channels: topo.out_channels,
            prunable: topo.prunable,
            params,
            running_mean,
            running_var,
            input_select: topo.input_select.clone(),
        });
    }

    let mut attachments = BTreeMap::new();
    for meta in &header.attention {
        let id = &meta.layer_id;
        let mut module = AttentionModule::new(id, meta.channels, meta.fc_mode, &meta.gate, meta.kernel_size, 0)?;
        for p in module.params_mut() {
            let role = p.id.0.rsplit('.').next().unwrap_or("?").to_string();
            let (t, grad) = fetch(&format!("attn/{id}/{role}"))?;
            if t.shape != p.value.shape {
                return Err(Error::dim(
                    format!("attention tensor attn/{id}/{role}"),
                    format!("{:?}", p.value.shape),
                    format!("{:?}", t.shape),
                ));
            }
            p.value = t;
            p.requires_grad = grad;
        }
        module.bn_mean = fetch(&format!("attn/{id}/@mean"))?.0;
        module.bn_var = fetch(&format!("attn/{id}/@var"))?.0;
        attachments.insert(id.clone(), module);
    }

    let graph = NetworkGraph {
        name: header.name,
        layers,
        input_channels: header.input_channels,
        input_hw: header.input_hw,
        num_classes: header.num_classes,
        shape_only: header.shape_only,
        base_frozen: header.base_frozen,
        attachments,
    };
    graph.validate()?;
    Ok(graph)
}
