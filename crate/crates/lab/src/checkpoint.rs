//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "QATLCKPT"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header_sha   32 bytes  SHA-256 of the header bytes
//! header       JSON      topology, EMA states, config snapshot, tensor index
//! payload      f64 LE    tensors back to back, in index order
//! ```
//!
//! Each index entry carries `name`, `dtype` (always `f64`), `shape`, byte
//! `offset` into the payload and the SHA-256 of its bytes. Tensor names follow
//! the network's parameter names (`layers.0.weight`, `layers.2.bn.running_var`,
//! ...), and EMA shadows are stored as `ema.<k>.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use qatlab_core::ema::EmaState;
use qatlab_core::nn::{BatchNorm, BnMode, Layer, LayerKind, LossKind, Network, Nonlinearity};
use qatlab_core::qc::{CorrectionParams, QcGranularity};
use qatlab_core::quant::{GradScale, Granularity, QuantizerState};
use qatlab_core::Tensor;

use crate::{LabError, LabResult};

pub const MAGIC: &[u8; 8] = b"QATLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8 + 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub emas: Vec<EmaState>,
    /// Snapshot of the config that produced the checkpoint.
    pub config: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantDesc {
    bits: u32,
    signed: bool,
    /// `null` for per-tensor, else the channel axis.
    axis: Option<usize>,
    lsq: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnDesc {
    momentum: f64,
    eps: f64,
    eval: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDesc {
    kind: String,
    stride: usize,
    padding: usize,
    nonlinearity: String,
    w_quant: Option<QuantDesc>,
    a_quant: Option<QuantDesc>,
    /// Correction granularity, if the layer carries one.
    correction: Option<String>,
    bn: Option<BnDesc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDesc {
    input_shape: Vec<usize>,
    loss: String,
    layers: Vec<LayerDesc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmaDesc {
    alpha: f64,
    warmup_iters: u64,
    iter: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    topology: NetworkDesc,
    emas: Vec<EmaDesc>,
    config: Value,
    tensors: Vec<TensorEntry>,
}

fn quant_desc(q: &QuantizerState) -> QuantDesc {
    QuantDesc {
        bits: q.bits,
        signed: q.signed,
        axis: match q.granularity {
            Granularity::PerTensor => None,
            Granularity::PerChannel { axis } => Some(axis),
        },
        lsq: q.grad_scale == GradScale::Lsq,
    }
}

fn quant_from(d: &QuantDesc, scale: Tensor) -> QuantizerState {
    QuantizerState {
        scale,
        bits: d.bits,
        signed: d.signed,
        granularity: match d.axis {
            None => Granularity::PerTensor,
            Some(axis) => Granularity::PerChannel { axis },
        },
        grad_scale: if d.lsq { GradScale::Lsq } else { GradScale::None },
    }
}

fn nonlinearity_str(n: Nonlinearity) -> &'static str {
    match n {
        Nonlinearity::Relu => "relu",
        Nonlinearity::Silu => "silu",
        Nonlinearity::None => "none",
    }
}

fn describe(net: &Network) -> NetworkDesc {
    let layers = net
        .layers
        .iter()
        .map(|l| {
            let (kind, stride, padding) = match l.kind {
                LayerKind::Dense => ("dense", 1, 0),
                LayerKind::Conv2d { stride, padding } => ("conv2d", stride, padding),
                LayerKind::DepthwiseConv2d { stride, padding } => ("depthwise_conv2d", stride, padding),
            };
            LayerDesc {
                kind: kind.into(),
                stride,
                padding,
                nonlinearity: nonlinearity_str(l.nonlinearity).into(),
                w_quant: l.w_quant.as_ref().map(quant_desc),
                a_quant: l.a_quant.as_ref().map(quant_desc),
                correction: l.correction.as_ref().map(|c| c.granularity.as_str().into()),
                bn: l.bn.as_ref().map(|b| BnDesc { momentum: b.momentum, eps: b.eps, eval: b.mode == BnMode::Eval }),
            }
        })
        .collect();
    NetworkDesc { input_shape: net.input_shape.clone(), loss: net.loss.as_str().into(), layers }
}

/// Every tensor of `net`, including BN running statistics, in a fixed order.
fn network_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("weight"), &l.weight));
        out.push((p("bias"), &l.bias));
        if let Some(q) = &l.w_quant {
            out.push((p("w_scale"), &q.scale));
        }
        if let Some(q) = &l.a_quant {
            out.push((p("a_scale"), &q.scale));
        }
        if let Some(c) = &l.correction {
            out.push((p("qc.gamma"), &c.gamma));
            out.push((p("qc.beta"), &c.beta));
        }
        if let Some(bn) = &l.bn {
            out.push((p("bn.gain"), &bn.gain));
            out.push((p("bn.bias"), &bn.bias));
            out.push((p("bn.running_mean"), &bn.running_mean));
            out.push((p("bn.running_var"), &bn.running_var));
        }
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(network: Network, emas: Vec<EmaState>, config: Value) -> Self {
        Self { network, emas, config }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut named = network_tensors(&self.network);
        for (k, ema) in self.emas.iter().enumerate() {
            for (name, t) in &ema.shadows {
                named.push((format!("ema.{k}.{name}"), t));
            }
        }
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                sha256: sha_hex(&payload[start..]),
            });
        }
        let header = Header {
            topology: describe(&self.network),
            emas: self.emas.iter().map(|e| EmaDesc { alpha: e.alpha, warmup_iters: e.warmup_iters, iter: e.iter }).collect(),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> LabResult<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(LabError::Format("missing magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(LabError::Version { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < PREFIX {
            return Err(LabError::Format("truncated before the header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| LabError::Checksum("header".into()))?;
        let header_bytes = &bytes[PREFIX..header_end];
        if Sha256::digest(header_bytes).as_slice() != &bytes[20..52] {
            return Err(LabError::Checksum("header".into()));
        }
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| LabError::Format(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut consumed = 0usize;
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(LabError::Format(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let len: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = start
                .checked_add(len * 8)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| LabError::Checksum(e.name.clone()))?;
            if sha_hex(raw) != e.sha256 {
                return Err(LabError::Checksum(e.name.clone()));
            }
            consumed = consumed.max(start + raw.len());
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| LabError::Format(format!("{}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(LabError::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        if consumed != payload.len() {
            return Err(LabError::Format(format!("{} trailing bytes after the last tensor", payload.len() - consumed)));
        }
        let network = rebuild(&header.topology, &mut tensors)?;
        let mut emas = Vec::with_capacity(header.emas.len());
        for (k, d) in header.emas.iter().enumerate() {
            let prefix = format!("ema.{k}.");
            let names: Vec<String> = tensors.keys().filter(|n| n.starts_with(&prefix)).cloned().collect();
            let mut shadows = BTreeMap::new();
            for n in names {
                let t = tensors.remove(&n).expect("listed");
                shadows.insert(n[prefix.len()..].to_string(), t);
            }
            let mut ema = EmaState::new(d.alpha, d.warmup_iters)?.with_shadows(shadows);
            ema.iter = d.iter;
            emas.push(ema);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(LabError::Format(format!("tensor {extra} does not belong to the topology")));
        }
        Ok(Self { network, emas, config: header.config })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn rebuild(desc: &NetworkDesc, tensors: &mut BTreeMap<String, Tensor>) -> LabResult<Network> {
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| LabError::Format(format!("missing tensor {name}")));
    let mut layers = Vec::with_capacity(desc.layers.len());
    for (i, d) in desc.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{i}.{s}");
        let kind = match d.kind.as_str() {
            "dense" => LayerKind::Dense,
            "conv2d" => LayerKind::Conv2d { stride: d.stride, padding: d.padding },
            "depthwise_conv2d" => LayerKind::DepthwiseConv2d { stride: d.stride, padding: d.padding },
            other => return Err(LabError::Format(format!("layer {i}: unknown kind {other}"))),
        };
        let mut layer = Layer::new(kind, take(p("weight"))?)?;
        layer.bias = take(p("bias"))?;
        layer.nonlinearity = match d.nonlinearity.as_str() {
            "relu" => Nonlinearity::Relu,
            "silu" => Nonlinearity::Silu,
            "none" => Nonlinearity::None,
            other => return Err(LabError::Format(format!("layer {i}: unknown nonlinearity {other}"))),
        };
        if let Some(q) = &d.w_quant {
            layer.w_quant = Some(quant_from(q, take(p("w_scale"))?));
        }
        if let Some(q) = &d.a_quant {
            layer.a_quant = Some(quant_from(q, take(p("a_scale"))?));
        }
        if let Some(g) = &d.correction {
            let granularity = match g.as_str() {
                "per_tensor" => QcGranularity::PerTensor,
                "per_channel" => QcGranularity::PerChannel,
                other => return Err(LabError::Format(format!("layer {i}: unknown correction granularity {other}"))),
            };
            layer.correction = Some(CorrectionParams { gamma: take(p("qc.gamma"))?, beta: take(p("qc.beta"))?, granularity });
        }
        if let Some(b) = &d.bn {
            layer.bn = Some(BatchNorm {
                gain: take(p("bn.gain"))?,
                bias: take(p("bn.bias"))?,
                running_mean: take(p("bn.running_mean"))?,
                running_var: take(p("bn.running_var"))?,
                momentum: b.momentum,
                eps: b.eps,
                mode: if b.eval { BnMode::Eval } else { BnMode::Train },
            });
        }
        layers.push(layer);
    }
    let loss = match desc.loss.as_str() {
        "mse" => LossKind::Mse,
        "softmax_ce" => LossKind::SoftmaxCrossEntropy,
        other => return Err(LabError::Format(format!("unknown loss {other}"))),
    };
    Ok(Network::new(desc.input_shape.clone(), layers, loss)?)
}
