//! The LMCK1 checkpoint container: one bit-exact file format shared by
//! models, masks, adapters, and quantized weights.
//!
//! Layout: 5-byte magic `LMCK1`, a little-endian `u64` header length, a
//! JSON header (tensor directory + metadata, space-padded so the payload
//! starts 8-aligned), then the tensor payload — little-endian, row-major,
//! every tensor offset 8-aligned, no padding after the last tensor (the
//! file length is exactly `last offset + last length`).
//!
//! Writes are canonical: tensors are stored sorted by name and the header
//! is serialized deterministically, so identical logical content yields
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeltaMaskMode, LoraAdapter, LoraAdapters, ModelConfig, TargetId, TransformerWeights};
use crate::prune::{MaskSet, StructuredPlan};
use crate::quant::{Codebook, QuantizedLayer, QuantizedModel, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LMCK1";
const FIXED_PREFIX: usize = MAGIC.len() + 8; // magic + header length field

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    /// Packed 4-bit codes (two per byte); the logical shape counts
    /// elements, the payload holds `⌈numel/2⌉` bytes. A `q4` tensor is
    /// always accompanied by an f32 `<name>.scales` tensor.
    Q4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// LoRA bookkeeping carried by adapter containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub delta_mask_mode: DeltaMaskMode,
}

/// Quantization bookkeeping; `levels` pins the codebook constants so a
/// reader can detect drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub block_size: usize,
    pub codebook: Codebook,
    pub levels: Vec<f64>,
}

/// Header metadata: what the artifact is plus full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ContainerMeta {
    /// Artifact kind: `model`, `masks`, `adapters`, or `quantized-model`.
    pub kind: String,
    pub tool_version: String,
    pub model: Option<ModelConfig>,
    pub plan: Option<StructuredPlan>,
    pub lora: Option<LoraMeta>,
    pub quant: Option<QuantMeta>,
    /// Named seeds that produced this artifact.
    pub seeds: BTreeMap<String, u64>,
    /// Fully-resolved run configuration, echoed for provenance.
    pub run_config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: ContainerMeta,
}

/// An in-memory container: metadata plus named tensors in canonical
/// (name-sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: ContainerMeta,
    entries: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<f32>> {
    let data: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

impl Container {
    pub fn new(kind: &str) -> Container {
        Container {
            meta: ContainerMeta {
                kind: kind.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                ..ContainerMeta::default()
            },
            entries: BTreeMap::new(),
        }
    }

    pub fn add_f32(&mut self, name: &str, t: &Tensor<f32>) {
        self.entries.insert(name.to_string(), (Dtype::F32, t.shape().to_vec(), f32_bytes(t)));
    }

    pub fn add_u8(&mut self, name: &str, bytes: Vec<u8>) {
        let shape = vec![bytes.len()];
        self.entries.insert(name.to_string(), (Dtype::U8, shape, bytes));
    }

    /// Packed 4-bit codes with their logical (unpacked) shape.
    pub fn add_q4(&mut self, name: &str, shape: Vec<usize>, codes: Vec<u8>) {
        self.entries.insert(name.to_string(), (Dtype::Q4, shape, codes));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let (dtype, shape, bytes) = self.entry(name)?;
        if dtype != Dtype::F32 {
            return Err(Error::Consistency(format!("tensor {name} is {dtype:?}, expected f32")));
        }
        f32_from_bytes(shape.clone(), bytes)
    }

    pub fn u8_bytes(&self, name: &str) -> Result<&[u8]> {
        let (dtype, _, bytes) = self.entry(name)?;
        if dtype != Dtype::U8 {
            return Err(Error::Consistency(format!("tensor {name} is {dtype:?}, expected u8")));
        }
        Ok(bytes)
    }

    pub fn q4_codes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let (dtype, shape, bytes) = self.entry(name)?;
        if dtype != Dtype::Q4 {
            return Err(Error::Consistency(format!("tensor {name} is {dtype:?}, expected q4")));
        }
        Ok((shape, bytes))
    }

    fn entry(&self, name: &str) -> Result<(Dtype, &Vec<usize>, &Vec<u8>)> {
        self.entries
            .get(name)
            .map(|(d, s, b)| (*d, s, b))
            .ok_or_else(|| Error::MissingArtifact(format!("container lacks tensor {name}")))
    }

    /// Serialize canonically. The header length depends on the offsets it
    /// prints, and the offsets depend on the header length; a short
    /// fixed-point iteration settles both (it converges because offsets,
    /// and hence the header, only ever grow).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload_start = FIXED_PREFIX;
        for _ in 0..16 {
            let tensors = self.layout(payload_start)?;
            let header = Header { tensors, meta: self.meta.clone() };
            let mut text = serde_json::to_string(&header)
                .map_err(|e| Error::Consistency(format!("header serialization: {e}")))?;
            while (FIXED_PREFIX + text.len()) % 8 != 0 {
                text.push(' ');
            }
            let next_start = FIXED_PREFIX + text.len();
            if next_start != payload_start {
                payload_start = next_start;
                continue;
            }
            let tensors = header.tensors;
            let file_len = tensors.last().map_or(payload_start, |t| (t.offset + t.len) as usize);
            let mut out = Vec::with_capacity(file_len);
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            for (entry, (_, (_, _, bytes))) in tensors.iter().zip(&self.entries) {
                out.resize(entry.offset as usize, 0); // inter-tensor alignment padding
                out.extend_from_slice(bytes);
            }
            return Ok(out);
        }
        Err(Error::Consistency("container layout failed to converge".to_string()))
    }

    fn layout(&self, payload_start: usize) -> Result<Vec<TensorEntry>> {
        let mut cursor = payload_start as u64;
        let mut out = Vec::with_capacity(self.entries.len());
        for (name, (dtype, shape, bytes)) in &self.entries {
            let numel: usize = shape.iter().product();
            let expect = match dtype {
                Dtype::F32 => numel * 4,
                Dtype::U8 => numel,
                Dtype::Q4 => numel.div_ceil(2),
            };
            if bytes.len() != expect {
                return Err(Error::Consistency(format!(
                    "tensor {name}: {} payload bytes, shape implies {expect}",
                    bytes.len()
                )));
            }
            cursor = cursor.next_multiple_of(8);
            out.push(TensorEntry {
                name: name.clone(),
                dtype: *dtype,
                shape: shape.clone(),
                offset: cursor,
                len: bytes.len() as u64,
            });
            cursor += bytes.len() as u64;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < FIXED_PREFIX || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Consistency("not an LMCK1 container (bad magic)".to_string()));
        }
        let header_len =
            u64::from_le_bytes(bytes[MAGIC.len()..FIXED_PREFIX].try_into().unwrap()) as usize;
        let payload_start = FIXED_PREFIX
            .checked_add(header_len)
            .filter(|&p| p <= bytes.len())
            .ok_or_else(|| Error::Consistency("header length exceeds file size".to_string()))?;
        let header: Header = serde_json::from_slice(&bytes[FIXED_PREFIX..payload_start])
            .map_err(|e| Error::Consistency(format!("container header: {e}")))?;

        let mut prev_end = payload_start as u64;
        for entry in &header.tensors {
            if entry.offset % 8 != 0 {
                return Err(Error::Consistency(format!(
                    "tensor {} offset {} is not 8-aligned",
                    entry.name, entry.offset
                )));
            }
            if entry.offset < prev_end {
                return Err(Error::Consistency(format!(
                    "tensor {} overlaps the preceding data",
                    entry.name
                )));
            }
            prev_end = entry.offset + entry.len;
        }
        if prev_end != bytes.len() as u64 {
            return Err(Error::Consistency(format!(
                "file length {} does not equal last offset + last length {prev_end}",
                bytes.len()
            )));
        }

        let mut entries = BTreeMap::new();
        for entry in header.tensors {
            let data = bytes[entry.offset as usize..(entry.offset + entry.len) as usize].to_vec();
            let numel: usize = entry.shape.iter().product();
            let expect = match entry.dtype {
                Dtype::F32 => numel * 4,
                Dtype::U8 => numel,
                Dtype::Q4 => numel.div_ceil(2),
            };
            if data.len() != expect {
                return Err(Error::Consistency(format!(
                    "tensor {}: {} payload bytes, shape implies {expect}",
                    entry.name,
                    data.len()
                )));
            }
            if entries.insert(entry.name.clone(), (entry.dtype, entry.shape, data)).is_some() {
                return Err(Error::Consistency(format!("duplicate tensor {}", entry.name)));
            }
        }
        Ok(Container { meta: header.meta, entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        Container::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Consistency(format!(
                "expected a {kind} container, found '{}'",
                self.meta.kind
            )));
        }
        Ok(())
    }
}

// ─── artifact-specific packing ───────────────────────────────────────────

pub fn model_container(cfg: &ModelConfig, w: &TransformerWeights<f32>) -> Container {
    let mut c = Container::new("model");
    c.meta.model = Some(cfg.clone());
    for (name, t) in w.named() {
        c.add_f32(&name, t);
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<(ModelConfig, TransformerWeights<f32>)> {
    c.expect_kind("model")?;
    let cfg = c
        .meta
        .model
        .clone()
        .ok_or_else(|| Error::Consistency("model container lacks a model config".to_string()))?;
    let map = c
        .entries
        .keys()
        .map(|name| Ok((name.clone(), c.f32_tensor(name)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((cfg, TransformerWeights::from_named(map)?))
}

pub fn masks_container(cfg: &ModelConfig, set: &MaskSet) -> Container {
    let mut c = Container::new("masks");
    c.meta.model = Some(cfg.clone());
    for (name, m) in &set.masks {
        c.add_f32(name, m);
    }
    c
}

pub fn masks_from_container(c: &Container) -> Result<MaskSet> {
    c.expect_kind("masks")?;
    let masks = c
        .entries
        .keys()
        .map(|name| Ok((name.clone(), c.f32_tensor(name)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MaskSet { masks })
}

/// Adapters travel with everything a later merge needs: the LoRA
/// hyperparameters, the pruning plan when the base was compacted, and the
/// mask set when the deltas were trained mask-pinned.
pub fn adapters_container(
    cfg: &ModelConfig,
    adapters: &LoraAdapters<f32>,
    mode: DeltaMaskMode,
    plan: Option<&StructuredPlan>,
    masks: Option<&MaskSet>,
) -> Container {
    let mut c = Container::new("adapters");
    c.meta.model = Some(cfg.clone());
    c.meta.lora = Some(LoraMeta { rank: adapters.rank, alpha: adapters.alpha, delta_mask_mode: mode });
    c.meta.plan = plan.cloned();
    for (target, ad) in &adapters.map {
        let name = target.weight_name();
        c.add_f32(&format!("adapters.{name}.a"), &ad.a);
        c.add_f32(&format!("adapters.{name}.b"), &ad.b);
    }
    if let Some(set) = masks {
        for (name, m) in &set.masks {
            c.add_f32(&format!("masks.{name}"), m);
        }
    }
    c
}

pub struct AdaptersArtifact {
    pub cfg: ModelConfig,
    pub adapters: LoraAdapters<f32>,
    pub mode: DeltaMaskMode,
    pub plan: Option<StructuredPlan>,
    pub masks: Option<MaskSet>,
}

pub fn adapters_from_container(c: &Container) -> Result<AdaptersArtifact> {
    c.expect_kind("adapters")?;
    let cfg = c
        .meta
        .model
        .clone()
        .ok_or_else(|| Error::Consistency("adapters container lacks a model config".to_string()))?;
    let lora = c
        .meta
        .lora
        .clone()
        .ok_or_else(|| Error::Consistency("adapters container lacks lora metadata".to_string()))?;
    let mut map = BTreeMap::new();
    let mut mask_map = BTreeMap::new();
    for name in c.entries.keys() {
        if let Some(rest) = name.strip_prefix("adapters.") {
            let (weight, part) = rest
                .rsplit_once('.')
                .ok_or_else(|| Error::Consistency(format!("malformed adapter tensor {name}")))?;
            let target = TargetId::from_weight_name(weight)
                .ok_or_else(|| Error::Consistency(format!("unknown adapter target {weight}")))?;
            let t = c.f32_tensor(name)?;
            let slot = map.entry(target).or_insert((None, None));
            match part {
                "a" => slot.0 = Some(t),
                "b" => slot.1 = Some(t),
                _ => return Err(Error::Consistency(format!("malformed adapter tensor {name}"))),
            }
        } else if let Some(weight) = name.strip_prefix("masks.") {
            mask_map.insert(weight.to_string(), c.f32_tensor(name)?);
        } else {
            return Err(Error::Consistency(format!("unexpected tensor {name} in adapters container")));
        }
    }
    let map = map
        .into_iter()
        .map(|(target, (a, b))| {
            let a = a.ok_or_else(|| {
                Error::MissingArtifact(format!("adapter {} lacks its A factor", target.weight_name()))
            })?;
            let b = b.ok_or_else(|| {
                Error::MissingArtifact(format!("adapter {} lacks its B factor", target.weight_name()))
            })?;
            if a.rows() != lora.rank || b.cols() != lora.rank {
                return Err(Error::shape(
                    "adapters_from_container",
                    format!("adapter {} does not match rank {}", target.weight_name(), lora.rank),
                ));
            }
            Ok((target, LoraAdapter { a, b }))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(AdaptersArtifact {
        cfg,
        adapters: LoraAdapters { rank: lora.rank, alpha: lora.alpha, map },
        mode: lora.delta_mask_mode,
        plan: c.meta.plan.clone(),
        masks: if mask_map.is_empty() { None } else { Some(MaskSet { masks: mask_map }) },
    })
}

pub fn quantized_container(cfg: &ModelConfig, qm: &QuantizedModel) -> Container {
    let mut c = Container::new("quantized-model");
    c.meta.model = Some(cfg.clone());
    c.meta.quant = Some(QuantMeta {
        block_size: qm.block_size,
        codebook: qm.codebook,
        levels: qm.codebook.levels().to_vec(),
    });
    for (name, qt) in qm.named_quantized() {
        c.add_q4(&name, qt.shape.clone(), qt.codes.clone());
        c.add_f32(&format!("{name}.scales"), &Tensor::vector(qt.scales.clone()));
    }
    for (name, g) in qm.named_gains() {
        c.add_f32(&name, g);
    }
    c
}

pub fn quantized_from_container(c: &Container) -> Result<(ModelConfig, QuantizedModel)> {
    c.expect_kind("quantized-model")?;
    let cfg = c.meta.model.clone().ok_or_else(|| {
        Error::Consistency("quantized container lacks a model config".to_string())
    })?;
    let quant = c
        .meta
        .quant
        .clone()
        .ok_or_else(|| Error::Consistency("quantized container lacks quant metadata".to_string()))?;
    if quant.levels != quant.codebook.levels().to_vec() {
        return Err(Error::Consistency(
            "container codebook constants do not match this build".to_string(),
        ));
    }
    let qt = |name: &str| -> Result<QuantizedTensor> {
        let (shape, codes) = c.q4_codes(name)?;
        let scales = c.f32_tensor(&format!("{name}.scales"))?;
        let t = QuantizedTensor {
            shape: shape.to_vec(),
            block_size: quant.block_size,
            codebook: quant.codebook,
            codes: codes.to_vec(),
            scales: scales.data().to_vec(),
        };
        t.validate()?;
        Ok(t)
    };
    let gain = |name: &str| c.f32_tensor(name);
    let n_layers = (0..).take_while(|l| c.contains(&format!("layers.{l}.wq"))).count();
    let qm = QuantizedModel {
        block_size: quant.block_size,
        codebook: quant.codebook,
        embed: qt("embed")?,
        layers: (0..n_layers)
            .map(|l| {
                Ok(QuantizedLayer {
                    wq: qt(&format!("layers.{l}.wq"))?,
                    wk: qt(&format!("layers.{l}.wk"))?,
                    wv: qt(&format!("layers.{l}.wv"))?,
                    wo: qt(&format!("layers.{l}.wo"))?,
                    w_up: qt(&format!("layers.{l}.w_up"))?,
                    w_gate: qt(&format!("layers.{l}.w_gate"))?,
                    w_down: qt(&format!("layers.{l}.w_down"))?,
                    attn_gain: gain(&format!("layers.{l}.attn_gain"))?,
                    mlp_gain: gain(&format!("layers.{l}.mlp_gain"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        final_gain: gain("final_gain")?,
        lm_head: qt("lm_head")?,
    };
    Ok((cfg, qm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::prune::{compact, gen_mask_set_semi, gen_plan_structured_random};
    use crate::quant::{dequantize_model, quantize_model};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab: 64,
            max_seq: 32,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut c = Container::new("model");
        c.add_f32("w", &Tensor::matrix(2, 3, vec![1.0, -2.5, 0.0, 3.25, -0.0, 9.75]).unwrap());
        c.add_u8("blob", vec![1, 2, 3]); // odd length forces alignment padding
        c.add_f32("v", &Tensor::vector(vec![0.5f32; 5]));
        c.meta.seeds.insert("run".to_string(), 42);
        c.meta.run_config = Some("seed = 42".to_string());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes, "store∘load∘store is the identity");
        assert_eq!(back.f32_tensor("w").unwrap().at(1, 2), 9.75);
        assert_eq!(back.u8_bytes("blob").unwrap(), &[1, 2, 3]);
    }

    #[test]
    fn writes_are_deterministic_regardless_of_insertion_order() {
        let t1 = Tensor::vector(vec![1.0f32, 2.0]);
        let t2 = Tensor::vector(vec![3.0f32]);
        let mut a = Container::new("model");
        a.add_f32("x", &t1);
        a.add_f32("y", &t2);
        let mut b = Container::new("model");
        b.add_f32("y", &t2);
        b.add_f32("x", &t1);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn layout_invariants_hold_in_the_emitted_bytes() {
        let mut c = Container::new("model");
        c.add_u8("a", vec![7; 3]);
        c.add_u8("b", vec![9; 11]);
        c.add_f32("c", &Tensor::vector(vec![1.0f32; 4]));
        let bytes = c.to_bytes().unwrap();
        // Reparse the raw header to inspect offsets directly.
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        assert_eq!((13 + hlen) % 8, 0, "payload start is aligned");
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + hlen]).unwrap();
        let tensors = header["tensors"].as_array().unwrap();
        let mut prev_end = 0u64;
        for t in tensors {
            let off = t["offset"].as_u64().unwrap();
            let len = t["len"].as_u64().unwrap();
            assert_eq!(off % 8, 0, "tensor offsets are 8-aligned");
            assert!(off >= prev_end, "offsets ascend without overlap");
            prev_end = off + len;
        }
        assert_eq!(prev_end, bytes.len() as u64, "no trailing padding after the last tensor");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut c = Container::new("model");
        c.add_f32("w", &Tensor::vector(vec![1.0f32; 4]));
        let good = c.to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err(), "bad magic");

        let mut bad = good.clone();
        bad[5] = 0xFF; // absurd header length
        assert!(Container::from_bytes(&bad).is_err());

        let bad = &good[..good.len() - 1];
        assert!(Container::from_bytes(bad).is_err(), "truncated payload");

        assert!(Container::from_bytes(&good[..4]).is_err(), "shorter than the prefix");

        // Tamper with a declared length so shape and payload disagree.
        let hlen = u64::from_le_bytes(good[5..13].try_into().unwrap()) as usize;
        let text = String::from_utf8(good[13..13 + hlen].to_vec()).unwrap();
        let tampered = text.replace("\"shape\":[4]", "\"shape\":[5]");
        if tampered.len() == hlen {
            let mut bad = good.clone();
            bad[13..13 + hlen].copy_from_slice(tampered.as_bytes());
            assert!(Container::from_bytes(&bad).is_err(), "shape/len mismatch");
        }
    }

    #[test]
    fn missing_tensor_lookup_is_a_missing_artifact() {
        let c = Container::new("model");
        let err = c.f32_tensor("nope").unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::MissingArtifact);
    }

    #[test]
    fn model_round_trip_full_and_compact() {
        let cfg = tiny_cfg();
        let w = init_model(&cfg).unwrap();
        let c = model_container(&cfg, &w);
        let (cfg2, w2) = model_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(w2, w);

        let plan = gen_plan_structured_random(&cfg, 0.5, 0, 0, 1).unwrap();
        let small = compact(&cfg, &w, &plan).unwrap();
        let mut c = model_container(&cfg, &small);
        c.meta.plan = Some(plan);
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let (_, small2) = model_from_container(&back).unwrap();
        assert_eq!(small2, small, "compact geometry survives the container");
        assert!(back.meta.plan.is_some());
    }

    #[test]
    fn masks_round_trip() {
        let cfg = tiny_cfg();
        let w = init_model(&cfg).unwrap();
        let set = gen_mask_set_semi(&w, 4, 8).unwrap();
        let c = masks_container(&cfg, &set);
        let set2 = masks_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(set2, set);
    }

    #[test]
    fn adapters_round_trip_with_plan_and_masks() {
        let cfg = tiny_cfg();
        let w = init_model(&cfg).unwrap();
        let adapters = crate::model::init_adapters(&cfg, &w).unwrap();
        let set = gen_mask_set_semi(&w, 4, 8).unwrap();
        let plan = gen_plan_structured_random(&cfg, 0.5, 0, 0, 2).unwrap();
        let c = adapters_container(&cfg, &adapters, DeltaMaskMode::Masked, Some(&plan), Some(&set));
        let art = adapters_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(art.adapters, adapters);
        assert_eq!(art.mode, DeltaMaskMode::Masked);
        assert_eq!(art.plan.as_ref().unwrap(), &plan);
        assert_eq!(art.masks.as_ref().unwrap(), &set);
        assert_eq!(art.cfg, cfg);

        // Without extras the options come back empty.
        let c = adapters_container(&cfg, &adapters, DeltaMaskMode::Dense, None, None);
        let art = adapters_from_container(&c).unwrap();
        assert!(art.plan.is_none() && art.masks.is_none());
        assert_eq!(art.mode, DeltaMaskMode::Dense);
    }

    #[test]
    fn quantized_round_trip_preserves_codes_and_dequantization() {
        let cfg = tiny_cfg();
        let w = init_model(&cfg).unwrap();
        let qm = quantize_model(&w, 16, Codebook::Nf4).unwrap();
        let c = quantized_container(&cfg, &qm);
        let bytes = c.to_bytes().unwrap();
        let (cfg2, qm2) = quantized_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(qm2, qm, "codes, scales, and gains all round-trip bitwise");
        assert_eq!(dequantize_model(&qm2).unwrap(), dequantize_model(&qm).unwrap());
        // Determinism at the artifact level.
        assert_eq!(quantized_container(&cfg, &qm).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let cfg = tiny_cfg();
        let w = init_model(&cfg).unwrap();
        let c = model_container(&cfg, &w);
        assert!(masks_from_container(&c).is_err());
        assert!(adapters_from_container(&c).is_err());
        assert!(quantized_from_container(&c).is_err());
    }
}

