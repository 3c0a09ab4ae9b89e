//! Checkpoint container: a JSON manifest followed by raw little-endian
//! parameter blocks.
//!
//! Layout: 8-byte magic, u64 manifest length, manifest JSON, then the
//! blocks in manifest order. Parameter blocks are float32 (the parameter
//! storage dtype); optimizer moments are float64 so a resumed run continues
//! bit-identically. Every block carries a SHA-256 that is verified on load,
//! and LoRA-only checkpoints reference their base weights by content hash
//! instead of duplicating them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::hex_string;
use crate::lora::LoraLayer;
use crate::policy::{DenoisingPolicy, MeanParams, PolicyConfig};
use crate::trainer::AdamState;

const MAGIC: &[u8; 8] = b"QLCHKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad magic: not a checkpoint container")]
    BadMagic,
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("manifest parse failure: {0}")]
    Manifest(String),
    #[error("content hash mismatch for block {0:?}")]
    HashMismatch(String),
    #[error("missing block {0:?}")]
    MissingBlock(String),
    #[error("block {name:?} has {got} values, expected {expected}")]
    BlockShape {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    Kind { found: String, expected: String },
    #[error("checkpoint has no policy metadata")]
    NoPolicyMeta,
    #[error("policy has no LoRA adapter to export")]
    NotLora,
    #[error("base weights hash mismatch: checkpoint factors belong to a different base")]
    BaseHashMismatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDesc {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraMeta {
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
}

/// Container manifest; `kind` is `policy`, `lora`, or `trainer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
    /// Content hash of the frozen base (LoRA-only checkpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub blocks: Vec<BlockDesc>,
}

enum Block<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

impl Block<'_> {
    fn dtype(&self) -> &'static str {
        match self {
            Block::F32(_) => "f32",
            Block::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            Block::F32(v) => v.len(),
            Block::F64(v) => v.len(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Block::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Block::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_container(
    path: &Path,
    mut manifest: Manifest,
    blocks: Vec<(&str, Block)>,
) -> Result<(), CheckpointError> {
    let mut payload = Vec::new();
    for (name, block) in &blocks {
        let bytes = block.bytes();
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        manifest.blocks.push(BlockDesc {
            name: name.to_string(),
            dtype: block.dtype().to_string(),
            shape: vec![block.len()],
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
            sha256: hex_string(&hasher.finalize()),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<u8>), CheckpointError> {
    let data = std::fs::read(path).map_err(io_err(path))?;
    if data.len() < 16 || &data[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let manifest_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    if data.len() < 16 + manifest_len {
        return Err(CheckpointError::Truncated("manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&data[16..16 + manifest_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = data[16 + manifest_len..].to_vec();
    for desc in &manifest.blocks {
        let end = desc.offset + desc.byte_len;
        if end as usize > payload.len() {
            return Err(CheckpointError::Truncated(desc.name.clone()));
        }
        let bytes = &payload[desc.offset as usize..end as usize];
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        if hex_string(&hasher.finalize()) != desc.sha256 {
            return Err(CheckpointError::HashMismatch(desc.name.clone()));
        }
    }
    Ok((manifest, payload))
}

fn block_f32(manifest: &Manifest, payload: &[u8], name: &str) -> Result<Vec<f32>, CheckpointError> {
    let desc = manifest
        .blocks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| CheckpointError::MissingBlock(name.to_string()))?;
    let bytes = &payload[desc.offset as usize..(desc.offset + desc.byte_len) as usize];
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn block_f64(manifest: &Manifest, payload: &[u8], name: &str) -> Result<Vec<f64>, CheckpointError> {
    let desc = manifest
        .blocks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| CheckpointError::MissingBlock(name.to_string()))?;
    let bytes = &payload[desc.offset as usize..(desc.offset + desc.byte_len) as usize];
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn policy_blocks(policy: &DenoisingPolicy) -> (Vec<(&'static str, Block<'_>)>, Option<LoraMeta>) {
    match policy.mean_params() {
        MeanParams::Dense { weight, bias } => (
            vec![("weight", Block::F32(weight)), ("bias", Block::F32(bias))],
            None,
        ),
        MeanParams::Lora { layer, bias } => (
            vec![
                ("base_weight", Block::F32(layer.base())),
                ("bias", Block::F32(bias)),
                ("lora_b", Block::F32(layer.factor_b())),
                ("lora_a", Block::F32(layer.factor_a())),
            ],
            Some(LoraMeta {
                d: layer.d(),
                k: layer.k(),
                rank: layer.rank(),
                alpha: layer.alpha(),
            }),
        ),
    }
}

/// Saves a policy snapshot (`kind: "policy"`).
pub fn save_policy(
    path: &Path,
    policy: &DenoisingPolicy,
    round: Option<usize>,
    config_hash: Option<&str>,
) -> Result<(), CheckpointError> {
    let (blocks, lora) = policy_blocks(policy);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "policy".into(),
        policy: Some(policy.config().clone()),
        lora,
        base_hash: None,
        round,
        adam_step: None,
        config_hash: config_hash.map(str::to_string),
        blocks: Vec::new(),
    };
    write_container(path, manifest, blocks)
}

fn rebuild_policy(manifest: &Manifest, payload: &[u8]) -> Result<DenoisingPolicy, CheckpointError> {
    let cfg = manifest
        .policy
        .clone()
        .ok_or(CheckpointError::NoPolicyMeta)?;
    let d = cfg.latent_dim();
    let f = cfg.feature_dim();
    let expect = |name: &str, got: usize, expected: usize| {
        if got != expected {
            Err(CheckpointError::BlockShape {
                name: name.to_string(),
                got,
                expected,
            })
        } else {
            Ok(())
        }
    };
    let mean = match &manifest.lora {
        None => {
            let weight = block_f32(manifest, payload, "weight")?;
            let bias = block_f32(manifest, payload, "bias")?;
            expect("weight", weight.len(), d * f)?;
            expect("bias", bias.len(), d)?;
            MeanParams::Dense { weight, bias }
        }
        Some(meta) => {
            let base = block_f32(manifest, payload, "base_weight")?;
            let bias = block_f32(manifest, payload, "bias")?;
            let b = block_f32(manifest, payload, "lora_b")?;
            let a = block_f32(manifest, payload, "lora_a")?;
            expect("base_weight", base.len(), meta.d * meta.k)?;
            expect("lora_b", b.len(), meta.d * meta.rank)?;
            expect("lora_a", a.len(), meta.rank * meta.k)?;
            let mut layer = LoraLayer::init(base, meta.d, meta.k, meta.rank, meta.alpha, 0)
                .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            layer
                .set_factors(b, a)
                .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            MeanParams::Lora { layer, bias }
        }
    };
    Ok(DenoisingPolicy::from_parts(cfg, mean))
}

/// Loads any checkpoint kind that embeds full policy blocks.
pub fn load_policy(path: &Path) -> Result<(DenoisingPolicy, Manifest), CheckpointError> {
    let (manifest, payload) = read_container(path)?;
    let policy = rebuild_policy(&manifest, &payload)?;
    Ok((policy, manifest))
}

/// Saves policy plus optimizer state (`kind: "trainer"`) for exact resume.
pub fn save_trainer_state(
    path: &Path,
    policy: &DenoisingPolicy,
    adam: &AdamState,
    round: usize,
    config_hash: Option<&str>,
) -> Result<(), CheckpointError> {
    let (mut blocks, lora) = policy_blocks(policy);
    blocks.push(("adam_m", Block::F64(&adam.m)));
    blocks.push(("adam_v", Block::F64(&adam.v)));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "trainer".into(),
        policy: Some(policy.config().clone()),
        lora,
        base_hash: None,
        round: Some(round),
        adam_step: Some(adam.step),
        config_hash: config_hash.map(str::to_string),
        blocks: Vec::new(),
    };
    write_container(path, manifest, blocks)
}

/// Restores a trainer checkpoint: policy, optimizer state, round index.
pub fn load_trainer_state(
    path: &Path,
) -> Result<(DenoisingPolicy, AdamState, usize, Manifest), CheckpointError> {
    let (manifest, payload) = read_container(path)?;
    if manifest.kind != "trainer" {
        return Err(CheckpointError::Kind {
            found: manifest.kind.clone(),
            expected: "trainer".into(),
        });
    }
    let policy = rebuild_policy(&manifest, &payload)?;
    let adam = AdamState {
        m: block_f64(&manifest, &payload, "adam_m")?,
        v: block_f64(&manifest, &payload, "adam_v")?,
        step: manifest.adam_step.unwrap_or(0),
    };
    let round = manifest.round.unwrap_or(0);
    Ok((policy, adam, round, manifest))
}

/// Saves only the LoRA factors, referencing the base by content hash
/// (`kind: "lora"`).
pub fn save_lora_only(path: &Path, policy: &DenoisingPolicy) -> Result<(), CheckpointError> {
    let MeanParams::Lora { layer, .. } = policy.mean_params() else {
        return Err(CheckpointError::NotLora);
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "lora".into(),
        policy: Some(policy.config().clone()),
        lora: Some(LoraMeta {
            d: layer.d(),
            k: layer.k(),
            rank: layer.rank(),
            alpha: layer.alpha(),
        }),
        base_hash: policy.frozen_base_hash(),
        round: None,
        adam_step: None,
        config_hash: None,
        blocks: Vec::new(),
    };
    let blocks = vec![
        ("lora_b", Block::F32(layer.factor_b())),
        ("lora_a", Block::F32(layer.factor_a())),
    ];
    write_container(path, manifest, blocks)
}

/// Attaches LoRA factors from a factors-only checkpoint to a base policy,
/// verifying the base content hash first.
pub fn load_lora_only(
    path: &Path,
    base: &DenoisingPolicy,
) -> Result<DenoisingPolicy, CheckpointError> {
    let (manifest, payload) = read_container(path)?;
    if manifest.kind != "lora" {
        return Err(CheckpointError::Kind {
            found: manifest.kind.clone(),
            expected: "lora".into(),
        });
    }
    let meta = manifest
        .lora
        .clone()
        .ok_or_else(|| CheckpointError::Manifest("lora manifest missing meta".into()))?;
    let mut policy = base.clone();
    if !policy.is_lora() {
        policy
            .enable_lora(meta.rank, meta.alpha, 0)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    }
    if policy.frozen_base_hash() != manifest.base_hash {
        return Err(CheckpointError::BaseHashMismatch);
    }
    let b = block_f32(&manifest, &payload, "lora_b")?;
    let a = block_f32(&manifest, &payload, "lora_a")?;
    let MeanParams::Lora { layer, .. } = policy.mean_params_mut() else {
        unreachable!("enabled above");
    };
    layer
        .set_factors(b, a)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{pretrained_policy, SyntheticConfig};

    fn policy() -> DenoisingPolicy {
        pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default())
    }

    #[test]
    fn policy_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = policy();
        save_policy(&path, &p, Some(3), Some("abc")).unwrap();
        let (loaded, manifest) = load_policy(&path).unwrap();
        assert_eq!(manifest.round, Some(3));
        assert_eq!(manifest.config_hash.as_deref(), Some("abc"));
        assert_eq!(loaded.trainable_read(), p.trainable_read());
        assert_eq!(loaded.config(), p.config());
    }

    #[test]
    fn lora_policy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = policy();
        p.enable_lora(4, 4.0, 7).unwrap();
        let mut vals = p.trainable_read();
        for (i, v) in vals.iter_mut().enumerate() {
            *v += (i as f64).sin() * 0.01;
        }
        p.trainable_write(&vals);
        save_policy(&path, &p, None, None).unwrap();
        let (loaded, _) = load_policy(&path).unwrap();
        assert!(loaded.is_lora());
        assert_eq!(loaded.trainable_read(), p.trainable_read());
        assert_eq!(loaded.frozen_base_hash(), p.frozen_base_hash());
    }

    #[test]
    fn truncation_and_tamper_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_policy(&path, &policy(), None, None).unwrap();
        let data = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &data[..data.len() - 40]).unwrap();
        assert!(matches!(
            load_policy(&cut),
            Err(CheckpointError::Truncated(_))
        ));

        let mut tampered = data.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 0xFF;
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &tampered).unwrap();
        assert!(matches!(
            load_policy(&bad),
            Err(CheckpointError::HashMismatch(_))
        ));

        let mut not_magic = data;
        not_magic[0] = b'X';
        let nm = dir.path().join("nm.ckpt");
        std::fs::write(&nm, &not_magic).unwrap();
        assert!(matches!(load_policy(&nm), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_bump_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_policy(&path, &policy(), None, None).unwrap();
        let data = std::fs::read(&path).unwrap();
        let manifest_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&data[16..16 + manifest_len]).unwrap();
        manifest.format_version = 2;
        let new_json = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_json);
        out.extend_from_slice(&data[16 + manifest_len..]);
        let v2 = dir.path().join("v2.ckpt");
        std::fs::write(&v2, out).unwrap();
        assert!(matches!(
            load_policy(&v2),
            Err(CheckpointError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn trainer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let p = policy();
        let adam = AdamState {
            m: (0..p.trainable_len()).map(|i| i as f64 * 0.5).collect(),
            v: (0..p.trainable_len()).map(|i| i as f64 * 0.25).collect(),
            step: 42,
        };
        save_trainer_state(&path, &p, &adam, 10, Some("h")).unwrap();
        let (loaded, adam2, round, _) = load_trainer_state(&path).unwrap();
        assert_eq!(round, 10);
        assert_eq!(adam2, adam);
        assert_eq!(loaded.trainable_read(), p.trainable_read());
    }

    #[test]
    fn lora_only_references_base_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.ckpt");
        let base = policy();
        assert!(matches!(
            save_lora_only(&path, &base),
            Err(CheckpointError::NotLora)
        ));

        let mut adapted = base.clone();
        adapted.enable_lora(4, 4.0, 7).unwrap();
        let mut vals = adapted.trainable_read();
        vals[0] = 0.5;
        adapted.trainable_write(&vals);
        save_lora_only(&path, &adapted).unwrap();

        // Base weights are not duplicated in the container.
        let (manifest, _) = read_container(&path).unwrap();
        assert!(manifest.blocks.iter().all(|b| b.name != "base_weight"));
        assert!(manifest.base_hash.is_some());

        let restored = load_lora_only(&path, &base).unwrap();
        assert_eq!(restored.trainable_read(), adapted.trainable_read());

        // A different base is rejected by hash.
        let other = pretrained_policy(
            &PolicyConfig::default(),
            &SyntheticConfig {
                pattern_seed: 999,
                ..SyntheticConfig::default()
            },
        );
        assert!(matches!(
            load_lora_only(&path, &other),
            Err(CheckpointError::BaseHashMismatch)
        ));
    }
}
