//! The `plvm-aligner-v1` archive.
//!
//! Layout: the header line `plvm-aligner-v1\n`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor listed in the manifest as
//! row-major little-endian `f64`, in manifest order. One format serves
//! aligner checkpoints, tiny-backbone weights and registry exports; the
//! manifest `kind` says which sections are present.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{AlignerConfig, AlignerParams, PersonalizedConcept};
use crate::backbone::{TinyBackbone, TinyBackboneConfig, Tokenizer};
use crate::error::{PlvmError, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const ARCHIVE_HEADER: &str = "plvm-aligner-v1";
/// Refuse manifests larger than this; a corrupt length prefix should not
/// trigger a huge allocation.
const MAX_MANIFEST_BYTES: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    /// Aligner, optionally bundled with the backbone it was trained against.
    Checkpoint,
    Backbone,
    Registry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub source_image_id: String,
    pub encoder_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub kind: ArchiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_lm: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_id: Option<String>,
    /// SHA-256 of the canonical JSON of `creation_config`.
    pub config_hash: String,
    #[serde(default)]
    pub creation_config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligner: Option<AlignerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<TinyBackboneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<Tokenizer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<ConceptEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// Raw archive contents: manifest plus named `f64` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub manifest: ArchiveManifest,
    pub tensors: BTreeMap<String, Matrix<f64>>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json::Value maps are ordered, so this is canonical
    let bytes = serde_json::to_vec(config).expect("json values serialize");
    hex::encode(Sha256::digest(bytes))
}

impl Archive {
    fn new(kind: ArchiveKind, creation_config: serde_json::Value) -> Self {
        Self {
            manifest: ArchiveManifest {
                format: ARCHIVE_HEADER.into(),
                kind,
                k: None,
                d_lm: None,
                encoder_id: None,
                config_hash: config_hash(&creation_config),
                creation_config,
                aligner: None,
                backbone: None,
                tokenizer: None,
                concepts: Vec::new(),
                tensors: Vec::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    fn push<S: Scalar>(&mut self, name: String, m: &Matrix<S>) {
        self.manifest.tensors.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        });
        self.tensors.insert(name, m.cast());
    }

    fn push_params<S: Scalar>(&mut self, prefix: &str, p: &dyn Parameterized<S>) {
        let mut items = Vec::new();
        p.visit(prefix, &mut |name, m| items.push((name, m.clone())));
        for (name, m) in items {
            self.push(name, &m);
        }
    }

    fn fill_params<S: Scalar>(&self, prefix: &str, p: &mut dyn Parameterized<S>) -> Result<()> {
        let mut err = None;
        p.visit_mut(prefix, &mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(t) if t.shape() == m.shape() => *m = t.cast(),
                Some(t) => {
                    err = Some(PlvmError::Archive(format!(
                        "tensor {name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        m.shape()
                    )))
                }
                None => err = Some(PlvmError::Archive(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn tensor(&self, name: &str) -> Result<&Matrix<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| PlvmError::Archive(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(manifest.len() + 64);
        out.extend_from_slice(ARCHIVE_HEADER.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for entry in &self.manifest.tensors {
            for v in self.tensor(&entry.name)?.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let bad = |m: String| PlvmError::Archive(m);
        let mut header = vec![0u8; ARCHIVE_HEADER.len() + 1];
        r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        if &header[..ARCHIVE_HEADER.len()] != ARCHIVE_HEADER.as_bytes() || header[ARCHIVE_HEADER.len()] != b'\n' {
            return Err(bad(format!(
                "unsupported header {:?}",
                String::from_utf8_lossy(&header).trim_end()
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated manifest length".into()))?;
        let len = u64::from_le_bytes(len);
        if len > MAX_MANIFEST_BYTES {
            return Err(bad(format!("manifest length {len} exceeds limit")));
        }
        let mut manifest = vec![0u8; len as usize];
        r.read_exact(&mut manifest).map_err(|_| bad("truncated manifest".into()))?;
        let manifest: ArchiveManifest =
            serde_json::from_slice(&manifest).map_err(|e| PlvmError::Manifest(e.to_string()))?;
        if manifest.format != ARCHIVE_HEADER {
            return Err(PlvmError::Manifest(format!("format field {:?}", manifest.format)));
        }
        if manifest.config_hash != config_hash(&manifest.creation_config) {
            return Err(PlvmError::Manifest("config hash does not match creation config".into()));
        }
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for e in &manifest.tensors {
            let n = e
                .rows
                .checked_mul(e.cols)
                .ok_or_else(|| bad(format!("tensor {} too large", e.name)))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated tensor {}", e.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            if tensors.insert(e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)).is_some() {
                return Err(PlvmError::Manifest(format!("duplicate tensor {}", e.name)));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after last tensor".into()));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| PlvmError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| PlvmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| PlvmError::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// An aligner checkpoint, optionally carrying its tiny backbone.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub aligner: AlignerParams<S>,
    pub backbone: Option<TinyBackbone<S>>,
    pub encoder_id: String,
    pub manifest: ArchiveManifest,
}

pub fn checkpoint_archive<S: Scalar>(
    aligner: &AlignerParams<S>,
    backbone: Option<&TinyBackbone<S>>,
    encoder_id: &str,
    creation_config: serde_json::Value,
) -> Archive {
    let mut a = Archive::new(ArchiveKind::Checkpoint, creation_config);
    a.manifest.k = Some(aligner.k());
    a.manifest.d_lm = Some(aligner.d_lm());
    a.manifest.encoder_id = Some(encoder_id.to_string());
    a.manifest.aligner = Some(aligner.config.clone());
    a.push_params("aligner", aligner);
    if let Some(b) = backbone {
        a.manifest.backbone = Some(b.config.clone());
        a.manifest.tokenizer = Some(b.tokenizer.clone());
        a.push_params("backbone", b);
    }
    a
}

pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    aligner: &AlignerParams<S>,
    backbone: Option<&TinyBackbone<S>>,
    encoder_id: &str,
    creation_config: serde_json::Value,
) -> Result<()> {
    checkpoint_archive(aligner, backbone, encoder_id, creation_config).save(path)
}

fn restore_backbone<S: Scalar>(a: &Archive) -> Result<Option<TinyBackbone<S>>> {
    match (&a.manifest.backbone, &a.manifest.tokenizer) {
        (Some(cfg), Some(tok)) => {
            let mut tok = tok.clone();
            tok.reindex();
            let mut b = TinyBackbone::new(cfg.clone(), tok)?;
            a.fill_params("backbone", &mut b)?;
            Ok(Some(b))
        }
        (None, None) => Ok(None),
        _ => Err(PlvmError::Manifest("backbone config without tokenizer (or vice versa)".into())),
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_archive(a: Archive) -> Result<Self> {
        if a.manifest.kind != ArchiveKind::Checkpoint {
            return Err(PlvmError::Manifest(format!("expected a checkpoint, found {:?}", a.manifest.kind)));
        }
        let config = a
            .manifest
            .aligner
            .clone()
            .ok_or_else(|| PlvmError::Manifest("checkpoint without aligner config".into()))?;
        let mut aligner = AlignerParams::new(config)?;
        a.fill_params("aligner", &mut aligner)?;
        if a.manifest.k != Some(aligner.k()) || a.manifest.d_lm != Some(aligner.d_lm()) {
            return Err(PlvmError::Manifest("k / d_lm disagree with the aligner config".into()));
        }
        let backbone = restore_backbone(&a)?;
        if let Some(b) = &backbone {
            if b.d_lm() != aligner.d_lm() {
                return Err(PlvmError::DimensionMismatch {
                    what: "checkpoint backbone width",
                    expected: aligner.d_lm(),
                    actual: b.d_lm(),
                });
            }
        }
        Ok(Self {
            aligner,
            backbone,
            encoder_id: a.manifest.encoder_id.clone().unwrap_or_default(),
            manifest: a.manifest,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

pub fn save_backbone<S: Scalar>(path: impl AsRef<Path>, backbone: &TinyBackbone<S>, creation_config: serde_json::Value) -> Result<()> {
    let mut a = Archive::new(ArchiveKind::Backbone, creation_config);
    a.manifest.d_lm = Some(backbone.d_lm());
    a.manifest.backbone = Some(backbone.config.clone());
    a.manifest.tokenizer = Some(backbone.tokenizer.clone());
    a.push_params("backbone", backbone);
    a.save(path)
}

pub fn load_backbone<S: Scalar>(path: impl AsRef<Path>) -> Result<TinyBackbone<S>> {
    let a = Archive::load(path)?;
    if a.manifest.kind != ArchiveKind::Backbone {
        return Err(PlvmError::Manifest(format!("expected backbone weights, found {:?}", a.manifest.kind)));
    }
    restore_backbone(&a)?.ok_or_else(|| PlvmError::Manifest("archive holds no backbone".into()))
}

/// Registry export: each concept's rows under `concepts.<i>.{word,head,context}`.
pub fn registry_archive<S: Scalar>(concepts: &[PersonalizedConcept<S>]) -> Archive {
    let mut a = Archive::new(ArchiveKind::Registry, serde_json::Value::Null);
    if let Some(c) = concepts.first() {
        a.manifest.k = Some(c.k());
        a.manifest.d_lm = Some(c.d_lm());
    }
    for (i, c) in concepts.iter().enumerate() {
        a.manifest.concepts.push(ConceptEntry {
            name: c.name.clone(),
            source_image_id: c.source_image_id.clone(),
            encoder_id: c.encoder_id.clone(),
        });
        a.push(format!("concepts.{i}.word"), &Matrix::row_vector(c.word_embedding.clone()));
        a.push(format!("concepts.{i}.head"), &Matrix::row_vector(c.head_weight.clone()));
        a.push(format!("concepts.{i}.context"), &c.context_tokens);
    }
    a
}

pub fn registry_concepts<S: Scalar>(a: &Archive) -> Result<Vec<PersonalizedConcept<S>>> {
    if a.manifest.kind != ArchiveKind::Registry {
        return Err(PlvmError::Manifest(format!("expected a registry export, found {:?}", a.manifest.kind)));
    }
    a.manifest
        .concepts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let row = |part: &str| -> Result<Vec<S>> {
                let m = a.tensor(&format!("concepts.{i}.{part}"))?;
                if m.rows() != 1 {
                    return Err(PlvmError::Archive(format!("concepts.{i}.{part} must be one row")));
                }
                Ok(m.cast::<S>().into_vec())
            };
            Ok(PersonalizedConcept {
                name: e.name.clone(),
                word_embedding: row("word")?,
                head_weight: row("head")?,
                context_tokens: a.tensor(&format!("concepts.{i}.context"))?.cast(),
                source_image_id: e.source_image_id.clone(),
                encoder_id: e.encoder_id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TinyBackboneConfig;
    use crate::nn::parameter_hash;

    fn tiny() -> (AlignerParams<f64>, TinyBackbone<f64>) {
        let aligner = AlignerParams::new(AlignerConfig::toy(8, 16).with_k(4)).unwrap();
        let cfg = TinyBackboneConfig {
            d_lm: 16,
            heads: 2,
            blocks: 1,
            ffn_multiplier: 2,
            context_limit: 32,
            ..TinyBackboneConfig::new(8)
        };
        let tok = Tokenizer::from_corpus(["Is it here ? Yes No ."]);
        (aligner, TinyBackbone::new(cfg, tok).unwrap())
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (aligner, backbone) = tiny();
        let cfg = serde_json::json!({"steps": 3, "w": 20.0});
        let bytes = checkpoint_archive(&aligner, Some(&backbone), "toy", cfg.clone()).to_bytes().unwrap();
        assert!(bytes.starts_with(b"plvm-aligner-v1\n"));
        let ck = Checkpoint::<f64>::from_archive(Archive::from_reader(&bytes[..]).unwrap()).unwrap();
        assert_eq!(parameter_hash(&ck.aligner), parameter_hash(&aligner));
        assert_eq!(parameter_hash(ck.backbone.as_ref().unwrap()), parameter_hash(&backbone));
        assert_eq!(ck.encoder_id, "toy");
        assert_eq!(ck.manifest.k, Some(4));
        assert_eq!(ck.manifest.config_hash, config_hash(&cfg));
    }

    #[test]
    fn rejects_corruption() {
        let (aligner, _) = tiny();
        let bytes = checkpoint_archive(&aligner, None, "toy", serde_json::Value::Null).to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[14] = b'2';
        assert!(Archive::from_reader(&wrong[..]).is_err());
        assert!(Archive::from_reader(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_reader(&extra[..]).is_err());
        let mut huge = bytes;
        huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Archive::from_reader(&huge[..]).is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let (_, backbone) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.plvm");
        save_backbone(&p, &backbone, serde_json::Value::Null).unwrap();
        assert!(Checkpoint::<f64>::load(&p).is_err());
        let b: TinyBackbone<f64> = load_backbone(&p).unwrap();
        assert_eq!(parameter_hash(&b), parameter_hash(&backbone));
    }

    #[test]
    fn registry_round_trip() {
        let c = PersonalizedConcept {
            name: "⟨bo⟩".into(),
            word_embedding: vec![0.5, -1.0],
            head_weight: vec![2.0, 0.25],
            context_tokens: Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            source_image_id: "bo/ref".into(),
            encoder_id: "toy".into(),
        };
        let a = registry_archive(std::slice::from_ref(&c));
        let back = Archive::from_reader(&a.to_bytes().unwrap()[..]).unwrap();
        assert_eq!(registry_concepts::<f64>(&back).unwrap(), vec![c]);
    }
}
