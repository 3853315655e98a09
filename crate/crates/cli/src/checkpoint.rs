//! Single-file checkpoints.
//!
//! Layout: `ECHOCKPT`, format version (u32 LE), manifest length (u64 LE), the
//! JSON manifest, then the payload: every tensor as little-endian f32, concatenated
//! in manifest order.

use std::path::Path;

use echogen::conditioning::Vocabulary;
use echogen::model::{EchoGen, ModelSpec, Phase};
use echogen::optim::AdamState;
use echogen::params::ParamStore;
use echogen::tokenizer::{AeShape, Autoencoder, ResidualQuantizer, Tokenizer};
use echogen::training::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ECHOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated header")]
    Header,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("payload size mismatch: manifest covers {expected} bytes, payload has {found}")]
    PayloadSize { expected: u64, found: u64 },
    #[error("checkpoint holds a {found} artifact, expected {expected}")]
    Kind { found: String, expected: String },
    #[error("tensor {0}: {1}")]
    Tensor(String, String),
}

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Tokenizer,
    PhaseA,
    PhaseB,
}

impl Artifact {
    pub fn of(phase: Phase) -> Self {
        match phase {
            Phase::A => Artifact::PhaseA,
            Phase::B => Artifact::PhaseB,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Artifact::Tokenizer => "tokenizer",
            Artifact::PhaseA => "phase-a",
            Artifact::PhaseB => "phase-b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub frozen: bool,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMeta {
    pub shape: AeShape,
    pub quantizer: ResidualQuantizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub artifact: Artifact,
    pub config_hash: String,
    /// The resolved run configuration.
    pub config: serde_json::Value,
    /// SHA-256 of the checkpoint file this one was trained from.
    pub parent_hash: Option<String>,
    pub vocab_hash: String,
    pub model: Option<ModelSpec>,
    pub tokenizer: Option<TokenizerMeta>,
    /// Training state without the optimizer moments, which live in the payload.
    pub train_state: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(artifact: Artifact, config: serde_json::Value, config_hash: String) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                artifact,
                config_hash,
                config,
                parent_hash: None,
                vocab_hash: Vocabulary::builtin().hash(),
                model: None,
                tokenizer: None,
                train_state: None,
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f32], frozen: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: shape.to_vec(),
            offset: self.payload.len() as u64,
            frozen,
        });
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|e| e.name == name)
    }

    pub fn data(&self, e: &TensorEntry) -> Vec<f32> {
        let start = e.offset as usize;
        self.payload[start..start + e.bytes() as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.manifest.format_version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Header);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(CheckpointError::Header)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..end])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != version {
            return Err(CheckpointError::Manifest(
                "header and manifest versions differ".into(),
            ));
        }
        let payload = bytes[end..].to_vec();
        let mut expected = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Tensor(
                    e.name.clone(),
                    format!("unsupported dtype {}", e.dtype),
                ));
            }
            if e.offset != expected {
                return Err(CheckpointError::Tensor(
                    e.name.clone(),
                    format!("offset {} where {expected} expected", e.offset),
                ));
            }
            expected += e.bytes();
        }
        if expected != payload.len() as u64 {
            return Err(CheckpointError::PayloadSize {
                expected,
                found: payload.len() as u64,
            });
        }
        Ok(Self { manifest, payload })
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(path, &bytes).map_err(io(path))?;
        Ok(sha256_hex(&bytes))
    }

    /// The checkpoint and the SHA-256 of its file.
    pub fn load(path: &Path) -> Result<(Self, String), CheckpointError> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }

    pub fn expect(&self, artifact: Artifact) -> Result<(), CheckpointError> {
        if self.manifest.artifact != artifact {
            return Err(CheckpointError::Kind {
                found: self.manifest.artifact.name().into(),
                expected: artifact.name().into(),
            });
        }
        Ok(())
    }

    fn read_store(
        &self,
        store: &mut ParamStore<f32>,
        frozen: impl Fn(&ParamStore<f32>, usize) -> bool,
    ) -> Result<(), CheckpointError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let e = self
                .entry(&name)
                .ok_or_else(|| CheckpointError::Tensor(name.clone(), "missing".into()))?;
            if e.shape != store.get(id).shape() {
                return Err(CheckpointError::Tensor(
                    name,
                    format!("shape {:?} vs {:?}", e.shape, store.get(id).shape()),
                ));
            }
            if e.frozen != frozen(store, id.index()) {
                return Err(CheckpointError::Tensor(
                    name,
                    "frozen flag disagrees with the phase".into(),
                ));
            }
            let t = echogen::numerics::Tensor::new(e.shape.clone(), self.data(e))
                .map_err(|err| CheckpointError::Tensor(name.clone(), err.to_string()))?;
            store
                .set(id, t)
                .map_err(|err| CheckpointError::Tensor(name, err.to_string()))?;
        }
        Ok(())
    }
}

fn is_frozen(phase: Phase, store: &ParamStore<f32>, i: usize) -> bool {
    let id = store.ids().nth(i).expect("index in range");
    !phase.trainable_groups().contains(&store.group(id))
}

const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

/// Model parameters (frozen flags from `phase`), plus the training state and Adam moments when given.
pub fn model_checkpoint(
    model: &EchoGen<f32>,
    phase: Phase,
    state: Option<&TrainState>,
    config: serde_json::Value,
    config_hash: String,
) -> Checkpoint {
    let mut ck = Checkpoint::new(Artifact::of(phase), config, config_hash);
    ck.manifest.model = Some(model.spec.clone());
    let store = &model.store;
    for (i, id) in store.ids().enumerate() {
        let t = store.get(id);
        ck.push(
            store.name(id),
            t.shape(),
            t.data(),
            is_frozen(phase, store, i),
        );
    }
    if let Some(st) = state {
        let mut bare = st.clone();
        bare.adam = AdamState {
            step: st.adam.step,
            m: Vec::new(),
            v: Vec::new(),
        };
        ck.manifest.train_state = Some(serde_json::to_value(&bare).expect("state serializes"));
        for (prefix, moments) in [(MOMENT_M, &st.adam.m), (MOMENT_V, &st.adam.v)] {
            for (id, m) in store.ids().zip(moments) {
                if !m.is_empty() {
                    ck.push(
                        &format!("{prefix}{}", store.name(id)),
                        store.get(id).shape(),
                        m,
                        false,
                    );
                }
            }
        }
    }
    ck
}

/// Rebuilds the model and, when present, the training state with its Adam moments.
pub fn load_model(ck: &Checkpoint) -> Result<(EchoGen<f32>, Option<TrainState>), CheckpointError> {
    let phase = match ck.manifest.artifact {
        Artifact::PhaseA => Phase::A,
        Artifact::PhaseB => Phase::B,
        Artifact::Tokenizer => {
            return Err(CheckpointError::Kind {
                found: "tokenizer".into(),
                expected: "phase-a or phase-b".into(),
            })
        }
    };
    let spec = ck
        .manifest
        .model
        .clone()
        .ok_or_else(|| CheckpointError::Manifest("no model spec".into()))?;
    let mut model =
        EchoGen::<f32>::new(spec).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    ck.read_store(&mut model.store, |s, i| is_frozen(phase, s, i))?;
    let state = match &ck.manifest.train_state {
        None => None,
        Some(v) => {
            let mut st: TrainState = serde_json::from_value(v.clone())
                .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            let n = model.store.len();
            st.adam.m = vec![Vec::new(); n];
            st.adam.v = vec![Vec::new(); n];
            for (i, id) in model.store.ids().enumerate() {
                let name = model.store.name(id);
                if let Some(e) = ck.entry(&format!("{MOMENT_M}{name}")) {
                    st.adam.m[i] = ck.data(e);
                }
                if let Some(e) = ck.entry(&format!("{MOMENT_V}{name}")) {
                    st.adam.v[i] = ck.data(e);
                }
            }
            Some(st)
        }
    };
    let expected = model.store.len()
        + state.as_ref().map_or(0, |s| {
            s.adam
                .m
                .iter()
                .chain(&s.adam.v)
                .filter(|m| !m.is_empty())
                .count()
        });
    if expected != ck.manifest.tensors.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors, model needs {expected}",
            ck.manifest.tensors.len()
        )));
    }
    Ok((model, state))
}

pub fn tokenizer_checkpoint(
    tok: &Tokenizer,
    config: serde_json::Value,
    config_hash: String,
) -> Checkpoint {
    let mut ck = Checkpoint::new(Artifact::Tokenizer, config, config_hash);
    ck.manifest.tokenizer = Some(TokenizerMeta {
        shape: tok.ae.shape,
        quantizer: tok.quantizer.clone(),
    });
    let store = &tok.ae.store;
    for id in store.ids() {
        let t = store.get(id);
        ck.push(store.name(id), t.shape(), t.data(), true);
    }
    ck
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<Tokenizer, CheckpointError> {
    ck.expect(Artifact::Tokenizer)?;
    let meta = ck
        .manifest
        .tokenizer
        .clone()
        .ok_or_else(|| CheckpointError::Manifest("no tokenizer metadata".into()))?;
    let mut ae =
        Autoencoder::new(meta.shape, 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    ck.read_store(&mut ae.store, |_, _| true)?;
    if ae.store.len() != ck.manifest.tensors.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors, autoencoder needs {}",
            ck.manifest.tensors.len(),
            ae.store.len()
        )));
    }
    Ok(Tokenizer {
        ae,
        quantizer: meta.quantizer,
    })
}
