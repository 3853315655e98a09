//! Triplet generation, identity-disjoint splits and the on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::prompt_of;
use super::render::{render_reference, render_scene};
use super::spec::{IdentityKey, SceneSpec, Size, SubjectSpec};
use super::DataError;
use crate::conditioning::VOCAB_TEXT;
use crate::numerics::Rng;
use crate::parallel;
use crate::raster::{Image, Mask};

pub const GRAMMAR_VERSION: &str = "subject-scene-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub n: usize,
    pub seed: u64,
    pub train_ratio: f64,
    pub max_distractors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            n: 1000,
            seed: 0,
            train_ratio: 0.9,
            max_distractors: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub index: usize,
    pub split: Split,
    pub prompt: String,
    pub subject: SubjectSpec,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug)]
pub struct Triplet {
    pub meta: TripletMeta,
    pub reference: Image,
    /// Subject pixels of `reference`.
    pub mask: Mask,
    pub target: Image,
}

impl Triplet {
    pub fn prompt(&self) -> &str {
        &self.meta.prompt
    }

    pub fn render(index: usize, split: Split, subject: SubjectSpec, scene: SceneSpec) -> Self {
        let (reference, mask) = render_reference(&subject);
        let target = render_scene(&subject, &scene);
        let prompt = prompt_of(&subject, &scene);
        Self {
            meta: TripletMeta {
                index,
                split,
                prompt,
                subject,
                scene,
            },
            reference,
            mask,
            target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub dir: String,
    pub identity: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grammar_version: String,
    pub grammar_hash: String,
    pub seed: u64,
    pub n: usize,
    pub train_ratio: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn grammar_hash() -> String {
    let mut h = Sha256::new();
    h.update(GRAMMAR_VERSION.as_bytes());
    h.update(VOCAB_TEXT.as_bytes());
    hex::encode(h.finalize())
}

/// Identity keys reserved for the held-out split under `seed`.
pub fn identity_split(seed: u64, train_ratio: f64) -> (Vec<IdentityKey>, Vec<IdentityKey>) {
    let mut ids = IdentityKey::all();
    Rng::named(seed, "identity-split").shuffle(&mut ids);
    let n_test = ((ids.len() as f64) * (1.0 - train_ratio)).ceil().max(1.0) as usize;
    let test = ids[..n_test].to_vec();
    let train = ids[n_test..].to_vec();
    (train, test)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub seed: u64,
    pub train_ratio: f64,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self, DataError> {
        if cfg.n == 0 {
            return Err(DataError::Invalid("dataset size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.train_ratio) {
            return Err(DataError::Invalid(format!(
                "train ratio {} outside [0, 1]",
                cfg.train_ratio
            )));
        }
        let (train_ids, test_ids) = identity_split(cfg.seed, cfg.train_ratio);
        let n_train = ((cfg.n as f64) * cfg.train_ratio).round() as usize;
        let base = Rng::named(cfg.seed, "triplets");
        let all = parallel::map_range(cfg.n, |i| {
            let mut rng = base.child("triplet", i as u64);
            let (split, pool) = if i < n_train {
                (Split::Train, &train_ids)
            } else {
                (Split::Test, &test_ids)
            };
            let key = *rng.choose(pool);
            let size = *rng.choose(Size::ALL);
            let subject = SubjectSpec::from_identity(key, size, rng.next_seed());
            let scene = SceneSpec::random(&subject, &mut rng, cfg.max_distractors);
            Triplet::render(i, split, subject, scene)
        });
        let (train, test) = all.into_iter().partition(|t| t.meta.split == Split::Train);
        Ok(Self {
            train,
            test,
            seed: cfg.seed,
            train_ratio: cfg.train_ratio,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let entries = self
            .train
            .iter()
            .chain(&self.test)
            .map(|t| ManifestEntry {
                index: t.meta.index,
                split: t.meta.split,
                dir: entry_dir(t.meta.split, t.meta.index),
                identity: t.meta.subject.identity().label(),
                prompt: t.meta.prompt.clone(),
            })
            .collect();
        Manifest {
            grammar_version: GRAMMAR_VERSION.into(),
            grammar_hash: grammar_hash(),
            seed: self.seed,
            n: self.train.len() + self.test.len(),
            train_ratio: self.train_ratio,
            train_count: self.train.len(),
            test_count: self.test.len(),
            entries,
        }
    }

    pub fn write(&self, root: &Path) -> Result<Manifest, DataError> {
        for t in self.train.iter().chain(&self.test) {
            let dir = root.join(entry_dir(t.meta.split, t.meta.index));
            fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
            t.reference.save_png(&dir.join("ref.png"))?;
            t.target.save_png(&dir.join("target.png"))?;
            t.mask.save_png(&dir.join("mask.png"))?;
            write_json(&dir.join("meta.json"), &t.meta)?;
        }
        let manifest = self.manifest();
        write_json(&root.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(root: &Path) -> Result<Self, DataError> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.grammar_hash != grammar_hash() {
            return Err(DataError::Invalid(format!(
                "{}: dataset grammar hash does not match this build",
                root.join("manifest.json").display()
            )));
        }
        let loaded = parallel::map(&manifest.entries, |_, e| -> Result<Triplet, DataError> {
            let dir = root.join(&e.dir);
            let meta: TripletMeta = read_json(&dir.join("meta.json"))?;
            Ok(Triplet {
                meta,
                reference: Image::load_png(&dir.join("ref.png"))?,
                mask: Mask::load_png(&dir.join("mask.png"))?,
                target: Image::load_png(&dir.join("target.png"))?,
            })
        });
        let mut train = Vec::new();
        let mut test = Vec::new();
        for t in loaded {
            let t = t?;
            match t.meta.split {
                Split::Train => train.push(t),
                Split::Test => test.push(t),
            }
        }
        Ok(Self {
            train,
            test,
            seed: manifest.seed,
            train_ratio: manifest.train_ratio,
        })
    }

    /// Same triplets with every image passed through 8-bit quantization, as a disk round trip would yield.
    pub fn quantized(mut self) -> Self {
        for t in self.train.iter_mut().chain(self.test.iter_mut()) {
            t.reference = t.reference.quantized();
            t.target = t.target.quantized();
        }
        self
    }
}

pub fn entry_dir(split: Split, index: usize) -> String {
    format!("{}/{:06}", split.dir(), index)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| DataError::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: PathBuf::from(path),
            source,
        }
    }
}
