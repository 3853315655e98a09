//! Held-out benchmark, ablation toggles and guidance sweeps over the surrogate metrics.

mod metrics;
mod stats;

pub use metrics::{
    dominant_color, foreground, largest_component, localize_subject, max_occupancy_window, observe,
    reference_window, score_attributes, size_of_shape, snap, subject_fidelity, text_alignment,
    AttributeScore, Observed, FOREGROUND,
};
pub use stats::{mean, ranks, spearman};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{ConditionInputs, ConditioningError};
use crate::data::{
    identity_split, prompt_of, render_reference, render_scene, DataConfig, IdentityKey, ParseError,
    SceneSpec, Size, SubjectSpec,
};
use crate::model::EchoGen;
use crate::numerics::{Real, Rng};
use crate::parallel;
use crate::raster::Image;
use crate::sampling::{
    branch_inputs, generate_with_branches, Decoding, GuidanceScales, SampleRequest, SamplingError,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("subject {0} belongs to the training split")]
    TrainingSubject(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("csv: {0}")]
    Csv(String),
}

pub const IMAGES_PER_PAIR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub subjects: usize,
    pub prompts_per_subject: usize,
    pub images_per_pair: usize,
    pub seed: u64,
    pub decoding: Decoding,
    pub scales: GuidanceScales,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            subjects: 10,
            prompts_per_subject: 10,
            images_per_pair: IMAGES_PER_PAIR,
            seed: 0,
            decoding: Decoding::Temperature(1.0),
            scales: GuidanceScales::default(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.images_per_pair != IMAGES_PER_PAIR {
            return Err(EvalError::Protocol(format!(
                "images_per_pair is fixed at {IMAGES_PER_PAIR}, got {}",
                self.images_per_pair
            )));
        }
        if self.subjects == 0 || self.prompts_per_subject == 0 {
            return Err(EvalError::Protocol(
                "subjects and prompts_per_subject must be positive".into(),
            ));
        }
        self.decoding.validate()?;
        self.scales.validate()?;
        Ok(())
    }
}

/// One benchmark prompt-subject pair.
#[derive(Clone, Debug)]
pub struct BenchmarkPair {
    pub subject: SubjectSpec,
    pub prompt: String,
    /// Segmented, upright subject on white.
    pub reference: Image,
    /// The subject inside an unrelated scene, used when segmentation is disabled.
    pub raw_reference: Image,
}

impl BenchmarkPair {
    pub fn new(subject: SubjectSpec, target_scene: &SceneSpec, raw_scene: &SceneSpec) -> Self {
        Self {
            subject,
            prompt: prompt_of(&subject, target_scene),
            reference: render_reference(&subject).0,
            raw_reference: render_scene(&subject, raw_scene),
        }
    }
}

/// Benchmark pairs whose subjects are all held out from training.
#[derive(Clone, Debug)]
pub struct BenchmarkSet {
    pub pairs: Vec<BenchmarkPair>,
}

impl BenchmarkSet {
    /// `protocol.subjects` held-out identities, each with `protocol.prompts_per_subject` random scenes.
    pub fn held_out(protocol: &EvalProtocol, data: &DataConfig) -> Result<Self, EvalError> {
        protocol.validate()?;
        let (_, mut test) = identity_split(data.seed, data.train_ratio);
        if test.len() < protocol.subjects {
            return Err(EvalError::Protocol(format!(
                "{} held-out identities, {} requested",
                test.len(),
                protocol.subjects
            )));
        }
        let mut rng = Rng::named(protocol.seed, "benchmark");
        rng.shuffle(&mut test);
        let mut pairs = Vec::with_capacity(protocol.subjects * protocol.prompts_per_subject);
        for key in &test[..protocol.subjects] {
            let subject = SubjectSpec::from_identity(*key, *rng.choose(Size::ALL), rng.next_seed());
            let raw = SceneSpec::random(&subject, &mut rng, data.max_distractors);
            for _ in 0..protocol.prompts_per_subject {
                let scene = SceneSpec::random(&subject, &mut rng, data.max_distractors);
                pairs.push(BenchmarkPair::new(subject, &scene, &raw));
            }
        }
        Self::custom(pairs, data)
    }

    /// Rejects any pair whose subject identity is in the training split of `data`.
    pub fn custom(pairs: Vec<BenchmarkPair>, data: &DataConfig) -> Result<Self, EvalError> {
        let (train, _) = identity_split(data.seed, data.train_ratio);
        let train: HashSet<IdentityKey> = train.into_iter().collect();
        if let Some(p) = pairs.iter().find(|p| train.contains(&p.subject.identity())) {
            return Err(EvalError::TrainingSubject(p.subject.identity().label()));
        }
        Ok(Self { pairs })
    }
}

/// Inference-time ablations of the subject conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoSemantic,
    NoPrefix,
    NoContent,
    NoSegmentation,
}

impl Ablation {
    pub const ALL: &'static [Ablation] = &[
        Ablation::Full,
        Ablation::NoSemantic,
        Ablation::NoPrefix,
        Ablation::NoContent,
        Ablation::NoSegmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSemantic => "no-semantic",
            Ablation::NoPrefix => "no-prefix",
            Ablation::NoContent => "no-content",
            Ablation::NoSegmentation => "no-segmentation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.name() == s)
    }

    /// Nulls the disabled condition in the fully conditioned branch.
    pub fn apply(self, inputs: &mut ConditionInputs) {
        match self {
            Ablation::NoSemantic => inputs.semantic = None,
            Ablation::NoPrefix => inputs.global = None,
            Ablation::NoContent => inputs.content = None,
            Ablation::Full | Ablation::NoSegmentation => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair: usize,
    pub subject: String,
    pub prompt: String,
    pub seed: u64,
    pub fidelity: Vec<f64>,
    pub alignment: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub scales: GuidanceScales,
    pub samples: usize,
    /// Mean over every generated image.
    pub fidelity: f64,
    pub alignment: f64,
    pub pairs: Vec<PairResult>,
    pub config_hash: String,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    pair: usize,
    image: usize,
    subject: &'a str,
    prompt: &'a str,
    seed: u64,
    fidelity: f64,
    alignment: f64,
}

impl EvalReport {
    /// One row per generated image.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pairs {
            for (i, (f, a)) in p.fidelity.iter().zip(&p.alignment).enumerate() {
                w.serialize(ReportRow {
                    pair: p.pair,
                    image: i,
                    subject: &p.subject,
                    prompt: &p.prompt,
                    seed: p.seed,
                    fidelity: *f,
                    alignment: *a,
                })
                .map_err(|e| EvalError::Csv(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} images, fidelity {:.4}, alignment {:.4} (text {}, image {}) [{}]",
            self.ablation.name(),
            self.samples,
            self.fidelity,
            self.alignment,
            self.scales.text,
            self.scales.image,
            &self.config_hash[..12]
        )
    }
}

fn config_hash<T: Real>(
    model: &EchoGen<T>,
    protocol: &EvalProtocol,
    scales: GuidanceScales,
    ablation: Ablation,
    n_pairs: usize,
) -> String {
    let blob = serde_json::json!({
        "model": model.spec,
        "protocol": protocol,
        "scales": scales,
        "ablation": ablation,
        "pairs": n_pairs,
    });
    hex::encode(Sha256::digest(blob.to_string().as_bytes()))
}

/// Generates `images_per_pair` images per pair (same seeds across ablations and scales) and scores them.
pub fn run_benchmark<T: Real>(
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
    set: &BenchmarkSet,
    protocol: &EvalProtocol,
    scales: GuidanceScales,
    ablation: Ablation,
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    let root = Rng::named(protocol.seed, "eval");
    let results = parallel::map(&set.pairs, |i, pair| -> Result<PairResult, EvalError> {
        let reference = match ablation {
            Ablation::NoSegmentation => &pair.raw_reference,
            _ => &pair.reference,
        };
        let mut request = SampleRequest::new(
            pair.prompt.clone(),
            Some(reference.clone()),
            root.child("pair", i as u64).next_seed(),
        );
        request.scales = scales;
        request.decoding = protocol.decoding;
        request.num_images = protocol.images_per_pair;
        let mut branches = branch_inputs(model, tokenizer, &request)?;
        if let Some(full) = branches.last_mut() {
            ablation.apply(full);
        }
        let images = generate_with_branches(&request, &branches, model, tokenizer)?;
        let mut fidelity = Vec::with_capacity(images.len());
        let mut alignment = Vec::with_capacity(images.len());
        for g in &images {
            fidelity.push(subject_fidelity(&g.image, &pair.reference)?);
            alignment.push(text_alignment(&g.image, &pair.prompt)?);
        }
        Ok(PairResult {
            pair: i,
            subject: pair.subject.identity().label(),
            prompt: pair.prompt.clone(),
            seed: request.seed,
            fidelity,
            alignment,
        })
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let all_f: Vec<f64> = pairs
        .iter()
        .flat_map(|p| p.fidelity.iter().copied())
        .collect();
    let all_a: Vec<f64> = pairs
        .iter()
        .flat_map(|p| p.alignment.iter().copied())
        .collect();
    Ok(EvalReport {
        ablation,
        scales,
        samples: all_f.len(),
        fidelity: mean(&all_f),
        alignment: mean(&all_a),
        config_hash: config_hash(model, protocol, scales, ablation, set.pairs.len()),
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub text: f64,
    pub image: f64,
    pub fidelity: f64,
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Spearman correlations of (fidelity, alignment) with the swept scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub fidelity: f64,
    pub alignment: f64,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Csv(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Trend along the image scale at a fixed text scale.
    pub fn along_image(&self, text: f64) -> Trend {
        self.trend(|r| (r.text == text).then_some(r.image))
    }

    /// Trend along the text scale at a fixed image scale.
    pub fn along_text(&self, image: f64) -> Trend {
        self.trend(|r| (r.image == image).then_some(r.text))
    }

    fn trend(&self, key: impl Fn(&SweepRow) -> Option<f64>) -> Trend {
        let rows: Vec<(f64, &SweepRow)> = self
            .rows
            .iter()
            .filter_map(|r| key(r).map(|k| (k, r)))
            .collect();
        let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let f: Vec<f64> = rows.iter().map(|r| r.1.fidelity).collect();
        let a: Vec<f64> = rows.iter().map(|r| r.1.alignment).collect();
        Trend {
            fidelity: spearman(&x, &f),
            alignment: spearman(&x, &a),
        }
    }
}

/// Benchmark metrics at every point of `text_grid x image_grid` (text-major order).
pub fn cfg_sweep<T: Real>(
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
    set: &BenchmarkSet,
    protocol: &EvalProtocol,
    text_grid: &[f64],
    image_grid: &[f64],
) -> Result<SweepTable, EvalError> {
    let mut rows = Vec::with_capacity(text_grid.len() * image_grid.len());
    for &text in text_grid {
        for &image in image_grid {
            let r = run_benchmark(
                model,
                tokenizer,
                set,
                protocol,
                GuidanceScales::new(text, image)?,
                Ablation::Full,
            )?;
            rows.push(SweepRow {
                text,
                image,
                fidelity: r.fidelity,
                alignment: r.alignment,
            });
        }
    }
    Ok(SweepTable { rows })
}
