//! The commands behind each subcommand; every artifact lands under the work directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use echogen::data::{Dataset, Manifest as DataManifest};
use echogen::evaluation::{cfg_sweep, run_benchmark, BenchmarkSet, EvalReport, SweepTable, Trend};
use echogen::model::{EchoGen, ModelSpec, Phase};
use echogen::raster::Image;
use echogen::sampling::{
    bench as bench_requests, generate, BenchReport, GuidanceScales, SampleRecord, SampleRequest,
};
use echogen::tokenizer::{train_tokenizer as fit_tokenizer, Tokenizer};
use echogen::training::{
    prepare_samples, teacher_forced_accuracy, train as run_training, TrainState,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{
    load_model, load_tokenizer, model_checkpoint, tokenizer_checkpoint, Artifact, Checkpoint,
    CheckpointError,
};
use crate::config::{decoding, training_hash, Config, ConfigError};
use crate::selftest::{self, Check};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact {artifact} at {path}; {hint}")]
    MissingArtifact {
        artifact: String,
        path: String,
        hint: String,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Run(String),
    #[error("{failed} of {total} self-test checks failed")]
    Selftest { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact { .. } => 2,
            CliError::Config(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Io { .. } | CliError::Run(_) | CliError::Selftest { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Io { .. } => "io",
            CliError::Run(_) => "run",
            CliError::Selftest { .. } => "selftest",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::MissingArtifact { artifact, path, .. } = self {
            v["artifact"] = artifact.clone().into();
            v["path"] = path.clone().into();
        }
        v
    }
}

macro_rules! run_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.to_string())
            }
        }
    )*};
}

run_error!(
    echogen::data::DataError,
    echogen::tokenizer::TokenizerError,
    echogen::model::ModelError,
    echogen::training::TrainError,
    echogen::sampling::SamplingError,
    echogen::evaluation::EvalError,
    echogen::raster::RasterError
);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Resolved configuration plus the directory receiving artifacts.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: Config,
    pub workdir: PathBuf,
    pub config_hash: String,
}

impl Run {
    pub fn new(config: Config, workdir: impl Into<PathBuf>) -> Self {
        let config_hash = config.hash();
        Self {
            config,
            workdir: workdir.into(),
            config_hash,
        }
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.workdir.join("tokenizer.ckpt")
    }

    pub fn checkpoint_path(&self, phase: Phase) -> PathBuf {
        self.workdir.join(match phase {
            Phase::A => "phase_a.ckpt",
            Phase::B => "phase_b.ckpt",
        })
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.workdir.join("metrics").join(name)
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.workdir.join("samples")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.workdir.join("eval")
    }

    pub fn data_root(&self) -> PathBuf {
        PathBuf::from(&self.config.data.root)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn open(
        &self,
        path: &Path,
        artifact: &str,
        hint: &str,
    ) -> Result<(Checkpoint, String), CliError> {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                artifact: artifact.into(),
                path: path.display().to_string(),
                hint: hint.into(),
            });
        }
        let (ck, hash) = Checkpoint::load(path)?;
        if training_hash(&ck.manifest.config) != self.config.training_hash() {
            log::warn!(
                "{} was written under config {} whose data/tokenizer/model/train sections differ from the current config {}",
                path.display(),
                &ck.manifest.config_hash[..12.min(ck.manifest.config_hash.len())],
                &self.config_hash[..12]
            );
        }
        Ok((ck, hash))
    }

    pub fn load_tokenizer(&self) -> Result<(Tokenizer, String), CliError> {
        let (ck, hash) = self.open(
            &self.tokenizer_path(),
            "tokenizer",
            "run train-tokenizer first",
        )?;
        Ok((load_tokenizer(&ck)?, hash))
    }

    /// The phase-B model when it exists, else the phase-A model.
    pub fn load_latest_model(&self) -> Result<(EchoGen<f32>, Phase), CliError> {
        let phase = if self.checkpoint_path(Phase::B).exists() {
            Phase::B
        } else {
            Phase::A
        };
        let (ck, _) = self.open(
            &self.checkpoint_path(phase),
            "phase-a checkpoint",
            "run train --phase a first",
        )?;
        Ok((load_model(&ck)?.0, phase))
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let root = self.data_root();
        if !root.join("manifest.json").exists() {
            return Err(CliError::MissingArtifact {
                artifact: "dataset".into(),
                path: root.join("manifest.json").display().to_string(),
                hint: "run gen-data first".into(),
            });
        }
        Ok(Dataset::load(&root)?)
    }
}

pub fn gen_data(run: &Run) -> Result<DataManifest, CliError> {
    let ds = Dataset::generate(&run.config.data)?;
    let manifest = ds.write(&run.data_root())?;
    log::info!(
        "wrote {} train and {} test triplets to {}",
        manifest.train_count,
        manifest.test_count,
        run.config.data.root
    );
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub images: usize,
    pub heldout_mse: f64,
    pub heldout_quantized_mse: f64,
    pub target_mse: f64,
    pub target_met: bool,
    pub gains: Vec<f32>,
    pub checkpoint_hash: String,
}

/// Fits the autoencoder on training targets and references, then calibrates the quantizer.
pub fn train_tokenizer(run: &Run) -> Result<TokenizerSummary, CliError> {
    let ds = run.load_dataset()?;
    let images: Vec<Image> = ds
        .train
        .iter()
        .map(|t| t.target.clone())
        .chain(ds.train.iter().map(|t| t.reference.clone()))
        .collect();
    let cfg = &run.config.tokenizer;
    let (tok, report) = fit_tokenizer(&images, cfg)?;
    if !report.target_met {
        log::warn!(
            "held-out reconstruction MSE {:.4} misses the target {}",
            report.autoencoder.heldout_mse,
            cfg.target_mse
        );
    }
    let hash = tokenizer_checkpoint(&tok, run.config_json(), run.config_hash.clone())
        .save(&run.tokenizer_path())?;
    let summary = TokenizerSummary {
        images: images.len(),
        heldout_mse: report.autoencoder.heldout_mse,
        heldout_quantized_mse: report.heldout_quantized_mse,
        target_mse: cfg.target_mse,
        target_met: report.target_met,
        gains: report.gains.clone(),
        checkpoint_hash: hash,
    };
    write_json(
        &run.metrics_path("tokenizer.json"),
        &serde_json::json!({ "summary": summary, "report": report }),
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phase: Phase,
    pub samples: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub teacher_forced_accuracy: f64,
    pub checkpoint_hash: String,
    pub parent_hash: Option<String>,
}

/// Trains `phase` on the training split; with `resume`, continues from that phase's checkpoint.
pub fn train(run: &Run, phase: Phase, resume: bool) -> Result<TrainSummary, CliError> {
    let cfg = &run.config.train;
    let (tok, tok_hash) = run.load_tokenizer()?;
    let target = run.checkpoint_path(phase);
    let (mut model, mut state, parent) = if resume && target.exists() {
        let (ck, _) = run.open(&target, "checkpoint", "")?;
        ck.expect(Artifact::of(phase))?;
        let parent = ck.manifest.parent_hash.clone();
        let (model, state) = load_model(&ck)?;
        let state = state.ok_or_else(|| {
            CliError::Run(format!("{} holds no training state", target.display()))
        })?;
        (model, state, parent)
    } else {
        match phase {
            Phase::A => {
                let spec = ModelSpec::new(
                    run.config.model.clone(),
                    tok.schedule().clone(),
                    tok.d_bits(),
                    tok.ae.shape.image_size,
                )?;
                let model = EchoGen::<f32>::new(spec)?;
                let n = model.store.len();
                (
                    model,
                    TrainState::new(Phase::A, false, n, cfg.seed),
                    Some(tok_hash),
                )
            }
            Phase::B => {
                let (ck, hash) = run.open(
                    &run.checkpoint_path(Phase::A),
                    "phase-a checkpoint",
                    "run train --phase a first",
                )?;
                ck.expect(Artifact::PhaseA)?;
                let (model, _) = load_model(&ck)?;
                if model.spec.config != run.config.model {
                    log::warn!(
                        "model section differs from the phase-a checkpoint; using the checkpoint's"
                    );
                }
                let n = model.store.len();
                (
                    model,
                    TrainState::new(Phase::B, true, n, cfg.seed),
                    Some(hash),
                )
            }
        }
    };
    if model.spec.schedule != *tok.schedule() || model.spec.d_bits != tok.d_bits() {
        return Err(CliError::Run(
            "model and tokenizer scale schedules differ".into(),
        ));
    }
    let ds = run.load_dataset()?;
    let samples = prepare_samples(&ds.train, &tok, &model)?;
    let total = cfg.total_steps(samples.len()) as u64;
    let remaining = total.saturating_sub(state.step) as usize;
    let log_path = run.metrics_path(match phase {
        Phase::A => "phase_a.ndjson",
        Phase::B => "phase_b.ndjson",
    });
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log_err = None;
    let mut last = None;
    run_training(
        &mut model,
        &tok.quantizer,
        &mut state,
        &samples,
        cfg,
        remaining,
        |rec| {
            last = Some(rec.loss);
            if rec.step % 50 == 0 {
                log::info!("phase {:?} step {} loss {:.4}", phase, rec.step, rec.loss);
            }
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    let accuracy = teacher_forced_accuracy(&model, &tok.quantizer, &samples, phase)?;
    let mut ck = model_checkpoint(
        &model,
        phase,
        Some(&state),
        run.config_json(),
        run.config_hash.clone(),
    );
    ck.manifest.parent_hash = parent.clone();
    let hash = ck.save(&target)?;
    Ok(TrainSummary {
        phase,
        samples: samples.len(),
        steps: state.step,
        final_loss: last,
        teacher_forced_accuracy: accuracy,
        checkpoint_hash: hash,
        parent_hash: parent,
    })
}

/// The request described by the `sample` section.
pub fn sample_request(run: &Run) -> Result<SampleRequest, CliError> {
    let s = &run.config.sample;
    let reference = if s.reference.is_empty() {
        None
    } else {
        let p = Path::new(&s.reference);
        if !p.exists() {
            return Err(CliError::MissingArtifact {
                artifact: "reference image".into(),
                path: s.reference.clone(),
                hint: "pass an existing PNG".into(),
            });
        }
        Some(Image::load_png(p)?)
    };
    let mut r = SampleRequest::new(s.prompt.clone(), reference, s.seed);
    r.scales = GuidanceScales::new(s.text, s.image)?;
    r.decoding = decoding(s.temperature);
    r.num_images = s.num_images;
    Ok(r)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleTiming {
    pub seed: u64,
    /// Per image, per scale, in milliseconds.
    pub scale_ms: Vec<Vec<f64>>,
}

/// Writes `<seed>_<i>.png` and `<seed>_<i>.json` per image; wall-clock timings go to `<seed>_timing.json`.
pub fn sample(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    let (tok, _) = run.load_tokenizer()?;
    let (model, phase) = run.load_latest_model()?;
    log::info!("sampling with the phase {phase:?} model");
    let request = sample_request(run)?;
    let images = generate(&request, &model, &tok)?;
    let dir = run.samples_dir();
    let mut paths = Vec::new();
    for g in &images {
        let stem = format!("{}_{}", request.seed, g.index);
        let png = dir.join(format!("{stem}.png"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        g.image.save_png(&png)?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &SampleRecord::of(&request, model.spec.schedule.scales(), g),
        )?;
        paths.push(png);
    }
    let timing = SampleTiming {
        seed: request.seed,
        scale_ms: images.iter().map(|g| g.scale_ms.clone()).collect(),
    };
    write_json(&dir.join(format!("{}_timing.json", request.seed)), &timing)?;
    Ok(paths)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub ablation: String,
    pub samples: usize,
    pub fidelity: f64,
    pub alignment: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: usize,
    /// Trend along the image scale at the middle text scale.
    pub along_image: Trend,
    /// Trend along the text scale at the middle image scale.
    pub along_text: Trend,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model_phase: Phase,
    pub pairs: usize,
    pub ablations: Vec<AblationSummary>,
    pub sweep: Option<SweepSummary>,
}

fn middle(grid: &[f64]) -> f64 {
    grid[grid.len() / 2]
}

/// One CSV per ablation plus `report.json`, and `sweep.csv` when both guidance grids are set.
pub fn eval(run: &Run) -> Result<(EvalSummary, Vec<EvalReport>, Option<SweepTable>), CliError> {
    let (tok, _) = run.load_tokenizer()?;
    let (model, phase) = run.load_latest_model()?;
    let e = &run.config.eval;
    let protocol = e.protocol();
    let set = BenchmarkSet::held_out(&protocol, &run.config.data)?;
    let dir = run.eval_dir();
    let mut reports = Vec::new();
    for &ablation in &e.ablations {
        let r = run_benchmark(&model, &tok, &set, &protocol, protocol.scales, ablation)?;
        log::info!("{}", r.summary());
        write_file(
            &dir.join(format!("{}.csv", ablation.name())),
            r.to_csv()?.as_bytes(),
        )?;
        reports.push(r);
    }
    let sweep = if e.text_grid.is_empty() || e.image_grid.is_empty() {
        None
    } else {
        let t = cfg_sweep(&model, &tok, &set, &protocol, &e.text_grid, &e.image_grid)?;
        write_file(&dir.join("sweep.csv"), t.to_csv()?.as_bytes())?;
        Some(t)
    };
    let summary = EvalSummary {
        model_phase: phase,
        pairs: set.pairs.len(),
        ablations: reports
            .iter()
            .map(|r| AblationSummary {
                ablation: r.ablation.name().into(),
                samples: r.samples,
                fidelity: r.fidelity,
                alignment: r.alignment,
                config_hash: r.config_hash.clone(),
            })
            .collect(),
        sweep: sweep.as_ref().map(|t| SweepSummary {
            rows: t.rows.len(),
            along_image: t.along_image(middle(&e.text_grid)),
            along_text: t.along_text(middle(&e.image_grid)),
        }),
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok((summary, reports, sweep))
}

/// Times `requests` held-out benchmark requests against the raster baseline; writes `bench.json`.
pub fn bench(run: &Run, requests: usize) -> Result<BenchReport, CliError> {
    let (tok, _) = run.load_tokenizer()?;
    let (model, _) = run.load_latest_model()?;
    let protocol = run.config.eval.protocol();
    let set = BenchmarkSet::held_out(&protocol, &run.config.data)?;
    let s = &run.config.sample;
    let reqs = set
        .pairs
        .iter()
        .cycle()
        .take(requests)
        .enumerate()
        .map(|(i, p)| -> Result<SampleRequest, CliError> {
            let mut r = SampleRequest::new(
                p.prompt.clone(),
                Some(p.reference.clone()),
                s.seed + i as u64,
            );
            r.scales = GuidanceScales::new(s.text, s.image)?;
            r.decoding = decoding(s.temperature);
            Ok(r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = bench_requests(&reqs, &model, &tok)?;
    write_json(&run.workdir.join("bench.json"), &report)?;
    Ok(report)
}

/// Runs every built-in check and writes `selftest.json`.
pub fn selftest(run: &Run) -> Result<Vec<Check>, CliError> {
    let checks = selftest::run_all();
    write_json(&run.workdir.join("selftest.json"), &checks)?;
    Ok(checks)
}

pub fn selftest_verdict(checks: &[Check]) -> Result<(), CliError> {
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Selftest {
            failed,
            total: checks.len(),
        });
    }
    Ok(())
}
