//! Two-phase optimization: text-to-image pretraining, then subject injection on a frozen backbone.

mod recipe;

pub use recipe::{
    bitwise_self_correction, condition_dropout, first_clause, scale_weighted_bce, truncate_prompt,
    Corrected, DropDraw,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{
    encode_text, extract_reference, ConditionInputs, ConditioningError, ReferenceFeatures,
};
use crate::data::Triplet;
use crate::model::{scale_inputs, EchoGen, ModelError, Phase};
use crate::numerics::{NumericsError, Rng, RngState, Tensor};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::parallel;
use crate::params::{Ctx, ParamGroup, Trainable};
use crate::tokenizer::{
    LatentGrid, MultiScaleTokens, ResidualQuantizer, Tokenizer, TokenizerError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("phase B needs a model pretrained in phase A")]
    MissingPhaseA,
    #[error("empty training set")]
    Empty,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Phase-B rate for the subject parameters and the text null.
    pub lr_base: f64,
    /// Phase-B rate for the content-stream projectors.
    pub lr_mm: f64,
    /// Phase-A rate for the backbone.
    pub lr_pretrain: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub steps: usize,
    pub p_text: f64,
    pub p_image: f64,
    pub flip_ratio: f64,
    pub flip_fraction: f64,
    pub truncate_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 3e-5,
            lr_mm: 3e-6,
            lr_pretrain: 1e-3,
            beta1: 0.9,
            beta2: 0.97,
            weight_decay: 0.0,
            grad_clip: 5.0,
            batch: 16,
            epochs: 1,
            steps: 0,
            p_text: 0.1,
            p_image: 0.1,
            flip_ratio: 0.3,
            flip_fraction: 0.1,
            truncate_p: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, p) in [
            ("p_text", self.p_text),
            ("p_image", self.p_image),
            ("flip_ratio", self.flip_ratio),
            ("flip_fraction", self.flip_fraction),
            ("truncate_p", self.truncate_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::Config(format!(
                    "{name} = {p} is not a probability"
                )));
            }
        }
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_mm", self.lr_mm),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip: self.grad_clip,
        }
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n_samples.div_ceil(self.batch)
        }
    }

    /// Learning rate of `group` in `phase`; `None` keeps the group frozen.
    pub fn lr(&self, phase: Phase, group: ParamGroup) -> Option<f64> {
        match (phase, group) {
            (Phase::A, ParamGroup::Backbone | ParamGroup::TextNull) => Some(self.lr_pretrain),
            (Phase::B, ParamGroup::Subject | ParamGroup::TextNull) => Some(self.lr_base),
            (Phase::B, ParamGroup::Content) => Some(self.lr_mm),
            _ => None,
        }
    }
}

/// A triplet reduced to what training reads: prompt, target latent and codes, reference features.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub prompt: String,
    pub latent: LatentGrid,
    pub tokens: MultiScaleTokens,
    pub reference: ReferenceFeatures,
}

pub fn prepare_samples(
    triplets: &[Triplet],
    tokenizer: &Tokenizer,
    model: &EchoGen<f32>,
) -> Result<Vec<TrainSample>, TrainError> {
    let shape = model.spec.condition_shape();
    parallel::map(triplets, |_, t| {
        let (latent, enc) = tokenizer.tokenize(&t.target)?;
        let reference = extract_reference(&t.reference, tokenizer, &shape)?;
        Ok(TrainSample {
            prompt: t.meta.prompt.clone(),
            latent,
            tokens: enc.tokens,
            reference,
        })
    })
    .into_iter()
    .collect()
}

/// Resumable optimizer and sampling state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    /// Set when the model was loaded from a phase-A checkpoint.
    pub pretrained: bool,
    pub step: u64,
    pub adam: AdamState,
    pub loss_history: Vec<f64>,
    pub rng_dropout: RngState,
    pub rng_flip: RngState,
    pub rng_truncate: RngState,
    pub rng_order: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(phase: Phase, pretrained: bool, n_params: usize, seed: u64) -> Self {
        let base = Rng::named(seed, "train");
        Self {
            phase,
            pretrained,
            step: 0,
            adam: AdamState::new(n_params),
            loss_history: Vec::new(),
            rng_dropout: base.child("dropout", 0).state(),
            rng_flip: base.child("flip", 0).state(),
            rng_truncate: base.child("truncate", 0).state(),
            rng_order: base.child("order", 0).state(),
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Next `batch` sample indices, reshuffling at every epoch boundary.
    pub fn next_batch(&mut self, n_samples: usize, batch: usize) -> Vec<usize> {
        let mut rng = Rng::from_state(self.rng_order);
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(n_samples) {
            if self.cursor >= self.order.len() || self.order.len() != n_samples {
                self.order = (0..n_samples).collect();
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        self.rng_order = rng.state();
        out
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub loss_per_scale: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

struct SampleSeeds {
    dropout: u64,
    flip: u64,
    truncate: u64,
}

struct SampleGrad {
    grads: Vec<Option<Tensor<f32>>>,
    loss: f64,
    per_scale: Vec<f64>,
}

/// Conditions of a sample for `phase` before dropout; phase A never sees the reference.
pub fn sample_conditions(
    model: &EchoGen<f32>,
    sample: &TrainSample,
    prompt: &str,
    phase: Phase,
) -> Result<ConditionInputs, TrainError> {
    let text = encode_text(prompt, &model.spec.condition_shape())?;
    let inputs = ConditionInputs {
        text: Some(text),
        ..ConditionInputs::default()
    };
    Ok(match phase {
        Phase::A => inputs,
        Phase::B => inputs.with_reference(&sample.reference),
    })
}

fn sample_grad(
    model: &EchoGen<f32>,
    q: &ResidualQuantizer,
    sample: &TrainSample,
    cfg: &TrainConfig,
    phase: Phase,
    seeds: &SampleSeeds,
) -> Result<SampleGrad, TrainError> {
    let prompt = truncate_prompt(
        &sample.prompt,
        cfg.truncate_p,
        &mut Rng::new(seeds.truncate, 0),
    );
    let inputs = sample_conditions(model, sample, &prompt, phase)?;
    let p_image = if phase == Phase::A { 0.0 } else { cfg.p_image };
    let (inputs, _) = condition_dropout(
        &inputs,
        cfg.p_text,
        p_image,
        &mut Rng::new(seeds.dropout, 0),
    );
    let corrected = bitwise_self_correction(
        q,
        &sample.latent,
        cfg.flip_ratio,
        cfg.flip_fraction,
        &mut Rng::new(seeds.flip, 0),
    );
    let scale_in = scale_inputs(q, &corrected.inputs)?;
    let mut ctx = Ctx::new(&model.store, Trainable::Groups(phase.trainable_groups()));
    let logits = model.forward_graph(&mut ctx, &inputs, &scale_in)?;
    let (loss, per) =
        scale_weighted_bce(&mut ctx, logits, &corrected.targets, &model.spec.schedule)?;
    let grads = ctx.param_grads(loss)?;
    Ok(SampleGrad {
        grads,
        loss: ctx.g.value(loss).item() as f64,
        per_scale: per.iter().map(|&v| ctx.g.value(v).item() as f64).collect(),
    })
}

/// One optimizer step on `batch`; gradients are averaged over the batch.
pub fn train_step(
    model: &mut EchoGen<f32>,
    q: &ResidualQuantizer,
    state: &mut TrainState,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
) -> Result<StepRecord, TrainError> {
    let phase = state.phase;
    if phase == Phase::B && !state.pretrained {
        return Err(TrainError::MissingPhaseA);
    }
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut rd = Rng::from_state(state.rng_dropout);
    let mut rf = Rng::from_state(state.rng_flip);
    let mut rt = Rng::from_state(state.rng_truncate);
    let seeds: Vec<SampleSeeds> = batch
        .iter()
        .map(|_| SampleSeeds {
            dropout: rd.next_seed(),
            flip: rf.next_seed(),
            truncate: rt.next_seed(),
        })
        .collect();
    let work: Vec<(&TrainSample, &SampleSeeds)> = batch.iter().copied().zip(&seeds).collect();
    let results = parallel::map(&work, |_, (s, seeds)| {
        sample_grad(model, q, s, cfg, phase, seeds)
    });
    let n = batch.len() as f32;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
    let mut loss = 0.0;
    let mut per_scale = vec![0.0; model.spec.schedule.len()];
    for r in results {
        let r = r?;
        loss += r.loss / n as f64;
        for (a, b) in per_scale.iter_mut().zip(&r.per_scale) {
            *a += b / n as f64;
        }
        for (acc, g) in grads.iter_mut().zip(r.grads) {
            let Some(g) = g else { continue };
            *acc = Some(match acc.take() {
                None => g.map(|v| v / n),
                Some(a) => {
                    let data = a
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, y)| x + y / n)
                        .collect();
                    Tensor::new(a.shape().to_vec(), data)?
                }
            });
        }
    }
    let mut adam = Adam {
        config: cfg.adam(),
        state: std::mem::replace(&mut state.adam, AdamState::new(0)),
    };
    let norm = adam.step(&mut model.store, grads, |g| cfg.lr(phase, g));
    state.adam = adam.state;
    let norm = norm?;
    state.step += 1;
    state.loss_history.push(loss);
    state.rng_dropout = rd.state();
    state.rng_flip = rf.state();
    state.rng_truncate = rt.state();
    let lr = match phase {
        Phase::A => cfg.lr_pretrain,
        Phase::B => cfg.lr_base,
    };
    Ok(StepRecord {
        step: state.step,
        phase,
        loss,
        loss_per_scale: per_scale,
        grad_norm: norm,
        lr,
    })
}

/// Runs `steps` optimizer steps over `samples`, calling `log` after each.
pub fn train(
    model: &mut EchoGen<f32>,
    q: &ResidualQuantizer,
    state: &mut TrainState,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    steps: usize,
    mut log: impl FnMut(&StepRecord),
) -> Result<(), TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    for _ in 0..steps {
        let idx = state.next_batch(samples.len(), cfg.batch);
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let rec = train_step(model, q, state, &batch, cfg)?;
        log(&rec);
    }
    Ok(())
}

/// Fraction of target bits whose teacher-forced logit has the right sign, using
/// the full prompt and (in phase B) the reference.
pub fn teacher_forced_accuracy(
    model: &EchoGen<f32>,
    q: &ResidualQuantizer,
    samples: &[TrainSample],
    phase: Phase,
) -> Result<f64, TrainError> {
    let per = parallel::map(samples, |_, s| -> Result<(usize, usize), TrainError> {
        let inputs = sample_conditions(model, s, &s.prompt, phase)?;
        let logits = model.forward(&inputs, &scale_inputs(q, &s.tokens)?)?;
        let bits = s.tokens.maps.iter().flat_map(|m| m.bits.iter());
        let hits = logits
            .data()
            .iter()
            .zip(bits)
            .filter(|(&l, &b)| (l >= 0.0) == (b > 0))
            .count();
        Ok((hits, logits.numel()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in per {
        let (h, t) = r?;
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total.max(1) as f64)
}
