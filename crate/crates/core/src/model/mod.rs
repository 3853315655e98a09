//! Next-scale transformer with subject-injection blocks.

mod block;
mod forward;
mod layout;

pub use block::{
    adaln_modulation, cross_attention, mm_attention, modulate, BlockParams, CrossKv, MmInput,
    MmOutput,
};
pub use forward::{scale_inputs, BitLogits, BlockCache, KvCache};
pub use layout::{build_mask, AttentionMask, SequenceLayout, Slot, PREFIX};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{ConditionParams, ConditionShape, ConditioningError, Vocabulary};
use crate::numerics::{NumericsError, Real, Rng};
use crate::params::{Linear, ParamGroup, ParamId, ParamStore};
use crate::tokenizer::{ScaleSchedule, TokenizerError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    /// Side of the content-reference token grid.
    pub content_grid: usize,
    /// Initial value of the semantic and content logit gates.
    pub gate_init: f64,
    /// Std of the semantic and content key projectors at init.
    pub subject_key_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            blocks: 6,
            heads: 4,
            ffn_mult: 4,
            max_text_len: 32,
            content_grid: 8,
            gate_init: -8.0,
            subject_key_std: 0.02,
            seed: 0,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub schedule: ScaleSchedule,
    pub d_bits: usize,
    pub image_size: usize,
    pub vocab: usize,
}

impl ModelSpec {
    pub fn new(
        config: ModelConfig,
        schedule: ScaleSchedule,
        d_bits: usize,
        image_size: usize,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            config,
            schedule,
            d_bits,
            image_size,
            vocab: Vocabulary::builtin().len(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let c = &self.config;
        if c.d_model == 0 || c.heads == 0 || c.d_model % c.heads != 0 {
            return Err(ModelError::Config(format!(
                "{} heads do not divide d_model {}",
                c.heads, c.d_model
            )));
        }
        if c.blocks == 0 || c.ffn_mult == 0 || c.max_text_len == 0 || c.content_grid == 0 {
            return Err(ModelError::Config(
                "blocks, ffn_mult, max_text_len and content_grid must be positive".into(),
            ));
        }
        if self.schedule.is_empty() || self.d_bits == 0 {
            return Err(ModelError::Schedule("empty schedule or zero bits".into()));
        }
        Ok(())
    }

    pub fn condition_shape(&self) -> ConditionShape {
        ConditionShape {
            d_model: self.config.d_model,
            vocab: self.vocab,
            max_text_len: self.config.max_text_len,
            image_size: self.image_size,
            content_grid: self.config.content_grid,
            latent_channels: self.d_bits,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.config.d_model / self.config.heads
    }
}

/// Parameter ids of the whole network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cond: ConditionParams,
    pub start: ParamId,
    pub prefix_pos: ParamId,
    pub scale_emb: ParamId,
    pub pos_table: ParamId,
    pub in_proj: Linear,
    pub blocks: Vec<BlockParams>,
    pub final_hidden: Linear,
    pub final_out: Linear,
    pub head: Linear,
}

/// Model parameters plus the spec they were built from.
#[derive(Clone, Debug)]
pub struct EchoGen<T: Real> {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub store: ParamStore<T>,
}

impl<T: Real> EchoGen<T> {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::named(spec.config.seed, "model-init");
        let d = spec.config.d_model;
        let bb = ParamGroup::Backbone;
        let cond = ConditionParams::register(&mut store, spec.condition_shape(), &mut rng);
        let start = store.add_normal("start", bb, &[1, d], 1.0, &mut rng);
        let prefix_pos = store.add_normal("prefix_pos", bb, &[PREFIX, d], 0.1, &mut rng);
        let scale_emb = store.add_normal("scale_emb", bb, &[spec.schedule.len(), d], 0.1, &mut rng);
        let (h, w) = spec.schedule.last();
        let pos_table = store.add_normal("pos_table", bb, &[h * w, d], 0.1, &mut rng);
        let in_proj = Linear::new(&mut store, "in_proj", bb, spec.d_bits, d, false, &mut rng);
        let blocks = (0..spec.config.blocks)
            .map(|i| {
                BlockParams::register(&mut store, &format!("block{i}"), &spec.config, &mut rng)
            })
            .collect();
        let final_hidden = Linear::new(&mut store, "final.ada_hidden", bb, d, d, false, &mut rng);
        let final_out = Linear::new(&mut store, "final.ada_out", bb, d, 2 * d, true, &mut rng);
        let head = Linear::new(&mut store, "head", bb, d, spec.d_bits, true, &mut rng);
        let params = ModelParams {
            cond,
            start,
            prefix_pos,
            scale_emb,
            pos_table,
            in_proj,
            blocks,
            final_hidden,
            final_out,
            head,
        };
        Ok(Self {
            spec,
            params,
            store,
        })
    }

    pub fn cast<U: Real>(&self) -> EchoGen<U> {
        EchoGen {
            spec: self.spec.clone(),
            params: self.params.clone(),
            store: self.store.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }
}

/// Groups updated in each training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
}

impl Phase {
    pub fn trainable_groups(self) -> Vec<ParamGroup> {
        match self {
            Phase::A => vec![ParamGroup::Backbone, ParamGroup::TextNull],
            Phase::B => vec![
                ParamGroup::Subject,
                ParamGroup::Content,
                ParamGroup::TextNull,
            ],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Phase::A),
            "B" | "b" => Some(Phase::B),
            _ => None,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
        })
    }
}

/// Disjoint cover of a store's parameters into frozen and trainable names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

/// Phase-B partition: the backbone is frozen, everything else trains.
pub fn param_partition<T: Real>(store: &ParamStore<T>) -> Partition {
    partition_for(store, Phase::B)
}

pub fn partition_for<T: Real>(store: &ParamStore<T>, phase: Phase) -> Partition {
    let groups = phase.trainable_groups();
    let mut p = Partition {
        frozen: BTreeSet::new(),
        trainable: BTreeSet::new(),
    };
    for id in store.ids() {
        let name = store.name(id).to_string();
        if groups.contains(&store.group(id)) {
            p.trainable.insert(name);
        } else {
            p.frozen.insert(name);
        }
    }
    p
}
