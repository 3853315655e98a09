//! Text, semantic, global and content conditions, and their null substitutes.

mod segment;
mod semantic;
mod vocab;

pub use segment::{segment_subject, segment_subject_with_mask};
pub use semantic::{
    cosine, extract_semantic_features, global_descriptor, is_occupied, patch_descriptor,
    Descriptor, SemanticFeatures, DESC_DIM, ORIENT_BINS, PATCH,
};
pub use vocab::{Vocabulary, VOCAB_TEXT};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Rng, Tensor, Var};
use crate::params::{Ctx, Linear, ParamGroup, ParamId, ParamStore};
use crate::raster::Image;
use crate::tokenizer::{LatentGrid, Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("empty subject mask")]
    EmptyMask,
    #[error("unknown word {word:?} at token {position}")]
    UnknownWord { word: String, position: usize },
    #[error("prompt has {len} tokens, limit is {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Sizes the condition encoders are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionShape {
    pub d_model: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub image_size: usize,
    /// Side of the content grid (image size / content downsample).
    pub content_grid: usize,
    pub latent_channels: usize,
}

impl ConditionShape {
    pub fn semantic_tokens(&self) -> usize {
        (self.image_size / PATCH).pow(2)
    }

    pub fn content_tokens(&self) -> usize {
        self.content_grid * self.content_grid
    }
}

/// Encoder and null-embedding parameters inside a model [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConditionParams {
    pub shape: ConditionShape,
    pub word_emb: ParamId,
    pub text_pos: ParamId,
    pub null_text: ParamId,
    pub sem_patch: Linear,
    pub sem_global: Linear,
    pub null_sem: ParamId,
    pub null_global: ParamId,
    pub content_proj: Linear,
    pub ref_pos: ParamId,
    pub null_content: ParamId,
}

impl ConditionParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        shape: ConditionShape,
        rng: &mut Rng,
    ) -> Self {
        let d = shape.d_model;
        let std = 0.02;
        let word_emb = store.add_normal(
            "cond.word_emb",
            ParamGroup::Backbone,
            &[shape.vocab, d],
            1.0,
            rng,
        );
        let text_pos = store.add_normal(
            "cond.text_pos",
            ParamGroup::Backbone,
            &[shape.max_text_len, d],
            0.1,
            rng,
        );
        let null_text = store.add_normal("cond.null_text", ParamGroup::TextNull, &[1, d], 1.0, rng);
        let sem_patch = Linear::new(
            store,
            "cond.sem_patch",
            ParamGroup::Subject,
            DESC_DIM,
            d,
            false,
            rng,
        );
        let sem_global = Linear::new(
            store,
            "cond.sem_global",
            ParamGroup::Subject,
            DESC_DIM,
            d,
            true,
            rng,
        );
        let null_sem = store.add_normal("cond.null_sem", ParamGroup::Subject, &[1, d], std, rng);
        let null_global = store.add_zeros("cond.null_global", ParamGroup::Subject, &[1, d]);
        let content_proj = Linear::new(
            store,
            "cond.content_proj",
            ParamGroup::Subject,
            shape.latent_channels,
            d,
            false,
            rng,
        );
        let ref_pos = store.add_normal(
            "cond.ref_pos",
            ParamGroup::Subject,
            &[shape.content_tokens(), d],
            std,
            rng,
        );
        let null_content =
            store.add_normal("cond.null_content", ParamGroup::Subject, &[1, d], std, rng);
        Self {
            shape,
            word_emb,
            text_pos,
            null_text,
            sem_patch,
            sem_global,
            null_sem,
            null_global,
            content_proj,
            ref_pos,
            null_content,
        }
    }
}

/// Raw conditions of one sample; `None` selects the learned null embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionInputs {
    pub text: Option<Vec<usize>>,
    pub semantic: Option<Vec<Descriptor>>,
    pub global: Option<Descriptor>,
    pub content: Option<LatentGrid>,
}

impl ConditionInputs {
    pub fn null() -> Self {
        Self::default()
    }

    /// The same conditions with the image group (semantic, global, content) nulled.
    pub fn text_only(&self) -> Self {
        Self {
            text: self.text.clone(),
            ..Self::default()
        }
    }

    pub fn with_reference(mut self, r: &ReferenceFeatures) -> Self {
        self.semantic = Some(r.semantic.patches.clone());
        self.global = Some(r.semantic.global);
        self.content = Some(r.content.clone());
        self
    }
}

/// Image-derived conditions of one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatures {
    pub semantic: SemanticFeatures,
    pub content: LatentGrid,
}

/// Condition embeddings inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    /// `[N_t, d]` (one null token when the prompt is empty or dropped).
    pub text: Var,
    /// `[1, d]`
    pub pooled_text: Var,
    /// `[N_s, d]`
    pub semantic: Var,
    /// `[1, d]`
    pub global: Var,
    /// `[N_c, d]`
    pub content: Var,
}

pub fn encode_text(prompt: &str, shape: &ConditionShape) -> Result<Vec<usize>, ConditioningError> {
    let ids = Vocabulary::builtin().tokenize(prompt)?;
    if ids.len() > shape.max_text_len {
        return Err(ConditioningError::PromptTooLong {
            len: ids.len(),
            max: shape.max_text_len,
        });
    }
    Ok(ids)
}

/// Tokenizer latent of the reference, resampled to the content grid.
pub fn extract_content(
    img: &Image,
    tokenizer: &Tokenizer,
    grid: usize,
) -> Result<LatentGrid, ConditioningError> {
    let f = tokenizer.encode_latent(img)?;
    let data = f.resized(grid, grid);
    Ok(LatentGrid::new(grid, grid, f.c, data)?)
}

pub fn extract_reference(
    img: &Image,
    tokenizer: &Tokenizer,
    shape: &ConditionShape,
) -> Result<ReferenceFeatures, ConditioningError> {
    Ok(ReferenceFeatures {
        semantic: extract_semantic_features(img, shape.image_size)?,
        content: extract_content(img, tokenizer, shape.content_grid)?,
    })
}

fn rows<T: Real>(vals: &[Descriptor]) -> Tensor<T> {
    Tensor::from_fn(&[vals.len(), DESC_DIM], |i| {
        T::lit(vals[i / DESC_DIM][i % DESC_DIM] as f64)
    })
}

/// Projects raw conditions into `d_model` embeddings.
pub fn embed_conditions<T: Real>(
    ctx: &mut Ctx<'_, T>,
    p: &ConditionParams,
    inputs: &ConditionInputs,
) -> Result<ConditionVars, ConditioningError> {
    let (text, pooled_text) = match inputs.text.as_deref() {
        Some(ids) if !ids.is_empty() => {
            if ids.len() > p.shape.max_text_len {
                return Err(ConditioningError::PromptTooLong {
                    len: ids.len(),
                    max: p.shape.max_text_len,
                });
            }
            let emb = ctx.p(p.word_emb);
            let e = ctx.g.gather_rows(emb, ids)?;
            let pos = ctx.p(p.text_pos);
            let pos = ctx.g.slice_rows(pos, 0..ids.len())?;
            let t = ctx.g.add(e, pos)?;
            let pooled = ctx.g.mean_rows(t)?;
            (t, pooled)
        }
        _ => {
            let n = ctx.p(p.null_text);
            (n, n)
        }
    };
    let semantic = match &inputs.semantic {
        Some(patches) => {
            let x = ctx.g.constant(rows(patches));
            p.sem_patch.apply(ctx, x)?
        }
        None => ctx.p(p.null_sem),
    };
    let global = match &inputs.global {
        Some(desc) => {
            let x = ctx.g.constant(rows(std::slice::from_ref(desc)));
            p.sem_global.apply(ctx, x)?
        }
        None => ctx.p(p.null_global),
    };
    let content = match &inputs.content {
        Some(lat) => {
            let n = lat.h * lat.w;
            if n != p.shape.content_tokens() || lat.c != p.shape.latent_channels {
                return Err(ConditioningError::Shape(format!(
                    "content latent {}x{}x{} does not match {} tokens of {} channels",
                    lat.h,
                    lat.w,
                    lat.c,
                    p.shape.content_tokens(),
                    p.shape.latent_channels
                )));
            }
            let x = ctx
                .g
                .constant(Tensor::from_fn(&[n, lat.c], |i| T::lit(lat.data[i] as f64)));
            let y = p.content_proj.apply(ctx, x)?;
            let pos = ctx.p(p.ref_pos);
            ctx.g.add(y, pos)?
        }
        None => ctx.p(p.null_content),
    };
    Ok(ConditionVars {
        text,
        pooled_text,
        semantic,
        global,
        content,
    })
}
