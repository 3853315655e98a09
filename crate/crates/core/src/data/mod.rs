//! Procedural subject sprites, scenes, prompts and triplet datasets.

mod dataset;
mod grammar;
mod render;
mod spec;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{
    entry_dir, grammar_hash, identity_split, DataConfig, Dataset, Manifest, ManifestEntry, Split,
    Triplet, TripletMeta, GRAMMAR_VERSION,
};
pub use grammar::{
    attrs_of, parse_prompt, prompt_of, ParseError, SceneAttrs, SubjectAttrs, CLAUSE_DELIMITER,
};
pub use render::{
    distractor_slots, inside, render_reference, render_scene, render_scene_with_mask,
    render_sprite, render_subject, rotate, size_bucket, TextureVariant, CANVAS, DISTRACTOR_PX,
    STRIPE_PERIOD,
};
pub use spec::{
    Color, Distractor, IdentityKey, Position, Rotation, SceneSpec, Shape, Size, SubjectSpec,
    Texture,
};

use crate::raster::RasterError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{0}")]
    Invalid(String),
}
