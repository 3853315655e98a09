//! Subject-driven next-scale autoregressive image generation at desk scale.

pub mod conditioning;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod raster;
pub mod sampling;
pub mod tokenizer;
pub mod training;
