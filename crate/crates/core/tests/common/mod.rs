#![allow(dead_code)]

use echogen::conditioning::{ConditionInputs, Descriptor, DESC_DIM};
use echogen::model::{EchoGen, ModelConfig, ModelSpec};
use echogen::numerics::{Rng, Tensor};
use echogen::params::{ParamGroup, ParamStore};
use echogen::raster::Image;
use echogen::tokenizer::{
    AeShape, Autoencoder, BitTokenMap, MultiScaleTokens, ResidualQuantizer, ScaleSchedule,
    Tokenizer,
};

pub const IMAGE: usize = 16;
pub const BITS: usize = 4;

pub fn tiny_schedule() -> ScaleSchedule {
    ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap()
}

pub fn tiny_spec(sched: ScaleSchedule) -> ModelSpec {
    let cfg = ModelConfig {
        d_model: 16,
        blocks: 2,
        heads: 2,
        ffn_mult: 2,
        content_grid: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    ModelSpec::new(cfg, sched, BITS, IMAGE).unwrap()
}

pub fn tiny_tokenizer(sched: ScaleSchedule) -> Tokenizer {
    let shape = AeShape {
        image_size: IMAGE,
        downsample: 4,
        hidden: 4,
        latent_channels: BITS,
    };
    Tokenizer {
        ae: Autoencoder::new(shape, 9).unwrap(),
        quantizer: ResidualQuantizer::with_unit_gains(sched, BITS),
    }
}

/// Replaces every parameter for which `keep` is false with scaled Gaussian noise.
pub fn randomize(store: &mut ParamStore<f32>, seed: u64, keep: impl Fn(&str, ParamGroup) -> bool) {
    let mut rng = Rng::named(seed, "randomize");
    for id in store.ids().collect::<Vec<_>>() {
        if keep(store.name(id), store.group(id)) {
            continue;
        }
        let t = store.get(id);
        let std = if t.shape().len() == 2 && t.shape()[0] > 1 {
            1.0 / (t.shape()[0] as f64).sqrt()
        } else {
            0.3
        };
        let new = Tensor::from_fn(t.shape(), |_| (rng.normal() * std) as f32);
        store.set(id, new).unwrap();
    }
}

pub fn random_model(sched: ScaleSchedule, seed: u64) -> EchoGen<f32> {
    let mut m = EchoGen::new(tiny_spec(sched)).unwrap();
    randomize(&mut m.store, seed, |_, _| false);
    m
}

pub fn desc(rng: &mut Rng) -> Descriptor {
    let mut d = [0.0f32; DESC_DIM];
    for v in d.iter_mut() {
        *v = rng.uniform() as f32;
    }
    d
}

pub fn random_image(rng: &mut Rng) -> Image {
    let data = (0..IMAGE * IMAGE * 3)
        .map(|_| rng.uniform() as f32)
        .collect();
    Image::new(IMAGE, IMAGE, data).unwrap()
}

pub fn random_tokens(sched: &ScaleSchedule, d_bits: usize, rng: &mut Rng) -> MultiScaleTokens {
    let maps = sched
        .scales()
        .iter()
        .map(|&(h, w)| BitTokenMap {
            h,
            w,
            d_bits,
            bits: (0..h * w * d_bits)
                .map(|_| if rng.bernoulli(0.5) { 1 } else { -1 })
                .collect(),
        })
        .collect();
    MultiScaleTokens { maps }
}

pub fn text_inputs(ids: Vec<usize>) -> ConditionInputs {
    ConditionInputs {
        text: Some(ids),
        ..ConditionInputs::default()
    }
}
