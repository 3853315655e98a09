//! Sequential vs data-parallel paths of the hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use echogen::conditioning::extract_reference;
use echogen::data::{DataConfig, Dataset};
use echogen::model::{EchoGen, ModelConfig, ModelSpec, Phase};
use echogen::numerics::{Rng, Tensor};
use echogen::parallel;
use echogen::raster::Image;
use echogen::sampling::{generate, Decoding, SampleRequest};
use echogen::tokenizer::{
    AeShape, Autoencoder, LatentGrid, ResidualQuantizer, ScaleSchedule, Tokenizer,
};
use echogen::training::{train, TrainConfig, TrainSample, TrainState};

const IMAGE: usize = 64;
const BITS: usize = 8;

fn setup() -> (EchoGen<f32>, Tokenizer) {
    let sched = ScaleSchedule::doubling(8, 8);
    let spec = ModelSpec::new(
        ModelConfig {
            d_model: 64,
            blocks: 2,
            ..ModelConfig::default()
        },
        sched.clone(),
        BITS,
        IMAGE,
    )
    .unwrap();
    let mut model = EchoGen::<f32>::new(spec).unwrap();
    let mut rng = Rng::named(0, "bench");
    for id in model.store.ids().collect::<Vec<_>>() {
        let shape = model.store.get(id).shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| (rng.normal() * 0.1) as f32);
        model.store.set(id, t).unwrap();
    }
    let shape = AeShape {
        image_size: IMAGE,
        downsample: 8,
        hidden: 16,
        latent_channels: BITS,
    };
    let tok = Tokenizer {
        ae: Autoencoder::new(shape, 0).unwrap(),
        quantizer: ResidualQuantizer::with_unit_gains(sched, BITS),
    };
    (model, tok)
}

fn image(rng: &mut Rng) -> Image {
    Image::new(
        IMAGE,
        IMAGE,
        (0..IMAGE * IMAGE * 3)
            .map(|_| rng.uniform() as f32)
            .collect(),
    )
    .unwrap()
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn bench_generate(c: &mut Criterion) {
    let (model, tok) = setup();
    let mut rng = Rng::named(1, "bench");
    let mut req = SampleRequest::new(
        "a small red solid circle on a blue background",
        Some(image(&mut rng)),
        0,
    );
    req.decoding = Decoding::Temperature(1.0);
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_sequential(seq);
            b.iter(|| generate(&req, &model, &tok).unwrap())
        });
    }
    parallel::set_sequential(false);
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let (model, tok) = setup();
    let mut rng = Rng::named(2, "bench");
    let (h, w) = tok.schedule().last();
    let samples: Vec<TrainSample> = (0..16)
        .map(|_| {
            let latent = LatentGrid::new(
                h,
                w,
                BITS,
                (0..h * w * BITS).map(|_| rng.normal() as f32).collect(),
            )
            .unwrap();
            let tokens = tok.quantizer.encode(&latent).unwrap().tokens;
            let reference =
                extract_reference(&image(&mut rng), &tok, &model.spec.condition_shape()).unwrap();
            TrainSample {
                prompt: "a small red solid circle on a blue background".into(),
                latent,
                tokens,
                reference,
            }
        })
        .collect();
    let cfg = TrainConfig {
        batch: 8,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_sequential(seq);
            let mut m = model.clone();
            let mut state = TrainState::new(Phase::A, false, m.store.len(), 0);
            b.iter(|| {
                train(
                    &mut m,
                    &tok.quantizer,
                    &mut state,
                    &samples,
                    &cfg,
                    1,
                    |_| {},
                )
                .unwrap()
            })
        });
    }
    parallel::set_sequential(false);
    g.finish();
}

fn bench_dataset(c: &mut Criterion) {
    let cfg = DataConfig {
        n: 64,
        ..DataConfig::default()
    };
    let mut g = c.benchmark_group("dataset");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_sequential(seq);
            b.iter(|| Dataset::generate(&cfg).unwrap())
        });
    }
    parallel::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_generate, bench_train_step, bench_dataset);
criterion_main!(benches);
