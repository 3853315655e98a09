//! Built-in correctness checks on small random networks.

use std::time::Instant;

use echogen::conditioning::{ConditionInputs, Descriptor, DESC_DIM};
use echogen::model::{
    build_mask, mm_attention, scale_inputs, BlockParams, EchoGen, MmInput, ModelConfig, ModelSpec,
    SequenceLayout,
};
use echogen::numerics::{op_suite, Rng, Tensor};
use echogen::params::{grad_check_params, Ctx, ParamGroup, ParamStore};
use echogen::raster::Image;
use echogen::sampling::{
    cache_equivalence_check, cfg_combine, Decoding, GuidanceScales, SampleRequest,
};
use echogen::tokenizer::{
    bsq_quantize, AeShape, Autoencoder, BitTokenMap, LatentGrid, MultiScaleTokens,
    ResidualQuantizer, ScaleSchedule, Tokenizer,
};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String), String>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

const IMAGE: usize = 16;
const BITS: usize = 4;

pub fn tiny_schedule() -> ScaleSchedule {
    ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).expect("valid schedule")
}

fn tiny_config(d: usize, blocks: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: d,
        blocks,
        heads: 2,
        ffn_mult: 2,
        content_grid: 2,
        seed,
        ..ModelConfig::default()
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
        store.set(id, new).expect("same shape");
    }
}

/// A 16-pixel, 3-scale model with every parameter (gates included) randomized.
pub fn random_model(seed: u64) -> EchoGen<f32> {
    let spec =
        ModelSpec::new(tiny_config(16, 2, seed), tiny_schedule(), BITS, IMAGE).expect("valid spec");
    let mut m = EchoGen::new(spec).expect("valid model");
    randomize(&mut m.store, seed, |_, _| false);
    m
}

pub fn tiny_tokenizer() -> Tokenizer {
    let shape = AeShape {
        image_size: IMAGE,
        downsample: 4,
        hidden: 4,
        latent_channels: BITS,
    };
    Tokenizer {
        ae: Autoencoder::new(shape, 9).expect("valid shape"),
        quantizer: ResidualQuantizer::with_unit_gains(tiny_schedule(), BITS),
    }
}

fn desc(rng: &mut Rng) -> Descriptor {
    let mut d = [0.0f32; DESC_DIM];
    for v in d.iter_mut() {
        *v = rng.uniform() as f32;
    }
    d
}

fn full_inputs(spec: &ModelSpec, rng: &mut Rng) -> ConditionInputs {
    let shape = spec.condition_shape();
    let text = (0..6).map(|_| rng.below(shape.vocab)).collect();
    let semantic = (0..shape.semantic_tokens()).map(|_| desc(rng)).collect();
    let n = shape.content_tokens() * spec.d_bits;
    let content = LatentGrid::new(
        shape.content_grid,
        shape.content_grid,
        spec.d_bits,
        (0..n).map(|_| rng.normal() as f32).collect(),
    )
    .expect("sized grid");
    ConditionInputs {
        text: Some(text),
        semantic: Some(semantic),
        global: Some(desc(rng)),
        content: Some(content),
    }
}

fn random_tokens(sched: &ScaleSchedule, d_bits: usize, rng: &mut Rng) -> MultiScaleTokens {
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

/// The three identity settings of the guidance combination, bit-exact on random logit triples.
pub fn cfg_algebra(triples: usize, seed: u64) -> Check {
    timed("cfg-algebra", || {
        let mut rng = Rng::named(seed, "cfg-algebra");
        let mut bad = 0;
        for _ in 0..triples {
            let n = 1 + rng.below(64);
            let mut draw = || Tensor::<f32>::from_fn(&[n, BITS], |_| (rng.normal() * 4.0) as f32);
            let (u, t, f) = (draw(), draw(), draw());
            let pick = |a: f64, b: f64| -> Result<Tensor<f32>, String> {
                let s = GuidanceScales::new(a, b).map_err(|e| e.to_string())?;
                cfg_combine(&u, &t, &f, s).map_err(|e| e.to_string())
            };
            if pick(1.0, 1.0)?.data() != f.data()
                || pick(1.0, 0.0)?.data() != t.data()
                || pick(0.0, 0.0)?.data() != u.data()
            {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{triples} triples, {bad} violations")))
    })
}

/// Reference-stream outputs of a two-block attention stack under perturbed generated rows.
pub fn leakage(perturbations: usize, seed: u64) -> Check {
    timed("leakage", || {
        let d = 16;
        let mut store = ParamStore::<f32>::new();
        let cfg = tiny_config(d, 2, seed);
        let mut rng = Rng::named(seed, "leakage");
        let blocks: Vec<BlockParams> = (0..2)
            .map(|i| BlockParams::register(&mut store, &format!("b{i}"), &cfg, &mut rng))
            .collect();
        randomize(&mut store, seed, |_, _| false);
        let n_ref = 5;
        let layout = SequenceLayout::new(tiny_schedule(), n_ref);
        let n = layout.total_len();
        let n_gen = layout.generated_len();
        let rows: Vec<usize> = (0..n).collect();
        let bias = build_mask(&layout).bias::<f32>(&rows, &rows);
        let c0 = Tensor::from_fn(&[n_ref, d], |_| rng.normal() as f32);
        let run = |x: Tensor<f32>| -> Result<Vec<f32>, String> {
            let mut ctx = Ctx::inference(&store);
            let mut xv = ctx.g.constant(x);
            let mut cv = ctx.g.constant(c0.clone());
            for p in &blocks {
                let out = mm_attention(
                    &mut ctx,
                    p,
                    MmInput {
                        x: xv,
                        c: Some(cv),
                        past: None,
                        cached_ref: None,
                        bias: &bias,
                    },
                )
                .map_err(|e| e.to_string())?;
                xv = out.x;
                cv = out.c.ok_or("no reference output")?;
            }
            Ok(ctx.g.value(cv).to_vec())
        };
        let base = run(Tensor::from_fn(&[n_gen, d], |_| rng.normal() as f32))?;
        let mut changed = 0;
        for _ in 0..perturbations {
            let scale = 10f64.powf(rng.uniform() * 6.0 - 3.0);
            let other = run(Tensor::from_fn(&[n_gen, d], |_| {
                (rng.normal() * scale) as f32
            }))?;
            if other
                .iter()
                .zip(&base)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                changed += 1;
            }
        }
        Ok((
            changed == 0,
            format!("{perturbations} perturbations, {changed} changed reference outputs"),
        ))
    })
}

/// Largest change of scale-`<=k` logits when every later scale is re-randomized, over `trials` per `k`.
pub fn causality(trials: usize, seed: u64) -> Check {
    timed("causality", || {
        let model = random_model(seed);
        let spec = &model.spec;
        let sched = &spec.schedule;
        let mut rng = Rng::named(seed, "causality");
        let q = ResidualQuantizer::new(sched.clone(), BITS, vec![1.0, 0.5, 0.25])
            .map_err(|e| e.to_string())?;
        let mut worst = 0.0f32;
        for k in 0..sched.len() - 1 {
            for _ in 0..trials {
                let cond = full_inputs(spec, &mut rng);
                let tokens = random_tokens(sched, BITS, &mut rng);
                let mut other = tokens.clone();
                for map in other.maps.iter_mut().skip(k + 1) {
                    for b in map.bits.iter_mut() {
                        *b = if rng.bernoulli(0.5) { 1 } else { -1 };
                    }
                }
                let f = |t: &MultiScaleTokens| -> Result<Tensor<f32>, String> {
                    let inputs = scale_inputs(&q, t).map_err(|e| e.to_string())?;
                    model.forward(&cond, &inputs).map_err(|e| e.to_string())
                };
                let (a, b) = (f(&tokens)?, f(&other)?);
                let upto = sched.offset(k + 1) * BITS;
                for (x, y) in a.data()[..upto].iter().zip(&b.data()[..upto]) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        Ok((
            worst == 0.0,
            format!("{trials} trials per scale, max divergence {worst:e}"),
        ))
    })
}

fn block_grad_error(seed: u64) -> Result<f64, String> {
    let d = 8;
    let mut store = ParamStore::<f32>::new();
    let cfg = tiny_config(d, 1, seed);
    let mut rng = Rng::named(seed, "block-gc");
    let p = BlockParams::register(&mut store, "b", &cfg, &mut rng);
    randomize(&mut store, seed, |_, _| false);
    let store: ParamStore<f64> = store.cast();
    let layout = SequenceLayout::new(
        ScaleSchedule::new(vec![(1, 1), (2, 2)]).map_err(|e| e.to_string())?,
        3,
    );
    let rows: Vec<usize> = (0..layout.total_len()).collect();
    let bias = build_mask(&layout).bias::<f64>(&rows, &rows);
    let n_gen = layout.generated_len();
    let x = Tensor::from_fn(&[n_gen, d], |_| rng.normal());
    let c = Tensor::from_fn(&[3, d], |_| rng.normal());
    let px = Tensor::from_fn(&[n_gen, d], |_| rng.normal());
    let pc = Tensor::from_fn(&[3, d], |_| rng.normal());
    let r = grad_check_params(
        &store,
        |ctx| {
            let xv = ctx.g.constant(x.clone());
            let cv = ctx.g.constant(c.clone());
            let out = mm_attention(
                ctx,
                &p,
                MmInput {
                    x: xv,
                    c: Some(cv),
                    past: None,
                    cached_ref: None,
                    bias: &bias,
                },
            )?;
            let wx = ctx.g.constant(px.clone());
            let wc = ctx.g.constant(pc.clone());
            let a = ctx.g.mul(out.x, wx)?;
            let b = ctx.g.mul(out.c.expect("reference rows"), wc)?;
            let a = ctx.g.sum(a)?;
            let b = ctx.g.sum(b)?;
            ctx.g.add(a, b)
        },
        1e-5,
        1,
    )
    .map_err(|e: echogen::numerics::NumericsError| e.to_string())?;
    Ok(r.max_rel_error)
}

fn model_grad_error(seed: u64) -> Result<f64, String> {
    let spec = ModelSpec::new(
        tiny_config(8, 1, seed),
        ScaleSchedule::new(vec![(1, 1), (2, 2)]).map_err(|e| e.to_string())?,
        2,
        16,
    )
    .map_err(|e| e.to_string())?;
    let mut model = EchoGen::<f32>::new(spec.clone()).map_err(|e| e.to_string())?;
    randomize(&mut model.store, seed, |n, _| {
        n.ends_with("beta_s") || n.ends_with("beta_c")
    });
    for b in &model.params.blocks {
        model
            .store
            .set(b.beta_s, Tensor::full(&[1, 1], -0.5))
            .map_err(|e| e.to_string())?;
        model
            .store
            .set(b.beta_c, Tensor::full(&[1, 1], 0.3))
            .map_err(|e| e.to_string())?;
    }
    let model = model.cast::<f64>();
    let mut rng = Rng::named(seed, "model-gc");
    let cond = full_inputs(&spec, &mut rng);
    let q = ResidualQuantizer::with_unit_gains(spec.schedule.clone(), 2);
    let inputs =
        scale_inputs(&q, &random_tokens(&spec.schedule, 2, &mut rng)).map_err(|e| e.to_string())?;
    let probe = Tensor::from_fn(&[5, 2], |_| rng.normal());
    let r = grad_check_params(
        &model.store,
        |ctx| {
            let l = model.forward_graph(ctx, &cond, &inputs)?;
            let w = ctx.g.constant(probe.clone());
            let y = ctx.g.mul(l, w)?;
            Ok::<_, echogen::model::ModelError>(ctx.g.sum(y)?)
        },
        1e-5,
        3,
    )
    .map_err(|e| e.to_string())?;
    Ok(r.max_rel_error)
}

/// Float64 finite-difference checks of every differentiable op, one attention block and the full model.
pub fn gradients(seeds: u64, tolerance: f64) -> Check {
    timed("gradients", || {
        let (mut ops, mut block, mut model) = (0.0f64, 0.0f64, 0.0f64);
        let mut worst_op = "";
        for seed in 0..seeds {
            for (name, err) in op_suite(seed).map_err(|e| e.to_string())? {
                if err > ops {
                    ops = err;
                    worst_op = name;
                }
            }
            block = block.max(block_grad_error(seed)?);
            model = model.max(model_grad_error(seed)?);
        }
        let worst = ops.max(block).max(model);
        Ok((
            worst < tolerance,
            format!("{seeds} seeds, max relative error ops {ops:.2e} ({worst_op}) block {block:.2e} model {model:.2e}"),
        ))
    })
}

/// Nearest sign pattern to `v / |v|` by enumerating all `2^d` candidates; ties go to the first in `+1`-first order.
pub fn exhaustive_code(v: &[f32]) -> Vec<i8> {
    let d = v.len();
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let unit: Vec<f64> = v
        .iter()
        .map(|x| if n > 0.0 { *x as f64 / n } else { 0.0 })
        .collect();
    let s = 1.0 / (d as f64).sqrt();
    let mut best = (f64::INFINITY, Vec::new());
    for m in 0..(1u32 << d) {
        let code: Vec<i8> = (0..d)
            .map(|i| if m >> i & 1 == 1 { -1 } else { 1 })
            .collect();
        let dist: f64 = code
            .iter()
            .zip(&unit)
            .map(|(c, u)| (*c as f64 * s - u).powi(2))
            .sum();
        if dist < best.0 - 1e-12 {
            best = (dist, code);
        }
    }
    best.1
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Residual error non-increasing across scales on `latents` Gaussian latents, plus
/// the single-vector quantizer against exhaustive search for every `d <= 8`.
pub fn quantizer(latents: usize, seed: u64) -> Check {
    timed("quantizer", || {
        let sched = ScaleSchedule::doubling(16, 16);
        let mut q = ResidualQuantizer::with_unit_gains(sched, 16);
        let mut rng = Rng::named(seed, "quantizer");
        let normal = |rng: &mut Rng| {
            LatentGrid::new(
                16,
                16,
                16,
                (0..16 * 16 * 16).map(|_| rng.normal() as f32).collect(),
            )
            .expect("sized grid")
        };
        let calib: Vec<LatentGrid> = (0..latents).map(|_| normal(&mut rng)).collect();
        q.calibrate(&calib).map_err(|e| e.to_string())?;
        let mut increases = 0;
        for _ in 0..latents {
            let f = normal(&mut rng);
            let enc = q.encode(&f).map_err(|e| e.to_string())?;
            let errs: Vec<f64> = enc.partials.iter().map(|p| l2(&f.data, &p.data)).collect();
            if errs.windows(2).any(|w| w[1] > w[0]) {
                increases += 1;
            }
        }
        let mut mismatches = 0;
        let mut vectors = 0;
        for d in 1..=8 {
            for _ in 0..200 {
                let v: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
                vectors += 1;
                if bsq_quantize(&v).0 != exhaustive_code(&v) {
                    mismatches += 1;
                }
            }
        }
        Ok((
            increases == 0 && mismatches == 0,
            format!("{latents} latents, {increases} with an error increase; {vectors} vectors, {mismatches} codes off the exhaustive optimum"),
        ))
    })
}

fn random_image(rng: &mut Rng) -> Image {
    Image::new(
        IMAGE,
        IMAGE,
        (0..IMAGE * IMAGE * 3)
            .map(|_| rng.uniform() as f32)
            .collect(),
    )
    .expect("sized image")
}

/// Cached incremental logits against full recomputation over `requests` random-model requests.
pub fn cache(requests: usize, seed: u64, tolerance: f64) -> Check {
    timed("kv-cache", || {
        let tok = tiny_tokenizer();
        let mut worst = 0.0f64;
        for i in 0..requests as u64 {
            let model = random_model(seed * 1000 + i);
            let mut rng = Rng::named(seed, "cache").child("request", i);
            let with_ref = i % 2 == 0;
            let img = with_ref.then(|| random_image(&mut rng));
            let mut r = SampleRequest::new("a red circle on blue", img, seed + i);
            r.decoding = Decoding::Temperature(1.0);
            if !with_ref {
                r.scales = GuidanceScales::new(3.0, 0.0).map_err(|e| e.to_string())?;
            }
            worst =
                worst.max(cache_equivalence_check(&r, &model, &tok).map_err(|e| e.to_string())?);
        }
        Ok((
            worst < tolerance,
            format!("{requests} requests, max divergence {worst:.2e}"),
        ))
    })
}

/// Every check at its full size.
pub fn run_all() -> Vec<Check> {
    vec![
        cfg_algebra(100, 0),
        leakage(50, 0),
        causality(20, 0),
        gradients(20, 1e-4),
        quantizer(100, 0),
        cache(10, 0, 1e-5),
    ]
}
