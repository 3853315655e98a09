mod common;

use common::randomize;
use echogen::conditioning::{cosine, extract_semantic_features};
use echogen::data::{
    render_reference, render_scene, Color, DataConfig, Dataset, IdentityKey, Position, Rotation,
    SceneSpec, Shape, Size, SubjectSpec, Texture,
};
use echogen::evaluation::{
    max_occupancy_window, ranks, run_benchmark, spearman, subject_fidelity, text_alignment,
    Ablation, BenchmarkPair, BenchmarkSet, EvalError, EvalProtocol,
};
use echogen::model::{EchoGen, ModelConfig, ModelSpec};
use echogen::numerics::Rng;
use echogen::raster::{Image, Mask, WHITE};
use echogen::sampling::GuidanceScales;
use echogen::tokenizer::{AeShape, Autoencoder, ResidualQuantizer, ScaleSchedule, Tokenizer};
use proptest::prelude::*;

fn subject(shape: Shape, base: Color, texture: Texture, accent: Color) -> SubjectSpec {
    SubjectSpec {
        shape,
        base,
        texture,
        accent,
        size: Size::Medium,
        seed: 1,
    }
}

fn scene(background: Color) -> SceneSpec {
    SceneSpec {
        background,
        position: Position::TopRight,
        rotation: Rotation::R0,
        distractors: Vec::new(),
    }
}

#[test]
fn fidelity_of_a_reference_with_itself_is_one() {
    let mut rng = Rng::named(0, "refs");
    let keys = IdentityKey::all();
    for _ in 0..50 {
        let s =
            SubjectSpec::from_identity(*rng.choose(&keys), *rng.choose(Size::ALL), rng.next_seed());
        let r = render_reference(&s).0;
        let f = subject_fidelity(&r, &r).unwrap();
        assert!((f - 1.0).abs() < 1e-9, "{}: {f}", s.identity().label());
    }
}

#[test]
fn blank_generation_scores_zero() {
    let r = render_reference(&subject(
        Shape::Star,
        Color::Red,
        Texture::Solid,
        Color::Red,
    ))
    .0;
    assert_eq!(
        subject_fidelity(&Image::filled(64, 64, WHITE), &r).unwrap(),
        0.0
    );
    assert!(subject_fidelity(&Image::filled(32, 32, WHITE), &r).is_err());
}

#[test]
fn other_identities_score_below_the_same_identity() {
    let striped = subject(Shape::Square, Color::Red, Texture::Stripes, Color::Yellow);
    let dotted = subject(Shape::Circle, Color::Blue, Texture::Dots, Color::Black);
    let r = render_reference(&striped).0;
    let same = render_scene(&striped, &scene(Color::Green));
    let other = render_scene(&dotted, &scene(Color::Green));
    let (fs, fo) = (
        subject_fidelity(&same, &r).unwrap(),
        subject_fidelity(&other, &r).unwrap(),
    );
    // Oracle: the subject alone on white has the reference's descriptor up to placement.
    let want = extract_semantic_features(&r, 64).unwrap().global;
    let alone = render_reference(&dotted).0;
    let oracle = cosine(
        &want,
        &extract_semantic_features(&alone, 64).unwrap().global,
    );
    assert!(fo < fs, "{fo} vs {fs}");
    assert!((fo - oracle).abs() < 1e-6, "{fo} vs {oracle}");
    assert!((fs - 1.0).abs() < 1e-6);
}

#[test]
fn every_target_satisfies_its_own_prompt() {
    let ds = Dataset::generate(&DataConfig {
        n: 1000,
        seed: 4,
        ..DataConfig::default()
    })
    .unwrap();
    for t in ds.train.iter().chain(&ds.test) {
        let s = echogen::evaluation::score_attributes(&t.target, t.prompt()).unwrap();
        assert_eq!(s.accuracy(), 1.0, "{} {:?}", t.prompt(), s.observed);
    }
}

#[test]
fn wrong_background_costs_one_check() {
    let s = subject(
        Shape::Triangle,
        Color::Purple,
        Texture::Checker,
        Color::Yellow,
    );
    let img = render_scene(&s, &scene(Color::Cyan));
    let p = "a medium purple checkered triangle with yellow accents on a green background ; top-right ; rotated 0";
    assert!(text_alignment(&img, p).unwrap() <= 2.0 / 3.0);
    let ok = p.replace("green", "cyan");
    assert_eq!(text_alignment(&img, &ok).unwrap(), 1.0);
    assert!(matches!(
        text_alignment(&img, "a purple blorp"),
        Err(EvalError::Parse(_))
    ));
}

#[test]
fn noise_images_score_at_chance() {
    let ds = Dataset::generate(&DataConfig {
        n: 1000,
        seed: 5,
        ..DataConfig::default()
    })
    .unwrap();
    let mut rng = Rng::named(6, "noise");
    let mut total = 0.0;
    for t in ds.train.iter().chain(&ds.test) {
        let noise = Image::new(
            64,
            64,
            (0..64 * 64 * 3).map(|_| rng.uniform() as f32).collect(),
        )
        .unwrap();
        total += text_alignment(&noise, t.prompt()).unwrap();
    }
    let chance = total / 1000.0;
    assert!((chance - NOISE_BASELINE).abs() < 1e-9, "{chance}");
}

/// Measured mean accuracy of uniform-noise images against dataset prompts.
const NOISE_BASELINE: f64 = 0.224;

#[test]
fn spearman_examples() {
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]),
        1.0
    );
    assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    assert_eq!(
        ranks(&[5.0, 6.0, 7.0, 8.0, 7.0]),
        vec![1.0, 2.0, 3.5, 5.0, 3.5]
    );
    // Pearson on ranks [1..5] vs [1, 2, 3.5, 5, 3.5]: 8 / sqrt(10 * 9.5).
    let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]);
    assert!((r - 8.0 / 95f64.sqrt()).abs() < 1e-12);
}

fn brute_window(mask: &Mask, side: usize) -> usize {
    let mut best = 0;
    for y in 0..=mask.h - side {
        for x in 0..=mask.w - side {
            let c = (0..side)
                .flat_map(|dy| (0..side).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| mask.get(y + dy, x + dx))
                .count();
            best = best.max(c);
        }
    }
    best
}

proptest! {
    #[test]
    fn window_finds_the_densest_block(bits in proptest::collection::vec(any::<bool>(), 144), side in 1usize..12) {
        let mask = Mask { h: 12, w: 12, data: bits };
        let (y, x) = max_occupancy_window(&mask, side);
        let c = (0..side).flat_map(|dy| (0..side).map(move |dx| (dy, dx))).filter(|&(dy, dx)| mask.get(y + dy, x + dx)).count();
        prop_assert_eq!(c, brute_window(&mask, side));
    }

    #[test]
    fn spearman_ignores_monotone_maps(v in proptest::collection::vec(-10.0f64..10.0, 2..20)) {
        let x: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let y: Vec<f64> = v.iter().map(|a| a.exp()).collect();
        prop_assert!((spearman(&x, &v) - spearman(&x, &y)).abs() < 1e-12);
    }
}

fn model64() -> (EchoGen<f32>, Tokenizer) {
    let sched = ScaleSchedule::doubling(16, 16);
    let cfg = ModelConfig {
        d_model: 16,
        blocks: 1,
        heads: 2,
        ffn_mult: 2,
        content_grid: 8,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut m = EchoGen::<f32>::new(ModelSpec::new(cfg, sched.clone(), 4, 64).unwrap()).unwrap();
    randomize(&mut m.store, 2, |_, _| false);
    let shape = AeShape {
        image_size: 64,
        downsample: 4,
        hidden: 4,
        latent_channels: 4,
    };
    let tok = Tokenizer {
        ae: Autoencoder::new(shape, 1).unwrap(),
        quantizer: ResidualQuantizer::with_unit_gains(sched, 4),
    };
    (m, tok)
}

#[test]
fn default_protocol_yields_400_images() {
    let (m, tok) = model64();
    let p = EvalProtocol::default();
    let set = BenchmarkSet::held_out(&p, &DataConfig::default()).unwrap();
    assert_eq!(set.pairs.len(), 100);
    let r = run_benchmark(&m, &tok, &set, &p, p.scales, Ablation::Full).unwrap();
    assert_eq!(r.samples, 400);
    assert!((-1.0..=1.0).contains(&r.fidelity) && (0.0..=1.0).contains(&r.alignment));
    assert_eq!(r.to_csv().unwrap().lines().count(), 401);
}

#[test]
fn benchmark_is_reproducible_and_ablations_share_seeds() {
    let (m, tok) = model64();
    let p = EvalProtocol {
        subjects: 2,
        prompts_per_subject: 2,
        ..EvalProtocol::default()
    };
    let set = BenchmarkSet::held_out(&p, &DataConfig::default()).unwrap();
    let a = run_benchmark(&m, &tok, &set, &p, p.scales, Ablation::NoContent).unwrap();
    let b = run_benchmark(&m, &tok, &set, &p, p.scales, Ablation::NoContent).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    let full = run_benchmark(&m, &tok, &set, &p, p.scales, Ablation::Full).unwrap();
    assert_eq!(
        full.pairs.iter().map(|p| p.seed).collect::<Vec<_>>(),
        a.pairs.iter().map(|p| p.seed).collect::<Vec<_>>()
    );
    assert_ne!(full.config_hash, a.config_hash);
}

#[test]
fn benchmark_rejects_training_subjects() {
    let data = DataConfig::default();
    let (train, _) = echogen::data::identity_split(data.seed, data.train_ratio);
    let s = SubjectSpec::from_identity(train[0], Size::Small, 0);
    let pair = BenchmarkPair::new(s, &scene(Color::Green), &scene(Color::Green));
    assert!(matches!(
        BenchmarkSet::custom(vec![pair], &data),
        Err(EvalError::TrainingSubject(_))
    ));
    let bad = EvalProtocol {
        images_per_pair: 3,
        ..EvalProtocol::default()
    };
    assert!(BenchmarkSet::held_out(&bad, &data).is_err());
}

#[test]
fn sweep_grid_has_one_row_per_point() {
    let (m, tok) = model64();
    let p = EvalProtocol {
        subjects: 1,
        prompts_per_subject: 1,
        ..EvalProtocol::default()
    };
    let set = BenchmarkSet::held_out(&p, &DataConfig::default()).unwrap();
    let grid = [0.0, 1.0, 2.0, 3.0];
    let t = echogen::evaluation::cfg_sweep(&m, &tok, &set, &p, &grid, &grid).unwrap();
    assert_eq!(t.rows.len(), 16);
    assert_eq!(
        t.to_csv().unwrap().lines().next().unwrap(),
        "text,image,fidelity,alignment"
    );
    let trend = t.along_image(3.0);
    assert!((-1.0..=1.0).contains(&trend.fidelity));
    assert_eq!(
        GuidanceScales::new(t.rows[5].text, t.rows[5].image).unwrap(),
        GuidanceScales {
            text: 1.0,
            image: 1.0
        }
    );
}
