mod common;

use common::*;
use echogen::conditioning::{extract_reference, ConditionInputs};
use echogen::model::{param_partition, EchoGen, Phase};
use echogen::numerics::{Rng, Tensor};
use echogen::params::{Ctx, ParamGroup};
use echogen::tokenizer::{LatentGrid, ScaleSchedule, Tokenizer};
use echogen::training::{
    bitwise_self_correction, condition_dropout, first_clause, scale_weighted_bce, train,
    truncate_prompt, DropDraw, TrainConfig, TrainError, TrainSample, TrainState,
};
use proptest::prelude::*;

const PROMPT: &str = "a small red circle on blue ; center ; 0";

fn random_latent(rng: &mut Rng) -> LatentGrid {
    LatentGrid::new(
        4,
        4,
        BITS,
        (0..4 * 4 * BITS).map(|_| rng.normal() as f32).collect(),
    )
    .unwrap()
}

fn samples(tok: &Tokenizer, model: &EchoGen<f32>, n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = Rng::named(seed, "samples");
    (0..n)
        .map(|_| {
            let latent = random_latent(&mut rng);
            let tokens = tok.quantizer.encode(&latent).unwrap().tokens;
            let reference =
                extract_reference(&random_image(&mut rng), tok, &model.spec.condition_shape())
                    .unwrap();
            TrainSample {
                prompt: PROMPT.into(),
                latent,
                tokens,
                reference,
            }
        })
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch: 2,
        lr_base: 1e-3,
        lr_mm: 1e-4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_logits_cost_ln2_per_scale() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let model = EchoGen::<f32>::new(tiny_spec(sched.clone())).unwrap();
    let mut rng = Rng::named(0, "t");
    let tokens = tok
        .quantizer
        .encode(&random_latent(&mut rng))
        .unwrap()
        .tokens;
    let mut ctx = Ctx::inference(&model.store);
    let logits = ctx
        .g
        .constant(Tensor::<f32>::zeros(&[sched.total_tokens(), BITS]));
    let (total, per) = scale_weighted_bce(&mut ctx, logits, &tokens, &sched).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((ctx.g.value(total).item() as f64 - ln2).abs() < 1e-6);
    for v in per {
        assert!((ctx.g.value(v).item() as f64 - ln2).abs() < 1e-6);
    }
}

#[test]
fn two_scale_loss_is_the_mean_of_scale_losses() {
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
    let tok = tiny_tokenizer(ScaleSchedule::new(vec![(1, 1), (4, 4)]).unwrap());
    let mut rng = Rng::named(1, "t");
    let mut tokens = tok
        .quantizer
        .encode(&random_latent(&mut rng))
        .unwrap()
        .tokens;
    tokens.maps[1] = echogen::tokenizer::BitTokenMap {
        h: 2,
        w: 2,
        d_bits: BITS,
        bits: tokens.maps[1].bits[..4 * BITS].to_vec(),
    };
    let store = echogen::params::ParamStore::<f64>::new();
    let mut ctx = Ctx::inference(&store);
    let logits = ctx
        .g
        .constant(Tensor::<f64>::from_fn(&[5, BITS], |_| rng.normal()));
    let (total, per) = scale_weighted_bce(&mut ctx, logits, &tokens, &sched).unwrap();
    let (a, b) = (ctx.g.value(per[0]).item(), ctx.g.value(per[1]).item());
    assert!((ctx.g.value(total).item() - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn loss_rejects_wrong_row_count() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let tokens = tok
        .quantizer
        .encode(&random_latent(&mut Rng::named(2, "t")))
        .unwrap()
        .tokens;
    let store = echogen::params::ParamStore::<f32>::new();
    let mut ctx = Ctx::inference(&store);
    let logits = ctx.g.constant(Tensor::<f32>::zeros(&[20, BITS]));
    assert!(scale_weighted_bce(&mut ctx, logits, &tokens, &sched).is_err());
}

#[test]
fn dropout_rates_are_binomial() {
    let mut rng = Rng::named(3, "drop");
    let n = 100_000;
    let (mut text, mut image, mut both) = (0, 0, 0);
    for _ in 0..n {
        let d = DropDraw::sample(0.1, 0.1, &mut rng);
        text += d.text as usize;
        image += d.image as usize;
        both += (d.text && d.image) as usize;
    }
    let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
    for c in [text, image] {
        let r = c as f64 / n as f64;
        assert!((r - 0.1).abs() <= 3.0 * sigma, "{r}");
    }
    let r = both as f64 / n as f64;
    assert!(
        (r - 0.01).abs() <= 3.0 * (0.01f64 * 0.99 / n as f64).sqrt(),
        "{r}"
    );
}

#[test]
fn image_group_drops_jointly() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let model = EchoGen::<f32>::new(tiny_spec(sched)).unwrap();
    let s = &samples(&tok, &model, 1, 4)[0];
    let inputs = ConditionInputs {
        text: Some(vec![1, 2]),
        ..ConditionInputs::default()
    }
    .with_reference(&s.reference);
    let out = DropDraw {
        text: false,
        image: true,
    }
    .apply(&inputs);
    assert_eq!(out, inputs.text_only());
    let out = DropDraw {
        text: true,
        image: false,
    }
    .apply(&inputs);
    assert!(
        out.text.is_none()
            && out.semantic.is_some()
            && out.global.is_some()
            && out.content.is_some()
    );
    let (kept, d) = condition_dropout(&inputs, 0.0, 0.0, &mut Rng::named(0, "d"));
    assert_eq!(kept, inputs);
    assert_eq!(
        d,
        DropDraw {
            text: false,
            image: false
        }
    );
}

#[test]
fn truncation_rate_is_binomial() {
    let mut rng = Rng::named(5, "trunc");
    let n = 100_000;
    let short = (0..n)
        .filter(|_| truncate_prompt(PROMPT, 0.5, &mut rng) != PROMPT)
        .count();
    let r = short as f64 / n as f64;
    assert!((r - 0.5).abs() <= 3.0 * (0.25f64 / n as f64).sqrt(), "{r}");
    assert_eq!(first_clause(PROMPT), "a small red circle on blue");
}

#[test]
fn self_correction_off_is_plain_encoding() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched);
    let latent = random_latent(&mut Rng::named(6, "l"));
    let enc = tok.quantizer.encode(&latent).unwrap().tokens;
    let c = bitwise_self_correction(&tok.quantizer, &latent, 0.0, 0.1, &mut Rng::named(0, "f"));
    assert_eq!(c.inputs, enc);
    assert_eq!(c.targets, enc);
    assert!(c.flipped.is_empty());
}

#[test]
fn full_flip_requantizes_later_targets() {
    let sched = ScaleSchedule::new(vec![(1, 1), (4, 4)]).unwrap();
    let tok = tiny_tokenizer(sched);
    let q = &tok.quantizer;
    let latent = random_latent(&mut Rng::named(7, "l"));
    let c = bitwise_self_correction(q, &latent, 1.0, 1.0, &mut Rng::named(0, "f"));
    let enc = q.encode(&latent).unwrap().tokens;
    assert_eq!(c.targets.maps[0], enc.maps[0]);
    let flipped: Vec<i8> = enc.maps[0].bits.iter().map(|b| -b).collect();
    assert_eq!(c.inputs.maps[0].bits, flipped);
    assert_eq!(c.flipped, vec![0]);
    // The first scale of a unit-gain cascade is a 1x1 sign code spread over the whole grid.
    let mut acc = vec![0.0f32; latent.data.len()];
    for (i, a) in acc.iter_mut().enumerate() {
        *a = flipped[i % BITS] as f32 / (BITS as f32).sqrt();
    }
    let want = q.quantize_scale(&latent, &acc, 1);
    assert_eq!(c.targets.maps[1], want);
    assert_eq!(c.inputs.maps[1], want);
    assert_ne!(want, enc.maps[1]);
}

#[test]
fn phase_b_requires_phase_a() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let mut model = EchoGen::<f32>::new(tiny_spec(sched)).unwrap();
    let data = samples(&tok, &model, 2, 8);
    let mut state = TrainState::new(Phase::B, false, model.store.len(), 0);
    let r = train(
        &mut model,
        &tok.quantizer,
        &mut state,
        &data,
        &small_cfg(),
        1,
        |_| {},
    );
    assert!(matches!(r, Err(TrainError::MissingPhaseA)));
}

#[test]
fn phase_b_leaves_backbone_untouched() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let mut model = random_model(sched, 9);
    let before = model.store.clone();
    let data = samples(&tok, &model, 3, 9);
    let mut state = TrainState::new(Phase::B, true, model.store.len(), 0);
    train(
        &mut model,
        &tok.quantizer,
        &mut state,
        &data,
        &small_cfg(),
        20,
        |_| {},
    )
    .unwrap();
    let part = param_partition(&model.store);
    let mut moved = 0;
    for id in model.store.ids() {
        let name = model.store.name(id);
        let same = model
            .store
            .get(id)
            .data()
            .iter()
            .zip(before.get(id).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if part.frozen.contains(name) {
            assert!(same, "{name} changed");
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn learning_rates_follow_phase_groups() {
    let cfg = TrainConfig::default();
    assert_eq!(
        cfg.lr(Phase::A, ParamGroup::Backbone),
        Some(cfg.lr_pretrain)
    );
    assert_eq!(cfg.lr(Phase::A, ParamGroup::Subject), None);
    assert_eq!(cfg.lr(Phase::B, ParamGroup::Backbone), None);
    assert_eq!(cfg.lr(Phase::B, ParamGroup::Subject), Some(3e-5));
    assert_eq!(cfg.lr(Phase::B, ParamGroup::Content), Some(3e-6));
}

#[test]
fn training_resumes_bit_exactly() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let mut a = random_model(sched, 10);
    let data = samples(&tok, &a, 5, 10);
    let cfg = small_cfg();
    let mut sa = TrainState::new(Phase::B, true, a.store.len(), 4);
    train(&mut a, &tok.quantizer, &mut sa, &data, &cfg, 3, |_| {}).unwrap();
    let mut b = a.clone();
    let json = serde_json::to_string(&sa).unwrap();
    let mut sb: TrainState = serde_json::from_str(&json).unwrap();
    train(&mut a, &tok.quantizer, &mut sa, &data, &cfg, 3, |_| {}).unwrap();
    train(&mut b, &tok.quantizer, &mut sb, &data, &cfg, 3, |_| {}).unwrap();
    assert_eq!(sa, sb);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id).data(), b.store.get(id).data());
    }
}

#[test]
fn pretraining_loss_decreases() {
    let sched = tiny_schedule();
    let tok = tiny_tokenizer(sched.clone());
    let mut wins = 0;
    for seed in 0..10 {
        let mut model = EchoGen::<f32>::new(tiny_spec(sched.clone())).unwrap();
        let data = samples(&tok, &model, 4, 100 + seed);
        let cfg = TrainConfig {
            batch: 4,
            seed,
            flip_ratio: 0.0,
            p_text: 0.0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(Phase::A, false, model.store.len(), seed);
        train(
            &mut model,
            &tok.quantizer,
            &mut state,
            &data,
            &cfg,
            30,
            |_| {},
        )
        .unwrap();
        let h = &state.loss_history;
        let head: f64 = h[..5].iter().sum();
        let tail: f64 = h[h.len() - 5..].iter().sum();
        wins += (tail < head) as usize;
    }
    assert!(wins >= 9, "{wins}/10");
}

proptest! {
    #[test]
    fn first_clause_is_idempotent(words in proptest::collection::vec("[a-z]{1,6}", 1..6), cut in 0usize..6) {
        let mut parts = words.clone();
        if cut < parts.len() {
            parts.insert(cut, ";".into());
        }
        let p = parts.join(" ");
        let once = first_clause(&p);
        prop_assert_eq!(first_clause(&once), once.clone());
        prop_assert!(!once.contains(';'));
    }

    #[test]
    fn flips_touch_only_corrupted_scales(seed in 0u64..1000, ratio in 0.0f64..1.0) {
        let sched = tiny_schedule();
        let tok = tiny_tokenizer(sched);
        let latent = random_latent(&mut Rng::named(seed, "l"));
        let c = bitwise_self_correction(&tok.quantizer, &latent, ratio, 0.25, &mut Rng::named(seed, "f"));
        for (k, (i, t)) in c.inputs.maps.iter().zip(&c.targets.maps).enumerate() {
            let diff = i.bits.iter().zip(&t.bits).filter(|(a, b)| a != b).count();
            if c.flipped.contains(&k) {
                prop_assert_eq!(diff, ((0.25 * t.bits.len() as f64).round() as usize).max(1));
            } else {
                prop_assert_eq!(diff, 0);
            }
        }
        prop_assert!(!c.flipped.contains(&2));
    }
}
