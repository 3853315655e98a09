use echogen::conditioning::{ConditionInputs, Descriptor, DESC_DIM};
use echogen::model::{
    adaln_modulation, build_mask, cross_attention, mm_attention, modulate, param_partition,
    scale_inputs, BlockParams, CrossKv, EchoGen, MmInput, ModelConfig, ModelSpec, SequenceLayout,
};
use echogen::numerics::{grad_check_multi, Rng, Tensor, MASK_NEG};
use echogen::params::{grad_check_params, Ctx, ParamGroup, ParamStore};
use echogen::tokenizer::{
    BitTokenMap, LatentGrid, MultiScaleTokens, ResidualQuantizer, ScaleSchedule,
};

fn tiny_config(d: usize, blocks: usize, heads: usize, grid: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        blocks,
        heads,
        ffn_mult: 2,
        content_grid: grid,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn tiny_spec(image: usize) -> ModelSpec {
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
    ModelSpec::new(tiny_config(16, 2, 2, 2), sched, 4, image).unwrap()
}

/// Replaces every parameter for which `keep` is false with Gaussian noise.
fn randomize(store: &mut ParamStore<f32>, seed: u64, keep: impl Fn(&str, ParamGroup) -> bool) {
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
    .unwrap();
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

#[test]
fn mask_matches_hand_written_fixture() {
    let layout = SequenceLayout::new(ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap(), 3);
    assert_eq!(layout.generated_len(), 7);
    let m = build_mask(&layout);
    // rows/cols: C S | s1 | s2 s2 s2 s2 | r r r
    let fixture = [
        "1100000000",
        "1100000000",
        "1110000111",
        "1111111111",
        "1111111111",
        "1111111111",
        "1111111111",
        "0000000111",
        "0000000111",
        "0000000111",
    ];
    for (r, row) in fixture.iter().enumerate() {
        for (c, ch) in row.chars().enumerate() {
            assert_eq!(m.get(r, c), ch == '1', "row {r} col {c}");
        }
    }
    assert_eq!(m.row_count(4), 10);
}

#[test]
fn mask_without_reference_is_block_causal() {
    let layout = SequenceLayout::new(ScaleSchedule::doubling(4, 4), 0);
    let m = build_mask(&layout);
    for r in 0..m.n {
        for c in 0..m.n {
            let want = match (layout.slot(r), layout.slot(c)) {
                (echogen::model::Slot::Prefix, s) => s == echogen::model::Slot::Prefix,
                (echogen::model::Slot::Scale(k), echogen::model::Slot::Scale(j)) => j <= k,
                (echogen::model::Slot::Scale(_), _) => true,
                _ => unreachable!(),
            };
            assert_eq!(m.get(r, c), want);
        }
    }
}

#[test]
fn reference_rows_see_no_generated_columns() {
    let layout = SequenceLayout::new(ScaleSchedule::doubling(4, 4), 5);
    let m = build_mask(&layout);
    for r in layout.reference() {
        for c in 0..layout.generated_len() {
            assert!(!m.get(r, c));
        }
        assert_eq!(m.row_count(r), 5);
    }
}

fn block_store(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, BlockParams) {
    let mut store = ParamStore::<f32>::new();
    let cfg = tiny_config(d, 1, heads, 2);
    let mut rng = Rng::named(seed, "block");
    let p = BlockParams::register(&mut store, "b", &cfg, &mut rng);
    randomize(&mut store, seed, |_, _| false);
    (store.cast(), p)
}

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[r, c], |_| rng.normal())
}

fn dense(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|j| b.data()[j] + (0..x.cols()).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn col(m: &[Vec<f64>], lo: usize, hi: usize) -> Vec<Vec<f64>> {
    m.iter().map(|r| r[lo..hi].to_vec()).collect()
}

#[test]
fn mm_attention_matches_dense_oracle() {
    let d = 4;
    let (store, p) = block_store(d, 1, 11);
    let mut rng = Rng::named(1, "mm");
    let x = rand_t(&mut rng, 2, d);
    let c = rand_t(&mut rng, 1, d);
    // rows: g0 g1 | r ; cols same
    let bias = Tensor::from_fn(&[3, 3], |i| {
        if i / 3 == 2 && i % 3 < 2 {
            MASK_NEG
        } else {
            0.0
        }
    });
    let mut ctx = Ctx::inference(&store);
    let xv = ctx.g.constant(x.clone());
    let cv = ctx.g.constant(c.clone());
    let out = mm_attention(
        &mut ctx,
        &p,
        MmInput {
            x: xv,
            c: Some(cv),
            past: None,
            cached_ref: None,
            bias: &bias,
        },
    )
    .unwrap();
    let got_x = ctx.g.value(out.x).clone();
    let got_c = ctx.g.value(out.c.unwrap()).clone();

    let g = |id| store.get(id).clone();
    let qkv = dense(&x, &g(p.qkv.w), &g(p.qkv.b));
    let (q, k, v) = (
        col(&qkv, 0, d),
        col(&qkv, d, 2 * d),
        col(&qkv, 2 * d, 3 * d),
    );
    let qc = dense(&c, &g(p.q_c.w), &g(p.q_c.b));
    let kc = dense(&c, &g(p.k_c.w), &g(p.k_c.b));
    let vc = dense(&c, &g(p.v_c.w), &g(p.v_c.b));
    let beta = store.get(p.beta_c).item();
    let queries = [q[0].clone(), q[1].clone(), qc[0].clone()];
    let keys = [k[0].clone(), k[1].clone(), kc[0].clone()];
    let vals = [v[0].clone(), v[1].clone(), vc[0].clone()];
    let mut o = Vec::new();
    for (i, qi) in queries.iter().enumerate() {
        let logits: Vec<f64> = keys
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                s + bias.at(i, j) + if i < 2 && j == 2 { beta } else { 0.0 }
            })
            .collect();
        let pr = softmax(&logits);
        o.push(
            (0..d)
                .map(|t| (0..3).map(|j| pr[j] * vals[j][t]).sum::<f64>())
                .collect::<Vec<_>>(),
        );
    }
    let ot = Tensor::from_fn(&[3, d], |i| o[i / d][i % d]);
    let want = dense(&ot, &g(p.proj.w), &g(p.proj.b));
    for i in 0..2 {
        for t in 0..d {
            assert!((got_x.at(i, t) - want[i][t]).abs() < 1e-6);
        }
    }
    for t in 0..d {
        assert!((got_c.at(0, t) - want[2][t]).abs() < 1e-6);
    }
}

#[test]
fn content_output_ignores_generated_rows_bit_exactly() {
    let d = 8;
    let (store, p) = block_store(d, 2, 5);
    let store: ParamStore<f32> = store.cast();
    let mut rng = Rng::named(2, "leak");
    let c = Tensor::from_fn(&[3, d], |_| rng.normal() as f32);
    let bias_layout = SequenceLayout::new(ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap(), 3);
    let mask = build_mask(&bias_layout);
    let rows: Vec<usize> = (0..10).collect();
    let bias = mask.bias::<f32>(&rows, &rows);
    let run = |x: Tensor<f32>| {
        let mut ctx = Ctx::inference(&store);
        let xv = ctx.g.constant(x);
        let cv = ctx.g.constant(c.clone());
        let out = mm_attention(
            &mut ctx,
            &p,
            MmInput {
                x: xv,
                c: Some(cv),
                past: None,
                cached_ref: None,
                bias: &bias,
            },
        )
        .unwrap();
        ctx.g.value(out.c.unwrap()).to_vec()
    };
    let base = run(Tensor::from_fn(&[7, d], |_| rng.normal() as f32));
    for _ in 0..20 {
        let scale = 10f64.powf(rng.uniform() * 6.0 - 3.0);
        let other = run(Tensor::from_fn(&[7, d], |_| (rng.normal() * scale) as f32));
        assert_eq!(base, other);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let d = 4;
    let (store, p) = block_store(d, 2, 9);
    let mut rng = Rng::named(3, "one");
    let x = rand_t(&mut rng, 1, d);
    let bias = Tensor::zeros(&[1, 1]);
    let mut ctx = Ctx::inference(&store);
    let xv = ctx.g.constant(x.clone());
    let out = mm_attention(
        &mut ctx,
        &p,
        MmInput {
            x: xv,
            c: None,
            past: None,
            cached_ref: None,
            bias: &bias,
        },
    )
    .unwrap();
    let g = |id| store.get(id).clone();
    let qkv = dense(&x, &g(p.qkv.w), &g(p.qkv.b));
    let v = Tensor::from_fn(&[1, d], |i| qkv[0][2 * d + i]);
    let want = dense(&v, &g(p.proj.w), &g(p.proj.b));
    for t in 0..d {
        assert!((ctx.g.value(out.x).at(0, t) - want[0][t]).abs() < 1e-12);
    }
}

fn cross_oracle(
    store: &ParamStore<f64>,
    p: &BlockParams,
    x: &Tensor<f64>,
    s: &Tensor<f64>,
    t: &Tensor<f64>,
) -> Vec<Vec<f64>> {
    let d = p.d_model;
    let g = |id| store.get(id).clone();
    let q = dense(x, &g(p.ca_q.w), &g(p.ca_q.b));
    let ks = dense(s, &g(p.ca_k_sem.w), &g(p.ca_k_sem.b));
    let vs = dense(s, &g(p.ca_v_sem.w), &g(p.ca_v_sem.b));
    let kvt = dense(t, &g(p.ca_kv_text.w), &g(p.ca_kv_text.b));
    let keys: Vec<Vec<f64>> = ks.iter().cloned().chain(col(&kvt, 0, d)).collect();
    let vals: Vec<Vec<f64>> = vs.iter().cloned().chain(col(&kvt, d, 2 * d)).collect();
    let beta = store.get(p.beta_s).item();
    let dh = d / p.heads;
    let mut o = vec![vec![0.0; d]; x.rows()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..p.heads {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = keys
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    let sc: f64 =
                        r.clone().map(|u| qi[u] * kj[u]).sum::<f64>() / (dh as f64).sqrt();
                    sc + if j < s.rows() {
                        beta - (s.rows() as f64).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            let pr = softmax(&logits);
            for u in r {
                o[i][u] = (0..keys.len()).map(|j| pr[j] * vals[j][u]).sum();
            }
        }
    }
    let ot = Tensor::from_fn(&[x.rows(), d], |i| o[i / d][i % d]);
    dense(&ot, &g(p.ca_out.w), &g(p.ca_out.b))
}

fn run_cross(
    store: &ParamStore<f64>,
    p: &BlockParams,
    x: &Tensor<f64>,
    s: Option<&Tensor<f64>>,
    t: &Tensor<f64>,
) -> Tensor<f64> {
    let mut ctx = Ctx::inference(store);
    let xv = ctx.g.constant(x.clone());
    let sv = s.map(|s| ctx.g.constant(s.clone()));
    let tv = ctx.g.constant(t.clone());
    let kv = CrossKv::build(&mut ctx, p, sv, Some(tv)).unwrap();
    let o = cross_attention(&mut ctx, p, xv, kv).unwrap();
    ctx.g.value(o).clone()
}

#[test]
fn cross_attention_matches_dense_oracle() {
    let d = 4;
    let (store, p) = block_store(d, 2, 21);
    let mut rng = Rng::named(4, "ca");
    let x = rand_t(&mut rng, 2, d);
    let s = rand_t(&mut rng, 3, d);
    let t = rand_t(&mut rng, 2, d);
    let got = run_cross(&store, &p, &x, Some(&s), &t);
    let want = cross_oracle(&store, &p, &x, &s, &t);
    for i in 0..2 {
        for u in 0..d {
            assert!((got.at(i, u) - want[i][u]).abs() < 1e-6);
        }
    }
}

#[test]
fn closed_semantic_gate_gives_text_only_attention() {
    let d = 4;
    let (mut store, p) = block_store(d, 2, 22);
    store.set(p.beta_s, Tensor::full(&[1, 1], -1e30)).unwrap();
    let mut rng = Rng::named(5, "ca");
    let x = rand_t(&mut rng, 3, d);
    let s = rand_t(&mut rng, 4, d);
    let t = rand_t(&mut rng, 2, d);
    let gated = run_cross(&store, &p, &x, Some(&s), &t);
    let text_only = run_cross(&store, &p, &x, None, &t);
    assert_eq!(gated.to_vec(), text_only.to_vec());
}

#[test]
fn equal_logits_average_semantic_and_text_values() {
    let d = 4;
    let (mut store, p) = block_store(d, 2, 23);
    store.set(p.ca_q.w, Tensor::zeros(&[d, d])).unwrap();
    store.set(p.ca_q.b, Tensor::zeros(&[d])).unwrap();
    store.set(p.beta_s, Tensor::zeros(&[1, 1])).unwrap();
    store
        .set(
            p.ca_out.w,
            Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
        )
        .unwrap();
    store.set(p.ca_out.b, Tensor::zeros(&[d])).unwrap();
    let mut rng = Rng::named(6, "ca");
    let x = rand_t(&mut rng, 1, d);
    let s = rand_t(&mut rng, 1, d);
    let t = rand_t(&mut rng, 1, d);
    let got = run_cross(&store, &p, &x, Some(&s), &t);
    let g = |id| store.get(id).clone();
    let vs = dense(&s, &g(p.ca_v_sem.w), &g(p.ca_v_sem.b));
    let vt = dense(&t, &g(p.ca_kv_text.w), &g(p.ca_kv_text.b));
    for u in 0..d {
        assert!((got.at(0, u) - (vs[0][u] + vt[0][d + u]) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn adaln_is_plain_layer_norm_at_init() {
    let spec = tiny_spec(16);
    let model = EchoGen::<f64>::new(spec).unwrap();
    let p = &model.params.blocks[0];
    let mut rng = Rng::named(7, "adaln");
    let mut ctx = Ctx::inference(&model.store);
    let cond = ctx.g.constant(rand_t(&mut rng, 1, 16));
    let x = ctx.g.constant(rand_t(&mut rng, 5, 16));
    let m = adaln_modulation(&mut ctx, &p.ada_hidden, &p.ada_out, cond, 6).unwrap();
    for &v in &m {
        assert!(ctx.g.value(v).data().iter().all(|&z| z == 0.0));
    }
    let y = modulate(&mut ctx, x, m[0], m[1]).unwrap();
    let ln = ctx.g.layer_norm_rows(x).unwrap();
    assert_eq!(ctx.g.value(y).to_vec(), ctx.g.value(ln).to_vec());
}

#[test]
fn adaln_modulation_is_linear_in_final_layer_input() {
    let (store, p) = block_store(8, 2, 31);
    let mut store = store;
    store.set(p.ada_out.b, Tensor::zeros(&[48])).unwrap();
    let mut rng = Rng::named(8, "lin");
    let h = rand_t(&mut rng, 1, 8);
    let run = |h: Tensor<f64>| {
        let mut ctx = Ctx::inference(&store);
        let hv = ctx.g.constant(h);
        let m = p.ada_out.apply(&mut ctx, hv).unwrap();
        ctx.g.value(m).to_vec()
    };
    let a = run(h.clone());
    let b = run(h.map(|v| 2.0 * v));
    for (x, y) in a.iter().zip(&b) {
        assert!((2.0 * x - y).abs() < 1e-12);
    }
}

#[test]
fn adaln_gradients_match_finite_differences() {
    let mut rng = Rng::named(9, "fd");
    let inputs = vec![
        rand_t(&mut rng, 3, 6),
        rand_t(&mut rng, 1, 6),
        rand_t(&mut rng, 1, 6),
    ];
    let probe = rand_t(&mut rng, 3, 6);
    let r = grad_check_multi(
        |g, v| {
            let n = g.layer_norm_rows(v[0])?;
            let s = g.offset(v[1], 1.0)?;
            let y = g.mul_row(n, s)?;
            let y = g.add_row(y, v[2])?;
            let w = g.constant(probe.clone());
            let y = g.mul(y, w)?;
            g.sum(y)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn logits_cover_every_scale_token() {
    let spec = ModelSpec::new(
        ModelConfig::default(),
        ScaleSchedule::doubling(16, 16),
        16,
        64,
    )
    .unwrap();
    let model = EchoGen::<f32>::new(spec.clone()).unwrap();
    let mut rng = Rng::named(10, "shape");
    let tokens = random_tokens(&spec.schedule, 16, &mut rng);
    let q = ResidualQuantizer::with_unit_gains(spec.schedule.clone(), 16);
    let inputs = scale_inputs(&q, &tokens).unwrap();
    let logits = model.forward(&ConditionInputs::null(), &inputs).unwrap();
    assert_eq!(logits.shape(), &[341, 16]);
    // zero-initialized head
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn logits_ignore_later_scales() {
    let spec = tiny_spec(64);
    let mut model = EchoGen::<f32>::new(spec.clone()).unwrap();
    randomize(&mut model.store, 12, |_, _| false);
    let mut rng = Rng::named(11, "causal");
    let q = ResidualQuantizer::new(spec.schedule.clone(), 4, vec![1.0, 0.5, 0.25]).unwrap();
    let cond = full_inputs(&spec, &mut rng);
    let tokens = random_tokens(&spec.schedule, 4, &mut rng);
    let base = model
        .forward(&cond, &scale_inputs(&q, &tokens).unwrap())
        .unwrap();
    let sched = &spec.schedule;
    for trial in 0..20 {
        let k = trial % (sched.len() - 1);
        let mut t2 = tokens.clone();
        for map in t2.maps.iter_mut().skip(k + 1) {
            for b in map.bits.iter_mut() {
                if rng.bernoulli(0.5) {
                    *b = -*b;
                }
            }
        }
        let other = model
            .forward(&cond, &scale_inputs(&q, &t2).unwrap())
            .unwrap();
        let upto = sched.offset(k + 1) * 4;
        assert_eq!(&base.data()[..upto], &other.data()[..upto], "scale {k}");
    }
}

#[test]
fn subject_paths_at_init_leave_logits_unchanged() {
    let spec = ModelSpec::new(
        ModelConfig {
            seed: 4,
            ..ModelConfig::default()
        },
        ScaleSchedule::doubling(16, 16),
        16,
        64,
    )
    .unwrap();
    let mut model = EchoGen::<f32>::new(spec.clone()).unwrap();
    randomize(&mut model.store, 13, |_, g| {
        g != ParamGroup::Backbone && g != ParamGroup::TextNull
    });
    let q =
        ResidualQuantizer::new(spec.schedule.clone(), 16, vec![1.0, 0.6, 0.4, 0.25, 0.15]).unwrap();
    let mut rng = Rng::named(12, "reduce");
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let cond = full_inputs(&spec, &mut rng);
        let inputs = scale_inputs(&q, &random_tokens(&spec.schedule, 16, &mut rng)).unwrap();
        let full = model.forward(&cond, &inputs).unwrap();
        let text = model.forward(&cond.text_only(), &inputs).unwrap();
        worst = worst.max(full.max_abs_diff(&text));
    }
    assert!(worst < 1e-3, "max logit difference {worst}");
}

#[test]
fn cached_decoding_matches_full_forward() {
    let spec = tiny_spec(64);
    let mut model = EchoGen::<f32>::new(spec.clone()).unwrap();
    randomize(&mut model.store, 14, |_, _| false);
    let q = ResidualQuantizer::new(spec.schedule.clone(), 4, vec![1.0, 0.5, 0.25]).unwrap();
    let mut rng = Rng::named(13, "cache");
    let cond = full_inputs(&spec, &mut rng);
    let tokens = random_tokens(&spec.schedule, 4, &mut rng);
    let inputs = scale_inputs(&q, &tokens).unwrap();
    let full = model.forward(&cond, &inputs).unwrap();
    let mut cache = model.new_cache(&cond);
    for k in 0..spec.schedule.len() {
        let prev = if k == 0 { None } else { Some(&inputs[k - 1]) };
        let l = model.forward_scale(&mut cache, &cond, k, prev).unwrap();
        let off = spec.schedule.offset(k) * 4;
        let want = &full.data()[off..off + l.numel()];
        let diff = l
            .data()
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "scale {k}: {diff}");
    }
    assert_eq!(cache.len(), 2 + spec.schedule.total_tokens());
}

#[test]
fn partition_is_a_disjoint_cover() {
    let model = EchoGen::<f32>::new(tiny_spec(64)).unwrap();
    let part = param_partition(&model.store);
    assert!(part.frozen.is_disjoint(&part.trainable));
    assert_eq!(part.frozen.len() + part.trainable.len(), model.store.len());
    for block in ["block0", "block1"] {
        for n in [
            "ca_k_sem.w",
            "ca_v_sem.w",
            "q_c.w",
            "k_c.w",
            "v_c.w",
            "ffn_c_in.w",
            "ffn_c_out.w",
            "beta_s",
            "beta_c",
        ] {
            assert!(
                part.trainable.contains(&format!("{block}.{n}")),
                "{block}.{n}"
            );
        }
        for n in [
            "qkv.w",
            "proj.w",
            "ca_q.w",
            "ca_kv_text.w",
            "ca_out.w",
            "ffn_in.w",
            "ffn_out.w",
            "ada_hidden.w",
            "ada_out.w",
        ] {
            assert!(part.frozen.contains(&format!("{block}.{n}")), "{block}.{n}");
        }
    }
    for n in [
        "cond.sem_patch.w",
        "cond.sem_global.w",
        "cond.content_proj.w",
        "cond.null_sem",
        "cond.null_global",
        "cond.null_content",
        "cond.null_text",
    ] {
        assert!(part.trainable.contains(n), "{n}");
    }
    for name in &part.trainable {
        assert!(
            name.starts_with("cond.") || name.starts_with("block"),
            "{name}"
        );
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let spec = ModelSpec::new(
        tiny_config(8, 1, 2, 2),
        ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap(),
        2,
        16,
    )
    .unwrap();
    let mut model = EchoGen::<f32>::new(spec.clone()).unwrap();
    randomize(&mut model.store, 15, |n, _| {
        n.ends_with("beta_s") || n.ends_with("beta_c")
    });
    for b in &model.params.blocks {
        model
            .store
            .set(b.beta_s, Tensor::full(&[1, 1], -0.5))
            .unwrap();
        model
            .store
            .set(b.beta_c, Tensor::full(&[1, 1], 0.3))
            .unwrap();
    }
    let model = model.cast::<f64>();
    let mut rng = Rng::named(16, "gc");
    let cond = full_inputs(&spec, &mut rng);
    let q = ResidualQuantizer::with_unit_gains(spec.schedule.clone(), 2);
    let inputs = scale_inputs(&q, &random_tokens(&spec.schedule, 2, &mut rng)).unwrap();
    let probe = Tensor::from_fn(&[5, 2], |_| rng.normal());
    let report = grad_check_params(
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
    .unwrap();
    assert!(report.checked > 300);
    assert!(
        report.max_rel_error < 1e-4,
        "{report:?} {}",
        model
            .store
            .name(model.store.ids().nth(report.worst.0).unwrap())
    );
}
