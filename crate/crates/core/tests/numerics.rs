use echogen::numerics::{
    grad_check, grad_check_multi, op_suite, Graph, NumericsError, Rng, Tensor, MASK_NEG,
};
use proptest::prelude::*;

fn row(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

#[test]
fn softmax_small_cases() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(row(&[0.0, 0.0]));
    let y = g.softmax_rows(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(row(&[0.0, MASK_NEG]));
    let y = g.softmax_rows(x, None).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-6);
}

#[test]
fn additive_mask_suppresses_weight() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::new(vec![1, 3], vec![5.0, -2.0, 30.0]).unwrap());
    let mask = Tensor::new(vec![1, 3], vec![0.0, 0.0, MASK_NEG as f32]).unwrap();
    let y = g.softmax_rows(x, Some(&mask)).unwrap();
    assert!(g.value(y).data()[2] < 1e-6);
}

#[test]
fn layer_norm_of_one_three() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(row(&[1.0, 3.0]));
    let y = g.layer_norm_rows(x).unwrap();
    let v = g.value(y).data();
    assert!(
        (v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5,
        "{v:?}"
    );
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::zeros(&[2, 3]));
    let b = g.param(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(NumericsError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_results_are_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::full(&[1, 2], 3.0e38));
    assert!(matches!(
        g.add(a, a),
        Err(NumericsError::NonFinite { op: "add" })
    ));
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let x = row(&[0.3, -1.2, 2.5, 0.0]);
    let err = grad_check(
        |g, v| {
            let s = g.softmax_rows(v, None)?;
            g.sum(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
    let mut g = Graph::new();
    let v = g.param(x);
    let s = g.softmax_rows(v, None).unwrap();
    let t = g.sum(s).unwrap();
    let grads = g.backward(t).unwrap();
    assert!(grads.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn bce_of_sigmoid_linear_map() {
    let mut rng = Rng::new(3, 0);
    let w = Tensor::from_fn(&[4, 4], |_| rng.normal());
    let x = Tensor::from_fn(&[4, 1], |_| rng.normal());
    let targets = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let report = grad_check_multi(
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            let p = g.sigmoid(z)?;
            g.bce_probs(p, &targets)
        },
        &[w, x],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_op_passes_finite_differences_over_twenty_seeds() {
    for seed in 0..20 {
        for (name, err) in op_suite(seed).unwrap() {
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = Rng::named(9, "det");
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::from_fn(&[8, 16], |_| rng.normal() as f32));
        let b = g.param(Tensor::from_fn(&[16, 8], |_| rng.normal() as f32));
        let c = g.matmul(a, b).unwrap();
        let d = g.attention(c, c, c, 2, None, None).unwrap();
        let e = g.layer_norm_rows(d).unwrap();
        let loss = g.mean(e).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(e).to_vec(), grads.get(a).unwrap().to_vec())
    };
    let (x, gx) = run();
    let (y, gy) = run();
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gx.iter().zip(&gy).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        for r in g.value(y).data().chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(vals in prop::collection::vec(-10.0f64..10.0, 16), spread in 0.5f64..4.0) {
        let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + spread * i as f64).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![2, 8], vals).unwrap());
        let y = g.layer_norm_rows(x).unwrap();
        for r in g.value(y).data().chunks(8) {
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
