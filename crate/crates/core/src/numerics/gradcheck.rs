//! Central finite-difference oracle for [`Graph`] gradients.

use super::{ConvGeometry, Graph, LogitGate, NumericsError, Rng, Tensor, Var, MASK_NEG};

/// Outcome of a multi-input gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum of `|analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the reverse-mode gradient of a scalar function of one tensor.
///
/// `f` builds its output from the supplied input variable; it is evaluated
/// once with a tape and `2 * numel` more times for central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumericsError>,
{
    let report = grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. `stride`, when given, checks every `stride`-th
/// coordinate of each input (always including the first) to bound cost on
/// larger tensors.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    stride: Option<usize>,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericsError::Invalid(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(NumericsError::NonScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let step = stride.unwrap_or(1).max(1);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in (0..input.numel()).step_by(step) {
            let mut plus = input.to_vec();
            plus[j] += eps;
            work[i] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.to_vec();
            minus[j] -= eps;
            work[i] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
        work[i] = input.clone();
    }
    Ok(report)
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

/// Runs the finite-difference oracle over every differentiable op on random
/// inputs drawn from `seed`. Returns `(op name, max relative error)` pairs.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    let mut rng = Rng::named(seed, "op-suite");
    let eps = 1e-5;
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>|
     -> Result<(), NumericsError> {
        let r = grad_check_multi(f, &inputs, eps, None)?;
        out.push((name, r.max_rel_error));
        Ok(())
    };
    // A fixed random projection turns every op output into a scalar with
    // non-trivial upstream gradients.
    let probe = |g: &mut Graph<f64>, v: Var, seed: u64| -> Result<Var, NumericsError> {
        let t = g.value(v).clone();
        let mut r = Rng::named(seed, "probe");
        let w = Tensor::from_fn(t.shape(), |_| r.normal());
        let w = g.constant(w);
        let p = g.mul(v, w)?;
        g.sum(p)
    };

    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    run("matmul", vec![a.clone(), b], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    let bt = random(&mut rng, &[5, 4], 1.0);
    run("matmul_nt", vec![a.clone(), bt], &|g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    let c = random(&mut rng, &[3, 4], 1.0);
    run("add", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    run("sub", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    run("mul", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    let row = random(&mut rng, &[4], 1.0);
    run("add_row", vec![a.clone(), row.clone()], &|g, v| {
        let y = g.add_row(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    run("mul_row", vec![a.clone(), row], &|g, v| {
        let y = g.mul_row(v[0], v[1])?;
        probe(g, y, seed)
    })?;
    run("scale_offset", vec![a.clone()], &|g, v| {
        let y = g.scale(v[0], -1.7)?;
        let y = g.offset(y, 0.3)?;
        probe(g, y, seed)
    })?;
    let mask = Tensor::from_fn(
        &[3, 4],
        |i| if i % 4 == 3 && i != 3 { MASK_NEG } else { 0.0 },
    );
    run("softmax_rows", vec![a.clone()], &|g, v| {
        let y = g.softmax_rows(v[0], Some(&mask))?;
        probe(g, y, seed)
    })?;
    run("layer_norm_rows", vec![a.clone()], &|g, v| {
        let y = g.layer_norm_rows(v[0])?;
        probe(g, y, seed)
    })?;
    run("gelu", vec![a.clone()], &|g, v| {
        let y = g.gelu(v[0])?;
        probe(g, y, seed)
    })?;
    run("sigmoid", vec![a.clone()], &|g, v| {
        let y = g.sigmoid(v[0])?;
        probe(g, y, seed)
    })?;
    let targets = Tensor::from_fn(&[3, 4], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
    run("bce_with_logits", vec![a.clone()], &|g, v| {
        g.bce_with_logits(v[0], &targets)
    })?;
    run("bce_probs", vec![a.clone()], &|g, v| {
        let p = g.sigmoid(v[0])?;
        g.bce_probs(p, &targets)
    })?;
    run("mse", vec![a.clone()], &|g, v| g.mse(v[0], &c))?;
    run("mean_rows", vec![a.clone()], &|g, v| {
        let y = g.mean_rows(v[0])?;
        probe(g, y, seed)
    })?;
    let table = random(&mut rng, &[5, 3], 1.0);
    run("gather_rows", vec![table], &|g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
        probe(g, y, seed)
    })?;
    let grid = random(&mut rng, &[4 * 4, 2], 1.0);
    run("resize", vec![grid.clone()], &|g, v| {
        let up = g.resize(v[0], 4, 4, 6, 5)?;
        let down = g.resize(v[0], 4, 4, 2, 1)?;
        let a = probe(g, up, seed)?;
        let b = probe(g, down, seed ^ 1)?;
        g.add(a, b)
    })?;
    run("slice_concat", vec![a.clone(), c.clone()], &|g, v| {
        let r = g.slice_rows(v[0], 1..3)?;
        let k = g.slice_cols(v[1], 1..3)?;
        let rows = g.concat_rows(&[r, v[1]])?;
        let cols = g.concat_cols(&[k, v[0]])?;
        let a = probe(g, rows, seed)?;
        let b = probe(g, cols, seed ^ 2)?;
        g.add(a, b)
    })?;
    let geom = ConvGeometry {
        h: 4,
        w: 4,
        channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    run("im2col", vec![grid], &|g, v| {
        let y = g.im2col(v[0], geom)?;
        probe(g, y, seed)
    })?;
    let gate_s = Tensor::scalar(rng.normal());
    run("gate_block", vec![a.clone(), gate_s.clone()], &|g, v| {
        let y = g.gate_block(
            v[0],
            LogitGate {
                scalar: v[1],
                offset: 0.5,
                rows: 1..3,
                cols: 0..2,
            },
        )?;
        probe(g, y, seed)
    })?;
    let q = random(&mut rng, &[3, 4], 1.0);
    let k = random(&mut rng, &[5, 4], 1.0);
    let vv = random(&mut rng, &[5, 4], 1.0);
    let bias = Tensor::from_fn(&[3, 5], |i| if i == 4 || i == 9 { MASK_NEG } else { 0.0 });
    run("attention", vec![q, k, vv, gate_s], &|g, v| {
        let gate = LogitGate {
            scalar: v[3],
            offset: -1.5,
            rows: 0..2,
            cols: 2..5,
        };
        let y = g.attention(v[0], v[1], v[2], 2, Some(&bias), Some(gate))?;
        probe(g, y, seed)
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(|g, v| g.mul(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_vector_output_and_bad_eps() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|g, v| g.scale(v, 2.0), &x, 1e-5),
            Err(NumericsError::NonScalar(_))
        ));
        assert!(grad_check(|g, v| g.sum(v), &x, 1e-2).is_err());
    }
}
