//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf created with [`Graph::param`]. A graph
//! built with [`Graph::inference`] records nothing and only evaluates.

use std::ops::Range;

use super::resize::ResizePlan;
use super::{NumericsError, Real, Tensor};

/// Additive logit value used for inadmissible attention entries.
pub const MASK_NEG: f64 = -1e9;

/// Epsilon inside layer-norm's square root.
pub const LN_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learned scalar (plus a fixed offset) added to a rectangular block of attention logits.
#[derive(Clone, Debug)]
pub struct LogitGate {
    pub scalar: Var,
    pub offset: f64,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Identity(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    BceLogits {
        x: Var,
        targets: Vec<T>,
    },
    BceProbs {
        p: Var,
        targets: Vec<T>,
    },
    Mse {
        x: Var,
        target: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
        channels: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    Gate {
        x: Var,
        gate: LogitGate,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        gate: Option<LogitGate>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Geometry of a 2-D convolution lowered to `im2col` + matmul.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Gradients of the leaves of a graph, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    /// A recording graph; [`backward`](Self::backward) is available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// An evaluation-only graph: no tape, no stored activations for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let grad = self.record && inputs.iter().any(|&v| self.requires(v));
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), NumericsError> {
        self.value(v).dims2()
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m, k] x b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            let name = if trans_b { "matmul_nt" } else { "matmul" };
            return Err(mismatch(name, self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            &mut out,
            n as isize,
            1,
            false,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.numel() != sb.numel() || sa.dims2()? != sb.dims2()? {
            return Err(mismatch(op, sa.shape(), sb.shape()));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    fn row_check(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize), NumericsError> {
        let (m, n) = self.dims(a)?;
        if self.value(r).numel() != n {
            return Err(mismatch(op, self.value(a).shape(), self.value(r).shape()));
        }
        Ok((m, n))
    }

    /// Adds a length-`n` row vector to every row of `a [m, n]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.row_check("add_row", a, r)?;
        let row = self.value(r).data();
        let v: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row[i % n])
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(
            "add_row",
            Tensor::from_parts(shape, v),
            Op::AddRow(a, r),
            &[a, r],
        )
    }

    /// Multiplies every row of `a [m, n]` elementwise by a length-`n` row vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.row_check("mul_row", a, r)?;
        let row = self.value(r).data();
        let v: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * row[i % n])
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(
            "mul_row",
            Tensor::from_parts(shape, v),
            Op::MulRow(a, r),
            &[a, r],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x + c);
        self.push("offset", v, Op::Identity(a), &[a])
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.numel() != c.numel() {
            return Err(mismatch("add_const", va.shape(), c.shape()));
        }
        let v = Tensor::from_parts(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(c.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        self.push("add_const", v, Op::Identity(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(gelu_fwd);
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    // ---------------------------------------------------------------- row-wise normalizers

    /// Row softmax of `a + mask`, where `mask` holds additive `0 / -1e9` entries.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if let Some(mk) = mask {
            if mk.numel() != m * n {
                return Err(mismatch("softmax_rows", self.value(a).shape(), mk.shape()));
            }
        }
        let mut out = self.value(a).to_vec();
        if let Some(mk) = mask {
            for (o, &b) in out.iter_mut().zip(mk.data()) {
                *o += b;
            }
        }
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(
            "softmax_rows",
            Tensor::from_parts(shape, out),
            Op::Softmax(a),
            &[a],
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if n == 0 {
            return Err(NumericsError::Invalid(
                "layer_norm_rows: zero-width rows".into(),
            ));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        let mut rstds = Vec::with_capacity(m);
        let nf = T::lit(n as f64);
        for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for (oo, &x) in o.iter_mut().zip(row) {
                *oo = (x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(
            "layer_norm_rows",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: a, rstd: rstds },
            &[a],
        )
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy of `sigmoid(logits)` against `{0, 1}` targets.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
    ) -> Result<Var, NumericsError> {
        let x = self.value(logits);
        if x.numel() != targets.numel() || x.numel() == 0 {
            return Err(mismatch("bce_with_logits", x.shape(), targets.shape()));
        }
        let n = T::lit(x.numel() as f64);
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / n),
            Op::BceLogits {
                x: logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against `{0, 1}` targets.
    pub fn bce_probs(&mut self, p: Var, targets: &Tensor<T>) -> Result<Var, NumericsError> {
        let x = self.value(p);
        if x.numel() != targets.numel() || x.numel() == 0 {
            return Err(mismatch("bce_probs", x.shape(), targets.shape()));
        }
        let n = T::lit(x.numel() as f64);
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                let p = clamp_prob(p);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        self.push(
            "bce_probs",
            Tensor::scalar(total / n),
            Op::BceProbs {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if v.numel() != target.numel() || v.numel() == 0 {
            return Err(mismatch("mse", v.shape(), target.shape()));
        }
        let n = T::lit(v.numel() as f64);
        let total: T = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(
            "mse",
            Tensor::scalar(total / n),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(NumericsError::Invalid("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means of `a [m, n]` as a `[1, n]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if m == 0 {
            return Err(NumericsError::Invalid("mean_rows of zero rows".into()));
        }
        let mut out = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let mf = T::lit(m as f64);
        for o in out.iter_mut() {
            *o = *o / mf;
        }
        self.push(
            "mean_rows",
            Tensor::from_parts(vec![1, n], out),
            Op::MeanRows(a),
            &[a],
        )
    }

    // ---------------------------------------------------------------- indexing

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (vocab, d) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Invalid(format!(
                "gather_rows: id {bad} out of range for {vocab} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if range.end > m || range.start > range.end {
            return Err(NumericsError::Invalid(format!(
                "slice_rows: {range:?} out of {m} rows"
            )));
        }
        let v = self.value(a).data()[range.start * n..range.end * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![range.len(), n], v),
            Op::SliceRows {
                x: a,
                start: range.start,
            },
            &[a],
        )
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if range.end > n || range.start > range.end {
            return Err(NumericsError::Invalid(format!(
                "slice_cols: {range:?} out of {n} cols"
            )));
        }
        let src = self.value(a).data();
        let mut v = Vec::with_capacity(m * range.len());
        for row in src.chunks(n.max(1)).take(m) {
            v.extend_from_slice(&row[range.clone()]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, range.len()], v),
            Op::SliceCols {
                x: a,
                start: range.start,
            },
            &[a],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Invalid("concat_rows of nothing".into()));
        };
        let n = self.dims(first)?.1;
        let mut v = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(mismatch(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            m += pm;
            v.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![m, n], v),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Invalid("concat_cols of nothing".into()));
        };
        let m = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(mismatch(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, n], v),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Bilinear resize of a channel-last grid `[h * w, c]` to `[h2 * w2, c]`.
    pub fn resize(
        &mut self,
        a: Var,
        h: usize,
        w: usize,
        h2: usize,
        w2: usize,
    ) -> Result<Var, NumericsError> {
        let (m, c) = self.dims(a)?;
        if m != h * w {
            return Err(mismatch("resize", self.value(a).shape(), &[h * w, c]));
        }
        let plan = ResizePlan::new(h, w, h2, w2);
        let v = plan.apply(self.value(a).data(), c);
        self.push(
            "resize",
            Tensor::from_parts(vec![h2 * w2, c], v),
            Op::Resize {
                x: a,
                plan,
                channels: c,
            },
            &[a],
        )
    }

    /// Lowers a channel-last image `[h * w, c]` into convolution patches `[oh * ow, k * k * c]`.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Result<Var, NumericsError> {
        let (m, c) = self.dims(a)?;
        if m != geom.h * geom.w || c != geom.channels || geom.kernel == 0 || geom.stride == 0 {
            return Err(mismatch(
                "im2col",
                self.value(a).shape(),
                &[geom.h * geom.w, geom.channels],
            ));
        }
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let src = self.value(a).data();
        let mut out = vec![T::zero(); oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        let s = (iy as usize * geom.w + ix as usize) * c;
                        let d = (ky * geom.kernel + kx) * c;
                        row[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push(
            "im2col",
            Tensor::from_parts(vec![oh * ow, pl], out),
            Op::Im2Col { x: a, geom },
            &[a],
        )
    }

    // ---------------------------------------------------------------- attention

    /// Adds the scalar `gate.scalar` to the logits block `gate.rows x gate.cols` of `a`.
    pub fn gate_block(&mut self, a: Var, gate: LogitGate) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a)?;
        if gate.rows.end > m || gate.cols.end > n || self.value(gate.scalar).numel() != 1 {
            return Err(NumericsError::Invalid(format!(
                "gate_block: block {:?}x{:?} does not fit [{m}, {n}]",
                gate.rows, gate.cols
            )));
        }
        let s = self.value(gate.scalar).item() + T::lit(gate.offset);
        let mut v = self.value(a).to_vec();
        for r in gate.rows.clone() {
            for c in gate.cols.clone() {
                v[r * n + c] += s;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let inputs = [a, gate.scalar];
        self.push(
            "gate_block",
            Tensor::from_parts(shape, v),
            Op::Gate { x: a, gate },
            &inputs,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [n, d]`, `k [m, d]`, `v [m, d]`; head `h` uses columns `h*d/heads ..`.
    /// `bias` is an additive `[n, m]` constant (0 / -1e9 masking) and `gate`
    /// an optional learned scalar added to a logit block of every head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<&Tensor<T>>,
        gate: Option<LogitGate>,
    ) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(q)?;
        let (m, dk) = self.dims(k)?;
        let (mv, dv) = self.dims(v)?;
        if dk != d || dv != d || mv != m {
            return Err(mismatch(
                "attention",
                self.value(q).shape(),
                self.value(k).shape(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Invalid(format!(
                "attention: {heads} heads do not divide width {d}"
            )));
        }
        if m == 0 {
            return Err(NumericsError::Invalid("attention: empty key set".into()));
        }
        if let Some(b) = bias {
            if b.numel() != n * m {
                return Err(mismatch("attention", &[n, m], b.shape()));
            }
        }
        if let Some(g) = &gate {
            if g.rows.end > n || g.cols.end > m || self.value(g.scalar).numel() != 1 {
                return Err(NumericsError::Invalid(format!(
                    "attention: gate block {:?}x{:?} does not fit [{n}, {m}]",
                    g.rows, g.cols
                )));
            }
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let gate_val = gate
            .as_ref()
            .map(|g| self.value(g.scalar).item() + T::lit(g.offset));
        let keep = self.record && [q, k, v].iter().any(|&x| self.requires(x))
            || gate
                .as_ref()
                .is_some_and(|g| self.record && self.requires(g.scalar));
        let mut probs = if keep {
            vec![T::zero(); heads * n * m]
        } else {
            Vec::new()
        };
        let mut out = vec![T::zero(); n * d];
        let mut s = vec![T::zero(); n * m];
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            for h in 0..heads {
                let off = h * dh;
                T::gemm(
                    n,
                    dh,
                    m,
                    &qd[off..],
                    d as isize,
                    1,
                    &kd[off..],
                    1,
                    d as isize,
                    &mut s,
                    m as isize,
                    1,
                    false,
                );
                for x in s.iter_mut() {
                    *x *= scale;
                }
                if let Some(b) = bias {
                    for (x, &bb) in s.iter_mut().zip(b.data()) {
                        *x += bb;
                    }
                }
                if let (Some(g), Some(gv)) = (&gate, gate_val) {
                    for r in g.rows.clone() {
                        for c in g.cols.clone() {
                            s[r * m + c] += gv;
                        }
                    }
                }
                for row in s.chunks_mut(m) {
                    softmax_in_place(row);
                }
                T::gemm(
                    n,
                    m,
                    dh,
                    &s,
                    m as isize,
                    1,
                    &vd[off..],
                    d as isize,
                    1,
                    &mut out[off..],
                    d as isize,
                    1,
                    false,
                );
                if keep {
                    probs[h * n * m..(h + 1) * n * m].copy_from_slice(&s);
                }
            }
        }
        let mut inputs = vec![q, k, v];
        if let Some(g) = &gate {
            inputs.push(g.scalar);
        }
        self.push(
            "attention",
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                gate,
            },
            &inputs,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`; returns gradients of all differentiable leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if !self.record {
            return Err(NumericsError::Invalid(
                "backward on an inference graph".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].grad => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = node.value.cols();
                if let Some(da) = self.acc(grads, *a) {
                    let bd = self.value(*b).data();
                    if *trans_b {
                        T::gemm(
                            m, n, k, g, n as isize, 1, bd, k as isize, 1, da, k as isize, 1, true,
                        );
                    } else {
                        T::gemm(
                            m, n, k, g, n as isize, 1, bd, 1, n as isize, da, k as isize, 1, true,
                        );
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let ad = self.value(*a).data();
                    if *trans_b {
                        T::gemm(
                            n, m, k, g, 1, n as isize, ad, k as isize, 1, db, k as isize, 1, true,
                        );
                    } else {
                        T::gemm(
                            k, m, n, ad, 1, k as isize, g, n as isize, 1, db, n as isize, 1, true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gg), &y) in d.iter_mut().zip(g).zip(vb) {
                        *x += gg * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((x, &gg), &y) in d.iter_mut().zip(g).zip(va) {
                        *x += gg * y;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                let n = self.value(*r).numel();
                if let Some(d) = self.acc(grads, *r) {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let n = self.value(*r).numel();
                let (va, vr) = (self.value(*a).data(), self.value(*r).data());
                if let Some(d) = self.acc(grads, *a) {
                    for (j, (x, &gg)) in d.iter_mut().zip(g).enumerate() {
                        *x += gg * vr[j % n];
                    }
                }
                if let Some(d) = self.acc(grads, *r) {
                    for (j, (&gg, &x)) in g.iter().zip(va).enumerate() {
                        d[j % n] += gg * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    for (x, &gg) in d.iter_mut().zip(g) {
                        *x += gg * *c;
                    }
                }
            }
            Op::Identity(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols().max(1);
                if let Some(d) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((x, &gg), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let n = node.value.cols();
                let nf = T::lit(n as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for (((dr, gr), yr), &rs) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.chunks(n))
                        .zip(rstd)
                    {
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((dd, &gg), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += rs * (gg - mg - y * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gg), &v) in d.iter_mut().zip(g).zip(va) {
                        *x += gg * gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &gg), &y) in d.iter_mut().zip(g).zip(out) {
                        *x += gg * y * (T::one() - y);
                    }
                }
            }
            Op::BceLogits { x, targets } => {
                let scale = g[0] / T::lit(targets.len() as f64);
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, &l), &t) in d.iter_mut().zip(vx).zip(targets) {
                        *dd += scale * (sigmoid(l) - t);
                    }
                }
            }
            Op::BceProbs { p, targets } => {
                let scale = g[0] / T::lit(targets.len() as f64);
                let vp = self.value(*p).data();
                if let Some(d) = self.acc(grads, *p) {
                    for ((dd, &pp), &t) in d.iter_mut().zip(vp).zip(targets) {
                        let pp = clamp_prob(pp);
                        *dd += scale * (-(t / pp) + (T::one() - t) / (T::one() - pp));
                    }
                }
            }
            Op::Mse { x, target } => {
                let scale = T::lit(2.0) * g[0] / T::lit(target.len() as f64);
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, &a), &b) in d.iter_mut().zip(vx).zip(target) {
                        *dd += scale * (a - b);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mf = T::lit(m as f64);
                if let Some(d) = self.acc(grads, *a) {
                    for row in d.chunks_mut(n) {
                        for (x, &gg) in row.iter_mut().zip(g) {
                            *x += gg / mf;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dcols = node.value.cols();
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut d[id * dcols..(id + 1) * dcols],
                            &g[r * dcols..(r + 1) * dcols],
                        );
                    }
                }
            }
            Op::Resize { x, plan, channels } => {
                if let Some(d) = self.acc(grads, *x) {
                    let back = plan.apply_transpose(g, *channels);
                    add_into(d, &back);
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    add_into(&mut d[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let n = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(w.max(1)).enumerate().take(node.value.rows()) {
                        add_into(&mut d[r * n + start..r * n + start + w], gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        add_into(d, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (pm, pw) = self.value(p).dims2().unwrap();
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..pm {
                            add_into(
                                &mut d[r * pw..(r + 1) * pw],
                                &g[r * n + off..r * n + off + pw],
                            );
                        }
                    }
                    off += pw;
                }
            }
            Op::Gate { x, gate } => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, g);
                }
                let n = node.value.cols();
                if let Some(d) = self.acc(grads, gate.scalar) {
                    let mut s = T::zero();
                    for r in gate.rows.clone() {
                        for c in gate.cols.clone() {
                            s += g[r * n + c];
                        }
                    }
                    d[0] += s;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                gate,
            } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, gate.as_ref(), grads);
            }
            Op::Im2Col { x, geom } => {
                let (oh, ow, pl, c) = (geom.out_h(), geom.out_w(), geom.patch_len(), geom.channels);
                if let Some(d) = self.acc(grads, *x) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = &g[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                            for ky in 0..geom.kernel {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if iy < 0 || iy >= geom.h as isize {
                                    continue;
                                }
                                for kx in 0..geom.kernel {
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if ix < 0 || ix >= geom.w as isize {
                                        continue;
                                    }
                                    let s = (iy as usize * geom.w + ix as usize) * c;
                                    let o = (ky * geom.kernel + kx) * c;
                                    add_into(&mut d[s..s + c], &row[o..o + c]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gate: Option<&LogitGate>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = self.value(q).dims2().unwrap();
        let m = self.value(k).rows();
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (need_q, need_k, need_v) = (self.requires(q), self.requires(k), self.requires(v));
        let need_gate = gate.is_some_and(|gg| self.requires(gg.scalar));
        let mut dq = if need_q {
            vec![T::zero(); n * d]
        } else {
            Vec::new()
        };
        let mut dk = if need_k {
            vec![T::zero(); m * d]
        } else {
            Vec::new()
        };
        let mut dv = if need_v {
            vec![T::zero(); m * d]
        } else {
            Vec::new()
        };
        let mut dgate = T::zero();
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * n * m..(h + 1) * n * m];
            if need_v {
                T::gemm(
                    m,
                    n,
                    dh,
                    p,
                    1,
                    m as isize,
                    &g[off..],
                    d as isize,
                    1,
                    &mut dv[off..],
                    d as isize,
                    1,
                    true,
                );
            }
            if !(need_q || need_k || need_gate) {
                continue;
            }
            T::gemm(
                n,
                dh,
                m,
                &g[off..],
                d as isize,
                1,
                &vd[off..],
                1,
                d as isize,
                &mut dp,
                m as isize,
                1,
                false,
            );
            for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            if let Some(gt) = gate.filter(|_| need_gate) {
                for r in gt.rows.clone() {
                    for c in gt.cols.clone() {
                        dgate += dp[r * m + c];
                    }
                }
            }
            for x in dp.iter_mut() {
                *x *= scale;
            }
            if need_q {
                T::gemm(
                    n,
                    m,
                    dh,
                    &dp,
                    m as isize,
                    1,
                    &kd[off..],
                    d as isize,
                    1,
                    &mut dq[off..],
                    d as isize,
                    1,
                    true,
                );
            }
            if need_k {
                T::gemm(
                    m,
                    n,
                    dh,
                    &dp,
                    1,
                    m as isize,
                    &qd[off..],
                    d as isize,
                    1,
                    &mut dk[off..],
                    d as isize,
                    1,
                    true,
                );
            }
        }
        if need_q {
            add_into(self.acc(grads, q).unwrap(), &dq);
        }
        if need_k {
            add_into(self.acc(grads, k).unwrap(), &dk);
        }
        if need_v {
            add_into(self.acc(grads, v).unwrap(), &dv);
        }
        if let Some(gt) = gate.filter(|_| need_gate) {
            self.acc(grads, gt.scalar).unwrap()[0] += dgate;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::lit(1e-12);
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
