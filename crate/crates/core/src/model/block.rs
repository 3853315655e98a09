//! One transformer block: AdaLN, multi-modal attention, decoupled cross-attention, FFNs.

use super::ModelConfig;
use crate::numerics::{LogitGate, NumericsError, Real, Rng, Tensor, Var};
use crate::params::{Ctx, Linear, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub heads: usize,
    pub d_model: usize,
    // frozen backbone
    pub ada_hidden: Linear,
    pub ada_out: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub ca_q: Linear,
    pub ca_kv_text: Linear,
    pub ca_out: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    // subject injection
    pub ca_k_sem: Linear,
    pub ca_v_sem: Linear,
    pub beta_s: ParamId,
    pub beta_c: ParamId,
    // content stream
    pub q_c: Linear,
    pub k_c: Linear,
    pub v_c: Linear,
    pub ffn_c_in: Linear,
    pub ffn_c_out: Linear,
}

impl BlockParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        let f = d * cfg.ffn_mult;
        let (bb, sb, cb) = (
            ParamGroup::Backbone,
            ParamGroup::Subject,
            ParamGroup::Content,
        );
        let mut lin = |store: &mut ParamStore<T>, n: &str, g, din, dout, zero| {
            Linear::new(store, &format!("{name}.{n}"), g, din, dout, zero, rng)
        };
        let ada_hidden = lin(store, "ada_hidden", bb, d, d, false);
        let ada_out = lin(store, "ada_out", bb, d, 6 * d, true);
        let qkv = lin(store, "qkv", bb, d, 3 * d, false);
        let proj = lin(store, "proj", bb, d, d, false);
        let ca_q = lin(store, "ca_q", bb, d, d, false);
        let ca_kv_text = lin(store, "ca_kv_text", bb, d, 2 * d, false);
        let ca_out = lin(store, "ca_out", bb, d, d, false);
        let ffn_in = lin(store, "ffn_in", bb, d, f, false);
        let ffn_out = lin(store, "ffn_out", bb, f, d, false);
        let ca_v_sem = lin(store, "ca_v_sem", sb, d, d, true);
        let q_c = lin(store, "q_c", cb, d, d, false);
        let v_c = lin(store, "v_c", cb, d, d, true);
        let ffn_c_in = lin(store, "ffn_c_in", cb, d, f, false);
        let ffn_c_out = lin(store, "ffn_c_out", cb, f, d, true);
        let w = store.add_normal(
            &format!("{name}.ca_k_sem.w"),
            sb,
            &[d, d],
            cfg.subject_key_std,
            rng,
        );
        let b = store.add_zeros(&format!("{name}.ca_k_sem.b"), sb, &[d]);
        let ca_k_sem = Linear { w, b };
        let w = store.add_normal(
            &format!("{name}.k_c.w"),
            cb,
            &[d, d],
            cfg.subject_key_std,
            rng,
        );
        let b = store.add_zeros(&format!("{name}.k_c.b"), cb, &[d]);
        let k_c = Linear { w, b };
        let beta_s = store.add_full(&format!("{name}.beta_s"), sb, &[1, 1], cfg.gate_init);
        let beta_c = store.add_full(&format!("{name}.beta_c"), sb, &[1, 1], cfg.gate_init);
        Self {
            heads: cfg.heads,
            d_model: d,
            ada_hidden,
            ada_out,
            qkv,
            proj,
            ca_q,
            ca_kv_text,
            ca_out,
            ffn_in,
            ffn_out,
            ca_k_sem,
            ca_v_sem,
            beta_s,
            beta_c,
            q_c,
            k_c,
            v_c,
            ffn_c_in,
            ffn_c_out,
        }
    }
}

/// `n` modulation vectors `[1, d]` from a two-layer MLP on `cond [1, d]`.
pub fn adaln_modulation<T: Real>(
    ctx: &mut Ctx<'_, T>,
    hidden: &Linear,
    out: &Linear,
    cond: Var,
    n: usize,
) -> Result<Vec<Var>, NumericsError> {
    let h = hidden.apply(ctx, cond)?;
    let h = ctx.g.gelu(h)?;
    let m = out.apply(ctx, h)?;
    let d = ctx.g.value(m).cols() / n;
    (0..n)
        .map(|i| ctx.g.slice_cols(m, i * d..(i + 1) * d))
        .collect()
}

/// `LN(x) * (1 + gamma) + beta` with row-broadcast `gamma`, `beta`.
pub fn modulate<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var, NumericsError> {
    let n = ctx.g.layer_norm_rows(x)?;
    let s = ctx.g.offset(gamma, 1.0)?;
    let y = ctx.g.mul_row(n, s)?;
    ctx.g.add_row(y, beta)
}

/// Inputs of one multi-modal attention call.
///
/// `x` holds the new generated rows (already normalized), `c` the content rows
/// when they are computed in this call. `past` is cached generated K/V placed
/// before the new rows; `cached_ref` replaces the content K/V when `c` is None.
/// `bias` covers rows `[x; c]` and columns `[past; x; ref]`.
pub struct MmInput<'a, T> {
    pub x: Var,
    pub c: Option<Var>,
    pub past: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    pub cached_ref: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    pub bias: &'a Tensor<T>,
}

pub struct MmOutput {
    /// Attention output of the generated rows after the shared projection.
    pub x: Var,
    pub c: Option<Var>,
    pub k: Var,
    pub v: Var,
    pub k_ref: Option<Var>,
    pub v_ref: Option<Var>,
}

pub fn mm_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    p: &BlockParams,
    inp: MmInput<'_, T>,
) -> Result<MmOutput, NumericsError> {
    let d = p.d_model;
    let qkv = p.qkv.apply(ctx, inp.x)?;
    let q = ctx.g.slice_cols(qkv, 0..d)?;
    let k = ctx.g.slice_cols(qkv, d..2 * d)?;
    let v = ctx.g.slice_cols(qkv, 2 * d..3 * d)?;
    let r = ctx.g.value(q).rows();
    let (qc, kref, vref) = match (inp.c, inp.cached_ref) {
        (Some(c), _) => {
            let qc = p.q_c.apply(ctx, c)?;
            let kc = p.k_c.apply(ctx, c)?;
            let vc = p.v_c.apply(ctx, c)?;
            (Some(qc), Some(kc), Some(vc))
        }
        (None, Some((kt, vt))) => {
            let kc = ctx.g.constant(kt.clone());
            let vc = ctx.g.constant(vt.clone());
            (None, Some(kc), Some(vc))
        }
        (None, None) => (None, None, None),
    };
    let mut ks = Vec::with_capacity(3);
    let mut vs = Vec::with_capacity(3);
    let n_past = match inp.past {
        Some((pk, pv)) if pk.rows() > 0 => {
            ks.push(ctx.g.constant(pk.clone()));
            vs.push(ctx.g.constant(pv.clone()));
            pk.rows()
        }
        _ => 0,
    };
    ks.push(k);
    vs.push(v);
    let mut n_ref = 0;
    if let (Some(kc), Some(vc)) = (kref, vref) {
        n_ref = ctx.g.value(kc).rows();
        ks.push(kc);
        vs.push(vc);
    }
    let keys = ctx.g.concat_rows(&ks)?;
    let vals = ctx.g.concat_rows(&vs)?;
    let queries = match qc {
        Some(qc) => ctx.g.concat_rows(&[q, qc])?,
        None => q,
    };
    let gate = (n_ref > 0).then(|| {
        let scalar = ctx.p(p.beta_c);
        LogitGate {
            scalar,
            offset: -(n_ref as f64).ln(),
            rows: 0..r,
            cols: n_past + r..n_past + r + n_ref,
        }
    });
    let o = ctx
        .g
        .attention(queries, keys, vals, p.heads, Some(inp.bias), gate)?;
    let o = p.proj.apply(ctx, o)?;
    let x_out = if qc.is_some() {
        ctx.g.slice_rows(o, 0..r)?
    } else {
        o
    };
    let c_out = match qc {
        Some(_) => {
            let total = ctx.g.value(o).rows();
            Some(ctx.g.slice_rows(o, r..total)?)
        }
        None => None,
    };
    let (k_ref, v_ref) = if inp.c.is_some() {
        (kref, vref)
    } else {
        (None, None)
    };
    Ok(MmOutput {
        x: x_out,
        c: c_out,
        k,
        v,
        k_ref,
        v_ref,
    })
}

/// Keys and values of the decoupled cross-attention: semantic rows first, then text.
#[derive(Clone, Copy, Debug)]
pub struct CrossKv {
    pub k: Var,
    pub v: Var,
    pub n_sem: usize,
}

impl CrossKv {
    pub fn build<T: Real>(
        ctx: &mut Ctx<'_, T>,
        p: &BlockParams,
        sem: Option<Var>,
        text: Option<Var>,
    ) -> Result<Self, NumericsError> {
        let d = p.d_model;
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        let mut n_sem = 0;
        if let Some(s) = sem {
            n_sem = ctx.g.value(s).rows();
            ks.push(p.ca_k_sem.apply(ctx, s)?);
            vs.push(p.ca_v_sem.apply(ctx, s)?);
        }
        if let Some(t) = text {
            let kv = p.ca_kv_text.apply(ctx, t)?;
            ks.push(ctx.g.slice_cols(kv, 0..d)?);
            vs.push(ctx.g.slice_cols(kv, d..2 * d)?);
        }
        if ks.is_empty() {
            return Err(NumericsError::Invalid(
                "cross-attention: empty joint key set".into(),
            ));
        }
        let k = ctx.g.concat_rows(&ks)?;
        let v = ctx.g.concat_rows(&vs)?;
        Ok(Self { k, v, n_sem })
    }
}

/// Attention of `x` (normalized) over `[semantic ; text]` keys, projected by the output layer.
pub fn cross_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    p: &BlockParams,
    x: Var,
    kv: CrossKv,
) -> Result<Var, NumericsError> {
    let q = p.ca_q.apply(ctx, x)?;
    let r = ctx.g.value(q).rows();
    let gate = (kv.n_sem > 0).then(|| {
        let scalar = ctx.p(p.beta_s);
        LogitGate {
            scalar,
            offset: -(kv.n_sem as f64).ln(),
            rows: 0..r,
            cols: 0..kv.n_sem,
        }
    });
    let o = ctx.g.attention(q, kv.k, kv.v, p.heads, None, gate)?;
    p.ca_out.apply(ctx, o)
}

pub(crate) fn ffn<T: Real>(
    ctx: &mut Ctx<'_, T>,
    a: &Linear,
    b: &Linear,
    x: Var,
) -> Result<Var, NumericsError> {
    let h = a.apply(ctx, x)?;
    let h = ctx.g.gelu(h)?;
    b.apply(ctx, h)
}
