//! Input embedding, the block stack, and cached incremental decoding.

use std::ops::Range;

use super::block::{
    adaln_modulation, cross_attention, ffn, mm_attention, modulate, CrossKv, MmInput,
};
use super::layout::{build_mask, AttentionMask, SequenceLayout, PREFIX};
use super::{EchoGen, ModelError};
use crate::conditioning::{embed_conditions, ConditionInputs, ConditionVars};
use crate::numerics::{resize_grid, Real, Tensor, Var};
use crate::params::Ctx;
use crate::tokenizer::{LatentGrid, MultiScaleTokens, ResidualQuantizer, ScaleSchedule};

/// `[Σ h_k w_k, d_bits]` logits, scale segments in schedule order.
pub type BitLogits<T> = Tensor<T>;

/// Teacher-forcing inputs `F̂_1 .. F̂_{K-1}` from a complete token set.
pub fn scale_inputs(
    q: &ResidualQuantizer,
    tokens: &MultiScaleTokens,
) -> Result<Vec<LatentGrid>, ModelError> {
    tokens.check(&q.schedule, q.d_bits)?;
    (1..q.schedule.len())
        .map(|k| Ok(q.decode_prefix(tokens, k)?))
        .collect()
}

/// Per-block keys and values kept between incremental passes.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub k_ref: Tensor<T>,
    pub v_ref: Tensor<T>,
    pub k_cross: Tensor<T>,
    pub v_cross: Tensor<T>,
    pub n_sem: usize,
}

#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub layout: SequenceLayout,
    pub mask: AttentionMask,
    /// Scales whose rows are in the cache.
    pub scales_done: usize,
    pub blocks: Vec<BlockCache<T>>,
}

impl<T: Real> KvCache<T> {
    /// Generated rows committed so far (prefix included).
    pub fn len(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flips one bit of a cached key entry; used to test the cache check itself.
    pub fn flip_bit(&mut self, block: usize, index: usize, bit: u32) {
        let b = &mut self.blocks[block];
        let mut data = b.k.to_vec();
        data[index] = data[index].flip_bit(bit);
        b.k = Tensor::new(b.k.shape().to_vec(), data).expect("same shape");
    }
}

struct NewRows<'a, T> {
    x: Var,
    rows: Range<usize>,
    c: Option<Var>,
    cache: Option<&'a mut KvCache<T>>,
}

impl<T: Real> EchoGen<T> {
    pub fn layout(&self, inputs: &ConditionInputs) -> SequenceLayout {
        let n_ref = if inputs.content.is_some() {
            self.spec.condition_shape().content_tokens()
        } else {
            1
        };
        SequenceLayout::new(self.spec.schedule.clone(), n_ref)
    }

    /// `[C, S]` prefix rows.
    pub fn embed_prefix(
        &self,
        ctx: &mut Ctx<'_, T>,
        cond: &ConditionVars,
    ) -> Result<Var, ModelError> {
        let s = ctx.p(self.params.start);
        let rows = ctx.g.concat_rows(&[cond.global, s])?;
        let pos = ctx.p(self.params.prefix_pos);
        Ok(ctx.g.add(rows, pos)?)
    }

    /// Rows of scale `k`: the start token for the first scale, otherwise a
    /// projection of the previous cumulative reconstruction resized to the scale.
    pub fn embed_segment(
        &self,
        ctx: &mut Ctx<'_, T>,
        k: usize,
        prev: Option<&LatentGrid>,
    ) -> Result<Var, ModelError> {
        let sched = &self.spec.schedule;
        let (hk, wk) = sched.get(k);
        let (hl, wl) = sched.last();
        let table = ctx.p(self.params.scale_emb);
        let se = ctx.g.slice_rows(table, k..k + 1)?;
        let pos = ctx.p(self.params.pos_table);
        let pos = ctx.g.resize(pos, hl, wl, hk, wk)?;
        let x = ctx.g.add_row(pos, se)?;
        let x = match (k, prev) {
            (0, _) => {
                let s = ctx.p(self.params.start);
                ctx.g.add_row(x, s)?
            }
            (_, Some(f)) => {
                if (f.h, f.w, f.c) != (hl, wl, self.spec.d_bits) {
                    return Err(ModelError::Schedule(format!(
                        "scale input {}x{}x{} does not match latent {hl}x{wl}x{}",
                        f.h, f.w, f.c, self.spec.d_bits
                    )));
                }
                let r = resize_grid(&f.data, hl, wl, f.c, hk, wk);
                let t = Tensor::from_fn(&[hk * wk, f.c], |i| T::lit(r[i] as f64));
                let inp = ctx.g.constant(t);
                let proj = self.params.in_proj.apply(ctx, inp)?;
                ctx.g.add(x, proj)?
            }
            (_, None) => {
                return Err(ModelError::Schedule(format!(
                    "scale {} needs the previous reconstruction",
                    k + 1
                )))
            }
        };
        Ok(x)
    }

    /// Whole generated sequence `[C, S, scale 1 .. scale K]`.
    pub fn build_input(
        &self,
        ctx: &mut Ctx<'_, T>,
        cond: &ConditionVars,
        inputs: &[LatentGrid],
    ) -> Result<Var, ModelError> {
        let k_total = self.spec.schedule.len();
        if inputs.len() + 1 != k_total {
            return Err(ModelError::Schedule(format!(
                "{} scale inputs for {k_total} scales",
                inputs.len()
            )));
        }
        let mut parts = vec![self.embed_prefix(ctx, cond)?];
        for k in 0..k_total {
            let prev = if k == 0 { None } else { Some(&inputs[k - 1]) };
            parts.push(self.embed_segment(ctx, k, prev)?);
        }
        Ok(ctx.g.concat_rows(&parts)?)
    }

    fn content_rows(
        &self,
        ctx: &mut Ctx<'_, T>,
        cond: &ConditionVars,
        n_ref: usize,
    ) -> Result<Var, ModelError> {
        let c = cond.content;
        if ctx.g.value(c).rows() != n_ref {
            return Err(ModelError::Schedule(
                "content rows do not match layout".into(),
            ));
        }
        Ok(c)
    }

    /// Runs the block stack over new generated rows; returns their final hidden states.
    fn run(
        &self,
        ctx: &mut Ctx<'_, T>,
        cond: &ConditionVars,
        mask: &AttentionMask,
        layout: &SequenceLayout,
        new: NewRows<'_, T>,
    ) -> Result<Var, ModelError> {
        let NewRows {
            mut x,
            rows,
            mut c,
            mut cache,
        } = new;
        let cond_vec = ctx.g.add(cond.global, cond.pooled_text)?;
        let ref_rows: Vec<usize> = layout.reference().collect();
        let mut q_rows: Vec<usize> = rows.clone().collect();
        if c.is_some() {
            q_rows.extend(&ref_rows);
        }
        let mut cols: Vec<usize> = (0..rows.end).collect();
        cols.extend(&ref_rows);
        let bias = mask.bias::<T>(&q_rows, &cols);
        for (bi, p) in self.params.blocks.iter().enumerate() {
            let m = adaln_modulation(ctx, &p.ada_hidden, &p.ada_out, cond_vec, 6)?;
            let h = modulate(ctx, x, m[0], m[1])?;
            let hc = match c {
                Some(c) => Some(ctx.g.layer_norm_rows(c)?),
                None => None,
            };
            let bc = cache.as_deref().map(|kc| &kc.blocks[bi]);
            let past = bc.map(|b| (&b.k, &b.v));
            let cached_ref = if c.is_none() {
                bc.map(|b| (&b.k_ref, &b.v_ref))
            } else {
                None
            };
            if rows.start > 0 && past.map_or(0, |p| p.0.rows()) != rows.start {
                return Err(ModelError::Schedule(format!(
                    "cache holds {} rows, expected {}",
                    past.map_or(0, |p| p.0.rows()),
                    rows.start
                )));
            }
            let out = mm_attention(
                ctx,
                p,
                MmInput {
                    x: h,
                    c: hc,
                    past,
                    cached_ref,
                    bias: &bias,
                },
            )?;
            x = ctx.g.add(x, out.x)?;
            if let (Some(cv), Some(co)) = (c, out.c) {
                c = Some(ctx.g.add(cv, co)?);
            }
            let kv = match bc.filter(|_| rows.start > 0) {
                Some(b) => {
                    let k = ctx.g.constant(b.k_cross.clone());
                    let v = ctx.g.constant(b.v_cross.clone());
                    CrossKv {
                        k,
                        v,
                        n_sem: b.n_sem,
                    }
                }
                None => CrossKv::build(ctx, p, Some(cond.semantic), Some(cond.text))?,
            };
            let h = modulate(ctx, x, m[2], m[3])?;
            let ca = cross_attention(ctx, p, h, kv)?;
            x = ctx.g.add(x, ca)?;
            let h = modulate(ctx, x, m[4], m[5])?;
            let f = ffn(ctx, &p.ffn_in, &p.ffn_out, h)?;
            x = ctx.g.add(x, f)?;
            if let Some(cv) = c {
                let hc = ctx.g.layer_norm_rows(cv)?;
                let f = ffn(ctx, &p.ffn_c_in, &p.ffn_c_out, hc)?;
                c = Some(ctx.g.add(cv, f)?);
            }
            if let Some(kc) = cache.as_deref_mut() {
                let b = &mut kc.blocks[bi];
                b.k = Tensor::concat_rows(&[&b.k, ctx.g.value(out.k)])?;
                b.v = Tensor::concat_rows(&[&b.v, ctx.g.value(out.v)])?;
                if let (Some(kr), Some(vr)) = (out.k_ref, out.v_ref) {
                    b.k_ref = ctx.g.value(kr).clone();
                    b.v_ref = ctx.g.value(vr).clone();
                }
                if rows.start == 0 {
                    b.k_cross = ctx.g.value(kv.k).clone();
                    b.v_cross = ctx.g.value(kv.v).clone();
                    b.n_sem = kv.n_sem;
                }
            }
        }
        let m = adaln_modulation(
            ctx,
            &self.params.final_hidden,
            &self.params.final_out,
            cond_vec,
            2,
        )?;
        Ok(modulate(ctx, x, m[0], m[1])?)
    }

    fn head(&self, ctx: &mut Ctx<'_, T>, h: Var, rows: Range<usize>) -> Result<Var, ModelError> {
        let skip = PREFIX.saturating_sub(rows.start);
        let n = rows.len();
        let h = if skip > 0 {
            ctx.g.slice_rows(h, skip..n)?
        } else {
            h
        };
        Ok(self.params.head.apply(ctx, h)?)
    }

    /// Teacher-forced logits for every scale in one pass.
    pub fn forward_graph(
        &self,
        ctx: &mut Ctx<'_, T>,
        inputs: &ConditionInputs,
        scale_inputs: &[LatentGrid],
    ) -> Result<Var, ModelError> {
        let cond = embed_conditions(ctx, &self.params.cond, inputs)?;
        let layout = self.layout(inputs);
        let mask = build_mask(&layout);
        let x = self.build_input(ctx, &cond, scale_inputs)?;
        let c = self.content_rows(ctx, &cond, layout.n_ref())?;
        let rows = 0..layout.generated_len();
        let h = self.run(
            ctx,
            &cond,
            &mask,
            &layout,
            NewRows {
                x,
                rows: rows.clone(),
                c: Some(c),
                cache: None,
            },
        )?;
        self.head(ctx, h, rows)
    }

    pub fn forward(
        &self,
        inputs: &ConditionInputs,
        scale_inputs: &[LatentGrid],
    ) -> Result<BitLogits<T>, ModelError> {
        let mut ctx = Ctx::inference(&self.store);
        let out = self.forward_graph(&mut ctx, inputs, scale_inputs)?;
        Ok(ctx.g.value(out).clone())
    }

    pub fn new_cache(&self, inputs: &ConditionInputs) -> KvCache<T> {
        let layout = self.layout(inputs);
        let mask = build_mask(&layout);
        let d = self.spec.config.d_model;
        let empty = BlockCache {
            k: Tensor::zeros(&[0, d]),
            v: Tensor::zeros(&[0, d]),
            k_ref: Tensor::zeros(&[0, d]),
            v_ref: Tensor::zeros(&[0, d]),
            k_cross: Tensor::zeros(&[0, d]),
            v_cross: Tensor::zeros(&[0, d]),
            n_sem: 0,
        };
        KvCache {
            layout,
            mask,
            scales_done: 0,
            blocks: vec![empty; self.params.blocks.len()],
        }
    }

    /// Logits of scale `k` given the cache filled through scale `k - 1`.
    /// `prev` is `F̂_k` (the cumulative reconstruction of the committed scales) for `k > 0`.
    pub fn forward_scale(
        &self,
        cache: &mut KvCache<T>,
        inputs: &ConditionInputs,
        k: usize,
        prev: Option<&LatentGrid>,
    ) -> Result<BitLogits<T>, ModelError> {
        if k != cache.scales_done || k >= self.spec.schedule.len() {
            return Err(ModelError::Schedule(format!(
                "scale {} requested with {} cached",
                k + 1,
                cache.scales_done
            )));
        }
        let mut ctx = Ctx::inference(&self.store);
        let cond = embed_conditions(&mut ctx, &self.params.cond, inputs)?;
        let layout = cache.layout.clone();
        let seg = layout.segment(k);
        let (x, rows, c) = if k == 0 {
            let pre = self.embed_prefix(&mut ctx, &cond)?;
            let s1 = self.embed_segment(&mut ctx, 0, None)?;
            let x = ctx.g.concat_rows(&[pre, s1])?;
            let c = self.content_rows(&mut ctx, &cond, layout.n_ref())?;
            (x, 0..seg.end, Some(c))
        } else {
            (self.embed_segment(&mut ctx, k, prev)?, seg, None)
        };
        let mask = std::mem::replace(
            &mut cache.mask,
            AttentionMask {
                n: 0,
                allowed: Vec::new(),
            },
        );
        let res = self.run(
            &mut ctx,
            &cond,
            &mask,
            &layout,
            NewRows {
                x,
                rows: rows.clone(),
                c,
                cache: Some(cache),
            },
        );
        cache.mask = mask;
        let h = res?;
        let out = self.head(&mut ctx, h, rows)?;
        cache.scales_done += 1;
        Ok(ctx.g.value(out).clone())
    }
}

impl<T: Real> EchoGen<T> {
    /// Cache for the raster baseline: one single-token segment per latent position.
    pub fn new_raster_cache(&self, inputs: &ConditionInputs) -> Result<KvCache<T>, ModelError> {
        let (h, w) = self.spec.schedule.last();
        let schedule = ScaleSchedule::new(vec![(1, 1); h * w])?;
        let mut cache = self.new_cache(inputs);
        cache.layout = SequenceLayout::new(schedule, cache.layout.n_ref());
        cache.mask = build_mask(&cache.layout);
        Ok(cache)
    }

    /// One next-token decoding step through the same blocks: position `t` of
    /// the finest grid, embedded from the bits committed at `t - 1`.
    pub fn forward_token(
        &self,
        cache: &mut KvCache<T>,
        inputs: &ConditionInputs,
        t: usize,
        prev_bits: Option<&[f32]>,
    ) -> Result<BitLogits<T>, ModelError> {
        let n = cache.layout.schedule().len();
        if t != cache.scales_done || t >= n {
            return Err(ModelError::Schedule(format!(
                "token {t} requested with {} cached",
                cache.scales_done
            )));
        }
        let mut ctx = Ctx::inference(&self.store);
        let cond = embed_conditions(&mut ctx, &self.params.cond, inputs)?;
        let layout = cache.layout.clone();
        let last = self.spec.schedule.len() - 1;
        let table = ctx.p(self.params.scale_emb);
        let se = ctx.g.slice_rows(table, last..last + 1)?;
        let pos = ctx.p(self.params.pos_table);
        let pos = ctx.g.slice_rows(pos, t..t + 1)?;
        let e = ctx.g.add(pos, se)?;
        let e = match (t, prev_bits) {
            (0, _) => {
                let s = ctx.p(self.params.start);
                ctx.g.add(e, s)?
            }
            (_, Some(b)) if b.len() == self.spec.d_bits => {
                let inp = ctx
                    .g
                    .constant(Tensor::from_fn(&[1, b.len()], |i| T::lit(b[i] as f64)));
                let proj = self.params.in_proj.apply(&mut ctx, inp)?;
                ctx.g.add(e, proj)?
            }
            _ => {
                return Err(ModelError::Schedule(format!(
                    "token {t} needs the previous token's {} bits",
                    self.spec.d_bits
                )))
            }
        };
        let seg = layout.segment(t);
        let (x, rows, c) = if t == 0 {
            let pre = self.embed_prefix(&mut ctx, &cond)?;
            let x = ctx.g.concat_rows(&[pre, e])?;
            let c = self.content_rows(&mut ctx, &cond, layout.n_ref())?;
            (x, 0..seg.end, Some(c))
        } else {
            (e, seg, None)
        };
        let mask = std::mem::replace(
            &mut cache.mask,
            AttentionMask {
                n: 0,
                allowed: Vec::new(),
            },
        );
        let res = self.run(
            &mut ctx,
            &cond,
            &mask,
            &layout,
            NewRows {
                x,
                rows: rows.clone(),
                c,
                cache: Some(cache),
            },
        );
        cache.mask = mask;
        let h = res?;
        let out = self.head(&mut ctx, h, rows)?;
        cache.scales_done += 1;
        Ok(ctx.g.value(out).clone())
    }
}
