//! Per-sample augmentations and the scale-weighted bit loss.

use crate::conditioning::ConditionInputs;
use crate::data::CLAUSE_DELIMITER;
use crate::numerics::{NumericsError, Real, Rng, Tensor, Var};
use crate::params::Ctx;
use crate::tokenizer::{LatentGrid, MultiScaleTokens, ResidualQuantizer, ScaleSchedule};

/// `Σ_k (1/K) · mean BCE(logits_k, (bits_k + 1) / 2)`; returns the total and each scale's term before weighting.
pub fn scale_weighted_bce<T: Real>(
    ctx: &mut Ctx<'_, T>,
    logits: Var,
    targets: &MultiScaleTokens,
    schedule: &ScaleSchedule,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let (rows, d) = ctx.g.value(logits).dims2()?;
    if rows != schedule.total_tokens() || targets.k() != schedule.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "scale_weighted_bce",
            lhs: vec![rows, d],
            rhs: vec![schedule.total_tokens(), d],
        });
    }
    let k_total = schedule.len();
    let mut per_scale = Vec::with_capacity(k_total);
    let mut weighted = Vec::with_capacity(k_total);
    for (k, map) in targets.maps.iter().enumerate() {
        if map.d_bits != d || map.tokens() != schedule.tokens(k) {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_weighted_bce",
                lhs: vec![schedule.tokens(k), d],
                rhs: vec![map.tokens(), map.d_bits],
            });
        }
        let off = schedule.offset(k);
        let l = ctx.g.slice_rows(logits, off..off + map.tokens())?;
        let t = Tensor::from_fn(&[map.tokens(), d], |i| {
            T::lit((map.bits[i] as f64 + 1.0) / 2.0)
        });
        let loss = ctx.g.bce_with_logits(l, &t)?;
        per_scale.push(loss);
        weighted.push(ctx.g.scale(loss, 1.0 / k_total as f64)?);
    }
    let stacked = ctx
        .g
        .concat_rows(&weighted.iter().map(|&v| v).collect::<Vec<_>>())?;
    Ok((ctx.g.sum(stacked)?, per_scale))
}

/// Outcome of the two independent dropout draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropDraw {
    pub text: bool,
    pub image: bool,
}

impl DropDraw {
    pub fn sample(p_text: f64, p_image: f64, rng: &mut Rng) -> Self {
        let text = rng.bernoulli(p_text);
        let image = rng.bernoulli(p_image);
        Self { text, image }
    }

    /// Replaces dropped conditions by their nulls; the image group (semantic, global, content) drops jointly.
    pub fn apply(self, inputs: &ConditionInputs) -> ConditionInputs {
        let mut out = inputs.clone();
        if self.text {
            out.text = None;
        }
        if self.image {
            out.semantic = None;
            out.global = None;
            out.content = None;
        }
        out
    }
}

pub fn condition_dropout(
    inputs: &ConditionInputs,
    p_text: f64,
    p_image: f64,
    rng: &mut Rng,
) -> (ConditionInputs, DropDraw) {
    let draw = DropDraw::sample(p_text, p_image, rng);
    (draw.apply(inputs), draw)
}

/// Teacher-forcing inputs after self-correction, with the matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrected {
    pub inputs: MultiScaleTokens,
    pub targets: MultiScaleTokens,
    /// Scales whose input copy was corrupted.
    pub flipped: Vec<usize>,
}

/// Re-encodes `latent` scale by scale; each scale except the last is
/// corrupted with probability `ratio` by flipping `flip_fraction` of its bits,
/// and every later scale's target is quantized against the corrupted
/// reconstruction.
pub fn bitwise_self_correction(
    q: &ResidualQuantizer,
    latent: &LatentGrid,
    ratio: f64,
    flip_fraction: f64,
    rng: &mut Rng,
) -> Corrected {
    let k_total = q.schedule.len();
    let mut acc = vec![0.0f32; latent.data.len()];
    let mut inputs = Vec::with_capacity(k_total);
    let mut targets = Vec::with_capacity(k_total);
    let mut flipped = Vec::new();
    for k in 0..k_total {
        let target = q.quantize_scale(latent, &acc, k);
        let mut input = target.clone();
        if k + 1 < k_total && rng.bernoulli(ratio) {
            let n = input.bits.len();
            let m = ((flip_fraction * n as f64).round() as usize)
                .clamp(usize::from(flip_fraction > 0.0), n);
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            for &i in &idx[..m] {
                input.bits[i] = -input.bits[i];
            }
            if m > 0 {
                flipped.push(k);
            }
        }
        q.accumulate(&mut acc, k, &input);
        inputs.push(input);
        targets.push(target);
    }
    Corrected {
        inputs: MultiScaleTokens { maps: inputs },
        targets: MultiScaleTokens { maps: targets },
        flipped,
    }
}

/// Keeps only the first clause with probability `p`.
pub fn truncate_prompt(prompt: &str, p: f64, rng: &mut Rng) -> String {
    let truncate = rng.bernoulli(p);
    if truncate {
        first_clause(prompt)
    } else {
        prompt.to_string()
    }
}

pub fn first_clause(prompt: &str) -> String {
    match prompt.split_once(CLAUSE_DELIMITER) {
        Some((head, _)) => head.trim().to_string(),
        None => prompt.to_string(),
    }
}
