//! Handcrafted patch descriptors: mean colour, gradient orientations, occupancy.

use super::ConditioningError;
use crate::raster::Image;

pub const PATCH: usize = 8;
pub const ORIENT_BINS: usize = 8;
pub const DESC_DIM: usize = 3 + ORIENT_BINS + 1;

/// Per-channel distance from white above which a pixel counts as occupied.
const OCCUPIED: f32 = 0.02;
/// Floor on the gradient mass used to normalize orientation bins, per pixel.
const GRAD_FLOOR: f32 = 0.02;

pub type Descriptor = [f32; DESC_DIM];

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeatures {
    /// Patches in row-major patch order.
    pub patches: Vec<Descriptor>,
    /// Occupancy-weighted mean of `patches` (all zero for a blank image).
    pub global: Descriptor,
}

pub fn is_occupied(p: [f32; 3]) -> bool {
    p.iter().any(|&v| 1.0 - v > OCCUPIED)
}

/// Descriptor of a `PATCH x PATCH` block given as channel-last RGB.
pub fn patch_descriptor(px: &[[f32; 3]]) -> Descriptor {
    debug_assert_eq!(px.len(), PATCH * PATCH);
    let mut d = [0.0f32; DESC_DIM];
    let n = px.len() as f32;
    let gray: Vec<f32> = px.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    for p in px {
        for c in 0..3 {
            d[c] += p[c] / n;
        }
        if is_occupied(*p) {
            d[DESC_DIM - 1] += 1.0 / n;
        }
    }
    let mut total = 0.0f32;
    let mut bins = [0.0f32; ORIENT_BINS];
    let at = |y: isize, x: isize| {
        gray[(y.clamp(0, PATCH as isize - 1) as usize) * PATCH
            + x.clamp(0, PATCH as isize - 1) as usize]
    };
    for y in 0..PATCH as isize {
        for x in 0..PATCH as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag <= 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f32::consts::TAU);
            let b = ((theta / std::f32::consts::TAU * ORIENT_BINS as f32) as usize)
                .min(ORIENT_BINS - 1);
            bins[b] += mag;
            total += mag;
        }
    }
    let norm = total.max(GRAD_FLOOR * n);
    for (i, b) in bins.iter().enumerate() {
        d[3 + i] = b / norm;
    }
    d
}

/// Occupancy-weighted mean of descriptors.
pub fn global_descriptor(patches: &[Descriptor]) -> Descriptor {
    let mut g = [0.0f32; DESC_DIM];
    let w: f32 = patches.iter().map(|d| d[DESC_DIM - 1]).sum();
    if w <= 0.0 {
        return g;
    }
    for d in patches {
        let occ = d[DESC_DIM - 1];
        for (gi, di) in g.iter_mut().zip(d) {
            *gi += occ * di / w;
        }
    }
    g
}

/// Pre-projection semantic features of a reference image.
pub fn extract_semantic_features(
    img: &Image,
    expected_size: usize,
) -> Result<SemanticFeatures, ConditioningError> {
    if img.h != expected_size || img.w != expected_size || img.h % PATCH != 0 {
        return Err(ConditioningError::Shape(format!(
            "semantic extractor needs {expected_size}x{expected_size}, got {}x{}",
            img.h, img.w
        )));
    }
    let (ph, pw) = (img.h / PATCH, img.w / PATCH);
    let mut patches = Vec::with_capacity(ph * pw);
    let mut buf = Vec::with_capacity(PATCH * PATCH);
    for py in 0..ph {
        for px in 0..pw {
            buf.clear();
            for y in 0..PATCH {
                for x in 0..PATCH {
                    buf.push(img.get(py * PATCH + y, px * PATCH + x));
                }
            }
            patches.push(patch_descriptor(&buf));
        }
    }
    let global = global_descriptor(&patches);
    Ok(SemanticFeatures { patches, global })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64) * (*y as f64))
        .sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
