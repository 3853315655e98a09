//! Sign (bitwise) quantization and the multi-scale residual cascade.

use serde::{Deserialize, Serialize};

use super::TokenizerError;
use crate::numerics::resize_grid;

/// Continuous latent, channel-last `[h * w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self, TokenizerError> {
        if data.len() != h * w * c {
            return Err(TokenizerError::Shape(format!(
                "latent {h}x{w}x{c} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TokenizerError::Shape("non-finite latent".into()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn resized(&self, h2: usize, w2: usize) -> Vec<f32> {
        resize_grid(&self.data, self.h, self.w, self.c, h2, w2)
    }

    pub fn l2_distance(&self, other: &[f32]) -> f64 {
        self.data
            .iter()
            .zip(other)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Ordered token-map resolutions, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    /// Validates monotonicity and the `(1, 1)` first scale; a single-scale
    /// schedule may sit at any resolution.
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self, TokenizerError> {
        if scales.is_empty() {
            return Err(TokenizerError::Schedule("empty schedule".into()));
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(TokenizerError::Schedule("zero-sized scale".into()));
        }
        if scales.len() > 1 && scales[0] != (1, 1) {
            return Err(TokenizerError::Schedule(format!(
                "first scale must be 1x1, got {:?}",
                scales[0]
            )));
        }
        for pair in scales.windows(2) {
            if pair[1].0 < pair[0].0 || pair[1].1 < pair[0].1 {
                return Err(TokenizerError::Schedule(format!(
                    "scales decrease: {:?} -> {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self { scales })
    }

    /// Doubling schedule `1, 2, 4, ...` ending at `(h, w)`.
    pub fn doubling(h: usize, w: usize) -> Self {
        let mut scales = vec![(1, 1)];
        let mut s = 1;
        while scales.last() != Some(&(h, w)) {
            s *= 2;
            scales.push((s.min(h), s.min(w)));
        }
        Self { scales }
    }

    pub fn check_latent(&self, h: usize, w: usize) -> Result<(), TokenizerError> {
        if self.last() != (h, w) {
            return Err(TokenizerError::Schedule(format!(
                "schedule ends at {:?}, latent is {h}x{w}",
                self.last()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn get(&self, k: usize) -> (usize, usize) {
        self.scales[k]
    }

    pub fn last(&self) -> (usize, usize) {
        *self.scales.last().expect("non-empty")
    }

    pub fn tokens(&self, k: usize) -> usize {
        self.scales[k].0 * self.scales[k].1
    }

    pub fn total_tokens(&self) -> usize {
        (0..self.len()).map(|k| self.tokens(k)).sum()
    }

    /// Token offset of scale `k` within the concatenation of all scales.
    pub fn offset(&self, k: usize) -> usize {
        (0..k).map(|j| self.tokens(j)).sum()
    }
}

/// Sign codes of one scale, `[h * w, d_bits]` row-major, entries in `{-1, +1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTokenMap {
    pub h: usize,
    pub w: usize,
    pub d_bits: usize,
    pub bits: Vec<i8>,
}

impl BitTokenMap {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token(&self, t: usize) -> &[i8] {
        &self.bits[t * self.d_bits..(t + 1) * self.d_bits]
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiScaleTokens {
    pub maps: Vec<BitTokenMap>,
}

impl MultiScaleTokens {
    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn check(&self, schedule: &ScaleSchedule, d_bits: usize) -> Result<(), TokenizerError> {
        if self.maps.len() != schedule.len() {
            return Err(TokenizerError::Schedule(format!(
                "{} token maps for {} scales",
                self.maps.len(),
                schedule.len()
            )));
        }
        for (k, m) in self.maps.iter().enumerate() {
            if (m.h, m.w) != schedule.get(k)
                || m.d_bits != d_bits
                || m.bits.len() != m.h * m.w * d_bits
            {
                return Err(TokenizerError::Schedule(format!(
                    "scale {k}: map {}x{}x{} does not match {:?} with {d_bits} bits",
                    m.h,
                    m.w,
                    m.d_bits,
                    schedule.get(k)
                )));
            }
            if m.bits.iter().any(|&b| b != 1 && b != -1) {
                return Err(TokenizerError::Schedule(format!(
                    "scale {k}: code outside {{-1, +1}}"
                )));
            }
        }
        Ok(())
    }

    /// Little-endian header `K, d_bits, (h_k, w_k)*` as u32, then one bit per
    /// code entry (1 for +1), scale-major, row-major, LSB-first within each byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.maps.first().map(|m| m.d_bits).unwrap_or(0);
        let mut out = Vec::new();
        out.extend_from_slice(&(self.maps.len() as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for m in &self.maps {
            out.extend_from_slice(&(m.h as u32).to_le_bytes());
            out.extend_from_slice(&(m.w as u32).to_le_bytes());
        }
        let mut byte = 0u8;
        let mut n = 0;
        for b in self.maps.iter().flat_map(|m| m.bits.iter()) {
            if *b > 0 {
                byte |= 1 << (n % 8);
            }
            n += 1;
            if n % 8 == 0 {
                out.push(byte);
                byte = 0;
            }
        }
        if n % 8 != 0 {
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenizerError> {
        let word = |i: usize| -> Result<usize, TokenizerError> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
                .ok_or_else(|| TokenizerError::Format("truncated token header".into()))
        };
        let k = word(0)?;
        let d = word(1)?;
        let mut dims = Vec::with_capacity(k);
        for i in 0..k {
            dims.push((word(2 + 2 * i)?, word(3 + 2 * i)?));
        }
        let total: usize = dims.iter().map(|(h, w)| h * w * d).sum();
        let start = (2 + 2 * k) * 4;
        if bytes.len() != start + total.div_ceil(8) {
            return Err(TokenizerError::Format(format!(
                "token payload is {} bytes, expected {}",
                bytes.len() - start.min(bytes.len()),
                total.div_ceil(8)
            )));
        }
        let payload = &bytes[start..];
        let mut idx = 0;
        let maps = dims
            .into_iter()
            .map(|(h, w)| {
                let bits = (0..h * w * d)
                    .map(|_| {
                        let b = (payload[idx / 8] >> (idx % 8)) & 1;
                        idx += 1;
                        if b == 1 {
                            1
                        } else {
                            -1
                        }
                    })
                    .collect();
                BitTokenMap {
                    h,
                    w,
                    d_bits: d,
                    bits,
                }
            })
            .collect();
        Ok(Self { maps })
    }
}

/// Sign code with `sign(0) = +1` and its unit-norm dequantization `code / sqrt(d)`.
pub fn bsq_quantize(v: &[f32]) -> (Vec<i8>, Vec<f32>) {
    let scale = 1.0 / (v.len() as f32).sqrt();
    let code: Vec<i8> = v.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect();
    let deq = code.iter().map(|&c| c as f32 * scale).collect();
    (code, deq)
}

/// Residual cascade over a [`ScaleSchedule`] with one gain per scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualQuantizer {
    pub schedule: ScaleSchedule,
    pub d_bits: usize,
    pub gains: Vec<f32>,
}

/// Result of [`ResidualQuantizer::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: MultiScaleTokens,
    /// Cumulative reconstructions `F̂_1 .. F̂_K` at latent resolution.
    pub partials: Vec<LatentGrid>,
}

impl Encoded {
    pub fn reconstruction(&self) -> &LatentGrid {
        self.partials.last().expect("at least one scale")
    }
}

impl ResidualQuantizer {
    pub fn new(
        schedule: ScaleSchedule,
        d_bits: usize,
        gains: Vec<f32>,
    ) -> Result<Self, TokenizerError> {
        if gains.len() != schedule.len() {
            return Err(TokenizerError::Schedule(format!(
                "{} gains for {} scales",
                gains.len(),
                schedule.len()
            )));
        }
        Ok(Self {
            schedule,
            d_bits,
            gains,
        })
    }

    pub fn with_unit_gains(schedule: ScaleSchedule, d_bits: usize) -> Self {
        let gains = vec![1.0; schedule.len()];
        Self {
            schedule,
            d_bits,
            gains,
        }
    }

    fn check(&self, f: &LatentGrid) -> Result<(), TokenizerError> {
        self.schedule.check_latent(f.h, f.w)?;
        if f.c != self.d_bits {
            return Err(TokenizerError::Shape(format!(
                "latent has {} channels, quantizer {}",
                f.c, self.d_bits
            )));
        }
        Ok(())
    }

    /// Codes of scale `k` for the residual `target - recon`.
    pub fn quantize_scale(&self, target: &LatentGrid, recon: &[f32], k: usize) -> BitTokenMap {
        let residual: Vec<f32> = target.data.iter().zip(recon).map(|(a, b)| a - b).collect();
        let (hk, wk) = self.schedule.get(k);
        let r = resize_grid(&residual, target.h, target.w, target.c, hk, wk);
        let mut bits = Vec::with_capacity(r.len());
        for tok in r.chunks(self.d_bits) {
            bits.extend(bsq_quantize(tok).0);
        }
        BitTokenMap {
            h: hk,
            w: wk,
            d_bits: self.d_bits,
            bits,
        }
    }

    /// Unit-gain dequantized map of scale `k`, upsampled to latent resolution.
    pub fn unit_contribution(&self, map: &BitTokenMap) -> Vec<f32> {
        let deq: Vec<f32> = map.token_values(self.d_bits);
        let (h, w) = self.schedule.last();
        resize_grid(&deq, map.h, map.w, self.d_bits, h, w)
    }

    /// Adds scale `k`'s contribution to `acc`. Encoding and decoding both go
    /// through here so their reconstructions agree bit for bit.
    pub fn accumulate(&self, acc: &mut [f32], k: usize, map: &BitTokenMap) {
        let g = self.gains[k];
        for (a, u) in acc.iter_mut().zip(self.unit_contribution(map)) {
            *a += g * u;
        }
    }

    pub fn encode(&self, f: &LatentGrid) -> Result<Encoded, TokenizerError> {
        self.check(f)?;
        let mut acc = vec![0.0f32; f.data.len()];
        let mut maps = Vec::with_capacity(self.schedule.len());
        let mut partials = Vec::with_capacity(self.schedule.len());
        for k in 0..self.schedule.len() {
            let map = self.quantize_scale(f, &acc, k);
            self.accumulate(&mut acc, k, &map);
            maps.push(map);
            partials.push(LatentGrid {
                h: f.h,
                w: f.w,
                c: f.c,
                data: acc.clone(),
            });
        }
        Ok(Encoded {
            tokens: MultiScaleTokens { maps },
            partials,
        })
    }

    pub fn decode(&self, tokens: &MultiScaleTokens) -> Result<LatentGrid, TokenizerError> {
        self.decode_prefix(tokens, tokens.k())
    }

    /// Cumulative reconstruction from the first `upto` scales (`F̂_upto`).
    pub fn decode_prefix(
        &self,
        tokens: &MultiScaleTokens,
        upto: usize,
    ) -> Result<LatentGrid, TokenizerError> {
        if upto > self.schedule.len() {
            return Err(TokenizerError::Schedule(format!(
                "{upto} scales requested of {}",
                self.schedule.len()
            )));
        }
        let (h, w) = self.schedule.last();
        let mut acc = vec![0.0f32; h * w * self.d_bits];
        for (k, map) in tokens.maps.iter().take(upto).enumerate() {
            if (map.h, map.w) != self.schedule.get(k) || map.d_bits != self.d_bits {
                return Err(TokenizerError::Schedule(format!(
                    "scale {k}: map {}x{} does not match {:?}",
                    map.h,
                    map.w,
                    self.schedule.get(k)
                )));
            }
            self.accumulate(&mut acc, k, map);
        }
        Ok(LatentGrid {
            h,
            w,
            c: self.d_bits,
            data: acc,
        })
    }

    /// Sets each scale's gain to the non-negative least-squares fit of that
    /// scale's unit contribution to the remaining residual, pooled over
    /// `latents` and processed coarse to fine.
    pub fn calibrate(&mut self, latents: &[LatentGrid]) -> Result<(), TokenizerError> {
        for f in latents {
            self.check(f)?;
        }
        let mut accs: Vec<Vec<f32>> = latents.iter().map(|f| vec![0.0; f.data.len()]).collect();
        for k in 0..self.schedule.len() {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let units: Vec<Vec<f32>> = latents
                .iter()
                .zip(&accs)
                .map(|(f, acc)| {
                    let map = self.quantize_scale(f, acc, k);
                    let u = self.unit_contribution(&map);
                    for ((&x, &a), &uu) in f.data.iter().zip(acc).zip(&u) {
                        num += ((x - a) * uu) as f64;
                        den += (uu * uu) as f64;
                    }
                    u
                })
                .collect();
            let g = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
            self.gains[k] = g as f32;
            for (acc, u) in accs.iter_mut().zip(&units) {
                for (a, &uu) in acc.iter_mut().zip(u) {
                    *a += self.gains[k] * uu;
                }
            }
        }
        Ok(())
    }
}

impl BitTokenMap {
    fn token_values(&self, d_bits: usize) -> Vec<f32> {
        let s = 1.0 / (d_bits as f32).sqrt();
        self.bits.iter().map(|&b| b as f32 * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_and_dequant() {
        let (c, d) = bsq_quantize(&[0.3, -0.2]);
        assert_eq!(c, vec![1, -1]);
        let s = 1.0 / 2f32.sqrt();
        assert_eq!(d, vec![s, -s]);
        assert_eq!(bsq_quantize(&[0.0, 0.0]).0, vec![1, 1]);
    }

    #[test]
    fn schedule_rules() {
        assert!(ScaleSchedule::new(vec![(2, 2), (4, 4)]).is_err());
        assert!(ScaleSchedule::new(vec![(1, 1), (4, 4), (2, 2)]).is_err());
        assert!(ScaleSchedule::new(vec![(3, 3)]).is_ok());
        let s = ScaleSchedule::doubling(16, 16);
        assert_eq!(s.scales(), &[(1, 1), (2, 2), (4, 4), (8, 8), (16, 16)]);
        assert_eq!(s.total_tokens(), 341);
        assert_eq!(s.offset(2), 5);
    }

    #[test]
    fn all_plus_codes_decode_to_half() {
        let q = ResidualQuantizer::with_unit_gains(ScaleSchedule::new(vec![(3, 3)]).unwrap(), 4);
        let tokens = MultiScaleTokens {
            maps: vec![BitTokenMap {
                h: 3,
                w: 3,
                d_bits: 4,
                bits: vec![1; 36],
            }],
        };
        let f = q.decode(&tokens).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn byte_format_round_trip() {
        let maps = vec![
            BitTokenMap {
                h: 1,
                w: 1,
                d_bits: 3,
                bits: vec![1, -1, 1],
            },
            BitTokenMap {
                h: 1,
                w: 2,
                d_bits: 3,
                bits: vec![-1, -1, 1, 1, 1, -1],
            },
        ];
        let t = MultiScaleTokens { maps };
        let b = t.to_bytes();
        assert_eq!(&b[..4], &2u32.to_le_bytes());
        assert_eq!(b.len(), 4 * 6 + 2);
        assert_eq!(b[24], 0b1110_0101);
        assert_eq!(b[25], 0);
        assert_eq!(MultiScaleTokens::from_bytes(&b).unwrap(), t);
        assert!(MultiScaleTokens::from_bytes(&b[..25]).is_err());
    }
}
