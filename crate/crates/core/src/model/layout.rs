//! Sequence layout `[C, S | scale 1 .. scale K | reference]` and its admissibility mask.

use std::ops::Range;

use crate::numerics::{Real, Tensor, MASK_NEG};
use crate::tokenizer::ScaleSchedule;

pub const PREFIX: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    schedule: ScaleSchedule,
    n_ref: usize,
}

/// Which part of the layout a row or column belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Prefix,
    Scale(usize),
    Reference,
}

impl SequenceLayout {
    pub fn new(schedule: ScaleSchedule, n_ref: usize) -> Self {
        Self { schedule, n_ref }
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    /// Prefix plus all scale segments.
    pub fn generated_len(&self) -> usize {
        PREFIX + self.schedule.total_tokens()
    }

    pub fn total_len(&self) -> usize {
        self.generated_len() + self.n_ref
    }

    /// Rows of scale `k` (0-based).
    pub fn segment(&self, k: usize) -> Range<usize> {
        let start = PREFIX + self.schedule.offset(k);
        start..start + self.schedule.tokens(k)
    }

    pub fn reference(&self) -> Range<usize> {
        self.generated_len()..self.total_len()
    }

    pub fn slot(&self, i: usize) -> Slot {
        if i < PREFIX {
            return Slot::Prefix;
        }
        if i >= self.generated_len() {
            return Slot::Reference;
        }
        let t = i - PREFIX;
        let mut k = 0;
        while t >= self.schedule.offset(k + 1) {
            k += 1;
        }
        Slot::Scale(k)
    }

    /// Admissibility of query `row` attending key `col` (absolute positions).
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        match (self.slot(row), self.slot(col)) {
            (Slot::Prefix, c) => c == Slot::Prefix,
            (Slot::Reference, c) => c == Slot::Reference,
            (Slot::Scale(_), Slot::Prefix) | (Slot::Scale(_), Slot::Reference) => true,
            (Slot::Scale(k), Slot::Scale(j)) => j <= k,
        }
    }
}

/// Boolean admissibility matrix over the full layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    pub fn row_count(&self, row: usize) -> usize {
        self.allowed[row * self.n..(row + 1) * self.n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Additive `0 / -1e9` bias for the given absolute rows and columns.
    pub fn bias<T: Real>(&self, rows: &[usize], cols: &[usize]) -> Tensor<T> {
        let neg = T::lit(MASK_NEG);
        Tensor::from_fn(&[rows.len(), cols.len()], |i| {
            let (r, c) = (rows[i / cols.len()], cols[i % cols.len()]);
            if self.get(r, c) {
                T::zero()
            } else {
                neg
            }
        })
    }
}

pub fn build_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.total_len();
    let mut allowed = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            allowed[r * n + c] = layout.allowed(r, c);
        }
    }
    AttentionMask { n, allowed }
}
