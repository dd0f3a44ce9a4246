//! Dynamic visibility mask over heterogeneous tokens.
//!
//! Row `i` is the query token, column `j` the key token. Visibility is decided
//! by the kind of the key:
//! - H keys are visible to every query;
//! - R keys are visible only to queries with a strictly later timestamp;
//! - T keys are visible only to themselves.

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::{Boundaries, TokenKind, TokenMeta};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    /// Number of visible keys per query row.
    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.rows).map(|i| self.row(i).iter().filter(|&&b| b).count()).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("sized by construction")
    }
}

pub fn build_mask(metas: &[TokenMeta]) -> MaskMatrix {
    let n = metas.len();
    let mut m = MaskMatrix::new(n, n);
    for (j, key) in metas.iter().enumerate() {
        match key.kind {
            TokenKind::H => (0..n).for_each(|i| m.set(i, j, true)),
            TokenKind::R => {
                for (i, q) in metas.iter().enumerate() {
                    m.set(i, j, q.timestamp > key.timestamp);
                }
            }
            TokenKind::T => m.set(j, j, true),
        }
    }
    m
}

/// Brute-force reference: evaluates the three visibility rules independently
/// for every `(query, key)` pair.
pub fn build_mask_oracle(metas: &[TokenMeta]) -> MaskMatrix {
    let n = metas.len();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let query = &metas[i];
            let key = &metas[j];
            let rule_h = key.kind == TokenKind::H;
            let rule_r = key.kind == TokenKind::R && query.timestamp > key.timestamp;
            let rule_t = key.kind == TokenKind::T && i == j;
            bits[i * n + j] = rule_h || rule_r || rule_t;
        }
    }
    MaskMatrix { rows: n, cols: n, bits }
}

/// Query rows belonging to T-tokens: an `L_T x N` sub-mask.
pub fn extract_t_rows(mask: &MaskMatrix, b: &Boundaries) -> Result<MaskMatrix> {
    if mask.rows != b.total() || mask.cols != b.total() {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, boundaries describe {} tokens",
            mask.rows,
            mask.cols,
            b.total()
        )));
    }
    let start = b.t_start() * mask.cols;
    Ok(MaskMatrix { rows: b.l_t, cols: mask.cols, bits: mask.bits[start..].to_vec() })
}
