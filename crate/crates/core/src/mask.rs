//! Block-relaxed causal attention masks.
//!
//! Positions are grouped into blocks of `k` consecutive indices. A query may
//! read every key in its own block and in all earlier blocks. With `k = 1`
//! this is the ordinary lower-triangular causal mask.

use std::rc::Rc;

use crate::error::{FalconError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelaxedCausalMask {
    size: usize,
    k: usize,
    bits: Vec<bool>,
}

impl RelaxedCausalMask {
    pub fn new(size: usize, k: usize) -> Result<Self> {
        if size == 0 || k == 0 {
            return Err(FalconError::Validation(format!(
                "relaxed mask needs size >= 1 and k >= 1, got size={size} k={k}"
            )));
        }
        let mut bits = vec![false; size * size];
        for i in 0..size {
            // Everything up to the end of the query's block (ragged tail included).
            let end = ((i / k + 1) * k).min(size);
            bits[i * size..i * size + end].iter_mut().for_each(|b| *b = true);
        }
        Ok(RelaxedCausalMask { size, k, bits })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_of(&self, pos: usize) -> usize {
        pos / self.k
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_shared(&self) -> Rc<[bool]> {
        Rc::from(self.bits.as_slice())
    }
}

pub fn build_relaxed_mask(seq_len: usize, k: usize) -> Result<RelaxedCausalMask> {
    RelaxedCausalMask::new(seq_len, k)
}
