//! Block partitioning of a sequence and the per-block pooled KV pyramid.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{mean_pool_rows, Matrix, SeqTensor};

/// Validated partition of an `N × d` sequence into query and KV blocks with
/// an `H`-level pyramid per KV block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockLayout {
    pub seq_len: usize,
    pub head_dim: usize,
    pub q_block: usize,
    pub kv_block: usize,
    pub levels: usize,
    pub n_q: usize,
    pub n_k: usize,
}

impl BlockLayout {
    pub fn new(seq_len: usize, head_dim: usize, q_block: usize, kv_block: usize, levels: usize) -> Result<Self> {
        if seq_len == 0 || head_dim == 0 {
            return Err(Error::Layout(
                "sequence length and head dimension must be positive".into(),
            ));
        }
        if q_block == 0 || kv_block == 0 {
            return Err(Error::Layout("block sizes must be positive".into()));
        }
        if levels == 0 {
            return Err(Error::Layout("number of pyramid levels H must be at least 1".into()));
        }
        if !seq_len.is_multiple_of(q_block) {
            return Err(Error::Layout(format!(
                "N={seq_len} is not divisible by query block size b_q={q_block}"
            )));
        }
        if !seq_len.is_multiple_of(kv_block) {
            return Err(Error::Layout(format!(
                "N={seq_len} is not divisible by KV block size b_k={kv_block}"
            )));
        }
        let coarsest = 1usize.checked_shl(levels as u32 - 1).filter(|&f| f <= kv_block);
        match coarsest {
            Some(f) if kv_block.is_multiple_of(f) => {}
            _ => {
                return Err(Error::Layout(format!(
                    "b_k={kv_block} is not divisible by 2^(H-1) with H={levels}"
                )))
            }
        }
        Ok(Self {
            seq_len,
            head_dim,
            q_block,
            kv_block,
            levels,
            n_q: seq_len / q_block,
            n_k: seq_len / kv_block,
        })
    }

    /// Pooled rows in one KV block at level `h` (1-based): `b_k / 2^(h-1)`.
    pub fn level_len(&self, h: usize) -> usize {
        debug_assert!((1..=self.levels).contains(&h));
        self.kv_block >> (h - 1)
    }

    pub fn q_range(&self, i: usize) -> std::ops::Range<usize> {
        i * self.q_block..(i + 1) * self.q_block
    }

    pub fn kv_range(&self, j: usize) -> std::ops::Range<usize> {
        j * self.kv_block..(j + 1) * self.kv_block
    }

    pub(crate) fn check_seq(&self, name: &'static str, x: &SeqTensor) -> Result<()> {
        if x.shape() != (self.seq_len, self.head_dim) {
            return Err(Error::mismatch(
                name,
                format!("{}x{}", self.seq_len, self.head_dim),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        Ok(())
    }
}

/// Pooled keys and values for every KV block and level.
#[derive(Debug, Clone)]
pub struct PyramidKV {
    layout: BlockLayout,
    // [block][level - 1]
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
}

impl PyramidKV {
    /// Pools each KV block independently by successive halving; pooling never
    /// crosses a block boundary.
    pub fn build(k: &SeqTensor, v: &SeqTensor, layout: BlockLayout) -> Result<Self> {
        layout.check_seq("build_pyramid (K)", k)?;
        layout.check_seq("build_pyramid (V)", v)?;
        let tower = |x: &SeqTensor, j: usize| {
            let mut levels = Vec::with_capacity(layout.levels);
            levels.push(x.slice_rows(layout.kv_range(j)));
            for h in 1..layout.levels {
                let next = mean_pool_rows(&levels[h - 1]);
                levels.push(next);
            }
            levels
        };
        let keys = (0..layout.n_k).map(|j| tower(k, j)).collect();
        let values = (0..layout.n_k).map(|j| tower(v, j)).collect();
        Ok(Self { layout, keys, values })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// Key block `j` at level `h` (1-based).
    pub fn keys(&self, j: usize, h: usize) -> &Matrix {
        &self.keys[j][h - 1]
    }

    pub fn values(&self, j: usize, h: usize) -> &Matrix {
        &self.values[j][h - 1]
    }

    /// The raw (level-1) key block.
    pub fn raw_keys(&self, j: usize) -> &Matrix {
        self.keys(j, 1)
    }
}
