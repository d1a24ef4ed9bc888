//! Block-pair importance estimation and the adjacent-key similarity
//! diagnostic.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, softmax_in_place, Matrix, SeqTensor};
use crate::pyramid::BlockLayout;

/// `n_q × n_k` non-negative block-pair scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    scores: Matrix,
}

impl ImportanceMap {
    pub fn new(scores: Matrix) -> Result<Self> {
        if let Some(i) = scores.as_slice().iter().position(|&x| x < 0.0) {
            return Err(Error::invalid(format!("importance score {i} is negative")));
        }
        Ok(Self { scores })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn n_q(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_k(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.scores.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores.get(i, j)
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SamplerConfig {
    pub s_q: usize,
    pub s_k: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        if !(1..=layout.q_block).contains(&self.s_q) {
            return Err(Error::invalid(format!(
                "s_q={} must lie in 1..={}",
                self.s_q, layout.q_block
            )));
        }
        if !(1..=layout.kv_block).contains(&self.s_k) {
            return Err(Error::invalid(format!(
                "s_k={} must lie in 1..={}",
                self.s_k, layout.kv_block
            )));
        }
        Ok(())
    }
}

/// Sorted sample of `amount` distinct offsets in `0..len`, shifted by `base`.
fn sample_rows(rng: &mut ChaCha8Rng, base: usize, len: usize, amount: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = index::sample(rng, len, amount).into_iter().map(|i| base + i).collect();
    idx.sort_unstable();
    idx
}

/// Sampled estimator: per query block, `s_q` sampled queries score against
/// `s_k` sampled keys from every KV block. Each sampled query row is
/// softmax-normalised over the union of all sampled keys, then the
/// probabilities belonging to block `j` are reduced (max or mean) into
/// `S_ij`.
///
/// Sampling draws all query blocks in ascending order, then all KV blocks,
/// from one ChaCha8 stream seeded with `cfg.seed`.
pub fn importance_sampled(
    q: &SeqTensor,
    k: &SeqTensor,
    layout: &BlockLayout,
    cfg: &SamplerConfig,
    reducer: Reducer,
) -> Result<ImportanceMap> {
    layout.check_seq("importance_sampled (Q)", q)?;
    layout.check_seq("importance_sampled (K)", k)?;
    cfg.validate(layout)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q_samples: Vec<Vec<usize>> = (0..layout.n_q)
        .map(|i| sample_rows(&mut rng, i * layout.q_block, layout.q_block, cfg.s_q))
        .collect();
    let k_samples: Vec<usize> = (0..layout.n_k)
        .flat_map(|j| sample_rows(&mut rng, j * layout.kv_block, layout.kv_block, cfg.s_k))
        .collect();

    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let rows: Vec<Vec<f64>> = q_samples
        .par_iter()
        .map(|qs| {
            let mut s = vec![0.0; layout.n_k];
            let mut logits = vec![0.0; k_samples.len()];
            for &qi in qs {
                let qr = q.row(qi);
                for (l, &ki) in logits.iter_mut().zip(&k_samples) {
                    *l = dot(qr, k.row(ki)) * scale;
                }
                softmax_in_place(&mut logits);
                for (j, chunk) in logits.chunks_exact(cfg.s_k).enumerate() {
                    match reducer {
                        Reducer::Max => s[j] = chunk.iter().copied().fold(s[j], f64::max),
                        Reducer::Mean => s[j] += chunk.iter().sum::<f64>(),
                    }
                }
            }
            if reducer == Reducer::Mean {
                let n = (cfg.s_q * cfg.s_k) as f64;
                s.iter_mut().for_each(|x| *x /= n);
            }
            s
        })
        .collect();
    ImportanceMap::from_rows(&rows)
}

/// Strided antidiagonal estimator. Inside every `b_q × b_k` tile the local
/// position `(p, c)` is scored iff `(p + c) % stride == 0`. Each query row
/// is softmax-normalised over its scored positions across all KV blocks and
/// `S_ij` is the mean (over the `b_q` rows of block `i`) of the probability
/// mass landing in block `j`, so every row of `S` sums to 1.
pub fn importance_antidiagonal(
    q: &SeqTensor,
    k: &SeqTensor,
    layout: &BlockLayout,
    stride: usize,
) -> Result<ImportanceMap> {
    layout.check_seq("importance_antidiagonal (Q)", q)?;
    layout.check_seq("importance_antidiagonal (K)", k)?;
    if stride == 0 || !layout.kv_block.is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "antidiagonal stride {stride} must be positive and divide b_k={}",
            layout.kv_block
        )));
    }
    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let per_block = layout.kv_block / stride;
    let rows: Vec<Vec<f64>> = (0..layout.n_q)
        .into_par_iter()
        .map(|i| {
            let mut s = vec![0.0; layout.n_k];
            let mut logits = vec![0.0; layout.n_k * per_block];
            for p in 0..layout.q_block {
                let qr = q.row(i * layout.q_block + p);
                // First selected local column in every block for this row.
                let first = (stride - p % stride) % stride;
                for j in 0..layout.n_k {
                    for (t, c) in (first..layout.kv_block).step_by(stride).enumerate() {
                        logits[j * per_block + t] = dot(qr, k.row(j * layout.kv_block + c)) * scale;
                    }
                }
                softmax_in_place(&mut logits);
                for (j, chunk) in logits.chunks_exact(per_block).enumerate() {
                    s[j] += chunk.iter().sum::<f64>();
                }
            }
            let inv = 1.0 / layout.q_block as f64;
            s.iter_mut().for_each(|x| *x *= inv);
            s
        })
        .collect();
    ImportanceMap::from_rows(&rows)
}

/// Number of scored positions in one `b_q × b_k` tile under the
/// antidiagonal rule.
pub fn antidiagonal_positions(q_block: usize, kv_block: usize, stride: usize) -> usize {
    (0..q_block)
        .map(|p| (0..kv_block).filter(|c| (p + c) % stride == 0).count())
        .sum()
}

/// Mean cosine similarity of row pairs `(t, t + stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityStats {
    /// Mean over evaluated pairs; `None` when no pair could be evaluated.
    pub mean: Option<f64>,
    pub pairs: usize,
    /// Pairs skipped because one side had zero norm.
    pub skipped: usize,
}

pub(crate) fn strided_similarity(x: &Matrix, stride: usize) -> SimilarityStats {
    let mut sum = 0.0;
    let (mut pairs, mut skipped) = (0, 0);
    for t in 0..x.rows().saturating_sub(stride) {
        match cosine(x.row(t), x.row(t + stride)) {
            Some(c) => {
                sum += c;
                pairs += 1;
            }
            None => skipped += 1,
        }
    }
    SimilarityStats {
        mean: (pairs > 0).then(|| sum / pairs as f64),
        pairs,
        skipped,
    }
}

pub fn adjacent_key_similarity(k: &SeqTensor, stride: usize) -> Result<SimilarityStats> {
    if stride == 0 || k.rows() <= stride {
        return Err(Error::invalid(format!(
            "adjacent_key_similarity needs 0 < stride < N (stride={stride}, N={})",
            k.rows()
        )));
    }
    Ok(strided_similarity(k, stride))
}
