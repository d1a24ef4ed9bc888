//! Dense attention, the materialised multi-level reference, and the
//! streaming online-softmax executor.
//!
//! A pooled key at level `h` stands for `2^(h-1)` tokens, so its logit gets
//! the additive bias `(h-1)·ln 2` before normalisation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::MultiLevelMask;
use crate::numerics::{dot, softmax_in_place, Matrix, SeqTensor};
use crate::pyramid::{BlockLayout, PyramidKV};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// Per-row `m + ln l`; `-inf` for rows that attended nothing.
    pub log_normalizers: Vec<f64>,
    /// Rows whose mask selected no visible key; their output is zero.
    pub skipped_rows: usize,
}

/// Additive logit bias for pyramid level `h` in a pyramid of height `levels`.
pub fn level_bias(h: usize, levels: usize) -> Result<f64> {
    if h == 0 || h > levels {
        return Err(Error::invalid(format!("level {h} outside 1..={levels}")));
    }
    Ok((h - 1) as f64 * std::f64::consts::LN_2)
}

#[inline]
fn bias(h: usize) -> f64 {
    (h - 1) as f64 * std::f64::consts::LN_2
}

/// Running max / sum / rescaled output for one query row.
#[derive(Debug, Clone)]
pub(crate) struct OnlineRow {
    max: f64,
    sum: f64,
    acc: Vec<f64>,
}

impl OnlineRow {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            acc: vec![0.0; dim],
        }
    }

    /// Folds one chunk of logits (`-inf` marks masked keys) and the matching
    /// value rows into the running state.
    pub(crate) fn absorb<'a>(&mut self, logits: &[f64], values: impl Fn(usize) -> &'a [f64]) {
        let chunk_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let new_max = self.max.max(chunk_max);
        if new_max == f64::NEG_INFINITY {
            return;
        }
        let rescale = (self.max - new_max).exp();
        self.sum *= rescale;
        self.acc.iter_mut().for_each(|a| *a *= rescale);
        for (t, &s) in logits.iter().enumerate() {
            if s == f64::NEG_INFINITY {
                continue;
            }
            let p = (s - new_max).exp();
            self.sum += p;
            for (a, v) in self.acc.iter_mut().zip(values(t)) {
                *a += p * v;
            }
        }
        self.max = new_max;
    }

    /// Writes `acc / sum` into `out`; returns the log-normaliser, or `None`
    /// when nothing was attended.
    pub(crate) fn finish(self, out: &mut [f64]) -> Option<f64> {
        if self.sum == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return None;
        }
        for (o, a) in out.iter_mut().zip(&self.acc) {
            *o = a / self.sum;
        }
        Some(self.max + self.sum.ln())
    }
}

pub(crate) fn collect_rows(rows: Vec<OnlineRow>, dim: usize) -> AttentionOutput {
    let n = rows.len();
    let mut output = Matrix::zeros(n, dim);
    let mut log_normalizers = Vec::with_capacity(n);
    let mut skipped_rows = 0;
    for (r, row) in rows.into_iter().enumerate() {
        match row.finish(output.row_mut(r)) {
            Some(z) => log_normalizers.push(z),
            None => {
                skipped_rows += 1;
                log_normalizers.push(f64::NEG_INFINITY);
            }
        }
    }
    AttentionOutput {
        output,
        log_normalizers,
        skipped_rows,
    }
}

fn check_qkv(q: &SeqTensor, k: &SeqTensor, v: &SeqTensor) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::mismatch(
            "full_attention",
            "Q: n x d, K: m x d, V: m x e",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if q.is_empty() || k.rows() == 0 {
        return Err(Error::Empty("full_attention"));
    }
    Ok(())
}

fn dense(q: &SeqTensor, k: &SeqTensor, v: &SeqTensor, causal: bool) -> Result<AttentionOutput> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dim = v.cols();
    let rows: Vec<(Vec<f64>, Option<f64>)> = (0..q.rows())
        .into_par_iter()
        .map(|r| {
            let qr = q.row(r);
            let mut p: Vec<f64> = (0..k.rows())
                .map(|c| {
                    if causal && c > r {
                        f64::NEG_INFINITY
                    } else {
                        dot(qr, k.row(c)) * scale
                    }
                })
                .collect();
            let (max, sum) = softmax_in_place(&mut p);
            let mut out = vec![0.0; dim];
            for (c, &w) in p.iter().enumerate() {
                if w != 0.0 {
                    for (o, x) in out.iter_mut().zip(v.row(c)) {
                        *o += w * x;
                    }
                }
            }
            (out, (sum > 0.0).then(|| max + sum.ln()))
        })
        .collect();
    let mut output = Matrix::zeros(q.rows(), dim);
    let mut log_normalizers = Vec::with_capacity(q.rows());
    let mut skipped_rows = 0;
    for (r, (o, z)) in rows.into_iter().enumerate() {
        output.row_mut(r).copy_from_slice(&o);
        log_normalizers.push(z.unwrap_or_else(|| {
            skipped_rows += 1;
            f64::NEG_INFINITY
        }));
    }
    Ok(AttentionOutput {
        output,
        log_normalizers,
        skipped_rows,
    })
}

/// `softmax(QKᵀ/√d)·V`.
pub fn full_attention(q: &SeqTensor, k: &SeqTensor, v: &SeqTensor) -> Result<AttentionOutput> {
    dense(q, k, v, false)
}

/// Dense attention where token `t` only sees keys `0..=t`.
pub fn full_attention_causal(q: &SeqTensor, k: &SeqTensor, v: &SeqTensor) -> Result<AttentionOutput> {
    dense(q, k, v, true)
}

pub(crate) fn check_inputs(q: &SeqTensor, pyramid: &PyramidKV, mask: &MultiLevelMask, causal: bool) -> Result<()> {
    let layout = pyramid.layout();
    layout.check_seq("sparse attention (Q)", q)?;
    mask.check_layout(layout)?;
    if causal {
        check_causal_mask(mask, layout)?;
    }
    Ok(())
}

/// In causal mode only level-1 blocks may touch the causal boundary.
fn check_causal_mask(mask: &MultiLevelMask, layout: &BlockLayout) -> Result<()> {
    for i in 0..layout.n_q {
        let q_start = layout.q_range(i).start;
        for j in 0..layout.n_k {
            let h = mask.get(i, j);
            if h > 1 && layout.kv_range(j).end - 1 > q_start {
                return Err(Error::invalid(format!(
                    "causal mode: block ({i}, {j}) at level {h} crosses the causal boundary; apply the causal pre-mask first"
                )));
            }
        }
    }
    Ok(())
}

/// Logit for a level-`h` pooled key, honouring the token-level causal mask
/// on level-1 blocks.
#[inline]
pub(crate) fn biased_logit(q_row: &[f64], key: &[f64], scale: f64, h: usize, masked: bool) -> f64 {
    if masked {
        f64::NEG_INFINITY
    } else {
        dot(q_row, key) * scale + bias(h)
    }
}

/// Materialised reference: for every query row, concatenate the selected
/// pooled keys, bias them by level, softmax once and mix the pooled values.
pub fn psa_reference(
    q: &SeqTensor,
    pyramid: &PyramidKV,
    mask: &MultiLevelMask,
    causal: bool,
) -> Result<AttentionOutput> {
    check_inputs(q, pyramid, mask, causal)?;
    let layout = pyramid.layout();
    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let dim = layout.head_dim;
    let rows: Vec<OnlineRow> = (0..layout.seq_len)
        .into_par_iter()
        .map(|t| {
            let i = t / layout.q_block;
            let qr = q.row(t);
            let mut logits = Vec::new();
            let mut values: Vec<&[f64]> = Vec::new();
            for j in 0..layout.n_k {
                let h = mask.get(i, j) as usize;
                if h == 0 {
                    continue;
                }
                let (kh, vh) = (pyramid.keys(j, h), pyramid.values(j, h));
                for r in 0..kh.rows() {
                    let masked = causal && h == 1 && j * layout.kv_block + r > t;
                    logits.push(biased_logit(qr, kh.row(r), scale, h, masked));
                    values.push(vh.row(r));
                }
            }
            let mut row = OnlineRow::new(dim);
            let (max, sum) = softmax_in_place(&mut logits);
            if sum > 0.0 {
                // One "chunk" whose logits are already probabilities: store
                // them directly so the reference performs a single softmax.
                for (p, v) in logits.iter().zip(&values) {
                    for (a, x) in row.acc.iter_mut().zip(v.iter()) {
                        *a += p * x;
                    }
                }
                row.max = max + sum.ln();
                row.sum = 1.0;
            }
            row
        })
        .collect();
    Ok(collect_rows(rows, dim))
}

/// Streaming executor: one pass over KV blocks in ascending order per query
/// block, maintaining the running max, running sum and rescaled
/// accumulator for every query row; skipped (level-0) blocks cost nothing.
pub fn psa_streaming(
    q: &SeqTensor,
    pyramid: &PyramidKV,
    mask: &MultiLevelMask,
    causal: bool,
) -> Result<AttentionOutput> {
    check_inputs(q, pyramid, mask, causal)?;
    let layout = *pyramid.layout();
    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let dim = layout.head_dim;
    let blocks: Vec<Vec<OnlineRow>> = (0..layout.n_q)
        .into_par_iter()
        .map(|i| {
            let mut state: Vec<OnlineRow> = (0..layout.q_block).map(|_| OnlineRow::new(dim)).collect();
            let mut logits = Vec::with_capacity(layout.kv_block);
            for j in 0..layout.n_k {
                let h = mask.get(i, j) as usize;
                if h == 0 {
                    continue;
                }
                let (kh, vh) = (pyramid.keys(j, h), pyramid.values(j, h));
                for (p, row) in state.iter_mut().enumerate() {
                    let t = i * layout.q_block + p;
                    let qr = q.row(t);
                    logits.clear();
                    logits.extend((0..kh.rows()).map(|r| {
                        let masked = causal && h == 1 && j * layout.kv_block + r > t;
                        biased_logit(qr, kh.row(r), scale, h, masked)
                    }));
                    row.absorb(&logits, |r| vh.row(r));
                }
            }
            state
        })
        .collect();
    Ok(collect_rows(blocks.into_iter().flatten().collect(), dim))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::mask::{apply_causal, MultiLevelMask};
    use crate::numerics::relative_error;
    use crate::synth;
    use proptest::prelude::*;

    /// Independent route: each pooled key carries weight `2^(h-1)` on its
    /// exponential instead of an additive log-bias; no max subtraction.
    fn brute_force(q: &Matrix, p: &PyramidKV, m: &MultiLevelMask) -> Matrix {
        let l = p.layout();
        let mut out = Matrix::zeros(l.seq_len, l.head_dim);
        for t in 0..l.seq_len {
            let i = t / l.q_block;
            let mut z = 0.0;
            let mut acc = vec![0.0; l.head_dim];
            for j in 0..l.n_k {
                let h = m.get(i, j) as usize;
                if h == 0 {
                    continue;
                }
                let weight = (1u32 << (h - 1)) as f64;
                for r in 0..p.keys(j, h).rows() {
                    let mut s = 0.0;
                    for c in 0..l.head_dim {
                        s += q.get(t, c) * p.keys(j, h).get(r, c);
                    }
                    let e = weight * (s / (l.head_dim as f64).sqrt()).exp();
                    z += e;
                    for c in 0..l.head_dim {
                        acc[c] += e * p.values(j, h).get(r, c);
                    }
                }
            }
            if z > 0.0 {
                for c in 0..l.head_dim {
                    out.row_mut(t)[c] = acc[c] / z;
                }
            }
        }
        out
    }

    fn random_mask(n_q: usize, n_k: usize, levels: usize, seed: u64) -> MultiLevelMask {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lv = (0..n_q * n_k).map(|_| rng.random_range(0..=levels as u8)).collect();
        MultiLevelMask::new(n_q, n_k, levels, lv).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn level_bias_values() {
        assert_eq!(level_bias(1, 4).unwrap(), 0.0);
        assert!((level_bias(2, 4).unwrap() - 0.693147).abs() < 1e-6);
        assert!((level_bias(4, 4).unwrap() - 2.079442).abs() < 1e-6);
        assert!(level_bias(0, 4).is_err());
        assert!(level_bias(5, 4).is_err());
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = synth::gaussian(1, 4, 1);
        let v = synth::gaussian(1, 4, 2);
        let o = full_attention(&q, &synth::gaussian(1, 4, 3), &v).unwrap();
        assert!(relative_error(&o.output, &v).unwrap() < 1e-15);
    }

    #[test]
    fn identical_keys_give_column_mean() {
        let q = synth::gaussian(6, 3, 1);
        let k = Matrix::new(6, 3, [0.2, -0.7, 1.1].repeat(6)).unwrap();
        let v = synth::gaussian(6, 3, 2);
        let o = full_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean = (0..6).map(|r| v.get(r, c)).sum::<f64>() / 6.0;
            for r in 0..6 {
                assert!((o.output.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_naive_two_pass() {
        let (q, k, v) = (
            synth::gaussian(128, 32, 1),
            synth::gaussian(128, 32, 2),
            synth::gaussian(128, 32, 3),
        );
        let o = full_attention(&q, &k, &v).unwrap();
        // Naive: materialise scores, normalise, multiply.
        let scale = 1.0 / 32f64.sqrt();
        let mut naive = Matrix::zeros(128, 32);
        for r in 0..128 {
            let e: Vec<f64> = (0..128).map(|c| (dot(q.row(r), k.row(c)) * scale).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..32 {
                naive.row_mut(r)[c] = (0..128).map(|t| e[t] * v.get(t, c)).sum::<f64>() / z;
            }
        }
        assert!(relative_error(&o.output, &naive).unwrap() < 1e-6);
    }

    #[test]
    fn dense_rejects_mismatch() {
        assert!(full_attention(&Matrix::zeros(4, 3), &Matrix::zeros(4, 2), &Matrix::zeros(4, 2)).is_err());
    }

    fn setup(n: usize, d: usize, b: usize, levels: usize, seed: u64) -> (Matrix, Matrix, Matrix, PyramidKV) {
        let (q, k, v) = (
            synth::gaussian(n, d, seed),
            synth::gaussian(n, d, seed + 1),
            synth::gaussian(n, d, seed + 2),
        );
        let l = BlockLayout::new(n, d, b, b, levels).unwrap();
        let p = PyramidKV::build(&k, &v, l).unwrap();
        (q, k, v, p)
    }

    #[test]
    fn all_level_one_is_dense() {
        let (q, k, v, p) = setup(256, 64, 64, 4, 10);
        let full = full_attention(&q, &k, &v).unwrap();
        let m = MultiLevelMask::filled(4, 4, 4, 1).unwrap();
        let r = psa_reference(&q, &p, &m, false).unwrap();
        let s = psa_streaming(&q, &p, &m, false).unwrap();
        assert!(relative_error(&r.output, &full.output).unwrap() < 1e-12);
        assert!(relative_error(&s.output, &full.output).unwrap() < 1e-5);
        for (a, b) in s.log_normalizers.iter().zip(&full.log_normalizers) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_mask_flags_every_row() {
        let (q, _, _, p) = setup(32, 8, 8, 2, 3);
        let m = MultiLevelMask::filled(4, 4, 2, 0).unwrap();
        for o in [
            psa_reference(&q, &p, &m, false).unwrap(),
            psa_streaming(&q, &p, &m, false).unwrap(),
        ] {
            assert_eq!(o.skipped_rows, 32);
            assert!(o.output.as_slice().iter().all(|&x| x == 0.0));
            assert!(o.log_normalizers.iter().all(|&z| z == f64::NEG_INFINITY));
        }
    }

    #[test]
    fn mixed_levels_match_brute_force() {
        let (q, _, _, p) = setup(64, 8, 16, 3, 20);
        let m = random_mask(4, 4, 3, 1);
        let bf = brute_force(&q, &p, &m);
        let r = psa_reference(&q, &p, &m, false).unwrap();
        let s = psa_streaming(&q, &p, &m, false).unwrap();
        let keep: Vec<usize> = (0..64).filter(|t| m.row(t / 16).iter().any(|&h| h > 0)).collect();
        let pick =
            |x: &Matrix| Matrix::vstack(&keep.iter().map(|&t| x.slice_rows(t..t + 1)).collect::<Vec<_>>()).unwrap();
        assert!(relative_error(&pick(&r.output), &pick(&bf)).unwrap() < 1e-6);
        assert!(relative_error(&pick(&s.output), &pick(&r.output)).unwrap() < 1e-6);
    }

    #[test]
    fn two_blocks_levels_one_and_three() {
        let (q, _, _, p) = setup(32, 8, 16, 3, 40);
        let l = p.layout();
        // Single query block: use a 32-token query block over two 16-token KV blocks.
        let layout = BlockLayout::new(32, 8, 32, 16, 3).unwrap();
        assert_eq!(l.seq_len, layout.seq_len);
        let k = Matrix::vstack(&[p.raw_keys(0).clone(), p.raw_keys(1).clone()]).unwrap();
        let v = Matrix::vstack(&[p.values(0, 1).clone(), p.values(1, 1).clone()]).unwrap();
        let p = PyramidKV::build(&k, &v, layout).unwrap();
        let m = MultiLevelMask::from_rows(3, &[[1, 3]]).unwrap();
        let r = psa_reference(&q, &p, &m, false).unwrap();
        let s = psa_streaming(&q, &p, &m, false).unwrap();
        assert!(relative_error(&s.output, &r.output).unwrap() < 1e-6);
        assert!(relative_error(&r.output, &brute_force(&q, &p, &m)).unwrap() < 1e-6);
    }

    #[test]
    fn level_bias_reproduces_duplicated_tokens() {
        for h in [2usize, 3] {
            let factor = 1 << (h - 1);
            let n = 64;
            let q = synth::gaussian(n, 16, 7);
            let k = synth::duplicate_rows(&synth::gaussian(n / factor, 16, 8), factor);
            let v = synth::duplicate_rows(&synth::gaussian(n / factor, 16, 9), factor);
            let l = BlockLayout::new(n, 16, 16, 16, 3).unwrap();
            let p = PyramidKV::build(&k, &v, l).unwrap();
            let dense_mask = MultiLevelMask::filled(4, 4, 3, 1).unwrap();
            let pooled_mask = MultiLevelMask::filled(4, 4, 3, h as u8).unwrap();
            let a = psa_streaming(&q, &p, &dense_mask, false).unwrap();
            let b = psa_streaming(&q, &p, &pooled_mask, false).unwrap();
            assert!(relative_error(&b.output, &a.output).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn causal_dense_recovery() {
        let (q, k, v) = (
            synth::gaussian(64, 8, 1),
            synth::gaussian(64, 8, 2),
            synth::gaussian(64, 8, 3),
        );
        for (bq, bk) in [(16, 16), (16, 32), (32, 8)] {
            let l = BlockLayout::new(64, 8, bq, bk, 3).unwrap();
            let p = PyramidKV::build(&k, &v, l).unwrap();
            let m = apply_causal(&MultiLevelMask::filled(l.n_q, l.n_k, 3, 1).unwrap(), &l).unwrap();
            let want = full_attention_causal(&q, &k, &v).unwrap();
            let got = psa_streaming(&q, &p, &m, true).unwrap();
            assert!(relative_error(&got.output, &want.output).unwrap() < 1e-6);
            assert_eq!(got.skipped_rows, 0);
            let r = psa_reference(&q, &p, &m, true).unwrap();
            assert!(relative_error(&r.output, &want.output).unwrap() < 1e-6);
        }
    }

    #[test]
    fn causal_rejects_pooled_boundary_blocks() {
        let (q, _, _, p) = setup(32, 8, 16, 2, 4);
        let m = MultiLevelMask::filled(2, 2, 2, 2).unwrap();
        assert!(psa_streaming(&q, &p, &m, true).is_err());
    }

    #[test]
    fn rejects_mask_shape_mismatch() {
        let (q, _, _, p) = setup(32, 8, 16, 2, 4);
        assert!(psa_streaming(&q, &p, &MultiLevelMask::filled(2, 3, 2, 1).unwrap(), false).is_err());
        assert!(psa_reference(&q, &p, &MultiLevelMask::filled(2, 2, 3, 3).unwrap(), false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn streaming_matches_reference(seed in any::<u64>(), levels in 1usize..4, b in prop::sample::select(vec![8usize, 16, 32]), n_blocks in 1usize..6) {
            let n = b * n_blocks;
            let (q, _, _, p) = setup(n, 8, b, levels, seed % 1000);
            let m = random_mask(n_blocks, n_blocks, levels, seed);
            let r = psa_reference(&q, &p, &m, false).unwrap();
            let s = psa_streaming(&q, &p, &m, false).unwrap();
            prop_assert_eq!(r.skipped_rows, s.skipped_rows);
            if r.output.frobenius_norm() > 0.0 {
                prop_assert!(relative_error(&s.output, &r.output).unwrap() <= 1e-5);
            }
        }

        #[test]
        fn permutation_consistency(seed in any::<u64>()) {
            use crate::permute::Permutation;
            use rand::{seq::SliceRandom, SeedableRng};
            let n = 64;
            let (q, k, v) = (synth::gaussian(n, 8, seed), synth::gaussian(n, 8, seed ^ 5), synth::gaussian(n, 8, seed ^ 9));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let perm = Permutation::new(order).unwrap();
            let (qp, kp, vp) = (perm.apply(&q).unwrap(), perm.apply(&k).unwrap(), perm.apply(&v).unwrap());
            let l = BlockLayout::new(n, 8, 16, 16, 3).unwrap();
            let m = random_mask(4, 4, 3, seed);
            prop_assume!(m.levels().chunks(4).all(|r| r.iter().any(|&h| h > 0)));
            let sparse = psa_streaming(&qp, &PyramidKV::build(&kp, &vp, l).unwrap(), &m, false).unwrap().output;
            let oracle_on_permuted = full_attention(&qp, &kp, &vp).unwrap().output;
            let permuted_oracle = perm.apply(&full_attention(&q, &k, &v).unwrap().output).unwrap();
            let e1 = relative_error(&sparse, &oracle_on_permuted).unwrap();
            let e2 = relative_error(&sparse, &permuted_oracle).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-6);
        }

        #[test]
        fn block_relabeling_preserves_error(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (n, b) = (64, 16);
            let (q, k, v) = (synth::gaussian(n, 8, seed), synth::gaussian(n, 8, seed ^ 5), synth::gaussian(n, 8, seed ^ 9));
            let l = BlockLayout::new(n, 8, b, b, 3).unwrap();
            let m = random_mask(4, 4, 3, seed);
            prop_assume!(m.levels().chunks(4).all(|r| r.iter().any(|&h| h > 0)));
            let mut blocks: Vec<usize> = (0..4).collect();
            blocks.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffle = |x: &Matrix| Matrix::vstack(&blocks.iter().map(|&j| x.slice_rows(j * b..(j + 1) * b)).collect::<Vec<_>>()).unwrap();
            let rows: Vec<Vec<u8>> = blocks.iter().map(|&i| blocks.iter().map(|&j| m.get(i, j)).collect()).collect();
            let mp = MultiLevelMask::from_rows(3, &rows).unwrap();
            let err = |q: &Matrix, k: &Matrix, v: &Matrix, m: &MultiLevelMask| {
                let o = psa_streaming(q, &PyramidKV::build(k, v, l).unwrap(), m, false).unwrap();
                relative_error(&o.output, &full_attention(q, k, v).unwrap().output).unwrap()
            };
            let base = err(&q, &k, &v, &m);
            let moved = err(&shuffle(&q), &shuffle(&k), &shuffle(&v), &mp);
            prop_assert!((base - moved).abs() <= 1e-6);
        }
    }
}
