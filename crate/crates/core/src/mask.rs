//! Multi-level mask generation, the similarity-based level cap, and compute
//! budget accounting.
//!
//! A mask entry `M[i][j] = h > 0` means query block `i` reads KV block `j` at
//! pyramid level `h`; `0` skips the pair. Level `h` costs `2^(1-h)` of a dense
//! block, which is what [`sparsity_report`] sums into the effective budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{strided_similarity, ImportanceMap};
use crate::pyramid::{BlockLayout, PyramidKV};

/// Slack applied to cumulative-score comparisons so that hand-written
/// thresholds such as `0.8` match cumulative sums that round a few ulps high.
pub const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiLevelMask {
    n_q: usize,
    n_k: usize,
    depth: usize,
    levels: Vec<u8>,
}

impl MultiLevelMask {
    /// `depth` is the pyramid height `H` the mask was generated for.
    pub fn new(n_q: usize, n_k: usize, depth: usize, levels: Vec<u8>) -> Result<Self> {
        if levels.len() != n_q * n_k {
            return Err(Error::mismatch("MultiLevelMask::new", n_q * n_k, levels.len()));
        }
        if depth == 0 || depth > u8::MAX as usize {
            return Err(Error::invalid(format!("mask depth {depth} out of range")));
        }
        if let Some(bad) = levels.iter().find(|&&h| h as usize > depth) {
            return Err(Error::invalid(format!("mask level {bad} exceeds depth {depth}")));
        }
        Ok(Self {
            n_q,
            n_k,
            depth,
            levels,
        })
    }

    pub fn filled(n_q: usize, n_k: usize, depth: usize, level: u8) -> Result<Self> {
        Self::new(n_q, n_k, depth, vec![level; n_q * n_k])
    }

    pub fn from_rows<R: AsRef<[u8]>>(depth: usize, rows: &[R]) -> Result<Self> {
        let n_k = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != n_k) {
            return Err(Error::invalid("mask rows have unequal length"));
        }
        Self::new(
            rows.len(),
            n_k,
            depth,
            rows.iter().flat_map(|r| r.as_ref().to_vec()).collect(),
        )
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.levels[i * self.n_k + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.levels[i * self.n_k..(i + 1) * self.n_k]
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    /// Checks the mask against a layout before execution.
    pub fn check_layout(&self, layout: &BlockLayout) -> Result<()> {
        if (self.n_q, self.n_k) != (layout.n_q, layout.n_k) {
            return Err(Error::mismatch(
                "mask vs layout",
                format!("{}x{}", layout.n_q, layout.n_k),
                format!("{}x{}", self.n_q, self.n_k),
            ));
        }
        if let Some(bad) = self.levels.iter().find(|&&h| h as usize > layout.levels) {
            return Err(Error::invalid(format!(
                "mask level {bad} exceeds pyramid height {}",
                layout.levels
            )));
        }
        Ok(())
    }
}

/// Cumulative importance budgets `τ_1 ≤ … ≤ τ_H` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelThresholds(Vec<f64>);

impl LevelThresholds {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::invalid("at least one level threshold is required"));
        }
        if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid(format!("thresholds must lie in [0, 1]: {taus:?}")));
        }
        if taus.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!("thresholds must be non-decreasing: {taus:?}")));
        }
        Ok(Self(taus))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-level rank-fraction boundaries for quantile allocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileCutpoints(Vec<f64>);

impl QuantileCutpoints {
    /// Cut points must be non-decreasing in `[0, 1]`. A zero cut point is
    /// allowed so that a level can receive no blocks (PSA-2 puts nothing at
    /// levels 1 and 2).
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("at least one cut point is required"));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("cut points must lie in [0, 1]: {points:?}")));
        }
        if points.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!("cut points must be non-decreasing: {points:?}")));
        }
        Ok(Self(points))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Cumulative block counts per level for a row of `n_k` blocks, rounded
    /// half-up and clamped non-decreasing.
    pub fn counts(&self, n_k: usize) -> Vec<usize> {
        let mut prev = 0;
        self.0
            .iter()
            .map(|&p| {
                let c = ((p * n_k as f64 + 0.5 + 1e-9).floor() as usize).clamp(prev, n_k);
                prev = c;
                c
            })
            .collect()
    }
}

/// Fixed-budget allocation presets. Each spends a quarter of dense compute
/// but spreads it differently across levels 1 to 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "psa-1")]
    Psa1,
    #[serde(rename = "psa-2")]
    Psa2,
    #[serde(rename = "psa-3")]
    Psa3,
    #[serde(rename = "psa-4")]
    Psa4,
    #[serde(rename = "psa-5")]
    Psa5,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Psa1, Preset::Psa2, Preset::Psa3, Preset::Psa4, Preset::Psa5];

    /// Percent of KV blocks at levels 1, 2 and 3; the remainder is dropped.
    pub fn level_percents(self) -> [u32; 3] {
        match self {
            Preset::Psa1 => [25, 0, 0],
            Preset::Psa2 => [0, 0, 100],
            Preset::Psa3 => [15, 10, 20],
            Preset::Psa4 => [10, 20, 20],
            Preset::Psa5 => [10, 10, 40],
        }
    }

    /// Cut points for a pyramid of height `depth >= 3`; levels above 3 get
    /// no blocks.
    pub fn cutpoints(self, depth: usize) -> Result<QuantileCutpoints> {
        if depth < 3 {
            return Err(Error::invalid(format!(
                "preset {} needs at least 3 pyramid levels, got {depth}",
                self.name()
            )));
        }
        let mut acc = 0;
        let mut points: Vec<f64> = self
            .level_percents()
            .iter()
            .map(|p| {
                acc += p;
                f64::from(acc) / 100.0
            })
            .collect();
        points.resize(depth, f64::from(acc) / 100.0);
        QuantileCutpoints::new(points)
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Psa1 => "psa-1",
            Preset::Psa2 => "psa-2",
            Preset::Psa3 => "psa-3",
            Preset::Psa4 => "psa-4",
            Preset::Psa5 => "psa-5",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?} (expected psa-1..psa-5)")))
    }
}

/// Block indices of one row, most important first; ties go to the lower index.
fn rank_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Cumulative-threshold level assignment.
///
/// Each row is normalised to sum to one (an all-zero row becomes uniform),
/// sorted descending, and the block whose cumulative score is `Ê` gets the
/// smallest level `t` with `Ê ≤ τ_t`, or `0` when `Ê > τ_H`.
pub fn assign_threshold(s: &ImportanceMap, t: &LevelThresholds) -> MultiLevelMask {
    let taus = t.as_slice();
    let (n_q, n_k) = (s.n_q(), s.n_k());
    let mut levels = vec![0u8; n_q * n_k];
    for i in 0..n_q {
        let row = s.row(i);
        let total: f64 = row.iter().sum();
        let norm: Vec<f64> = if total > 0.0 {
            row.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / n_k as f64; n_k]
        };
        let mut cum = 0.0;
        for j in rank_desc(&norm) {
            cum += norm[j];
            let level = taus
                .iter()
                .position(|&tau| cum <= tau + THRESHOLD_SLACK)
                .map_or(0, |p| p + 1);
            levels[i * n_k + j] = level as u8;
        }
    }
    MultiLevelMask {
        n_q,
        n_k,
        depth: taus.len(),
        levels,
    }
}

/// Fixed-quota level assignment by importance rank.
pub fn assign_quantile(s: &ImportanceMap, c: &QuantileCutpoints) -> MultiLevelMask {
    let (n_q, n_k) = (s.n_q(), s.n_k());
    let counts = c.counts(n_k);
    let mut levels = vec![0u8; n_q * n_k];
    for i in 0..n_q {
        for (rank, j) in rank_desc(s.row(i)).into_iter().enumerate() {
            let level = counts.iter().position(|&cnt| rank < cnt).map_or(0, |p| p + 1);
            levels[i * n_k + j] = level as u8;
        }
    }
    MultiLevelMask {
        n_q,
        n_k,
        depth: counts.len(),
        levels,
    }
}

/// Keep-or-drop mask: blocks whose cumulative score is within `tau` stay at
/// level 1, the rest are dropped.
pub fn binary_mask(s: &ImportanceMap, tau: f64) -> Result<MultiLevelMask> {
    Ok(assign_threshold(s, &LevelThresholds::new(vec![tau])?))
}

/// Minimum intra-block cosine similarity `τ_s^(h)` for `h = 2..=H`.
/// `-1` disables the check for that level and `1` forbids the level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimThresholds(Vec<f64>);

impl SimThresholds {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.iter().any(|t| !(-1.0..=1.0).contains(t)) {
            return Err(Error::invalid(format!(
                "similarity thresholds must lie in [-1, 1]: {taus:?}"
            )));
        }
        Ok(Self(taus))
    }

    pub fn uniform(value: f64, depth: usize) -> Result<Self> {
        Self::new(vec![value; depth.saturating_sub(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-KV-block coarsest admissible level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LevelCap(Vec<u8>);

impl LevelCap {
    pub fn new(caps: Vec<u8>) -> Result<Self> {
        if caps.contains(&0) {
            return Err(Error::invalid("level caps must be at least 1"));
        }
        Ok(Self(caps))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// Similarity-derived level cap. Block `j` becomes eligible for level `h`
/// when the mean cosine similarity of its raw key rows at stride `2^(h-1)`
/// exceeds `τ_s^(h)`; the cap is the largest eligible level. Eligibility at
/// `h` does not require eligibility at `h - 1`.
///
/// A block with no evaluable pair at some stride (stride reaches the block
/// length, or every pair has a zero-norm row) is only eligible for that
/// level when the threshold is `-1`.
pub fn level_cap_from_similarity(pyramid: &PyramidKV, t: &SimThresholds) -> Result<LevelCap> {
    let layout = pyramid.layout();
    if t.as_slice().len() != layout.levels - 1 {
        return Err(Error::mismatch(
            "level_cap_from_similarity",
            format!("{} similarity thresholds", layout.levels - 1),
            t.as_slice().len(),
        ));
    }
    let caps = (0..layout.n_k)
        .map(|j| {
            let raw = pyramid.raw_keys(j);
            let mut cap = 1u8;
            for (h, &tau) in (2..=layout.levels).zip(t.as_slice()) {
                let eligible = if tau <= -1.0 {
                    true
                } else {
                    strided_similarity(raw, 1 << (h - 1)).mean.is_some_and(|sim| sim > tau)
                };
                if eligible {
                    cap = cap.max(h as u8);
                }
            }
            cap
        })
        .collect();
    LevelCap::new(caps)
}

/// `M̃_ij = min(M_ij, L_j)`; zeros stay zero.
pub fn combine_mask(m: &MultiLevelMask, cap: &LevelCap) -> Result<MultiLevelMask> {
    if cap.as_slice().len() != m.n_k {
        return Err(Error::mismatch(
            "combine_mask",
            format!("{} caps", m.n_k),
            cap.as_slice().len(),
        ));
    }
    let levels = m
        .levels
        .iter()
        .enumerate()
        .map(|(idx, &h)| h.min(cap.as_slice()[idx % m.n_k]))
        .collect();
    Ok(MultiLevelMask { levels, ..*m })
}

/// Restricts a mask to causal attention. Blocks entirely in the future of
/// the query block are dropped; blocks straddling the causal boundary are
/// forced to level 1 (the executor masks individual tokens there); blocks
/// entirely in the past keep their level.
pub fn apply_causal(m: &MultiLevelMask, layout: &BlockLayout) -> Result<MultiLevelMask> {
    m.check_layout(layout)?;
    let mut levels = m.levels.clone();
    for i in 0..m.n_q {
        let q = layout.q_range(i);
        for j in 0..m.n_k {
            let k = layout.kv_range(j);
            let slot = &mut levels[i * m.n_k + j];
            if k.start > q.end - 1 {
                *slot = 0;
            } else if k.end - 1 > q.start {
                *slot = 1;
            }
        }
    }
    Ok(MultiLevelMask { levels, ..*m })
}

/// Compute-budget summary of a mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    /// Effective budget `ρ̄`: mean of `2^(1-h)` over entries (0 when skipped).
    pub rho_bar: f64,
    pub sparsity: f64,
    /// Fraction of entries with level > 0.
    pub kv_coverage: f64,
    /// Fraction of entries at each level `0..=H`.
    pub level_histogram: Vec<f64>,
    pub level_counts: Vec<u64>,
    /// `ρ̄ = budget_numerator / budget_denominator`, exactly.
    pub budget_numerator: u64,
    pub budget_denominator: u64,
}

pub fn sparsity_report(m: &MultiLevelMask) -> SparsityReport {
    let depth = m.depth;
    let mut counts = vec![0u64; depth + 1];
    for &h in &m.levels {
        counts[h as usize] += 1;
    }
    let total = m.levels.len() as u64;
    // Each level-h entry costs 2^(H-h) units out of 2^(H-1) per dense entry.
    let numerator: u64 = (1..=depth).map(|h| counts[h] << (depth - h)).sum();
    let denominator = (total << (depth - 1)).max(1);
    let frac = |c: u64| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    SparsityReport {
        rho_bar: numerator as f64 / denominator as f64,
        sparsity: (denominator - numerator) as f64 / denominator as f64,
        kv_coverage: frac(total - counts[0]),
        level_histogram: counts.iter().map(|&c| frac(c)).collect(),
        level_counts: counts,
        budget_numerator: numerator,
        budget_denominator: denominator,
    }
}

/// Finds the largest parameter in `[lo, hi]` whose mask has `ρ̄ ≤ target`,
/// assuming `build` yields masks whose budget is non-decreasing in the
/// parameter. Returns the parameter and its mask.
pub fn fit_budget<F>(lo: f64, hi: f64, target: f64, mut build: F) -> Result<(f64, MultiLevelMask)>
where
    F: FnMut(f64) -> Result<MultiLevelMask>,
{
    let mut best = (lo, build(lo)?);
    if sparsity_report(&best.1).rho_bar > target {
        return Err(Error::invalid(format!(
            "budget {target} is below the smallest reachable budget"
        )));
    }
    let top = build(hi)?;
    if sparsity_report(&top).rho_bar <= target {
        return Ok((hi, top));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        let m = build(mid)?;
        if sparsity_report(&m).rho_bar <= target {
            a = mid;
            best = (mid, m);
        } else {
            b = mid;
        }
    }
    Ok(best)
}
