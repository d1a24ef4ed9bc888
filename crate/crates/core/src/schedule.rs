//! Decoupled block/tile execution.
//!
//! Logical KV blocks shrink to `b_k / 2^(h-1)` pooled rows at level `h`, so
//! executing one block per kernel step leaves most of a fixed-size tile idle
//! at coarse levels. The scheduler instead packs the pooled rows selected for
//! a query block into tiles of `tile_len` rows, merging consecutive blocks
//! into one tile and splitting blocks that overflow it. Packing follows
//! ascending KV block order and never crosses query blocks, so the online
//! softmax state stays per query block and accumulation order is fixed.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{biased_logit, check_inputs, collect_rows, AttentionOutput, OnlineRow};
use crate::error::{Error, Result};
use crate::mask::MultiLevelMask;
use crate::numerics::SeqTensor;
use crate::pyramid::{BlockLayout, PyramidKV};

/// Contiguous pooled rows `rows` of KV block `kv_block` at level `level`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub kv_block: usize,
    pub level: u8,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionTile {
    pub query_block: usize,
    pub segments: Vec<Segment>,
    /// Pooled rows in use, at most `tile_len`.
    pub filled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TileSchedule {
    pub tile_len: usize,
    pub tiles: Vec<ExecutionTile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilizationStats {
    pub tiles: usize,
    pub useful_rows: usize,
    pub capacity: usize,
    /// `useful_rows / capacity`; 0 for an empty schedule.
    pub utilization: f64,
}

/// Pooled-row segments selected by one mask row, in ascending KV order.
fn selected_segments<'a>(
    mask: &'a MultiLevelMask,
    layout: &BlockLayout,
    i: usize,
) -> impl Iterator<Item = Segment> + 'a {
    let layout = *layout;
    mask.row(i)
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 0)
        .map(move |(j, &h)| Segment {
            kv_block: j,
            level: h,
            rows: 0..layout.level_len(h as usize),
        })
}

fn check_tile_len(tile_len: usize) -> Result<()> {
    if tile_len == 0 {
        return Err(Error::invalid("tile_len must be at least 1"));
    }
    Ok(())
}

/// Greedy in-order packing with merge and split.
pub fn build_schedule(mask: &MultiLevelMask, layout: &BlockLayout, tile_len: usize) -> Result<TileSchedule> {
    check_tile_len(tile_len)?;
    mask.check_layout(layout)?;
    let mut tiles = Vec::new();
    for i in 0..layout.n_q {
        let mut current = ExecutionTile {
            query_block: i,
            segments: Vec::new(),
            filled: 0,
        };
        for seg in selected_segments(mask, layout, i) {
            let mut start = seg.rows.start;
            while start < seg.rows.end {
                let take = (tile_len - current.filled).min(seg.rows.end - start);
                current.segments.push(Segment {
                    rows: start..start + take,
                    ..seg
                });
                current.filled += take;
                start += take;
                if current.filled == tile_len {
                    let next = ExecutionTile {
                        query_block: i,
                        segments: Vec::new(),
                        filled: 0,
                    };
                    tiles.push(std::mem::replace(&mut current, next));
                }
            }
        }
        if current.filled > 0 {
            tiles.push(current);
        }
    }
    Ok(TileSchedule { tile_len, tiles })
}

/// Baseline packing: every selected block starts a fresh tile (split only
/// when it exceeds `tile_len`), mirroring a kernel whose tile equals the
/// logical block.
pub fn build_schedule_per_block(mask: &MultiLevelMask, layout: &BlockLayout, tile_len: usize) -> Result<TileSchedule> {
    check_tile_len(tile_len)?;
    mask.check_layout(layout)?;
    let mut tiles = Vec::new();
    for i in 0..layout.n_q {
        for seg in selected_segments(mask, layout, i) {
            for start in seg.rows.clone().step_by(tile_len) {
                let end = (start + tile_len).min(seg.rows.end);
                tiles.push(ExecutionTile {
                    query_block: i,
                    segments: vec![Segment {
                        rows: start..end,
                        ..seg.clone()
                    }],
                    filled: end - start,
                });
            }
        }
    }
    Ok(TileSchedule { tile_len, tiles })
}

pub fn utilization(schedule: &TileSchedule) -> UtilizationStats {
    let tiles = schedule.tiles.len();
    let useful_rows = schedule.tiles.iter().map(|t| t.filled).sum();
    let capacity = tiles * schedule.tile_len;
    UtilizationStats {
        tiles,
        useful_rows,
        capacity,
        utilization: if capacity == 0 {
            0.0
        } else {
            useful_rows as f64 / capacity as f64
        },
    }
}

fn validate(schedule: &TileSchedule, layout: &BlockLayout) -> Result<()> {
    check_tile_len(schedule.tile_len)?;
    let mut last_query = 0;
    // (query block, kv block, end row) of the previous segment.
    let mut cursor: Option<(usize, usize, usize)> = None;
    for (n, tile) in schedule.tiles.iter().enumerate() {
        let bad = |why: String| Err(Error::invalid(format!("inconsistent schedule at tile {n}: {why}")));
        if tile.query_block >= layout.n_q {
            return bad(format!("query block {} out of range", tile.query_block));
        }
        if tile.query_block < last_query {
            return bad("tiles are not grouped by ascending query block".into());
        }
        last_query = tile.query_block;
        let mut total = 0;
        for seg in &tile.segments {
            let h = seg.level as usize;
            if seg.kv_block >= layout.n_k || h == 0 || h > layout.levels {
                return bad(format!("segment ({}, level {h}) out of range", seg.kv_block));
            }
            if seg.rows.start >= seg.rows.end || seg.rows.end > layout.level_len(h) {
                return bad(format!("rows {:?} outside level {h} block", seg.rows));
            }
            if let Some((qb, kv, end)) = cursor {
                let behind =
                    qb == tile.query_block && (seg.kv_block < kv || (seg.kv_block == kv && seg.rows.start < end));
                if behind {
                    return bad("segments not in ascending, non-overlapping KV order".into());
                }
            }
            cursor = Some((tile.query_block, seg.kv_block, seg.rows.end));
            total += seg.rows.len();
        }
        if total != tile.filled || total > schedule.tile_len {
            return bad(format!(
                "filled={} but segments hold {total} rows (tile_len {})",
                tile.filled, schedule.tile_len
            ));
        }
    }
    Ok(())
}

/// Runs the online-softmax recurrence one tile at a time (tiles of a query
/// block in schedule order). A tile is one softmax chunk, whatever mix of
/// blocks and levels it holds, because the level bias is applied per row.
pub fn execute_schedule(
    q: &SeqTensor,
    pyramid: &PyramidKV,
    schedule: &TileSchedule,
    causal: bool,
) -> Result<AttentionOutput> {
    let layout = *pyramid.layout();
    validate(schedule, &layout)?;
    if causal {
        // Reuse the executor's causal checks on the mask the schedule encodes.
        let mut levels = vec![0u8; layout.n_q * layout.n_k];
        for tile in &schedule.tiles {
            for seg in &tile.segments {
                levels[tile.query_block * layout.n_k + seg.kv_block] = seg.level;
            }
        }
        let mask = MultiLevelMask::new(layout.n_q, layout.n_k, layout.levels, levels)?;
        check_inputs(q, pyramid, &mask, true)?;
    } else {
        layout.check_seq("execute_schedule (Q)", q)?;
    }

    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let dim = layout.head_dim;
    let blocks: Vec<Vec<OnlineRow>> = (0..layout.n_q)
        .into_par_iter()
        .map(|i| {
            let mut state: Vec<OnlineRow> = (0..layout.q_block).map(|_| OnlineRow::new(dim)).collect();
            let mut logits = Vec::with_capacity(schedule.tile_len);
            let mut values: Vec<&[f64]> = Vec::with_capacity(schedule.tile_len);
            for tile in schedule.tiles.iter().filter(|t| t.query_block == i) {
                for (p, row) in state.iter_mut().enumerate() {
                    let t = i * layout.q_block + p;
                    let qr = q.row(t);
                    logits.clear();
                    values.clear();
                    for seg in &tile.segments {
                        let h = seg.level as usize;
                        let (kh, vh) = (pyramid.keys(seg.kv_block, h), pyramid.values(seg.kv_block, h));
                        for r in seg.rows.clone() {
                            let masked = causal && h == 1 && seg.kv_block * layout.kv_block + r > t;
                            logits.push(biased_logit(qr, kh.row(r), scale, h, masked));
                            values.push(vh.row(r));
                        }
                    }
                    row.absorb(&logits, |r| values[r]);
                }
            }
            state
        })
        .collect();
    Ok(collect_rows(blocks.into_iter().flatten().collect(), dim))
}
