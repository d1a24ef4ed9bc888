//! End-to-end orchestration: permute, pool, score, mask, cap, execute, compare.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{full_attention, full_attention_causal, psa_streaming};
use crate::config::{EstimatorPlan, MaskPlan, Plan, RunConfig};
use crate::error::{Error, Result, Stage, StageExt};
use crate::importance::{importance_antidiagonal, importance_sampled, SamplerConfig};
use crate::mask::{
    apply_causal, assign_quantile, assign_threshold, binary_mask, combine_mask, level_cap_from_similarity,
    sparsity_report, MultiLevelMask, SparsityReport,
};
use crate::numerics::{relative_error, Matrix};
use crate::permute::{hilbert_order, Permutation};
use crate::pyramid::{BlockLayout, PyramidKV};
use crate::schedule::{
    build_schedule, build_schedule_per_block, execute_schedule, utilization, TileSchedule, UtilizationStats,
};

#[derive(Debug, Clone, Serialize)]
pub struct HeadReport {
    pub head: usize,
    #[serde(flatten)]
    pub sparsity: SparsityReport,
    /// Streaming output against full attention on the same (permuted) inputs.
    pub relative_error: f64,
    /// Tiled execution against the streaming output.
    pub schedule_deviation: f64,
    pub utilization: UtilizationStats,
    /// One tile per KV block, for comparison.
    pub naive_utilization: UtilizationStats,
    pub skipped_rows: usize,
    /// Per-KV-block maximum level from the similarity cap, when enabled.
    pub level_cap: Option<Vec<u8>>,
}

/// Dense-prefix bookkeeping over a list of steps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepPlan {
    pub steps: usize,
    pub dense_steps: usize,
    pub sparse_steps: usize,
    /// Budget averaged over all steps, counting dense steps as 1.
    pub effective_rho_bar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: RunConfig,
    pub layout: BlockLayout,
    pub permuted: bool,
    pub heads: Vec<HeadReport>,
    pub mean_rho_bar: f64,
    pub mean_relative_error: f64,
    pub total_skipped_rows: usize,
    pub step_plan: StepPlan,
    pub wall_time_ms: f64,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// JSON without the timing field; identical across reruns of one config.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_ms");
        }
        serde_json::to_string_pretty(&v).expect("report serialises")
    }
}

/// Everything one head produced.
#[derive(Debug, Clone)]
pub struct HeadRun {
    pub report: HeadReport,
    pub mask: MultiLevelMask,
    pub schedule: TileSchedule,
    /// Sparse output, in original token order when `unpermute` is set.
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: Report,
    pub heads: Vec<HeadRun>,
}

/// Like `relative_error`, but two all-zero outputs agree exactly.
fn deviation(out: &Matrix, reference: &Matrix) -> Result<f64> {
    match relative_error(out, reference) {
        Err(Error::ZeroNormReference) => Ok(if out.frobenius_norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }),
        r => r,
    }
}

pub fn run_head(plan: &Plan, head: usize, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<HeadRun> {
    let layout = plan.layout;
    for (name, x) in [("Q", q), ("K", k), ("V", v)] {
        layout.check_seq(name, x).at(Stage::Config)?;
    }

    let perm = match &plan.grid {
        Some(g) => Some(hilbert_order(g).at(Stage::Permute)?),
        None => None,
    };
    let permute = |x: &Matrix| -> Result<Matrix> {
        match &perm {
            Some(p) => p.apply(x).at(Stage::Permute),
            None => Ok(x.clone()),
        }
    };
    let (q, k, v) = (permute(q)?, permute(k)?, permute(v)?);

    let pyramid = PyramidKV::build(&k, &v, layout).at(Stage::Pyramid)?;

    let scores = match plan.estimator {
        EstimatorPlan::Sampled {
            s_q,
            s_k,
            seed,
            reducer,
        } => importance_sampled(&q, &k, &layout, &SamplerConfig { s_q, s_k, seed }, reducer),
        EstimatorPlan::Antidiagonal { stride } => importance_antidiagonal(&q, &k, &layout, stride),
    }
    .at(Stage::Importance)?;

    let mut mask = match &plan.mask {
        MaskPlan::Threshold(t) => {
            if t.as_slice().len() != layout.levels {
                return Err(Error::invalid("threshold count must equal H")).at(Stage::Mask);
            }
            assign_threshold(&scores, t)
        }
        MaskPlan::Quantile(c) => {
            if c.as_slice().len() != layout.levels {
                return Err(Error::invalid("cut point count must equal H")).at(Stage::Mask);
            }
            assign_quantile(&scores, c)
        }
        // A binary mask is a depth-1 mask; it runs on the same pyramid.
        MaskPlan::Binary(tau) => {
            let m = binary_mask(&scores, *tau).at(Stage::Mask)?;
            MultiLevelMask::new(m.n_q(), m.n_k(), layout.levels, m.levels().to_vec()).at(Stage::Mask)?
        }
    };

    let level_cap = match &plan.sim {
        Some(t) => {
            let cap = level_cap_from_similarity(&pyramid, t).at(Stage::SimilarityCap)?;
            mask = combine_mask(&mask, &cap).at(Stage::SimilarityCap)?;
            Some(cap.as_slice().to_vec())
        }
        None => None,
    };
    if plan.causal {
        mask = apply_causal(&mask, &layout).at(Stage::Mask)?;
    }

    let sparse = psa_streaming(&q, &pyramid, &mask, plan.causal).at(Stage::Attention)?;
    let schedule = build_schedule(&mask, &layout, plan.tile_len).at(Stage::Schedule)?;
    let tiled = execute_schedule(&q, &pyramid, &schedule, plan.causal).at(Stage::Schedule)?;
    let naive = build_schedule_per_block(&mask, &layout, plan.tile_len).at(Stage::Schedule)?;

    let full = if plan.causal {
        full_attention_causal(&q, &k, &v)
    } else {
        full_attention(&q, &k, &v)
    }
    .at(Stage::Attention)?;
    let rel = relative_error(&sparse.output, &full.output).at(Stage::Compare)?;
    let schedule_deviation = deviation(&tiled.output, &sparse.output).at(Stage::Compare)?;

    let output = match (&perm, plan.unpermute) {
        (Some(p), true) => p.inverse().apply(&sparse.output).at(Stage::Permute)?,
        _ => sparse.output,
    };

    Ok(HeadRun {
        report: HeadReport {
            head,
            sparsity: sparsity_report(&mask),
            relative_error: rel,
            schedule_deviation,
            utilization: utilization(&schedule),
            naive_utilization: utilization(&naive),
            skipped_rows: sparse.skipped_rows,
            level_cap,
        },
        mask,
        schedule,
        output,
    })
}

/// Runs every head slice through the pipeline and aggregates a report.
pub fn run_pipeline(config: &RunConfig, q: &[Matrix], k: &[Matrix], v: &[Matrix]) -> Result<PipelineRun> {
    let start = Instant::now();
    if q.is_empty() {
        return Err(Error::Empty("run_pipeline")).at(Stage::Config);
    }
    if k.len() != q.len() || v.len() != q.len() {
        return Err(Error::mismatch(
            "run_pipeline heads",
            q.len(),
            format!("K={}, V={}", k.len(), v.len()),
        ))
        .at(Stage::Config);
    }
    let (n, d) = q[0].shape();
    let plan = config.plan(n, d).at(Stage::Config)?;

    let heads = (0..q.len())
        .map(|h| run_head(&plan, h, &q[h], &k[h], &v[h]))
        .collect::<Result<Vec<_>>>()?;

    let count = heads.len() as f64;
    let mean = |f: &dyn Fn(&HeadReport) -> f64| heads.iter().map(|h| f(&h.report)).sum::<f64>() / count;
    let mean_rho_bar = mean(&|h| h.sparsity.rho_bar);
    let sparse_steps = plan.steps - plan.dense_steps;
    let report = Report {
        config: config.clone(),
        layout: plan.layout,
        permuted: plan.grid.is_some(),
        mean_rho_bar,
        mean_relative_error: mean(&|h| h.relative_error),
        total_skipped_rows: heads.iter().map(|h| h.report.skipped_rows).sum(),
        step_plan: StepPlan {
            steps: plan.steps,
            dense_steps: plan.dense_steps,
            sparse_steps,
            effective_rho_bar: (plan.dense_steps as f64 + sparse_steps as f64 * mean_rho_bar) / plan.steps as f64,
        },
        heads: heads.iter().map(|h| h.report.clone()).collect(),
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(PipelineRun { report, heads })
}

/// Tiled schedules of every head, for inspection.
pub fn schedule_dump(run: &PipelineRun) -> String {
    let tiles: Vec<&TileSchedule> = run.heads.iter().map(|h| &h.schedule).collect();
    serde_json::to_string_pretty(&tiles).expect("schedule serialises")
}

/// Exposes the permutation a config would apply, if any.
pub fn config_permutation(config: &RunConfig) -> Result<Option<Permutation>> {
    config.grid.as_deref().map(hilbert_order).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EstimatorKind, MaskKind, SimSetting};
    use crate::error::ErrorKind;
    use crate::synth::gaussian;

    fn cfg() -> RunConfig {
        RunConfig {
            q_block: 16,
            kv_block: 16,
            levels: 3,
            s_q: 4,
            s_k: 4,
            seed: Some(5),
            thresholds: Some(vec![0.6, 0.8, 0.95]),
            tile_len: 16,
            ..RunConfig::default()
        }
    }

    fn qkv(n: usize, d: usize, seed: u64) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
        (
            vec![gaussian(n, d, seed)],
            vec![gaussian(n, d, seed + 1)],
            vec![gaussian(n, d, seed + 2)],
        )
    }

    #[test]
    fn dense_thresholds_recover_full_attention() {
        let c = RunConfig {
            thresholds: Some(vec![1.0; 3]),
            ..cfg()
        };
        let (q, k, v) = qkv(128, 8, 0);
        let run = run_pipeline(&c, &q, &k, &v).unwrap();
        let h = &run.report.heads[0];
        assert_eq!(h.sparsity.sparsity, 0.0);
        assert!(h.relative_error <= 1e-12);
        assert!(h.schedule_deviation <= 1e-12);
    }

    #[test]
    fn stage_is_reported() {
        let c = RunConfig {
            grid: Some(vec![8, 12]),
            ..cfg()
        };
        let (q, k, v) = qkv(96, 8, 0);
        let err = run_pipeline(&c, &q, &k, &v).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Permute));
        assert_eq!(err.kind(), ErrorKind::Validation);
        let c = RunConfig {
            grid: Some(vec![4, 4]),
            ..cfg()
        };
        let err = run_pipeline(&c, &q, &k, &v).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Config));

        let c = RunConfig {
            grid: Some(vec![8, 16]),
            q_block: 32,
            kv_block: 32,
            ..cfg()
        };
        let (q, k, v) = qkv(128, 8, 0);
        assert!(run_pipeline(&c, &q, &k, &v).is_ok());
    }

    #[test]
    fn unpermute_restores_order() {
        let base = RunConfig {
            grid: Some(vec![8, 16]),
            thresholds: Some(vec![1.0; 3]),
            ..cfg()
        };
        let (q, k, v) = qkv(128, 8, 3);
        let full = full_attention(&q[0], &k[0], &v[0]).unwrap().output;
        let run = run_pipeline(
            &RunConfig {
                unpermute: true,
                ..base.clone()
            },
            &q,
            &k,
            &v,
        )
        .unwrap();
        assert!(relative_error(&run.heads[0].output, &full).unwrap() < 1e-12);
        let run = run_pipeline(&base, &q, &k, &v).unwrap();
        assert!(relative_error(&run.heads[0].output, &full).unwrap() > 1e-3);
    }

    #[test]
    fn binary_and_antidiagonal_paths() {
        let c = RunConfig {
            estimator: EstimatorKind::Antidiagonal,
            stride: 4,
            mask: MaskKind::Binary,
            tau: Some(0.5),
            sim_thresholds: SimSetting::Thresholds(vec![0.1, 0.1]),
            causal: true,
            ..cfg()
        };
        let (q, k, v) = qkv(128, 8, 7);
        let run = run_pipeline(&c, &q, &k, &v).unwrap();
        let h = &run.report.heads[0];
        assert!(h.sparsity.level_counts[2..].iter().all(|&c| c == 0));
        assert!(h.schedule_deviation < 1e-9);
        assert_eq!(h.level_cap.as_ref().map(Vec::len), Some(8));
    }

    #[test]
    fn multi_head_mean() {
        let (mut q, mut k, mut v) = qkv(64, 8, 0);
        let (q2, k2, v2) = qkv(64, 8, 10);
        q.extend(q2);
        k.extend(k2);
        v.extend(v2);
        let run = run_pipeline(&cfg(), &q, &k, &v).unwrap();
        let r = &run.report;
        assert_eq!(r.heads.len(), 2);
        let m = (r.heads[0].relative_error + r.heads[1].relative_error) / 2.0;
        assert!((r.mean_relative_error - m).abs() < 1e-15);
        assert!(run_pipeline(&cfg(), &q, &k[..1], &v).is_err());
    }

    #[test]
    fn step_plan() {
        let c = RunConfig {
            thresholds: Some(vec![1.0; 3]),
            dense_prefix: 0.25,
            steps: 8,
            ..cfg()
        };
        let (q, k, v) = qkv(64, 8, 0);
        let p = run_pipeline(&c, &q, &k, &v).unwrap().report.step_plan;
        assert_eq!((p.dense_steps, p.sparse_steps), (2, 6));
        assert_eq!(p.effective_rho_bar, 1.0);
    }
}
