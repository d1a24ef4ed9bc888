//! Run configuration: a flat JSON object whose keys mirror the CLI flags.
//!
//! ```json
//! {
//!   "q_block": 64, "kv_block": 64, "levels": 4,
//!   "grid": [16, 16],
//!   "estimator": "sampled-max", "s_q": 8, "s_k": 8, "seed": 0,
//!   "mask": "threshold", "thresholds": [0.7, 0.8, 0.9, 0.9],
//!   "sim_thresholds": [0.75, 0.70, 0.70],
//!   "causal": false, "tile_len": 128
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::Reducer;
use crate::mask::{LevelThresholds, Preset, QuantileCutpoints, SimThresholds};
use crate::pyramid::BlockLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    SampledMax,
    SampledMean,
    Antidiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Threshold,
    Quantile,
    Binary,
    Preset,
}

/// `"off"` or a list of `H - 1` thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SimSetting {
    Thresholds(Vec<f64>),
    Keyword(String),
}

impl Default for SimSetting {
    fn default() -> Self {
        SimSetting::Keyword("off".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; checked against the tensors when present.
    pub seq_len: Option<usize>,
    pub head_dim: Option<usize>,
    pub q_block: usize,
    pub kv_block: usize,
    pub levels: usize,
    /// 2D `[rows, cols]` or 3D `[frames, rows, cols]` token grid; enables
    /// the space-filling-curve permutation.
    pub grid: Option<Vec<usize>>,
    pub estimator: EstimatorKind,
    pub s_q: usize,
    pub s_k: usize,
    pub stride: usize,
    pub seed: Option<u64>,
    pub mask: MaskKind,
    pub thresholds: Option<Vec<f64>>,
    pub cutpoints: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub preset: Option<Preset>,
    pub sim_thresholds: SimSetting,
    pub causal: bool,
    pub tile_len: usize,
    /// Fraction of `steps` run densely before sparse attention starts.
    pub dense_prefix: f64,
    pub steps: usize,
    /// Return outputs in original token order instead of curve order.
    pub unpermute: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seq_len: None,
            head_dim: None,
            q_block: 64,
            kv_block: 64,
            levels: 4,
            grid: None,
            estimator: EstimatorKind::SampledMax,
            s_q: 8,
            s_k: 8,
            stride: 8,
            seed: None,
            mask: MaskKind::Threshold,
            thresholds: None,
            cutpoints: None,
            tau: None,
            preset: None,
            sim_thresholds: SimSetting::default(),
            causal: false,
            tile_len: 128,
            dense_prefix: 0.0,
            steps: 1,
            unpermute: false,
        }
    }
}

/// Validated mask strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPlan {
    Threshold(LevelThresholds),
    Quantile(QuantileCutpoints),
    Binary(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorPlan {
    Sampled {
        s_q: usize,
        s_k: usize,
        seed: u64,
        reducer: Reducer,
    },
    Antidiagonal {
        stride: usize,
    },
}

/// Everything the pipeline needs, validated against the tensor shape.
#[derive(Debug, Clone)]
pub struct Plan {
    pub layout: BlockLayout,
    pub grid: Option<Vec<usize>>,
    pub estimator: EstimatorPlan,
    pub mask: MaskPlan,
    pub sim: Option<SimThresholds>,
    pub causal: bool,
    pub tile_len: usize,
    pub steps: usize,
    pub dense_steps: usize,
    pub unpermute: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn plan(&self, seq_len: usize, head_dim: usize) -> Result<Plan> {
        if let Some(n) = self.seq_len.filter(|&n| n != seq_len) {
            return Err(Error::Config(format!("seq_len={n} but tensors have N={seq_len}")));
        }
        if let Some(d) = self.head_dim.filter(|&d| d != head_dim) {
            return Err(Error::Config(format!("head_dim={d} but tensors have d={head_dim}")));
        }
        let layout = BlockLayout::new(seq_len, head_dim, self.q_block, self.kv_block, self.levels)?;

        if let Some(g) = &self.grid {
            if g.iter().product::<usize>() != seq_len {
                return Err(Error::Config(format!("grid {g:?} does not cover N={seq_len} tokens")));
            }
        }

        let estimator = match self.estimator {
            EstimatorKind::SampledMax | EstimatorKind::SampledMean => EstimatorPlan::Sampled {
                s_q: self.s_q,
                s_k: self.s_k,
                seed: self
                    .seed
                    .ok_or_else(|| Error::Config("sampled estimators are stochastic: a seed is required".into()))?,
                reducer: if self.estimator == EstimatorKind::SampledMax {
                    Reducer::Max
                } else {
                    Reducer::Mean
                },
            },
            EstimatorKind::Antidiagonal => EstimatorPlan::Antidiagonal { stride: self.stride },
        };

        let need = |what: &str| Error::Config(format!("mask strategy {:?} requires `{what}`", self.mask));
        let mask = match self.mask {
            MaskKind::Threshold => {
                let t = self.thresholds.clone().ok_or_else(|| need("thresholds"))?;
                if t.len() != self.levels {
                    return Err(Error::Config(format!(
                        "{} thresholds given for H={}",
                        t.len(),
                        self.levels
                    )));
                }
                MaskPlan::Threshold(LevelThresholds::new(t)?)
            }
            MaskKind::Quantile => {
                let c = self.cutpoints.clone().ok_or_else(|| need("cutpoints"))?;
                if c.len() != self.levels {
                    return Err(Error::Config(format!(
                        "{} cut points given for H={}",
                        c.len(),
                        self.levels
                    )));
                }
                MaskPlan::Quantile(QuantileCutpoints::new(c)?)
            }
            MaskKind::Binary => {
                let tau = self.tau.ok_or_else(|| need("tau"))?;
                if !(0.0..=1.0).contains(&tau) {
                    return Err(Error::Config(format!("tau={tau} outside [0, 1]")));
                }
                MaskPlan::Binary(tau)
            }
            MaskKind::Preset => MaskPlan::Quantile(self.preset.ok_or_else(|| need("preset"))?.cutpoints(self.levels)?),
        };

        let sim = match &self.sim_thresholds {
            SimSetting::Keyword(k) if k.eq_ignore_ascii_case("off") => None,
            SimSetting::Keyword(k) => {
                return Err(Error::Config(format!(
                    "sim_thresholds must be \"off\" or a list, got {k:?}"
                )))
            }
            SimSetting::Thresholds(t) => {
                if t.len() + 1 != self.levels {
                    return Err(Error::Config(format!(
                        "{} similarity thresholds given; H={} needs {}",
                        t.len(),
                        self.levels,
                        self.levels - 1
                    )));
                }
                Some(SimThresholds::new(t.clone())?)
            }
        };

        if self.tile_len == 0 {
            return Err(Error::Config("tile_len must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dense_prefix) {
            return Err(Error::Config(format!(
                "dense_prefix={} outside [0, 1]",
                self.dense_prefix
            )));
        }
        // The first ceil(fraction * steps) steps run dense.
        let dense_steps = ((self.dense_prefix * self.steps as f64) - 1e-9).ceil().max(0.0) as usize;

        Ok(Plan {
            layout,
            grid: self.grid.clone(),
            estimator,
            mask,
            sim,
            causal: self.causal,
            tile_len: self.tile_len,
            steps: self.steps,
            dense_steps: dense_steps.min(self.steps),
            unpermute: self.unpermute,
        })
    }
}
