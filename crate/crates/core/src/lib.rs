//! Pyramid sparse attention: multi-level pooled KV blocks selected per query
//! block, executed with a streaming softmax.

pub mod attention;
pub mod config;
pub mod error;
pub mod importance;
pub mod mask;
pub mod numerics;
pub mod permute;
pub mod pipeline;
pub mod pyramid;
pub mod schedule;
pub mod synth;
pub mod tensor_file;

pub use attention::{full_attention, full_attention_causal, level_bias, psa_reference, psa_streaming, AttentionOutput};
pub use config::{EstimatorKind, MaskKind, RunConfig, SimSetting};
pub use error::{Error, ErrorKind, Result, Stage};
pub use importance::{
    adjacent_key_similarity, importance_antidiagonal, importance_sampled, ImportanceMap, Reducer, SamplerConfig,
};
pub use mask::{
    apply_causal, assign_quantile, assign_threshold, binary_mask, combine_mask, level_cap_from_similarity,
    sparsity_report, LevelCap, LevelThresholds, MultiLevelMask, Preset, QuantileCutpoints, SimThresholds,
    SparsityReport,
};
pub use numerics::{relative_error, Matrix, SeqTensor};
pub use permute::{apply_permutation, hilbert_order, invert_permutation, Permutation};
pub use pipeline::{run_pipeline, PipelineRun, Report};
pub use pyramid::{BlockLayout, PyramidKV};
pub use schedule::{build_schedule, execute_schedule, utilization, TileSchedule, UtilizationStats};
pub use tensor_file::{read_tensor, write_tensor, TensorFile};
