//! Visual-head guided KV-cache compression for multimodal transformers.
//!
//! The pipeline has three stages:
//!
//! * [`chaser`] scores every attention head by how often its attention
//!   peak lands on the image patches behind the token being read out;
//! * [`allocator`] turns those scores and a global slot budget into
//!   per-head integer cache budgets;
//! * [`cache`] evicts prompt KV entries per head using observation-window
//!   attention, within the planned budgets.
//!
//! [`sim`] provides a synthetic model with planted visual heads to drive
//! and validate the pipeline, and [`experiment`] holds the sweep harness.

pub mod allocator;
pub mod cache;
pub mod chaser;
pub mod error;
pub mod experiment;
pub mod seed;
pub mod sim;
pub mod tensor;

pub use allocator::{
    allocate, allocate_adaptive_layer, allocate_pyramid, allocate_random, allocate_sparsemm, allocate_uniform,
    AllocationConfig, AllocatorKind, BudgetPlan, PlanFile, PlanShape,
};
pub use cache::{
    average_window_scores, compress_prefill, decode_step, select_topk, window_attention, EvictionReport, KvCache,
    PlanPolicy, TopK,
};
pub use chaser::{
    aggregate_corpus, aggregate_gqa_scores, chase_corpus, match_bbox_to_patches, score_sample, HeadScoreMatrix,
    PatchIndexSet, ScoreFile,
};
pub use error::{Error, Result};
pub use experiment::{
    run_budget_sweep, run_cost_model, run_masking_study, run_rho_sweep, write_table, CostRow, ExperimentConfig,
    ResultRow,
};
pub use sim::{
    build_synthetic_model, decode_with_cache, generate_ocr_samples, mask_heads, AttentionTrace, BBox, CachePolicy,
    DecodeRecord, DecodeRequest, ImageShape, ModelGeometry, OcrSample, PatchGrid, PlantedHead, PlantedHeadSet,
    SimParams, SyntheticModel, TraceRecord,
};
pub use tensor::{argmax_row, matmul_scaled, softmax_row_masked, CausalMask, Matrix};
