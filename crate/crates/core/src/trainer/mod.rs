//! The staged adaptation protocol: source pretraining, pixel-level
//! adaptation, task training on translated images and gated feature-level
//! adaptation, plus multi-seed experiments over a configured stage list.

mod config;
mod experiment;
mod gate;
mod stages;
mod state;

pub use config::{Ablation, Domain, FeatureReference, GateConfig, Stage, StageConfig, TranslationMode};
pub use experiment::{
    aggregate, read_summary, run_dir_name, run_experiment, run_pipeline, run_stage, Aggregate, DomainData, ExperimentManifest,
    RunArtifacts, RunRecord, RunStatus, StageSummary, SUMMARY_FILE,
};
pub use gate::GateMonitor;
pub use stages::{
    reconstruction_error, run_feature_stage, run_pixel_stage, run_task_stage, stage_seed, triples_grid, PixelModels,
    Translation, TranslationCache,
};
pub use state::{LossRecord, StageDir, StopReason, TrainState};

use crate::data::Dataset;
use crate::error::Result;
use crate::models::ModelHandle;

/// Source pretraining on labeled source data (no checkpoint directory).
pub fn pretrain_source(cfg: &StageConfig, f_s: ModelHandle, source: &Dataset) -> Result<ModelHandle> {
    Ok(run_task_stage(cfg, f_s, source, Translation::None, None)?.0)
}

/// Pixel-level adaptation; returns the updated generators and discriminators.
pub fn pixel_adapt(
    cfg: &StageConfig,
    f_ref: &ModelHandle,
    models: PixelModels,
    source: &Dataset,
    target: &Dataset,
) -> Result<PixelModels> {
    Ok(run_pixel_stage(cfg, f_ref, models, source, target, None)?.0)
}

/// Task training on source images translated by a frozen generator.
pub fn train_task_on_translated(
    cfg: &StageConfig,
    f_t: ModelHandle,
    g_st: &ModelHandle,
    source: &Dataset,
) -> Result<ModelHandle> {
    Ok(run_task_stage(cfg, f_t, source, Translation::OnTheFly(g_st), None)?.0)
}

/// Gated feature-level adaptation; returns the adapted task net and the stop reason.
pub fn feature_adapt(
    cfg: &StageConfig,
    f_t: ModelHandle,
    f_ref: &ModelHandle,
    d_feat: ModelHandle,
    translated_source: Translation<'_>,
    source: &Dataset,
    target: &Dataset,
) -> Result<(ModelHandle, StopReason)> {
    let (f_t, _, state) = run_feature_stage(cfg, f_t, f_ref, d_feat, source, translated_source, target, None)?;
    Ok((f_t, state.stop.unwrap_or(StopReason::Completed)))
}
