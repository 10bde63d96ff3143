//! Multi-seed experiments: the configured stage list is executed per seed,
//! every stage is evaluated, and final scores are aggregated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stages::{reconstruction_error, run_feature_stage, run_pixel_stage, run_task_stage, stage_seed};
use super::{Domain, FeatureReference, PixelModels, Stage, StageDir, StopReason, Translation, TranslationCache, TranslationMode};
use crate::config::{DataKind, ExperimentConfig};
use crate::data::{make_toy_pair, Dataset, DatasetDescriptor, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_confusion_heatmap, ConfusionMatrix, Metrics};
use crate::models::{
    build_feature_discriminator_with, build_generator_with, build_image_discriminator_with, build_task_net_with,
    build_toy_seg_net_with, ModelHandle,
};

/// Train and test splits of both domains.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl DomainData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let mut data = match cfg.data.kind {
            DataKind::Toy => {
                let pair = make_toy_pair(&cfg.data.toy)?;
                Self {
                    source_train: pair.source_train,
                    source_test: pair.source_test,
                    target_train: pair.target_train,
                    target_test: pair.target_test,
                }
            }
            DataKind::Digits => {
                let root = cfg.data.resolved_root();
                let (s, t) = cfg.data.digits.shift.domains();
                let load = |name: &str, split| {
                    let dir = root.join(name);
                    if !dir.is_dir() {
                        return Err(Error::Data(format!(
                            "prepared dataset {} is missing; run `cycada prepare-data` first",
                            dir.display()
                        )));
                    }
                    Dataset::load(&dir, split)
                };
                Self {
                    source_train: load(s, Split::Train)?,
                    source_test: load(s, Split::Test)?,
                    target_train: load(t, Split::Train)?,
                    target_test: load(t, Split::Test)?,
                }
            }
        };
        if let Some(n) = cfg.data.max_train {
            data.source_train = data.source_train.head(n)?;
            data.target_train = data.target_train.head(n)?;
        }
        if data.source_train.shape != data.target_train.shape
            || data.source_train.num_classes != data.target_train.num_classes
        {
            return Err(Error::Data("source and target domains disagree on shape or class count".into()));
        }
        Ok(data)
    }

    pub fn descriptors(&self) -> Vec<DatasetDescriptor> {
        [&self.source_train, &self.source_test, &self.target_train, &self.target_test]
            .iter()
            .map(|d| d.descriptor())
            .collect()
    }
}

/// Models produced so far within one run.
#[derive(Debug, Default)]
pub struct RunArtifacts {
    pub f_source: Option<ModelHandle>,
    pub g_st: Option<ModelHandle>,
    pub g_ts: Option<ModelHandle>,
    /// Latest adapted task net, if any stage after pretraining produced one.
    pub f_task: Option<ModelHandle>,
}

impl RunArtifacts {
    /// Loads the checkpoints that stages preceding `before` left in `run_dir`.
    pub fn load(run_dir: &Path, before: Stage) -> Result<Self> {
        let mut art = RunArtifacts::default();
        let done = |s: Stage| s < before && StageDir::new(run_dir.join(s.name())).has_state();
        if done(Stage::SourcePretrain) {
            art.f_source = Some(StageDir::new(run_dir.join(Stage::SourcePretrain.name())).load_model("task")?);
        }
        if done(Stage::PixelAdapt) {
            let d = StageDir::new(run_dir.join(Stage::PixelAdapt.name()));
            art.g_st = Some(d.load_model("g_st")?.freeze());
            art.g_ts = Some(d.load_model("g_ts")?.freeze());
        }
        for s in [Stage::TaskOnTranslated, Stage::FeatureAdapt] {
            if done(s) {
                art.f_task = Some(StageDir::new(run_dir.join(s.name())).load_model("task")?);
            }
        }
        Ok(art)
    }

    pub fn current_task(&self) -> Option<&ModelHandle> {
        self.f_task.as_ref().or(self.f_source.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    /// Accuracy (or mIoU) of the stage's task net on the target test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_score: Option<f64>,
    /// Mean |x - G_ts(G_st(x))| on the source test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<f64>,
    pub iterations: usize,
    pub epochs: usize,
    pub gated_updates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
    /// Parameter digests of the models the stage produced.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Aborted { stage: Stage, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation over sqrt(runs); absent for a single run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

pub fn aggregate(scores: &[f64]) -> Option<Aggregate> {
    let n = scores.len();
    if n == 0 {
        return None;
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let stderr = (n > 1).then(|| {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (n as f64).sqrt()
    });
    Some(Aggregate { runs: n, mean, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub id: String,
    pub shift: String,
    pub method: String,
    pub datasets: Vec<DatasetDescriptor>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    pub config: ExperimentConfig,
}

impl ExperimentManifest {
    pub const FILE: &'static str = "manifest.toml";

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Report(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }

    /// Recomputes the aggregate from the per-run entries.
    pub fn recompute_aggregate(&self) -> Option<Aggregate> {
        let scores: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.status == RunStatus::Completed)
            .filter_map(|r| r.final_score)
            .collect();
        aggregate(&scores)
    }
}

fn model_seed(run_seed: u64, role: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(200 + role);
    rng.next_u64()
}

fn fresh_task_net(cfg: &ExperimentConfig, data: &DomainData, seed: u64) -> Result<ModelHandle> {
    let shape = data.source_train.shape;
    let k = data.source_train.num_classes;
    if data.source_train.is_dense() {
        build_toy_seg_net_with(shape, k, &cfg.models.seg_net, model_seed(seed, 0))
    } else {
        build_task_net_with(shape, k, &cfg.models.task_net, model_seed(seed, 0))
    }
}

fn write_metrics(dir: &StageDir, metrics: &Metrics) -> Result<()> {
    fs::create_dir_all(dir.root())?;
    metrics.write(&dir.metrics_path())?;
    let cm = ConfusionMatrix::from_counts(metrics.confusion.clone())?;
    write_confusion_heatmap(&cm, &dir.root().join("confusion.png"), 16)
}

fn summarize_task(
    stage: Stage,
    model: &ModelHandle,
    data: &DomainData,
    state: &super::TrainState,
    dir: Option<&StageDir>,
) -> Result<StageSummary> {
    let target = evaluate(model, &data.target_test)?;
    let source = evaluate(model, &data.source_test)?;
    if let Some(d) = dir {
        write_metrics(d, &target)?;
    }
    Ok(StageSummary {
        stage,
        target_score: Some(target.score()),
        source_score: Some(source.score()),
        reconstruction_error: None,
        iterations: state.iteration,
        epochs: state.epoch,
        gated_updates: state.gated_updates,
        stop: state.stop.clone(),
        checkpoints: BTreeMap::from([("task".to_string(), model.digest()?)]),
    })
}

/// File marking a finished stage directory.
pub const SUMMARY_FILE: &str = "summary.json";

/// Summary of a finished stage directory, if there is one.
pub fn read_summary(stage_dir: &Path) -> Result<Option<StageSummary>> {
    let p = stage_dir.join(SUMMARY_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Integrity(format!("{}: {e}", p.display())))
}

/// Runs one stage for one seed, updating `art` with the models it produced.
/// With a run directory the stage resumes from its checkpoint if one exists
/// and leaves `summary.json` behind when done.
pub fn run_stage(
    cfg: &ExperimentConfig,
    stage: Stage,
    seed: u64,
    data: &DomainData,
    art: &mut RunArtifacts,
    run_dir: Option<&Path>,
) -> Result<StageSummary> {
    let summary = execute_stage(cfg, stage, seed, data, art, run_dir)?;
    if let Some(r) = run_dir {
        let dir = r.join(stage.name());
        fs::create_dir_all(&dir)?;
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Report(e.to_string()))?;
        fs::write(dir.join(SUMMARY_FILE), text)?;
    }
    Ok(summary)
}

fn execute_stage(
    cfg: &ExperimentConfig,
    stage: Stage,
    seed: u64,
    data: &DomainData,
    art: &mut RunArtifacts,
    run_dir: Option<&Path>,
) -> Result<StageSummary> {
    let mut sc = cfg.stage(stage)?.clone();
    sc.seed = stage_seed(seed, stage);
    let dir = run_dir.map(|r| StageDir::new(r.join(stage.name())));
    let dir = dir.as_ref();
    let need = |m: Option<&ModelHandle>, what: &str| -> Result<ModelHandle> {
        m.ok_or_else(|| Error::Config(format!("stage `{}` needs {what}", stage.name())))?.duplicate(false)
    };
    match stage {
        Stage::SourcePretrain => {
            let train = match sc.train_domain {
                Domain::Source => &data.source_train,
                Domain::Target => &data.target_train,
            };
            let model = fresh_task_net(cfg, data, seed)?;
            let (model, state) = run_task_stage(&sc, model, train, Translation::None, dir)?;
            let summary = summarize_task(stage, &model, data, &state, dir)?;
            art.f_source = Some(model);
            Ok(summary)
        }
        Stage::PixelAdapt => {
            let f_ref = need(art.f_source.as_ref(), "a source model from source-pretrain")?.freeze();
            let [c, h, _] = data.source_train.shape;
            let m = &cfg.models;
            let models = PixelModels {
                g_st: build_generator_with(c, h, &m.generator, model_seed(seed, 1))?,
                g_ts: build_generator_with(c, h, &m.generator, model_seed(seed, 2))?,
                d_s: build_image_discriminator_with(c, h, &m.image_discriminator, model_seed(seed, 3))?,
                d_t: build_image_discriminator_with(c, h, &m.image_discriminator, model_seed(seed, 4))?,
            };
            let (models, state) = run_pixel_stage(&sc, &f_ref, models, &data.source_train, &data.target_train, dir)?;
            let recon = reconstruction_error(&models.g_st, &models.g_ts, &data.source_test)?;
            let checkpoints = BTreeMap::from([
                ("g_st".to_string(), models.g_st.digest()?),
                ("g_ts".to_string(), models.g_ts.digest()?),
                ("d_s".to_string(), models.d_s.digest()?),
                ("d_t".to_string(), models.d_t.digest()?),
            ]);
            art.g_st = Some(models.g_st.freeze());
            art.g_ts = Some(models.g_ts.freeze());
            Ok(StageSummary {
                stage,
                target_score: None,
                source_score: None,
                reconstruction_error: Some(recon),
                iterations: state.iteration,
                epochs: state.epoch,
                gated_updates: 0,
                stop: state.stop,
                checkpoints,
            })
        }
        Stage::TaskOnTranslated => {
            let g = art
                .g_st
                .as_ref()
                .ok_or_else(|| Error::Config("stage `task-on-translated` needs a generator from pixel-adapt".into()))?;
            let model = if sc.warm_start {
                need(art.f_source.as_ref(), "a source model from source-pretrain")?
            } else {
                fresh_task_net(cfg, data, model_seed(seed, 5))?
            };
            let cache;
            let translation = match sc.translation {
                TranslationMode::OnTheFly => Translation::OnTheFly(g),
                TranslationMode::Cached => {
                    cache = TranslationCache::build(g, &data.source_train)?;
                    Translation::Cached(&cache, g)
                }
            };
            let (model, state) = run_task_stage(&sc, model, &data.source_train, translation, dir)?;
            let summary = summarize_task(stage, &model, data, &state, dir)?;
            art.f_task = Some(model);
            Ok(summary)
        }
        Stage::FeatureAdapt => {
            let f_t = need(art.current_task(), "a task model")?;
            let f_ref = match sc.feature_reference {
                FeatureReference::StageSnapshot => f_t.duplicate(true)?,
                FeatureReference::SourceModel => need(art.f_source.as_ref(), "a source model")?.freeze(),
            };
            let d_feat =
                build_feature_discriminator_with(f_t.spec().feature_dim()?, &cfg.models.feature_discriminator, model_seed(seed, 6))?;
            let cache;
            let translation = match (art.g_st.as_ref(), sc.translation) {
                (None, _) => Translation::None,
                (Some(g), TranslationMode::OnTheFly) => Translation::OnTheFly(g),
                (Some(g), TranslationMode::Cached) => {
                    cache = TranslationCache::build(g, &data.source_train)?;
                    Translation::Cached(&cache, g)
                }
            };
            let (f_t, _d_feat, state) =
                run_feature_stage(&sc, f_t, &f_ref, d_feat, &data.source_train, translation, &data.target_train, dir)?;
            let summary = summarize_task(stage, &f_t, data, &state, dir)?;
            art.f_task = Some(f_t);
            Ok(summary)
        }
    }
}

/// Executes the stage list for one seed. A failing stage ends the run and is
/// recorded rather than propagated.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, data: &DomainData, run_dir: Option<&Path>) -> RunRecord {
    let mut art = RunArtifacts::default();
    let mut stages = Vec::new();
    let mut status = RunStatus::Completed;
    for &stage in &cfg.experiment.stages {
        log::info!("seed {seed}: running {}", stage.name());
        match run_stage(cfg, stage, seed, data, &mut art, run_dir) {
            Ok(summary) => stages.push(summary),
            Err(e) => {
                log::error!("seed {seed}: {} aborted: {e}", stage.name());
                status = RunStatus::Aborted { stage, error: e.to_string() };
                break;
            }
        }
    }
    let final_score = match status {
        RunStatus::Completed => stages.iter().rev().find_map(|s| s.target_score),
        RunStatus::Aborted { .. } => None,
    };
    RunRecord { seed, status, final_score, dir: run_dir.map(Path::to_path_buf), stages }
}

pub fn run_dir_name(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Runs every seed. With `out`, results land in `out/{id}/seed-{s}/...`
/// together with `manifest.toml` and `resolved-config.toml`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentManifest> {
    cfg.validate()?;
    let data = DomainData::load(cfg)?;
    let exp_dir = out.map(|o| o.join(&cfg.experiment.id));
    if let Some(d) = &exp_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("resolved-config.toml"), cfg.to_toml()?)?;
    }
    let runs: Vec<RunRecord> = cfg
        .experiment
        .seeds
        .iter()
        .map(|&seed| {
            let run_dir = exp_dir.as_ref().map(|d| d.join(run_dir_name(seed)));
            run_pipeline(cfg, seed, &data, run_dir.as_deref())
        })
        .collect();
    let mut manifest = ExperimentManifest {
        schema_version: crate::config::SCHEMA_VERSION,
        id: cfg.experiment.id.clone(),
        shift: cfg.experiment.shift.clone(),
        method: cfg.experiment.method.clone(),
        datasets: data.descriptors(),
        runs,
        aggregate: None,
        config: cfg.clone(),
    };
    manifest.aggregate = manifest.recompute_aggregate();
    if let Some(d) = &exp_dir {
        manifest.write(&d.join(ExperimentManifest::FILE))?;
    }
    Ok(manifest)
}
