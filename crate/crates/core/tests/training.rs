//! Stage-level behaviour on small toy data.

mod common;

use cycada::data::{make_toy_pair, ToyDomainSpec, ToyPair, ToyShift};
use cycada::eval::classify_accuracy;
use cycada::losses::LossWeights;
use cycada::models::{
    build_generator_with, build_identity_generator, build_image_discriminator_with, build_task_net_with,
    GeneratorOptions, ImageDiscriminatorOptions, ModelHandle, TaskNetOptions,
};
use cycada::optim::OptimizerConfig;
use cycada::trainer::{
    run_pixel_stage, run_task_stage, PixelModels, Stage, StageConfig, StopReason, Translation, TranslationCache,
};

fn pair(kind: ToyShift, per_class: usize) -> ToyPair {
    let mut spec = ToyDomainSpec::classification(kind, 2, per_class, 7);
    spec.test_samples_per_class = 16;
    make_toy_pair(&spec).unwrap()
}

fn small_net(shape: [usize; 3], seed: u64) -> ModelHandle {
    let opts = TaskNetOptions { conv1: 4, conv2: 8, hidden: 32, dropout: 0.0, ..TaskNetOptions::default() };
    build_task_net_with(shape, 2, &opts, seed).unwrap()
}

fn task_cfg(epochs: usize, batch: usize) -> StageConfig {
    let mut cfg = StageConfig::digits(Stage::SourcePretrain);
    cfg.optimizer = OptimizerConfig::adam(3e-3, 0.9);
    cfg.max_epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = 4;
    cfg
}

#[test]
fn task_net_memorizes_a_small_set() {
    let data = pair(ToyShift::IntensityInversion, 32).source_train;
    assert_eq!(data.len(), 64);
    let (net, state) = run_task_stage(&task_cfg(30, 16), small_net(data.shape, 1), &data, Translation::None, None).unwrap();
    let (acc, _) = classify_accuracy(&net, &data).unwrap();
    assert_eq!(acc, 1.0);
    assert!(state.last_loss("task").unwrap() < 0.05, "{:?}", state.last_loss("task"));
    assert_eq!(state.stop, Some(StopReason::Completed));
}

#[test]
fn iteration_cap_stops_early() {
    let data = pair(ToyShift::IntensityInversion, 16).source_train;
    let mut cfg = task_cfg(10, 8);
    cfg.max_iterations = Some(5);
    let (_, state) = run_task_stage(&cfg, small_net(data.shape, 1), &data, Translation::None, None).unwrap();
    assert_eq!(state.iteration, 5);
    assert_eq!(state.stop, Some(StopReason::MaxIterations));
}

#[test]
fn identity_translation_reduces_to_plain_training() {
    let data = pair(ToyShift::IntensityInversion, 16).source_train;
    let [c, s, _] = data.shape;
    let identity = build_identity_generator(c, s).unwrap().freeze();
    let cfg = task_cfg(2, 8);
    let (plain, a) = run_task_stage(&cfg, small_net(data.shape, 2), &data, Translation::None, None).unwrap();
    let (translated, b) = run_task_stage(&cfg, small_net(data.shape, 2), &data, Translation::OnTheFly(&identity), None).unwrap();
    assert_eq!(plain.digest().unwrap(), translated.digest().unwrap());
    assert_eq!(a.losses, b.losses);
}

#[test]
fn cached_translation_matches_on_the_fly() {
    let data = pair(ToyShift::IntensityInversion, 16).source_train;
    let [c, s, _] = data.shape;
    let opts = GeneratorOptions { base_filters: 4, residual_blocks: 1, outer_kernel: 3, downsample: 1 };
    let g = build_generator_with(c, s, &opts, 3).unwrap().freeze();
    let cache = TranslationCache::build(&g, &data).unwrap();
    let cfg = task_cfg(2, 8);
    let (a, _) = run_task_stage(&cfg, small_net(data.shape, 2), &data, Translation::OnTheFly(&g), None).unwrap();
    let (b, _) = run_task_stage(&cfg, small_net(data.shape, 2), &data, Translation::Cached(&cache, &g), None).unwrap();
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());

    // A cache built for another generator state is refused.
    let other = build_generator_with(c, s, &opts, 4).unwrap().freeze();
    let err = run_task_stage(&cfg, small_net(data.shape, 2), &data, Translation::Cached(&cache, &other), None).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn translation_requires_a_frozen_generator() {
    let data = pair(ToyShift::IntensityInversion, 8).source_train;
    let [c, s, _] = data.shape;
    let live = build_identity_generator(c, s).unwrap();
    assert!(run_task_stage(&task_cfg(1, 8), small_net(data.shape, 2), &data, Translation::OnTheFly(&live), None).is_err());
}

#[test]
fn cycle_alone_learns_reconstruction_on_an_unshifted_pair() {
    let p = pair(ToyShift::Identity, 32);
    let [c, s, _] = p.source_train.shape;
    let g = GeneratorOptions { base_filters: 16, residual_blocks: 1, outer_kernel: 3, downsample: 1 };
    let d = ImageDiscriminatorOptions { base_filters: 4 };
    let models = PixelModels {
        g_st: build_generator_with(c, s, &g, 1).unwrap(),
        g_ts: build_generator_with(c, s, &g, 2).unwrap(),
        d_s: build_image_discriminator_with(c, s, &d, 3).unwrap(),
        d_t: build_image_discriminator_with(c, s, &d, 4).unwrap(),
    };
    let f_ref = small_net(p.source_train.shape, 5).freeze();
    let mut cfg = StageConfig::digits(Stage::PixelAdapt);
    cfg.optimizer = OptimizerConfig::adam(1e-3, 0.5);
    cfg.weights = LossWeights { cycle: 1.0, ..LossWeights::zero() };
    cfg.batch_size = 8;
    cfg.max_epochs = 30;
    let (_, state) = run_pixel_stage(&cfg, &f_ref, models, &p.source_train, &p.target_train, None).unwrap();
    let rec = state.last_loss("reconstruction").unwrap();
    assert!(rec < 0.05, "reconstruction error {rec}");
    // Only the cycle term was active.
    assert!(state.losses.iter().all(|l| l.term == "cycle" || l.term == "reconstruction"));
}
