//! Stage runners. Each runner is resumable: when given a [`StageDir`] that
//! already holds a checkpoint it continues from the recorded epoch, and it
//! writes a checkpoint after every epoch.

use candle_core::{DType, Tensor};

use super::{GateMonitor, Stage, StageConfig, StageDir, StopReason, TrainState};
use crate::data::{batch_iterator, denormalize, paired_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cycada_objective, cycle_loss, feature_gan_terms, gan_loss_discriminator, gan_loss_generator, identity_loss,
    semantic_consistency_from_translations, task_loss, Critic, LossTerm, LossTerms, LossWeights,
};
use crate::models::{ModelHandle, Mode, TensorArchive, Training};
use crate::optim::Optimizer;
use crate::report::image_grid;

const TRANSLATE_BATCH: usize = 200;
const TRIPLE_ROWS: usize = 8;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(term: &str, t: &Tensor, iteration: usize) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::Abort(format!("loss term `{term}` became {v} at iteration {iteration}")));
    }
    Ok(v)
}

/// Translated images of a whole split, valid for one generator state.
#[derive(Debug, Clone)]
pub struct TranslationCache {
    generator_digest: String,
    images: Tensor,
}

impl TranslationCache {
    pub fn build(generator: &ModelHandle, data: &Dataset) -> Result<Self> {
        let mut chunks = Vec::new();
        for idx in data.all_indices().chunks(TRANSLATE_BATCH) {
            chunks.push(generator.forward(&data.images_tensor(idx)?, Mode::Eval)?.detach());
        }
        Ok(Self { generator_digest: generator.digest()?, images: Tensor::cat(&chunks, 0)? })
    }

    pub fn generator_digest(&self) -> &str {
        &self.generator_digest
    }

    pub fn len(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails when the cache was produced by a different generator state.
    pub fn verify(&self, generator: &ModelHandle) -> Result<()> {
        let digest = generator.digest()?;
        if digest != self.generator_digest {
            return Err(Error::Integrity(format!(
                "stale translation cache: built for generator {}, current generator is {digest}",
                self.generator_digest
            )));
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(self.images.index_select(&idx, 0)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut archive = TensorArchive::new(self.generator_digest.clone());
        archive.push("images", &self.images)?;
        archive.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = TensorArchive::read(path)?;
        Ok(Self { images: archive.tensor("images")?, generator_digest: archive.header })
    }
}

/// How source images reach a task-training or feature stage.
#[derive(Clone, Copy)]
pub enum Translation<'a> {
    /// Raw images.
    None,
    /// Translated batch by batch.
    OnTheFly(&'a ModelHandle),
    /// Served from a precomputed cache, checked against the generator.
    Cached(&'a TranslationCache, &'a ModelHandle),
}

impl Translation<'_> {
    fn verify(&self) -> Result<()> {
        match self {
            Translation::OnTheFly(g) if !g.is_frozen() => {
                Err(Error::InvalidArgument("translations must come from a frozen generator".into()))
            }
            Translation::Cached(cache, g) => cache.verify(g),
            _ => Ok(()),
        }
    }

    fn images(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
        match self {
            Translation::None => data.images_tensor(indices),
            Translation::OnTheFly(g) => Ok(g.forward(&data.images_tensor(indices)?, Mode::Eval)?.detach()),
            Translation::Cached(cache, _) => cache.batch(indices),
        }
    }
}

fn fresh_or_resume(cfg: &StageConfig, dir: Option<&StageDir>) -> Result<Option<TrainState>> {
    match dir {
        Some(d) if d.has_state() => {
            let state = d.load_state()?;
            if state.stage != cfg.stage {
                return Err(Error::Integrity(format!(
                    "{} holds a {} checkpoint, expected {}",
                    d.root().display(),
                    state.stage.name(),
                    cfg.stage.name()
                )));
            }
            Ok(Some(state))
        }
        _ => Ok(None),
    }
}

fn hit_cap(cfg: &StageConfig, state: &TrainState) -> bool {
    cfg.max_iterations.is_some_and(|cap| state.iteration >= cap)
}

/// Supervised training with the task loss: source pretraining, the
/// labeled-target bound, and training on translated source images.
pub fn run_task_stage(
    cfg: &StageConfig,
    model: ModelHandle,
    data: &Dataset,
    translation: Translation<'_>,
    dir: Option<&StageDir>,
) -> Result<(ModelHandle, TrainState)> {
    cfg.validate()?;
    translation.verify()?;
    if model.is_frozen() {
        return Err(Error::Frozen("task net".into()));
    }
    let (model, mut opt, mut state) = match fresh_or_resume(cfg, dir)? {
        Some(state) => {
            let d = dir.expect("resume implies a directory");
            let model = d.load_model("task")?;
            let opt = d.load_optimizer("task", &model)?;
            (model, opt, state)
        }
        None => (model, Optimizer::new(cfg.optimizer)?, TrainState::new(cfg.stage, cfg.seed)),
    };
    let weights = LossWeights { task: cfg.weights.task, ..LossWeights::zero() };
    let mut stop = None;
    let finished = state.stop.take().filter(|s| matches!(s, StopReason::GateNeverOpened { .. }));
    let last_epoch = if finished.is_some() { state.epoch } else { cfg.max_epochs };
    'epochs: for epoch in state.epoch..last_epoch {
        for batch in batch_iterator(data.len(), cfg.batch_size, cfg.seed, epoch..epoch + 1)? {
            if hit_cap(cfg, &state) {
                stop = Some(StopReason::MaxIterations);
                break 'epochs;
            }
            let x = translation.images(data, &batch.indices)?;
            let y = data.labels_tensor(&batch.indices)?;
            let logits = model.forward(&x, Mode::Train(&mut state.rng))?;
            let loss = task_loss(&logits, &y)?;
            let value = finite("task", &loss, state.iteration)?;
            let mut terms = LossTerms::new();
            terms.insert(LossTerm::Task, loss);
            if weights.task > 0.0 {
                let objective = cycada_objective(&weights, &terms)?;
                opt.step(&model, &objective.backward()?)?;
            }
            state.log("task", value);
            state.iteration += 1;
        }
        state.epoch = epoch + 1;
        if let Some(d) = dir {
            d.save(&[("task", &model)], &[("task", &opt)], &state)?;
        }
    }
    state.stop = Some(stop.or(finished).unwrap_or(StopReason::Completed));
    if let Some(d) = dir {
        d.save(&[("task", &model)], &[("task", &opt)], &state)?;
    }
    Ok((model, state))
}

/// Generators and image discriminators of the pixel stage.
#[derive(Debug)]
pub struct PixelModels {
    pub g_st: ModelHandle,
    pub g_ts: ModelHandle,
    pub d_s: ModelHandle,
    pub d_t: ModelHandle,
}

const PIXEL_NAMES: [&str; 4] = ["g_st", "g_ts", "d_s", "d_t"];

impl PixelModels {
    fn named(&self) -> [(&'static str, &ModelHandle); 4] {
        [("g_st", &self.g_st), ("g_ts", &self.g_ts), ("d_s", &self.d_s), ("d_t", &self.d_t)]
    }

    fn load(dir: &StageDir) -> Result<Self> {
        Ok(Self {
            g_st: dir.load_model("g_st")?,
            g_ts: dir.load_model("g_ts")?,
            d_s: dir.load_model("d_s")?,
            d_t: dir.load_model("d_t")?,
        })
    }
}

/// Image-space adaptation: per batch, one discriminator step on both image
/// discriminators, then one generator step on the weighted adversarial,
/// cycle, semantic (and optional identity) terms.
pub fn run_pixel_stage(
    cfg: &StageConfig,
    f_ref: &ModelHandle,
    models: PixelModels,
    source: &Dataset,
    target: &Dataset,
    dir: Option<&StageDir>,
) -> Result<(PixelModels, TrainState)> {
    cfg.validate()?;
    if !f_ref.is_frozen() {
        return Err(Error::InvalidArgument("pixel adaptation requires a frozen reference classifier".into()));
    }
    if source.shape != target.shape {
        return Err(Error::Shape(format!("domain shapes differ: {:?} vs {:?}", source.shape, target.shape)));
    }
    let (m, mut opts, mut state) = match fresh_or_resume(cfg, dir)? {
        Some(state) => {
            let d = dir.expect("resume implies a directory");
            let m = PixelModels::load(d)?;
            let opts = m.named().map(|(name, model)| d.load_optimizer(name, model));
            let [a, b, c, e] = opts;
            (m, [a?, b?, c?, e?], state)
        }
        None => {
            let opt = || Optimizer::new(cfg.optimizer);
            (models, [opt()?, opt()?, opt()?, opt()?], TrainState::new(cfg.stage, cfg.seed))
        }
    };
    let w = cfg.effective_weights();
    let gen_weights = LossWeights { task: 0.0, gan_feat: 0.0, ..w };
    let variant = cfg.image_gan;
    let save = |m: &PixelModels, opts: &[Optimizer; 4], state: &TrainState| -> Result<()> {
        if let Some(d) = dir {
            let named = m.named();
            let opt_named: Vec<(&str, &Optimizer)> = PIXEL_NAMES.iter().copied().zip(opts.iter()).collect();
            d.save(&named, &opt_named, state)?;
        }
        Ok(())
    };
    let mut stop = None;
    let finished = state.stop.take().filter(|s| matches!(s, StopReason::GateNeverOpened { .. }));
    let last_epoch = if finished.is_some() { state.epoch } else { cfg.max_epochs };
    'epochs: for epoch in state.epoch..last_epoch {
        for (is, it) in paired_batches(source.len(), target.len(), cfg.batch_size, cfg.seed, epoch)? {
            if hit_cap(cfg, &state) {
                stop = Some(StopReason::MaxIterations);
                break 'epochs;
            }
            let xs = source.images_tensor(&is)?;
            let xt = target.images_tensor(&it)?;

            if w.gan_image > 0.0 {
                let fake_t = m.g_st.forward(&xs, Mode::Eval)?.detach();
                let fake_s = m.g_ts.forward(&xt, Mode::Eval)?.detach();
                let loss_t = gan_loss_discriminator(&m.d_t.judge(&xt)?, &m.d_t.judge(&fake_t)?, variant)?;
                let loss_s = gan_loss_discriminator(&m.d_s.judge(&xs)?, &m.d_s.judge(&fake_s)?, variant)?;
                let loss = (loss_t + loss_s)?.affine(w.gan_image, 0.0)?;
                let value = finite("disc_image", &loss, state.iteration)?;
                let grads = loss.backward()?;
                opts[2].step(&m.d_s, &grads)?;
                opts[3].step(&m.d_t, &grads)?;
                state.log("disc_image", value);
            }

            let mut terms = LossTerms::new();
            if w.gan_image > 0.0 || w.cycle > 0.0 || w.semantic > 0.0 {
                let fake_t = m.g_st.forward(&xs, Mode::Eval)?;
                let fake_s = m.g_ts.forward(&xt, Mode::Eval)?;
                if w.gan_image > 0.0 {
                    let gan = (gan_loss_generator(&m.d_t.judge(&fake_t)?, variant)?
                        + gan_loss_generator(&m.d_s.judge(&fake_s)?, variant)?)?;
                    terms.insert(LossTerm::GanImage, gan);
                }
                if w.cycle > 0.0 {
                    let rec_s = m.g_ts.forward(&fake_t, Mode::Eval)?;
                    let rec_t = m.g_st.forward(&fake_s, Mode::Eval)?;
                    terms.insert(LossTerm::Cycle, (cycle_loss(&xs, &rec_s)? + cycle_loss(&xt, &rec_t)?)?);
                }
                if w.semantic > 0.0 {
                    let sem = semantic_consistency_from_translations(f_ref, &xs, &xt, &fake_t, &fake_s)?;
                    terms.insert(LossTerm::Semantic, sem);
                }
            }
            if w.identity > 0.0 {
                let idt = (identity_loss(&xt, &m.g_st.forward(&xt, Mode::Eval)?)?
                    + identity_loss(&xs, &m.g_ts.forward(&xs, Mode::Eval)?)?)?;
                terms.insert(LossTerm::Identity, idt);
            }
            if terms.iter().next().is_some() {
                let mut values = Vec::new();
                for (term, t) in terms.iter() {
                    values.push((term.name(), finite(term.name(), t, state.iteration)?));
                }
                let objective = cycada_objective(&gen_weights, &terms)?;
                let grads = objective.backward()?;
                opts[0].step(&m.g_st, &grads)?;
                opts[1].step(&m.g_ts, &grads)?;
                for (name, v) in values {
                    state.log(name, v);
                }
            }
            state.iteration += 1;
        }
        state.epoch = epoch + 1;
        let rec = reconstruction_error(&m.g_st, &m.g_ts, source)?;
        state.log("reconstruction", rec);
        if let Some(d) = dir {
            std::fs::create_dir_all(d.triples_dir())?;
            let n = TRIPLE_ROWS.min(source.len());
            let indices: Vec<usize> = (0..n).collect();
            let grid = triples_grid(&m.g_st, &m.g_ts, source, &indices)?;
            grid.save(d.triples_dir().join(format!("epoch-{}.png", state.epoch)))?;
        }
        save(&m, &opts, &state)?;
    }
    state.stop = Some(stop.or(finished).unwrap_or(StopReason::Completed));
    save(&m, &opts, &state)?;
    Ok((m, state))
}

/// Feature-level adaptation with discriminator-accuracy gating. The stage
/// stops early when a whole epoch passes without the gate opening.
#[allow(clippy::too_many_arguments)]
pub fn run_feature_stage(
    cfg: &StageConfig,
    f_t: ModelHandle,
    f_ref: &ModelHandle,
    d_feat: ModelHandle,
    source: &Dataset,
    translation: Translation<'_>,
    target: &Dataset,
    dir: Option<&StageDir>,
) -> Result<(ModelHandle, ModelHandle, TrainState)> {
    cfg.validate()?;
    translation.verify()?;
    if !f_ref.is_frozen() {
        return Err(Error::InvalidArgument("feature adaptation requires a frozen reference classifier".into()));
    }
    let (f_t, d_feat, mut opt_f, mut opt_d, mut state) = match fresh_or_resume(cfg, dir)? {
        Some(state) => {
            let d = dir.expect("resume implies a directory");
            let f_t = d.load_model("task")?;
            let d_feat = d.load_model("d_feat")?;
            let opt_f = d.load_optimizer("task", &f_t)?;
            let opt_d = d.load_optimizer("d_feat", &d_feat)?;
            (f_t, d_feat, opt_f, opt_d, state)
        }
        None => {
            let mut state = TrainState::new(cfg.stage, cfg.seed);
            let window = cfg.gate.window_iterations * 2 * cfg.batch_size;
            state.gate = Some(GateMonitor::new(window, cfg.gate.threshold)?);
            (f_t, d_feat, Optimizer::new(cfg.optimizer)?, Optimizer::new(cfg.optimizer)?, state)
        }
    };
    let variant = cfg.feature_gan;
    let w = LossWeights { gan_feat: cfg.weights.gan_feat, task: cfg.weights.task, ..LossWeights::zero() };
    let save = |f_t: &ModelHandle, d_feat: &ModelHandle, opt_f: &Optimizer, opt_d: &Optimizer, state: &TrainState| {
        match dir {
            Some(d) => d.save(&[("task", f_t), ("d_feat", d_feat)], &[("task", opt_f), ("d_feat", opt_d)], state),
            None => Ok(()),
        }
    };
    let mut stop = None;
    let finished = state.stop.take().filter(|s| matches!(s, StopReason::GateNeverOpened { .. }));
    let last_epoch = if finished.is_some() { state.epoch } else { cfg.max_epochs };
    'epochs: for epoch in state.epoch..last_epoch {
        let mut opened = false;
        for (is, it) in paired_batches(source.len(), target.len(), cfg.batch_size, cfg.seed, epoch)? {
            if hit_cap(cfg, &state) {
                stop = Some(StopReason::MaxIterations);
                break 'epochs;
            }
            let xs = translation.images(source, &is)?;
            let xt = target.images_tensor(&it)?;

            let terms = {
                let adapted = Training::new(&f_t, &mut state.rng);
                feature_gan_terms(&adapted, f_ref, &d_feat, &xs, &xt, variant)?
            };
            let disc_value = finite("disc_feat", &terms.disc_loss, state.iteration)?;
            if w.gan_feat > 0.0 {
                let disc = terms.disc_loss.affine(w.gan_feat, 0.0)?;
                opt_d.step(&d_feat, &disc.backward()?)?;
            }
            let gate = state.gate.as_mut().ok_or_else(|| Error::Integrity("feature stage state lacks a gate".into()))?;
            gate.record_step(&terms.real.decisions(variant)?, &terms.fake.decisions(variant)?);
            let accuracy = gate.accuracy().unwrap_or(0.0);
            let permitted = gate.permits();
            state.log("disc_feat", disc_value);
            state.log("disc_accuracy", accuracy);

            if permitted {
                opened = true;
                let mut terms = LossTerms::new();
                let features = f_t.features(&xt, Mode::Train(&mut state.rng))?;
                terms.insert(LossTerm::GanFeat, gan_loss_generator(&d_feat.judge(&features)?, variant)?);
                if w.task > 0.0 {
                    let logits = f_t.forward(&xs, Mode::Train(&mut state.rng))?;
                    terms.insert(LossTerm::Task, task_loss(&logits, &source.labels_tensor(&is)?)?);
                }
                let mut values = Vec::new();
                for (term, t) in terms.iter() {
                    values.push((term.name(), finite(term.name(), t, state.iteration)?));
                }
                let objective = cycada_objective(&w, &terms)?;
                opt_f.step(&f_t, &objective.backward()?)?;
                state.gated_updates += 1;
                for (name, v) in values {
                    state.log(name, v);
                }
            }
            state.iteration += 1;
        }
        state.epoch = epoch + 1;
        save(&f_t, &d_feat, &opt_f, &opt_d, &state)?;
        if !opened {
            log::info!("feature adaptation: gate stayed closed for epoch {}, stopping", epoch + 1);
            stop = Some(StopReason::GateNeverOpened { epoch: epoch + 1 });
            break;
        }
    }
    state.stop = Some(stop.or(finished).unwrap_or(StopReason::Completed));
    save(&f_t, &d_feat, &opt_f, &opt_d, &state)?;
    Ok((f_t, d_feat, state))
}

/// Mean absolute error of `x -> g_ts(g_st(x))` over a dataset.
pub fn reconstruction_error(g_st: &ModelHandle, g_ts: &ModelHandle, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in data.all_indices().chunks(TRANSLATE_BATCH) {
        let x = data.images_tensor(idx)?;
        let rec = g_ts.forward(&g_st.forward(&x, Mode::Eval)?, Mode::Eval)?;
        total += scalar(&(rec - &x)?.abs()?.sum_all()?)?;
        count += x.elem_count();
    }
    Ok(total / count.max(1) as f64)
}

fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?.into_iter().map(denormalize).collect())
}

/// Rows of `original | translated | reconstructed` for the given samples.
pub fn triples_grid(
    g_st: &ModelHandle,
    g_ts: &ModelHandle,
    data: &Dataset,
    indices: &[usize],
) -> Result<image::RgbImage> {
    let x = data.images_tensor(indices)?;
    let fake = g_st.forward(&x, Mode::Eval)?;
    let rec = g_ts.forward(&fake, Mode::Eval)?;
    let (xs, fs, rs) = (to_bytes(&x)?, to_bytes(&fake)?, to_bytes(&rec)?);
    let per = data.image_len();
    let rows: Vec<Vec<&[u8]>> = (0..indices.len())
        .map(|i| vec![&xs[i * per..(i + 1) * per], &fs[i * per..(i + 1) * per], &rs[i * per..(i + 1) * per]])
        .collect();
    image_grid(&rows, data.shape, 2)
}

/// Seed for one stage of one run, decorrelated across stages.
pub fn stage_seed(run_seed: u64, stage: Stage) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(100 + stage.index());
    rng.next_u64()
}
