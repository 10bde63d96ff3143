//! Loss terms of the adaptation objective.
//!
//! Every function here is a pure function of its tensor inputs (plus frozen
//! model handles). All losses are returned as scalar tensors so they can be
//! differentiated with `Tensor::backward`; losses are expressed so that every
//! training step *minimizes* its term.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adversarial loss family used by a discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GanVariant {
    /// Cross-entropy GAN with the non-saturating generator objective.
    Minimax,
    /// Least-squares GAN (targets 1 for real, 0 for fake).
    #[default]
    LeastSquares,
}

/// How discriminator scores should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Already squashed into (0, 1).
    Probability,
    /// Unsquashed network output: a logit for the minimax variant, the raw
    /// regression target for the least-squares variant.
    Raw,
}

/// Output of a feature discriminator `(B,)` or a patch discriminator `(B, 1, h, w)`.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    scores: Tensor,
    kind: ScoreKind,
}

impl DiscriminatorOutput {
    pub fn probabilities(scores: Tensor) -> Self {
        Self { scores, kind: ScoreKind::Probability }
    }

    pub fn raw(scores: Tensor) -> Self {
        Self { scores, kind: ScoreKind::Raw }
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Per-sample probability of "real", averaged over patch cells.
    pub fn real_probability(&self, variant: GanVariant) -> Result<Vec<f64>> {
        let b = self.scores.dim(0)?;
        let p = match (self.kind, variant) {
            (ScoreKind::Raw, GanVariant::Minimax) => sigmoid(&self.scores)?,
            _ => self.scores.clone(),
        };
        let p = p.detach().to_dtype(DType::F64)?.reshape((b, ()))?.mean(1)?;
        Ok(p.to_vec1::<f64>()?)
    }

    /// Whether the discriminator calls each sample real (probability > 0.5).
    pub fn decisions(&self, variant: GanVariant) -> Result<Vec<bool>> {
        Ok(self.real_probability(variant)?.into_iter().map(|p| p > 0.5).collect())
    }

    fn log_real(&self) -> Result<Tensor> {
        match self.kind {
            ScoreKind::Probability => Ok(self.scores.log()?),
            ScoreKind::Raw => log_sigmoid(&self.scores),
        }
    }

    fn log_fake(&self) -> Result<Tensor> {
        match self.kind {
            ScoreKind::Probability => Ok(self.scores.affine(-1.0, 1.0)?.log()?),
            ScoreKind::Raw => log_sigmoid(&self.scores.neg()?),
        }
    }

    fn check(&self, variant: GanVariant) -> Result<()> {
        let values = host_values(&self.scores)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("discriminator scores ({v})")));
        }
        if variant == GanVariant::Minimax && self.kind == ScoreKind::Probability {
            if let Some(&p) = values.iter().find(|&&p| p <= 0.0 || p >= 1.0) {
                return Err(Error::Probability(p));
            }
        }
        Ok(())
    }
}

/// Weights of the individual objective terms. A weight of exactly zero
/// disables its term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub task: f64,
    pub gan_image: f64,
    pub gan_feat: f64,
    pub cycle: f64,
    pub semantic: f64,
    /// Optional identity-mapping regularizer; off unless set.
    pub identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::equal()
    }
}

impl LossWeights {
    /// Equal weighting on every objective term, identity term off.
    pub fn equal() -> Self {
        Self { task: 1.0, gan_image: 1.0, gan_feat: 1.0, cycle: 1.0, semantic: 1.0, identity: 0.0 }
    }

    pub fn zero() -> Self {
        Self { task: 0.0, gan_image: 0.0, gan_feat: 0.0, cycle: 0.0, semantic: 0.0, identity: 0.0 }
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Task => self.task,
            LossTerm::GanImage => self.gan_image,
            LossTerm::GanFeat => self.gan_feat,
            LossTerm::Cycle => self.cycle,
            LossTerm::Semantic => self.semantic,
            LossTerm::Identity => self.identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for term in LossTerm::ALL {
            let w = self.get(term);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight `{}` must be finite and >= 0, got {w}", term.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Task,
    GanImage,
    GanFeat,
    Cycle,
    Semantic,
    Identity,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Task,
        LossTerm::GanImage,
        LossTerm::GanFeat,
        LossTerm::Cycle,
        LossTerm::Semantic,
        LossTerm::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Task => "task",
            LossTerm::GanImage => "gan_image",
            LossTerm::GanFeat => "gan_feat",
            LossTerm::Cycle => "cycle",
            LossTerm::Semantic => "semantic",
            LossTerm::Identity => "identity",
        }
    }
}

/// Named scalar loss values feeding [`cycada_objective`].
#[derive(Debug, Clone, Default)]
pub struct LossTerms(BTreeMap<LossTerm, Tensor>);

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, term: LossTerm, value: Tensor) -> &mut Self {
        self.0.insert(term, value);
        self
    }

    pub fn get(&self, term: LossTerm) -> Option<&Tensor> {
        self.0.get(&term)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LossTerm, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }
}

/// An image-to-image mapping, e.g. a generator.
pub trait Translator {
    fn translate(&self, images: &Tensor) -> Result<Tensor>;
}

impl<F> Translator for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn translate(&self, images: &Tensor) -> Result<Tensor> {
        self(images)
    }
}

/// A task network producing class scores and an adaptation feature.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
    /// Flattened `(B, D)` activations of the designated feature layer.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
    /// Frozen classifiers never receive gradients.
    fn is_frozen(&self) -> bool {
        false
    }
}

/// A discriminator.
pub trait Critic {
    fn judge(&self, inputs: &Tensor) -> Result<DiscriminatorOutput>;
}

/// Softmax cross-entropy averaged over the batch (and over pixels for dense
/// `(B, K, H, W)` logits with `(B, H, W)` labels).
pub fn task_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (rows, labels) = flatten_class_scores(logits, labels)?;
    let k = rows.dim(1)?;
    check_finite(&rows, "logits")?;
    let label_values = labels.to_vec1::<u32>()?;
    if let Some(bad) = label_values.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let log_probs = log_softmax(&rows)?;
    let picked = log_probs.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Discriminator side of the adversarial loss, sign-flipped so it is minimized.
pub fn gan_loss_discriminator(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
    variant: GanVariant,
) -> Result<Tensor> {
    real.check(variant)?;
    fake.check(variant)?;
    let loss = match variant {
        GanVariant::Minimax => (real.log_real()?.mean_all()? + fake.log_fake()?.mean_all()?)?.neg()?,
        GanVariant::LeastSquares => {
            (real.scores.affine(1.0, -1.0)?.sqr()?.mean_all()? + fake.scores.sqr()?.mean_all()?)?
        }
    };
    Ok(loss)
}

/// Generator side of the adversarial loss (non-saturating for minimax).
pub fn gan_loss_generator(fake: &DiscriminatorOutput, variant: GanVariant) -> Result<Tensor> {
    fake.check(variant)?;
    let loss = match variant {
        GanVariant::Minimax => fake.log_real()?.mean_all()?.neg()?,
        GanVariant::LeastSquares => fake.scores.affine(1.0, -1.0)?.sqr()?.mean_all()?,
    };
    Ok(loss)
}

/// Mean absolute reconstruction error.
pub fn cycle_loss(original: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    if original.dims() != reconstructed.dims() {
        return Err(Error::Shape(format!(
            "cycle loss between {:?} and {:?}",
            original.dims(),
            reconstructed.dims()
        )));
    }
    Ok((original - reconstructed)?.abs()?.mean_all()?)
}

/// L1 penalty keeping a generator close to identity on its own output domain.
pub fn identity_loss(images: &Tensor, mapped: &Tensor) -> Result<Tensor> {
    cycle_loss(images, mapped)
}

/// Arg-max labels of a fixed classifier; ties go to the lowest class index.
///
/// Returns a detached `u32` tensor of shape `(B,)` for `(B, K)` logits or
/// `(B, H, W)` for dense `(B, K, H, W)` logits.
pub fn pseudo_labels(logits: &Tensor) -> Result<Tensor> {
    let dims = logits.dims().to_vec();
    let (b, k, spatial) = match dims.as_slice() {
        [b, k] => (*b, *k, 1),
        [b, k, h, w] => (*b, *k, h * w),
        _ => return Err(Error::Shape(format!("pseudo labels need (B,K) or (B,K,H,W) logits, got {dims:?}"))),
    };
    let values = host_values(logits)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut out = Vec::with_capacity(b * spatial);
    for n in 0..b {
        for s in 0..spatial {
            let mut best = 0usize;
            let mut best_v = values[n * k * spatial + s];
            for c in 1..k {
                let v = values[(n * k + c) * spatial + s];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    let t = Tensor::from_vec(out, b * spatial, logits.device())?;
    Ok(match dims.as_slice() {
        [_, _, h, w] => t.reshape((b, *h, *w))?,
        _ => t,
    })
}

/// Semantic consistency of both translation directions under a frozen labeler.
pub fn semantic_consistency_loss(
    f_ref: &dyn Classifier,
    g_st: &dyn Translator,
    g_ts: &dyn Translator,
    batch_s: &Tensor,
    batch_t: &Tensor,
) -> Result<Tensor> {
    check_same_image_shape(batch_s, batch_t)?;
    let translated_s = g_st.translate(batch_s)?;
    let translated_t = g_ts.translate(batch_t)?;
    semantic_consistency_from_translations(f_ref, batch_s, batch_t, &translated_s, &translated_t)
}

/// Same as [`semantic_consistency_loss`] for translations already computed:
/// `translated_s = G_st(batch_s)` and `translated_t = G_ts(batch_t)`.
pub fn semantic_consistency_from_translations(
    f_ref: &dyn Classifier,
    batch_s: &Tensor,
    batch_t: &Tensor,
    translated_s: &Tensor,
    translated_t: &Tensor,
) -> Result<Tensor> {
    if !f_ref.is_frozen() {
        return Err(Error::InvalidArgument("semantic consistency requires a frozen reference classifier".into()));
    }
    check_same_image_shape(batch_s, translated_s)?;
    check_same_image_shape(batch_t, translated_t)?;
    let labels_t = pseudo_labels(&f_ref.logits(batch_t)?.detach())?;
    let labels_s = pseudo_labels(&f_ref.logits(batch_s)?.detach())?;
    let target_term = task_loss(&f_ref.logits(translated_t)?, &labels_t)?;
    let source_term = task_loss(&f_ref.logits(translated_s)?, &labels_s)?;
    Ok((target_term + source_term)?)
}

/// Discriminator and task-net losses of the feature-level adversarial stage.
#[derive(Debug, Clone)]
pub struct FeatureGanTerms {
    /// Loss for the feature discriminator; carries no gradient into either task net.
    pub disc_loss: Tensor,
    /// Loss for the adapted task net `f_t`.
    pub gen_loss: Tensor,
    /// Discriminator output on reference features (the "real" side).
    pub real: DiscriminatorOutput,
    /// Discriminator output on detached target features (the "fake" side).
    pub fake: DiscriminatorOutput,
}

/// Feature-level adversarial terms: reference features of translated source
/// images play "real", adapted target features play "fake".
pub fn feature_gan_terms(
    f_t: &dyn Classifier,
    f_ref: &dyn Classifier,
    d_feat: &dyn Critic,
    translated_source: &Tensor,
    target: &Tensor,
    variant: GanVariant,
) -> Result<FeatureGanTerms> {
    if !f_ref.is_frozen() {
        return Err(Error::InvalidArgument("feature adaptation requires a frozen reference classifier".into()));
    }
    let reference = f_ref.features(translated_source)?.detach();
    let adapted = f_t.features(target)?;
    if reference.rank() != 2 || adapted.rank() != 2 || reference.dim(1)? != adapted.dim(1)? {
        return Err(Error::Shape(format!(
            "feature dimensions differ: reference {:?}, adapted {:?}",
            reference.dims(),
            adapted.dims()
        )));
    }
    let real = d_feat.judge(&reference)?;
    let fake = d_feat.judge(&adapted.detach())?;
    let disc_loss = gan_loss_discriminator(&real, &fake, variant)?;
    let gen_loss = gan_loss_generator(&d_feat.judge(&adapted)?, variant)?;
    Ok(FeatureGanTerms { disc_loss, gen_loss, real, fake })
}

/// Weighted sum of the enabled terms. Zero-weight terms are skipped entirely.
pub fn cycada_objective(weights: &LossWeights, terms: &LossTerms) -> Result<Tensor> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    for term in LossTerm::ALL {
        let w = weights.get(term);
        if w == 0.0 {
            continue;
        }
        let value = terms.get(term).ok_or(Error::MissingTerm(term.name()))?;
        let scaled = if w == 1.0 { value.clone() } else { value.affine(w, 0.0)? };
        total = Some(match total {
            Some(t) => (t + scaled)?,
            None => scaled,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let (dtype, device) = terms
                .iter()
                .next()
                .map(|(_, t)| (t.dtype(), t.device().clone()))
                .unwrap_or((DType::F32, candle_core::Device::Cpu));
            Ok(Tensor::zeros((), dtype, &device)?)
        }
    }
}

pub(crate) fn log_softmax(rows: &Tensor) -> Result<Tensor> {
    let max = rows.max_keepdim(D::Minus1)?.detach();
    let shifted = rows.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log σ(z) = -(max(-z, 0) + log(1 + exp(-|z|)))`, stable for large |z|.
fn log_sigmoid(z: &Tensor) -> Result<Tensor> {
    let tail = z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((z.neg()?.relu()? + tail)?.neg()?)
}

pub(crate) fn sigmoid(z: &Tensor) -> Result<Tensor> {
    Ok(z.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

fn flatten_class_scores(logits: &Tensor, labels: &Tensor) -> Result<(Tensor, Tensor)> {
    let labels = labels.to_dtype(DType::U32)?;
    match (logits.dims(), labels.dims()) {
        ([b, k], [bl]) if b == bl => {
            validate_classes(*b, *k)?;
            Ok((logits.clone(), labels))
        }
        ([b, k, h, w], [bl, hl, wl]) if b == bl && h == hl && w == wl => {
            validate_classes(*b, *k)?;
            let rows = logits.permute((0, 2, 3, 1))?.reshape((b * h * w, *k))?;
            Ok((rows, labels.flatten_all()?))
        }
        (l, y) => Err(Error::Shape(format!("logits {l:?} incompatible with labels {y:?}"))),
    }
}

fn validate_classes(b: usize, k: usize) -> Result<()> {
    if b == 0 || k < 2 {
        return Err(Error::Shape(format!("need at least one sample and two classes, got B={b}, K={k}")));
    }
    Ok(())
}

fn check_same_image_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    if da.len() != 4 || db.len() != 4 || da[1..] != db[1..] {
        return Err(Error::Shape(format!("image batches {da:?} and {db:?} differ in (C, H, W)")));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if host_values(t)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

pub(crate) fn host_values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), k), &Device::Cpu).unwrap()
    }

    fn labels(v: &[u32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros((3, 10), DType::F64, &Device::Cpu).unwrap();
        let loss = scalar(&task_loss(&logits, &labels(&[0, 4, 9])).unwrap());
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_is_zero() {
        let loss = scalar(&task_loss(&t2(&[&[0.0, 1000.0, 0.0]]), &labels(&[1])).unwrap());
        assert!(loss < 1e-9);
    }

    #[test]
    fn binary_cross_entropy_matches_softplus() {
        let loss = scalar(&task_loss(&t2(&[&[1.0, 0.0]]), &labels(&[0])).unwrap());
        let softplus = (1.0 + (-1f64).exp()).ln();
        assert!((loss - softplus).abs() < 1e-12);
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn task_loss_rejects_bad_inputs() {
        let logits = t2(&[&[0.0, 1.0]]);
        assert!(matches!(task_loss(&logits, &labels(&[2])), Err(Error::InvalidArgument(_))));
        assert!(matches!(task_loss(&logits, &labels(&[0, 1])), Err(Error::Shape(_))));
        let nan = t2(&[&[f64::NAN, 1.0]]);
        assert!(matches!(task_loss(&nan, &labels(&[0])), Err(Error::NonFinite(_))));
        let one_class = t2(&[&[1.0]]);
        assert!(matches!(task_loss(&one_class, &labels(&[0])), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_task_loss_averages_pixels() {
        let logits = Tensor::zeros((2, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((2, 2, 2), DType::U32, &Device::Cpu).unwrap();
        let loss = scalar(&task_loss(&logits, &y).unwrap());
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    fn probs(v: f64, n: usize) -> DiscriminatorOutput {
        DiscriminatorOutput::probabilities(Tensor::full(v, n, &Device::Cpu).unwrap())
    }

    #[test]
    fn gan_closed_forms() {
        let d = scalar(&gan_loss_discriminator(&probs(0.5, 4), &probs(0.5, 4), GanVariant::Minimax).unwrap());
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let eps = 1e-9;
        let d = scalar(&gan_loss_discriminator(&probs(1.0 - eps, 4), &probs(eps, 4), GanVariant::Minimax).unwrap());
        assert!(d.abs() < 1e-6);
        let d = scalar(&gan_loss_discriminator(&probs(1.0, 3), &probs(0.0, 3), GanVariant::LeastSquares).unwrap());
        assert_eq!(d, 0.0);

        let g = scalar(&gan_loss_generator(&probs(1.0 - eps, 2), GanVariant::Minimax).unwrap());
        assert!(g.abs() < 1e-6);
        let g = scalar(&gan_loss_generator(&probs(0.5, 2), GanVariant::Minimax).unwrap());
        assert!((g - 2f64.ln()).abs() < 1e-12);
        let g = scalar(&gan_loss_generator(&probs(0.5, 2), GanVariant::LeastSquares).unwrap());
        assert!((g - 0.25).abs() < 1e-12);
    }

    #[test]
    fn minimax_rejects_out_of_range_probabilities() {
        for bad in [0.0, 1.0, 1.5, -0.1] {
            let r = gan_loss_generator(&probs(bad, 2), GanVariant::Minimax);
            assert!(matches!(r, Err(Error::Probability(_))), "{bad}");
        }
        // Least-squares accepts boundary values.
        assert!(gan_loss_generator(&probs(1.0, 2), GanVariant::LeastSquares).is_ok());
    }

    #[test]
    fn raw_logits_match_probabilities_under_minimax() {
        let z = Tensor::new(&[-2.0f64, 0.3, 4.0], &Device::Cpu).unwrap();
        let p = sigmoid(&z).unwrap();
        let from_raw =
            scalar(&gan_loss_discriminator(&DiscriminatorOutput::raw(z.clone()), &DiscriminatorOutput::raw(z.clone()), GanVariant::Minimax).unwrap());
        let from_p = scalar(
            &gan_loss_discriminator(
                &DiscriminatorOutput::probabilities(p.clone()),
                &DiscriminatorOutput::probabilities(p),
                GanVariant::Minimax,
            )
            .unwrap(),
        );
        assert!((from_raw - from_p).abs() < 1e-12);
        // Large logits stay finite.
        let big = DiscriminatorOutput::raw(Tensor::new(&[80.0f64, -80.0], &Device::Cpu).unwrap());
        assert!(scalar(&gan_loss_generator(&big, GanVariant::Minimax).unwrap()).is_finite());
    }

    #[test]
    fn cycle_closed_forms() {
        let dev = Device::Cpu;
        let a = Tensor::zeros((2, 1, 4, 4), DType::F64, &dev).unwrap();
        assert_eq!(scalar(&cycle_loss(&a, &a).unwrap()), 0.0);
        let half = Tensor::full(0.5f64, (2, 1, 4, 4), &dev).unwrap();
        assert!((scalar(&cycle_loss(&a, &half).unwrap()) - 0.5).abs() < 1e-12);
        let lo = Tensor::full(-1f64, (1, 3, 2, 2), &dev).unwrap();
        let hi = Tensor::full(1f64, (1, 3, 2, 2), &dev).unwrap();
        assert_eq!(scalar(&cycle_loss(&lo, &hi).unwrap()), 2.0);
        let other = Tensor::zeros((2, 1, 4, 5), DType::F64, &dev).unwrap();
        assert!(matches!(cycle_loss(&a, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn pseudo_label_examples() {
        let l = pseudo_labels(&t2(&[&[0.1, 0.9, 0.3], &[1.0, 1.0, 0.0]])).unwrap();
        assert_eq!(l.to_vec1::<u32>().unwrap(), vec![1, 0]);
        let l = pseudo_labels(&t2(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(l.to_vec1::<u32>().unwrap(), vec![0]);
    }

    #[test]
    fn dense_pseudo_labels_keep_spatial_shape() {
        // Class 2 wins at pixel (0,1), class 0 elsewhere via ties.
        let mut v = vec![0f64; 3 * 4];
        v[2 * 4 + 1] = 5.0;
        let logits = Tensor::from_vec(v, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let l = pseudo_labels(&logits).unwrap();
        assert_eq!(l.dims(), &[1, 2, 2]);
        assert_eq!(l.flatten_all().unwrap().to_vec1::<u32>().unwrap(), vec![0, 2, 0, 0]);
    }

    #[test]
    fn objective_examples() {
        let dev = Device::Cpu;
        let mut terms = LossTerms::new();
        for (i, term) in [LossTerm::Task, LossTerm::GanImage, LossTerm::GanFeat, LossTerm::Cycle, LossTerm::Semantic]
            .into_iter()
            .enumerate()
        {
            terms.insert(term, Tensor::new((i + 1) as f64, &dev).unwrap());
        }
        assert_eq!(scalar(&cycada_objective(&LossWeights::zero(), &terms).unwrap()), 0.0);
        assert_eq!(scalar(&cycada_objective(&LossWeights::equal(), &terms).unwrap()), 15.0);
        let w = LossWeights { cycle: 10.0, semantic: 0.5, ..LossWeights::equal() };
        assert_eq!(scalar(&cycada_objective(&w, &terms).unwrap()), 1.0 + 2.0 + 3.0 + 40.0 + 2.5);

        let mut partial = LossTerms::new();
        partial.insert(LossTerm::Task, Tensor::new(1.0f64, &dev).unwrap());
        let only_task = LossWeights { task: 2.0, ..LossWeights::zero() };
        assert_eq!(scalar(&cycada_objective(&only_task, &partial).unwrap()), 2.0);
        assert!(matches!(cycada_objective(&LossWeights::equal(), &partial), Err(Error::MissingTerm("gan_image"))));
        let negative = LossWeights { cycle: -1.0, ..LossWeights::zero() };
        assert!(cycada_objective(&negative, &partial).is_err());
    }

    /// Linear scorer `x -> flatten(x) · W`, optionally frozen.
    struct Linear {
        w: Tensor,
        frozen: bool,
    }

    impl Classifier for Linear {
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            Ok(images.flatten_from(1)?.matmul(&self.w)?)
        }
        fn features(&self, images: &Tensor) -> Result<Tensor> {
            self.logits(images)
        }
        fn is_frozen(&self) -> bool {
            self.frozen
        }
    }

    /// Saturated two-class labeler: scores `±margin · mean(x)`.
    fn margin_labeler(pixels: usize, margin: f64) -> Linear {
        let mut w = Vec::with_capacity(pixels * 2);
        for _ in 0..pixels {
            w.push(margin / pixels as f64);
            w.push(-margin / pixels as f64);
        }
        Linear { w: Tensor::from_vec(w, (pixels, 2), &Device::Cpu).unwrap(), frozen: true }
    }

    fn signed_batch() -> Tensor {
        // Two samples with mean +1 and -1.
        let mut v = vec![1f64; 4];
        v.extend([-1f64; 4]);
        Tensor::from_vec(v, (2, 1, 2, 2), &Device::Cpu).unwrap()
    }

    fn identity(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn negate(x: &Tensor) -> Result<Tensor> {
        Ok(x.neg()?)
    }

    #[test]
    fn semantic_consistency_examples() {
        let f = margin_labeler(4, 1000.0);
        let x = signed_batch();
        let consistent = scalar(&semantic_consistency_loss(&f, &identity, &identity, &x, &x).unwrap());
        assert!(consistent < 1e-9);

        // Flipping every source prediction costs the full logit gap (2000).
        let flipped = scalar(&semantic_consistency_loss(&f, &negate, &identity, &x, &x).unwrap());
        assert!(flipped >= 1000.0);
        assert!((flipped - 2000.0).abs() < 1e-6);

        let uniform = Linear { w: Tensor::zeros((4, 10), DType::F64, &Device::Cpu).unwrap(), frozen: true };
        let l = scalar(&semantic_consistency_loss(&uniform, &identity, &identity, &x, &x).unwrap());
        assert!((l - 2.0 * 10f64.ln()).abs() < 1e-12);
        assert!((l - 4.605).abs() < 1e-3);
    }

    #[test]
    fn semantic_consistency_requires_frozen_reference() {
        let mut f = margin_labeler(4, 1.0);
        f.frozen = false;
        let x = signed_batch();
        assert!(matches!(semantic_consistency_loss(&f, &identity, &identity, &x, &x), Err(Error::InvalidArgument(_))));
        let odd = Tensor::zeros((2, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let f = margin_labeler(4, 1.0);
        assert!(matches!(semantic_consistency_loss(&f, &identity, &identity, &x, &odd), Err(Error::Shape(_))));
    }

    /// Discriminator emitting a fixed probability for every row.
    struct Constant(f64);

    impl Critic for Constant {
        fn judge(&self, inputs: &Tensor) -> Result<DiscriminatorOutput> {
            Ok(DiscriminatorOutput::probabilities(Tensor::full(self.0, inputs.dim(0)?, inputs.device())?))
        }
    }

    /// `sigmoid(features · v + c)` as probabilities.
    struct Logistic {
        v: Tensor,
        c: f64,
    }

    impl Critic for Logistic {
        fn judge(&self, inputs: &Tensor) -> Result<DiscriminatorOutput> {
            let z = inputs.matmul(&self.v)?.squeeze(1)?.affine(1.0, self.c)?;
            Ok(DiscriminatorOutput::probabilities(sigmoid(&z)?))
        }
    }

    #[test]
    fn feature_terms_with_confused_discriminator() {
        let x = signed_batch();
        let f_ref = margin_labeler(4, 1.0);
        let f_t = Linear { frozen: false, ..margin_labeler(4, 1.0) };
        let terms = feature_gan_terms(&f_t, &f_ref, &Constant(0.5), &x, &x, GanVariant::Minimax).unwrap();
        assert!((scalar(&terms.disc_loss) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&terms.gen_loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_terms_match_term_by_term_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (b, pixels, d) = (3, 4, 3);
        let xs = draw(b * pixels);
        let xt = draw(b * pixels);
        let wr = draw(pixels * d);
        let wt = draw(pixels * d);
        let v = draw(d);
        let c = 0.1;
        let dev = Device::Cpu;
        let f_ref = Linear { w: Tensor::from_vec(wr.clone(), (pixels, d), &dev).unwrap(), frozen: true };
        let f_t = Linear { w: Tensor::from_vec(wt.clone(), (pixels, d), &dev).unwrap(), frozen: false };
        let critic = Logistic { v: Tensor::from_vec(v.clone(), (d, 1), &dev).unwrap(), c };
        let images = |x: &[f64]| Tensor::from_vec(x.to_vec(), (b, 1, 2, 2), &dev).unwrap();
        let terms = feature_gan_terms(&f_t, &f_ref, &critic, &images(&xs), &images(&xt), GanVariant::Minimax).unwrap();

        let prob = |x: &[f64], w: &[f64], n: usize| -> f64 {
            let mut z = c;
            for j in 0..d {
                let feat: f64 = (0..pixels).map(|p| x[n * pixels + p] * w[p * d + j]).sum();
                z += feat * v[j];
            }
            1.0 / (1.0 + (-z).exp())
        };
        let mut log_real = 0.0;
        let mut log_not_fake = 0.0;
        let mut log_fooled = 0.0;
        for n in 0..b {
            log_real += prob(&xs, &wr, n).ln();
            log_not_fake += (1.0 - prob(&xt, &wt, n)).ln();
            log_fooled += prob(&xt, &wt, n).ln();
        }
        let disc = -(log_real / b as f64 + log_not_fake / b as f64);
        let gen = -log_fooled / b as f64;
        assert!((scalar(&terms.disc_loss) - disc).abs() < 1e-6);
        assert!((scalar(&terms.gen_loss) - gen).abs() < 1e-6);
    }

    #[test]
    fn feature_terms_reject_mismatched_dimensions() {
        let x = signed_batch();
        let f_ref = margin_labeler(4, 1.0);
        let f_t = Linear { w: Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap(), frozen: false };
        let r = feature_gan_terms(&f_t, &f_ref, &Constant(0.5), &x, &x, GanVariant::Minimax);
        assert!(matches!(r, Err(Error::Shape(_))));
        let unfrozen = Linear { frozen: false, ..margin_labeler(4, 1.0) };
        let r = feature_gan_terms(&f_t, &unfrozen, &Constant(0.5), &x, &x, GanVariant::Minimax);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, k: usize, v: Vec<f64>) -> Tensor {
            Tensor::from_vec(v, (rows, k), &Device::Cpu).unwrap()
        }

        fn logits_and_labels() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<u32>)> {
            (1usize..6, 2usize..6).prop_flat_map(|(b, k)| {
                (
                    Just(b),
                    Just(k),
                    prop::collection::vec(-50.0f64..50.0, b * k),
                    prop::collection::vec(0u32..k as u32, b),
                )
            })
        }

        proptest! {
            #[test]
            fn task_loss_is_nonnegative((b, k, v, y) in logits_and_labels()) {
                let loss = scalar(&task_loss(&matrix(b, k, v), &labels(&y)).unwrap());
                prop_assert!(loss >= 0.0);
            }

            #[test]
            fn constant_rows_give_ln_k((b, k, _v, y) in logits_and_labels(), c in -100.0f64..100.0) {
                let loss = scalar(&task_loss(&matrix(b, k, vec![c; b * k]), &labels(&y)).unwrap());
                prop_assert!((loss - (k as f64).ln()).abs() < 1e-9);
            }

            #[test]
            fn cycle_loss_is_a_metric(
                a in prop::collection::vec(-1.0f64..1.0, 12),
                b in prop::collection::vec(-1.0f64..1.0, 12),
                c in prop::collection::vec(-1.0f64..1.0, 12),
            ) {
                let t = |v: &Vec<f64>| Tensor::from_vec(v.clone(), (1, 3, 2, 2), &Device::Cpu).unwrap();
                let (a, b, c) = (t(&a), t(&b), t(&c));
                prop_assert_eq!(scalar(&cycle_loss(&a, &a).unwrap()), 0.0);
                let ab = scalar(&cycle_loss(&a, &b).unwrap());
                prop_assert_eq!(ab, scalar(&cycle_loss(&b, &a).unwrap()));
                let ac = scalar(&cycle_loss(&a, &c).unwrap());
                let cb = scalar(&cycle_loss(&c, &b).unwrap());
                prop_assert!(ab <= ac + cb + 1e-12);
            }

            #[test]
            fn pseudo_labels_ignore_shift_and_positive_scale(
                (b, k, raw, _y) in logits_and_labels(),
                shifts in prop::collection::vec(-1000.0f64..1000.0, 6),
                scale in 0.01f64..100.0,
            ) {
                // Quarter-integer logits keep shifted and scaled values distinct.
                let v: Vec<f64> = raw.iter().map(|x| (x * 4.0).round() / 4.0).collect();
                let base = pseudo_labels(&matrix(b, k, v.clone())).unwrap().to_vec1::<u32>().unwrap();
                let shifted: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + shifts[i / k]).collect();
                let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
                prop_assert_eq!(&base, &pseudo_labels(&matrix(b, k, shifted)).unwrap().to_vec1::<u32>().unwrap());
                prop_assert_eq!(&base, &pseudo_labels(&matrix(b, k, scaled)).unwrap().to_vec1::<u32>().unwrap());
            }

            #[test]
            fn minimax_discriminator_loss_vanishes_only_at_the_perfect_corner(
                real in 0.01f64..0.99,
                fake in 0.01f64..0.99,
                step in 0.0f64..0.5,
            ) {
                let loss = |r: f64, f: f64| {
                    scalar(&gan_loss_discriminator(&super::probs(r, 3), &super::probs(f, 3), GanVariant::Minimax).unwrap())
                };
                let here = loss(real, fake);
                prop_assert!(here > 1e-3);
                // Moving D(real) up and D(fake) down never increases the loss.
                let better = loss(real + (0.999 - real) * step, fake - (fake - 0.001) * step);
                prop_assert!(better <= here + 1e-12);
                prop_assert!(loss(1.0 - 1e-12, 1e-12) < 1e-9);
            }

            #[test]
            fn objective_is_linear_in_each_weight(
                values in prop::collection::vec(0.0f64..10.0, 5),
                weights in prop::collection::vec(0.0f64..3.0, 5),
                which in 0usize..5,
                a in 0.0f64..5.0,
                b in 0.0f64..5.0,
            ) {
                let order = [LossTerm::Task, LossTerm::GanImage, LossTerm::GanFeat, LossTerm::Cycle, LossTerm::Semantic];
                let mut terms = LossTerms::new();
                for (term, v) in order.iter().zip(&values) {
                    terms.insert(*term, Tensor::new(*v, &Device::Cpu).unwrap());
                }
                let with = |w_i: f64| {
                    let mut w = LossWeights { task: weights[0], gan_image: weights[1], gan_feat: weights[2], cycle: weights[3], semantic: weights[4], identity: 0.0 };
                    match order[which] {
                        LossTerm::Task => w.task = w_i,
                        LossTerm::GanImage => w.gan_image = w_i,
                        LossTerm::GanFeat => w.gan_feat = w_i,
                        LossTerm::Cycle => w.cycle = w_i,
                        _ => w.semantic = w_i,
                    }
                    scalar(&cycada_objective(&w, &terms).unwrap())
                };
                let zero = with(0.0);
                prop_assert!((with(a) - (zero + a * values[which])).abs() < 1e-9);
                prop_assert!((with(a + b) - with(a) - b * values[which]).abs() < 1e-9);
            }
        }
    }
}
