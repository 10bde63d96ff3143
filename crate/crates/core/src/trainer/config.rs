use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{GanVariant, LossWeights};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SourcePretrain,
    PixelAdapt,
    TaskOnTranslated,
    FeatureAdapt,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::SourcePretrain, Stage::PixelAdapt, Stage::TaskOnTranslated, Stage::FeatureAdapt];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SourcePretrain => "source-pretrain",
            Stage::PixelAdapt => "pixel-adapt",
            Stage::TaskOnTranslated => "task-on-translated",
            Stage::FeatureAdapt => "feature-adapt",
        }
    }

    pub fn index(self) -> u64 {
        Stage::ALL.iter().position(|&s| s == self).unwrap() as u64
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_cycle: bool,
    pub disable_semantic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Generator updates need discriminator accuracy strictly above this.
    pub threshold: f64,
    /// Window length in iterations; each iteration contributes one decision
    /// per real and per fake sample.
    pub window_iterations: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { threshold: 0.6, window_iterations: 1 }
    }
}

/// Which frozen model supplies the "real" features in feature adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureReference {
    /// Snapshot of the task net entering the stage (trained on translated source).
    #[default]
    StageSnapshot,
    /// The source-pretrained model.
    SourceModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationMode {
    /// Translate each batch as it is drawn.
    #[default]
    OnTheFly,
    /// Translate the whole split once, keyed by the generator digest.
    Cached,
}

/// Labeled domain a supervised stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    #[default]
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer iterations for the stage.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "least_squares")]
    pub image_gan: GanVariant,
    #[serde(default = "minimax")]
    pub feature_gan: GanVariant,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub feature_reference: FeatureReference,
    #[serde(default)]
    pub translation: TranslationMode,
    /// Supervised stages only; `target` gives the labeled-target upper bound.
    #[serde(default)]
    pub train_domain: Domain,
    /// Start the task net of later stages from the source model's weights.
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn least_squares() -> GanVariant {
    GanVariant::LeastSquares
}

fn minimax() -> GanVariant {
    GanVariant::Minimax
}

fn yes() -> bool {
    true
}

impl StageConfig {
    /// Digit-benchmark defaults for a stage.
    pub fn digits(stage: Stage) -> Self {
        let task_only = LossWeights { task: 1.0, ..LossWeights::zero() };
        let (optimizer, batch_size, max_epochs, weights) = match stage {
            Stage::SourcePretrain | Stage::TaskOnTranslated => (OptimizerConfig::adam(1e-4, 0.9), 128, 100, task_only),
            Stage::PixelAdapt => (
                OptimizerConfig::adam(2e-4, 0.5),
                100,
                50,
                LossWeights { task: 0.0, gan_feat: 0.0, ..LossWeights::equal() },
            ),
            Stage::FeatureAdapt => (
                OptimizerConfig::adam(1e-5, 0.5),
                128,
                200,
                LossWeights { gan_feat: 1.0, ..LossWeights::zero() },
            ),
        };
        Self {
            stage,
            optimizer,
            batch_size,
            max_epochs,
            max_iterations: None,
            weights,
            ablation: Ablation::default(),
            seed: 0,
            image_gan: GanVariant::LeastSquares,
            feature_gan: GanVariant::Minimax,
            gate: GateConfig::default(),
            feature_reference: FeatureReference::default(),
            translation: TranslationMode::default(),
            train_domain: Domain::default(),
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{}: batch size must be >= 1", self.stage.name())));
        }
        if self.stage != Stage::PixelAdapt && (self.ablation.disable_cycle || self.ablation.disable_semantic) {
            return Err(Error::Config(format!("{}: ablation flags only apply to pixel-adapt", self.stage.name())));
        }
        if self.stage != Stage::SourcePretrain && self.train_domain == Domain::Target {
            return Err(Error::Config(format!("{}: train_domain = target only applies to source-pretrain", self.stage.name())));
        }
        if !(0.0..=1.0).contains(&self.gate.threshold) || self.gate.window_iterations == 0 {
            return Err(Error::Config(format!(
                "gate needs threshold in [0, 1] and window >= 1, got {} / {}",
                self.gate.threshold, self.gate.window_iterations
            )));
        }
        Ok(())
    }

    /// Weights in effect after ablations: disabled terms get weight exactly 0.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.disable_cycle {
            w.cycle = 0.0;
        }
        if self.ablation.disable_semantic {
            w.semantic = 0.0;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_defaults() {
        let s = StageConfig::digits(Stage::SourcePretrain);
        assert_eq!((s.optimizer.lr(), s.max_epochs, s.batch_size), (1e-4, 100, 128));
        let p = StageConfig::digits(Stage::PixelAdapt);
        assert_eq!((p.optimizer.lr(), p.max_epochs, p.batch_size), (2e-4, 50, 100));
        assert_eq!((p.weights.cycle, p.weights.semantic, p.weights.gan_image), (1.0, 1.0, 1.0));
        let f = StageConfig::digits(Stage::FeatureAdapt);
        assert_eq!((f.optimizer.lr(), f.max_epochs), (1e-5, 200));
        assert_eq!(f.gate.threshold, 0.6);
        for stage in Stage::ALL {
            StageConfig::digits(stage).validate().unwrap();
        }
    }

    #[test]
    fn ablation_flags_are_pixel_only() {
        let mut s = StageConfig::digits(Stage::FeatureAdapt);
        s.ablation.disable_cycle = true;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut p = StageConfig::digits(Stage::PixelAdapt);
        p.ablation = Ablation { disable_cycle: true, disable_semantic: true };
        p.validate().unwrap();
        let w = p.effective_weights();
        assert_eq!((w.cycle, w.semantic, w.gan_image), (0.0, 0.0, 1.0));
    }
}
