use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GateMonitor, Stage};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, ModelHandle, TensorArchive};
use crate::optim::Optimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    MaxIterations,
    /// A whole epoch passed without the gate ever opening.
    GateNeverOpened { epoch: usize },
}

/// Resumable bookkeeping of one stage. Model and optimizer tensors are
/// stored beside it in the stage checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub losses: Vec<LossRecord>,
    #[serde(default)]
    pub gate: Option<GateMonitor>,
    /// Adversarial updates of the adapted network that the gate permitted.
    #[serde(default)]
    pub gated_updates: usize,
    #[serde(default)]
    pub stop: Option<StopReason>,
}

impl TrainState {
    pub fn new(stage: Stage, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 40);
        Self { stage, epoch: 0, iteration: 0, rng, losses: Vec::new(), gate: None, gated_updates: 0, stop: None }
    }

    pub fn log(&mut self, term: &str, value: f64) {
        self.losses.push(LossRecord { iteration: self.iteration, term: term.to_string(), value });
    }

    /// Mean of `term` over iterations `[from, to)`.
    pub fn mean_loss(&self, term: &str, from: usize, to: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .losses
            .iter()
            .filter(|r| r.term == term && r.iteration >= from && r.iteration < to)
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last_loss(&self, term: &str) -> Option<f64> {
        self.losses.iter().rev().find(|r| r.term == term).map(|r| r.value)
    }

    pub fn write_losses_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
        for r in &self.losses {
            w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output directory of one stage of one run:
/// `checkpoint/`, `losses.csv`, `triples/`, `metrics.json`.
#[derive(Debug, Clone)]
pub struct StageDir {
    root: PathBuf,
}

impl StageDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{name}.ckpt"))
    }

    pub fn triples_dir(&self) -> PathBuf {
        self.root.join("triples")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    fn state_path(&self) -> PathBuf {
        self.checkpoint_dir().join("state.json")
    }

    pub fn has_state(&self) -> bool {
        self.state_path().is_file()
    }

    /// Writes models, optimizer states and finally `state.json`, so a
    /// present state file implies a complete checkpoint.
    pub fn save(&self, models: &[(&str, &ModelHandle)], optimizers: &[(&str, &Optimizer)], state: &TrainState) -> Result<()> {
        let dir = self.checkpoint_dir();
        fs::create_dir_all(&dir)?;
        for (name, model) in models {
            save_checkpoint(model, &self.model_path(name))?;
        }
        for (name, opt) in optimizers {
            opt.to_archive()?.write(&dir.join(format!("{name}.opt")))?;
        }
        let text = serde_json::to_string(state).map_err(|e| Error::Integrity(e.to_string()))?;
        let tmp = dir.join("state.json.partial");
        fs::write(&tmp, text)?;
        fs::rename(tmp, self.state_path())?;
        state.write_losses_csv(&self.root.join("losses.csv"))?;
        Ok(())
    }

    pub fn load_state(&self) -> Result<TrainState> {
        let text = fs::read_to_string(self.state_path())?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", self.state_path().display())))
    }

    pub fn load_model(&self, name: &str) -> Result<ModelHandle> {
        let path = self.model_path(name);
        if !path.is_file() {
            return Err(Error::Data(format!("missing checkpoint {}", path.display())));
        }
        load_checkpoint(&path)
    }

    pub fn load_optimizer(&self, name: &str, model: &ModelHandle) -> Result<Optimizer> {
        Optimizer::from_archive(&TensorArchive::read(&self.checkpoint_dir().join(format!("{name}.opt")))?, model)
    }
}
