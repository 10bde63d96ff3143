//! First-order optimizers with explicit, serializable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelHandle, TensorArchive};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64, beta1: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1, beta2: 0.999, eps: default_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr())));
        }
        match *self {
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::Config(format!("invalid Adam parameters beta1={beta1} beta2={beta2} eps={eps}")));
                }
            }
            OptimizerConfig::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ParamState {
    step: u64,
    first: Tensor,
    second: Option<Tensor>,
}

/// Optimizer bound to one model's parameter names.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<String, ParamState>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config: OptimizerConfig,
    steps: BTreeMap<String, u64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: BTreeMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update to every parameter that received a gradient.
    /// Returns the number of parameters changed.
    pub fn step(&mut self, model: &ModelHandle, grads: &GradStore) -> Result<usize> {
        let params = model.trainable_parameters()?;
        let mut updated = 0;
        for (name, var) in params {
            let Some(grad) = grads.get(var) else { continue };
            let grad = grad.detach();
            let param = var.as_tensor().detach();
            let new_value = match self.config {
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let st = self.state.entry(name.to_string()).or_insert_with(|| ParamState {
                        step: 0,
                        first: grad.zeros_like().expect("zeros"),
                        second: Some(grad.zeros_like().expect("zeros")),
                    });
                    st.step += 1;
                    st.first = (st.first.affine(beta1, 0.0)? + grad.affine(1.0 - beta1, 0.0)?)?;
                    let second = st.second.as_ref().expect("adam keeps second moments");
                    let second = (second.affine(beta2, 0.0)? + grad.sqr()?.affine(1.0 - beta2, 0.0)?)?;
                    let bc1 = 1.0 - beta1.powi(st.step as i32);
                    let bc2 = 1.0 - beta2.powi(st.step as i32);
                    let denom = second.sqrt()?.affine(1.0 / bc2.sqrt(), eps)?;
                    let update = (st.first.affine(lr / bc1, 0.0)? / denom)?;
                    st.second = Some(second);
                    (param - update)?
                }
                OptimizerConfig::Sgd { lr, momentum } => {
                    let direction = if momentum > 0.0 {
                        let buf = match self.state.get(name) {
                            Some(st) => (st.first.affine(momentum, 0.0)? + &grad)?,
                            None => grad.clone(),
                        };
                        let st = self.state.entry(name.to_string()).or_insert_with(|| ParamState {
                            step: 0,
                            first: buf.clone(),
                            second: None,
                        });
                        st.step += 1;
                        st.first = buf.clone();
                        buf
                    } else {
                        grad.clone()
                    };
                    (param - direction.affine(lr, 0.0)?)?
                }
            };
            var.set(&new_value)?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let header = StateHeader {
            config: self.config,
            steps: self.state.iter().map(|(k, v)| (k.clone(), v.step)).collect(),
        };
        let text = serde_json::to_string(&header).map_err(|e| Error::Integrity(e.to_string()))?;
        let mut archive = TensorArchive::new(text);
        for (name, st) in &self.state {
            archive.push(format!("{name}#1"), &st.first)?;
            if let Some(second) = &st.second {
                archive.push(format!("{name}#2"), second)?;
            }
        }
        Ok(archive)
    }

    /// Restores state; moment tensors take the dtype of the model parameters.
    pub fn from_archive(archive: &TensorArchive, model: &ModelHandle) -> Result<Self> {
        let header: StateHeader =
            serde_json::from_str(&archive.header).map_err(|e| Error::Integrity(format!("optimizer header: {e}")))?;
        let dtype = model.dtype();
        let mut state = BTreeMap::new();
        for (name, step) in header.steps {
            let first = archive.tensor(&format!("{name}#1"))?.to_dtype(dtype)?;
            let second = match header.config {
                OptimizerConfig::Adam { .. } => Some(archive.tensor(&format!("{name}#2"))?.to_dtype(dtype)?),
                OptimizerConfig::Sgd { .. } => None,
            };
            state.insert(name, ParamState { step, first, second });
        }
        Ok(Self { config: header.config, state })
    }
}
