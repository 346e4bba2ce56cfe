use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, weighted_nll_var, ClassWeights};
use crate::error::{Error, Result};
use crate::model::{KeModel, ModelInputs};
use crate::numeric::{Optimizer, OptimizerConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epoch cap.
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 300,
            patience: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Training rows with their observed labels, and the validation rows used for early stopping.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub train: Arc<[usize]>,
    pub train_labels: Vec<u8>,
    pub valid: Vec<usize>,
    pub valid_labels: Vec<u8>,
    pub weights: ClassWeights,
}

impl Supervision {
    /// Picks rows of a per-company label vector; class weights come from the training rows.
    pub fn new(labels: &[u8], train: &[usize], valid: &[usize]) -> Result<Self> {
        let train_labels: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
        let weights = ClassWeights::inverse_frequency(train_labels.iter().copied())?;
        Ok(Self {
            train: train.into(),
            train_labels,
            valid: valid.to_vec(),
            valid_labels: valid.iter().map(|&i| labels[i]).collect(),
            weights,
        })
    }
}

const CONFIDENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum Objective {
    /// Weighted cross-entropy against the observed labels.
    Plain,
    /// Weighted cross-entropy of `ŷ T̂*(v)`, one `γ̂` per training row.
    Corrected(Arc<[f64]>),
    /// Cross-entropy minus `β_t` times the mean cross-entropy over both classes, on
    /// row-normalized scores, each sample scaled by its class weight. `β_t` ramps
    /// linearly over `warmup_epochs`.
    Confidence { beta: f64, warmup_epochs: usize },
}

impl Objective {
    pub fn beta_at(beta: f64, warmup_epochs: usize, epoch: usize) -> f64 {
        if warmup_epochs == 0 {
            beta
        } else {
            beta * ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0)
        }
    }
}

/// Records the training loss of `objective` on top of the class scores `y_hat`.
pub fn objective_var(
    tape: &mut Tape,
    y_hat: Var,
    sup: &Supervision,
    objective: &Objective,
    epoch: usize,
) -> Result<Var> {
    let picked = tape.gather_rows(y_hat, &sup.train)?;
    match objective {
        Objective::Plain => weighted_nll_var(tape, picked, &sup.train_labels, sup.weights),
        Objective::Corrected(gamma) => {
            if gamma.len() != sup.train.len() {
                return Err(Error::Dimension(format!(
                    "{} transition rates for {} training rows",
                    gamma.len(),
                    sup.train.len()
                )));
            }
            let g = tape.constant(Tensor::new(gamma.len(), 1, gamma.to_vec())?)?;
            let p = tape.forward_correct(picked, g)?;
            weighted_nll_var(tape, p, &sup.train_labels, sup.weights)
        }
        Objective::Confidence { beta, warmup_epochs } => {
            let logs = tape.log(picked)?;
            let p = tape.softmax_rows(logs)?;
            let beta_t = Objective::beta_at(*beta, *warmup_epochs, epoch);
            if beta_t == 0.0 {
                return weighted_nll_var(tape, p, &sup.train_labels, sup.weights);
            }
            // per sample: w_y · (-log p_y + β/2 · Σ_c log p_c), averaged over rows
            let m = sup.train.len() as f64;
            let mut coeff = Tensor::zeros(sup.train.len(), 2);
            for (i, &y) in sup.train_labels.iter().enumerate() {
                let w = sup.weights.0[usize::from(y)] / m;
                for c in 0..2 {
                    let own = if c == usize::from(y) { -1.0 } else { 0.0 };
                    coeff.set(i, c, w * (own + beta_t / 2.0));
                }
            }
            // floor the probabilities so the unbounded confidence term cannot reach log 0
            let squeezed = tape.scale(p, 1.0 - 2.0 * CONFIDENCE_FLOOR)?;
            let floor = tape.constant(Tensor::filled(sup.train.len(), 2, CONFIDENCE_FLOOR))?;
            let p = tape.add(squeezed, floor)?;
            let logp = tape.log(p)?;
            let c = tape.constant(coeff)?;
            let terms = tape.mul(logp, c)?;
            tape.sum(terms)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: KeModel,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    /// Parameters after the last optimizer step.
    pub last: Vec<Tensor>,
    /// Parameters after every optimizer step, when requested.
    pub trajectory: Vec<Vec<Tensor>>,
}

/// Full-batch Adam with early stopping on validation AUC of the fraud column.
pub fn train_model(
    mut model: KeModel,
    inputs: &ModelInputs,
    sup: &Supervision,
    objective: &Objective,
    config: &TrainConfig,
    keep_trajectory: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.learning_rate));
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut trajectory = Vec::new();
    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let graph = model.build(&mut tape, inputs, true)?;
        let loss = objective_var(&mut tape, graph.y_hat, sup, objective, epoch)?;
        let train_loss = tape.value(loss).item()?;
        let y = tape.value(graph.y_hat);
        let scores: Vec<f64> = sup.valid.iter().map(|&i| y.get(i, 1)).collect();
        let valid_auc = auc(&scores, &sup.valid_labels)?;
        curve.push(EpochRecord {
            epoch,
            train_loss,
            valid_auc,
        });
        if best.as_ref().is_none_or(|(_, a, _)| valid_auc > *a) {
            best = Some((epoch, valid_auc, model.params().to_vec()));
        } else if best.as_ref().is_some_and(|(e, _, _)| epoch - e >= config.patience) {
            break;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = graph.params.iter().map(|&v| grads.get(v)).collect();
        opt.step(model.params_mut(), &g)?;
        if keep_trajectory {
            trajectory.push(model.params().to_vec());
        }
    }
    let (best_epoch, best_valid_auc, params) = best.expect("at least one epoch");
    let last = model.params().to_vec();
    model.set_params(params)?;
    Ok(TrainOutcome {
        model,
        curve,
        best_epoch,
        best_valid_auc,
        last,
        trajectory,
    })
}
