//! Two-stage training under hidden fraud: Bayes label collection, a per-node
//! transition model, and forward loss correction.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{train_model, weighted_nll_var, ClassWeights, Objective, Supervision, TrainConfig};
use crate::model::{mwgcn_var, Activation, KeModel, ModelInputs};
use crate::numeric::{CsrMatrix, Optimizer, OptimizerConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SieveConfig {
    /// Weight of the confidence regularizer; 0 disables the sieve.
    pub beta: f64,
    /// Share of the epoch cap over which the regularizer ramps up.
    pub warmup_fraction: f64,
    /// Minimum reference confidence in the estimated label, after undoing the class
    /// weights, for a sample to be kept.
    pub confidence: f64,
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            warmup_fraction: 0.1,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SievedSample {
    pub node: usize,
    pub noisy_label: u8,
    pub bayes_label: u8,
    pub kept: bool,
}

/// Trains a fresh reference model with the confidence-regularized loss for the full
/// epoch budget and estimates Bayes labels for the training rows from its last
/// iterate. The reference model is dropped.
pub fn collect_bayes_labels(
    reference: KeModel,
    inputs: &ModelInputs,
    sup: &Supervision,
    sieve: &SieveConfig,
    train: &TrainConfig,
) -> Result<Vec<SievedSample>> {
    if sieve.beta.is_nan() || sieve.beta < 0.0 || !(0.0..=1.0).contains(&sieve.warmup_fraction) {
        return Err(Error::Config("sieve beta must be >= 0 and warmup_fraction in [0, 1]".into()));
    }
    let objective = Objective::Confidence {
        beta: sieve.beta,
        warmup_epochs: (sieve.warmup_fraction * train.max_epochs as f64).ceil() as usize,
    };
    // the reference runs the whole epoch budget and its last iterate is used
    let full = TrainConfig {
        patience: train.max_epochs,
        ..train.clone()
    };
    let trained = train_model(reference, inputs, sup, &objective, &full, false)?;
    let mut last = trained.model.clone();
    last.set_params(trained.last.clone())?;
    let (y, _) = crate::model::forward(&last, inputs)?;
    let [w0, w1] = sup.weights.0;
    let samples: Vec<SievedSample> = sup
        .train
        .iter()
        .zip(&sup.train_labels)
        .map(|(&node, &noisy)| {
            // undo the class weighting before taking the argmax
            let (a, b) = (y.get(node, 0) / w0, y.get(node, 1) / w1);
            let p1 = b / (a + b);
            let bayes = u8::from(p1 > 0.5);
            let confidence = p1.max(1.0 - p1);
            SievedSample {
                node,
                noisy_label: noisy,
                bayes_label: bayes,
                kept: sieve.beta == 0.0 || confidence >= sieve.confidence,
            }
        })
        .collect();
    let kept_fraud = samples.iter().filter(|s| s.kept && s.bayes_label == 1).count();
    let kept_clean = samples.iter().filter(|s| s.kept && s.bayes_label == 0).count();
    if kept_fraud == 0 || kept_clean == 0 {
        let est_fraud = samples.iter().filter(|s| s.bayes_label == 1).count();
        return Err(Error::Sieve(format!(
            "kept {kept_fraud} estimated frauds and {kept_clean} estimated non-frauds out of {} \
             ({est_fraud} estimated frauds before filtering, best valid AUC {:.4} at epoch {})",
            samples.len(),
            trained.best_valid_auc,
            trained.best_epoch
        )));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Outputs are kept inside `[ε, 1-ε]`.
    pub epsilon: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            hidden: 500,
            epochs: 200,
            learning_rate: 1e-2,
            epsilon: 1e-6,
        }
    }
}

/// One MW-GCN layer over the sum-up graph followed by a squashed scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub w: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub epsilon: f64,
}

impl TransitionModel {
    pub fn new(d_in: usize, config: &TransitionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: Tensor::glorot(d_in, config.hidden, &mut rng),
            head_w: Tensor::glorot(config.hidden, 1, &mut rng),
            head_b: Tensor::zeros(1, 1),
            epsilon: config.epsilon,
        }
    }

    fn params(&self) -> [&Tensor; 3] {
        [&self.w, &self.head_w, &self.head_b]
    }

    /// `ε + (1 - 2ε) σ(...)`, an `N×1` column.
    fn build(&self, tape: &mut Tape, graph: &Arc<CsrMatrix<f64>>, x: &Tensor, params: &[Var]) -> Result<Var> {
        let xv = tape.constant(x.clone())?;
        let h = mwgcn_var(tape, xv, graph, params[0], Activation::Relu)?;
        let logit = tape.matmul(h, params[1])?;
        let logit = tape.add_row_bias(logit, params[2])?;
        let s = tape.sigmoid(logit)?;
        let s = tape.scale(s, 1.0 - 2.0 * self.epsilon)?;
        let eps = tape.constant(Tensor::filled(x.rows(), 1, self.epsilon))?;
        tape.add(s, eps)
    }

    /// `γ̂_v` for every company.
    pub fn predict(&self, graph: &Arc<CsrMatrix<f64>>, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self
            .params()
            .iter()
            .map(|p| tape.constant((*p).clone()))
            .collect::<Result<Vec<_>>>()?;
        let g = self.build(&mut tape, graph, x, &params)?;
        Ok(tape.value(g).data().to_vec())
    }
}

/// Bernoulli negative log-likelihood of `ỹ = 0` given `γ̂`, over kept samples with `ŷ* = 1`.
fn transition_loss(tape: &mut Tape, gamma: Var, targets: &[(usize, u8)]) -> Result<Var> {
    let rows: Arc<[usize]> = targets.iter().map(|t| t.0).collect();
    let g = tape.gather_rows(gamma, &rows)?;
    // columns (1 - γ̂, γ̂) read as probabilities of observing (fraud, non-fraud)
    let neg = tape.scale(g, -1.0)?;
    let one = tape.constant(Tensor::filled(rows.len(), 1, 1.0))?;
    let keep = tape.add(one, neg)?;
    let probs = tape.concat_cols(&[keep, g])?;
    let hidden: Vec<u8> = targets.iter().map(|t| u8::from(t.1 == 0)).collect();
    weighted_nll_var(tape, probs, &hidden, ClassWeights::UNIT)
}

pub fn train_transition_model(
    samples: &[SievedSample],
    sum_graph: &Arc<CsrMatrix<f64>>,
    x_att: &Tensor,
    config: &TransitionConfig,
    seed: u64,
) -> Result<TransitionModel> {
    if !(config.epsilon > 0.0 && config.epsilon < 0.5) || config.hidden == 0 {
        return Err(Error::Config("transition epsilon must lie in (0, 0.5) and hidden be positive".into()));
    }
    let targets: Vec<(usize, u8)> = samples
        .iter()
        .filter(|s| s.kept && s.bayes_label == 1)
        .map(|s| (s.node, s.noisy_label))
        .collect();
    if targets.is_empty() {
        return Err(Error::Training("no kept sample has an estimated fraud label".into()));
    }
    let mut model = TransitionModel::new(x_att.cols(), config, seed);
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.learning_rate));
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let params = model
            .params()
            .iter()
            .map(|p| tape.leaf((*p).clone()))
            .collect::<Result<Vec<_>>>()?;
        let gamma = model.build(&mut tape, sum_graph, x_att, &params)?;
        let loss = transition_loss(&mut tape, gamma, &targets)?;
        if epoch % 50 == 0 {
            log::debug!("transition epoch {epoch}: loss {:.5}", tape.value(loss).item()?);
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.iter().map(|&v| grads.get(v)).collect();
        let mut current = vec![model.w.clone(), model.head_w.clone(), model.head_b.clone()];
        opt.step(&mut current, &g)?;
        let mut it = current.into_iter();
        model.w = it.next().expect("w");
        model.head_w = it.next().expect("head_w");
        model.head_b = it.next().expect("head_b");
    }
    Ok(model)
}

/// `[[1, 0], [γ̂, 1 - γ̂]]`, rows indexed by the Bayes label and columns by the observed one.
pub fn transition_matrix(gamma: f64) -> Result<[[f64; 2]; 2]> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("transition rate {gamma} outside (0, 1)")));
    }
    Ok([[1.0, 0.0], [gamma, 1.0 - gamma]])
}

/// Weighted mean of `-log (ŷ_v T̂*(v))_{ỹ_v}`. `γ̂ = 0` is accepted and gives the plain loss.
pub fn forward_corrected_loss(y_hat: &Tensor, labels: &[u8], gamma: &[f64], weights: ClassWeights) -> Result<f64> {
    if gamma.len() != y_hat.rows() {
        return Err(Error::Dimension(format!("{} rates for {} rows", gamma.len(), y_hat.rows())));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g >= 0.0 && **g < 1.0)) {
        return Err(Error::Domain(format!("transition rate {g} outside [0, 1)")));
    }
    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone())?;
    let g = tape.constant(Tensor::new(gamma.len(), 1, gamma.to_vec())?)?;
    let p = tape.forward_correct(y, g)?;
    let loss = weighted_nll_var(&mut tape, p, labels, weights)?;
    tape.value(loss).item()
}

pub fn write_sieve_csv(path: &Path, samples: &[SievedSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node_id", "noisy_label", "bayes_label", "kept"])?;
    for s in samples {
        w.write_record([
            s.node.to_string(),
            s.noisy_label.to_string(),
            s.bayes_label.to_string(),
            s.kept.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gamma_csv(path: &Path, nodes: &[usize], gamma: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node_id", "gamma_hat"])?;
    for (n, g) in nodes.iter().zip(gamma) {
        w.write_record([n.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
