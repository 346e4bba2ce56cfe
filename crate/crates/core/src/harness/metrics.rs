use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Per-class loss weights, indexed by label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 2]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0, 1.0]);

    /// Inverse class frequency, normalized so the two weights average to one.
    pub fn inverse_frequency(labels: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut counts = [0usize; 2];
        for y in labels {
            counts[usize::from(y)] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::Weight(format!(
                "class counts {counts:?}: both classes must be present"
            )));
        }
        let total = (counts[0] + counts[1]) as f64;
        let inv = [total / counts[0] as f64, total / counts[1] as f64];
        let mean = (inv[0] + inv[1]) / 2.0;
        Ok(Self([inv[0] / mean, inv[1] / mean]))
    }
}

/// `-(1/M) Σ_i w_{y_i} log p_{i, y_i}` for `M×2` probabilities `p`.
pub fn weighted_nll_var(tape: &mut Tape, probs: Var, labels: &[u8], weights: ClassWeights) -> Result<Var> {
    let shape = tape.value(probs).shape();
    if shape != [labels.len(), 2] {
        return Err(Error::Dimension(format!(
            "{} labels for probabilities of shape {shape:?}",
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("loss over no samples".into()));
    }
    let m = labels.len() as f64;
    let mut coeff = Tensor::zeros(labels.len(), 2);
    for (i, &y) in labels.iter().enumerate() {
        coeff.set(i, usize::from(y), -weights.0[usize::from(y)] / m);
    }
    let logp = tape.log(probs)?;
    let c = tape.constant(coeff)?;
    let terms = tape.mul(logp, c)?;
    tape.sum(terms)
}

/// Weighted cross-entropy of the rows `rows` of `y_hat` against `labels`.
pub fn weighted_ce_var(
    tape: &mut Tape,
    y_hat: Var,
    rows: &Arc<[usize]>,
    labels: &[u8],
    weights: ClassWeights,
) -> Result<Var> {
    let picked = tape.gather_rows(y_hat, rows)?;
    weighted_nll_var(tape, picked, labels, weights)
}

/// Mean over nodes of `-w_y log ŷ_y`.
pub fn weighted_cross_entropy(y_hat: &Tensor, labels: &[u8], weights: ClassWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone())?;
    let loss = weighted_nll_var(&mut tape, y, labels, weights)?;
    tape.value(loss).item()
}

/// Rank-based ROC AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("score {s} is not finite")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}
