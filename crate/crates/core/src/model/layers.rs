//! Differentiable building blocks plus eager wrappers that run them on a fresh tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{CsrMatrix, Tape, Tensor, Var};

const ROW_SUM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Independent sigmoid per logit.
    #[default]
    Sigmoid,
    Softmax,
}

/// Rejects weight matrices whose non-empty rows do not sum to one.
pub fn check_normalized(w: &CsrMatrix<f64>) -> Result<()> {
    if w.rows() != w.cols() {
        return Err(Error::Contract(format!("weight matrix is {}x{}", w.rows(), w.cols())));
    }
    for r in 0..w.rows() {
        if w.row_nnz(r) == 0 {
            continue;
        }
        let s = w.row_sum(r);
        if (s - 1.0).abs() > ROW_SUM_SLACK || w.row(r).any(|(_, v)| v < 0.0) {
            return Err(Error::Contract(format!("weight row {r} sums to {s}, not normalized")));
        }
    }
    Ok(())
}

/// `σ((Ŵ H + H) W)`.
pub fn mwgcn_var(
    tape: &mut Tape,
    h: Var,
    w_hat: &Arc<CsrMatrix<f64>>,
    w: Var,
    act: Activation,
) -> Result<Var> {
    let a = tape.aggregate(w_hat, h)?;
    let combined = tape.add(a, h)?;
    let out = tape.matmul(combined, w)?;
    match act {
        Activation::Relu => tape.relu(out),
        Activation::Identity => Ok(out),
    }
}

/// Mean readout scored by `tanh(h_G w + b)`, softmax over the inputs, then
/// the weighted blend. Returns the blend and the `1×K` weight row.
pub fn attention_var(tape: &mut Tape, reps: &[Var], w: Var, b: Var) -> Result<(Var, Var)> {
    if reps.is_empty() {
        return Err(Error::Contract("attention over no representations".into()));
    }
    let shape = tape.value(reps[0]).shape();
    let mut scores = Vec::with_capacity(reps.len());
    for &h in reps {
        if tape.value(h).shape() != shape {
            return Err(Error::Dimension(format!(
                "attention inputs {:?} and {:?} differ",
                shape,
                tape.value(h).shape()
            )));
        }
        let readout = tape.mean_rows(h)?;
        let s = tape.matmul(readout, w)?;
        let s = tape.add(s, b)?;
        scores.push(tape.tanh(s)?);
    }
    let row = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(row)?;
    let z = weighted_sum(tape, reps, Some(weights))?;
    Ok((z, weights))
}

/// `Σ_k a_k H_k`, or the plain sum without weights.
pub fn weighted_sum(tape: &mut Tape, reps: &[Var], weights: Option<Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &h) in reps.iter().enumerate() {
        let term = match weights {
            Some(a) => {
                let ak = tape.element(a, 0, k)?;
                tape.scale_by(ak, h)?
            }
            None => h,
        };
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("sum of no representations".into()))
}

pub fn classify_var(tape: &mut Tape, z: Var, w: Var, b: Var, head: Head) -> Result<Var> {
    let logits = tape.matmul(z, w)?;
    let logits = tape.add_row_bias(logits, b)?;
    match head {
        Head::Sigmoid => tape.sigmoid(logits),
        Head::Softmax => tape.softmax_rows(logits),
    }
}

/// Score vector `w` (`d×1`) and bias `b` (`1×1`) of one attention level.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// `W^pred` (`d×2`) and `b^pred` (`1×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w: Tensor,
    pub b: Tensor,
}

pub fn mwgcn_layer(h: &Tensor, w_hat: &Arc<CsrMatrix<f64>>, w: &Tensor, act: Activation) -> Result<Tensor> {
    check_normalized(w_hat)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let wv = tape.constant(w.clone())?;
    let out = mwgcn_var(&mut tape, hv, w_hat, wv, act)?;
    Ok(tape.value(out).clone())
}

fn attend(reps: &[&Tensor], params: &AttentionParams) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = reps
        .iter()
        .map(|h| tape.constant((*h).clone()))
        .collect::<Result<Vec<_>>>()?;
    let w = tape.constant(params.w.clone())?;
    let b = tape.constant(params.b.clone())?;
    let (z, a) = attention_var(&mut tape, &vars, w, b)?;
    Ok((tape.value(z).clone(), tape.value(a).data().to_vec()))
}

/// Blends per-meta-path representations of one branch.
pub fn relation_attention(reps: &[Tensor], params: &AttentionParams) -> Result<(Tensor, Vec<f64>)> {
    attend(&reps.iter().collect::<Vec<_>>(), params)
}

/// Blends the two branch representations; returns `(Z, [α_ke, α_att])`.
pub fn embedding_attention(z_ke: &Tensor, z_att: &Tensor, params: &AttentionParams) -> Result<(Tensor, [f64; 2])> {
    let (z, a) = attend(&[z_ke, z_att], params)?;
    Ok((z, [a[0], a[1]]))
}

pub fn classify(z: &Tensor, params: &ClassifierParams, head: Head) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let w = tape.constant(params.w.clone())?;
    let b = tape.constant(params.b.clone())?;
    let y = classify_var(&mut tape, zv, w, b, head)?;
    Ok(tape.value(y).clone())
}
