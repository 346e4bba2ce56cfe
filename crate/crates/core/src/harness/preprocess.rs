use crate::error::Result;
use crate::graph::AttributeMatrix;
use crate::numeric::Tensor;

/// Column statistics fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub x: Tensor,
    /// Source column of every output column.
    pub kept_columns: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    pub means: Vec<f64>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

/// Mean imputation and min-max scaling fitted on `train_rows`, applied to every row.
/// Scaled values are clipped to `[0, 1]`; constant columns become 0. Columns with
/// no observed training value are dropped.
pub fn preprocess_attributes(attrs: &AttributeMatrix, train_rows: &[usize]) -> Result<Preprocessed> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let (mut means, mut mins, mut maxs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..attrs.cols() {
        let observed: Vec<f64> = train_rows.iter().filter_map(|&r| attrs.get(r, c)).collect();
        if observed.is_empty() {
            log::warn!("attribute column {c} has no observed training value; dropped");
            dropped.push(c);
            continue;
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        // imputed cells equal the mean, which lies inside the observed range
        let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        kept.push(c);
        means.push(mean);
        mins.push(lo);
        maxs.push(hi);
    }
    let mut x = Tensor::zeros(attrs.rows(), kept.len());
    for r in 0..attrs.rows() {
        for (k, &c) in kept.iter().enumerate() {
            let v = attrs.get(r, c).unwrap_or(means[k]);
            let range = maxs[k] - mins[k];
            let scaled = if range > 0.0 {
                ((v - mins[k]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
            x.set(r, k, scaled);
        }
    }
    Ok(Preprocessed {
        x,
        kept_columns: kept,
        dropped_columns: dropped,
        means,
        mins,
        maxs,
    })
}
