//! TransE pretraining over the knowledge graph.

mod io;
mod sampling;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Fkg, Triple};
use crate::numeric::Tensor;

pub use io::{load_embeddings, save_embeddings, KgeArtifact};
pub use sampling::{negative_sample, NegativeSampler};

const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgeConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            dim: 500,
            learning_rate: 0.25,
            margin: 1.0,
            negatives_per_positive: 1,
            max_steps: 2000,
            batch_size: 1024,
            norm: NormKind::L2,
            seed: 0,
        }
    }
}

impl KgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("kge {what}")));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Entity and relation vectors with the scoring norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub norm: NormKind,
    pub entities: Tensor,
    pub relations: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    /// Uniform `±6/√d` per component, then every row projected into the unit ball.
    pub fn initialize(entities: usize, relations: usize, config: &KgeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 6.0 / (config.dim as f64).sqrt();
        let mut table = Self {
            norm: config.norm,
            entities: Tensor::uniform(entities, config.dim, -bound, bound, &mut rng),
            relations: Tensor::uniform(relations, config.dim, -bound, bound, &mut rng),
        };
        for r in 0..entities {
            project_row(table.entities.row_mut(r));
        }
        for r in 0..relations {
            project_row(table.relations.row_mut(r));
        }
        table
    }

    fn check(&self, t: &Triple) -> Result<()> {
        let n = self.entities.rows();
        if t.head.0 >= n || t.tail.0 >= n || t.relation.0 >= self.relations.rows() {
            return Err(Error::Reference(format!(
                "triple ({}, {}, {}) outside a table of {n} entities and {} relations",
                t.head.0,
                t.relation.0,
                t.tail.0,
                self.relations.rows()
            )));
        }
        Ok(())
    }

    fn residual(&self, t: &Triple) -> Vec<f64> {
        let h = self.entities.row(t.head.0);
        let r = self.relations.row(t.relation.0);
        let tl = self.entities.row(t.tail.0);
        h.iter().zip(r).zip(tl).map(|((h, r), t)| h + r - t).collect()
    }
}

fn norm_of(kind: NormKind, d: &[f64]) -> f64 {
    match kind {
        NormKind::L1 => d.iter().map(|x| x.abs()).sum(),
        NormKind::L2 => d.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Derivative of the norm with respect to the residual; zero at the origin.
fn norm_direction(kind: NormKind, d: &[f64], norm: f64) -> Vec<f64> {
    match kind {
        NormKind::L1 => d.iter().map(|x| if *x == 0.0 { 0.0 } else { x.signum() }).collect(),
        NormKind::L2 if norm == 0.0 => vec![0.0; d.len()],
        NormKind::L2 => d.iter().map(|x| x / norm).collect(),
    }
}

fn project_row(row: &mut [f64]) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

/// `-‖h + r - t‖`.
pub fn transe_score(table: &EmbeddingTable, triple: &Triple) -> Result<f64> {
    table.check(triple)?;
    Ok(-norm_of(table.norm, &table.residual(triple)))
}

/// Row-sparse gradient of the margin loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KgeGradient {
    pub entities: BTreeMap<usize, Vec<f64>>,
    pub relations: BTreeMap<usize, Vec<f64>>,
}

impl KgeGradient {
    fn add(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, dir: &[f64], coeff: f64) {
        let slot = map.entry(row).or_insert_with(|| vec![0.0; dir.len()]);
        slot.iter_mut().zip(dir).for_each(|(g, d)| *g += coeff * d);
    }

    /// Accumulates `coeff * ∂f/∂θ` for the score of `t`.
    fn add_score(&mut self, t: &Triple, dir: &[f64], coeff: f64) {
        Self::add(&mut self.entities, t.head.0, dir, -coeff);
        Self::add(&mut self.relations, t.relation.0, dir, -coeff);
        Self::add(&mut self.entities, t.tail.0, dir, coeff);
    }

    pub fn to_dense(&self, table: &EmbeddingTable) -> (Tensor, Tensor) {
        let mut e = Tensor::zeros(table.entities.rows(), table.dim());
        let mut r = Tensor::zeros(table.relations.rows(), table.dim());
        for (row, g) in &self.entities {
            e.row_mut(*row).copy_from_slice(g);
        }
        for (row, g) in &self.relations {
            r.row_mut(*row).copy_from_slice(g);
        }
        (e, r)
    }
}

/// Mean over positives of `Σ_neg max(0, margin - f(pos) + f(neg))`, with its gradient.
pub fn margin_loss(
    table: &EmbeddingTable,
    margin: f64,
    batch: &[(Triple, Vec<Triple>)],
) -> Result<(f64, KgeGradient)> {
    let mut grad = KgeGradient::default();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for (pos, negs) in batch {
        table.check(pos)?;
        let dp = table.residual(pos);
        let np = norm_of(table.norm, &dp);
        let mut active = 0usize;
        for neg in negs {
            table.check(neg)?;
            let dn = table.residual(neg);
            let nn = norm_of(table.norm, &dn);
            let term = margin + np - nn;
            if term > 0.0 {
                loss += term * scale;
                active += 1;
                grad.add_score(neg, &norm_direction(table.norm, &dn, nn), scale);
            }
        }
        if active > 0 {
            grad.add_score(pos, &norm_direction(table.norm, &dp, np), -(active as f64) * scale);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("margin loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Adagrad with one accumulator per row holding the running sum of squared
/// row-gradient norms, so a single update moves a row by at most `lr`.
struct Adagrad {
    lr: f64,
    entities: Vec<f64>,
    relations: Vec<f64>,
}

impl Adagrad {
    fn apply(lr: f64, param: &mut [f64], state: &mut f64, grad: &[f64]) {
        *state += grad.iter().map(|g| g * g).sum::<f64>();
        let rate = lr / (state.sqrt() + ADAGRAD_EPS);
        param.iter_mut().zip(grad).for_each(|(p, g)| *p -= rate * g);
    }

    fn step(&mut self, table: &mut EmbeddingTable, grad: &KgeGradient) {
        for (row, g) in &grad.entities {
            Self::apply(self.lr, table.entities.row_mut(*row), &mut self.entities[*row], g);
            project_row(table.entities.row_mut(*row));
        }
        for (row, g) in &grad.relations {
            Self::apply(self.lr, table.relations.row_mut(*row), &mut self.relations[*row], g);
        }
    }
}

/// Trained table plus the per-step mean batch loss.
#[derive(Debug, Clone)]
pub struct KgeTraining {
    pub table: EmbeddingTable,
    pub losses: Vec<f64>,
}

/// Margin-ranking TransE trained with row-sparse Adagrad over shuffled mini-batches.
pub fn train_kge(fkg: &Fkg, config: &KgeConfig) -> Result<EmbeddingTable> {
    Ok(train_kge_logged(fkg, config)?.table)
}

pub fn train_kge_logged(fkg: &Fkg, config: &KgeConfig) -> Result<KgeTraining> {
    config.validate()?;
    if fkg.entity_count() == 0 {
        return Err(Error::Training("cannot embed an empty graph".into()));
    }
    let mut table = EmbeddingTable::initialize(fkg.entity_count(), fkg.relation_count(), config);
    let mut losses = Vec::with_capacity(config.max_steps);
    if config.max_steps == 0 || fkg.triples().is_empty() {
        return Ok(KgeTraining { table, losses });
    }
    let sampler = NegativeSampler::new(fkg);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = Adagrad {
        lr: config.learning_rate,
        entities: vec![0.0; table.entities.rows()],
        relations: vec![0.0; table.relations.rows()],
    };
    let triples = fkg.triples();
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size.min(triples.len()));
        while batch.len() < config.batch_size.min(triples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pos = triples[order[cursor]];
            cursor += 1;
            let negs = sampler.sample(&pos, config.negatives_per_positive, &mut rng)?;
            batch.push((pos, negs));
        }
        let (loss, grad) = margin_loss(&table, config.margin, &batch)
            .map_err(|e| e.in_stage("kge", config.seed))?;
        opt.step(&mut table, &grad);
        if step % 500 == 0 {
            log::debug!("kge step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok(KgeTraining { table, losses })
}

/// Company rows of the entity matrix in company-index order.
pub fn extract_company_embeddings(table: &EmbeddingTable, fkg: &Fkg) -> Tensor {
    let mut out = Tensor::zeros(fkg.company_count(), table.dim());
    for (i, c) in fkg.companies().iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.entities.row(c.entity.0));
    }
    out
}

#[cfg(test)]
mod tests;
