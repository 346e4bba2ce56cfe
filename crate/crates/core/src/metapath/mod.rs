//! Company meta-paths, multi-path weight matrices and company subgraphs.
//!
//! A meta-path alternates entity kinds and relations and starts and ends at a
//! company instance. Relations are traversed in either direction. The weight
//! between two companies is the number of distinct simple paths (no repeated
//! node) that follow the meta-path from one to the other.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{EntityId, EntityKind, Fkg, SAME_COMPANY_AS};
use crate::numeric::CsrMatrix;

/// Company to related-party-transaction record.
pub const PARTY_TO: &str = "party_to";
/// Company instance to director/supervisor/executive record.
pub const HAS_DSE: &str = "has_dse";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPathSpec {
    name: String,
    kinds: Vec<EntityKind>,
    relations: Vec<String>,
    builtin: bool,
}

impl MetaPathSpec {
    pub fn new(name: &str, kinds: Vec<EntityKind>, relations: Vec<String>) -> Result<Self> {
        if kinds.len() < 2 || kinds.len() != relations.len() + 1 {
            return Err(Error::Spec(format!(
                "`{name}`: {} kinds and {} relations do not alternate",
                kinds.len(),
                relations.len()
            )));
        }
        if kinds[0] != EntityKind::CompanyYear || kinds[kinds.len() - 1] != EntityKind::CompanyYear {
            return Err(Error::Spec(format!(
                "`{name}`: a company meta-path must start and end at `company`"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            kinds,
            relations,
            builtin: false,
        })
    }

    fn builtin(name: &str, middle: EntityKind, relation: &str) -> Self {
        Self {
            name: name.to_string(),
            kinds: vec![EntityKind::CompanyYear, middle, EntityKind::CompanyYear],
            relations: vec![relation.to_string(), relation.to_string()],
            builtin: true,
        }
    }

    /// Companies sharing a related-party transaction record.
    pub fn rpt() -> Self {
        Self::builtin("RPT", EntityKind::Rpt, PARTY_TO)
    }

    /// Year instances of the same company.
    pub fn sc() -> Self {
        Self::builtin("SC", EntityKind::CompanyMeta, SAME_COMPANY_AS)
    }

    /// Companies sharing a director/supervisor/executive record.
    pub fn sdse() -> Self {
        Self::builtin("SDSE", EntityKind::Dse, HAS_DSE)
    }

    pub fn predefined() -> Vec<Self> {
        vec![Self::rpt(), Self::sc(), Self::sdse()]
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::predefined()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Parses `company -rel- kind -rel- ... company`.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let mut kinds = Vec::new();
        let mut relations = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            if i % 2 == 0 {
                let kind = EntityKind::from_prefix(tok)
                    .ok_or_else(|| Error::Spec(format!("`{name}`: unknown entity kind `{tok}`")))?;
                kinds.push(kind);
            } else {
                let rel = tok
                    .strip_prefix('-')
                    .and_then(|t| t.strip_suffix('-'))
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| Error::Spec(format!("`{name}`: expected `-relation-`, found `{tok}`")))?;
                relations.push(rel.to_string());
            }
        }
        Self::new(name, kinds, relations)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kinds(&self) -> &[EntityKind] {
        &self.kinds
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }
}

impl fmt::Display for MetaPathSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kinds[0])?;
        for (rel, kind) in self.relations.iter().zip(&self.kinds[1..]) {
            write!(f, " -{rel}- {kind}")?;
        }
        Ok(())
    }
}

/// Path counts between companies and their row-normalized companion.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPathWeightMatrix {
    pub counts: CsrMatrix<u64>,
    pub normalized: Arc<CsrMatrix<f64>>,
}

impl MultiPathWeightMatrix {
    pub fn from_counts(counts: CsrMatrix<u64>) -> Self {
        let normalized = normalize_counts(&counts);
        Self {
            counts,
            normalized: Arc::new(normalized),
        }
    }

    pub fn size(&self) -> usize {
        self.counts.rows()
    }
}

fn normalize_counts(counts: &CsrMatrix<u64>) -> CsrMatrix<f64> {
    let totals: Vec<u64> = (0..counts.rows())
        .map(|r| counts.row(r).map(|(_, v)| v).sum())
        .collect();
    counts.map_rows(|r, v| v as f64 / totals[r] as f64)
}

/// `Ŵ(i,j) = W(i,j) / Σ_l W(i,l)`; rows without entries stay empty.
pub fn row_normalize(w: &CsrMatrix<f64>) -> Result<CsrMatrix<f64>> {
    if let Some((r, c, v)) = w.iter().find(|(_, _, v)| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain(format!("weight ({r}, {c}) = {v} is not a non-negative number")));
    }
    let totals: Vec<f64> = (0..w.rows()).map(|r| w.row_sum(r)).collect();
    Ok(w.map_rows(|r, v| v / totals[r]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompanySubgraph {
    pub name: String,
    pub weights: MultiPathWeightMatrix,
}

impl CompanySubgraph {
    pub fn node_count(&self) -> usize {
        self.weights.size()
    }

    pub fn edge_count(&self) -> usize {
        self.weights.counts.nnz()
    }

    pub fn normalized(&self) -> &Arc<CsrMatrix<f64>> {
        &self.weights.normalized
    }

    /// Companies adjacent to `v`, ascending.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.weights.counts.row(v).map(|(u, _)| u)
    }
}

/// Undirected, deduplicated neighbor lists restricted to one relation.
fn relation_adjacency(fkg: &Fkg, relation: &str) -> Vec<Vec<EntityId>> {
    let mut adj: Vec<Vec<EntityId>> = vec![Vec::new(); fkg.entity_count()];
    if let Some(rel) = fkg.relation_id(relation) {
        for t in fkg.triples_with(rel) {
            adj[t.head.0].push(t.tail);
            adj[t.tail.0].push(t.head);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

fn count_from(
    fkg: &Fkg,
    spec: &MetaPathSpec,
    adjacency: &[Vec<Vec<EntityId>>],
    start: EntityId,
) -> BTreeMap<usize, u64> {
    fn walk(
        fkg: &Fkg,
        spec: &MetaPathSpec,
        adjacency: &[Vec<Vec<EntityId>>],
        path: &mut Vec<EntityId>,
        out: &mut BTreeMap<usize, u64>,
    ) {
        let depth = path.len() - 1;
        let here = path[depth];
        let next_kind = spec.kinds[depth + 1];
        let last = depth + 1 == spec.relations.len();
        for &next in &adjacency[depth][here.0] {
            if fkg.entity(next).kind != next_kind || path.contains(&next) {
                continue;
            }
            if last {
                if let Some(j) = fkg.company_index(next) {
                    *out.entry(j).or_insert(0) += 1;
                }
            } else {
                path.push(next);
                walk(fkg, spec, adjacency, path, out);
                path.pop();
            }
        }
    }
    let mut out = BTreeMap::new();
    let mut path = vec![start];
    walk(fkg, spec, adjacency, &mut path, &mut out);
    out
}

/// Counts meta-path instances between every ordered pair of companies.
pub fn build_weight_matrix(fkg: &Fkg, spec: &MetaPathSpec) -> Result<MultiPathWeightMatrix> {
    for rel in &spec.relations {
        if fkg.relation_id(rel).is_none() && !spec.builtin {
            return Err(Error::Spec(format!(
                "`{}` references unknown relation `{rel}`",
                spec.name
            )));
        }
    }
    let adjacency: Vec<Vec<Vec<EntityId>>> = spec
        .relations
        .iter()
        .map(|r| relation_adjacency(fkg, r))
        .collect();
    let n = fkg.company_count();
    let rows: Vec<BTreeMap<usize, u64>> = (0..n)
        .into_par_iter()
        .map(|i| count_from(fkg, spec, &adjacency, fkg.companies()[i].entity))
        .collect();
    let entries = rows
        .into_iter()
        .enumerate()
        .flat_map(|(i, row)| row.into_iter().map(move |(j, c)| (i, j, c)))
        .collect();
    let counts = CsrMatrix::from_triplets(n, n, entries, |a, b| a + b)?;
    Ok(MultiPathWeightMatrix::from_counts(counts))
}

/// Company-only graph for one meta-path; every company is a node, isolated or not.
pub fn build_company_subgraph(fkg: &Fkg, spec: &MetaPathSpec) -> Result<CompanySubgraph> {
    Ok(CompanySubgraph {
        name: spec.name.clone(),
        weights: build_weight_matrix(fkg, spec)?,
    })
}

/// Elementwise sum of the count matrices, normalized afresh.
pub fn sum_up_graph(subgraphs: &[CompanySubgraph]) -> Result<CompanySubgraph> {
    let first = subgraphs
        .first()
        .ok_or_else(|| Error::Contract("sum-up graph of no subgraphs".into()))?;
    let n = first.node_count();
    let mut entries = Vec::new();
    for g in subgraphs {
        if g.node_count() != n {
            return Err(Error::Dimension(format!(
                "subgraph `{}` has {} nodes, expected {n}",
                g.name,
                g.node_count()
            )));
        }
        entries.extend(g.weights.counts.iter());
    }
    let counts = CsrMatrix::from_triplets(n, n, entries, |a, b| a + b)?;
    Ok(CompanySubgraph {
        name: "sum_up".to_string(),
        weights: MultiPathWeightMatrix::from_counts(counts),
    })
}

#[cfg(test)]
mod tests;
