//! Financial knowledge graph: typed entities, relation vocabulary, triples,
//! company attributes and (noisy) fraud labels.
//!
//! External entity keys carry their kind as a prefix, `<kind>:<name>`. Company
//! instances are keyed `company:<company_key>@<year>`; director records
//! `dse:<person>@<year>`. Keys map to dense ids at load time.

mod io;
mod validate;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_fkg, write_fkg, FkgPaths};
pub use validate::{validate_schema, Finding, Invariant, ValidationReport};

pub const SAME_COMPANY_AS: &str = "same_company_as";
pub const SAME_PERSON_AS: &str = "same_person_as";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    CompanyYear,
    CompanyMeta,
    Dse,
    DseMeta,
    Rpt,
    AttributeValue,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::CompanyYear,
        EntityKind::CompanyMeta,
        EntityKind::Dse,
        EntityKind::DseMeta,
        EntityKind::Rpt,
        EntityKind::AttributeValue,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            EntityKind::CompanyYear => "company",
            EntityKind::CompanyMeta => "company_meta",
            EntityKind::Dse => "dse",
            EntityKind::DseMeta => "dse_meta",
            EntityKind::Rpt => "rpt",
            EntityKind::AttributeValue => "attr",
        }
    }

    pub fn from_prefix(prefix: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.prefix() == prefix)
    }

    /// Kind encoded in an external key.
    pub fn of_key(key: &str) -> Result<Self> {
        let (prefix, name) = key
            .split_once(':')
            .ok_or_else(|| Error::Schema(format!("entity key `{key}` has no kind prefix")))?;
        if name.is_empty() {
            return Err(Error::Schema(format!("entity key `{key}` has an empty name")));
        }
        Self::from_prefix(prefix)
            .ok_or_else(|| Error::Schema(format!("unknown entity kind `{prefix}` in key `{key}`")))
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub kind: EntityKind,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Company {
    pub entity: EntityId,
    pub company_key: String,
    pub year: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRecord {
    /// Observed (possibly noisy) label: `true` means reported fraud.
    pub fraud: bool,
    pub violation_year: Option<i32>,
    pub declared_year: Option<i32>,
    pub record_year: i32,
}

/// Company attribute matrix with an explicit observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl AttributeMatrix {
    pub fn new(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            values: Vec::new(),
            observed: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: &[Option<f64>]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Dimension(format!(
                "attribute row with {} values, expected {}",
                row.len(),
                self.cols
            )));
        }
        for v in row {
            self.values.push(v.unwrap_or(0.0));
            self.observed.push(v.is_some());
        }
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let i = r * self.cols + c;
        self.observed[i].then(|| self.values[i])
    }

    pub fn row(&self, r: usize) -> Vec<Option<f64>> {
        (0..self.cols).map(|c| self.get(r, c)).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }
}

/// Immutable financial knowledge graph. Build with [`FkgBuilder`] or [`load_fkg`].
#[derive(Debug, Clone)]
pub struct Fkg {
    entities: Vec<Entity>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    by_relation: Vec<Vec<usize>>,
    companies: Vec<Company>,
    company_of_entity: HashMap<EntityId, usize>,
    attribute_names: Vec<String>,
    attributes: AttributeMatrix,
    labels: Vec<Option<LabelRecord>>,
}

impl Fkg {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.0]
    }

    pub fn entity_id(&self, key: &str) -> Option<EntityId> {
        self.entity_index.get(key).copied()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triples_with(&self, relation: RelationId) -> impl Iterator<Item = &Triple> + '_ {
        self.by_relation[relation.0].iter().map(move |&i| &self.triples[i])
    }

    pub fn company_count(&self) -> usize {
        self.companies.len()
    }

    pub fn companies(&self) -> &[Company] {
        &self.companies
    }

    /// Company index (row of the attribute matrix) for a company-year entity.
    pub fn company_index(&self, entity: EntityId) -> Option<usize> {
        self.company_of_entity.get(&entity).copied()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn attributes(&self) -> &AttributeMatrix {
        &self.attributes
    }

    pub fn labels(&self) -> &[Option<LabelRecord>] {
        &self.labels
    }

    pub fn label(&self, company: usize) -> Option<&LabelRecord> {
        self.labels[company].as_ref()
    }

    /// Entity ids of the given kind, ascending.
    pub fn entities_of_kind(&self, kind: EntityKind) -> Vec<EntityId> {
        self.entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .map(|(i, _)| EntityId(i))
            .collect()
    }

    /// Same graph with the label column replaced.
    pub fn with_labels(mut self, labels: Vec<Option<LabelRecord>>) -> Result<Self> {
        if labels.len() != self.companies.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} companies",
                labels.len(),
                self.companies.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Latest record year over all companies.
    pub fn horizon_year(&self) -> Option<i32> {
        self.companies.iter().map(|c| c.year).max()
    }
}

pub fn company_entity_key(company_key: &str, year: i32) -> String {
    format!("company:{company_key}@{year}")
}

pub fn company_meta_key(company_key: &str) -> String {
    format!("company_meta:{company_key}")
}

/// Incremental FKG construction. Triples are deduplicated on insertion.
#[derive(Debug, Clone)]
pub struct FkgBuilder {
    graph: Fkg,
    seen: HashSet<Triple>,
}

impl FkgBuilder {
    pub fn new(attribute_names: Vec<String>) -> Self {
        let cols = attribute_names.len();
        Self {
            graph: Fkg {
                entities: Vec::new(),
                entity_index: HashMap::new(),
                relations: Vec::new(),
                relation_index: HashMap::new(),
                triples: Vec::new(),
                by_relation: Vec::new(),
                companies: Vec::new(),
                company_of_entity: HashMap::new(),
                attribute_names,
                attributes: AttributeMatrix::new(cols),
                labels: Vec::new(),
            },
            seen: HashSet::new(),
        }
    }

    /// Registers a company-year instance with its attribute row. Returns its company index.
    pub fn add_company(&mut self, company_key: &str, year: i32, attrs: &[Option<f64>]) -> Result<usize> {
        let key = company_entity_key(company_key, year);
        if self.graph.entity_index.contains_key(&key) {
            return Err(Error::Schema(format!("duplicate company instance `{key}`")));
        }
        self.graph.attributes.push_row(attrs)?;
        let entity = self.insert_entity(&key, EntityKind::CompanyYear);
        let index = self.graph.companies.len();
        self.graph.companies.push(Company {
            entity,
            company_key: company_key.to_string(),
            year,
        });
        self.graph.company_of_entity.insert(entity, index);
        self.graph.labels.push(None);
        Ok(index)
    }

    fn insert_entity(&mut self, key: &str, kind: EntityKind) -> EntityId {
        let id = EntityId(self.graph.entities.len());
        self.graph.entities.push(Entity {
            kind,
            key: key.to_string(),
        });
        self.graph.entity_index.insert(key.to_string(), id);
        id
    }

    /// Looks up or creates a non-company entity. Company instances must be
    /// registered through [`FkgBuilder::add_company`] first.
    pub fn entity(&mut self, key: &str) -> Result<EntityId> {
        if let Some(&id) = self.graph.entity_index.get(key) {
            return Ok(id);
        }
        let kind = EntityKind::of_key(key)?;
        if kind == EntityKind::CompanyYear {
            return Err(Error::Reference(format!(
                "company instance `{key}` has no attribute row"
            )));
        }
        Ok(self.insert_entity(key, kind))
    }

    pub fn relation(&mut self, name: &str) -> Result<RelationId> {
        if let Some(&id) = self.graph.relation_index.get(name) {
            return Ok(id);
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Schema(format!("invalid relation name `{name}`")));
        }
        let id = RelationId(self.graph.relations.len());
        self.graph.relations.push(name.to_string());
        self.graph.relation_index.insert(name.to_string(), id);
        self.graph.by_relation.push(Vec::new());
        Ok(id)
    }

    /// Adds `(head, relation, tail)` by external keys. Returns `false` for a duplicate.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> Result<bool> {
        let head = self.entity(head)?;
        let relation = self.relation(relation)?;
        let tail = self.entity(tail)?;
        Ok(self.add_triple_ids(Triple { head, relation, tail }))
    }

    pub fn add_triple_ids(&mut self, triple: Triple) -> bool {
        if !self.seen.insert(triple) {
            return false;
        }
        self.graph.by_relation[triple.relation.0].push(self.graph.triples.len());
        self.graph.triples.push(triple);
        true
    }

    pub fn set_label(&mut self, company_key: &str, year: i32, label: LabelRecord) -> Result<()> {
        let key = company_entity_key(company_key, year);
        let entity = self
            .graph
            .entity_index
            .get(&key)
            .ok_or_else(|| Error::Reference(format!("label for unknown company `{key}`")))?;
        let index = self.graph.company_of_entity[entity];
        if self.graph.labels[index].is_some() {
            return Err(Error::Schema(format!("duplicate label for `{key}`")));
        }
        self.graph.labels[index] = Some(label);
        Ok(())
    }

    pub fn company_count(&self) -> usize {
        self.graph.companies.len()
    }

    pub fn build(self) -> Fkg {
        self.graph
    }
}
