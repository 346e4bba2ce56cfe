use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{EntityKind, Fkg, SAME_COMPANY_AS, SAME_PERSON_AS};

const MAX_EXAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    /// A company-year instance without exactly one company meta link.
    CompanyMetaLink,
    /// Year instances of one company key linked to different meta nodes.
    CompanyMetaConsistency,
    DseMetaLink,
    DseMetaConsistency,
    /// Company instance without a label record.
    MissingLabel,
    /// Fraud label without violation or declaration year.
    FraudYearsMissing,
    /// Fraud declared before it happened.
    LabelYearOrder,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Invariant::CompanyMetaLink => "company instance must link to exactly one company meta node",
            Invariant::CompanyMetaConsistency => "all years of a company must share one meta node",
            Invariant::DseMetaLink => "DSE record must link to exactly one DSE meta node",
            Invariant::DseMetaConsistency => "all years of a person must share one DSE meta node",
            Invariant::MissingLabel => "every company instance needs a label record",
            Invariant::FraudYearsMissing => "fraud labels need violation and declared years",
            Invariant::LabelYearOrder => "declared year must not precede violation year",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub invariant: Invariant,
    pub count: usize,
    /// First offending external keys, at most ten.
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn finding(&self, invariant: Invariant) -> Option<&Finding> {
        self.findings.iter().find(|f| f.invariant == invariant)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return writeln!(f, "no violations");
        }
        for finding in &self.findings {
            writeln!(
                f,
                "{} violation(s): {} [{}]",
                finding.count,
                finding.invariant,
                finding.examples.join(", ")
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Collector {
    found: BTreeMap<Invariant, (usize, Vec<String>)>,
}

impl Collector {
    fn report(&mut self, invariant: Invariant, key: &str) {
        let entry = self.found.entry(invariant).or_default();
        entry.0 += 1;
        if entry.1.len() < MAX_EXAMPLES {
            entry.1.push(key.to_string());
        }
    }

    fn finish(self) -> ValidationReport {
        ValidationReport {
            findings: self
                .found
                .into_iter()
                .map(|(invariant, (count, examples))| Finding {
                    invariant,
                    count,
                    examples,
                })
                .collect(),
        }
    }
}

/// Group key of a year instance: the part of the name before `@`.
fn group_of(key: &str) -> &str {
    let name = key.split_once(':').map_or(key, |(_, n)| n);
    name.split_once('@').map_or(name, |(g, _)| g)
}

fn check_meta(
    fkg: &Fkg,
    instance: EntityKind,
    meta: EntityKind,
    relation: &str,
    link_inv: Invariant,
    group_inv: Invariant,
    out: &mut Collector,
) {
    let instances = fkg.entities_of_kind(instance);
    if instances.is_empty() {
        return;
    }
    let mut links: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    if let Some(rel) = fkg.relation_id(relation) {
        for t in fkg.triples_with(rel) {
            let (h, tl) = (fkg.entity(t.head).kind, fkg.entity(t.tail).kind);
            if h == instance && tl == meta {
                links.entry(t.head.0).or_default().insert(t.tail.0);
            } else if h == meta && tl == instance {
                links.entry(t.tail.0).or_default().insert(t.head.0);
            }
        }
    }
    let mut groups: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for id in instances {
        let key = &fkg.entity(id).key;
        match links.get(&id.0) {
            Some(metas) if metas.len() == 1 => {
                groups.entry(group_of(key)).or_default().extend(metas);
            }
            _ => out.report(link_inv, key),
        }
    }
    for (group, metas) in groups {
        if metas.len() > 1 {
            out.report(group_inv, group);
        }
    }
}

/// Checks every FKG invariant and reports violation counts with examples.
pub fn validate_schema(fkg: &Fkg) -> ValidationReport {
    let mut out = Collector::default();
    check_meta(
        fkg,
        EntityKind::CompanyYear,
        EntityKind::CompanyMeta,
        SAME_COMPANY_AS,
        Invariant::CompanyMetaLink,
        Invariant::CompanyMetaConsistency,
        &mut out,
    );
    check_meta(
        fkg,
        EntityKind::Dse,
        EntityKind::DseMeta,
        SAME_PERSON_AS,
        Invariant::DseMetaLink,
        Invariant::DseMetaConsistency,
        &mut out,
    );
    for (company, label) in fkg.companies().iter().zip(fkg.labels()) {
        let key = &fkg.entity(company.entity).key;
        match label {
            None => out.report(Invariant::MissingLabel, key),
            Some(l) if l.fraud => match (l.violation_year, l.declared_year) {
                (Some(v), Some(d)) if d < v => out.report(Invariant::LabelYearOrder, key),
                (Some(_), Some(_)) => {}
                _ => out.report(Invariant::FraudYearsMissing, key),
            },
            Some(_) => {}
        }
    }
    out.finish()
}
