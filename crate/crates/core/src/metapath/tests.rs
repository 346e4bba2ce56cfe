use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::graph::{company_entity_key, company_meta_key, FkgBuilder};

fn companies(builder: &mut FkgBuilder, list: &[(&str, i32)]) {
    for (ck, year) in list {
        builder.add_company(ck, *year, &[]).unwrap();
    }
}

fn c(ck: &str, year: i32) -> String {
    company_entity_key(ck, year)
}

fn dense(m: &CsrMatrix<u64>) -> Vec<Vec<u64>> {
    m.to_dense()
}

/// Every sequence of distinct entities whose kinds follow the spec and whose
/// consecutive pairs share a triple of the step's relation in some direction.
fn oracle(fkg: &Fkg, spec: &MetaPathSpec) -> Vec<Vec<u64>> {
    let edges: HashSet<(usize, String, usize)> = fkg
        .triples()
        .iter()
        .map(|t| (t.head.0, fkg.relations()[t.relation.0].clone(), t.tail.0))
        .collect();
    let linked = |a: usize, rel: &str, b: usize| {
        edges.contains(&(a, rel.to_string(), b)) || edges.contains(&(b, rel.to_string(), a))
    };
    let n = fkg.company_count();
    let mut out = vec![vec![0u64; n]; n];
    let len = spec.kinds().len();
    let mut seq: Vec<usize> = Vec::new();
    fn rec(
        fkg: &Fkg,
        spec: &MetaPathSpec,
        len: usize,
        seq: &mut Vec<usize>,
        linked: &dyn Fn(usize, &str, usize) -> bool,
        out: &mut Vec<Vec<u64>>,
    ) {
        if seq.len() == len {
            let i = fkg.company_index(EntityId(seq[0])).unwrap();
            let j = fkg.company_index(EntityId(seq[len - 1])).unwrap();
            out[i][j] += 1;
            return;
        }
        for e in 0..fkg.entity_count() {
            let pos = seq.len();
            if fkg.entity(EntityId(e)).kind != spec.kinds()[pos] || seq.contains(&e) {
                continue;
            }
            if pos > 0 && !linked(seq[pos - 1], &spec.relations()[pos - 1], e) {
                continue;
            }
            seq.push(e);
            rec(fkg, spec, len, seq, linked, out);
            seq.pop();
        }
    }
    rec(fkg, spec, len, &mut seq, &linked, &mut out);
    out
}

#[test]
fn two_shared_transactions_count_twice() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("C1", 2015), ("C2", 2015)]);
    b.add_triple(&c("C1", 2015), PARTY_TO, "rpt:T1").unwrap();
    b.add_triple(&c("C2", 2015), PARTY_TO, "rpt:T1").unwrap();
    b.add_triple(&c("C1", 2015), PARTY_TO, "rpt:T2").unwrap();
    b.add_triple("rpt:T2", PARTY_TO, &c("C2", 2015)).unwrap();
    let fkg = b.build();
    let w = build_weight_matrix(&fkg, &MetaPathSpec::rpt()).unwrap();
    assert_eq!(dense(&w.counts), vec![vec![0, 2], vec![2, 0]]);
    assert_eq!(w.normalized.to_dense(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
}

#[test]
fn missing_relation_gives_zero_matrix_for_builtin() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("C1", 2015), ("C2", 2015)]);
    let fkg = b.build();
    let w = build_weight_matrix(&fkg, &MetaPathSpec::rpt()).unwrap();
    assert_eq!(w.counts.nnz(), 0);
    assert_eq!(w.size(), 2);
}

#[test]
fn unknown_relation_in_custom_spec_is_rejected() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("C1", 2015)]);
    let fkg = b.build();
    let spec = MetaPathSpec::parse("X", "company -audits- rpt -audits- company").unwrap();
    assert!(matches!(build_weight_matrix(&fkg, &spec), Err(Error::Spec(_))));
}

#[test]
fn same_company_links_every_year_pair() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("C", 2010), ("C", 2011), ("C", 2012), ("D", 2011)]);
    for y in 2010..=2012 {
        b.add_triple(&c("C", y), SAME_COMPANY_AS, &company_meta_key("C")).unwrap();
    }
    b.add_triple(&c("D", 2011), SAME_COMPANY_AS, &company_meta_key("D")).unwrap();
    let fkg = b.build();
    let w = build_weight_matrix(&fkg, &MetaPathSpec::sc()).unwrap();
    assert_eq!(w.counts.nnz(), 6);
    assert_eq!(
        dense(&w.counts),
        vec![vec![0, 1, 1, 0], vec![1, 0, 1, 0], vec![1, 1, 0, 0], vec![0, 0, 0, 0]]
    );
}

#[test]
fn rpt_among_three_of_five() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("A", 2015), ("B", 2015), ("C", 2015), ("D", 2015), ("E", 2015)]);
    b.add_triple(&c("A", 2015), PARTY_TO, "rpt:T1").unwrap();
    b.add_triple(&c("B", 2015), PARTY_TO, "rpt:T1").unwrap();
    b.add_triple(&c("C", 2015), PARTY_TO, "rpt:T1").unwrap();
    let fkg = b.build();
    let g = build_company_subgraph(&fkg, &MetaPathSpec::rpt()).unwrap();
    assert_eq!(g.node_count(), 5);
    assert_eq!(g.edge_count(), 6);
    assert!(g.weights.counts.iter().all(|(i, j, _)| i < 3 && j < 3));

    let sdse = build_company_subgraph(&fkg, &MetaPathSpec::sdse()).unwrap();
    assert_eq!((sdse.node_count(), sdse.edge_count()), (5, 0));
}

#[test]
fn director_chain_has_no_transitive_edge() {
    let mut b = FkgBuilder::new(vec![]);
    companies(&mut b, &[("C1", 2015), ("C2", 2015), ("C3", 2015)]);
    b.add_triple(&c("C1", 2015), HAS_DSE, "dse:D1@2015").unwrap();
    b.add_triple(&c("C2", 2015), HAS_DSE, "dse:D1@2015").unwrap();
    b.add_triple(&c("C2", 2015), HAS_DSE, "dse:D2@2015").unwrap();
    b.add_triple(&c("C3", 2015), HAS_DSE, "dse:D2@2015").unwrap();
    let fkg = b.build();
    let w = build_weight_matrix(&fkg, &MetaPathSpec::sdse()).unwrap();
    assert_eq!(dense(&w.counts), vec![vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 0]]);
    assert_eq!(dense(&w.counts), oracle(&fkg, &MetaPathSpec::sdse()));
}

#[test]
fn normalize_examples() {
    let w = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 2.0), (1, 1, 4.0)], |a, b| a + b)
        .unwrap();
    assert_eq!(row_normalize(&w).unwrap().to_dense(), vec![vec![0.5, 0.5], vec![0.0, 1.0]]);

    let w = CsrMatrix::from_triplets(3, 4, vec![(0, 2, 7.0)], |a, b| a + b).unwrap();
    assert_eq!(
        row_normalize(&w).unwrap().to_dense(),
        vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0; 4], vec![0.0; 4]]
    );

    let w = CsrMatrix::from_triplets(1, 2, vec![(0, 0, -1.0)], |a, b| a + b).unwrap();
    assert!(matches!(row_normalize(&w), Err(Error::Domain(_))));
}

#[test]
fn sum_up_examples() {
    let a = CsrMatrix::from_triplets(3, 3, vec![(0, 1, 2u64), (1, 0, 2)], |a, b| a + b).unwrap();
    let b = CsrMatrix::from_triplets(3, 3, vec![(1, 2, 1u64), (2, 1, 1)], |a, b| a + b).unwrap();
    let ga = CompanySubgraph { name: "a".into(), weights: MultiPathWeightMatrix::from_counts(a) };
    let gb = CompanySubgraph { name: "b".into(), weights: MultiPathWeightMatrix::from_counts(b) };
    let s = sum_up_graph(&[ga.clone(), gb]).unwrap();
    assert_eq!(s.name, "sum_up");
    assert_eq!(dense(&s.weights.counts), vec![vec![0, 2, 0], vec![2, 0, 1], vec![0, 1, 0]]);

    let doubled = sum_up_graph(&[ga.clone(), ga.clone()]).unwrap();
    assert_eq!(doubled.weights.counts.get(0, 1), 4);
    assert_eq!(doubled.weights.normalized, ga.weights.normalized);

    let small = CompanySubgraph {
        name: "small".into(),
        weights: MultiPathWeightMatrix::from_counts(CsrMatrix::empty(2, 2)),
    };
    assert!(matches!(sum_up_graph(&[ga, small]), Err(Error::Dimension(_))));
    assert!(sum_up_graph(&[]).is_err());
}

#[test]
fn spec_parsing() {
    let s = MetaPathSpec::parse("RPT", "company -party_to- rpt -party_to- company").unwrap();
    assert_eq!(s.kinds(), MetaPathSpec::rpt().kinds());
    assert_eq!(s.to_string(), "company -party_to- rpt -party_to- company");
    assert!(MetaPathSpec::parse("x", "rpt -party_to- company").is_err());
    assert!(MetaPathSpec::parse("x", "company -party_to- rpt").is_err());
    assert!(MetaPathSpec::parse("x", "company party_to rpt party_to company").is_err());
    assert!(MetaPathSpec::parse("x", "company -r- widget -r- company").is_err());
    assert_eq!(MetaPathSpec::by_name("sdse").unwrap().name(), "SDSE");
}

#[derive(Debug, Clone)]
struct RandomFkg {
    companies: Vec<(u8, i32)>,
    edges: Vec<(usize, u8, usize, bool)>,
}

fn random_fkg() -> impl Strategy<Value = RandomFkg> {
    (1usize..=20, 1usize..=60).prop_flat_map(|(n, support)| {
        (
            proptest::collection::vec((0u8..6, 2010i32..2014), n),
            proptest::collection::vec((0..n, 0u8..4, 0..support, any::<bool>()), 0..120),
        )
            .prop_map(|(companies, edges)| RandomFkg { companies, edges })
    })
}

fn materialize(r: &RandomFkg) -> Fkg {
    let mut b = FkgBuilder::new(vec![]);
    let mut keys = Vec::new();
    for (ck, year) in &r.companies {
        let ck = format!("K{ck}");
        if b.add_company(&ck, *year, &[]).is_ok() {
            keys.push((ck.clone(), *year));
            b.add_triple(&c(&ck, *year), SAME_COMPANY_AS, &company_meta_key(&ck)).unwrap();
        }
    }
    for &(ci, rel, s, forward) in &r.edges {
        let (ck, year) = &keys[ci % keys.len()];
        let company = c(ck, *year);
        let (rel, support) = match rel {
            0 => (PARTY_TO, format!("rpt:T{s}")),
            1 => (HAS_DSE, format!("dse:P{}@{}", s % 20, 2010 + (s / 20) as i32)),
            2 => (PARTY_TO, format!("dse:P{}@2010", s % 20)),
            _ => ("mentions", format!("rpt:T{s}")),
        };
        if forward {
            b.add_triple(&company, rel, &support).unwrap();
        } else {
            b.add_triple(&support, rel, &company).unwrap();
        }
    }
    b.build()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn weights_match_exhaustive_enumeration(r in random_fkg()) {
        let fkg = materialize(&r);
        let mut sum = vec![vec![0u64; fkg.company_count()]; fkg.company_count()];
        let mut graphs = Vec::new();
        for spec in MetaPathSpec::predefined() {
            let g = build_company_subgraph(&fkg, &spec).unwrap();
            let expected = oracle(&fkg, &spec);
            prop_assert_eq!(dense(&g.weights.counts), expected.clone());
            for i in 0..expected.len() {
                prop_assert_eq!(expected[i][i], 0);
                for j in 0..expected.len() {
                    prop_assert_eq!(expected[i][j], expected[j][i]);
                    sum[i][j] += expected[i][j];
                }
            }
            graphs.push(g);
        }
        let s = sum_up_graph(&graphs).unwrap();
        prop_assert_eq!(dense(&s.weights.counts), sum);
    }

    #[test]
    fn normalized_rows_are_simplex(r in random_fkg(), k in 1u64..50) {
        let fkg = materialize(&r);
        let g = build_company_subgraph(&fkg, &MetaPathSpec::rpt()).unwrap();
        for i in 0..g.node_count() {
            let row: Vec<f64> = g.normalized().row(i).map(|(_, v)| v).collect();
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            if !row.is_empty() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let scaled = MultiPathWeightMatrix::from_counts(g.weights.counts.map(|v| v * k));
        prop_assert_eq!(scaled.normalized.to_dense(), g.normalized().to_dense());
    }
}
