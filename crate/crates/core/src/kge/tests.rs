use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use super::*;
use crate::graph::{company_entity_key, EntityId, EntityKind, FkgBuilder, RelationId};
use crate::metapath::PARTY_TO;
use crate::numeric::{check_analytic, GradCheckConfig};

fn table(rows: &[&[f64]], rels: &[&[f64]], norm: NormKind) -> EmbeddingTable {
    let t = |rs: &[&[f64]]| Tensor::from_rows(&rs.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    EmbeddingTable {
        norm,
        entities: t(rows),
        relations: t(rels),
    }
}

fn triple(h: usize, r: usize, t: usize) -> Triple {
    Triple {
        head: EntityId(h),
        relation: RelationId(r),
        tail: EntityId(t),
    }
}

fn small_config(steps: usize) -> KgeConfig {
    KgeConfig {
        dim: 16,
        max_steps: steps,
        batch_size: 8,
        ..KgeConfig::default()
    }
}

/// Companies `C0..C{n}` in 2015, each party to transactions listed per company.
fn rpt_graph(links: &[&[usize]]) -> Fkg {
    let mut b = FkgBuilder::new(vec![]);
    for i in 0..links.len() {
        b.add_company(&format!("C{i}"), 2015, &[]).unwrap();
    }
    for (i, ts) in links.iter().enumerate() {
        for t in *ts {
            b.add_triple(&company_entity_key(&format!("C{i}"), 2015), PARTY_TO, &format!("rpt:T{t}"))
                .unwrap();
        }
    }
    b.build()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn score_examples() {
    let zero = table(&[&[0.0, 0.0]], &[&[0.0, 0.0]], NormKind::L2);
    assert_eq!(transe_score(&zero, &triple(0, 0, 0)).unwrap(), 0.0);

    let t = table(&[&[1.0, 0.0], &[1.0, 1.0]], &[&[0.0, 1.0]], NormKind::L1);
    assert_eq!(transe_score(&t, &triple(0, 0, 1)).unwrap(), 0.0);

    let mut t = table(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[0.0, 0.0]], NormKind::L1);
    assert_eq!(transe_score(&t, &triple(0, 0, 1)).unwrap(), -2.0);
    t.norm = NormKind::L2;
    assert_eq!(transe_score(&t, &triple(0, 0, 1)).unwrap(), -(2f64.sqrt()));

    assert!(matches!(transe_score(&t, &triple(0, 0, 2)), Err(Error::Reference(_))));
    assert!(matches!(transe_score(&t, &triple(0, 1, 1)), Err(Error::Reference(_))));
}

#[test]
fn corruption_keeps_kind_and_changes_one_side() {
    let fkg = rpt_graph(&[&[0], &[1], &[2]]);
    let pos = fkg.triples()[0];
    let sampler = NegativeSampler::new(&fkg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let neg = sampler.sample(&pos, 1, &mut rng).unwrap()[0];
        assert_eq!(neg.relation, pos.relation);
        let head_changed = neg.head != pos.head;
        let tail_changed = neg.tail != pos.tail;
        assert!(head_changed ^ tail_changed);
        assert_eq!(fkg.entity(neg.head).kind, EntityKind::CompanyYear);
        assert_eq!(fkg.entity(neg.tail).kind, EntityKind::Rpt);
        assert!(!fkg.triples().contains(&neg));
    }
}

#[test]
fn corruption_is_seeded() {
    let fkg = rpt_graph(&[&[0], &[1], &[2], &[3]]);
    let pos = fkg.triples()[1];
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        negative_sample(&pos, &fkg, 50, &mut rng).unwrap()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn corruption_is_uniform_over_companies() {
    let links: Vec<Vec<usize>> = (0..10).map(|i| vec![i]).collect();
    let refs: Vec<&[usize]> = links.iter().map(Vec::as_slice).collect();
    let fkg = rpt_graph(&refs);
    let pos = fkg.triples()[0];
    let sampler = NegativeSampler::new(&fkg);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0usize; fkg.entity_count()];
    let mut heads = 0usize;
    for _ in 0..10_000 {
        let neg = sampler.sample(&pos, 1, &mut rng).unwrap()[0];
        if neg.head != pos.head {
            counts[neg.head.0] += 1;
            heads += 1;
        }
    }
    let others: Vec<usize> = fkg
        .companies()
        .iter()
        .map(|c| c.entity.0)
        .filter(|&e| e != pos.head.0)
        .collect();
    let p = 1.0 / others.len() as f64;
    let expected = heads as f64 * p;
    let sigma = (heads as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &e in &others {
        let obs = counts[e] as f64;
        assert!((obs - expected).abs() <= 3.0 * sigma, "company {e}: {obs} vs {expected}");
        chi2 += (obs - expected).powi(2) / expected;
    }
    // 99.9% quantile of chi-square with 8 degrees of freedom
    assert!(chi2 < 26.12, "chi2 = {chi2}");
    assert!((heads as f64 - 5000.0).abs() < 3.0 * 50.0);
}

#[test]
fn lone_kinds_cannot_be_corrupted() {
    let fkg = rpt_graph(&[&[0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = negative_sample(&fkg.triples()[0], &fkg, 1, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Sampling(_)));

    // one side still has peers
    let fkg = rpt_graph(&[&[0], &[]]);
    let neg = negative_sample(&fkg.triples()[0], &fkg, 5, &mut rng).unwrap();
    assert!(neg.iter().all(|t| t.tail == fkg.triples()[0].tail));
}

#[test]
fn margin_loss_gradient_matches_finite_differences() {
    for norm in [NormKind::L1, NormKind::L2] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = EmbeddingTable {
            norm,
            entities: Tensor::uniform(5, 4, -0.8, 0.8, &mut rng),
            relations: Tensor::uniform(2, 4, -0.8, 0.8, &mut rng),
        };
        let batch = vec![
            (triple(0, 0, 1), vec![triple(2, 0, 1), triple(0, 0, 3)]),
            (triple(1, 1, 4), vec![triple(1, 1, 0)]),
            (triple(3, 0, 2), vec![triple(4, 0, 2)]),
        ];
        let margin = 2.0;
        let (_, grad) = margin_loss(&t, margin, &batch).unwrap();
        let (ge, gr) = grad.to_dense(&t);
        let report = check_analytic(
            &[t.entities.clone(), t.relations.clone()],
            &[ge, gr],
            GradCheckConfig::default(),
            |ps| {
                let probe = EmbeddingTable {
                    norm,
                    entities: ps[0].clone(),
                    relations: ps[1].clone(),
                };
                Ok(margin_loss(&probe, margin, &batch)?.0)
            },
        )
        .unwrap();
        assert!(report.passed(), "{norm:?}: {:?}", report.failures);
    }
}

#[test]
fn exact_translation_has_zero_loss_against_distant_negatives() {
    let t = table(&[&[0.1, 0.2], &[0.4, 0.2], &[3.0, -2.0]], &[&[0.3, 0.0]], NormKind::L2);
    let margin = 1.0;
    let neg = triple(2, 0, 1);
    assert!(-transe_score(&t, &neg).unwrap() >= margin);
    let (loss, grad) = margin_loss(&t, margin, &[(triple(0, 0, 1), vec![neg])]).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.entities.is_empty() && grad.relations.is_empty());
}

#[test]
fn toy_graph_learns_direction() {
    let mut b = FkgBuilder::new(vec![]);
    b.add_triple("attr:A", "r", "attr:B").unwrap();
    let fkg = b.build();
    let table = train_kge(&fkg, &small_config(1000)).unwrap();
    let ab = transe_score(&table, &triple(0, 0, 1)).unwrap();
    let ba = transe_score(&table, &triple(1, 0, 0)).unwrap();
    assert!(ab > ba, "{ab} vs {ba}");
}

#[test]
fn zero_steps_returns_initialization() {
    let fkg = rpt_graph(&[&[0], &[1]]);
    let cfg = small_config(0);
    let table = train_kge(&fkg, &cfg).unwrap();
    assert_eq!(table, EmbeddingTable::initialize(fkg.entity_count(), fkg.relation_count(), &cfg));
}

#[test]
fn shared_transactions_pull_companies_together() {
    let fkg = rpt_graph(&[&[1, 2], &[1, 2], &[3, 4], &[3, 4]]);
    let training = train_kge_logged(&fkg, &small_config(1000)).unwrap();
    let x = extract_company_embeddings(&training.table, &fkg);
    let c12 = cosine(x.row(0), x.row(1));
    let c13 = cosine(x.row(0), x.row(2));
    assert!(c12 > c13, "{c12} vs {c13}");

    for r in 0..training.table.entities.rows() {
        let n = training.table.entities.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-9);
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let l = &training.losses;
    assert!(avg(&l[l.len() - 100..]) < avg(&l[..100]));
}

#[test]
fn training_is_seeded() {
    let fkg = rpt_graph(&[&[1, 2], &[2, 3], &[3]]);
    let cfg = small_config(50);
    assert_eq!(train_kge(&fkg, &cfg).unwrap(), train_kge(&fkg, &cfg).unwrap());
    let other = KgeConfig { seed: 1, ..cfg };
    assert_ne!(train_kge(&fkg, &other).unwrap(), train_kge(&fkg, &small_config(50)).unwrap());
}

#[test]
fn bad_config_is_rejected() {
    let fkg = rpt_graph(&[&[1], &[2]]);
    for cfg in [
        KgeConfig { margin: 0.0, ..small_config(1) },
        KgeConfig { negatives_per_positive: 0, ..small_config(1) },
        KgeConfig { dim: 0, ..small_config(1) },
    ] {
        assert!(matches!(train_kge(&fkg, &cfg), Err(Error::Config(_))));
    }
    let empty = FkgBuilder::new(vec![]).build();
    assert!(train_kge(&empty, &small_config(1)).is_err());
}

#[test]
fn extraction_follows_company_order() {
    let mut b = FkgBuilder::new(vec![]);
    b.add_company("Z", 2015, &[]).unwrap();
    b.add_company("A", 2015, &[]).unwrap();
    b.add_company("M", 2016, &[]).unwrap();
    b.add_triple("rpt:T1", PARTY_TO, &company_entity_key("M", 2016)).unwrap();
    b.add_triple("rpt:T1", PARTY_TO, &company_entity_key("Z", 2015)).unwrap();
    let fkg = b.build();
    let cfg = small_config(20);
    let table = train_kge(&fkg, &cfg).unwrap();
    let x = extract_company_embeddings(&table, &fkg);
    assert_eq!(x.rows(), 3);
    for (i, c) in fkg.companies().iter().enumerate() {
        assert_eq!(x.row(i), table.entities.row(c.entity.0));
    }

    // no company appears in a triple or can be drawn as a corruption
    let mut b = FkgBuilder::new(vec![]);
    b.add_company("Z", 2015, &[]).unwrap();
    b.add_triple("attr:x", "r", "attr:y").unwrap();
    let fkg = b.build();
    let table = train_kge(&fkg, &cfg).unwrap();
    let init = EmbeddingTable::initialize(fkg.entity_count(), fkg.relation_count(), &cfg);
    assert_ne!(table, init);
    assert_eq!(extract_company_embeddings(&table, &fkg).row(0), init.entities.row(0));
}

#[test]
fn persistence_round_trip() {
    let fkg = rpt_graph(&[&[1, 2], &[2]]);
    let table = train_kge(&fkg, &small_config(10)).unwrap();
    let artifact = KgeArtifact::from_fkg(table, &fkg);
    let dir = TempDir::new().unwrap();
    let (bin, tsv) = (dir.path().join("kge.bin"), dir.path().join("kge.tsv"));
    save_embeddings(&artifact, &bin, &tsv).unwrap();
    let back = load_embeddings(&bin, &tsv).unwrap();
    assert_eq!(back, artifact);
    assert_eq!(
        back.company_embeddings(&fkg).unwrap(),
        extract_company_embeddings(&artifact.table, &fkg)
    );

    std::fs::write(&bin, b"garbage!").unwrap();
    assert!(load_embeddings(&bin, &tsv).is_err());
}
