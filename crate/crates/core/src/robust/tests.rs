use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::harness::weighted_cross_entropy;
use crate::model::{Ablation, Head, ModelConfig, ModelShape};
use crate::numeric::{check_gradients, CsrMatrix, GradCheckConfig};

#[test]
fn transition_matrix_examples() {
    assert_eq!(transition_matrix(0.5).unwrap(), [[1.0, 0.0], [0.5, 0.5]]);
    let m = transition_matrix(1e-6).unwrap();
    assert_eq!(m[0], [1.0, 0.0]);
    assert!((m[1][1] - 1.0).abs() < 1e-5);
    for g in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(transition_matrix(g), Err(Error::Domain(_))));
    }
}

proptest! {
    #[test]
    fn transition_rows_sum_to_one(g in 1e-9f64..0.999_999) {
        let m = transition_matrix(g).unwrap();
        prop_assert_eq!(m[0], [1.0, 0.0]);
        prop_assert_eq!(m[1][0] + m[1][1], 1.0);
    }
}

#[test]
fn corrected_loss_examples() {
    let y = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
    let loss = forward_corrected_loss(&y, &[1], &[0.5], ClassWeights::UNIT).unwrap();
    assert!((loss + 0.35f64.ln()).abs() < 1e-12);

    let y = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.8, 0.2], vec![0.55, 0.45]]).unwrap();
    let labels = [1, 0, 0];
    let w = ClassWeights([0.6, 1.4]);
    let plain = weighted_cross_entropy(&y, &labels, w).unwrap();
    assert!((forward_corrected_loss(&y, &labels, &[0.0; 3], w).unwrap() - plain).abs() < 1e-12);

    assert!(matches!(
        forward_corrected_loss(&y, &labels, &[0.1, 1.0, 0.2], w),
        Err(Error::Domain(_))
    ));
    assert!(matches!(forward_corrected_loss(&y, &labels, &[0.1], w), Err(Error::Dimension(_))));
}

fn scalar_corrected_loss(y: &[[f64; 2]], labels: &[u8], gamma: &[f64], w: [f64; 2]) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        let p0 = y[i][0] + y[i][1] * gamma[i];
        let p1 = y[i][1] * (1.0 - gamma[i]);
        let l = usize::from(labels[i]);
        total -= w[l] * if l == 1 { p1.ln() } else { p0.ln() };
    }
    total / y.len() as f64
}

fn fixtures() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<u8>, Vec<f64>, [f64; 2])> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01f64..0.99, n).prop_map(|p| p.into_iter().map(|q| [1.0 - q, q]).collect()),
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(0.0f64..0.99, n),
            (0.1f64..3.0, 0.1f64..3.0).prop_map(|(a, b)| [a, b]),
        )
    })
}

proptest! {
    #[test]
    fn corrected_loss_matches_scalar_oracle((y, labels, gamma, w) in fixtures()) {
        let t = Tensor::from_rows(&y.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let loss = forward_corrected_loss(&t, &labels, &gamma, ClassWeights(w)).unwrap();
        let oracle = scalar_corrected_loss(&y, &labels, &gamma, w);
        prop_assert!((loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn retention_factor_enters_only_through_observed_frauds((y, labels, gamma, w) in fixtures()) {
        // rates on observed frauds shift the loss by exactly their -w log(1 - γ̂) terms
        let t = Tensor::from_rows(&y.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let n = y.len() as f64;
        let on_frauds: Vec<f64> = gamma.iter().zip(&labels).map(|(&g, &l)| if l == 1 { g } else { 0.0 }).collect();
        let shift: f64 = on_frauds.iter().map(|&g| -w[1] * (1.0 - g).ln() / n).sum();
        let plain = forward_corrected_loss(&t, &labels, &vec![0.0; y.len()], ClassWeights(w)).unwrap();
        let corrected = forward_corrected_loss(&t, &labels, &on_frauds, ClassWeights(w)).unwrap();
        prop_assert!((corrected - plain - shift).abs() < 1e-9);
    }

    #[test]
    fn corrected_non_fraud_probability_is_monotone(p in 0.0f64..1.0, g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::from_rows(&[vec![1.0 - p, p], vec![1.0 - p, p]]).unwrap()).unwrap();
        let g = tape.constant(Tensor::new(2, 1, vec![lo, hi]).unwrap()).unwrap();
        let out = tape.forward_correct(y, g).unwrap();
        let v = tape.value(out);
        prop_assert!(v.get(0, 0) <= v.get(1, 0));
        prop_assert!((v.get(1, 0) + v.get(1, 1) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn corrected_loss_gradients_through_predictions_and_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let logits = Tensor::new(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let gamma = Tensor::new(n, 1, (0..n).map(|_| rng.random_range(0.05..0.9)).collect()).unwrap();
    let labels = [1u8, 0, 0, 1, 0, 1];
    let report = check_gradients(&[logits, gamma], GradCheckConfig::default(), |tape, v| {
        let y = tape.softmax_rows(v[0])?;
        let p = tape.forward_correct(y, v[1])?;
        weighted_nll_var(tape, p, &labels, ClassWeights([0.7, 1.3]))
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.checked, 18);
}

/// Two features, fraud iff `x0 + x1 > 1.2`, 20% of frauds relabeled non-fraud.
struct Toy {
    inputs: ModelInputs,
    clean: Vec<u8>,
    sup: Supervision,
    shape: ModelShape,
}

fn toy(seed: u64) -> Toy {
    let n = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let clean: Vec<u8> = (0..n).map(|i| u8::from(x[2 * i] + x[2 * i + 1] > 1.2)).collect();
    let noisy: Vec<u8> = clean.iter().map(|&y| if y == 1 && rng.random_bool(0.2) { 0 } else { y }).collect();
    let graph = Arc::new(CsrMatrix::<f64>::empty(n, n));
    let inputs = ModelInputs::new(vec![graph], Tensor::new(n, 2, x).unwrap(), Tensor::zeros(n, 1)).unwrap();
    let train: Vec<usize> = (0..300).collect();
    let valid: Vec<usize> = (300..n).collect();
    let sup = Supervision::new(&noisy, &train, &valid).unwrap();
    let shape = ModelShape {
        d_att: 2,
        d_ke: 1,
        meta_paths: 1,
    };
    Toy {
        inputs,
        clean,
        sup,
        shape,
    }
}

fn reference(shape: ModelShape, seed: u64) -> KeModel {
    let config = ModelConfig {
        layers: 1,
        hidden: 16,
        head: Head::Softmax,
    };
    KeModel::new(config, Ablation::WoKe.flags(), shape, seed).unwrap()
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-2,
        max_epochs: 300,
        patience: 300,
    }
}

#[test]
fn disabled_sieve_keeps_everything() {
    let t = toy(1);
    let sieve = SieveConfig {
        beta: 0.0,
        ..Default::default()
    };
    let samples = collect_bayes_labels(reference(t.shape, 3), &t.inputs, &t.sup, &sieve, &toy_train()).unwrap();
    assert_eq!(samples.len(), t.sup.train.len());
    assert!(samples.iter().all(|s| s.kept));
    assert!(samples.iter().zip(&t.sup.train_labels).all(|(s, &y)| s.noisy_label == y));
}

#[test]
fn kept_samples_agree_with_clean_labels_more_often() {
    let t = toy(2);
    let sieve = SieveConfig::default();
    let samples = collect_bayes_labels(reference(t.shape, 4), &t.inputs, &t.sup, &sieve, &toy_train()).unwrap();
    let agreement = |kept: bool| {
        let group: Vec<&SievedSample> = samples.iter().filter(|s| s.kept == kept).collect();
        group.iter().filter(|s| s.bayes_label == t.clean[s.node]).count() as f64 / group.len() as f64
    };
    let (kept, dropped) = (agreement(true), agreement(false));
    assert!(kept > dropped, "kept {kept:.3} dropped {dropped:.3}");

    let again = collect_bayes_labels(reference(t.shape, 4), &t.inputs, &t.sup, &sieve, &toy_train()).unwrap();
    assert_eq!(again, samples);
}

#[test]
fn sieve_rejects_bad_config_and_degenerate_keep_sets() {
    let t = toy(3);
    let bad = SieveConfig {
        beta: -1.0,
        ..Default::default()
    };
    let train = toy_train();
    assert!(matches!(
        collect_bayes_labels(reference(t.shape, 0), &t.inputs, &t.sup, &bad, &train),
        Err(Error::Config(_))
    ));
    // a confidence bar above 1 can never be met
    let strict = SieveConfig {
        confidence: 1.5,
        ..Default::default()
    };
    let err = collect_bayes_labels(reference(t.shape, 0), &t.inputs, &t.sup, &strict, &train).unwrap_err();
    assert!(matches!(err, Error::Sieve(_)), "{err}");
}

fn sample(node: usize, noisy: u8) -> SievedSample {
    SievedSample {
        node,
        noisy_label: noisy,
        bayes_label: 1,
        kept: true,
    }
}

#[test]
fn transition_model_saturates_on_unanimous_targets() {
    let n = 20;
    let graph = Arc::new(CsrMatrix::<f64>::empty(n, n));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(n, 3, (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let config = TransitionConfig {
        hidden: 8,
        epochs: 300,
        learning_rate: 5e-2,
        ..Default::default()
    };
    let seen: Vec<SievedSample> = (0..n).map(|v| sample(v, 1)).collect();
    let g = train_transition_model(&seen, &graph, &x, &config, 0).unwrap().predict(&graph, &x).unwrap();
    assert!(g.iter().all(|&v| v < 0.05 && v >= config.epsilon), "{g:?}");

    let hidden: Vec<SievedSample> = (0..n).map(|v| sample(v, 0)).collect();
    let g = train_transition_model(&hidden, &graph, &x, &config, 0).unwrap().predict(&graph, &x).unwrap();
    assert!(g.iter().all(|&v| v > 0.95 && v <= 1.0 - config.epsilon), "{g:?}");

    // dropped and estimated non-fraud samples carry no weight
    let mut mixed = seen.clone();
    mixed.push(SievedSample {
        kept: false,
        ..sample(0, 0)
    });
    mixed.push(SievedSample {
        bayes_label: 0,
        ..sample(1, 0)
    });
    let a = train_transition_model(&seen, &graph, &x, &config, 0).unwrap();
    let b = train_transition_model(&mixed, &graph, &x, &config, 0).unwrap();
    assert_eq!(a, b);

    let none: Vec<SievedSample> = (0..n).map(|v| SievedSample { bayes_label: 0, ..sample(v, 0) }).collect();
    assert!(matches!(
        train_transition_model(&none, &graph, &x, &config, 0),
        Err(Error::Training(_))
    ));
}

#[test]
fn zero_rates_reproduce_plain_training_exactly() {
    let t = toy(4);
    let train = TrainConfig {
        max_epochs: 40,
        ..toy_train()
    };
    let gamma: Arc<[f64]> = vec![0.0; t.sup.train.len()].into();
    let plain = train_model(reference(t.shape, 8), &t.inputs, &t.sup, &Objective::Plain, &train, true).unwrap();
    let corrected =
        train_model(reference(t.shape, 8), &t.inputs, &t.sup, &Objective::Corrected(gamma), &train, true).unwrap();
    assert_eq!(plain.trajectory, corrected.trajectory);
    let losses = |o: &crate::harness::TrainOutcome| o.curve.iter().map(|e| e.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&plain), losses(&corrected));
}

#[test]
fn audit_files_have_expected_columns() {
    let dir = tempfile::TempDir::new().unwrap();
    let sieve = dir.path().join("sieve.csv");
    write_sieve_csv(&sieve, &[sample(3, 0), SievedSample { kept: false, ..sample(5, 1) }]).unwrap();
    let text = std::fs::read_to_string(&sieve).unwrap();
    assert_eq!(text, "node_id,noisy_label,bayes_label,kept\n3,0,1,true\n5,1,1,false\n");
    let gamma = dir.path().join("gamma.csv");
    write_gamma_csv(&gamma, &[3, 5], &[0.25, 0.5]).unwrap();
    assert_eq!(std::fs::read_to_string(&gamma).unwrap(), "node_id,gamma_hat\n3,0.25\n5,0.5\n");
}
