use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use super::*;
use crate::metapath::row_normalize;
use crate::numeric::{check_gradients, GradCheckConfig};

type Dense = Vec<Vec<f64>>;

fn dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(d: &Dense) -> Tensor {
    Tensor::from_rows(d).unwrap()
}

fn mm(a: &Dense, b: &Dense) -> Dense {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn close(a: &Dense, b: &Dense, tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol))
}

/// `relu((Ŵ + I) H W)`.
fn dense_layer(w_hat: &Dense, h: &Dense, w: &Dense) -> Dense {
    let n = w_hat.len();
    let mut a = w_hat.clone();
    for (i, row) in a.iter_mut().enumerate().take(n) {
        row[i] += 1.0;
    }
    mm(&mm(&a, h), w).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn dense_attention(reps: &[Dense], w: &[f64], b: f64) -> (Dense, Vec<f64>) {
    let scores: Vec<f64> = reps
        .iter()
        .map(|h| {
            let n = h.len() as f64;
            let readout: Vec<f64> = (0..h[0].len()).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / n).collect();
            (readout.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b).tanh()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let a: Vec<f64> = e.iter().map(|v| v / total).collect();
    let mut z = vec![vec![0.0; reps[0][0].len()]; reps[0].len()];
    for (k, h) in reps.iter().enumerate() {
        for i in 0..z.len() {
            for j in 0..z[0].len() {
                z[i][j] += a[k] * h[i][j];
            }
        }
    }
    (z, a)
}

fn dense_classify(z: &Dense, w: &Dense, b: &[f64]) -> Dense {
    let mut out = vec![vec![0.0; 2]; z.len()];
    for i in 0..z.len() {
        for c in 0..2 {
            let mut logit = b[c];
            for k in 0..w.len() {
                logit += z[i][k] * w[k][c];
            }
            out[i][c] = 1.0 / (1.0 + (-logit).exp());
        }
    }
    out
}

fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Arc<CsrMatrix<f64>> {
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < density {
                entries.push((i, j, rng.random_range(1..4) as f64));
            }
        }
    }
    let w = CsrMatrix::from_triplets(n, n, entries, |a, b| a + b).unwrap();
    Arc::new(row_normalize(&w).unwrap())
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(rows, cols, -1.0, 1.0, rng)
}

fn fixture(flags: ModeFlags, seed: u64) -> (KeModel, ModelInputs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let inputs = ModelInputs::new(
        vec![random_graph(n, 0.4, &mut rng), random_graph(n, 0.3, &mut rng)],
        random(n, 3, &mut rng),
        random(n, 4, &mut rng),
    )
    .unwrap();
    let config = ModelConfig {
        layers: 2,
        hidden: 5,
        head: Head::Sigmoid,
    };
    let shape = ModelShape {
        d_att: 3,
        d_ke: 4,
        meta_paths: 2,
    };
    let mut model = KeModel::new(config, flags, shape, seed).unwrap();
    // non-zero biases and classifier weights so they are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, p) in model.names.clone().iter().zip(model.params_mut()) {
        if name.ends_with("_b") || name == "pred_w" {
            *p = random(p.rows(), p.cols(), &mut rng);
        }
    }
    (model, inputs)
}

fn is_simplex(w: &[f64]) -> bool {
    w.iter().all(|v| *v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

#[test]
fn layer_examples() {
    let empty = Arc::new(CsrMatrix::<f64>::empty(2, 2));
    let h = tensor(&vec![vec![1.0, -2.0], vec![0.5, 0.5]]);
    let w = tensor(&vec![vec![2.0, 0.0], vec![1.0, 1.0]]);
    let out = mwgcn_layer(&h, &empty, &w, Activation::Relu).unwrap();
    assert_eq!(dense(&out), vec![vec![0.0, 0.0], vec![1.5, 0.5]]);

    let w_hat = Arc::new(
        CsrMatrix::from_triplets(3, 3, vec![(0, 1, 0.5), (0, 2, 0.5)], |a, b| a + b).unwrap(),
    );
    let h = tensor(&vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let out = mwgcn_layer(&h, &w_hat, &Tensor::identity(2), Activation::Identity).unwrap();
    assert_eq!(out.row(0), &[0.5, 0.5]);

    let bad = Arc::new(CsrMatrix::from_triplets(2, 2, vec![(0, 1, 2.0)], |a, b| a + b).unwrap());
    let err = mwgcn_layer(&tensor(&vec![vec![1.0], vec![1.0]]), &bad, &Tensor::identity(1), Activation::Relu);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn layer_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let g = random_graph(5, 0.5, &mut rng);
        let h = random(5, 3, &mut rng);
        let w = random(3, 4, &mut rng);
        let out = mwgcn_layer(&h, &g, &w, Activation::Relu).unwrap();
        assert!(close(&dense(&out), &dense_layer(&g.to_dense(), &dense(&h), &dense(&w)), 1e-12));
    }
}

#[test]
fn relation_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = AttentionParams {
        w: random(3, 1, &mut rng),
        b: Tensor::scalar(0.3),
    };
    let h = random(4, 3, &mut rng);
    let (z, a) = relation_attention(&[h.clone(), h.clone()], &params).unwrap();
    assert_eq!(a, vec![0.5, 0.5]);
    assert!(z.max_abs_diff(&h) <= 1e-15);

    let (z, a) = relation_attention(std::slice::from_ref(&h), &params).unwrap();
    assert_eq!((a, z), (vec![1.0], h.clone()));

    let reps = [h.clone(), random(4, 3, &mut rng), random(4, 3, &mut rng)];
    let (z, a) = relation_attention(&reps, &params).unwrap();
    let (z_o, a_o) = dense_attention(
        &reps.iter().map(dense).collect::<Vec<_>>(),
        params.w.data(),
        0.3,
    );
    assert!(close(&dense(&z), &z_o, 1e-12));
    assert!(a.iter().zip(&a_o).all(|(x, y)| (x - y).abs() <= 1e-12));

    assert!(matches!(relation_attention(&[], &params), Err(Error::Contract(_))));
    assert!(matches!(
        relation_attention(&[h, random(3, 3, &mut rng)], &params),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn embedding_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = AttentionParams {
        w: random(2, 1, &mut rng),
        b: Tensor::scalar(-0.1),
    };
    let z = random(3, 2, &mut rng);
    let (out, a) = embedding_attention(&z, &z, &params).unwrap();
    assert_eq!(a, [0.5, 0.5]);
    assert!(out.max_abs_diff(&z) <= 1e-15);
    assert!(matches!(
        embedding_attention(&z, &random(3, 3, &mut rng), &params),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn classify_examples() {
    let z = tensor(&vec![vec![0.3, -1.2], vec![2.0, 0.1]]);
    let zero = ClassifierParams {
        w: Tensor::zeros(2, 2),
        b: Tensor::zeros(1, 2),
    };
    let y = classify(&z, &zero, Head::Sigmoid).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.5));

    let saturated = ClassifierParams {
        w: Tensor::zeros(2, 2),
        b: tensor(&vec![vec![10.0, -10.0]]),
    };
    let y = classify(&z, &saturated, Head::Sigmoid).unwrap();
    assert!((y.get(0, 0) - 0.99995).abs() < 1e-5 && (y.get(0, 1) - 0.00005).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ClassifierParams {
        w: random(2, 2, &mut rng),
        b: random(1, 2, &mut rng),
    };
    let y = classify(&z, &params, Head::Sigmoid).unwrap();
    assert!(close(&dense(&y), &dense_classify(&dense(&z), &dense(&params.w), params.b.data()), 1e-12));

    let y = classify(&z, &params, Head::Softmax).unwrap();
    assert!((0..2).all(|r| (y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12));
}

#[test]
fn config_contract() {
    let shape = ModelShape {
        d_att: 2,
        d_ke: 2,
        meta_paths: 1,
    };
    let zero_layers = ModelConfig {
        layers: 0,
        ..ModelConfig::default()
    };
    assert!(matches!(
        KeModel::new(zero_layers, Ablation::Full.flags(), shape, 0),
        Err(Error::Config(_))
    ));
    let neither = ModeFlags {
        knowledge: false,
        attributes: false,
        attention: true,
    };
    assert!(matches!(KeModel::new(ModelConfig::default(), neither, shape, 0), Err(Error::Config(_))));
    assert_eq!("wo_attn".parse::<Ablation>().unwrap(), Ablation::WoAttn);
    assert!("none".parse::<Ablation>().is_err());
}

#[test]
fn stack_counts_follow_mode() {
    for (mode, stacks) in [(Ablation::Full, 4), (Ablation::WoKe, 2), (Ablation::WoAttr, 2), (Ablation::WoAttn, 4)] {
        let (model, _) = fixture(mode.flags(), 1);
        let layer0 = model.names().iter().filter(|n| n.ends_with("layer0")).count();
        assert_eq!(layer0, stacks, "{mode}");
    }
}

/// Straight-line recomputation of the whole network from named parameters.
fn dense_forward(model: &KeModel, inputs: &ModelInputs) -> Dense {
    let p = |name: &str| dense(model.param(name).unwrap());
    let branches = model.flags().branches();
    let mut zs = Vec::new();
    for b in &branches {
        let x = dense(match b {
            Branch::Ke => &inputs.x_ke,
            Branch::Att => &inputs.x_att,
        });
        let mut outs = Vec::new();
        for (k, g) in inputs.subgraphs.iter().enumerate() {
            let mut h = x.clone();
            for l in 0..model.config().layers {
                h = dense_layer(&g.to_dense(), &h, &p(&format!("{}.mp{k}.layer{l}", b.name())));
            }
            outs.push(h);
        }
        let z = if model.flags().attention {
            let w = p(&format!("{}.rel_w", b.name()));
            let w: Vec<f64> = w.iter().map(|r| r[0]).collect();
            dense_attention(&outs, &w, p(&format!("{}.rel_b", b.name()))[0][0]).0
        } else {
            sum(&outs)
        };
        zs.push(z);
    }
    let z = if zs.len() == 1 {
        zs.remove(0)
    } else if model.flags().attention {
        let w: Vec<f64> = p("emb_w").iter().map(|r| r[0]).collect();
        dense_attention(&zs, &w, p("emb_b")[0][0]).0
    } else {
        sum(&zs)
    };
    dense_classify(&z, &p("pred_w"), &p("pred_b")[0])
}

fn sum(reps: &[Dense]) -> Dense {
    let mut out = reps[0].clone();
    for h in &reps[1..] {
        for (r, hr) in out.iter_mut().zip(h) {
            for (v, x) in r.iter_mut().zip(hr) {
                *v += x;
            }
        }
    }
    out
}

#[test]
fn forward_matches_dense_composition() {
    for mode in Ablation::ALL {
        let (model, inputs) = fixture(mode.flags(), 21);
        let (y, trace) = forward(&model, &inputs).unwrap();
        assert!(close(&dense(&y), &dense_forward(&model, &inputs), 1e-10), "{mode}");
        assert_eq!(y.shape(), [6, 2]);
        assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        match mode {
            Ablation::WoAttn => {
                assert!(trace.branch_weights.is_none());
                assert!(trace.relation_weights.iter().all(Option::is_none));
            }
            _ => {
                assert!(is_simplex(trace.branch_weights.as_ref().unwrap()));
                for w in &trace.relation_weights {
                    assert!(is_simplex(w.as_ref().unwrap()));
                }
            }
        }
        if mode == Ablation::WoKe || mode == Ablation::WoAttr {
            assert_eq!(trace.branch_weights, Some(vec![1.0]));
        }
    }
}

#[test]
fn ablated_branch_inputs_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (model, inputs) = fixture(Ablation::WoKe.flags(), 3);
    let (y, _) = forward(&model, &inputs).unwrap();
    let mut moved = inputs.clone();
    moved.x_ke = random(6, 4, &mut rng);
    assert_eq!(forward(&model, &moved).unwrap().0, y);

    let (model, inputs) = fixture(Ablation::WoAttr.flags(), 3);
    let (y, _) = forward(&model, &inputs).unwrap();
    let mut moved = inputs.clone();
    moved.x_att = random(6, 3, &mut rng);
    assert_eq!(forward(&model, &moved).unwrap().0, y);

    let (model, inputs) = fixture(Ablation::Full.flags(), 3);
    let (y, _) = forward(&model, &inputs).unwrap();
    moved = inputs.clone();
    moved.x_ke = random(6, 4, &mut rng);
    assert_ne!(forward(&model, &moved).unwrap().0, y);
}

#[test]
fn full_model_gradient_check() {
    for mode in [Ablation::Full, Ablation::WoAttn] {
        let (model, inputs) = fixture(mode.flags(), 5);
        let report = check_gradients(model.params(), GradCheckConfig::default(), |tape, vars| {
            let g = model.build_with(tape, &inputs, vars.to_vec())?;
            let l = tape.log(g.y_hat)?;
            tape.sum(l)
        })
        .unwrap();
        assert!(report.passed(), "{mode}: {:?}", report.failures);
        assert!(report.checked > 100);
    }
}

#[test]
fn checkpoint_round_trip() {
    let (model, inputs) = fixture(Ablation::Full.flags(), 6);
    let dir = TempDir::new().unwrap();
    let (bin, json) = (dir.path().join("model.bin"), dir.path().join("model.json"));
    save_checkpoint(&model, &bin, &json).unwrap();
    let back = load_checkpoint(&bin, &json).unwrap();
    assert_eq!(back, model);
    assert_eq!(forward(&back, &inputs).unwrap().0, forward(&model, &inputs).unwrap().0);
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(meta.config.layers, 2);
}

fn permute_graph(g: &CsrMatrix<f64>, perm: &[usize]) -> Arc<CsrMatrix<f64>> {
    let entries = g.iter().map(|(i, j, v)| (perm[i], perm[j], v)).collect();
    Arc::new(CsrMatrix::from_triplets(g.rows(), g.cols(), entries, |a, b| a + b).unwrap())
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (r, &p) in perm.iter().enumerate().take(t.rows()) {
        out.row_mut(p).copy_from_slice(t.row(r));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_companies_permutes_scores(
        seed in 0u64..1000,
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        mode in prop::sample::select(Ablation::ALL.to_vec()),
    ) {
        let (model, inputs) = fixture(mode.flags(), seed);
        let moved = ModelInputs::new(
            inputs.subgraphs.iter().map(|g| permute_graph(g, &perm)).collect(),
            permute_rows(&inputs.x_att, &perm),
            permute_rows(&inputs.x_ke, &perm),
        ).unwrap();
        let (y, t) = forward(&model, &inputs).unwrap();
        let (y2, t2) = forward(&model, &moved).unwrap();
        prop_assert!(permute_rows(&y, &perm).max_abs_diff(&y2) <= 1e-12);
        if let (Some(a), Some(b)) = (t.branch_weights, t2.branch_weights) {
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }
}
