use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use kegraph::graph::{load_fkg, validate_schema, Fkg, FkgPaths};
use kegraph::harness::{
    auc, preprocess_attributes, prepare, run_experiment, Dataset, ExperimentConfig, MetricsReport, Split,
};
use kegraph::kge::{extract_company_embeddings, save_embeddings, train_kge, train_kge_logged, KgeArtifact, KgeConfig};
use kegraph::metapath::build_weight_matrix;
use kegraph::model::{forward, load_checkpoint, ModelInputs};
use kegraph::numeric::Tensor;
use kegraph::synth::{synthesize, write_dataset, GroundTruth};
use kegraph::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

const RUN_CONFIG: &str = "run.toml";
const GROUND_TRUTH: &str = "ground_truth.csv";

pub fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn load_graph(dir: &Path) -> Result<Fkg> {
    if !dir.is_dir() {
        let msg = format!("dataset directory {} not found", dir.display());
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into());
    }
    let p = FkgPaths::in_dir(dir);
    load_fkg(&p.triples, &p.attributes, &p.labels)
}

/// The graph plus `ground_truth.csv` when the directory has one.
fn load_dataset(dir: &Path) -> Result<Dataset> {
    let fkg = load_graph(dir)?;
    let gt = dir.join(GROUND_TRUTH);
    let truth = if gt.is_file() {
        let t = GroundTruth::read(&gt)?;
        if t.records.len() != fkg.company_count() {
            return Err(Error::Schema(format!(
                "{}: {} records for {} companies",
                gt.display(),
                t.records.len(),
                fkg.company_count()
            )));
        }
        Some(t)
    } else {
        None
    };
    Ok(Dataset {
        name: dataset_name(dir),
        fkg,
        truth,
    })
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_CONFIG), config.to_toml())?;
    Ok(())
}

pub fn synth(config: &RunConfig, out: &Path) -> Result<()> {
    let data = synthesize(&config.synth()?)?;
    write_dataset(out, &data)?;
    echo_config(out, config)?;
    let hidden = data
        .truth
        .records
        .iter()
        .filter(|r| r.clean_label == 1 && r.noisy_label == 0)
        .count();
    let frauds = data.truth.records.iter().filter(|r| r.clean_label == 1).count();
    println!(
        "wrote {} companies, {} triples, {frauds} frauds ({hidden} hidden) to {}",
        data.fkg.company_count(),
        data.fkg.triples().len(),
        out.display()
    );
    Ok(())
}

pub fn validate(data: &Path) -> Result<()> {
    let fkg = load_graph(data)?;
    let report = validate_schema(&fkg);
    print!("{report}");
    if report.is_empty() {
        Ok(())
    } else {
        let total: usize = report.findings.iter().map(|f| f.count).sum();
        Err(Error::Schema(format!("{total} violation(s) in {}", data.display())))
    }
}

pub fn kge_train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let fkg = load_graph(data)?;
    let trained = train_kge_logged(&fkg, &config.kge())?;
    echo_config(out, config)?;
    let artifact = KgeArtifact::from_fkg(trained.table, &fkg);
    save_embeddings(&artifact, &out.join("embeddings.kgt"), &out.join("embeddings.tsv"))?;
    let mut w = csv::Writer::from_path(out.join("kge_loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trained.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    println!(
        "embedded {} entities and {} relations (final loss {:.5}) into {}",
        fkg.entity_count(),
        fkg.relation_count(),
        trained.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SubgraphSummary {
    name: String,
    companies: usize,
    edges: usize,
    paths: u64,
}

pub fn subgraphs(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let fkg = load_graph(data)?;
    let specs = config.experiment().meta_path_specs()?;
    echo_config(out, config)?;
    let keys: Vec<String> = fkg.companies().iter().map(|c| fkg.entity(c.entity).key.clone()).collect();
    let mut summary = Vec::new();
    for spec in &specs {
        let w = build_weight_matrix(&fkg, spec)?;
        let mut csv = csv::Writer::from_path(out.join(format!("{}.csv", spec.name())))?;
        csv.write_record(["source", "target", "paths", "weight"])?;
        for ((i, j, n), (_, _, x)) in w.counts.iter().zip(w.normalized.iter()) {
            csv.write_record([keys[i].as_str(), keys[j].as_str(), &n.to_string(), &x.to_string()])?;
        }
        csv.flush()?;
        summary.push(SubgraphSummary {
            name: spec.name().to_string(),
            companies: w.size(),
            edges: w.counts.nnz(),
            paths: w.counts.iter().map(|e| e.2).sum(),
        });
    }
    fs::write(out.join("subgraphs.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for s in &summary {
        println!("{}: {} edges, {} paths", s.name, s.edges, s.paths);
    }
    Ok(())
}

pub fn train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    let experiment = config.experiment();
    let report = run_experiment(&dataset, &experiment, Some(out))?;
    echo_config(out, config)?;
    for (k, s) in &report.summary {
        println!("{k}: {:.4} ± {:.4} (n = {})", s.mean, s.std_err, s.n);
    }
    println!("results in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    seed: u64,
    test_auc: f64,
    clean_test_auc: Option<f64>,
}

/// Rebuilds the seed's inputs from the run's saved config and split, then scores the checkpoint.
pub fn eval(data: &Path, run: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let text = fs::read_to_string(run.join("experiment.toml"))?;
    let experiment: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let seed_dir = run.join(format!("seed_{seed}"));
    let model = load_checkpoint(&seed_dir.join("model.kgt"), &seed_dir.join("model.json"))?;
    let split: Split = serde_json::from_slice(&fs::read(seed_dir.join("split.json"))?)?;
    let fkg = &dataset.fkg;
    if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&v| v >= fkg.company_count()) {
        return Err(Error::Schema(format!("split names company {bad} outside the dataset")));
    }

    let prepared = prepare(&dataset, &experiment)?;
    let pre = preprocess_attributes(fkg.attributes(), &split.train)?;
    let x_ke = if model.flags().knowledge {
        let kge = KgeConfig {
            seed,
            ..experiment.kge.clone()
        };
        extract_company_embeddings(&train_kge(fkg, &kge)?, fkg)
    } else {
        Tensor::zeros(fkg.company_count(), 1)
    };
    let graphs = prepared.subgraphs.iter().map(|s| s.normalized().clone()).collect();
    let inputs = ModelInputs::new(graphs, pre.x, x_ke)?;
    let (y, _) = forward(&model, &inputs)?;
    let scores: Vec<f64> = split.test.iter().map(|&v| y.get(v, 1)).collect();
    let pick = |labels: &[u8]| split.test.iter().map(|&v| labels[v]).collect::<Vec<u8>>();
    let report = EvalReport {
        dataset: dataset.name.clone(),
        seed,
        test_auc: auc(&scores, &pick(&prepared.labels))?,
        clean_test_auc: dataset
            .truth
            .as_ref()
            .map(|t| auc(&scores, &pick(&t.clean_labels())))
            .transpose()?,
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let out = out.map_or_else(|| seed_dir.join("eval.json"), Path::to_path_buf);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, &json)?;
    print!("{json}");
    Ok(())
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.json")
    } else {
        p.to_path_buf()
    }
}

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["run", "dataset", "mode", "metric", "mean", "std_err", "n"])?;
        for run in runs {
            let report = MetricsReport::read(&metrics_path(run))?;
            let mode = report.mode.to_string();
            let name = run.display().to_string();
            for (metric, s) in &report.summary {
                w.write_record([
                    name.as_str(),
                    report.dataset.as_str(),
                    mode.as_str(),
                    metric.as_str(),
                    &s.mean.to_string(),
                    &s.std_err.to_string(),
                    &s.n.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, &buf)?;
        }
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}
