use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::auc;
use super::preprocess::preprocess_attributes;
use super::split::{split_dataset, Split};
use super::train::{train_model, EpochRecord, Objective, Supervision, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Fkg;
use crate::kge::{extract_company_embeddings, train_kge, KgeConfig};
use crate::metapath::{build_company_subgraph, sum_up_graph, CompanySubgraph, MetaPathSpec};
use crate::model::{forward, save_checkpoint, Ablation, FusionTrace, KeModel, ModelConfig, ModelInputs, ModelShape};
use crate::numeric::{CsrMatrix, Tensor};
use crate::robust::{
    collect_bayes_labels, train_transition_model, write_gamma_csv, write_sieve_csv, SieveConfig, SievedSample,
    TransitionConfig,
};
use crate::synth::GroundTruth;

pub const SCHEMA_VERSION: u32 = 1;

/// Pipelines selectable per experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    WoKe,
    WoAttr,
    WoAttn,
    /// Full architecture trained directly on the observed labels.
    WoRobust,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Full, Mode::WoKe, Mode::WoAttr, Mode::WoAttn, Mode::WoRobust];

    pub fn ablation(self) -> Ablation {
        match self {
            Mode::Full | Mode::WoRobust => Ablation::Full,
            Mode::WoKe => Ablation::WoKe,
            Mode::WoAttr => Ablation::WoAttr,
            Mode::WoAttn => Ablation::WoAttn,
        }
    }

    pub fn robust(self) -> bool {
        self != Mode::WoRobust
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::WoRobust => "wo_robust",
            m => m.ablation().name(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown mode `{s}` (full, wo_ke, wo_attr, wo_attn, wo_robust)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Built-in names (`RPT`, `SC`, `SDSE`) or textual meta-path specs.
    pub meta_paths: Vec<String>,
    /// Run seeds on the rayon pool.
    pub parallel: bool,
    pub kge: KgeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sieve: SieveConfig,
    pub transition: TransitionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seeds: (0..5).collect(),
            meta_paths: vec!["RPT".into(), "SC".into(), "SDSE".into()],
            parallel: true,
            kge: KgeConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sieve: SieveConfig::default(),
            transition: TransitionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn meta_path_specs(&self) -> Result<Vec<MetaPathSpec>> {
        if self.meta_paths.is_empty() {
            return Err(Error::Config("at least one meta-path is required".into()));
        }
        self.meta_paths
            .iter()
            .map(|m| match MetaPathSpec::by_name(m) {
                Some(s) => Ok(s),
                None => MetaPathSpec::parse(m, m),
            })
            .collect()
    }

    /// Hex SHA-256 of the JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A graph with observed labels, plus the clean labels when they are known.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub fkg: Fkg,
    pub truth: Option<GroundTruth>,
}

/// Quantities shared by every seed: meta-path graphs and observed labels.
pub struct Prepared {
    pub subgraphs: Vec<CompanySubgraph>,
    pub sum_graph: Arc<CsrMatrix<f64>>,
    pub labels: Vec<u8>,
}

pub fn prepare(data: &Dataset, config: &ExperimentConfig) -> Result<Prepared> {
    let specs = config.meta_path_specs()?;
    let subgraphs = specs
        .iter()
        .map(|s| build_company_subgraph(&data.fkg, s))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("subgraphs", 0))?;
    let sum_graph = sum_up_graph(&subgraphs)?.normalized().clone();
    let labels = data
        .fkg
        .labels()
        .iter()
        .map(|l| l.map_or(0, |l| u8::from(l.fraud)))
        .collect();
    Ok(Prepared {
        subgraphs,
        sum_graph,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveSummary {
    pub kept: usize,
    pub dropped: usize,
    /// Share of kept (dropped) samples whose estimated label equals the clean one.
    pub kept_clean_agreement: Option<f64>,
    pub dropped_clean_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub valid_auc: f64,
    pub test_auc: f64,
    /// Test AUC against the clean labels.
    pub clean_test_auc: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub sieve: Option<SieveSummary>,
    /// Mean predicted hidden-fraud rate over training rows.
    pub gamma_mean: Option<f64>,
    /// Pearson correlation of predicted and true flip probabilities over clean frauds in training.
    pub gamma_flip_correlation: Option<f64>,
}

/// Per-seed artifacts kept in memory.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub split: Split,
    pub curve: Vec<EpochRecord>,
    pub trace: FusionTrace,
    pub model: KeModel,
    pub samples: Vec<SievedSample>,
    /// Predicted hidden-fraud rate per training row, in `split.train` order.
    pub gamma: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and standard error (sample standard deviation over √n; 0 for one value).
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std_err, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub dataset: String,
    pub mode: Mode,
    pub config_digest: String,
    pub seeds: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, Summary>,
}

impl MetricsReport {
    pub fn new(dataset: &str, config: &ExperimentConfig, seeds: Vec<SeedMetrics>) -> Self {
        let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for s in &seeds {
            let mut put = |k, v: Option<f64>| {
                if let Some(v) = v {
                    columns.entry(k).or_default().push(v);
                }
            };
            put("valid_auc", Some(s.valid_auc));
            put("test_auc", Some(s.test_auc));
            put("clean_test_auc", s.clean_test_auc);
            put("gamma_mean", s.gamma_mean);
            put("gamma_flip_correlation", s.gamma_flip_correlation);
        }
        let summary = columns
            .into_iter()
            .filter_map(|(k, v)| Summary::of(&v).map(|s| (k.to_string(), s)))
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: dataset.to_string(),
            mode: config.mode,
            config_digest: config.digest(),
            seeds,
            summary,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&fs::read(path)?)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "{}: metrics schema {} (expected {SCHEMA_VERSION})",
                path.display(),
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Runs one seed of the configured pipeline.
pub fn run_seed(data: &Dataset, prepared: &Prepared, config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let fkg = &data.fkg;
    let flags = config.mode.ablation().flags();
    let split = split_dataset(fkg, seed).map_err(|e| e.in_stage("split", seed))?;
    let pre = preprocess_attributes(fkg.attributes(), &split.train).map_err(|e| e.in_stage("preprocess", seed))?;
    let x_ke = if flags.knowledge {
        let kge = KgeConfig {
            seed,
            ..config.kge.clone()
        };
        let table = train_kge(fkg, &kge).map_err(|e| e.in_stage("kge", seed))?;
        extract_company_embeddings(&table, fkg)
    } else {
        Tensor::zeros(fkg.company_count(), 1)
    };
    let graphs = prepared.subgraphs.iter().map(|s| s.normalized().clone()).collect();
    let inputs = ModelInputs::new(graphs, pre.x.clone(), x_ke).map_err(|e| e.in_stage("inputs", seed))?;
    let shape = ModelShape {
        d_att: inputs.x_att.cols(),
        d_ke: inputs.x_ke.cols(),
        meta_paths: prepared.subgraphs.len(),
    };
    let sup = Supervision::new(&prepared.labels, &split.train, &split.valid).map_err(|e| e.in_stage("supervision", seed))?;
    let model = KeModel::new(config.model.clone(), flags, shape, seed).map_err(|e| e.in_stage("model", seed))?;

    let (objective, samples, gamma) = if config.mode.robust() {
        let reference = KeModel::new(config.model.clone(), flags, shape, seed.wrapping_add(1000))
            .map_err(|e| e.in_stage("model", seed))?;
        let samples = collect_bayes_labels(reference, &inputs, &sup, &config.sieve, &config.train)
            .map_err(|e| e.in_stage("sieve", seed))?;
        let transition = train_transition_model(
            &samples,
            &prepared.sum_graph,
            &inputs.x_att,
            &config.transition,
            seed.wrapping_add(2000),
        )
        .map_err(|e| e.in_stage("transition", seed))?;
        let all = transition
            .predict(&prepared.sum_graph, &inputs.x_att)
            .map_err(|e| e.in_stage("transition", seed))?;
        let gamma: Vec<f64> = split.train.iter().map(|&v| all[v]).collect();
        (Objective::Corrected(gamma.clone().into()), samples, gamma)
    } else {
        (Objective::Plain, Vec::new(), Vec::new())
    };

    let outcome = train_model(model, &inputs, &sup, &objective, &config.train, false)
        .map_err(|e| e.in_stage("train", seed))?;
    let (y, trace) = forward(&outcome.model, &inputs).map_err(|e| e.in_stage("evaluate", seed))?;
    let scores: Vec<f64> = (0..y.rows()).map(|v| y.get(v, 1)).collect();
    let pick = |rows: &[usize], labels: &[u8]| -> (Vec<f64>, Vec<u8>) {
        (rows.iter().map(|&v| scores[v]).collect(), rows.iter().map(|&v| labels[v]).collect())
    };
    let evaluate = |rows: &[usize], labels: &[u8]| {
        let (s, l) = pick(rows, labels);
        auc(&s, &l).map_err(|e| e.in_stage("evaluate", seed))
    };
    let valid_auc = evaluate(&split.valid, &prepared.labels)?;
    let test_auc = evaluate(&split.test, &prepared.labels)?;
    let clean = data.truth.as_ref().map(|t| t.clean_labels());
    let clean_test_auc = clean.as_ref().map(|c| evaluate(&split.test, c)).transpose()?;

    let sieve = (!samples.is_empty()).then(|| {
        let agreement = |kept: bool| {
            let c = clean.as_ref()?;
            let group: Vec<&SievedSample> = samples.iter().filter(|s| s.kept == kept).collect();
            (!group.is_empty()).then(|| {
                group.iter().filter(|s| s.bayes_label == c[s.node]).count() as f64 / group.len() as f64
            })
        };
        SieveSummary {
            kept: samples.iter().filter(|s| s.kept).count(),
            dropped: samples.iter().filter(|s| !s.kept).count(),
            kept_clean_agreement: agreement(true),
            dropped_clean_agreement: agreement(false),
        }
    });
    let gamma_mean = (!gamma.is_empty()).then(|| gamma.iter().sum::<f64>() / gamma.len() as f64);
    let gamma_flip_correlation = data.truth.as_ref().filter(|_| !gamma.is_empty()).and_then(|t| {
        let (g, f): (Vec<f64>, Vec<f64>) = split
            .train
            .iter()
            .zip(&gamma)
            .filter(|(&v, _)| t.records[v].clean_label == 1)
            .map(|(&v, &g)| (g, t.records[v].flip_prob))
            .unzip();
        pearson(&g, &f)
    });

    Ok(SeedRun {
        metrics: SeedMetrics {
            seed,
            valid_auc,
            test_auc,
            clean_test_auc,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.curve.len(),
            sieve,
            gamma_mean,
            gamma_flip_correlation,
        },
        split,
        curve: outcome.curve,
        trace,
        model: outcome.model,
        samples,
        gamma,
        scores,
    })
}

/// Runs every seed and writes artifacts under `out` when given.
pub fn run_experiment(data: &Dataset, config: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsReport> {
    if config.seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let prepared = prepare(data, config)?;
    let runs: Vec<SeedRun> = if config.parallel {
        config
            .seeds
            .par_iter()
            .map(|&s| run_seed(data, &prepared, config, s))
            .collect::<Result<_>>()?
    } else {
        config
            .seeds
            .iter()
            .map(|&s| run_seed(data, &prepared, config, s))
            .collect::<Result<_>>()?
    };
    for r in &runs {
        log::info!(
            "{} seed {}: valid AUC {:.4}, test AUC {:.4}",
            config.mode,
            r.metrics.seed,
            r.metrics.valid_auc,
            r.metrics.test_auc
        );
    }
    let report = MetricsReport::new(&data.name, config, runs.iter().map(|r| r.metrics.clone()).collect());
    if let Some(dir) = out {
        write_artifacts(dir, data, &prepared, config, &runs, &report).map_err(|e| e.in_stage("write", 0))?;
    }
    Ok(report)
}

fn write_artifacts(
    dir: &Path,
    data: &Dataset,
    prepared: &Prepared,
    config: &ExperimentConfig,
    runs: &[SeedRun],
    report: &MetricsReport,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    report.write(&dir.join("metrics.json"))?;
    fs::write(dir.join("experiment.toml"), toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?)?;

    let mut curves = csv::Writer::from_path(dir.join("curves.csv"))?;
    curves.write_record(["seed", "epoch", "train_loss", "valid_auc"])?;
    for r in runs {
        for e in &r.curve {
            curves.write_record([
                r.metrics.seed.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.valid_auc.to_string(),
            ])?;
        }
    }
    curves.flush()?;

    let names: Vec<&str> = prepared.subgraphs.iter().map(|s| s.name.as_str()).collect();
    let mut att = csv::Writer::from_path(dir.join("attention.csv"))?;
    att.write_record(["seed", "level", "branch", "meta_path", "weight"])?;
    for r in runs {
        let seed = r.metrics.seed.to_string();
        for (b, weights) in r.trace.branches.iter().zip(&r.trace.relation_weights) {
            for (k, w) in weights.iter().flatten().enumerate() {
                att.write_record([seed.as_str(), "meta_path", b.name(), names[k], &w.to_string()])?;
            }
        }
        if let Some(bw) = &r.trace.branch_weights {
            for (b, w) in r.trace.branches.iter().zip(bw) {
                att.write_record([seed.as_str(), "branch", b.name(), "", &w.to_string()])?;
            }
        }
    }
    att.flush()?;

    let mut gamma = csv::Writer::from_path(dir.join("gamma.csv"))?;
    gamma.write_record(["seed", "node", "company_key", "year", "gamma", "true_flip_prob"])?;
    for r in runs {
        for (&v, g) in r.split.train.iter().zip(&r.gamma) {
            let c = &data.fkg.companies()[v];
            let flip = data.truth.as_ref().map(|t| t.records[v].flip_prob.to_string());
            gamma.write_record([
                r.metrics.seed.to_string(),
                v.to_string(),
                c.company_key.clone(),
                c.year.to_string(),
                g.to_string(),
                flip.unwrap_or_default(),
            ])?;
        }
    }
    gamma.flush()?;

    for r in runs {
        let sub = dir.join(format!("seed_{}", r.metrics.seed));
        fs::create_dir_all(&sub)?;
        save_checkpoint(&r.model, &sub.join("model.kgt"), &sub.join("model.json"))?;
        fs::write(sub.join("split.json"), serde_json::to_string(&r.split)?)?;
        if !r.samples.is_empty() {
            write_sieve_csv(&sub.join("sieve.csv"), &r.samples)?;
            write_gamma_csv(&sub.join("gamma.csv"), &r.split.train, &r.gamma)?;
        }
    }
    Ok(())
}
