//! Flat run configuration: one key per tunable, read from TOML and `--set` overrides.

use std::fs;
use std::path::Path;

use kegraph::harness::{ExperimentConfig, Mode, TrainConfig};
use kegraph::kge::{KgeConfig, NormKind};
use kegraph::model::{Head, ModelConfig};
use kegraph::robust::{SieveConfig, TransitionConfig};
use kegraph::synth::{NoiseSpec, SignalPlacement, SynthConfig};
use kegraph::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    SupportSignal,
    TwoRegime,
    NoiseFree,
}

/// Every key documented in the README. Missing keys take the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth_preset: Preset,
    // unset synth keys keep the preset's value
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_companies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_support_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_signal_placement: Option<SignalPlacement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_signal_coef: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_concealed_share: Option<f64>,
    /// Mean flip probability over frauds; only for logistic noise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_hidden_share: Option<f64>,

    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub meta_paths: Vec<String>,
    pub parallel: bool,

    pub kge_dim: usize,
    pub kge_learning_rate: f64,
    pub kge_margin: f64,
    pub kge_negatives: usize,
    pub kge_steps: usize,
    pub kge_batch_size: usize,
    pub kge_norm: NormKind,
    pub kge_seed: u64,

    pub model_layers: usize,
    pub model_hidden: usize,
    pub model_head: Head,

    pub train_learning_rate: f64,
    pub train_max_epochs: usize,
    pub train_patience: usize,

    pub sieve_beta: f64,
    pub sieve_warmup: f64,
    pub sieve_confidence: f64,

    pub transition_hidden: usize,
    pub transition_epochs: usize,
    pub transition_learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            synth_preset: Preset::Default,
            synth_companies: None,
            synth_support_ratio: None,
            synth_seed: None,
            synth_signal_placement: None,
            synth_signal_coef: None,
            synth_concealed_share: None,
            synth_hidden_share: None,
            mode: exp.mode,
            seeds: exp.seeds,
            meta_paths: exp.meta_paths,
            parallel: exp.parallel,
            kge_dim: exp.kge.dim,
            kge_learning_rate: exp.kge.learning_rate,
            kge_margin: exp.kge.margin,
            kge_negatives: exp.kge.negatives_per_positive,
            kge_steps: exp.kge.max_steps,
            kge_batch_size: exp.kge.batch_size,
            kge_norm: exp.kge.norm,
            kge_seed: exp.kge.seed,
            model_layers: exp.model.layers,
            model_hidden: exp.model.hidden,
            model_head: exp.model.head,
            train_learning_rate: exp.train.learning_rate,
            train_max_epochs: exp.train.max_epochs,
            train_patience: exp.train.patience,
            sieve_beta: exp.sieve.beta,
            sieve_warmup: exp.sieve.warmup_fraction,
            sieve_confidence: exp.sieve.confidence,
            transition_hidden: exp.transition.hidden,
            transition_epochs: exp.transition.epochs,
            transition_learning_rate: exp.transition.learning_rate,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a bare string.
fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Reads `file` when given, then applies `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => toml::from_str::<toml::Table>(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (k, v) = parse_override(item)?;
            table.insert(k, v);
        }
        toml::Value::Table(table).try_into().map_err(config_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let mut c = match self.synth_preset {
            Preset::Default => SynthConfig::default(),
            Preset::SupportSignal => SynthConfig::support_signal(),
            Preset::TwoRegime => SynthConfig::two_regime(),
            Preset::NoiseFree => SynthConfig {
                noise: NoiseSpec::Constant { probability: 0.0 },
                ..SynthConfig::default()
            },
        };
        let set = |slot: &mut f64, v: Option<f64>| *slot = v.unwrap_or(*slot);
        c.n_companies = self.synth_companies.unwrap_or(c.n_companies);
        c.seed = self.synth_seed.unwrap_or(c.seed);
        c.signal.placement = self.synth_signal_placement.unwrap_or(c.signal.placement);
        set(&mut c.support_ratio, self.synth_support_ratio);
        set(&mut c.signal.attr_coef, self.synth_signal_coef);
        set(&mut c.signal.concealed_share, self.synth_concealed_share);
        match &mut c.noise {
            NoiseSpec::Logistic { hidden_share, .. } => set(hidden_share, self.synth_hidden_share),
            _ if self.synth_hidden_share.is_some() => {
                return Err(Error::Config("synth_hidden_share applies only to the default noise".into()))
            }
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            mode: self.mode,
            seeds: self.seeds.clone(),
            meta_paths: self.meta_paths.clone(),
            parallel: self.parallel,
            kge: self.kge(),
            model: ModelConfig {
                layers: self.model_layers,
                hidden: self.model_hidden,
                head: self.model_head,
            },
            train: TrainConfig {
                learning_rate: self.train_learning_rate,
                max_epochs: self.train_max_epochs,
                patience: self.train_patience,
            },
            sieve: SieveConfig {
                beta: self.sieve_beta,
                warmup_fraction: self.sieve_warmup,
                confidence: self.sieve_confidence,
            },
            transition: TransitionConfig {
                hidden: self.transition_hidden,
                epochs: self.transition_epochs,
                learning_rate: self.transition_learning_rate,
                ..TransitionConfig::default()
            },
        }
    }

    pub fn kge(&self) -> KgeConfig {
        KgeConfig {
            dim: self.kge_dim,
            learning_rate: self.kge_learning_rate,
            margin: self.kge_margin,
            negatives_per_positive: self.kge_negatives,
            max_steps: self.kge_steps,
            batch_size: self.kge_batch_size,
            norm: self.kge_norm,
            seed: self.kge_seed,
        }
    }
}
