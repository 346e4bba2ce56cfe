//! Two-branch meta-path GCN with hierarchical attention fusion.

mod checkpoint;
mod layers;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{CsrMatrix, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use layers::{
    attention_var, check_normalized, classify, classify_var, embedding_attention, mwgcn_layer, mwgcn_var,
    relation_attention, weighted_sum, Activation, AttentionParams, ClassifierParams, Head,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ke,
    Att,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ke => "ke",
            Branch::Att => "att",
        }
    }
}

/// Named ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    WoKe,
    WoAttr,
    WoAttn,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::WoKe, Ablation::WoAttr, Ablation::WoAttn];

    pub fn flags(self) -> ModeFlags {
        let all = ModeFlags {
            knowledge: true,
            attributes: true,
            attention: true,
        };
        match self {
            Ablation::Full => all,
            Ablation::WoKe => ModeFlags { knowledge: false, ..all },
            Ablation::WoAttr => ModeFlags { attributes: false, ..all },
            Ablation::WoAttn => ModeFlags { attention: false, ..all },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoKe => "wo_ke",
            Ablation::WoAttr => "wo_attr",
            Ablation::WoAttn => "wo_attn",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (full, wo_ke, wo_attr, wo_attn)")))
    }
}

/// Which branches run and whether fusion uses attention or a plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub knowledge: bool,
    pub attributes: bool,
    pub attention: bool,
}

impl ModeFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.knowledge && !self.attributes {
            return Err(Error::Config("mode disables both input branches".into()));
        }
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.knowledge {
            out.push(Branch::Ke);
        }
        if self.attributes {
            out.push(Branch::Att);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// MW-GCN layers per stack.
    pub layers: usize,
    /// Width of every layer output.
    pub hidden: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 1000,
            head: Head::Sigmoid,
        }
    }
}

/// Input widths and meta-path count a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_att: usize,
    pub d_ke: usize,
    pub meta_paths: usize,
}

/// Normalized meta-path weights and the two input matrices.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub subgraphs: Vec<Arc<CsrMatrix<f64>>>,
    pub x_att: Tensor,
    pub x_ke: Tensor,
}

impl ModelInputs {
    pub fn new(subgraphs: Vec<Arc<CsrMatrix<f64>>>, x_att: Tensor, x_ke: Tensor) -> Result<Self> {
        for g in &subgraphs {
            check_normalized(g)?;
        }
        Ok(Self { subgraphs, x_att, x_ke })
    }

    pub fn company_count(&self) -> usize {
        self.subgraphs.first().map_or(self.x_att.rows(), |g| g.rows())
    }

    fn input(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Ke => &self.x_ke,
            Branch::Att => &self.x_att,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// `[branch][meta-path][layer]` parameter indices.
    stacks: Vec<Vec<Vec<usize>>>,
    /// Relation-attention `(w, b)` per branch.
    relation: Vec<(usize, usize)>,
    embedding: Option<(usize, usize)>,
    pred: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeModel {
    config: ModelConfig,
    flags: ModeFlags,
    shape: ModelShape,
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Handles into a tape holding one forward pass.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub params: Vec<Var>,
    pub y_hat: Var,
    pub z: Var,
    /// Per branch, per meta-path representation after the last layer.
    pub stack_outputs: Vec<Vec<Var>>,
    pub relation_weights: Vec<Option<Var>>,
    pub branch_weights: Option<Var>,
}

/// Attention weights and the fused representation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub branches: Vec<Branch>,
    /// Per branch, the meta-path weights; `None` under plain-sum fusion.
    pub relation_weights: Vec<Option<Vec<f64>>>,
    /// Branch weights in `branches` order; `None` under plain-sum fusion.
    pub branch_weights: Option<Vec<f64>>,
    pub z: Tensor,
}

impl KeModel {
    pub fn new(config: ModelConfig, flags: ModeFlags, shape: ModelShape, seed: u64) -> Result<Self> {
        flags.validate()?;
        if config.layers == 0 {
            return Err(Error::Config("model needs at least one MW-GCN layer".into()));
        }
        if config.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if shape.meta_paths == 0 {
            return Err(Error::Config("model needs at least one meta-path".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
            params.len() - 1
        };
        let d = config.hidden;
        let branches = flags.branches();
        let mut stacks = Vec::new();
        for &b in &branches {
            let d_in = match b {
                Branch::Ke => shape.d_ke,
                Branch::Att => shape.d_att,
            };
            let mut per_path = Vec::new();
            for k in 0..shape.meta_paths {
                let mut layers = Vec::new();
                for l in 0..config.layers {
                    let rows = if l == 0 { d_in } else { d };
                    layers.push(push(format!("{}.mp{k}.layer{l}", b.name()), Tensor::glorot(rows, d, &mut rng)));
                }
                per_path.push(layers);
            }
            stacks.push(per_path);
        }
        let mut relation = Vec::new();
        if flags.attention {
            for &b in &branches {
                let w = push(format!("{}.rel_w", b.name()), Tensor::glorot(d, 1, &mut rng));
                let bias = push(format!("{}.rel_b", b.name()), Tensor::zeros(1, 1));
                relation.push((w, bias));
            }
        }
        let embedding = (flags.attention && branches.len() == 2).then(|| {
            let w = push("emb_w".into(), Tensor::glorot(d, 1, &mut rng));
            let b = push("emb_b".into(), Tensor::zeros(1, 1));
            (w, b)
        });
        // zero classifier weights: every node starts at the same score
        let pred = (
            push("pred_w".into(), Tensor::zeros(d, 2)),
            push("pred_b".into(), Tensor::zeros(1, 2)),
        );
        Ok(Self {
            config,
            flags,
            shape,
            seed,
            names,
            params,
            layout: Layout {
                stacks,
                relation,
                embedding,
                pred,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flags(&self) -> ModeFlags {
        self.flags
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        for ((new, old), name) in params.iter().zip(&self.params).zip(&self.names) {
            if new.shape() != old.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        if inputs.subgraphs.len() != self.shape.meta_paths {
            return Err(Error::Dimension(format!(
                "{} subgraphs given, model expects {}",
                inputs.subgraphs.len(),
                self.shape.meta_paths
            )));
        }
        let n = inputs.company_count();
        for g in &inputs.subgraphs {
            if g.rows() != n || g.cols() != n {
                return Err(Error::Dimension(format!("subgraph is {}x{}, expected {n}x{n}", g.rows(), g.cols())));
            }
        }
        for b in self.flags.branches() {
            let x = inputs.input(b);
            let width = match b {
                Branch::Ke => self.shape.d_ke,
                Branch::Att => self.shape.d_att,
            };
            if x.shape() != [n, width] {
                return Err(Error::Dimension(format!(
                    "{} input is {:?}, expected [{n}, {width}]",
                    b.name(),
                    x.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass with parameters as trainable leaves (or constants).
    pub fn build(&self, tape: &mut Tape, inputs: &ModelInputs, trainable: bool) -> Result<ModelGraph> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.build_with(tape, inputs, params)
    }

    /// Records a forward pass over caller-supplied parameter variables.
    pub fn build_with(&self, tape: &mut Tape, inputs: &ModelInputs, params: Vec<Var>) -> Result<ModelGraph> {
        self.check_inputs(inputs)?;
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameter variables, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        let branches = self.flags.branches();
        let mut stack_outputs = Vec::new();
        let mut relation_weights = Vec::new();
        let mut branch_z = Vec::new();
        for (bi, &b) in branches.iter().enumerate() {
            let x = tape.constant(inputs.input(b).clone())?;
            let mut outs = Vec::new();
            for (k, layers) in self.layout.stacks[bi].iter().enumerate() {
                let mut h = x;
                for &li in layers {
                    h = mwgcn_var(tape, h, &inputs.subgraphs[k], params[li], Activation::Relu)?;
                }
                outs.push(h);
            }
            let (z, a) = if self.flags.attention {
                let (w, bias) = self.layout.relation[bi];
                let (z, a) = attention_var(tape, &outs, params[w], params[bias])?;
                (z, Some(a))
            } else {
                (weighted_sum(tape, &outs, None)?, None)
            };
            stack_outputs.push(outs);
            relation_weights.push(a);
            branch_z.push(z);
        }
        let (z, branch_weights) = match (branch_z.len(), self.layout.embedding) {
            (1, _) => (branch_z[0], None),
            (_, Some((w, b))) => {
                let (z, a) = attention_var(tape, &branch_z, params[w], params[b])?;
                (z, Some(a))
            }
            _ => (weighted_sum(tape, &branch_z, None)?, None),
        };
        let (pw, pb) = self.layout.pred;
        let y_hat = classify_var(tape, z, params[pw], params[pb], self.config.head)?;
        Ok(ModelGraph {
            params,
            y_hat,
            z,
            stack_outputs,
            relation_weights,
            branch_weights,
        })
    }

    pub fn trace(&self, tape: &Tape, graph: &ModelGraph) -> FusionTrace {
        let branches = self.flags.branches();
        let branch_weights = match graph.branch_weights {
            Some(a) => Some(tape.value(a).data().to_vec()),
            None if self.flags.attention => Some(vec![1.0]),
            None => None,
        };
        FusionTrace {
            branches,
            relation_weights: graph
                .relation_weights
                .iter()
                .map(|a| a.map(|a| tape.value(a).data().to_vec()))
                .collect(),
            branch_weights,
            z: tape.value(graph.z).clone(),
        }
    }
}

/// Class scores `N×2` (non-fraud, fraud) and the fusion trace.
pub fn forward(model: &KeModel, inputs: &ModelInputs) -> Result<(Tensor, FusionTrace)> {
    let mut tape = Tape::new();
    let graph = model.build(&mut tape, inputs, false)?;
    let trace = model.trace(&tape, &graph);
    Ok((tape.value(graph.y_hat).clone(), trace))
}

#[cfg(test)]
mod tests;
