//! Synthetic financial knowledge graphs with planted fraud signal and
//! hidden-fraud label noise, plus the ground truth behind them.

mod truth;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    company_entity_key, company_meta_key, Fkg, FkgBuilder, SAME_COMPANY_AS, SAME_PERSON_AS,
};
use crate::metapath::{build_company_subgraph, sum_up_graph, MetaPathSpec, HAS_DSE, PARTY_TO};
use crate::numeric::CsrMatrix;

pub use truth::{write_dataset, write_ground_truth, GroundTruth, TruthRecord};

/// Share of support nodes that are director/supervisor/executive records; the rest are transactions.
const DSE_SHARE: f64 = 0.7;
const DSE_ATTRS: usize = 4;
const RPT_ATTRS: usize = 2;
const LEVELS: usize = 5;
const MAX_SPAN: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalPlacement {
    /// Company attribute columns only.
    Company,
    /// Categorical attributes of directors and transactions only.
    Support,
    Both,
}

impl SignalPlacement {
    fn company(self) -> bool {
        matches!(self, SignalPlacement::Company | SignalPlacement::Both)
    }

    fn support(self) -> bool {
        matches!(self, SignalPlacement::Support | SignalPlacement::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    pub placement: SignalPlacement,
    /// Share of firms drawn from the risky mixture component.
    pub risky_share: f64,
    /// Share of risky firms whose shift sits on the concealment half of the latent coordinates.
    pub concealed_share: f64,
    /// Latent coordinates; a risky firm is shifted by `2·shift` on one half of them.
    pub dims: usize,
    pub shift: f64,
    /// Logit weight on the mean latent coordinate.
    pub attr_coef: f64,
    /// Logit weight on the fraction of fraudulent neighbors.
    pub neighbor_coef: f64,
    /// How strongly latent coordinates tilt support-node attribute levels.
    pub support_tilt: f64,
    /// Probability that a transaction's second party is picked from the same mixture component.
    pub assortativity: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            placement: SignalPlacement::Both,
            risky_share: 0.2,
            concealed_share: 0.5,
            dims: 8,
            shift: 1.0,
            attr_coef: 4.0,
            neighbor_coef: 2.0,
            support_tilt: 1.0,
            assortativity: 0.5,
        }
    }
}

/// Probability that a fraud is recorded as non-fraud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// `σ(b + attr_coef·c + neighbor_coef·fraud_neighbors)` with `b` set so the mean
    /// over frauds equals `hidden_share`; `c` is the concealment index, the mean of the
    /// second half of the latent coordinates minus the mean of the first half.
    Logistic {
        hidden_share: f64,
        attr_coef: f64,
        neighbor_coef: f64,
    },
    /// `high` with at least `threshold` fraudulent neighbors, `low` otherwise.
    TwoRegime { high: f64, low: f64, threshold: usize },
    Constant { probability: f64 },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Logistic {
            hidden_share: 0.3,
            attr_coef: 1.0,
            neighbor_coef: 0.5,
        }
    }
}

/// Years between violation and declaration: 0 with probability `zero_share`,
/// otherwise `1 + Geometric`, with the ratio set so `P(gap > 8) = exceed8_share`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSpec {
    pub zero_share: f64,
    pub exceed8_share: f64,
}

impl Default for GapSpec {
    fn default() -> Self {
        Self {
            zero_share: 0.30,
            exceed8_share: 0.022,
        }
    }
}

impl GapSpec {
    /// Continuation probability of the geometric tail.
    pub fn ratio(&self) -> f64 {
        (self.exceed8_share / (1.0 - self.zero_share)).powf(1.0 / 8.0)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.zero_share)
            || !(self.exceed8_share > 0.0 && self.exceed8_share < 1.0 - self.zero_share)
        {
            return Err(Error::Config(format!("gap distribution {self:?} is not feasible")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i32 {
        if rng.random::<f64>() < self.zero_share {
            return 0;
        }
        let q = self.ratio();
        let mut gap = 1;
        while rng.random::<f64>() < q {
            gap += 1;
        }
        gap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Company-year instances.
    pub n_companies: usize,
    pub year_start: i32,
    pub year_end: i32,
    /// Director and transaction records per company-year.
    pub support_ratio: f64,
    pub d_att: usize,
    pub fraud_base_rate: f64,
    pub signal: SignalSpec,
    pub noise: NoiseSpec,
    pub gap: GapSpec,
    /// Per-attribute missing rate on support nodes.
    pub missing_rate: f64,
    /// Per-cell missing rate in the company attribute table.
    pub company_missing_rate: f64,
    /// Probability that a director also sits on another board that year.
    pub interlock: f64,
    /// Probability that a transaction has a second listed party.
    pub rpt_pair: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_companies: 2000,
            year_start: 2003,
            year_end: 2020,
            support_ratio: 18.0,
            d_att: 32,
            fraud_base_rate: 1.0 / 7.87,
            signal: SignalSpec::default(),
            noise: NoiseSpec::default(),
            gap: GapSpec::default(),
            missing_rate: 0.5,
            company_missing_rate: 0.05,
            interlock: 0.1,
            rpt_pair: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Fraud signal only in director and transaction attributes.
    pub fn support_signal() -> Self {
        Self {
            signal: SignalSpec {
                placement: SignalPlacement::Support,
                ..SignalSpec::default()
            },
            ..Self::default()
        }
    }

    /// Flip probability 0.6 with two or more fraudulent neighbors, 0.1 otherwise.
    pub fn two_regime() -> Self {
        Self {
            noise: NoiseSpec::TwoRegime {
                high: 0.6,
                low: 0.1,
                threshold: 2,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_companies == 0 {
            return bad("n_companies must be positive".into());
        }
        if self.year_end < self.year_start {
            return bad(format!("year span {}..{} is empty", self.year_start, self.year_end));
        }
        if !(self.support_ratio >= 0.0 && self.support_ratio.is_finite()) {
            return bad("support_ratio must be non-negative".into());
        }
        if !(self.fraud_base_rate > 0.0 && self.fraud_base_rate < 1.0) {
            return bad("fraud_base_rate must lie in (0, 1)".into());
        }
        if self.signal.dims < 2 || self.d_att < self.signal.dims {
            return bad(format!(
                "d_att = {} cannot hold {} signal dims (at least 2)",
                self.d_att, self.signal.dims
            ));
        }
        for (name, p) in [
            ("missing_rate", self.missing_rate),
            ("company_missing_rate", self.company_missing_rate),
            ("interlock", self.interlock),
            ("rpt_pair", self.rpt_pair),
            ("signal.risky_share", self.signal.risky_share),
            ("signal.concealed_share", self.signal.concealed_share),
            ("signal.assortativity", self.signal.assortativity),
        ] {
            if !prob(p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        match self.noise {
            NoiseSpec::Logistic { hidden_share, .. } if !(hidden_share > 0.0 && hidden_share < 1.0) => {
                return bad(format!("hidden_share = {hidden_share} must lie in (0, 1)"));
            }
            NoiseSpec::TwoRegime { high, low, .. } if !prob(high) || !prob(low) => {
                return bad("two-regime flip probabilities must lie in [0, 1]".into());
            }
            NoiseSpec::Constant { probability } if !prob(probability) => {
                return bad("flip probability must lie in [0, 1]".into());
            }
            _ => {}
        }
        self.gap.validate()
    }
}

/// A generated graph (labels observed through the noise) and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub fkg: Fkg,
    pub truth: GroundTruth,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Level drawn from a softmax over `tilt·u·(l - centre)`.
fn tilted_level<R: Rng + ?Sized>(u: f64, tilt: f64, rng: &mut R) -> usize {
    let centre = (LEVELS - 1) as f64 / 2.0;
    let w: Vec<f64> = (0..LEVELS).map(|l| (tilt * u * (l as f64 - centre)).exp()).collect();
    let mut r = rng.random::<f64>() * w.iter().sum::<f64>();
    for (l, wl) in w.iter().enumerate() {
        if r < *wl {
            return l;
        }
        r -= wl;
    }
    LEVELS - 1
}

/// Bisection for the root of an increasing function on `[lo, hi]`.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Layout {
    /// `(firm, year)` per company-year, in company-index order.
    companies: Vec<(usize, i32)>,
    risky: Vec<bool>,
    /// Latent coordinates per company-year.
    latent: Vec<Vec<f64>>,
    concealment: Vec<f64>,
}

fn draw_layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let span_cap = MAX_SPAN.min(config.year_end - config.year_start + 1);
    let mut companies = Vec::with_capacity(config.n_companies);
    let mut firm_risky = Vec::new();
    let mut firm_concealed = Vec::new();
    while companies.len() < config.n_companies {
        let firm = firm_risky.len();
        firm_risky.push(rng.random::<f64>() < config.signal.risky_share);
        firm_concealed.push(rng.random::<f64>() < config.signal.concealed_share);
        let span = rng.random_range(1..=span_cap);
        let start = rng.random_range(config.year_start..=config.year_end - span + 1);
        for year in start..start + span {
            if companies.len() < config.n_companies {
                companies.push((firm, year));
            }
        }
    }
    let risky: Vec<bool> = companies.iter().map(|(f, _)| firm_risky[*f]).collect();
    let k = config.signal.dims;
    let half = k / 2;
    let latent: Vec<Vec<f64>> = companies
        .iter()
        .map(|(f, _)| {
            let shifted = |j: usize| firm_risky[*f] && ((j >= half) == firm_concealed[*f]);
            (0..k)
                .map(|j| normal(rng) + if shifted(j) { 2.0 * config.signal.shift } else { 0.0 })
                .collect()
        })
        .collect();
    let concealment = latent
        .iter()
        .map(|u| u[half..].iter().sum::<f64>() / (k - half) as f64 - u[..half].iter().sum::<f64>() / half as f64)
        .collect();
    Layout {
        companies,
        risky,
        latent,
        concealment,
    }
}

fn firm_key(firm: usize) -> String {
    format!("F{firm:05}")
}

fn populate(config: &SynthConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Result<FkgBuilder> {
    let d = config.d_att;
    let k = config.signal.dims;
    let names = (0..d).map(|j| format!("f_{j}")).collect();
    let mut b = FkgBuilder::new(names);
    for (i, (firm, year)) in layout.companies.iter().enumerate() {
        let row: Vec<Option<f64>> = (0..d)
            .map(|j| {
                let v = if j < k && config.signal.placement.company() {
                    layout.latent[i][j]
                } else {
                    normal(rng)
                };
                (rng.random::<f64>() >= config.company_missing_rate).then_some(v)
            })
            .collect();
        b.add_company(&firm_key(*firm), *year, &row)?;
    }
    for (firm, year) in &layout.companies {
        let ck = firm_key(*firm);
        b.add_triple(&company_entity_key(&ck, *year), SAME_COMPANY_AS, &company_meta_key(&ck))?;
    }

    let n = layout.companies.len();
    let mut by_year: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, (_, y)) in layout.companies.iter().enumerate() {
        by_year.entry(*y).or_default().push(i);
    }
    let company_key = |i: usize| {
        let (f, y) = layout.companies[i];
        company_entity_key(&firm_key(f), y)
    };
    // coordinate that tilts a support attribute: latent when the signal is placed there, noise otherwise
    let driver = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
        if config.signal.placement.support() {
            layout.latent[i][j % k]
        } else {
            normal(rng)
        }
    };

    let support = (config.support_ratio * n as f64).round() as usize;
    let n_dse = (support as f64 * DSE_SHARE).round() as usize;
    let n_rpt = support - n_dse;

    let mut seats = vec![0usize; n];
    for _ in 0..n_dse {
        let i = rng.random_range(0..n);
        let (firm, year) = layout.companies[i];
        // a seat index persists across the years of a firm, so it names the same person
        let person = format!("P{}_{}", firm_key(firm), seats[i]);
        seats[i] += 1;
        let dse = format!("dse:{person}@{year}");
        b.add_triple(&company_key(i), HAS_DSE, &dse)?;
        b.add_triple(&dse, SAME_PERSON_AS, &format!("dse_meta:{person}"))?;
        if rng.random::<f64>() < config.interlock {
            let peers = &by_year[&year];
            if peers.len() > 1 {
                let mut other = peers[rng.random_range(0..peers.len())];
                while other == i {
                    other = peers[rng.random_range(0..peers.len())];
                }
                b.add_triple(&company_key(other), HAS_DSE, &dse)?;
            }
        }
        for j in 0..DSE_ATTRS {
            let u = driver(i, j, rng);
            let level = tilted_level(u, config.signal.support_tilt, rng);
            if rng.random::<f64>() >= config.missing_rate {
                b.add_triple(&dse, &format!("dse_a{j}"), &format!("attr:dse_a{j}_{level}"))?;
            }
        }
    }

    for t in 0..n_rpt {
        let i = rng.random_range(0..n);
        let year = layout.companies[i].1;
        let rpt = format!("rpt:T{t:06}@{year}");
        b.add_triple(&company_key(i), PARTY_TO, &rpt)?;
        let peers = &by_year[&year];
        if rng.random::<f64>() < config.rpt_pair && peers.len() > 1 {
            let same_type = rng.random::<f64>() < config.signal.assortativity;
            let candidates: Vec<usize> = peers
                .iter()
                .copied()
                .filter(|&p| p != i && (!same_type || layout.risky[p] == layout.risky[i]))
                .collect();
            if !candidates.is_empty() {
                let other = candidates[rng.random_range(0..candidates.len())];
                b.add_triple(&company_key(other), PARTY_TO, &rpt)?;
            }
        }
        for j in 0..RPT_ATTRS {
            let u = driver(i, DSE_ATTRS + j, rng);
            let level = tilted_level(u, config.signal.support_tilt, rng);
            if rng.random::<f64>() >= config.missing_rate {
                b.add_triple(&rpt, &format!("rpt_a{j}"), &format!("attr:rpt_a{j}_{level}"))?;
            }
        }
    }
    Ok(b)
}

/// Company graph used for fraud-neighbor statistics: the sum of the three built-in meta-paths.
pub fn neighbor_graph(fkg: &Fkg) -> Result<Arc<CsrMatrix<f64>>> {
    let subgraphs = MetaPathSpec::predefined()
        .iter()
        .map(|s| build_company_subgraph(fkg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_up_graph(&subgraphs)?.normalized().clone())
}

/// Count of neighbors with label 1 per company.
pub fn fraud_neighbor_counts(graph: &CsrMatrix<f64>, labels: &[u8]) -> Vec<usize> {
    (0..graph.rows())
        .map(|v| graph.row(v).filter(|(u, _)| labels[*u] == 1).count())
        .collect()
}

fn fraud_fractions(graph: &CsrMatrix<f64>, labels: &[u8]) -> Vec<f64> {
    (0..graph.rows())
        .map(|v| {
            let deg = graph.row_nnz(v);
            if deg == 0 {
                0.0
            } else {
                graph.row(v).filter(|(u, _)| labels[*u] == 1).count() as f64 / deg as f64
            }
        })
        .collect()
}

/// Builds the graph and draws clean labels. Observed labels equal the clean ones;
/// frauds carry a declaration in their own year until noise is injected.
pub fn generate_fkg(config: &SynthConfig) -> Result<(Fkg, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = draw_layout(config, &mut rng);
    let fkg = populate(config, &layout, &mut rng)?.build();
    let graph = neighbor_graph(&fkg)?;

    let n = layout.companies.len();
    let score: Vec<f64> = layout
        .latent
        .iter()
        .map(|u| u.iter().sum::<f64>() / u.len() as f64)
        .collect();
    let first: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let second: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let s = &config.signal;
    let draw = |c0: f64| -> Vec<u8> {
        let pass1: Vec<u8> = (0..n)
            .map(|v| u8::from(first[v] < sigmoid(c0 + s.attr_coef * score[v])))
            .collect();
        let frac = fraud_fractions(&graph, &pass1);
        (0..n)
            .map(|v| u8::from(second[v] < sigmoid(c0 + s.attr_coef * score[v] + s.neighbor_coef * frac[v])))
            .collect()
    };
    let rate = |labels: &[u8]| labels.iter().map(|&y| f64::from(y)).sum::<f64>() / n as f64;
    let c0 = bisect(-40.0, 40.0, |c| rate(&draw(c)) - config.fraud_base_rate);
    let clean = draw(c0);
    let achieved = rate(&clean);
    if (achieved - config.fraud_base_rate).abs() > 0.2 * config.fraud_base_rate {
        return Err(Error::Config(format!(
            "fraud rate {achieved:.4} misses the target {:.4} by more than 20%",
            config.fraud_base_rate
        )));
    }

    let records: Vec<TruthRecord> = layout
        .companies
        .iter()
        .zip(&clean)
        .map(|((firm, year), &y)| TruthRecord {
            company_key: firm_key(*firm),
            year: *year,
            clean_label: y,
            noisy_label: y,
            flip_prob: 0.0,
            violation_year: (y == 1).then_some(*year),
            declared_year: (y == 1).then_some(*year),
        })
        .collect();
    let truth = GroundTruth { records };
    let fkg = fkg.with_labels(truth.label_records())?;
    Ok((fkg, truth))
}

/// Hides each fraud with its flip probability and draws declaration gaps for the rest.
/// The latent coordinates are redrawn from `config.seed`, so `fkg` must come from
/// [`generate_fkg`] with the same config.
pub fn inject_hidden_fraud(
    truth: &GroundTruth,
    graph: &CsrMatrix<f64>,
    fkg: &Fkg,
    config: &SynthConfig,
) -> Result<GroundTruth> {
    config.validate()?;
    if truth.records.len() != fkg.company_count() || graph.rows() != fkg.company_count() {
        return Err(Error::Dimension("ground truth, graph and FKG disagree on company count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let clean: Vec<u8> = truth.records.iter().map(|r| r.clean_label).collect();
    let counts = fraud_neighbor_counts(graph, &clean);
    let layout = draw_layout(config, &mut ChaCha8Rng::seed_from_u64(config.seed));
    if layout.companies.len() != clean.len() {
        return Err(Error::Dimension("FKG was not generated from this config".into()));
    }

    let flip: Vec<f64> = match config.noise {
        NoiseSpec::Constant { probability } => vec![probability; clean.len()],
        NoiseSpec::TwoRegime { high, low, threshold } => {
            counts.iter().map(|&c| if c >= threshold { high } else { low }).collect()
        }
        NoiseSpec::Logistic {
            hidden_share,
            attr_coef,
            neighbor_coef,
        } => {
            let logit = |v: usize, b: f64| b + attr_coef * layout.concealment[v] + neighbor_coef * counts[v] as f64;
            let frauds: Vec<usize> = (0..clean.len()).filter(|&v| clean[v] == 1).collect();
            let b = if frauds.is_empty() {
                0.0
            } else {
                bisect(-40.0, 40.0, |b| {
                    frauds.iter().map(|&v| sigmoid(logit(v, b))).sum::<f64>() / frauds.len() as f64 - hidden_share
                })
            };
            (0..clean.len()).map(|v| sigmoid(logit(v, b))).collect()
        }
    };

    let records = truth
        .records
        .iter()
        .enumerate()
        .map(|(v, r)| {
            let mut out = r.clone();
            out.flip_prob = flip[v];
            if r.clean_label == 0 {
                out.noisy_label = 0;
                out.violation_year = None;
                out.declared_year = None;
                return out;
            }
            let hidden = rng.random::<f64>() < flip[v];
            let gap = config.gap.sample(&mut rng);
            out.noisy_label = u8::from(!hidden);
            out.violation_year = (!hidden).then_some(r.year);
            out.declared_year = (!hidden).then_some(r.year + gap);
            out
        })
        .collect();
    Ok(GroundTruth { records })
}

/// Generates a graph, injects hidden fraud and stores the observed labels in the graph.
pub fn synthesize(config: &SynthConfig) -> Result<SynthDataset> {
    let (fkg, clean) = generate_fkg(config)?;
    let graph = neighbor_graph(&fkg)?;
    let truth = inject_hidden_fraud(&clean, &graph, &fkg, config)?;
    let fkg = fkg.with_labels(truth.label_records())?;
    Ok(SynthDataset { fkg, truth })
}
