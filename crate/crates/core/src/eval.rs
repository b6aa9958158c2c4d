//! Metrics, planted-model data generators, and the end-to-end driver.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{privacy_epsilon, Encoder, FilterBank, ReportSet, DEFAULT_FALSE_POSITIVE};
use crate::error::{Error, Result};
use crate::estimate::{estimate, AttributeCluster, EstimateOptions, Method};
use crate::reduce::{
    build_dependency_graph, dependency_threshold, junction_tree, prune_pairs, table_mutual_information,
    DatasetKind, DependencyAnalysis, DependencyGraph, JunctionTree,
};
use crate::rng::StreamFactory;
use crate::schema::{AttributeDomain, Dataset, Schema};
use crate::synthesize::{synthesize, SynthesisConfig, SyntheticDataset};

/// Half the ℓ1 distance between two probability tables of equal shape.
pub fn avd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("tables have {} and {} cells", p.len(), q.len())));
    }
    for t in [p, q] {
        let total: f64 = t.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("table sums to {total}, not 1")));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0)
}

/// Pair-level agreement between an estimated and a true dependency graph.
///
/// `true_negative` counts edges of the truth missing from the estimate, that
/// is, false negatives in the usual terminology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRates {
    pub accuracy: f64,
    pub false_positive: f64,
    pub true_negative: f64,
}

pub fn correlation_rates(estimated: &DependencyGraph, truth: &DependencyGraph) -> Result<CorrelationRates> {
    let d = truth.dimensions();
    if estimated.dimensions() != d {
        return Err(Error::Shape(format!("graphs over {} and {d} attributes", estimated.dimensions())));
    }
    let total = d * d.saturating_sub(1) / 2;
    if total == 0 {
        return Ok(CorrelationRates { accuracy: 1.0, false_positive: 0.0, true_negative: 0.0 });
    }
    let (mut added, mut lost) = (0usize, 0usize);
    for a in 0..d {
        for b in a + 1..d {
            match (estimated.has_edge(a, b), truth.has_edge(a, b)) {
                (true, false) => added += 1,
                (false, true) => lost += 1,
                _ => {}
            }
        }
    }
    let t = total as f64;
    Ok(CorrelationRates {
        accuracy: (total - added - lost) as f64 / t,
        false_positive: added as f64 / t,
        true_negative: lost as f64 / t,
    })
}

/// Dependency graph of a dataset computed from its exact pairwise frequencies.
pub fn empirical_graph(data: &Dataset, phi: f64) -> DependencyGraph {
    let cards = data.schema().cardinalities();
    let d = cards.len();
    let mut g = DependencyGraph::empty(d, phi);
    for a in 0..d {
        for b in a + 1..d {
            let mi = table_mutual_information(&data.joint_frequencies(&[a, b]), cards[a], cards[b]);
            g.set_edge(a, b, mi >= dependency_threshold(cards[a], cards[b], phi));
        }
    }
    g
}

/// A group of attributes drawn jointly from an explicit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBlock {
    pub attributes: Vec<usize>,
    /// Row-major over `attributes` in the listed order.
    pub probs: Vec<f64>,
}

/// Disjoint blocks covering every attribute; attributes in different blocks
/// are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct PlantedModel {
    schema: Schema,
    blocks: Vec<PlantedBlock>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    schema: Schema,
    blocks: Vec<PlantedBlock>,
}

impl TryFrom<RawModel> for PlantedModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        PlantedModel::new(raw.schema, raw.blocks)
    }
}

impl From<PlantedModel> for RawModel {
    fn from(m: PlantedModel) -> Self {
        RawModel { schema: m.schema, blocks: m.blocks }
    }
}

/// Schema with attributes `a0, a1, …` and values `v0, v1, …`.
pub fn synthetic_schema(cards: &[usize]) -> Result<Schema> {
    Schema::new(
        cards
            .iter()
            .enumerate()
            .map(|(j, &c)| AttributeDomain::new(format!("a{j}"), (0..c).map(|v| format!("v{v}")).collect()))
            .collect::<Result<_>>()?,
    )
}

impl PlantedModel {
    pub fn new(schema: Schema, blocks: Vec<PlantedBlock>) -> Result<Self> {
        let d = schema.dimensions();
        let mut owner = vec![None; d];
        for (k, b) in blocks.iter().enumerate() {
            if b.attributes.is_empty() {
                return Err(Error::InvalidParameter(format!("block {k} is empty")));
            }
            for &j in &b.attributes {
                if j >= d {
                    return Err(Error::InvalidParameter(format!("block {k} names attribute {j} of {d}")));
                }
                if owner[j].replace(k).is_some() {
                    return Err(Error::InvalidParameter(format!("attribute {j} appears in two blocks")));
                }
            }
            let cells: usize = b.attributes.iter().map(|&j| schema.attribute(j).cardinality()).product();
            if b.probs.len() != cells {
                return Err(Error::Shape(format!("block {k} has {} probabilities for {cells} cells", b.probs.len())));
            }
            let total: f64 = b.probs.iter().sum();
            if b.probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("block {k} is not a normalized distribution")));
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::InvalidParameter(format!("attribute {j} belongs to no block")));
        }
        Ok(PlantedModel { schema, blocks })
    }

    /// Random model: each group mixes independent random marginals with a
    /// shared latent copy (`value_j = z mod |Ω_j|`, `z` uniform) at weight
    /// `coupling`. Attributes outside every group get random marginals.
    pub fn random(cards: &[usize], groups: &[Vec<usize>], coupling: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&coupling) {
            return Err(Error::InvalidParameter(format!("coupling must lie in [0,1], got {coupling}")));
        }
        let schema = synthetic_schema(cards)?;
        let mut rng = StreamFactory::new(seed, "planted-model").stream(0);
        let mut marginal = |c: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let mut grouped = vec![false; cards.len()];
        let mut blocks = Vec::new();
        for g in groups {
            let gc: Vec<usize> = g.iter().map(|&j| cards.get(j).copied().unwrap_or(0)).collect();
            if gc.contains(&0) {
                return Err(Error::InvalidParameter(format!("group {g:?} names an unknown attribute")));
            }
            let margins: Vec<Vec<f64>> = gc.iter().map(|&c| marginal(c)).collect();
            let latent = *gc.iter().max().expect("non-empty group");
            let cells: usize = gc.iter().product();
            let mut probs = vec![0.0; cells];
            for (flat, p) in probs.iter_mut().enumerate() {
                let digits = crate::estimate::unflatten(flat, &gc);
                let indep: f64 = digits.iter().zip(&margins).map(|(&v, m)| m[v]).product();
                let copies = (0..latent).filter(|z| digits.iter().zip(&gc).all(|(&v, &c)| z % c == v)).count();
                *p = (1.0 - coupling) * indep + coupling * copies as f64 / latent as f64;
            }
            for &j in g {
                grouped[j] = true;
            }
            blocks.push(PlantedBlock { attributes: g.clone(), probs });
        }
        for (j, &c) in cards.iter().enumerate() {
            if !grouped[j] {
                blocks.push(PlantedBlock { attributes: vec![j], probs: marginal(c) });
            }
        }
        PlantedModel::new(schema, blocks)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn blocks(&self) -> &[PlantedBlock] {
        &self.blocks
    }

    /// Every pair inside a block of the model.
    pub fn truth_graph(&self, phi: f64) -> DependencyGraph {
        let mut g = DependencyGraph::empty(self.schema.dimensions(), phi);
        for b in &self.blocks {
            for (i, &a) in b.attributes.iter().enumerate() {
                for &c in &b.attributes[i + 1..] {
                    g.set_edge(a, c, true);
                }
            }
        }
        g
    }

    /// Draws `n` rows; row `i` uses its own stream.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let cdfs: Vec<(Vec<usize>, Vec<f64>)> = self
            .blocks
            .iter()
            .map(|b| {
                let cards = b.attributes.iter().map(|&j| self.schema.attribute(j).cardinality()).collect();
                let mut acc = 0.0;
                (
                    cards,
                    b.probs
                        .iter()
                        .map(|p| {
                            acc += p;
                            acc
                        })
                        .collect(),
                )
            })
            .collect();
        let streams = StreamFactory::new(seed, "planted-rows");
        let d = self.schema.dimensions();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = streams.stream(i as u64);
                let mut row = vec![0; d];
                for (b, (cards, cdf)) in self.blocks.iter().zip(&cdfs) {
                    let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
                    let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                    for (&j, v) in b.attributes.iter().zip(crate::estimate::unflatten(k, cards)) {
                        row[j] = v;
                    }
                }
                row
            })
            .collect();
        Dataset::new(self.schema.clone(), rows).expect("sampled rows are in range")
    }
}

/// Draws `n` i.i.d. rows from a planted model.
pub fn generate_synthetic_source(model: &PlantedModel, n: usize, seed: u64) -> Dataset {
    model.sample(n, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub f: f64,
    /// Bloom false-positive target.
    pub p: f64,
    pub phi: f64,
    pub method: Method,
    /// Entropy pruning mode; `None` tests every pair.
    pub prune: Option<DatasetKind>,
    pub seed: u64,
    /// Synthetic rows; defaults to the number of reports.
    pub n_out: Option<usize>,
    /// Fraction of source rows kept before encoding.
    pub sample_rate: f64,
    pub bit_caps: Option<Vec<usize>>,
    pub estimate: EstimateOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            f: 0.5,
            p: DEFAULT_FALSE_POSITIVE,
            phi: 0.4,
            method: Method::Hybrid,
            prune: None,
            seed: 0,
            n_out: None,
            sample_rate: 1.0,
            bit_caps: None,
            estimate: EstimateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueScore {
    pub cluster: Vec<usize>,
    /// Estimated clique table against the source frequencies.
    pub estimate_avd: f64,
    /// Synthetic frequencies against the source frequencies.
    pub synthetic_avd: f64,
}

/// Deterministic summary of one pipeline run. Wall-clock figures live in
/// [`StageTimings`] so equal seeds give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub records: usize,
    pub dimensions: usize,
    pub bits_per_report: usize,
    /// `None` when unbounded (`f = 0`).
    pub epsilon: Option<f64>,
    pub edges: Vec<(usize, usize)>,
    pub cliques: Vec<Vec<usize>>,
    pub clique_scores: Vec<CliqueScore>,
    pub marginal_avd: Vec<f64>,
    pub correlation: CorrelationRates,
    /// `planted` or `empirical`.
    pub truth: String,
    pub pairs_tested: usize,
    pub pairs_total: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode: f64,
    pub structure: f64,
    pub synthesize: f64,
    pub evaluate: f64,
    pub total: f64,
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub source: Dataset,
    pub bank: FilterBank,
    pub reports: ReportSet,
    pub dependencies: DependencyAnalysis,
    pub tree: JunctionTree,
    pub synthetic: SyntheticDataset,
    pub report: EvalReport,
    pub timings: StageTimings,
}

/// Keeps each row independently with probability `rate`.
pub fn subsample(data: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!("sample rate must lie in (0,1], got {rate}")));
    }
    if rate == 1.0 {
        return Ok(data.clone());
    }
    let mut rng = StreamFactory::new(seed, "subsample").stream(0);
    let rows = data.rows().iter().filter(|_| rng.gen::<f64>() < rate).cloned().collect();
    Dataset::new(data.schema().clone(), rows)
}

/// Encode, learn structure, synthesize and score against the source.
/// `truth` defaults to the exact dependency graph of the source rows.
pub fn run_pipeline(source: &Dataset, truth: Option<&DependencyGraph>, config: &PipelineConfig) -> Result<PipelineRun> {
    let started = Instant::now();
    let mut timings = StageTimings::default();
    let schema = source.schema();
    let d = schema.dimensions();

    let clock = Instant::now();
    let (data, bank, reports) = (|| {
        let data = subsample(source, config.sample_rate, config.seed)?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("no rows left to encode".into()));
        }
        let bank = FilterBank::build(schema, config.p, config.bit_caps.as_deref())?;
        let encoder = Encoder::new(schema.clone(), bank.clone(), config.f)?;
        let reports = encoder.encode_dataset(&data, config.p, config.seed)?;
        Ok((data, bank, reports))
    })()
    .map_err(|e| e.in_stage("encode"))?;
    timings.encode = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let (dependencies, tree) = (|| {
        let pruning = match config.prune {
            Some(kind) => Some(prune_pairs(&reports, &bank, config.phi, kind, config.method, &config.estimate)?),
            None => None,
        };
        let deps = build_dependency_graph(&reports, &bank, config.phi, config.method, &config.estimate, pruning)?;
        let tree = junction_tree(&deps.graph);
        Ok((deps, tree))
    })()
    .map_err(|e: Error| e.in_stage("structure"))?;
    timings.structure = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let synth_config = SynthesisConfig {
        method: config.method,
        n_out: config.n_out.unwrap_or(reports.len()),
        seed: config.seed,
        phi: Some(config.phi),
    };
    let synthetic =
        synthesize(&reports, &bank, &tree, &synth_config, &config.estimate).map_err(|e| e.in_stage("synthesize"))?;
    timings.synthesize = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let report = (|| {
        let mut clique_scores = Vec::with_capacity(tree.cliques.len());
        for (c, est) in tree.cliques.iter().zip(&synthetic.clique_estimates) {
            let src = data.joint_frequencies(c.indices());
            clique_scores.push(CliqueScore {
                cluster: c.indices().to_vec(),
                estimate_avd: avd(&est.probs, &src)?,
                synthetic_avd: avd(&synthetic.dataset.joint_frequencies(c.indices()), &src)?,
            });
        }
        let marginal_avd = (0..d)
            .map(|j| avd(&synthetic.dataset.joint_frequencies(&[j]), &data.joint_frequencies(&[j])))
            .collect::<Result<_>>()?;
        let (truth_graph, truth_label) = match truth {
            Some(g) => (g.clone(), "planted"),
            None => (empirical_graph(&data, config.phi), "empirical"),
        };
        let epsilon: f64 = bank.params().iter().map(|p| privacy_epsilon(1, p.h, config.f)).sum::<Result<f64>>()?;
        let mut warnings = dependencies.warnings.clone();
        warnings.extend(synthetic.metadata.warnings.iter().cloned());
        Ok(EvalReport {
            config: config.clone(),
            records: data.len(),
            dimensions: d,
            bits_per_report: reports.bits_per_report(),
            epsilon: epsilon.is_finite().then_some(epsilon),
            edges: dependencies.graph.edges(),
            cliques: tree.cliques.iter().map(|c| c.indices().to_vec()).collect(),
            clique_scores,
            marginal_avd,
            correlation: correlation_rates(&dependencies.graph, &truth_graph)?,
            truth: truth_label.to_string(),
            pairs_tested: dependencies.pruning.tested_pairs.len(),
            pairs_total: dependencies.pruning.pairs_total,
            warnings,
        })
    })()
    .map_err(|e: Error| e.in_stage("evaluate"))?;
    timings.evaluate = clock.elapsed().as_secs_f64();
    timings.total = started.elapsed().as_secs_f64();

    Ok(PipelineRun { source: data, bank, reports, dependencies, tree, synthetic, report, timings })
}

/// One point of a metric series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    /// `f` or `n`.
    pub axis: String,
    pub value: f64,
    pub method: Method,
    pub epsilon: Option<f64>,
    pub mean_clique_avd: f64,
    pub mean_marginal_avd: f64,
    pub accuracy: f64,
    pub false_positive: f64,
    pub true_negative: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Flip(Vec<f64>),
    /// Uses the first `n` source rows.
    Records(Vec<usize>),
}

/// Reruns the pipeline along one axis.
pub fn sweep(
    source: &Dataset,
    truth: Option<&DependencyGraph>,
    base: &PipelineConfig,
    axis: &SweepAxis,
) -> Result<Vec<SeriesRow>> {
    let points: Vec<(String, f64, PipelineConfig, Dataset)> = match axis {
        SweepAxis::Flip(fs) => fs
            .iter()
            .map(|&f| ("f".to_string(), f, PipelineConfig { f, ..base.clone() }, source.clone()))
            .collect(),
        SweepAxis::Records(ns) => ns
            .iter()
            .map(|&n| {
                let rows = source.rows()[..n.min(source.len())].to_vec();
                Ok(("n".to_string(), n as f64, base.clone(), Dataset::new(source.schema().clone(), rows)?))
            })
            .collect::<Result<_>>()?,
    };
    points
        .into_iter()
        .map(|(axis, value, config, data)| {
            let run = run_pipeline(&data, truth, &config)?;
            let r = &run.report;
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let clique: Vec<f64> = r.clique_scores.iter().map(|c| c.synthetic_avd).collect();
            Ok(SeriesRow {
                axis,
                value,
                method: config.method,
                epsilon: r.epsilon,
                mean_clique_avd: mean(&clique),
                mean_marginal_avd: mean(&r.marginal_avd),
                accuracy: r.correlation.accuracy,
                false_positive: r.correlation.false_positive,
                true_negative: r.correlation.true_negative,
                seconds: run.timings.total,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub f: f64,
    pub p: f64,
    pub ks: Vec<usize>,
    /// Random attribute combinations per `k`.
    pub combos: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub estimate: EstimateOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            f: 0.5,
            p: DEFAULT_FALSE_POSITIVE,
            ks: vec![2, 3],
            combos: 100,
            methods: vec![Method::Em, Method::Lasso, Method::Hybrid],
            seed: 0,
            estimate: EstimateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub k: usize,
    pub f: f64,
    pub n: usize,
    pub combos: usize,
    pub mean_avd: f64,
    pub mean_seconds: f64,
}

/// Estimation accuracy and time on random `k`-attribute combinations.
pub fn bench(source: &Dataset, config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let schema = source.schema();
    let d = schema.dimensions();
    let bank = FilterBank::build(schema, config.p, None)?;
    let reports = Encoder::new(schema.clone(), bank.clone(), config.f)?.encode_dataset(source, config.p, config.seed)?;
    let mut rng = StreamFactory::new(config.seed, "bench-combos").stream(0);
    let mut rows = Vec::new();
    for &k in &config.ks {
        if k == 0 || k > d {
            return Err(Error::InvalidParameter(format!("cluster size {k} outside 1..={d}")));
        }
        let combos: Vec<AttributeCluster> = (0..config.combos)
            .map(|_| AttributeCluster::new(sample(&mut rng, d, k).into_vec()))
            .collect::<Result<_>>()?;
        for &method in &config.methods {
            let (mut total_avd, mut total_secs) = (0.0, 0.0);
            for c in &combos {
                let clock = Instant::now();
                let est = estimate(method, &reports, &bank, c, &config.estimate)?;
                total_secs += clock.elapsed().as_secs_f64();
                total_avd += avd(&est.distribution.probs, &source.joint_frequencies(c.indices()))?;
            }
            let m = combos.len().max(1) as f64;
            rows.push(BenchRow {
                method,
                k,
                f: config.f,
                n: source.len(),
                combos: combos.len(),
                mean_avd: total_avd / m,
                mean_seconds: total_secs / m,
            });
        }
    }
    Ok(rows)
}

/// Comma-delimited rows with a header taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
