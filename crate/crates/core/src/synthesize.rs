//! Synthetic dataset generation from clique estimates.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{FilterBank, ReportSet};
use crate::error::{Error, Result};
use crate::estimate::{estimate, flatten, AttributeCluster, EstimateOptions, JointDistribution, Method};
use crate::reduce::JunctionTree;
use crate::rng::StreamFactory;
use crate::schema::Dataset;

/// One sampling step: draw the clique's unassigned attributes given the ones
/// already drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub clique: usize,
    pub cluster: AttributeCluster,
    /// Attributes of the clique sampled by earlier steps.
    pub given: Vec<usize>,
    /// Attributes this step assigns.
    pub draws: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub steps: Vec<PlanStep>,
    /// Index of the first step of each connected component.
    pub component_starts: Vec<usize>,
}

/// Breadth-first traversal of every tree component from a random root.
pub fn plan<R: Rng + ?Sized>(tree: &JunctionTree, rng: &mut R) -> SynthesisPlan {
    let l = tree.cliques.len();
    let mut component = vec![usize::MAX; l];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for start in 0..l {
        if component[start] != usize::MAX {
            continue;
        }
        let id = members.len();
        let mut stack = vec![start];
        let mut group = Vec::new();
        component[start] = id;
        while let Some(c) = stack.pop() {
            group.push(c);
            for n in tree.neighbors(c) {
                if component[n] == usize::MAX {
                    component[n] = id;
                    stack.push(n);
                }
            }
        }
        group.sort_unstable();
        members.push(group);
    }

    let d = tree.dimensions();
    let mut assigned = vec![false; d];
    let mut steps = Vec::with_capacity(l);
    let mut component_starts = Vec::with_capacity(members.len());
    for group in &members {
        component_starts.push(steps.len());
        let root = group[rng.gen_range(0..group.len())];
        let mut seen = vec![false; l];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(c) = queue.pop_front() {
            let cluster = tree.cliques[c].clone();
            let (given, draws): (Vec<usize>, Vec<usize>) = cluster.indices().iter().partition(|&&j| assigned[j]);
            for &j in &draws {
                assigned[j] = true;
            }
            steps.push(PlanStep { clique: c, cluster, given, draws });
            for n in tree.neighbors(c) {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    SynthesisPlan { steps, component_starts }
}

/// Distribution of the attributes of `joint` not named in `given`, row-major
/// in cluster order, conditioned on the `(attribute, value)` pairs. A slice
/// with no mass falls back to the marginal of those attributes.
pub fn conditional_from_joint(joint: &JointDistribution, given: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut fixed = vec![None; joint.cluster.len()];
    for &(attr, value) in given {
        let pos = joint
            .cluster
            .position(attr)
            .ok_or_else(|| Error::Shape(format!("attribute {attr} is not in cluster {:?}", joint.cluster.indices())))?;
        if value >= joint.cardinalities[pos] {
            return Err(Error::Shape(format!("value {value} out of range for attribute {attr}")));
        }
        fixed[pos] = Some(value);
    }
    let free: Vec<usize> = (0..fixed.len()).filter(|&p| fixed[p].is_none()).collect();
    let free_cards: Vec<usize> = free.iter().map(|&p| joint.cardinalities[p]).collect();
    let mut slice = vec![0.0; free_cards.iter().product()];
    let mut marginal = vec![0.0; slice.len()];
    for (flat, &p) in joint.probs.iter().enumerate() {
        let digits = joint.digits(flat);
        let sub: Vec<usize> = free.iter().map(|&q| digits[q]).collect();
        let k = flatten(&sub, &free_cards);
        marginal[k] += p;
        if fixed.iter().zip(&digits).all(|(f, &v)| f.is_none_or(|x| x == v)) {
            slice[k] += p;
        }
    }
    let chosen = if slice.iter().sum::<f64>() > 0.0 { slice } else { marginal };
    let total: f64 = chosen.iter().sum();
    if !(total > 0.0) {
        let n = chosen.len() as f64;
        return Ok(vec![1.0 / n; chosen.len()]);
    }
    Ok(chosen.into_iter().map(|p| p / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub method: Method,
    pub n_out: usize,
    pub seed: u64,
    /// Echoed into the metadata when known.
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetadata {
    pub f: f64,
    pub phi: Option<f64>,
    pub method: Method,
    pub seed: u64,
    pub n_out: usize,
    pub source_reports: usize,
    pub schema_digest: String,
    pub plan: SynthesisPlan,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub metadata: SynthesisMetadata,
    /// Clique estimates in clique order.
    pub clique_estimates: Vec<JointDistribution>,
}

/// Cumulative conditional tables of one step, one row per assignment of the
/// given attributes.
struct StepSampler {
    given: Vec<usize>,
    given_cards: Vec<usize>,
    draws: Vec<usize>,
    draw_cards: Vec<usize>,
    cdfs: Vec<Vec<f64>>,
}

impl StepSampler {
    fn new(step: &PlanStep, joint: &JointDistribution) -> Result<Self> {
        let card = |j: usize| joint.cardinalities[joint.cluster.position(j).expect("attribute in clique")];
        let given_cards: Vec<usize> = step.given.iter().map(|&j| card(j)).collect();
        let draw_cards: Vec<usize> = step.draws.iter().map(|&j| card(j)).collect();
        let rows: usize = given_cards.iter().product();
        let mut cdfs = Vec::with_capacity(rows);
        for r in 0..rows {
            let values = crate::estimate::unflatten(r, &given_cards);
            let given: Vec<(usize, usize)> = step.given.iter().copied().zip(values).collect();
            let probs = conditional_from_joint(joint, &given)?;
            let mut acc = 0.0;
            cdfs.push(
                probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect(),
            );
        }
        Ok(StepSampler { given: step.given.clone(), given_cards, draws: step.draws.clone(), draw_cards, cdfs })
    }

    fn sample<R: Rng + ?Sized>(&self, row: &mut [usize], rng: &mut R) {
        let key: Vec<usize> = self.given.iter().map(|&j| row[j]).collect();
        let cdf = &self.cdfs[flatten(&key, &self.given_cards)];
        let u: f64 = rng.gen::<f64>() * cdf.last().copied().unwrap_or(1.0);
        let mut k = cdf.partition_point(|&c| c <= u);
        if k >= cdf.len() {
            // rounding at the top end; take the last cell with mass
            k = (0..cdf.len()).rev().find(|&i| i == 0 || cdf[i] > cdf[i - 1]).unwrap_or(0);
        }
        let digits = crate::estimate::unflatten(k, &self.draw_cards);
        for (&j, v) in self.draws.iter().zip(digits) {
            row[j] = v;
        }
    }
}

/// Estimates every clique once, then samples `n_out` rows by walking the plan,
/// each row with its own random stream.
pub fn synthesize(
    reports: &ReportSet,
    bank: &FilterBank,
    tree: &JunctionTree,
    config: &SynthesisConfig,
    opts: &EstimateOptions,
) -> Result<SyntheticDataset> {
    if config.n_out == 0 {
        return Err(Error::InvalidParameter("requested row count must be at least 1".into()));
    }
    let schema = reports.schema();
    let d = schema.dimensions();
    tree.validate(d)?;
    let estimates: Vec<_> = tree
        .cliques
        .par_iter()
        .map(|c| {
            estimate(config.method, reports, bank, c, opts).map_err(|e| match e {
                Error::Estimation { .. } => e,
                other => Error::Estimation { cluster: c.indices().to_vec(), message: other.to_string() },
            })
        })
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    for (c, e) in tree.cliques.iter().zip(&estimates) {
        for w in &e.diagnostics.warnings {
            warnings.push(format!("clique {:?}: {w}", c.indices()));
        }
    }
    let joints: Vec<JointDistribution> = estimates.into_iter().map(|e| e.distribution).collect();

    let plan = plan(tree, &mut StreamFactory::new(config.seed, "synthesis-plan").stream(0));
    let samplers: Vec<StepSampler> =
        plan.steps.iter().map(|s| StepSampler::new(s, &joints[s.clique])).collect::<Result<_>>()?;
    let streams = StreamFactory::new(config.seed, "synthesis-rows");
    let rows: Vec<Vec<usize>> = (0..config.n_out)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(i as u64);
            let mut row = vec![0; d];
            for s in &samplers {
                s.sample(&mut row, &mut rng);
            }
            row
        })
        .collect();
    let dataset = Dataset::new(schema.clone(), rows)?;
    let metadata = SynthesisMetadata {
        f: reports.flip_probability(),
        phi: config.phi,
        method: config.method,
        seed: config.seed,
        n_out: config.n_out,
        source_reports: reports.len(),
        schema_digest: schema.digest(),
        plan,
        warnings,
    };
    Ok(SyntheticDataset { dataset, metadata, clique_estimates: joints })
}
