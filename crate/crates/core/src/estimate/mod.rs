//! Server-side joint distribution estimation over attribute clusters.

mod em;
mod lasso;

pub use em::{em_jd, em_jd_from};
pub use lasso::{lasso_jd, LassoProblem};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bits::Bits;
use crate::encode::{FilterBank, ReportSet};
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.001;
pub const DEFAULT_MAX_EM_ITER: usize = 10_000;
pub const DEFAULT_LAMBDA_GRID: usize = 10;

/// Sorted, duplicate-free attribute indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AttributeCluster(Vec<usize>);

impl AttributeCluster {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("attribute cluster is empty".into()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!("attribute cluster {indices:?} repeats an index")));
        }
        Ok(AttributeCluster(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn position(&self, j: usize) -> Option<usize> {
        self.0.binary_search(&j).ok()
    }
}

impl TryFrom<Vec<usize>> for AttributeCluster {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        AttributeCluster::new(v)
    }
}

impl From<AttributeCluster> for Vec<usize> {
    fn from(c: AttributeCluster) -> Self {
        c.0
    }
}

/// Per-bit sums over a cluster's segments and their debiased counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountVector {
    pub raw: Vec<f64>,
    pub debiased: Vec<f64>,
    pub n: usize,
    pub f: f64,
}

/// Sums each bit of the cluster's segments over all reports and corrects for
/// the flips: `y = (ŷ − fN/2) / (1 − f)`.
pub fn aggregate_counts(reports: &ReportSet, cluster: &AttributeCluster) -> Result<CountVector> {
    let f = reports.flip_probability();
    check_estimable(reports, cluster)?;
    let lengths: Vec<usize> = cluster.indices().iter().map(|&j| reports.header().params[j].m).collect();
    let mut raw = vec![0.0; lengths.iter().sum()];
    for i in 0..reports.len() {
        let mut offset = 0;
        for (&j, &m) in cluster.indices().iter().zip(&lengths) {
            let words = reports.segment_words(i, j);
            for b in 0..m {
                if words[b / 64] >> (b % 64) & 1 == 1 {
                    raw[offset + b] += 1.0;
                }
            }
            offset += m;
        }
    }
    let n = reports.len();
    let debiased = raw.iter().map(|&y| debias(y, n as f64, f)).collect();
    Ok(CountVector { raw, debiased, n, f })
}

pub(crate) fn debias(raw: f64, n: f64, f: f64) -> f64 {
    (raw - f * n / 2.0) / (1.0 - f)
}

/// Columns are concatenated filters of every value tuple, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatrix {
    pub columns: Vec<Bits>,
    pub rows: usize,
}

pub fn candidate_matrix(cluster: &AttributeCluster, bank: &FilterBank) -> Result<CandidateMatrix> {
    let cards: Vec<usize> = cluster.indices().iter().map(|&j| bank.filters(j).len()).collect();
    let cells: usize = cards.iter().product();
    let mut columns = Vec::with_capacity(cells);
    for flat in 0..cells {
        let digits = unflatten(flat, &cards);
        let parts: Vec<&Bits> = cluster.indices().iter().zip(&digits).map(|(&j, &v)| bank.filter(j, v)).collect();
        columns.push(Bits::concat(parts));
    }
    for a in 0..columns.len() {
        for b in a + 1..columns.len() {
            if columns[a] == columns[b] {
                return Err(Error::InvalidParameter(format!(
                    "candidate columns {a} and {b} coincide; re-salt the attribute filters"
                )));
            }
        }
    }
    let rows = cluster.indices().iter().map(|&j| bank.params()[j].m).sum();
    Ok(CandidateMatrix { columns, rows })
}

/// Probability of observing `observed` given the un-flipped candidate bits:
/// `1 − f/2` per agreeing bit, `f/2` per disagreeing bit.
pub fn report_likelihood(observed: &Bits, candidate: &Bits, f: f64) -> f64 {
    assert_eq!(observed.len(), candidate.len(), "segment lengths differ");
    let d = observed.hamming(candidate);
    bit_likelihood(observed.len(), d, f)
}

fn bit_likelihood(m: usize, mismatches: usize, f: f64) -> f64 {
    let half = f / 2.0;
    (1.0 - half).powi((m - mismatches) as i32) * half.powi(mismatches as i32)
}

/// Estimated probability table over a cluster, row-major in cluster order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub cluster: AttributeCluster,
    pub cardinalities: Vec<usize>,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(cluster: AttributeCluster, cardinalities: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if cardinalities.len() != cluster.len() {
            return Err(Error::Shape("one cardinality per clustered attribute".into()));
        }
        if probs.len() != cardinalities.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} probabilities for a {:?} table",
                probs.len(),
                cardinalities
            )));
        }
        Ok(JointDistribution { cluster, cardinalities, probs })
    }

    pub fn uniform(cluster: AttributeCluster, cardinalities: Vec<usize>) -> Self {
        let cells: usize = cardinalities.iter().product();
        JointDistribution { cluster, cardinalities, probs: vec![1.0 / cells as f64; cells] }
    }

    /// Clips negatives to zero and rescales to unit mass. Returns `false`
    /// (leaving the table untouched) when no positive mass remains.
    pub(crate) fn normalize(&mut self) -> bool {
        let total: f64 = self.probs.iter().map(|p| p.max(0.0)).sum();
        if !(total > 0.0) || !total.is_finite() {
            return false;
        }
        for p in &mut self.probs {
            *p = p.max(0.0) / total;
        }
        true
    }

    pub fn cells(&self) -> usize {
        self.probs.len()
    }

    pub fn digits(&self, flat: usize) -> Vec<usize> {
        unflatten(flat, &self.cardinalities)
    }

    pub fn flat_index(&self, digits: &[usize]) -> usize {
        flatten(digits, &self.cardinalities)
    }

    /// Sums out every attribute not in `keep` (attribute indices, any order).
    pub fn marginal(&self, keep: &[usize]) -> Result<JointDistribution> {
        let cluster = AttributeCluster::new(keep.to_vec())?;
        let positions: Vec<usize> = cluster
            .indices()
            .iter()
            .map(|&j| {
                self.cluster
                    .position(j)
                    .ok_or_else(|| Error::Shape(format!("attribute {j} is not in cluster {:?}", self.cluster.indices())))
            })
            .collect::<Result<_>>()?;
        let cards: Vec<usize> = positions.iter().map(|&p| self.cardinalities[p]).collect();
        let mut probs = vec![0.0; cards.iter().product()];
        for (flat, &p) in self.probs.iter().enumerate() {
            let digits = self.digits(flat);
            let sub: Vec<usize> = positions.iter().map(|&q| digits[q]).collect();
            probs[flatten(&sub, &cards)] += p;
        }
        JointDistribution::new(cluster, cards, probs)
    }
}

pub(crate) fn unflatten(mut flat: usize, cards: &[usize]) -> Vec<usize> {
    let mut digits = vec![0; cards.len()];
    for (d, &c) in digits.iter_mut().zip(cards).rev() {
        *d = flat % c;
        flat /= c;
    }
    digits
}

pub(crate) fn flatten(digits: &[usize], cards: &[usize]) -> usize {
    digits.iter().zip(cards).fold(0, |acc, (&d, &c)| acc * c + d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Em,
    Lasso,
    Hybrid,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Method::Em),
            "lasso" => Ok(Method::Lasso),
            "hybrid" | "lasso+em" => Ok(Method::Hybrid),
            other => Err(Error::InvalidParameter(format!("unknown estimation method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Em => "em",
            Method::Lasso => "lasso",
            Method::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    /// EM stops once no cell moves by more than this between iterations.
    pub delta: f64,
    pub max_em_iter: usize,
    pub lambda_grid: usize,
    pub solver_tol: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            delta: DEFAULT_DELTA,
            max_em_iter: DEFAULT_MAX_EM_ITER,
            lambda_grid: DEFAULT_LAMBDA_GRID,
            solver_tol: crate::solver::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub em_iterations: usize,
    pub em_converged: bool,
    /// Reports whose likelihood vanished under the current prior.
    pub skipped_reports: usize,
    /// Log-likelihood of the prior entering each EM iteration.
    pub log_likelihood: Vec<f64>,
    pub lambda: Option<f64>,
    pub solver_converged: Option<bool>,
    /// Candidates kept by the Lasso stage of the hybrid estimator.
    pub support: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub distribution: JointDistribution,
    pub diagnostics: Diagnostics,
}

/// Lasso estimate first, then EM restricted to the cells Lasso kept, started
/// from the Lasso table.
pub fn hybrid_jd(
    reports: &ReportSet,
    bank: &FilterBank,
    cluster: &AttributeCluster,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let initial = lasso_jd(reports, bank, cluster, opts)?;
    let support: Vec<usize> = (0..initial.distribution.cells())
        .filter(|&c| initial.distribution.probs[c] > 0.0)
        .collect();
    let mut lasso_diag = initial.diagnostics;
    if support.is_empty() {
        let mut out = em_jd(reports, bank, cluster, opts)?;
        out.diagnostics.warnings.push("empty Lasso support, fell back to full EM".into());
        return Ok(out);
    }
    let mut out = em_jd_from(reports, bank, cluster, opts, initial.distribution.probs.clone(), Some(&support))?;
    out.diagnostics.lambda = lasso_diag.lambda;
    out.diagnostics.solver_converged = lasso_diag.solver_converged;
    out.diagnostics.support = Some(support.len());
    lasso_diag.warnings.append(&mut out.diagnostics.warnings);
    out.diagnostics.warnings = lasso_diag.warnings;
    Ok(out)
}

pub fn estimate(
    method: Method,
    reports: &ReportSet,
    bank: &FilterBank,
    cluster: &AttributeCluster,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    match method {
        Method::Em => em_jd(reports, bank, cluster, opts),
        Method::Lasso => lasso_jd(reports, bank, cluster, opts),
        Method::Hybrid => hybrid_jd(reports, bank, cluster, opts),
    }
}

pub(crate) fn check_estimable(reports: &ReportSet, cluster: &AttributeCluster) -> Result<()> {
    let d = reports.schema().dimensions();
    if let Some(&j) = cluster.indices().iter().find(|&&j| j >= d) {
        return Err(Error::InvalidParameter(format!("attribute index {j} out of range for {d} attributes")));
    }
    Ok(())
}

pub(crate) fn check_inputs(reports: &ReportSet, bank: &FilterBank, cluster: &AttributeCluster) -> Result<()> {
    check_estimable(reports, cluster)?;
    let fail = |message: String| Error::Estimation { cluster: cluster.indices().to_vec(), message };
    if reports.is_empty() {
        return Err(fail("no reports".into()));
    }
    let f = reports.flip_probability();
    if !(0.0..1.0).contains(&f) {
        return Err(fail(format!("flip probability {f} carries no signal")));
    }
    if bank.segment_lengths() != reports.header().params.iter().map(|p| p.m).collect::<Vec<_>>() {
        return Err(fail("filter bank does not match the report layout".into()));
    }
    for &j in cluster.indices() {
        if bank.filters(j).len() < 2 {
            return Err(fail(format!("attribute {j} has a single candidate value")));
        }
    }
    Ok(())
}

/// Per-report, per-attribute quantities shared by the estimators: for every
/// clustered attribute, one row of `|Ω_j|` numbers per report.
pub(crate) struct ReportFeatures {
    pub cards: Vec<usize>,
    /// `values[t][i * cards[t] + v]`
    pub values: Vec<Vec<f64>>,
}

impl ReportFeatures {
    pub fn row(&self, t: usize, i: usize) -> &[f64] {
        let c = self.cards[t];
        &self.values[t][i * c..(i + 1) * c]
    }
}

/// Expands per-attribute vectors into their row-major outer product.
pub(crate) fn outer_product(rows: &[&[f64]], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for r in rows {
        scratch.clear();
        for &acc in out.iter() {
            scratch.extend(r.iter().map(|v| acc * v));
        }
        std::mem::swap(out, scratch);
    }
}

#[cfg(test)]
mod tests;
