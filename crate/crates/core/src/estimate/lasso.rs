//! Lasso-based joint estimation.
//!
//! Every attribute filter matrix gets a constant row appended (`[H_j; 1]`,
//! with observed value 1). The response is the debiased co-occurrence tensor
//! `Σ_i ⊗_j [(ŝ_ij − f/2)/(1 − f); 1]`, whose entries are unbiased for the
//! true counts of each combination of one bit (or the constant) per
//! attribute, because flips are independent across attributes. Its one-bit
//! slices are exactly the debiased per-bit counts of [`aggregate_counts`]. The
//! matching design is the Kronecker product of the augmented filter matrices,
//! so the normal equations factor per attribute and the tensor itself is
//! never built.
//!
//! [`aggregate_counts`]: crate::estimate::aggregate_counts

use rayon::prelude::*;

use crate::bits::and_count;
use crate::encode::{FilterBank, ReportSet};
use crate::error::Result;
use crate::estimate::{
    check_inputs, outer_product, AttributeCluster, Diagnostics, Estimate, EstimateOptions, JointDistribution,
    ReportFeatures,
};
use crate::solver::{self, cross_validate, lambda_grid, nn_lasso_from, Gram, RegressionProblem, CV_FOLDS};

const CHUNK: usize = 512;
/// Largest table whose Gram matrix is stored densely.
const DENSE_CELLS: usize = 512;

/// Normal equations of the co-occurrence regression, with `Xᵀy` kept per
/// cross-validation fold (report `i` belongs to fold `i mod 5`).
#[derive(Debug, Clone)]
pub struct LassoProblem {
    cards: Vec<usize>,
    gram: Gram,
    fold_xty: Vec<Vec<f64>>,
    fold_n: Vec<usize>,
}

impl LassoProblem {
    pub fn build(reports: &ReportSet, bank: &FilterBank, cluster: &AttributeCluster) -> Result<Self> {
        check_inputs(reports, bank, cluster)?;
        let features = projections(reports, bank, cluster);
        let cards = features.cards.clone();
        let cells: usize = cards.iter().product();
        let factors: Vec<Vec<f64>> = cluster
            .indices()
            .iter()
            .map(|&j| {
                let fs = bank.filters(j);
                let c = fs.len();
                let mut g = vec![0.0; c * c];
                for a in 0..c {
                    for b in 0..c {
                        g[a * c + b] = and_count(fs[a].words(), fs[b].words()) as f64 + 1.0;
                    }
                }
                g
            })
            .collect();

        let n = reports.len();
        let k = cards.len();
        let last = cards[k - 1];
        let partials: Vec<Vec<Vec<f64>>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut sums = vec![vec![0.0; cells]; CV_FOLDS];
                let (mut lead, mut scratch, mut rows) = (Vec::new(), Vec::new(), Vec::with_capacity(k));
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    rows.clear();
                    rows.extend((0..k - 1).map(|t| features.row(t, i)));
                    outer_product(&rows, &mut lead, &mut scratch);
                    let tail = features.row(k - 1, i);
                    let acc = &mut sums[i % CV_FOLDS];
                    for (x, &w) in lead.iter().enumerate() {
                        for (s, v) in acc[x * last..(x + 1) * last].iter_mut().zip(tail) {
                            *s += w * v;
                        }
                    }
                }
                sums
            })
            .collect();
        let mut fold_xty = vec![vec![0.0; cells]; CV_FOLDS];
        for part in partials {
            for (acc, p) in fold_xty.iter_mut().zip(part) {
                for (a, b) in acc.iter_mut().zip(p) {
                    *a += b;
                }
            }
        }
        let fold_n = (0..CV_FOLDS).map(|f| (n + CV_FOLDS - 1 - f) / CV_FOLDS).collect();
        let mut gram = Gram::Kronecker { factors: cards.iter().copied().zip(factors).collect() };
        if cells <= DENSE_CELLS {
            gram = gram.to_dense();
        }
        Ok(LassoProblem { cards, gram, fold_xty, fold_n })
    }

    fn scaled(&self, folds: impl Iterator<Item = usize> + Clone, lambda: f64) -> Result<RegressionProblem> {
        let n: usize = folds.clone().map(|f| self.fold_n[f]).sum();
        let mut xty = vec![0.0; self.fold_xty[0].len()];
        for f in folds {
            for (a, b) in xty.iter_mut().zip(&self.fold_xty[f]) {
                *a += b;
            }
        }
        let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        xty.iter_mut().for_each(|v| *v *= scale);
        // ‖y‖² would need a pass over report pairs; it only shifts the objective
        RegressionProblem::from_normal_equations(self.gram.clone(), xty, 0.0, lambda)
    }

    /// The full problem on the probability scale (`Xᵀy / N`).
    pub fn regression(&self, lambda: f64) -> Result<RegressionProblem> {
        self.scaled(0..CV_FOLDS, lambda)
    }

    pub fn report_count(&self) -> usize {
        self.fold_n.iter().sum()
    }
}

/// Estimates the joint table by non-negative Lasso on the co-occurrence
/// regression, with λ chosen by 5-fold cross-validation over reports.
pub fn lasso_jd(
    reports: &ReportSet,
    bank: &FilterBank,
    cluster: &AttributeCluster,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let problem = LassoProblem::build(reports, bank, cluster)?;
    let cards = problem.cards.clone();
    let mut full = problem.regression(0.0)?;
    let lambda_max = full.lambda_max();
    let mut diag = Diagnostics::default();

    let beta = if lambda_max == 0.0 {
        diag.lambda = Some(0.0);
        vec![0.0; full.columns()]
    } else {
        let grid = lambda_grid(lambda_max, opts.lambda_grid.max(2));
        let chosen = if problem.report_count() < CV_FOLDS {
            None
        } else {
            let mut train: Vec<RegressionProblem> = (0..CV_FOLDS)
                .map(|k| problem.scaled((0..CV_FOLDS).filter(move |&f| f != k), 0.0))
                .collect::<Result<_>>()?;
            let tests: Vec<RegressionProblem> =
                (0..CV_FOLDS).map(|k| problem.scaled(std::iter::once(k), 0.0)).collect::<Result<_>>()?;
            Some(cross_validate(&mut train, &grid, opts.solver_tol, |fold, beta| {
                tests[fold].objective(beta)
            }))
        };
        let path: Vec<f64> = match chosen {
            Some(best) => grid[..=best].to_vec(),
            None => vec![0.01 * lambda_max],
        };
        let mut warm: Option<Vec<f64>> = None;
        let mut converged = true;
        for &lambda in &path {
            full.set_lambda(lambda);
            let sol = nn_lasso_from(&full, warm.as_deref(), opts.solver_tol, solver::default_max_iter(full.columns()));
            converged = sol.converged;
            warm = Some(sol.beta);
        }
        diag.lambda = path.last().copied();
        diag.solver_converged = Some(converged);
        if !converged {
            diag.warnings.push("Lasso solver hit its sweep cap".into());
        }
        warm.expect("path is non-empty")
    };

    let mut dist = JointDistribution::new(cluster.clone(), cards.clone(), beta)?;
    if !dist.normalize() {
        diag.warnings.push("Lasso coefficients sum to zero, returning the uniform table".into());
        dist = JointDistribution::uniform(cluster.clone(), cards);
    }
    Ok(Estimate { distribution: dist, diagnostics: diag })
}

/// `<[H_j(v); 1], [(ŝ − f/2)/(1 − f); 1]>` for every report and value.
fn projections(reports: &ReportSet, bank: &FilterBank, cluster: &AttributeCluster) -> ReportFeatures {
    let f = reports.flip_probability();
    let n = reports.len();
    let keep = 1.0 - f;
    let half = f / 2.0;
    let mut values = Vec::with_capacity(cluster.len());
    let mut cards = Vec::with_capacity(cluster.len());
    for &j in cluster.indices() {
        let filters = bank.filters(j);
        let weights: Vec<f64> = filters.iter().map(|h| h.count_ones() as f64).collect();
        let mut rows = vec![0.0; n * filters.len()];
        rows.par_chunks_mut(filters.len()).enumerate().for_each(|(i, row)| {
            let seg = reports.segment_words(i, j);
            for ((r, h), w) in row.iter_mut().zip(filters).zip(&weights) {
                *r = (and_count(seg, h.words()) as f64 - half * w) / keep + 1.0;
            }
        });
        values.push(rows);
        cards.push(filters.len());
    }
    ReportFeatures { cards, values }
}
