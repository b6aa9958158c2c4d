//! Non-negative Lasso by cyclic coordinate descent.
//!
//! Minimizes `½‖y − Xβ‖² + λ‖β‖₁` subject to `β ≥ 0`. The solver works on the
//! normal equations (`XᵀX`, `Xᵀy`, `yᵀy`) so designs that are too tall to
//! materialize, such as Kronecker products of per-attribute filter matrices,
//! can be solved without ever forming `X`.

use crate::bits::Bits;
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const CV_FOLDS: usize = 5;

/// `XᵀX`, either dense or as a Kronecker product of small symmetric factors.
#[derive(Debug, Clone, PartialEq)]
pub enum Gram {
    Dense { n: usize, entries: Vec<f64> },
    /// Factors in row-major order: flat index `c = ((c_0·n_1 + c_1)·n_2 + c_2)…`.
    Kronecker { factors: Vec<(usize, Vec<f64>)> },
}

impl Gram {
    pub fn dim(&self) -> usize {
        match self {
            Gram::Dense { n, .. } => *n,
            Gram::Kronecker { factors } => factors.iter().map(|(n, _)| n).product(),
        }
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        match self {
            Gram::Dense { n, entries } => entries[a * n + b],
            Gram::Kronecker { factors } => {
                let (mut a, mut b) = (a, b);
                let mut v = 1.0;
                for (n, f) in factors.iter().rev() {
                    v *= f[(a % n) * n + b % n];
                    a /= n;
                    b /= n;
                }
                v
            }
        }
    }

    /// Materializes every entry.
    pub fn to_dense(&self) -> Gram {
        match self {
            Gram::Dense { .. } => self.clone(),
            Gram::Kronecker { .. } => {
                let n = self.dim();
                let mut entries = vec![0.0; n * n];
                for c in 0..n {
                    let mut col = vec![0.0; n];
                    self.sub_column(c, -1.0, &mut col);
                    entries[c * n..(c + 1) * n].copy_from_slice(&col);
                }
                Gram::Dense { n, entries }
            }
        }
    }

    /// `out -= delta · G[:, c]`.
    fn sub_column(&self, c: usize, delta: f64, out: &mut [f64]) {
        match self {
            Gram::Dense { n, entries } => {
                // symmetric: column c equals row c
                for (o, g) in out.iter_mut().zip(&entries[c * n..(c + 1) * n]) {
                    *o -= delta * g;
                }
            }
            Gram::Kronecker { factors } => {
                // expand the column factor by factor
                let mut col = vec![delta];
                let mut rest = c;
                let mut digits = vec![0; factors.len()];
                for (t, (n, _)) in factors.iter().enumerate().rev() {
                    digits[t] = rest % n;
                    rest /= n;
                }
                for ((n, f), &d) in factors.iter().zip(&digits) {
                    let mut next = Vec::with_capacity(col.len() * n);
                    for &v in &col {
                        next.extend((0..*n).map(|r| v * f[r * n + d]));
                    }
                    col = next;
                }
                for (o, g) in out.iter_mut().zip(&col) {
                    *o -= g;
                }
            }
        }
    }

    fn mul(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; beta.len()];
        for (c, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                self.sub_column(c, -b, &mut out);
            }
        }
        out
    }
}

/// A non-negative Lasso instance in normal-equation form.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    gram: Gram,
    xty: Vec<f64>,
    yty: f64,
    lambda: f64,
}

impl RegressionProblem {
    /// Builds the problem from explicit 0/1 design columns and a response.
    pub fn from_columns(columns: &[Bits], response: &[f64], lambda: f64) -> Result<Self> {
        let rows = response.len();
        if columns.is_empty() {
            return Err(Error::InvalidParameter("design has no columns".into()));
        }
        if let Some(c) = columns.iter().position(|c| c.len() != rows) {
            return Err(Error::Shape(format!(
                "column {c} has {} rows, response has {rows}",
                columns[c].len()
            )));
        }
        for a in 0..columns.len() {
            for b in a + 1..columns.len() {
                if columns[a] == columns[b] {
                    return Err(Error::InvalidParameter(format!("design columns {a} and {b} are identical")));
                }
            }
        }
        let n = columns.len();
        let entries = dense_gram(columns);
        let xty = columns
            .iter()
            .map(|c| c.iter().zip(response).filter(|(bit, _)| *bit).map(|(_, y)| y).sum())
            .collect();
        let yty = response.iter().map(|y| y * y).sum();
        Self::from_normal_equations(Gram::Dense { n, entries }, xty, yty, lambda)
    }

    pub fn from_normal_equations(gram: Gram, xty: Vec<f64>, yty: f64, lambda: f64) -> Result<Self> {
        if gram.dim() != xty.len() {
            return Err(Error::Shape(format!("gram is {0}x{0}, Xᵀy has {1} entries", gram.dim(), xty.len())));
        }
        if xty.is_empty() {
            return Err(Error::InvalidParameter("design has no columns".into()));
        }
        if let Some(c) = (0..xty.len()).find(|&c| gram.entry(c, c) <= 0.0) {
            return Err(Error::InvalidParameter(format!("design column {c} is all zero")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(RegressionProblem { gram, xty, yty, lambda })
    }

    pub fn columns(&self) -> usize {
        self.xty.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        assert!(lambda >= 0.0);
        self.lambda = lambda;
    }

    pub fn gram(&self) -> &Gram {
        &self.gram
    }

    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    /// `max_c |x_cᵀy|`: the smallest λ for which β = 0 is optimal.
    pub fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn objective(&self, beta: &[f64]) -> f64 {
        let g = self.gram.mul(beta);
        let quad: f64 = beta.iter().zip(&g).map(|(b, g)| b * g).sum();
        let lin: f64 = beta.iter().zip(&self.xty).map(|(b, x)| b * x).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        0.5 * quad - lin + 0.5 * self.yty + self.lambda * l1
    }

    /// `x_cᵀ(y − Xβ)` for every column.
    pub fn correlations(&self, beta: &[f64]) -> Vec<f64> {
        let g = self.gram.mul(beta);
        self.xty.iter().zip(&g).map(|(x, g)| x - g).collect()
    }

    /// Largest violation of the optimality conditions, each scaled so that a
    /// value ≤ 1 means the condition holds at tolerance `tol`.
    pub fn kkt_violation(&self, beta: &[f64], tol: f64) -> f64 {
        let corr = self.correlations(beta);
        let mut worst: f64 = 0.0;
        for c in 0..beta.len() {
            let v = if beta[c] > 0.0 {
                (corr[c] - self.lambda).abs() / (tol * self.gram.entry(c, c) * 10.0)
            } else {
                (corr[c] - self.lambda) / tol
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: Vec<f64>,
    pub objective: f64,
    /// Completed sweeps over all coordinates.
    pub iterations: usize,
    pub converged: bool,
}

/// Coordinate descent state with the running correlation vector `Xᵀ(y − Xβ)`.
pub(crate) struct CoordinateDescent<'a> {
    problem: &'a RegressionProblem,
    pub(crate) beta: Vec<f64>,
    corr: Vec<f64>,
}

impl<'a> CoordinateDescent<'a> {
    pub(crate) fn new(problem: &'a RegressionProblem, start: Option<&[f64]>) -> Self {
        let beta = match start {
            Some(s) => s.iter().map(|b| b.max(0.0)).collect(),
            None => vec![0.0; problem.columns()],
        };
        let corr = problem.correlations(&beta);
        CoordinateDescent { problem, beta, corr }
    }

    /// Exact minimization along coordinate `c`; returns the change in `β_c`.
    pub(crate) fn update(&mut self, c: usize) -> f64 {
        let diag = self.problem.gram.entry(c, c);
        let old = self.beta[c];
        let new = (old + (self.corr[c] - self.problem.lambda) / diag).max(0.0);
        let delta = new - old;
        if delta != 0.0 {
            self.beta[c] = new;
            self.problem.gram.sub_column(c, delta, &mut self.corr);
        }
        delta
    }

    fn kkt_ok(&self, tol: f64) -> bool {
        let lambda = self.problem.lambda;
        (0..self.beta.len()).all(|c| {
            if self.beta[c] > 0.0 {
                (self.corr[c] - lambda).abs() <= tol * self.problem.gram.entry(c, c) * 10.0
            } else {
                self.corr[c] <= lambda + tol
            }
        })
    }
}

/// Solves from β = 0.
pub fn nn_lasso(problem: &RegressionProblem, tol: f64, max_iter: usize) -> Solution {
    nn_lasso_from(problem, None, tol, max_iter)
}

/// Default sweep cap for a problem with `cols` coordinates.
pub fn default_max_iter(cols: usize) -> usize {
    10 * cols * 100
}

/// Solves from an optional warm start. Stops once a full sweep moves no
/// coordinate by more than `tol` and the optimality conditions hold.
pub fn nn_lasso_from(problem: &RegressionProblem, start: Option<&[f64]>, tol: f64, max_iter: usize) -> Solution {
    let mut cd = CoordinateDescent::new(problem, start);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut max_change: f64 = 0.0;
        for c in 0..problem.columns() {
            max_change = max_change.max(cd.update(c).abs());
        }
        iterations += 1;
        if max_change <= tol && cd.kkt_ok(tol) {
            converged = true;
            break;
        }
    }
    let objective = problem.objective(&cd.beta);
    Solution { beta: cd.beta, objective, iterations, converged }
}

/// Geometric grid from `lambda_max` down three decades, largest first.
pub fn lambda_grid(lambda_max: f64, grid_size: usize) -> Vec<f64> {
    assert!(grid_size >= 2, "grid needs at least two points");
    let ratio = 1e-3f64.powf(1.0 / (grid_size - 1) as f64);
    (0..grid_size).map(|k| lambda_max * ratio.powi(k as i32)).collect()
}

/// Runs a warm-started path on every training fold and returns the grid index
/// with the smallest total held-out loss (the largest λ wins ties).
pub fn cross_validate<F>(train: &mut [RegressionProblem], grid: &[f64], tol: f64, heldout_loss: F) -> usize
where
    F: Fn(usize, &[f64]) -> f64,
{
    let mut totals = vec![0.0; grid.len()];
    for (fold, problem) in train.iter_mut().enumerate() {
        let mut warm: Option<Vec<f64>> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            problem.set_lambda(lambda);
            let sol = nn_lasso_from(problem, warm.as_deref(), tol, default_max_iter(problem.columns()));
            totals[g] += heldout_loss(fold, &sol.beta);
            warm = Some(sol.beta);
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if totals[g] < totals[best] {
            best = g;
        }
    }
    best
}

/// Chooses λ by 5-fold cross-validation over design rows.
///
/// Rows are assigned to folds round-robin. With fewer than five rows there is
/// nothing to validate against and `0.01·λ_max` is returned.
pub fn lambda_select(columns: &[Bits], response: &[f64], grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return Err(Error::InvalidParameter(format!("grid size must be at least 2, got {grid_size}")));
    }
    let full = RegressionProblem::from_columns(columns, response, 0.0)?;
    let lambda_max = full.lambda_max();
    if lambda_max == 0.0 {
        return Ok(0.0);
    }
    let rows = response.len();
    if rows < CV_FOLDS {
        return Ok(0.01 * lambda_max);
    }
    let grid = lambda_grid(lambda_max, grid_size);
    let split = |fold: usize, keep_fold: bool| -> (Vec<Bits>, Vec<f64>) {
        let idx: Vec<usize> = (0..rows).filter(|r| (r % CV_FOLDS == fold) == keep_fold).collect();
        let cols = columns
            .iter()
            .map(|c| Bits::from_bools(&idx.iter().map(|&r| c.get(r)).collect::<Vec<_>>()))
            .collect();
        (cols, idx.iter().map(|&r| response[r]).collect())
    };
    let mut train = Vec::with_capacity(CV_FOLDS);
    let mut tests = Vec::with_capacity(CV_FOLDS);
    for fold in 0..CV_FOLDS {
        let (cols, y) = split(fold, false);
        // a column can vanish on the training rows; a tiny ridge keeps the
        // coordinate update defined without changing the fit
        let mut gram_entries = dense_gram(&cols);
        let n = cols.len();
        for c in 0..n {
            if gram_entries[c * n + c] == 0.0 {
                gram_entries[c * n + c] = 1e-12;
            }
        }
        let xty = cols
            .iter()
            .map(|c| c.iter().zip(&y).filter(|(bit, _)| *bit).map(|(_, v)| v).sum())
            .collect();
        let yty = y.iter().map(|v| v * v).sum();
        train.push(RegressionProblem::from_normal_equations(Gram::Dense { n, entries: gram_entries }, xty, yty, 0.0)?);
        tests.push(split(fold, true));
    }
    let best = cross_validate(&mut train, &grid, DEFAULT_TOL, |fold, beta| {
        let (cols, y) = &tests[fold];
        (0..y.len())
            .map(|r| {
                let fit: f64 = cols.iter().zip(beta).filter(|(c, _)| c.get(r)).map(|(_, b)| b).sum();
                (y[r] - fit).powi(2)
            })
            .sum()
    });
    Ok(grid[best])
}

fn dense_gram(columns: &[Bits]) -> Vec<f64> {
    let n = columns.len();
    let mut entries = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v = crate::bits::and_count(columns[a].words(), columns[b].words()) as f64;
            entries[a * n + b] = v;
            entries[b * n + a] = v;
        }
    }
    entries
}
