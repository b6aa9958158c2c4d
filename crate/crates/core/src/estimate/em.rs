use rayon::prelude::*;

use crate::bits::hamming_words;
use crate::encode::{FilterBank, ReportSet};
use crate::error::{Error, Result};
use crate::estimate::{
    check_inputs, outer_product, unflatten, AttributeCluster, Diagnostics, Estimate, EstimateOptions,
    JointDistribution, ReportFeatures,
};

const CHUNK: usize = 512;

/// EM over all candidate tuples, starting from the uniform table.
pub fn em_jd(
    reports: &ReportSet,
    bank: &FilterBank,
    cluster: &AttributeCluster,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    check_inputs(reports, bank, cluster)?;
    let cards: Vec<usize> = cluster.indices().iter().map(|&j| bank.filters(j).len()).collect();
    let cells: usize = cards.iter().product();
    em_jd_from(reports, bank, cluster, opts, vec![1.0 / cells as f64; cells], None)
}

/// EM from an explicit starting table. With `support`, only those cells carry
/// likelihood; all others are pinned to zero.
pub fn em_jd_from(
    reports: &ReportSet,
    bank: &FilterBank,
    cluster: &AttributeCluster,
    opts: &EstimateOptions,
    initial: Vec<f64>,
    support: Option<&[usize]>,
) -> Result<Estimate> {
    check_inputs(reports, bank, cluster)?;
    if !(opts.delta > 0.0) {
        return Err(Error::InvalidParameter(format!("convergence gap must be positive, got {}", opts.delta)));
    }
    let fail = |message: String| Error::Estimation { cluster: cluster.indices().to_vec(), message };
    let features = likelihood_features(reports, bank, cluster);
    let cards = features.cards.clone();
    let cells: usize = cards.iter().product();
    if initial.len() != cells {
        return Err(fail(format!("initial table has {} cells, expected {cells}", initial.len())));
    }
    let support: Vec<usize> = match support {
        Some(s) => s.to_vec(),
        None => (0..cells).collect(),
    };
    if support.is_empty() {
        return Err(fail("empty support".into()));
    }
    let support_digits: Vec<Vec<usize>> = support.iter().map(|&c| unflatten(c, &cards)).collect();
    // Expanding the whole table is cheaper unless the support is small; cells
    // outside the support have zero prior either way.
    let dense = support.len() * cards.len() >= cells;

    let mut prior = vec![0.0; cells];
    let mass: f64 = support.iter().map(|&c| initial[c].max(0.0)).sum();
    for &c in &support {
        prior[c] = if mass > 0.0 { initial[c].max(0.0) / mass } else { 1.0 / support.len() as f64 };
    }

    let n = reports.len();
    let mut diag = Diagnostics::default();
    let mut skipped = 0;
    for _ in 0..opts.max_em_iter {
        let step = e_step(&features, &prior, &support, &support_digits, dense, n);
        diag.log_likelihood.push(step.log_likelihood);
        skipped = step.skipped;
        let used = n - step.skipped;
        if used == 0 {
            return Err(fail("every report has zero likelihood under the current table".into()));
        }
        let mut next = vec![0.0; cells];
        for (k, &c) in support.iter().enumerate() {
            next[c] = step.posterior_sums[k] / used as f64;
        }
        let change = prior.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prior = next;
        diag.em_iterations += 1;
        if change <= opts.delta {
            diag.em_converged = true;
            break;
        }
    }
    if !diag.em_converged {
        diag.warnings.push(format!("EM hit the {}-iteration cap", opts.max_em_iter));
    }
    if skipped > 0 {
        diag.warnings.push(format!("{skipped} reports had zero likelihood and were skipped"));
    }
    diag.skipped_reports = skipped;
    let mut dist = JointDistribution::new(cluster.clone(), cards, prior)?;
    dist.normalize();
    Ok(Estimate { distribution: dist, diagnostics: diag })
}

struct StepResult {
    posterior_sums: Vec<f64>,
    log_likelihood: f64,
    skipped: usize,
}

fn e_step(
    features: &LikelihoodFeatures,
    prior: &[f64],
    support: &[usize],
    support_digits: &[Vec<usize>],
    dense: bool,
    n: usize,
) -> StepResult {
    let k = features.cards.len();
    let partials: Vec<StepResult> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let chunk = c * CHUNK..((c + 1) * CHUNK).min(n);
            let mut sums = vec![0.0; support.len()];
            let mut ll = 0.0;
            let mut skipped = 0;
            let (mut joint, mut scratch, mut rows) = (Vec::new(), Vec::new(), Vec::with_capacity(k));
            let mut weights = vec![0.0; support.len()];
            for i in chunk {
                rows.clear();
                rows.extend((0..k).map(|t| features.row(t, i)));
                if dense {
                    outer_product(&rows, &mut joint, &mut scratch);
                    for (w, &c) in weights.iter_mut().zip(support) {
                        *w = joint[c] * prior[c];
                    }
                } else {
                    for ((w, &c), digits) in weights.iter_mut().zip(support).zip(support_digits) {
                        let mut l = prior[c];
                        for (r, &v) in rows.iter().zip(digits) {
                            l *= r[v];
                        }
                        *w = l;
                    }
                }
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) {
                    skipped += 1;
                    continue;
                }
                let log_scale: f64 = (0..k).map(|t| features.log_scales[t][i]).sum();
                ll += total.ln() + log_scale;
                let inv = 1.0 / total;
                for (s, w) in sums.iter_mut().zip(&weights) {
                    *s += w * inv;
                }
            }
            StepResult { posterior_sums: sums, log_likelihood: ll, skipped }
        })
        .collect();
    // fixed-order reduction keeps results independent of thread scheduling
    let mut out = StepResult { posterior_sums: vec![0.0; support.len()], log_likelihood: 0.0, skipped: 0 };
    for p in partials {
        for (a, b) in out.posterior_sums.iter_mut().zip(&p.posterior_sums) {
            *a += b;
        }
        out.log_likelihood += p.log_likelihood;
        out.skipped += p.skipped;
    }
    out
}

struct LikelihoodFeatures {
    inner: ReportFeatures,
    log_scales: Vec<Vec<f64>>,
}

impl std::ops::Deref for LikelihoodFeatures {
    type Target = ReportFeatures;

    fn deref(&self) -> &ReportFeatures {
        &self.inner
    }
}

/// Per-attribute likelihoods `P(ŝ_j | ω_j)`, each report's row divided by its
/// maximum; the logs of those maxima are kept for the log-likelihood.
///
/// A candidate at Hamming distance `d` from the observed segment has
/// likelihood `(1 − f/2)^(m−d) (f/2)^d`, so relative to the closest candidate
/// it is `ρ^(d − d_min)` with `ρ = (f/2)/(1 − f/2)`.
fn likelihood_features(reports: &ReportSet, bank: &FilterBank, cluster: &AttributeCluster) -> LikelihoodFeatures {
    let f = reports.flip_probability();
    let n = reports.len();
    let keep = (1.0 - f / 2.0).ln();
    let flip = (f / 2.0).ln();
    let ratio = (f / 2.0) / (1.0 - f / 2.0);
    let mut values = Vec::with_capacity(cluster.len());
    let mut log_scales = Vec::with_capacity(cluster.len());
    let mut cards = Vec::with_capacity(cluster.len());
    for &j in cluster.indices() {
        let filters = bank.filters(j);
        let m = bank.params()[j].m;
        let c = filters.len();
        let powers: Vec<f64> = (0..=m as i32).map(|e| ratio.powi(e)).collect();
        let mut flat = vec![0.0; n * c];
        let mut scales = vec![0.0; n];
        flat.par_chunks_mut(c).zip(scales.par_iter_mut()).enumerate().for_each(|(i, (row, scale))| {
            let seg = reports.segment_words(i, j);
            let mut dmin = usize::MAX;
            for (r, h) in row.iter_mut().zip(filters) {
                let d = hamming_words(seg, h.words());
                dmin = dmin.min(d);
                *r = d as f64;
            }
            if f == 0.0 && dmin > 0 {
                row.iter_mut().for_each(|r| *r = 0.0);
                return;
            }
            for r in row.iter_mut() {
                *r = powers[*r as usize - dmin];
            }
            *scale = if dmin == 0 { m as f64 * keep } else { (m - dmin) as f64 * keep + dmin as f64 * flip };
        });
        values.push(flat);
        log_scales.push(scales);
        cards.push(c);
    }
    LikelihoodFeatures { inner: ReportFeatures { cards, values }, log_scales }
}
