use rand::Rng;

use super::*;
use crate::encode::{BloomParams, Encoder, PerturbedReport, ReportHeader};
use crate::rng::StreamFactory;
use crate::schema::{AttributeDomain, Dataset, Schema};
use crate::solver::{nn_lasso, RegressionProblem};

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn bits(s: &str) -> Bits {
    Bits::parse(s).unwrap()
}

/// Gender, education and income with hand-written filters and four
/// perturbed reports at f = 1/2.
fn census_fixture() -> (ReportSet, FilterBank) {
    let schema = Schema::new(vec![
        AttributeDomain::new("gender", labels(&["M", "F"])).unwrap(),
        AttributeDomain::new("education", labels(&["college", "master", "phd"])).unwrap(),
        AttributeDomain::new("income", labels(&["working", "low-middle", "up-middle", "affluent"])).unwrap(),
    ])
    .unwrap();
    let filters = vec![
        vec![bits("01"), bits("10")],
        vec![bits("0101"), bits("0110"), bits("1100")],
        vec![bits("0110"), bits("0011"), bits("1001"), bits("1100")],
    ];
    let params: Vec<BloomParams> = filters
        .iter()
        .map(|fs| BloomParams { m: fs[0].len(), h: 2, p: 1.0 / 16.0, salt: Vec::new() })
        .collect();
    let bank = FilterBank::from_filters(params.clone(), filters).unwrap();
    let reports: Vec<PerturbedReport> = [["10", "0111", "0100"], ["00", "1110", "0111"], ["10", "0100", "0010"], [
        "00", "0110", "1111",
    ]]
    .iter()
    .map(|r| PerturbedReport::new(r.iter().map(|s| bits(s)).collect()))
    .collect();
    let header = ReportHeader::new(schema, params, 0.5, 1.0 / 16.0, 0);
    (ReportSet::from_reports(header, &reports).unwrap(), bank)
}

fn cluster(v: &[usize]) -> AttributeCluster {
    AttributeCluster::new(v.to_vec()).unwrap()
}

#[test]
fn counts_match_hand_tally() {
    let (reports, _) = census_fixture();
    let counts = aggregate_counts(&reports, &cluster(&[0, 1])).unwrap();
    assert_eq!(counts.raw, vec![2.0, 0.0, 1.0, 4.0, 3.0, 1.0]);
    assert_eq!(counts.debiased, vec![2.0, -2.0, 0.0, 6.0, 4.0, 0.0]);
    assert_eq!(counts.n, 4);
}

#[test]
fn candidate_columns_in_row_major_order() {
    let (_, bank) = census_fixture();
    let m = candidate_matrix(&cluster(&[0, 1]), &bank).unwrap();
    let got: Vec<String> = m.columns.iter().map(|b| b.to_string()).collect();
    assert_eq!(got, ["010101", "010110", "011100", "100101", "100110", "101100"]);
    assert_eq!(m.rows, 6);
}

#[test]
fn single_segment_likelihood() {
    let l = report_likelihood(&bits("0111"), &bits("0101"), 0.5);
    assert!((l - 27.0 / 256.0).abs() < 1e-15);
    assert_eq!(report_likelihood(&bits("0101"), &bits("0101"), 0.0), 1.0);
    assert_eq!(report_likelihood(&bits("0111"), &bits("0101"), 0.0), 0.0);
}

/// Straightforward EM over explicit concatenated candidates.
fn reference_em(reports: &ReportSet, bank: &FilterBank, c: &AttributeCluster, delta: f64) -> (Vec<f64>, usize) {
    let cand = candidate_matrix(c, bank).unwrap();
    let f = reports.flip_probability();
    let obs: Vec<Bits> = (0..reports.len())
        .map(|i| Bits::concat(c.indices().iter().map(|&j| reports.segment(i, j)).collect::<Vec<_>>().iter()))
        .collect();
    let lik: Vec<Vec<f64>> =
        obs.iter().map(|o| cand.columns.iter().map(|col| report_likelihood(o, col, f)).collect()).collect();
    let cells = cand.columns.len();
    let mut p = vec![1.0 / cells as f64; cells];
    let mut iters = 0;
    loop {
        let mut next = vec![0.0; cells];
        for row in &lik {
            let z: f64 = row.iter().zip(&p).map(|(l, q)| l * q).sum();
            for k in 0..cells {
                next[k] += row[k] * p[k] / z;
            }
        }
        next.iter_mut().for_each(|v| *v /= lik.len() as f64);
        let change = p.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        iters += 1;
        if change <= delta {
            return (p, iters);
        }
    }
}

#[test]
fn em_agrees_with_reference_on_fixture() {
    let (reports, bank) = census_fixture();
    for c in [vec![0, 1], vec![1, 2], vec![0, 1, 2], vec![2]] {
        let c = cluster(&c);
        let est = em_jd(&reports, &bank, &c, &EstimateOptions::default()).unwrap();
        let (want, iters) = reference_em(&reports, &bank, &c, DEFAULT_DELTA);
        assert_eq!(est.diagnostics.em_iterations, iters);
        for (a, b) in est.distribution.probs.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let ll = &est.diagnostics.log_likelihood;
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), "EM log-likelihood decreased: {ll:?}");
    }
}

#[test]
fn first_posterior_matches_hand_computation() {
    // One EM step from the uniform prior averages the normalized likelihood rows.
    let (reports, bank) = census_fixture();
    let c = cluster(&[0, 1]);
    let opts = EstimateOptions { max_em_iter: 1, ..Default::default() };
    let est = em_jd(&reports, &bank, &c, &opts).unwrap();
    let f = 0.5;
    let cand = candidate_matrix(&c, &bank).unwrap();
    let mut want = [0.0; 6];
    for i in 0..4 {
        let o = Bits::concat([reports.segment(i, 0), reports.segment(i, 1)].iter());
        let row: Vec<f64> = cand.columns.iter().map(|col| report_likelihood(&o, col, f)).collect();
        let z: f64 = row.iter().sum();
        for k in 0..6 {
            want[k] += row[k] / z / 4.0;
        }
    }
    assert!(!est.diagnostics.em_converged);
    for (a, b) in est.distribution.probs.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn planted(n: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let schema = Schema::new(vec![
        AttributeDomain::new("a", labels(&["x", "y", "z"])).unwrap(),
        AttributeDomain::new("b", labels(&["u", "v"])).unwrap(),
    ])
    .unwrap();
    let truth = vec![0.30, 0.05, 0.05, 0.25, 0.15, 0.20];
    let mut rng = StreamFactory::new(seed, "planted").stream(0);
    let rows = (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            let mut k = 0;
            while k + 1 < truth.len() && u >= truth[k] {
                u -= truth[k];
                k += 1;
            }
            vec![k / 2, k % 2]
        })
        .collect();
    (Dataset::new(schema, rows).unwrap(), truth)
}

fn encode(data: &Dataset, f: f64, seed: u64) -> (ReportSet, FilterBank) {
    let bank = FilterBank::build(data.schema(), 1.0 / 16.0, None).unwrap();
    let enc = Encoder::new(data.schema().clone(), bank.clone(), f).unwrap();
    (enc.encode_dataset(data, 1.0 / 16.0, seed).unwrap(), bank)
}

fn avd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

#[test]
fn every_method_recovers_a_planted_table() {
    let (data, _) = planted(20_000, 3);
    let empirical = data.joint_frequencies(&[0, 1]);
    let (reports, bank) = encode(&data, 0.5, 11);
    for method in [Method::Em, Method::Lasso, Method::Hybrid] {
        let est = estimate(method, &reports, &bank, &cluster(&[0, 1]), &EstimateOptions::default()).unwrap();
        let d = avd(&est.distribution.probs, &empirical);
        assert!(d < 0.05, "{method}: variation distance {d}");
        assert!((est.distribution.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(est.distribution.probs.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn lasso_exact_without_noise() {
    let (data, _) = planted(2_000, 5);
    let empirical = data.joint_frequencies(&[0, 1]);
    let (reports, bank) = encode(&data, 0.0, 1);
    let problem = LassoProblem::build(&reports, &bank, &cluster(&[0, 1])).unwrap();
    let ols = nn_lasso(&problem.regression(0.0).unwrap(), 1e-12, 1_000_000);
    for (a, b) in ols.beta.iter().zip(&empirical) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn factored_regression_matches_explicit_design() {
    // Materialize the Kronecker design and the co-occurrence response and
    // compare the two solutions at several penalties.
    let (reports, bank) = census_fixture();
    let c = cluster(&[0, 1]);
    let f = reports.flip_probability();
    let aug = |j: usize, v: usize| -> Vec<bool> {
        let mut b: Vec<bool> = bank.filter(j, v).iter().collect();
        b.push(true);
        b
    };
    let mut columns = Vec::new();
    for g in 0..2 {
        for e in 0..3 {
            let (a, b) = (aug(0, g), aug(1, e));
            let col: Vec<bool> = a.iter().flat_map(|&x| b.iter().map(move |&y| x && y)).collect();
            columns.push(Bits::from_bools(&col));
        }
    }
    let n = reports.len() as f64;
    let mut response = vec![0.0; 15];
    for i in 0..reports.len() {
        let seg = |j: usize| -> Vec<f64> {
            let mut v: Vec<f64> =
                reports.segment(i, j).iter().map(|b| (b as u8 as f64 - f / 2.0) / (1.0 - f)).collect();
            v.push(1.0);
            v
        };
        let (a, b) = (seg(0), seg(1));
        for (x, av) in a.iter().enumerate() {
            for (y, bv) in b.iter().enumerate() {
                response[x * b.len() + y] += av * bv / n;
            }
        }
    }
    let problem = LassoProblem::build(&reports, &bank, &c).unwrap();
    for lambda in [0.0, 0.05, 0.3, 1.0] {
        let explicit = RegressionProblem::from_columns(&columns, &response, lambda).unwrap();
        let factored = problem.regression(lambda).unwrap();
        let a = nn_lasso(&explicit, 1e-12, 1_000_000);
        let b = nn_lasso(&factored, 1e-12, 1_000_000);
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-8, "lambda {lambda}: {x} vs {y}");
        }
    }
}

#[test]
fn hybrid_respects_lasso_support() {
    let (data, _) = planted(5_000, 8);
    let (reports, bank) = encode(&data, 0.3, 2);
    let c = cluster(&[0, 1]);
    let lasso = lasso_jd(&reports, &bank, &c, &EstimateOptions::default()).unwrap();
    let hybrid = hybrid_jd(&reports, &bank, &c, &EstimateOptions::default()).unwrap();
    for (l, h) in lasso.distribution.probs.iter().zip(&hybrid.distribution.probs) {
        if *l == 0.0 {
            assert_eq!(*h, 0.0);
        }
    }
    let kept = lasso.distribution.probs.iter().filter(|&&p| p > 0.0).count();
    assert_eq!(hybrid.diagnostics.support, Some(kept));
    assert!(hybrid.diagnostics.lambda.is_some());
}

#[test]
fn estimation_is_deterministic() {
    let (data, _) = planted(3_000, 4);
    let (reports, bank) = encode(&data, 0.5, 9);
    let c = cluster(&[0, 1]);
    for method in [Method::Em, Method::Lasso, Method::Hybrid] {
        let a = estimate(method, &reports, &bank, &c, &EstimateOptions::default()).unwrap();
        let b = estimate(method, &reports, &bank, &c, &EstimateOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn rejects_degenerate_inputs() {
    let (reports, bank) = census_fixture();
    let c = cluster(&[0, 1]);
    let empty = reports.select(&[]);
    assert!(matches!(em_jd(&empty, &bank, &c, &Default::default()), Err(Error::Estimation { .. })));
    assert!(matches!(lasso_jd(&empty, &bank, &c, &Default::default()), Err(Error::Estimation { .. })));
    assert!(aggregate_counts(&reports, &cluster(&[7])).is_err());
    assert!(AttributeCluster::new(vec![]).is_err());
    assert!(AttributeCluster::new(vec![1, 1]).is_err());
    let bad = EstimateOptions { delta: 0.0, ..Default::default() };
    assert!(em_jd(&reports, &bank, &c, &bad).is_err());
}

#[test]
fn noiseless_em_skips_impossible_reports() {
    // At f = 0 a report matching no candidate carries zero likelihood.
    let (reports, bank) = census_fixture();
    let mut header = reports.header().clone();
    header.f = 0.0;
    let exact: Vec<PerturbedReport> = vec![
        PerturbedReport::new(vec![bits("01"), bits("0101"), bits("0110")]),
        PerturbedReport::new(vec![bits("10"), bits("0110"), bits("0011")]),
        PerturbedReport::new(vec![bits("11"), bits("0110"), bits("0011")]),
    ];
    let set = ReportSet::from_reports(header, &exact).unwrap();
    let est = em_jd(&set, &bank, &cluster(&[0, 1]), &Default::default()).unwrap();
    assert_eq!(est.diagnostics.skipped_reports, 1);
    assert!((est.distribution.probs[0] - 0.5).abs() < 1e-12);
    assert!((est.distribution.probs[4] - 0.5).abs() < 1e-12);
}

#[test]
fn marginal_sums_out() {
    let d = JointDistribution::new(cluster(&[2, 5]), vec![2, 3], vec![0.1, 0.2, 0.1, 0.3, 0.2, 0.1]).unwrap();
    let m = d.marginal(&[5]).unwrap();
    let want = [0.4, 0.4, 0.2];
    for (a, b) in m.probs.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(d.marginal(&[3]).is_err());
    assert_eq!(d.flat_index(&[1, 2]), 5);
    assert_eq!(d.digits(4), vec![1, 1]);
}

#[test]
fn method_names_round_trip() {
    for m in [Method::Em, Method::Lasso, Method::Hybrid] {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
    assert_eq!("Lasso+EM".parse::<Method>().unwrap(), Method::Hybrid);
    assert!("ml".parse::<Method>().is_err());
}
