#![allow(dead_code)]

use lopub::encode::{Encoder, FilterBank, ReportSet};
use lopub::eval::synthetic_schema;
use lopub::rng::StreamFactory;
use lopub::schema::Dataset;
use rand::Rng;

/// Draws `n` rows whose cluster `0..cards.len()` follows `probs` (row-major).
pub fn sample_table(cards: &[usize], probs: &[f64], n: usize, seed: u64) -> Dataset {
    let schema = synthetic_schema(cards).unwrap();
    let mut rng = StreamFactory::new(seed, "test-table").stream(0);
    let total: f64 = probs.iter().sum();
    let rows = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut cell = probs.len() - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    cell = c;
                    break;
                }
            }
            let mut row = vec![0; cards.len()];
            for t in (0..cards.len()).rev() {
                row[t] = cell % cards[t];
                cell /= cards[t];
            }
            row
        })
        .collect();
    Dataset::new(schema, rows).unwrap()
}

pub fn encode(data: &Dataset, f: f64, seed: u64) -> (ReportSet, FilterBank) {
    let bank = FilterBank::build(data.schema(), 0.0625, None).unwrap();
    let encoder = Encoder::new(data.schema().clone(), bank.clone(), f).unwrap();
    (encoder.encode_dataset(data, 0.0625, seed).unwrap(), bank)
}

/// Random strictly positive table with `cells` entries summing to one.
pub fn random_table(cells: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamFactory::new(seed, "test-probs").stream(0);
    let raw: Vec<f64> = (0..cells).map(|_| 0.05 + rng.gen::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / s).collect()
}
