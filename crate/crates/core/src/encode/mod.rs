//! Client-side transformation: Bloom filters plus bitwise randomized response.

mod report;

pub use report::{ReportHeader, ReportSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bits::Bits;
use crate::error::{Error, Result};
use crate::rng::StreamFactory;
use crate::schema::{AttributeDomain, Dataset, Schema};

/// Default false-positive target; gives four hash functions.
pub const DEFAULT_FALSE_POSITIVE: f64 = 1.0 / 16.0;
pub const MAX_SALT_ATTEMPTS: u32 = 64;

/// Bit cap used when none is configured: 32 for binary domains, 128 otherwise.
pub fn default_cap(cardinality: usize) -> usize {
    if cardinality <= 2 {
        32
    } else {
        128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloomParams {
    /// Filter length in bits.
    pub m: usize,
    /// Number of hash functions.
    pub h: usize,
    /// Target false-positive rate the sizes were derived from.
    pub p: f64,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

/// Sizes a Bloom filter for a domain of `cardinality` values.
///
/// `m = min(m_max, ceil(ln(1/p) / ln(2)^2 * |Ω|))` and `h = round(ln(1/p) / ln 2)`,
/// with `h` at least one and never more than `m`.
pub fn bloom_params(cardinality: usize, p: f64, m_max: usize) -> Result<BloomParams> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("false-positive rate must lie in (0,1), got {p}")));
    }
    if cardinality < 2 {
        return Err(Error::InvalidParameter(format!("cardinality must be at least 2, got {cardinality}")));
    }
    if m_max == 0 {
        return Err(Error::InvalidParameter("bit cap must be positive".into()));
    }
    let ln_inv_p = (1.0 / p).ln();
    let ln2 = std::f64::consts::LN_2;
    let optimal_m = (ln_inv_p / (ln2 * ln2) * cardinality as f64).ceil() as usize;
    let m = optimal_m.clamp(1, m_max);
    let h = ((ln_inv_p / ln2).round() as usize).clamp(1, m);
    Ok(BloomParams { m, h, p, salt: Vec::new() })
}

/// Hash slot positions for `label` under `params`, in slot order (may repeat).
fn hash_positions<'a>(label: &str, params: &'a BloomParams) -> impl Iterator<Item = usize> + 'a {
    let label = label.to_owned();
    (0..params.h as u32).map(move |slot| {
        let mut hasher = Sha256::new();
        hasher.update((params.salt.len() as u64).to_le_bytes());
        hasher.update(&params.salt);
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update(slot.to_le_bytes());
        let digest = hasher.finalize();
        let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (word % params.m as u64) as usize
    })
}

/// Bloom filter of value `value_index` of `domain`.
pub fn hash_value(domain: &AttributeDomain, value_index: usize, params: &BloomParams) -> Bits {
    let label = &domain.values()[value_index];
    let mut bits = Bits::zeros(params.m);
    for pos in hash_positions(label, params) {
        bits.set(pos, true);
    }
    bits
}

fn salt_for(name: &str, attempt: u32) -> Vec<u8> {
    format!("{name}#{attempt}").into_bytes()
}

/// Randomizes each bit independently: keep with probability `1-f`, otherwise
/// replace with a fair coin.
pub fn perturb<R: Rng + ?Sized>(filter: &Bits, f: f64, rng: &mut R) -> Bits {
    let mut out = filter.clone();
    if f <= 0.0 {
        return out;
    }
    let half = f / 2.0;
    for b in 0..filter.len() {
        let u: f64 = rng.gen();
        if u < half {
            out.set(b, true);
        } else if u < f {
            out.set(b, false);
        }
    }
    out
}

/// `ε = 2·d·h·ln((2−f)/f)`; infinite at `f = 0`.
pub fn privacy_epsilon(d: usize, h: usize, f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidParameter(format!("flip probability must lie in [0,1], got {f}")));
    }
    if f == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 * d as f64 * h as f64 * ((2.0 - f) / f).ln())
}

/// Per-attribute filters for every domain value, shared by clients and server.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    params: Vec<BloomParams>,
    filters: Vec<Vec<Bits>>,
}

impl FilterBank {
    /// Sizes and hashes every attribute, re-salting an attribute until its
    /// filters are pairwise distinct and, where the length allows it, linearly
    /// independent once a constant row is appended.
    pub fn build(schema: &Schema, p: f64, caps: Option<&[usize]>) -> Result<Self> {
        if let Some(c) = caps {
            if c.len() != schema.dimensions() {
                return Err(Error::Shape(format!(
                    "{} bit caps for {} attributes",
                    c.len(),
                    schema.dimensions()
                )));
            }
        }
        let mut params = Vec::with_capacity(schema.dimensions());
        let mut filters = Vec::with_capacity(schema.dimensions());
        for (j, domain) in schema.attributes().iter().enumerate() {
            let cap = caps.map_or_else(|| default_cap(domain.cardinality()), |c| c[j]);
            let base = bloom_params(domain.cardinality(), p, cap)?;
            let mut chosen = None;
            for attempt in 0..MAX_SALT_ATTEMPTS {
                let candidate = BloomParams { salt: salt_for(domain.name(), attempt), ..base.clone() };
                let fs = hash_domain(domain, &candidate);
                if well_separated(&fs) {
                    chosen = Some((candidate, fs));
                    break;
                }
            }
            let (par, fs) = chosen.ok_or_else(|| Error::SaltExhausted {
                attribute: domain.name().to_string(),
                attempts: MAX_SALT_ATTEMPTS,
            })?;
            params.push(par);
            filters.push(fs);
        }
        Ok(FilterBank { params, filters })
    }

    /// Recomputes filters from recorded parameters (server-side replay).
    pub fn replay(schema: &Schema, params: Vec<BloomParams>) -> Result<Self> {
        if params.len() != schema.dimensions() {
            return Err(Error::Shape(format!(
                "{} parameter sets for {} attributes",
                params.len(),
                schema.dimensions()
            )));
        }
        let filters: Vec<Vec<Bits>> = schema
            .attributes()
            .iter()
            .zip(&params)
            .map(|(d, p)| hash_domain(d, p))
            .collect();
        for (d, fs) in schema.attributes().iter().zip(&filters) {
            if !pairwise_distinct(fs) {
                return Err(Error::InvalidParameter(format!(
                    "replayed filters of `{}` collide",
                    d.name()
                )));
            }
        }
        Ok(FilterBank { params, filters })
    }

    /// Uses explicit filters, e.g. hand-written fixtures.
    pub fn from_filters(params: Vec<BloomParams>, filters: Vec<Vec<Bits>>) -> Result<Self> {
        if params.len() != filters.len() {
            return Err(Error::Shape("parameter and filter counts differ".into()));
        }
        for (j, (p, fs)) in params.iter().zip(&filters).enumerate() {
            if fs.iter().any(|f| f.len() != p.m) {
                return Err(Error::Shape(format!("attribute {j}: filter length differs from m={}", p.m)));
            }
            if !pairwise_distinct(fs) {
                return Err(Error::InvalidParameter(format!("attribute {j}: filters collide")));
            }
        }
        Ok(FilterBank { params, filters })
    }

    pub fn params(&self) -> &[BloomParams] {
        &self.params
    }

    pub fn filters(&self, j: usize) -> &[Bits] {
        &self.filters[j]
    }

    pub fn filter(&self, j: usize, value: usize) -> &Bits {
        &self.filters[j][value]
    }

    pub fn dimensions(&self) -> usize {
        self.params.len()
    }

    /// Report length `Σ m_j`.
    pub fn total_bits(&self) -> usize {
        self.params.iter().map(|p| p.m).sum()
    }

    pub fn segment_lengths(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.m).collect()
    }
}

fn hash_domain(domain: &AttributeDomain, params: &BloomParams) -> Vec<Bits> {
    (0..domain.cardinality()).map(|i| hash_value(domain, i, params)).collect()
}

fn pairwise_distinct(filters: &[Bits]) -> bool {
    filters
        .iter()
        .enumerate()
        .all(|(a, fa)| filters[a + 1..].iter().all(|fb| fa != fb))
}

fn well_separated(filters: &[Bits]) -> bool {
    if !pairwise_distinct(filters) {
        return false;
    }
    let m = filters.first().map_or(0, Bits::len);
    if m + 1 < filters.len() {
        return true;
    }
    augmented_rank(filters) == filters.len()
}

/// Rank of the matrix whose columns are the filters with a trailing 1 appended.
pub(crate) fn augmented_rank(filters: &[Bits]) -> usize {
    let Some(m) = filters.first().map(Bits::len) else { return 0 };
    let cols = filters.len();
    let mut a: Vec<Vec<f64>> = (0..=m)
        .map(|r| {
            filters
                .iter()
                .map(|f| if r == m || f.get(r) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut rank = 0;
    for c in 0..cols {
        let Some(pivot) = (rank..a.len()).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())) else {
            break;
        };
        if a[pivot][c].abs() < 1e-9 {
            continue;
        }
        a.swap(rank, pivot);
        for r in 0..a.len() {
            if r != rank {
                let factor = a[r][c] / a[rank][c];
                if factor != 0.0 {
                    for k in c..cols {
                        a[r][k] -= factor * a[rank][k];
                    }
                }
            }
        }
        rank += 1;
    }
    rank
}

/// One user's randomized, concatenated Bloom filters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedReport {
    segments: Vec<Bits>,
}

impl PerturbedReport {
    pub fn new(segments: Vec<Bits>) -> Self {
        PerturbedReport { segments }
    }

    pub fn segments(&self) -> &[Bits] {
        &self.segments
    }

    pub fn bit_len(&self) -> usize {
        self.segments.iter().map(Bits::len).sum()
    }

    pub fn to_bits(&self) -> Bits {
        Bits::concat(&self.segments)
    }
}

/// Client-side encoder for one schema and flip probability.
#[derive(Debug, Clone)]
pub struct Encoder {
    schema: Schema,
    bank: FilterBank,
    f: f64,
}

impl Encoder {
    pub fn new(schema: Schema, bank: FilterBank, f: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidParameter(format!("flip probability must lie in [0,1], got {f}")));
        }
        if bank.dimensions() != schema.dimensions() {
            return Err(Error::Shape("filter bank does not match schema".into()));
        }
        for (j, a) in schema.attributes().iter().enumerate() {
            if bank.filters(j).len() != a.cardinality() {
                return Err(Error::Shape(format!("filter bank has wrong domain size for `{}`", a.name())));
            }
        }
        Ok(Encoder { schema, bank, f })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn flip_probability(&self) -> f64 {
        self.f
    }

    /// Encodes one record. Segments draw from the stream in attribute order,
    /// so no two segments share a random draw.
    pub fn encode_record<R: Rng + ?Sized>(&self, record: &[usize], rng: &mut R) -> Result<PerturbedReport> {
        self.schema.validate_record(record)?;
        let segments = record
            .iter()
            .enumerate()
            .map(|(j, &v)| perturb(self.bank.filter(j, v), self.f, rng))
            .collect();
        Ok(PerturbedReport { segments })
    }

    /// Encodes every row; row `i` uses stream `i` derived from `seed`.
    pub fn encode_dataset(&self, data: &Dataset, p: f64, seed: u64) -> Result<ReportSet> {
        if data.schema() != &self.schema {
            return Err(Error::Shape("dataset schema differs from encoder schema".into()));
        }
        let streams = StreamFactory::new(seed, "encode");
        let reports = data
            .rows()
            .par_iter()
            .enumerate()
            .map(|(i, row)| self.encode_record(row, &mut streams.stream(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let header = ReportHeader::new(self.schema.clone(), self.bank.params().to_vec(), self.f, p, reports.len());
        ReportSet::from_reports(header, &reports)
    }
}
