//! Attribute domains, datasets and tabular ingestion.
//!
//! Records are stored as domain indices: value `k` of attribute `j` is the
//! `k`-th label of `schema.attributes[j].values`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named categorical domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDomain")]
pub struct AttributeDomain {
    name: String,
    values: Vec<String>,
}

#[derive(Deserialize)]
struct RawDomain {
    name: String,
    values: Vec<String>,
}

impl TryFrom<RawDomain> for AttributeDomain {
    type Error = Error;

    fn try_from(raw: RawDomain) -> Result<Self> {
        AttributeDomain::new(raw.name, raw.values)
    }
}

impl AttributeDomain {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::Schema(format!("attribute `{name}` has an empty domain")));
        }
        if name.is_empty() || name.trim() != name || name.chars().any(char::is_control) {
            return Err(Error::Schema(format!("attribute name `{name}` is empty, padded or contains control characters")));
        }
        let mut seen = HashSet::new();
        for v in &values {
            // cells are trimmed on load, so padded labels could never be read back
            if v.is_empty() || v.trim() != v {
                return Err(Error::Schema(format!(
                    "attribute `{name}` has value `{v}` that is empty or padded with whitespace"
                )));
            }
            if !seen.insert(v.as_str()) {
                return Err(Error::Schema(format!(
                    "attribute `{name}` lists value `{v}` more than once"
                )));
            }
        }
        if values.len() < 2 {
            return Err(Error::Schema(format!(
                "attribute `{name}` needs at least two values, got {}",
                values.len()
            )));
        }
        Ok(AttributeDomain { name, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.values.iter().position(|v| v == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    attributes: Vec<AttributeDomain>,
}

#[derive(Deserialize)]
struct RawSchema {
    attributes: Vec<AttributeDomain>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        Schema::new(raw.attributes)
    }
}

impl Schema {
    pub fn new(attributes: Vec<AttributeDomain>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Schema("schema has no attributes".into()));
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if !seen.insert(a.name()) {
                return Err(Error::Schema(format!("duplicate attribute name `{}`", a.name())));
            }
        }
        Ok(Schema { attributes })
    }

    /// Parses a schema document of the form `{"attributes": [{"name", "values": [...]}]}`.
    pub fn from_json(document: &str) -> Result<Self> {
        serde_json::from_str(document).map_err(|e| {
            // serde wraps our own validation errors as custom messages
            Error::Schema(e.to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn attributes(&self) -> &[AttributeDomain] {
        &self.attributes
    }

    pub fn attribute(&self, j: usize) -> &AttributeDomain {
        &self.attributes[j]
    }

    pub fn dimensions(&self) -> usize {
        self.attributes.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(AttributeDomain::cardinality).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name() == name)
    }

    /// Hex SHA-256 of the compact JSON form; identifies the schema in report headers.
    pub fn digest(&self) -> String {
        let compact = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn validate_record(&self, record: &[usize]) -> Result<()> {
        if record.len() != self.dimensions() {
            return Err(Error::Shape(format!(
                "record has {} entries, schema has {} attributes",
                record.len(),
                self.dimensions()
            )));
        }
        for (j, (&v, a)) in record.iter().zip(&self.attributes).enumerate() {
            if v >= a.cardinality() {
                return Err(Error::Shape(format!(
                    "value index {v} out of range for attribute {j} (`{}`, cardinality {})",
                    a.name(),
                    a.cardinality()
                )));
            }
        }
        Ok(())
    }
}

/// Rows of domain indices under a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Vec<usize>>) -> Result<Self> {
        for r in &rows {
            schema.validate_record(r)?;
        }
        Ok(Dataset { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Empirical joint frequency table over `cluster`, row-major in cluster order.
    pub fn joint_frequencies(&self, cluster: &[usize]) -> Vec<f64> {
        let cards: Vec<usize> = cluster.iter().map(|&j| self.schema.attribute(j).cardinality()).collect();
        let cells: usize = cards.iter().product();
        let mut counts = vec![0.0; cells];
        for row in &self.rows {
            let mut flat = 0;
            for (&j, &c) in cluster.iter().zip(&cards) {
                flat = flat * c + row[j];
            }
            counts[flat] += 1.0;
        }
        let n = self.rows.len() as f64;
        if n > 0.0 {
            counts.iter_mut().for_each(|c| *c /= n);
        }
        counts
    }

    /// Writes the dataset as comma-delimited text with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.schema.attributes().iter().map(|a| a.name()).collect();
        out.push_str(&join_csv(names.iter().copied()));
        out.push('\n');
        for row in &self.rows {
            let labels = row
                .iter()
                .enumerate()
                .map(|(j, &v)| self.schema.attribute(j).values()[v].as_str());
            out.push_str(&join_csv(labels));
            out.push('\n');
        }
        out
    }
}

fn join_csv<'a>(fields: impl Iterator<Item = &'a str>) -> String {
    fields
        .map(|f| {
            if f.contains([',', '"', '\n', '\r']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses comma-delimited text with a header row into a [`Dataset`].
///
/// Columns may appear in any order but must name exactly the schema attributes.
pub fn load_dataset(csv_text: &str, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(csv_text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Dataset { line: 1, message: e.to_string() })?
        .clone();
    if header.len() != schema.dimensions() {
        return Err(Error::Dataset {
            line: 1,
            message: format!(
                "header has {} columns, schema has {} attributes",
                header.len(),
                schema.dimensions()
            ),
        });
    }
    let mut column_to_attr = Vec::with_capacity(header.len());
    let mut seen = HashSet::new();
    for name in header.iter() {
        let name = name.trim();
        let j = schema.position(name).ok_or_else(|| Error::Dataset {
            line: 1,
            message: format!("unknown column `{name}`"),
        })?;
        if !seen.insert(j) {
            return Err(Error::Dataset {
                line: 1,
                message: format!("column `{name}` appears twice"),
            });
        }
        column_to_attr.push(j);
    }
    let lookups: Vec<HashMap<&str, usize>> = schema
        .attributes()
        .iter()
        .map(|a| a.values().iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect())
        .collect();

    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Dataset { line, message: e.to_string() })?;
        if record.len() != header.len() {
            return Err(Error::Dataset {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut row = vec![0usize; schema.dimensions()];
        for (cell, &j) in record.iter().zip(&column_to_attr) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::Dataset {
                    line,
                    message: format!("missing value for `{}`", schema.attribute(j).name()),
                });
            }
            row[j] = *lookups[j].get(cell).ok_or_else(|| Error::Dataset {
                line,
                message: format!(
                    "unknown value `{cell}` for attribute `{}`",
                    schema.attribute(j).name()
                ),
            })?;
        }
        rows.push(row);
    }
    Ok(Dataset { schema: schema.clone(), rows })
}

/// Discretizes real values into `bins` equal-width intervals over `[min, max]`.
///
/// Labels are `[lo,hi)` except the last bin, which is closed so the maximum
/// lands in it.
pub fn equal_width_bin(name: &str, values: &[f64], bins: usize) -> Result<(AttributeDomain, Vec<usize>)> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    if values.is_empty() {
        return Err(Error::InvalidParameter("cannot bin an empty value list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("values must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::InvalidParameter(format!(
            "degenerate range: all values equal {lo}, only a single bin is possible"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let edge = |k: usize| if k == bins { hi } else { lo + width * k as f64 };
    let labels = (0..bins)
        .map(|k| {
            let close = if k + 1 == bins { ']' } else { ')' };
            format!("[{},{}{close}", edge(k), edge(k + 1))
        })
        .collect();
    let index = values
        .iter()
        .map(|&v| (((v - lo) / width).floor() as usize).min(bins - 1))
        .collect();
    Ok((AttributeDomain::new(name, labels)?, index))
}
