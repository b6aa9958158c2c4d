use std::fmt::Write as _;

use crate::bits::{words_for, Bits};
use crate::encode::{BloomParams, FilterBank, PerturbedReport};
use crate::error::{Error, Result};
use crate::schema::{AttributeDomain, Schema};

const MAGIC: &str = "#lopub-reports 1";

/// Everything the server needs to replay client hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportHeader {
    pub schema: Schema,
    pub schema_digest: String,
    pub params: Vec<BloomParams>,
    pub f: f64,
    pub p: f64,
    pub n: usize,
}

impl ReportHeader {
    pub fn new(schema: Schema, params: Vec<BloomParams>, f: f64, p: f64, n: usize) -> Self {
        let schema_digest = schema.digest();
        ReportHeader { schema, schema_digest, params, f, p, n }
    }

    fn compatible(&self, other: &ReportHeader) -> bool {
        self.schema_digest == other.schema_digest
            && self.params == other.params
            && self.f.to_bits() == other.f.to_bits()
            && self.p.to_bits() == other.p.to_bits()
    }
}

/// A batch of reports sharing one header, stored as packed words.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSet {
    header: ReportHeader,
    word_offsets: Vec<usize>,
    stride: usize,
    words: Vec<u64>,
}

impl ReportSet {
    pub fn from_reports(mut header: ReportHeader, reports: &[PerturbedReport]) -> Result<Self> {
        let lengths: Vec<usize> = header.params.iter().map(|p| p.m).collect();
        let (word_offsets, stride) = layout(&lengths);
        let mut words = Vec::with_capacity(stride * reports.len());
        for (i, r) in reports.iter().enumerate() {
            if r.segments().len() != lengths.len() {
                return Err(Error::Shape(format!(
                    "report {i} has {} segments, expected {}",
                    r.segments().len(),
                    lengths.len()
                )));
            }
            for (j, (seg, &m)) in r.segments().iter().zip(&lengths).enumerate() {
                if seg.len() != m {
                    return Err(Error::Shape(format!("report {i} segment {j} has {} bits, expected {m}", seg.len())));
                }
                words.extend_from_slice(seg.words());
            }
        }
        header.n = reports.len();
        Ok(ReportSet { header, word_offsets, stride, words })
    }

    /// Concatenates batches; all must carry the same header.
    pub fn merge(sets: Vec<ReportSet>) -> Result<Self> {
        let mut iter = sets.into_iter();
        let mut first = iter.next().ok_or_else(|| Error::InvalidParameter("nothing to merge".into()))?;
        for s in iter {
            if !first.header.compatible(&s.header) {
                return Err(Error::MixedHeaders);
            }
            first.words.extend_from_slice(&s.words);
            first.header.n += s.header.n;
        }
        Ok(first)
    }

    pub fn header(&self) -> &ReportHeader {
        &self.header
    }

    pub fn schema(&self) -> &Schema {
        &self.header.schema
    }

    pub fn flip_probability(&self) -> f64 {
        self.header.f
    }

    pub fn len(&self) -> usize {
        self.header.n
    }

    pub fn is_empty(&self) -> bool {
        self.header.n == 0
    }

    pub fn bits_per_report(&self) -> usize {
        self.header.params.iter().map(|p| p.m).sum()
    }

    pub(crate) fn segment_words(&self, i: usize, j: usize) -> &[u64] {
        let start = i * self.stride + self.word_offsets[j];
        &self.words[start..start + words_for(self.header.params[j].m)]
    }

    pub fn segment(&self, i: usize, j: usize) -> Bits {
        Bits::from_words(self.header.params[j].m, self.segment_words(i, j))
    }

    pub fn report(&self, i: usize) -> PerturbedReport {
        PerturbedReport::new((0..self.header.params.len()).map(|j| self.segment(i, j)).collect())
    }

    /// Keeps only the reports at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ReportSet {
        let mut words = Vec::with_capacity(indices.len() * self.stride);
        for &i in indices {
            words.extend_from_slice(&self.words[i * self.stride..(i + 1) * self.stride]);
        }
        let mut header = self.header.clone();
        header.n = indices.len();
        ReportSet { header, word_offsets: self.word_offsets.clone(), stride: self.stride, words }
    }

    /// Replays the client hash functions from the header.
    pub fn filter_bank(&self) -> Result<FilterBank> {
        FilterBank::replay(&self.header.schema, self.header.params.clone())
    }

    /// Text form: a `#` header block followed by `index<TAB>bits` lines.
    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "#schema_digest\t{}", h.schema_digest).unwrap();
        writeln!(out, "#n\t{}", h.n).unwrap();
        writeln!(out, "#f\t{}", h.f).unwrap();
        writeln!(out, "#p\t{}", h.p).unwrap();
        for (a, p) in h.schema.attributes().iter().zip(&h.params) {
            writeln!(
                out,
                "#attribute\t{}\t{}\t{}\t{}\t{}",
                a.name(),
                p.m,
                p.h,
                hex::encode(&p.salt),
                serde_json::to_string(a.values()).expect("labels serialize")
            )
            .unwrap();
        }
        for i in 0..h.n {
            write!(out, "{i}\t").unwrap();
            for j in 0..h.params.len() {
                write!(out, "{}", self.segment(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::ReportFormat { line, message };
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(err(1, format!("expected `{MAGIC}`"))),
        }
        let mut digest = None;
        let mut n = None;
        let mut f = None;
        let mut p = None;
        let mut domains = Vec::new();
        let mut params = Vec::new();
        let mut body = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let fields: Vec<&str> = rest.split('\t').collect();
                match fields[0] {
                    "schema_digest" if fields.len() == 2 => digest = Some(fields[1].to_string()),
                    "n" if fields.len() == 2 => {
                        n = Some(fields[1].parse::<usize>().map_err(|e| err(no, e.to_string()))?)
                    }
                    "f" if fields.len() == 2 => f = Some(fields[1].parse::<f64>().map_err(|e| err(no, e.to_string()))?),
                    "p" if fields.len() == 2 => p = Some(fields[1].parse::<f64>().map_err(|e| err(no, e.to_string()))?),
                    "attribute" if fields.len() == 6 => {
                        let m = fields[2].parse::<usize>().map_err(|e| err(no, e.to_string()))?;
                        let h = fields[3].parse::<usize>().map_err(|e| err(no, e.to_string()))?;
                        let salt = hex::decode(fields[4]).map_err(|e| err(no, e.to_string()))?;
                        let values: Vec<String> = serde_json::from_str(fields[5]).map_err(|e| err(no, e.to_string()))?;
                        domains.push(AttributeDomain::new(fields[1], values)?);
                        params.push(BloomParams { m, h, p: f64::NAN, salt });
                    }
                    other => return Err(err(no, format!("unrecognized header line `#{other}`"))),
                }
                continue;
            }
            body.push((no, line));
        }
        let digest = digest.ok_or_else(|| err(0, "missing #schema_digest".into()))?;
        let n = n.ok_or_else(|| err(0, "missing #n".into()))?;
        let f = f.ok_or_else(|| err(0, "missing #f".into()))?;
        let p = p.ok_or_else(|| err(0, "missing #p".into()))?;
        for par in &mut params {
            par.p = p;
        }
        let schema = Schema::new(domains)?;
        if schema.digest() != digest {
            return Err(err(0, "schema digest does not match the recorded attributes".into()));
        }
        if body.len() != n {
            return Err(err(0, format!("header announces {n} reports, found {}", body.len())));
        }
        let lengths: Vec<usize> = params.iter().map(|p| p.m).collect();
        let total: usize = lengths.iter().sum();
        let mut reports = Vec::with_capacity(n);
        for (expected, (no, line)) in body.into_iter().enumerate() {
            let (idx, bits) = line.split_once('\t').ok_or_else(|| err(no, "expected index<TAB>bits".into()))?;
            let idx: usize = idx.trim().parse().map_err(|e: std::num::ParseIntError| err(no, e.to_string()))?;
            if idx != expected {
                return Err(err(no, format!("record index {idx} out of order, expected {expected}")));
            }
            let bits = bits.trim_end();
            if bits.len() != total {
                return Err(err(no, format!("report has {} bits, expected {total}", bits.len())));
            }
            let mut segments = Vec::with_capacity(lengths.len());
            let mut offset = 0;
            for &m in &lengths {
                segments.push(Bits::parse(&bits[offset..offset + m]).map_err(|e| err(no, e.to_string()))?);
                offset += m;
            }
            reports.push(PerturbedReport::new(segments));
        }
        let header = ReportHeader { schema, schema_digest: digest, params, f, p, n };
        ReportSet::from_reports(header, &reports)
    }
}

fn layout(lengths: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &m in lengths {
        offsets.push(acc);
        acc += words_for(m);
    }
    (offsets, acc)
}
