use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lopub::encode::{Encoder, FilterBank, ReportSet};
use lopub::estimate::{estimate as estimate_cluster, AttributeCluster, Estimate, EstimateOptions, Method};
use lopub::eval::{
    bench as run_bench, run_pipeline, subsample, sweep, to_csv, BenchConfig, PipelineConfig, PipelineRun, SweepAxis,
};
use lopub::reduce::{
    build_dependency_graph, junction_tree, prune_pairs, DependencyAnalysis, DependencyGraph, JunctionTree,
    PairDependence, PruningPlan,
};
use lopub::schema::Schema;
use lopub::synthesize::{synthesize as run_synthesis, SynthesisConfig, SyntheticDataset};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::source::{self, SourceSpec};
use crate::{BenchArgs, DepsArgs, E2eArgs, EncodeArgs, EstimateArgs, EvalArgs, Global, SynthesizeArgs};

/// Output of `deps`, input of `synthesize`. Indices are zero-based.
#[derive(Debug, Serialize, Deserialize)]
struct DepsDocument {
    attributes: Vec<String>,
    schema_digest: String,
    phi: f64,
    method: Method,
    graph: DependencyGraph,
    pairs: Vec<PairDependence>,
    pruning: PruningPlan,
    tree: JunctionTree,
    warnings: Vec<String>,
}

impl DepsDocument {
    fn new(schema: &Schema, method: Method, deps: DependencyAnalysis, tree: JunctionTree) -> Self {
        DepsDocument {
            attributes: schema.attributes().iter().map(|a| a.name().to_string()).collect(),
            schema_digest: schema.digest(),
            phi: deps.graph.phi(),
            method,
            graph: deps.graph,
            pairs: deps.pairs,
            pruning: deps.pruning,
            tree,
            warnings: deps.warnings,
        }
    }
}

fn seed(g: &Global) -> u64 {
    g.seed.unwrap_or(0)
}

fn out_path(g: &Global, p: &Path) -> Result<PathBuf> {
    let path = match &g.out_dir {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    };
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(path)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_reports(path: &Path) -> Result<(ReportSet, FilterBank)> {
    let reports = ReportSet::parse(&source::read(path)?).with_context(|| format!("invalid reports {}", path.display()))?;
    let bank = reports.filter_bank()?;
    Ok((reports, bank))
}

/// Cluster members given as 1-based positions or attribute names.
fn parse_cluster(schema: &Schema, items: &[String]) -> Result<AttributeCluster> {
    let d = schema.dimensions();
    let indices = items
        .iter()
        .map(|item| {
            let item = item.trim();
            if let Some(j) = schema.position(item) {
                return Ok(j);
            }
            match item.parse::<usize>() {
                Ok(k) if (1..=d).contains(&k) => Ok(k - 1),
                Ok(k) => bail!("attribute position {k} outside 1..={d}"),
                Err(_) => bail!("unknown attribute `{item}`"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cluster = AttributeCluster::new(indices.clone())?;
    if cluster.len() != indices.len() {
        bail!("cluster lists an attribute twice");
    }
    Ok(cluster)
}

pub fn encode(g: &Global, a: EncodeArgs) -> Result<()> {
    let seed = seed(g);
    let data = source::load_files(&a.schema, &a.data)?;
    let data = subsample(&data, g.sample_rate.unwrap_or(1.0), seed)?;
    let bank = FilterBank::build(data.schema(), a.p, a.caps.as_deref())?;
    let encoder = Encoder::new(data.schema().clone(), bank, a.f)?;
    let reports = encoder.encode_dataset(&data, a.p, seed)?;
    write(&out_path(g, &a.out)?, &reports.to_text())
}

fn estimate_document(schema: &Schema, method: Method, est: &Estimate) -> serde_json::Value {
    let dist = &est.distribution;
    let cells: Vec<_> = (0..dist.cells())
        .map(|c| {
            let labels: Vec<&str> = dist
                .cluster
                .indices()
                .iter()
                .zip(dist.digits(c))
                .map(|(&j, v)| schema.attribute(j).values()[v].as_str())
                .collect();
            json!({ "labels": labels, "probability": dist.probs[c] })
        })
        .collect();
    let diag = &est.diagnostics;
    json!({
        "cluster": dist.cluster,
        "attributes": dist.cluster.indices().iter().map(|&j| schema.attribute(j).name()).collect::<Vec<_>>(),
        "method": method,
        "cells": cells,
        "diagnostics": {
            "em_iterations": diag.em_iterations,
            "em_converged": diag.em_converged,
            "skipped_reports": diag.skipped_reports,
            "lambda": diag.lambda,
            "solver_converged": diag.solver_converged,
            "support": diag.support,
            "warnings": diag.warnings,
        },
    })
}

pub fn estimate(g: &Global, a: EstimateArgs) -> Result<()> {
    let (reports, bank) = load_reports(&a.reports)?;
    let cluster = parse_cluster(reports.schema(), &a.cluster)?;
    let mut opts = EstimateOptions::default();
    if let Some(delta) = a.delta {
        opts.delta = delta;
    }
    let est = estimate_cluster(a.method, &reports, &bank, &cluster, &opts)?;
    warn_all(&est.diagnostics.warnings);
    write_json(&out_path(g, &a.out)?, &estimate_document(reports.schema(), a.method, &est))
}

pub fn deps(g: &Global, a: DepsArgs) -> Result<()> {
    let (reports, bank) = load_reports(&a.reports)?;
    let opts = EstimateOptions::default();
    let pruning = match a.prune {
        Some(kind) => Some(prune_pairs(&reports, &bank, a.phi, kind, a.method, &opts)?),
        None => None,
    };
    let analysis = build_dependency_graph(&reports, &bank, a.phi, a.method, &opts, pruning)?;
    warn_all(&analysis.warnings);
    let tree = junction_tree(&analysis.graph);
    let doc = DepsDocument::new(reports.schema(), a.method, analysis, tree);
    write_json(&out_path(g, &a.out)?, &doc)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_synthetic(path: &Path, synthetic: &SyntheticDataset) -> Result<()> {
    write(path, &synthetic.dataset.to_csv())?;
    write_json(&sidecar(path), &synthetic.metadata)
}

pub fn synthesize(g: &Global, a: SynthesizeArgs) -> Result<()> {
    let (reports, bank) = load_reports(&a.reports)?;
    let doc: DepsDocument = serde_json::from_str(&source::read(&a.deps)?)
        .with_context(|| format!("invalid dependency document {}", a.deps.display()))?;
    if doc.schema_digest != reports.schema().digest() {
        bail!("dependency document was built for a different schema");
    }
    let config = SynthesisConfig {
        method: a.method,
        n_out: a.n.unwrap_or(reports.len()),
        seed: seed(g),
        phi: Some(doc.phi),
    };
    let synthetic = run_synthesis(&reports, &bank, &doc.tree, &config, &EstimateOptions::default())?;
    warn_all(&synthetic.metadata.warnings);
    write_synthetic(&out_path(g, &a.out)?, &synthetic)
}

/// Writes every artifact of a pipeline run under the output directory.
fn write_run(g: &Global, run: &PipelineRun) -> Result<()> {
    let schema = run.source.schema();
    write(&out_path(g, Path::new("reports.txt"))?, &run.reports.to_text())?;
    let deps = DepsDocument::new(schema, run.report.config.method, run.dependencies.clone(), run.tree.clone());
    write_json(&out_path(g, Path::new("deps.json"))?, &deps)?;
    write_synthetic(&out_path(g, Path::new("synth.csv"))?, &run.synthetic)?;
    write_json(&out_path(g, Path::new("report.json"))?, &run.report)?;
    write_json(&out_path(g, Path::new("timings.json"))?, &run.timings)?;
    warn_all(&run.report.warnings);
    Ok(())
}

fn apply_globals(g: &Global, config: &mut PipelineConfig) {
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(r) = g.sample_rate {
        config.sample_rate = r;
    }
}

/// Evaluation document read by `eval`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalDocument {
    source: SourceSpec,
    #[serde(default)]
    pipeline: PipelineConfig,
    /// Flip probabilities for the metric-versus-f series.
    #[serde(default)]
    flip_series: Vec<f64>,
    /// Record counts for the metric-versus-N series.
    #[serde(default)]
    record_series: Vec<usize>,
    /// Estimator accuracy and time versus cluster size.
    #[serde(default)]
    bench: Option<BenchConfig>,
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<()> {
    let doc: EvalDocument = serde_json::from_str(&source::read(&a.config)?)
        .with_context(|| format!("invalid evaluation document {}", a.config.display()))?;
    let mut config = doc.pipeline;
    apply_globals(g, &mut config);
    let base = a.config.parent().unwrap_or(Path::new("."));
    let src = doc.source.load(base, config.seed)?;
    let truth = src.truth(config.phi);

    let run = run_pipeline(&src.data, truth.as_ref(), &config)?;
    write_run(g, &run)?;
    if !doc.flip_series.is_empty() {
        let rows = sweep(&src.data, truth.as_ref(), &config, &SweepAxis::Flip(doc.flip_series))?;
        write(&out_path(g, Path::new("series_f.csv"))?, &to_csv(&rows)?)?;
    }
    if !doc.record_series.is_empty() {
        let rows = sweep(&src.data, truth.as_ref(), &config, &SweepAxis::Records(doc.record_series))?;
        write(&out_path(g, Path::new("series_n.csv"))?, &to_csv(&rows)?)?;
    }
    if let Some(mut bench) = doc.bench {
        bench.seed = config.seed;
        let rows = run_bench(&src.data, &bench)?;
        write(&out_path(g, Path::new("series_k.csv"))?, &to_csv(&rows)?)?;
    }
    Ok(())
}

pub fn e2e(g: &Global, a: E2eArgs) -> Result<()> {
    let mut config = PipelineConfig {
        f: a.f,
        p: a.p,
        phi: a.phi,
        method: a.method,
        prune: a.prune,
        n_out: a.n,
        ..PipelineConfig::default()
    };
    apply_globals(g, &mut config);
    let src = a.source.load(config.seed)?;
    let truth = src.truth(config.phi);
    let run = run_pipeline(&src.data, truth.as_ref(), &config)?;
    write_run(g, &run)
}

pub fn bench(g: &Global, a: BenchArgs) -> Result<()> {
    let seed = seed(g);
    let src = a.source.load(seed)?;
    let data = subsample(&src.data, g.sample_rate.unwrap_or(1.0), seed)?;
    let config = BenchConfig {
        f: a.f,
        p: a.p,
        ks: a.ks,
        combos: a.combos,
        methods: a.methods,
        seed,
        ..BenchConfig::default()
    };
    let rows = run_bench(&data, &config)?;
    write(&out_path(g, &a.out)?, &to_csv(&rows)?)
}
