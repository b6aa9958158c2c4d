//! Structure learning: pairwise mutual information, dependency graphs,
//! entropy-based pruning, and junction-tree decomposition.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{FilterBank, ReportSet};
use crate::error::{Error, Result};
use crate::estimate::{estimate, AttributeCluster, EstimateOptions, JointDistribution, Method};

/// Natural-log mutual information of a two-attribute table. Marginals are
/// taken from the table itself; empty cells contribute nothing.
pub fn mutual_information(joint: &JointDistribution) -> Result<f64> {
    if joint.cardinalities.len() != 2 {
        return Err(Error::Shape(format!(
            "mutual information needs a two-attribute table, got {} attributes",
            joint.cardinalities.len()
        )));
    }
    Ok(table_mutual_information(&joint.probs, joint.cardinalities[0], joint.cardinalities[1]))
}

pub(crate) fn table_mutual_information(probs: &[f64], rows: usize, cols: usize) -> f64 {
    let mut row_sum = vec![0.0; rows];
    let mut col_sum = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            row_sum[r] += probs[r * cols + c];
            col_sum[c] += probs[r * cols + c];
        }
    }
    let mut mi = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = probs[r * cols + c];
            if p > 0.0 {
                mi += p * (p / (row_sum[r] * col_sum[c])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Edge threshold `min(|Ω_m| − 1, |Ω_n| − 1) · φ² / 2`.
pub fn dependency_threshold(card_m: usize, card_n: usize, phi: f64) -> f64 {
    (card_m.min(card_n) as f64 - 1.0) * phi * phi / 2.0
}

fn check_phi(phi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidParameter(format!("dependency degree must lie in [0,1], got {phi}")));
    }
    Ok(())
}

/// Undirected attribute graph. The diagonal is stored as set (a variable
/// depends on itself) and ignored by every graph algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct DependencyGraph {
    adjacency: Vec<Vec<bool>>,
    phi: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    phi: f64,
    adjacency: Vec<Vec<u8>>,
}

impl TryFrom<RawGraph> for DependencyGraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        let d = raw.adjacency.len();
        let mut g = DependencyGraph::empty(d, raw.phi);
        for (a, row) in raw.adjacency.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Shape(format!("adjacency row {a} has {} entries, expected {d}", row.len())));
            }
            for (b, &v) in row.iter().enumerate() {
                if a != b && (v != 0) != (raw.adjacency[b][a] != 0) {
                    return Err(Error::Shape(format!("adjacency is not symmetric at ({a},{b})")));
                }
                if a != b && v != 0 {
                    g.adjacency[a][b] = true;
                }
            }
        }
        Ok(g)
    }
}

impl From<DependencyGraph> for RawGraph {
    fn from(g: DependencyGraph) -> Self {
        RawGraph {
            phi: g.phi,
            adjacency: g.adjacency.iter().map(|row| row.iter().map(|&b| b as u8).collect()).collect(),
        }
    }
}

impl DependencyGraph {
    pub fn empty(d: usize, phi: f64) -> Self {
        let mut adjacency = vec![vec![false; d]; d];
        for (i, row) in adjacency.iter_mut().enumerate() {
            row[i] = true;
        }
        DependencyGraph { adjacency, phi }
    }

    pub fn from_edges(d: usize, phi: f64, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = DependencyGraph::empty(d, phi);
        for &(a, b) in edges {
            if a >= d || b >= d || a == b {
                return Err(Error::InvalidParameter(format!("invalid edge ({a},{b}) for {d} attributes")));
            }
            g.set_edge(a, b, true);
        }
        Ok(g)
    }

    pub fn dimensions(&self) -> usize {
        self.adjacency.len()
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a != b && self.adjacency[a][b]
    }

    pub fn set_edge(&mut self, a: usize, b: usize, present: bool) {
        if a != b {
            self.adjacency[a][b] = present;
            self.adjacency[b][a] = present;
        }
    }

    /// Edges as `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.dimensions();
        (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).filter(|&(a, b)| self.adjacency[a][b]).collect()
    }

    pub fn neighbors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.dimensions()).filter(move |&b| self.has_edge(a, b))
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Binary,
    NonBinary,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(DatasetKind::Binary),
            "non-binary" | "nonbinary" | "categorical" => Ok(DatasetKind::NonBinary),
            other => Err(Error::InvalidParameter(format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Binary => "binary",
            DatasetKind::NonBinary => "non-binary",
        })
    }
}

/// Which attribute pairs get an MI test, and what untested pairs default to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub kind: DatasetKind,
    /// `H(A_j) / |Ω_j|` from the one-way estimates.
    pub relative_entropy: Vec<f64>,
    /// Attributes whose pairs are tested, ascending.
    pub kept: Vec<usize>,
    pub tested_pairs: Vec<(usize, usize)>,
    /// Edge state assumed for pairs that are not tested.
    pub untested_edge: bool,
    pub pairs_total: usize,
    /// False when too few attributes would survive and every pair is tested.
    pub active: bool,
}

impl PruningPlan {
    /// Every pair tested, untested default irrelevant.
    pub fn full(d: usize) -> Self {
        PruningPlan {
            kind: DatasetKind::NonBinary,
            relative_entropy: Vec::new(),
            kept: (0..d).collect(),
            tested_pairs: all_pairs(d),
            untested_edge: false,
            pairs_total: d * d.saturating_sub(1) / 2,
            active: false,
        }
    }

    pub fn reduction_ratio(&self) -> f64 {
        if self.pairs_total == 0 {
            return 0.0;
        }
        1.0 - self.tested_pairs.len() as f64 / self.pairs_total as f64
    }
}

fn all_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect()
}

/// Ranks attributes by relative entropy and keeps `⌊d(1 − φ)⌋` of them.
///
/// Non-binary data keeps the highest-ranked attributes and treats pairs
/// outside the kept set as independent. Binary data starts from a fully
/// dependent graph and only tests pairs among the lowest-ranked attributes,
/// so pairs outside that set stay dependent.
pub fn prune_pairs(
    reports: &ReportSet,
    bank: &FilterBank,
    phi: f64,
    kind: DatasetKind,
    method: Method,
    opts: &EstimateOptions,
) -> Result<PruningPlan> {
    check_phi(phi)?;
    let d = reports.schema().dimensions();
    let relative_entropy: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|j| {
            let est = estimate(method, reports, bank, &AttributeCluster::new(vec![j])?, opts)?;
            Ok(entropy(&est.distribution.probs) / est.distribution.cells() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(plan_from_entropy(relative_entropy, phi, kind))
}

pub(crate) fn plan_from_entropy(relative_entropy: Vec<f64>, phi: f64, kind: DatasetKind) -> PruningPlan {
    let d = relative_entropy.len();
    let keep = (d as f64 * (1.0 - phi) + 1e-9).floor() as usize;
    if keep < 2 || keep >= d {
        return PruningPlan { kind, relative_entropy, ..PruningPlan::full(d) };
    }
    let mut order: Vec<usize> = (0..d).collect();
    match kind {
        DatasetKind::NonBinary => order.sort_by(|&a, &b| relative_entropy[b].total_cmp(&relative_entropy[a])),
        DatasetKind::Binary => order.sort_by(|&a, &b| relative_entropy[a].total_cmp(&relative_entropy[b])),
    }
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let tested_pairs = kept.iter().enumerate().flat_map(|(i, &a)| kept[i + 1..].iter().map(move |&b| (a, b))).collect();
    PruningPlan {
        kind,
        relative_entropy,
        kept,
        tested_pairs,
        untested_edge: kind == DatasetKind::Binary,
        pairs_total: d * (d - 1) / 2,
        active: true,
    }
}

/// Outcome of one pairwise test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDependence {
    pub pair: (usize, usize),
    pub mutual_information: f64,
    pub threshold: f64,
    pub edge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyAnalysis {
    pub graph: DependencyGraph,
    pub method: Method,
    pub pairs: Vec<PairDependence>,
    pub pruning: PruningPlan,
    pub warnings: Vec<String>,
}

/// Estimates the two-way table of every tested pair and draws an edge where
/// the mutual information reaches the threshold. A pair whose estimate fails
/// gets no edge and a warning.
pub fn build_dependency_graph(
    reports: &ReportSet,
    bank: &FilterBank,
    phi: f64,
    method: Method,
    opts: &EstimateOptions,
    pruning: Option<PruningPlan>,
) -> Result<DependencyAnalysis> {
    check_phi(phi)?;
    let schema = reports.schema();
    let d = schema.dimensions();
    let pruning = pruning.unwrap_or_else(|| PruningPlan::full(d));
    let cards = schema.cardinalities();
    let results: Vec<(std::result::Result<PairDependence, String>, (usize, usize))> = pruning
        .tested_pairs
        .par_iter()
        .map(|&(a, b)| {
            let outcome = AttributeCluster::new(vec![a, b])
                .and_then(|c| estimate(method, reports, bank, &c, opts))
                .and_then(|est| mutual_information(&est.distribution))
                .map(|mi| {
                    let threshold = dependency_threshold(cards[a], cards[b], phi);
                    PairDependence { pair: (a, b), mutual_information: mi, threshold, edge: mi >= threshold }
                })
                .map_err(|e| e.to_string());
            (outcome, (a, b))
        })
        .collect();

    let mut graph = DependencyGraph::empty(d, phi);
    if pruning.untested_edge {
        for (a, b) in all_pairs(d) {
            graph.set_edge(a, b, true);
        }
    }
    let mut pairs = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (outcome, (a, b)) in results {
        match outcome {
            Ok(p) => {
                graph.set_edge(a, b, p.edge);
                pairs.push(p);
            }
            Err(e) => {
                graph.set_edge(a, b, false);
                warnings.push(format!("pair ({a},{b}) skipped: {e}"));
            }
        }
    }
    Ok(DependencyAnalysis { graph, method, pairs, pruning, warnings })
}

/// Cliques of a triangulated dependency graph joined into a forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionTree {
    pub cliques: Vec<AttributeCluster>,
    /// `(a, b)` clique indices with `a < b`.
    pub tree_edges: Vec<(usize, usize)>,
    /// Intersection of the two cliques of the matching tree edge.
    pub separators: Vec<Vec<usize>>,
    /// Edges added by triangulation.
    pub fill_edges: Vec<(usize, usize)>,
}

impl JunctionTree {
    /// Attributes covered by the cliques.
    pub fn dimensions(&self) -> usize {
        self.cliques.iter().flat_map(|c| c.indices().iter().copied()).max().map_or(0, |m| m + 1)
    }

    pub fn neighbors(&self, clique: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .tree_edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == clique {
                    Some(b)
                } else if b == clique {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Checks cover of `0..d`, forest shape, separator consistency and the
    /// running intersection property.
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        let l = self.cliques.len();
        for j in 0..d {
            if !self.cliques.iter().any(|c| c.contains(j)) {
                return bad(format!("attribute {j} is in no clique"));
            }
        }
        if let Some(c) = self.cliques.iter().find(|c| c.indices().iter().any(|&j| j >= d)) {
            return bad(format!("clique {:?} names an attribute beyond {d}", c.indices()));
        }
        if self.separators.len() != self.tree_edges.len() {
            return bad("one separator per tree edge".into());
        }
        let mut uf = UnionFind::new(l);
        for (&(a, b), sep) in self.tree_edges.iter().zip(&self.separators) {
            if a >= l || b >= l || a == b {
                return bad(format!("tree edge ({a},{b}) is invalid"));
            }
            if !uf.union(a, b) {
                return bad("tree edges form a cycle".into());
            }
            if *sep != intersection(&self.cliques[a], &self.cliques[b]) {
                return bad(format!("separator of ({a},{b}) is not the clique intersection"));
            }
        }
        for j in 0..d {
            let holders: Vec<usize> = (0..l).filter(|&c| self.cliques[c].contains(j)).collect();
            let mut sub = UnionFind::new(l);
            let mut joins = 0;
            for &(a, b) in &self.tree_edges {
                if self.cliques[a].contains(j) && self.cliques[b].contains(j) && sub.union(a, b) {
                    joins += 1;
                }
            }
            if joins + 1 != holders.len() {
                return bad(format!("cliques holding attribute {j} are not connected in the tree"));
            }
        }
        Ok(())
    }
}

fn intersection(a: &AttributeCluster, b: &AttributeCluster) -> Vec<usize> {
    a.indices().iter().copied().filter(|&j| b.contains(j)).collect()
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// False if already joined.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Triangulates by min-fill elimination (ties to the lower index), keeps the
/// maximal elimination cliques, and links them by a maximum-weight spanning
/// forest on separator size.
pub fn junction_tree(graph: &DependencyGraph) -> JunctionTree {
    let d = graph.dimensions();
    let mut adj: Vec<BTreeSet<usize>> = (0..d).map(|a| graph.neighbors(a).collect()).collect();
    let mut alive = vec![true; d];
    let mut candidates: Vec<BTreeSet<usize>> = Vec::with_capacity(d);
    let mut fill_edges = Vec::new();
    for _ in 0..d {
        let v = (0..d)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (fill_in(&adj, v), v))
            .expect("a vertex remains");
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for (i, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[i + 1..] {
                if adj[a].insert(b) {
                    adj[b].insert(a);
                    fill_edges.push((a.min(b), a.max(b)));
                }
            }
        }
        let mut clique: BTreeSet<usize> = adj[v].clone();
        clique.insert(v);
        candidates.push(clique);
        for &a in &nbrs {
            adj[a].remove(&v);
        }
        adj[v].clear();
        alive[v] = false;
    }
    fill_edges.sort_unstable();

    let mut maximal: Vec<BTreeSet<usize>> = Vec::new();
    for c in &candidates {
        if !candidates.iter().any(|o| o.len() > c.len() && c.is_subset(o)) && !maximal.contains(c) {
            maximal.push(c.clone());
        }
    }
    maximal.sort_by(|a, b| a.iter().cmp(b.iter()));
    let cliques: Vec<AttributeCluster> = maximal
        .iter()
        .map(|c| AttributeCluster::new(c.iter().copied().collect()).expect("non-empty clique"))
        .collect();

    let l = cliques.len();
    let mut links: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..l {
        for b in a + 1..l {
            let w = maximal[a].intersection(&maximal[b]).count();
            if w > 0 {
                links.push((w, a, b));
            }
        }
    }
    links.sort_by(|x, y| y.0.cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut uf = UnionFind::new(l);
    let mut tree_edges = Vec::new();
    let mut separators = Vec::new();
    for (_, a, b) in links {
        if uf.union(a, b) {
            tree_edges.push((a, b));
            separators.push(intersection(&cliques[a], &cliques[b]));
        }
    }
    JunctionTree { cliques, tree_edges, separators, fill_edges }
}

fn fill_in(adj: &[BTreeSet<usize>], v: usize) -> usize {
    let nbrs: Vec<usize> = adj[v].iter().copied().collect();
    let mut missing = 0;
    for (i, &a) in nbrs.iter().enumerate() {
        for &b in &nbrs[i + 1..] {
            if !adj[a].contains(&b) {
                missing += 1;
            }
        }
    }
    missing
}
