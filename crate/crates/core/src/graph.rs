//! Self-tuning k-nearest-neighbor similarity graphs and their Laplacians.
//!
//! Construction follows three steps:
//!
//! 1. exact brute-force k-NN search under the angular or Euclidean metric,
//! 2. directed weights `w_ij = exp(-4 |x_i - x_j|^2 / d_k(x_i)^2)` on each of
//!    node `i`'s neighbor edges, where `d_k(x_i)` is the distance to its k-th
//!    neighbor,
//! 3. symmetrization `W <- W + W^T`.
//!
//! The angular metric is the Euclidean distance between unit-normalized rows.
//! Ties between equidistant neighbors go to the lower index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Angular,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angular" => Ok(Metric::Angular),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric {other:?}, expected one of {{angular,euclidean}}"
            ))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Angular => "angular",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Kernel {
    /// Bandwidth at node `i` is its k-th neighbor distance.
    #[default]
    SelfTuning,
    /// `w_ij = exp(-|x_i - x_j|^2 / sigma^2)` with one global width.
    GlobalSigma(f64),
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::SelfTuning => "selftuning",
            Kernel::GlobalSigma(_) => "global-sigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub metric: Metric,
    pub kernel: Kernel,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            metric: Metric::Angular,
            kernel: Kernel::SelfTuning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LaplacianKind {
    /// `L = D - W`
    #[default]
    Unnormalized,
    /// `L_n = I - D^{-1/2} W D^{-1/2}`
    SymmetricNormalized,
    /// `L_r = I - D^{-1} W`
    RandomWalk,
}

impl LaplacianKind {
    pub fn code(self) -> u8 {
        match self {
            LaplacianKind::Unnormalized => 0,
            LaplacianKind::SymmetricNormalized => 1,
            LaplacianKind::RandomWalk => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LaplacianKind::Unnormalized),
            1 => Some(LaplacianKind::SymmetricNormalized),
            2 => Some(LaplacianKind::RandomWalk),
            _ => None,
        }
    }

    pub fn is_symmetric(self) -> bool {
        self != LaplacianKind::RandomWalk
    }
}

impl FromStr for LaplacianKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unnormalized" => Ok(LaplacianKind::Unnormalized),
            "normalized" | "symmetric" | "symmetric-normalized" => {
                Ok(LaplacianKind::SymmetricNormalized)
            }
            "random-walk" | "randomwalk" => Ok(LaplacianKind::RandomWalk),
            other => Err(Error::InvalidParameter(format!(
                "unknown laplacian {other:?}, expected one of {{unnormalized,normalized,random-walk}}"
            ))),
        }
    }
}

impl std::fmt::Display for LaplacianKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LaplacianKind::Unnormalized => "unnormalized",
            LaplacianKind::SymmetricNormalized => "normalized",
            LaplacianKind::RandomWalk => "random-walk",
        })
    }
}

/// `||x/|x| - y/|y|||_2`, in `[0, 2]`.
pub fn angular_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    if ny == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (a / nx - b / ny).powi(2))
        .sum::<f64>()
        .sqrt())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-node neighbor lists, each sorted by ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Distance from node `i` to its k-th nearest neighbor.
    pub fn kth_distance(&self, i: usize) -> f64 {
        self.distances[(i + 1) * self.k - 1]
    }
}

fn prepared_rows(features: &FeatureMatrix, metric: Metric) -> Result<Vec<f64>> {
    let d = features.d();
    let mut rows: Vec<f64> = features.values().iter().map(|&v| f64::from(v)).collect();
    if metric == Metric::Angular {
        for (i, row) in rows.chunks_exact_mut(d).enumerate() {
            let nrm = norm(row);
            if nrm == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            row.iter_mut().for_each(|v| *v /= nrm);
        }
    }
    Ok(rows)
}

/// Exact k nearest neighbors of every row, excluding the row itself.
pub fn knn_search(features: &FeatureMatrix, k: usize, metric: Metric) -> Result<Neighbors> {
    let n = features.n();
    let d = features.d();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "k must satisfy 1 <= k <= n - 1 = {}, got {k}",
            n.saturating_sub(1)
        )));
    }
    let rows = prepared_rows(features, metric)?;
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let xi = &rows[i * d..(i + 1) * d];
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i).map(|j| {
            let xj = &rows[j * d..(j + 1) * d];
            let sq: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            (sq, j)
        }));
        let by_distance_then_index =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_distance_then_index);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(by_distance_then_index);
        for &(sq, j) in &candidates {
            indices.push(j);
            distances.push(sq.sqrt());
        }
    }
    Ok(Neighbors {
        k,
        indices,
        distances,
    })
}

/// Sparse symmetric non-negative weight matrix with cached degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    weights: CsrMatrix,
    degrees: Vec<f64>,
    k: Option<usize>,
}

impl SimilarityGraph {
    /// Build from undirected edges; repeated edges accumulate, self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::NodeOutOfRange { node: i.max(j), n });
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) has invalid weight {w}"
                )));
            }
            if i == j {
                continue;
            }
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        Ok(Self::from_adjacency(adjacency, None))
    }

    fn from_adjacency(mut adjacency: Vec<Vec<(usize, f64)>>, k: Option<usize>) -> Self {
        let n = adjacency.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut adjacency {
            // stable: contributions to one entry are summed in insertion order
            row.sort_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, w) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += w;
                } else {
                    cols.push(j);
                    values.push(w);
                    last = Some(j);
                }
            }
            row_ptr.push(cols.len());
        }
        let weights = CsrMatrix::from_parts(n, row_ptr, cols, values);
        let degrees = (0..n).map(|i| weights.row(i).1.iter().sum()).collect();
        Self {
            weights,
            degrees,
            k,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.n()
    }

    /// Stored nonzeros (both triangles).
    pub fn nnz(&self) -> usize {
        self.weights.nnz()
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn weights(&self) -> &CsrMatrix {
        &self.weights
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn neighbors(&self, i: usize) -> (&[usize], &[f64]) {
        self.weights.row(i)
    }

    /// Component label per node and the size of each component.
    pub fn components(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            comp[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                size += 1;
                for &j in self.weights.row(i).0 {
                    if comp[j] == usize::MAX {
                        comp[j] = id;
                        stack.push(j);
                    }
                }
            }
            sizes.push(size);
        }
        (comp, sizes)
    }

    pub fn ensure_connected(&self) -> Result<()> {
        let (_, sizes) = self.components();
        if sizes.len() > 1 {
            return Err(Error::Disconnected {
                component_sizes: sizes,
            });
        }
        if let Some(node) = self.degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::ZeroDegree { node });
        }
        Ok(())
    }

    /// `L x` for the unnormalized Laplacian, without materializing `L`.
    pub fn laplacian_matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.weights.row(i);
            let wx: f64 = cols.iter().zip(vals).map(|(&j, &w)| w * x[j]).sum();
            *yi = self.degrees[i] * x[i] - wx;
        }
    }

    /// SHA-256 over the sparse structure and weight bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        for i in 0..self.n() {
            let (cols, vals) = self.weights.row(i);
            h.update((cols.len() as u64).to_le_bytes());
            for (&j, &w) in cols.iter().zip(vals) {
                h.update((j as u64).to_le_bytes());
                h.update(w.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Coordinate-list text: header `n nnz`, then `i j w` for each edge with `i < j`.
    pub fn to_text(&self) -> String {
        let edges: Vec<(usize, usize, f64)> = (0..self.n())
            .flat_map(|i| {
                let (cols, vals) = self.weights.row(i);
                cols.iter()
                    .zip(vals)
                    .filter(move |(&j, _)| j > i)
                    .map(move |(&j, &w)| (i, j, w))
            })
            .collect();
        let mut out = String::new();
        writeln!(out, "{} {}", self.n(), edges.len()).unwrap();
        for (i, j, w) in edges {
            writeln!(out, "{i} {j} {w}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "malformed header: empty graph file"))?;
        let mut parts = header.split_whitespace();
        let mut field = |name: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse("line 1", format!("malformed header: missing {name}")))
        };
        let n = field("n")?;
        let nnz = field("nnz")?;
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut count = 0;
        for (line_no, line) in lines {
            let loc = || format!("line {}", line_no + 1);
            let mut parts = line.split_whitespace();
            let i: usize = parse_token(parts.next(), &loc, "i")?;
            let j: usize = parse_token(parts.next(), &loc, "j")?;
            let w: f64 = parse_token(parts.next(), &loc, "w")?;
            if i >= j || j >= n {
                return Err(Error::parse(loc(), format!("edge ({i}, {j}) must satisfy i < j < n")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::parse(loc(), format!("invalid weight {w}")));
            }
            if adjacency[i].last().is_some_and(|&(prev, _)| prev >= j)
                || adjacency[i].iter().any(|&(c, _)| c == j)
            {
                return Err(Error::parse(loc(), format!("duplicate or unsorted edge ({i}, {j})")));
            }
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
            count += 1;
        }
        if count != nnz {
            return Err(Error::parse(
                "header",
                format!("header declares {nnz} edges but file lists {count}"),
            ));
        }
        Ok(Self::from_adjacency(adjacency, None))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_token<T: FromStr>(tok: Option<&str>, loc: &dyn Fn() -> String, name: &str) -> Result<T> {
    tok.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(loc(), format!("missing or malformed {name}")))
}

/// Build the symmetrized k-NN similarity graph. Fails if the result is disconnected.
pub fn build_graph(features: &FeatureMatrix, config: &GraphConfig) -> Result<SimilarityGraph> {
    if let Kernel::GlobalSigma(sigma) = config.kernel {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
    }
    let neighbors = knn_search(features, config.k, config.metric)?;
    let graph = graph_from_neighbors(&neighbors, config.kernel);
    graph.ensure_connected()?;
    Ok(graph)
}

/// Weight the directed neighbor edges and symmetrize, without a connectivity check.
pub fn graph_from_neighbors(neighbors: &Neighbors, kernel: Kernel) -> SimilarityGraph {
    let n = neighbors.n();
    let k = neighbors.k();
    let mut adjacency: Vec<Vec<(usize, f64)>> = (0..n).map(|_| Vec::with_capacity(2 * k)).collect();
    for i in 0..n {
        let dk = neighbors.kth_distance(i);
        for (&j, &dist) in neighbors.indices(i).iter().zip(neighbors.distances(i)) {
            let w = edge_weight(dist, dk, kernel);
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
    }
    SimilarityGraph::from_adjacency(adjacency, Some(k))
}

fn edge_weight(dist: f64, kth: f64, kernel: Kernel) -> f64 {
    match kernel {
        // every neighbor of a node with d_k = 0 is an exact duplicate
        Kernel::SelfTuning if kth == 0.0 => 1.0,
        Kernel::SelfTuning => (-4.0 * dist * dist / (kth * kth)).exp(),
        Kernel::GlobalSigma(sigma) => (-dist * dist / (sigma * sigma)).exp(),
    }
}

/// Materialize one of the three Laplacian variants.
pub fn laplacian(graph: &SimilarityGraph, kind: LaplacianKind) -> Result<CsrMatrix> {
    let n = graph.n();
    let degrees = graph.degrees();
    if let Some(node) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroDegree { node });
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(graph.nnz() + n);
    let mut values = Vec::with_capacity(graph.nnz() + n);
    row_ptr.push(0);
    for i in 0..n {
        let (wc, wv) = graph.neighbors(i);
        let diag = match kind {
            LaplacianKind::Unnormalized => degrees[i],
            _ => 1.0,
        };
        let mut diag_done = false;
        for (&j, &w) in wc.iter().zip(wv) {
            if !diag_done && j > i {
                cols.push(i);
                values.push(diag);
                diag_done = true;
            }
            let off = match kind {
                LaplacianKind::Unnormalized => -w,
                LaplacianKind::SymmetricNormalized => -w / (degrees[i] * degrees[j]).sqrt(),
                LaplacianKind::RandomWalk => -w / degrees[i],
            };
            cols.push(j);
            values.push(off);
        }
        if !diag_done {
            cols.push(i);
            values.push(diag);
        }
        row_ptr.push(cols.len());
    }
    Ok(CsrMatrix::from_parts(n, row_ptr, cols, values))
}
