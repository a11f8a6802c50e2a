//! Laplace learning and Gaussian Regression on a similarity graph.
//!
//! Laplace learning fixes the labeled rows to their one-hot encodings and
//! solves the harmonic system `L_UU U_U = -L_UL Y` on the rest. Gaussian
//! Regression minimizes `<U, L U>_F + (1/gamma^2) sum_j ||u(j) - e_{y_j}||^2`,
//! whose optimizer solves `(gamma^2 L + P^T P) U = P^T Y`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::solver::{block_pcg, CgStats, SpdOperator};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_GAMMA: f64 = 0.5;

pub const NODE_FUNCTION_MAGIC: &[u8; 4] = b"GAUF";
pub const NODE_FUNCTION_VERSION: u32 = 1;

/// Labeled nodes in insertion order, with a dense lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelState {
    classes: usize,
    order: Vec<usize>,
    assigned: Vec<Option<usize>>,
}

impl LabelState {
    pub fn new(n: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidParameter("at least one class is required".into()));
        }
        Ok(Self {
            classes,
            order: Vec::new(),
            assigned: vec![None; n],
        })
    }

    pub fn from_pairs(n: usize, classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut state = Self::new(n, classes)?;
        for &(node, label) in pairs {
            state.insert(node, label)?;
        }
        Ok(state)
    }

    pub fn insert(&mut self, node: usize, label: usize) -> Result<()> {
        let n = self.assigned.len();
        if node >= n {
            return Err(Error::NodeOutOfRange { node, n });
        }
        if label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        if self.assigned[node].is_some() {
            return Err(Error::AlreadyLabeled { node });
        }
        self.assigned[node] = Some(label);
        self.order.push(node);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.assigned.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Labeled nodes in the order they were added.
    pub fn labeled(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.assigned.get(node).copied().flatten()
    }

    pub fn is_labeled(&self, node: usize) -> bool {
        self.label(node).is_some()
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.assigned
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_none())
            .map(|(i, _)| i)
    }

    /// `|L| x K` one-hot matrix, row-major, rows in insertion order.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.order.len() * self.classes];
        for (r, &node) in self.order.iter().enumerate() {
            y[r * self.classes + self.assigned[node].unwrap()] = 1.0;
        }
        y
    }
}

/// `n x K` real matrix; row `i` is the node function at node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFunction {
    n: usize,
    classes: usize,
    values: Vec<f64>,
}

impl NodeFunction {
    pub fn new(n: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * classes {
            return Err(Error::InvalidParameter(format!(
                "expected {} values for {n}x{classes}, got {}",
                n * classes,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("node function has non-finite entries".into()));
        }
        Ok(Self { n, classes, values })
    }

    pub fn zeros(n: usize, classes: usize) -> Self {
        Self {
            n,
            classes,
            values: vec![0.0; n * classes],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.values.len());
        out.extend_from_slice(NODE_FUNCTION_MAGIC);
        out.extend_from_slice(&NODE_FUNCTION_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != NODE_FUNCTION_MAGIC {
            return Err(Error::parse("header", "malformed node function header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != NODE_FUNCTION_VERSION {
            return Err(Error::parse("header", format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if n.checked_mul(k).and_then(|c| c.checked_mul(8)) != Some(bytes.len() - 24) {
            return Err(Error::parse("payload", "payload length mismatch"));
        }
        let values = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, k, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Per-node argmax class and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl Prediction {
    /// `index,class,confidence` lines, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, (c, p)) in self.classes.iter().zip(&self.confidence).enumerate() {
            writeln!(out, "{i},{c},{p}").unwrap();
        }
        out
    }

    /// Fraction of `nodes` whose predicted class matches `truth`.
    pub fn accuracy(&self, truth: &[usize], nodes: impl IntoIterator<Item = usize>) -> Option<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for i in nodes {
            total += 1;
            hit += usize::from(self.classes[i] == truth[i]);
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Index of the largest entry, lowest index on ties. NaN never wins.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        best.1 = row.first().copied().unwrap_or(f64::NAN);
    }
    best
}

pub fn classify(u: &NodeFunction) -> Prediction {
    let (classes, confidence) = (0..u.n()).map(|i| argmax(u.row(i))).unzip();
    Prediction { classes, confidence }
}

/// `L_UU` acting on full-length blocks whose labeled rows are held at zero.
struct HarmonicOperator<'a> {
    graph: &'a SimilarityGraph,
    fixed: Vec<bool>,
}

impl SpdOperator for HarmonicOperator<'_> {
    fn dim(&self) -> usize {
        self.graph.n()
    }

    fn apply_block(&self, x: &[f64], y: &mut [f64], cols: usize) {
        let degrees = self.graph.degrees();
        for (i, yi) in y.chunks_exact_mut(cols).enumerate() {
            if self.fixed[i] {
                yi.fill(0.0);
                continue;
            }
            let xi = &x[i * cols..(i + 1) * cols];
            for (a, &b) in yi.iter_mut().zip(xi) {
                *a = degrees[i] * b;
            }
            let (nbrs, weights) = self.graph.neighbors(i);
            for (&j, &w) in nbrs.iter().zip(weights) {
                if self.fixed[j] {
                    continue;
                }
                let xj = &x[j * cols..(j + 1) * cols];
                for (a, &b) in yi.iter_mut().zip(xj) {
                    *a -= w * b;
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        // labeled rows are identically zero; any positive value keeps them there
        self.graph
            .degrees()
            .iter()
            .zip(&self.fixed)
            .map(|(&d, &f)| if f { 1.0 } else { d })
            .collect()
    }
}

/// `gamma^2 L + P^T P`.
struct RegressionOperator<'a> {
    graph: &'a SimilarityGraph,
    labeled: Vec<bool>,
    gamma_sq: f64,
}

impl SpdOperator for RegressionOperator<'_> {
    fn dim(&self) -> usize {
        self.graph.n()
    }

    fn apply_block(&self, x: &[f64], y: &mut [f64], cols: usize) {
        let degrees = self.graph.degrees();
        for (i, yi) in y.chunks_exact_mut(cols).enumerate() {
            let xi = &x[i * cols..(i + 1) * cols];
            let diag = self.gamma_sq * degrees[i] + if self.labeled[i] { 1.0 } else { 0.0 };
            for (a, &b) in yi.iter_mut().zip(xi) {
                *a = diag * b;
            }
            let (nbrs, weights) = self.graph.neighbors(i);
            for (&j, &w) in nbrs.iter().zip(weights) {
                let xj = &x[j * cols..(j + 1) * cols];
                for (a, &b) in yi.iter_mut().zip(xj) {
                    *a -= self.gamma_sq * w * b;
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.graph
            .degrees()
            .iter()
            .zip(&self.labeled)
            .map(|(&d, &l)| self.gamma_sq * d + if l { 1.0 } else { 0.0 })
            .collect()
    }
}

fn max_iterations(n: usize) -> usize {
    (10 * n).max(1000)
}

fn check_inputs(graph: &SimilarityGraph, state: &LabelState) -> Result<()> {
    if state.n() != graph.n() {
        return Err(Error::InvalidParameter(format!(
            "label state covers {} nodes but the graph has {}",
            state.n(),
            graph.n()
        )));
    }
    if state.is_empty() {
        return Err(Error::InvalidParameter("at least one labeled node is required".into()));
    }
    // every component needs a label, otherwise L_UU is singular
    let (comp, sizes) = graph.components();
    if sizes.len() > 1 {
        let mut anchored = vec![false; sizes.len()];
        for &j in state.labeled() {
            anchored[comp[j]] = true;
        }
        if let Some(c) = anchored.iter().position(|&a| !a) {
            return Err(Error::Singular(format!(
                "connected component {c} of size {} contains no labeled node",
                sizes[c]
            )));
        }
    }
    Ok(())
}

/// Harmonic extension of the labels; see [`laplace_learn_from`] for warm starts.
pub fn laplace_learn(graph: &SimilarityGraph, state: &LabelState, tol: f64) -> Result<NodeFunction> {
    laplace_learn_from(graph, state, tol, None).map(|(u, _)| u)
}

/// Laplace learning starting CG from `initial` on the unlabeled rows.
pub fn laplace_learn_from(
    graph: &SimilarityGraph,
    state: &LabelState,
    tol: f64,
    initial: Option<&NodeFunction>,
) -> Result<(NodeFunction, CgStats)> {
    check_inputs(graph, state)?;
    let n = graph.n();
    let k = state.classes();
    let fixed: Vec<bool> = (0..n).map(|i| state.is_labeled(i)).collect();

    // b_i = sum_{j in L} W_ij e_{y_j} for unlabeled i
    let mut rhs = vec![0.0; n * k];
    for &j in state.labeled() {
        let label = state.label(j).unwrap();
        let (nbrs, weights) = graph.neighbors(j);
        for (&i, &w) in nbrs.iter().zip(weights) {
            if !fixed[i] {
                rhs[i * k + label] += w;
            }
        }
    }
    let mut x = match initial {
        Some(u) if u.n() == n && u.classes() == k => u.values().to_vec(),
        _ => vec![0.0; n * k],
    };
    for i in (0..n).filter(|&i| fixed[i]) {
        x[i * k..(i + 1) * k].fill(0.0);
    }
    let op = HarmonicOperator { graph, fixed };
    let stats = if state.len() < n {
        block_pcg(&op, &rhs, &mut x, k, tol, max_iterations(n))?
    } else {
        CgStats {
            iterations: 0,
            relative_residual: 0.0,
        }
    };
    for &j in state.labeled() {
        let row = &mut x[j * k..(j + 1) * k];
        row.fill(0.0);
        row[state.label(j).unwrap()] = 1.0;
    }
    Ok((NodeFunction::new(n, k, x)?, stats))
}

/// Gaussian Regression optimizer `(gamma^2 L + P^T P)^{-1} P^T Y`.
pub fn gr_solve(graph: &SimilarityGraph, state: &LabelState, gamma: f64, tol: f64) -> Result<NodeFunction> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    check_inputs(graph, state)?;
    let n = graph.n();
    let k = state.classes();
    let mut rhs = vec![0.0; n * k];
    for &j in state.labeled() {
        rhs[j * k + state.label(j).unwrap()] = 1.0;
    }
    let op = RegressionOperator {
        graph,
        labeled: (0..n).map(|i| state.is_labeled(i)).collect(),
        gamma_sq: gamma * gamma,
    };
    let mut x = vec![0.0; n * k];
    block_pcg(&op, &rhs, &mut x, k, tol, max_iterations(n))?;
    NodeFunction::new(n, k, x)
}

/// Largest `|u(x_i) - (1/d_i) sum_j W_ij u(x_j)|_inf` over unlabeled `i`.
pub fn harmonic_residual(graph: &SimilarityGraph, state: &LabelState, u: &NodeFunction) -> f64 {
    let k = u.classes();
    let mut worst: f64 = 0.0;
    let mut avg = vec![0.0; k];
    for i in state.unlabeled() {
        avg.fill(0.0);
        let (nbrs, weights) = graph.neighbors(i);
        for (&j, &w) in nbrs.iter().zip(weights) {
            for (a, &v) in avg.iter_mut().zip(u.row(j)) {
                *a += w * v;
            }
        }
        let d = graph.degrees()[i];
        for (a, &v) in avg.iter().zip(u.row(i)) {
            worst = worst.max((v - a / d).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn path(n: usize) -> SimilarityGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        SimilarityGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn label_state_rules() {
        let mut s = LabelState::new(4, 2).unwrap();
        s.insert(2, 1).unwrap();
        assert!(matches!(s.insert(2, 0), Err(Error::AlreadyLabeled { node: 2 })));
        assert!(matches!(s.insert(1, 2), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(s.insert(9, 0), Err(Error::NodeOutOfRange { .. })));
        s.insert(0, 0).unwrap();
        assert_eq!(s.labeled(), &[2, 0]);
        assert_eq!(s.one_hot(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(s.unlabeled().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn all_labeled_is_one_hot() {
        let g = path(3);
        let s = LabelState::from_pairs(3, 2, &[(0, 0), (1, 1), (2, 0)]).unwrap();
        let u = laplace_learn(&g, &s, DEFAULT_TOL).unwrap();
        assert_eq!(u.values(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn three_node_midpoint() {
        let g = path(3);
        let s = LabelState::from_pairs(3, 2, &[(0, 0), (2, 1)]).unwrap();
        let u = laplace_learn(&g, &s, 1e-12).unwrap();
        assert!((u.row(1)[0] - 0.5).abs() < 1e-12 && (u.row(1)[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn four_node_path_matches_dense_solve() {
        let g = path(4);
        let s = LabelState::from_pairs(4, 2, &[(0, 0), (3, 1)]).unwrap();
        let u = laplace_learn(&g, &s, 1e-12).unwrap();
        // L_UU = [[2,-1],[-1,2]], -L_UL Y = [[1,0],[0,1]]
        let luu = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let sol = luu.lu().solve(&DMatrix::identity(2, 2)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((u.row(r + 1)[c] - sol[(r, c)]).abs() < 1e-12);
            }
        }
        assert!((u.row(1)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((u.row(2)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_rejected() {
        let g = path(3);
        let s = LabelState::new(3, 2).unwrap();
        assert!(matches!(laplace_learn(&g, &s, 1e-8), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn unanchored_component_rejected() {
        let g = SimilarityGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let s = LabelState::from_pairs(4, 2, &[(0, 0)]).unwrap();
        assert!(matches!(laplace_learn(&g, &s, 1e-8), Err(Error::Singular(_))));
    }

    #[test]
    fn classify_examples() {
        let u = NodeFunction::new(3, 3, vec![0.2, 0.7, 0.1, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = classify(&u);
        assert_eq!(p.classes, vec![1, 0, 2]);
        assert_eq!(p.confidence, vec![0.7, 0.5, 1.0]);
        assert_eq!(argmax(&[f64::NAN, 0.1]), (1, 0.1));
    }

    #[test]
    fn gr_two_node_dense_oracle() {
        let g = path(2);
        let s = LabelState::from_pairs(2, 1, &[(0, 0)]).unwrap();
        let u = gr_solve(&g, &s, 1.0, 1e-12).unwrap();
        // (L + P^T P) u = P^T Y, with L = [[1,-1],[-1,1]] and P^T P = diag(1, 0)
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        let oracle = a.lu().solve(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((u.row(0)[0] - oracle[0]).abs() < 1e-12);
        assert!((u.row(1)[0] - oracle[1]).abs() < 1e-12);
        assert!((oracle[0] - 1.0).abs() < 1e-12 && (oracle[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gr_labeled_rows_tighten_as_gamma_shrinks() {
        let edges = [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 1.0), (3, 4, 2.0), (0, 4, 0.3)];
        let g = SimilarityGraph::from_edges(5, &edges).unwrap();
        let s = LabelState::from_pairs(5, 2, &[(0, 0), (3, 1)]).unwrap();
        let gap = |gamma: f64| {
            let u = gr_solve(&g, &s, gamma, 1e-13).unwrap();
            let y = s.one_hot();
            s.labeled()
                .iter()
                .enumerate()
                .flat_map(|(r, &j)| (0..2).map(move |c| (r, j, c)))
                .map(|(r, j, c)| (u.row(j)[c] - y[r * 2 + c]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(gap(1e-3) < gap(1e-1));
    }

    #[test]
    fn gr_rejects_bad_gamma() {
        let g = path(2);
        let s = LabelState::from_pairs(2, 1, &[(0, 0)]).unwrap();
        assert!(gr_solve(&g, &s, 0.0, 1e-8).is_err());
    }

    #[test]
    fn node_function_bytes() {
        let u = NodeFunction::new(2, 2, vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        assert_eq!(NodeFunction::from_bytes(&u.to_bytes()).unwrap(), u);
        let mut b = u.to_bytes();
        b.truncate(30);
        assert!(NodeFunction::from_bytes(&b).is_err());
    }

    #[test]
    fn prediction_csv_and_accuracy() {
        let p = Prediction {
            classes: vec![0, 1, 1],
            confidence: vec![1.0, 0.5, 0.75],
        };
        assert_eq!(p.to_csv(), "0,0,1\n1,1,0.5\n2,1,0.75\n");
        assert_eq!(p.accuracy(&[0, 0, 1], [1, 2]), Some(0.5));
        assert_eq!(p.accuracy(&[0, 0, 1], []), None);
    }
}
