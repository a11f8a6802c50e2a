//! Bottom eigenpairs of a symmetric graph Laplacian.
//!
//! The solver is a block Krylov iteration accelerated by a Chebyshev
//! polynomial filter. Each sweep applies `T_q((L - c) / e)` to the current
//! block, which damps the unwanted interval `[a, b]` and amplifies everything
//! below `a`, then fully re-orthonormalizes the block and performs a
//! Rayleigh-Ritz projection. `b` is a Gershgorin bound; `a` tracks the top Ritz
//! value of the block, which carries `s - m` guard vectors beyond the `m`
//! wanted pairs.
//!
//! Blocks are stored transposed (`s x n`, one node per column) so that sparse
//! products stream contiguous node vectors.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{laplacian, LaplacianKind, SimilarityGraph};
use crate::sparse::CsrMatrix;

pub const DEFAULT_M: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-8;

pub const SPECTRUM_MAGIC: &[u8; 4] = b"GASP";
pub const SPECTRUM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    /// Number of eigenpairs to keep.
    pub m: usize,
    /// Residual bound `||L v - lambda v||_2` for every kept pair.
    pub tol: f64,
    pub seed: u64,
    pub max_sweeps: usize,
    /// Chebyshev filter degree per sweep.
    pub degree: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            tol: DEFAULT_TOL,
            seed: 0,
            max_sweeps: 200,
            degree: 32,
        }
    }
}

impl SpectralOptions {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ..Self::default()
        }
    }
}

/// `m` smallest eigenpairs, eigenvalues ascending, eigenvectors as orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    kind: LaplacianKind,
    eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl SpectralData {
    pub fn new(kind: LaplacianKind, eigenvalues: Vec<f64>, vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.ncols() != eigenvalues.len() || eigenvalues.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} eigenvalues but {} eigenvectors",
                eigenvalues.len(),
                vectors.ncols()
            )));
        }
        Ok(Self {
            kind,
            eigenvalues,
            vectors,
        })
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `n x m`, column `i` is the eigenvector of `eigenvalues()[i]`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Row `i` of `V`, i.e. `V^T e_i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().copied().collect()
    }

    /// Keep only the first `m` pairs.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.m() {
            return Err(Error::InvalidParameter(format!(
                "cannot truncate {} eigenpairs to {m}",
                self.m()
            )));
        }
        Ok(Self {
            kind: self.kind,
            eigenvalues: self.eigenvalues[..m].to_vec(),
            vectors: self.vectors.columns(0, m).into_owned(),
        })
    }

    /// Largest `||L v_i - lambda_i v_i||_2` over the kept pairs.
    pub fn max_residual(&self, l: &CsrMatrix) -> f64 {
        (0..self.m())
            .map(|c| {
                let v = self.vectors.column(c);
                let lv = l.mul_vec(v.as_slice());
                lv.iter()
                    .zip(v.iter())
                    .map(|(a, b)| (a - self.eigenvalues[c] * b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, m) = self.vectors.shape();
        let mut out = Vec::with_capacity(29 + 8 * (m + n * m));
        out.extend_from_slice(SPECTRUM_MAGIC);
        out.extend_from_slice(&SPECTRUM_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.push(self.kind.code());
        for v in &self.eigenvalues {
            out.extend_from_slice(&v.to_le_bytes());
        }
        // nalgebra storage is column-major already
        for v in self.vectors.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 8 + 8 + 1;
        if bytes.len() < HEADER || &bytes[..4] != SPECTRUM_MAGIC {
            return Err(Error::parse("header", "malformed spectrum header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SPECTRUM_VERSION {
            return Err(Error::parse("header", format!("unsupported spectrum version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let m = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let kind = LaplacianKind::from_code(bytes[24])
            .ok_or_else(|| Error::parse("header", format!("unknown laplacian code {}", bytes[24])))?;
        let expected = n
            .checked_mul(m)
            .and_then(|nm| nm.checked_add(m))
            .and_then(|c| c.checked_mul(8));
        if expected != Some(bytes.len() - HEADER) {
            return Err(Error::parse("payload", "payload length mismatch"));
        }
        let mut floats = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let eigenvalues: Vec<f64> = floats.by_ref().take(m).collect();
        let vectors = DMatrix::from_iterator(n, m, floats);
        Self::new(kind, eigenvalues, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Compute the `opts.m` smallest eigenpairs of a symmetric PSD operator.
pub fn compute_spectrum(l: &CsrMatrix, kind: LaplacianKind, opts: &SpectralOptions) -> Result<SpectralData> {
    let n = l.n();
    let m = opts.m;
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!("m must satisfy 1 <= m <= n = {n}, got {m}")));
    }
    if !kind.is_symmetric() {
        return Err(Error::InvalidParameter(
            "the random-walk Laplacian is not symmetric; use unnormalized or normalized".into(),
        ));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {}", opts.tol)));
    }
    let s = block_size(n, m);
    let upper = l.gershgorin_bound().max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut xt = DMatrix::from_fn(s, n, |_, _| StandardNormal.sample(&mut rng));
    let mut zt = DMatrix::zeros(s, n);
    let mut worst = f64::INFINITY;

    for sweep in 0..=opts.max_sweeps {
        orthonormalize_rows(&mut xt);
        l.mul_block_t(&xt, &mut zt);
        let theta = rayleigh_ritz(&mut xt, &mut zt);
        let residuals = residual_norms(&xt, &zt, &theta, m);
        worst = residuals.iter().copied().fold(0.0, f64::max);
        if worst <= opts.tol {
            return Ok(finish(kind, &xt, &theta, m));
        }
        if sweep == opts.max_sweeps {
            break;
        }
        // the filter bound must stay strictly inside the spectrum interval
        let lower = theta[s - 1].min(0.9 * upper).max(theta[m - 1]);
        chebyshev_filter(l, &mut xt, &mut zt, opts.degree, lower, upper);
    }
    Err(Error::NoConvergence {
        solver: "spectral filter iteration",
        iterations: opts.max_sweeps,
        residual: worst,
    })
}

/// Build the requested Laplacian of `graph` and compute its bottom spectrum.
pub fn graph_spectrum(graph: &SimilarityGraph, kind: LaplacianKind, opts: &SpectralOptions) -> Result<SpectralData> {
    let l = laplacian(graph, kind)?;
    compute_spectrum(&l, kind, opts)
}

/// Load the spectrum for `graph` from `dir` if a matching cache file exists, else compute and store it.
pub fn cached_spectrum(
    graph: &SimilarityGraph,
    kind: LaplacianKind,
    opts: &SpectralOptions,
    dir: &Path,
) -> Result<SpectralData> {
    let path = cache_path(graph, kind, opts.m, dir);
    if path.exists() {
        if let Ok(spec) = SpectralData::load(&path) {
            if spec.n() == graph.n() && spec.m() == opts.m && spec.kind() == kind {
                return Ok(spec);
            }
        }
    }
    let spec = graph_spectrum(graph, kind, opts)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    spec.save(&tmp)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(spec)
}

pub fn cache_path(graph: &SimilarityGraph, kind: LaplacianKind, m: usize, dir: &Path) -> PathBuf {
    let hash = graph.content_hash();
    dir.join(format!("spectrum-{}-{}-m{m}.gasp", &hash[..16], kind))
}

fn block_size(n: usize, m: usize) -> usize {
    (m + (m / 5).max(16)).min(n)
}

/// Orthonormalize the rows of `xt` (Cholesky QR, twice), falling back to Householder QR.
fn orthonormalize_rows(xt: &mut DMatrix<f64>) {
    for _ in 0..2 {
        let gram = &*xt * xt.transpose();
        match gram.cholesky() {
            Some(chol) => {
                let lower = chol.l();
                if !lower.solve_lower_triangular_mut(xt) {
                    householder_rows(xt);
                    return;
                }
            }
            None => {
                householder_rows(xt);
                return;
            }
        }
    }
}

fn householder_rows(xt: &mut DMatrix<f64>) {
    let q = xt.transpose().qr().q();
    *xt = q.transpose();
}

/// Project onto the block, rotate `xt` and `zt = (L X)^T` into Ritz vectors; returns ascending Ritz values.
fn rayleigh_ritz(xt: &mut DMatrix<f64>, zt: &mut DMatrix<f64>) -> Vec<f64> {
    let h = &*xt * zt.transpose();
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let theta = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let q = DMatrix::from_fn(order.len(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    let qt = q.transpose();
    *xt = &qt * &*xt;
    *zt = &qt * &*zt;
    theta
}

fn residual_norms(xt: &DMatrix<f64>, zt: &DMatrix<f64>, theta: &[f64], m: usize) -> Vec<f64> {
    let s = xt.nrows();
    let mut acc = vec![0.0; m];
    for (xc, zc) in xt.as_slice().chunks_exact(s).zip(zt.as_slice().chunks_exact(s)) {
        for r in 0..m {
            let d = zc[r] - theta[r] * xc[r];
            acc[r] += d * d;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// Replace `xt` by `T_q((L - c) / e) X`, normalized per vector; `zt` is scratch.
fn chebyshev_filter(l: &CsrMatrix, xt: &mut DMatrix<f64>, zt: &mut DMatrix<f64>, degree: usize, lower: f64, upper: f64) {
    let e = 0.5 * (upper - lower);
    let c = 0.5 * (upper + lower);
    let s = xt.nrows();
    // zt already holds L X from the Rayleigh-Ritz step
    let mut prev = xt.clone();
    let mut cur = zt.clone();
    cur.zip_apply(&prev, |y, x| *y = (*y - c * x) / e);
    let mut next = DMatrix::zeros(s, l.n());
    for _ in 1..degree {
        l.mul_block_t(&cur, &mut next);
        for ((y, &x), &p) in next
            .as_mut_slice()
            .iter_mut()
            .zip(cur.as_slice())
            .zip(prev.as_slice())
        {
            *y = 2.0 * (*y - c * x) / e - p;
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        rescale_rows(&mut cur, &mut prev);
    }
    *xt = cur;
}

/// Divide each row of `cur` and `prev` by the row's max magnitude in `cur`; the recurrence is linear per row.
fn rescale_rows(cur: &mut DMatrix<f64>, prev: &mut DMatrix<f64>) {
    let s = cur.nrows();
    let mut scale = vec![0.0f64; s];
    for col in cur.as_slice().chunks_exact(s) {
        for (m, v) in scale.iter_mut().zip(col) {
            *m = m.max(v.abs());
        }
    }
    for m in &mut scale {
        *m = if *m > 0.0 { 1.0 / *m } else { 1.0 };
    }
    for mat in [cur, prev] {
        for col in mat.as_mut_slice().chunks_exact_mut(s) {
            for (v, f) in col.iter_mut().zip(&scale) {
                *v *= f;
            }
        }
    }
}

fn finish(kind: LaplacianKind, xt: &DMatrix<f64>, theta: &[f64], m: usize) -> SpectralData {
    let n = xt.ncols();
    let mut vectors = DMatrix::from_fn(n, m, |i, c| xt[(c, i)]);
    for mut col in vectors.column_iter_mut() {
        let peak = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let first = col.iter().copied().find(|v| v.abs() > 1e-12 * peak).unwrap_or(0.0);
        if first < 0.0 {
            col.neg_mut();
        }
    }
    SpectralData {
        kind,
        eigenvalues: theta[..m].to_vec(),
        vectors,
    }
}
