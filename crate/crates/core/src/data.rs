//! Feature matrices, label files and the SAR magnitude/phase transform.
//!
//! Binary feature layout (all little-endian):
//!
//! ```text
//! "GAFE" | version: u32 = 1 | n: u64 | d: u64 | n*d f32, row-major
//! ```
//!
//! CSV features are one sample per line, comma-separated, no header.
//! Label files are `index,label` lines, no header.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"GAFE";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// Guess the format from a file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

/// An `n x d` row-major matrix of finite embedding coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if values.len() != n * d {
            return Err(Error::parse(
                "payload",
                format!("payload length mismatch: expected {} values, found {}", n * d, values.len()),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(
                format!("row {}, column {}", pos / d, pos % d),
                format!("non-finite entry {}", values[pos]),
            ));
        }
        Ok(Self { n, d, values })
    }

    /// Build from `f64` rows, rounding to the stored `f32` precision.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::parse(
                    format!("row {i}"),
                    format!("dimension mismatch: expected {d} columns, found {}", row.len()),
                ));
            }
            values.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(n, d, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            if p >= self.n {
                return Err(Error::NodeOutOfRange { node: p, n: self.n });
            }
            values.extend_from_slice(self.row(p));
        }
        Self::new(perm.len(), self.d, values)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::parse("header", "malformed header: file shorter than 24 bytes"));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::parse("header", "malformed header: bad magic, expected GAFE"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::parse(
                "header",
                format!("malformed header: unsupported version {version}"),
            ));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        let expected = n.checked_mul(d).and_then(|c| c.checked_mul(4));
        if payload.len() % 4 != 0 || expected != Some(payload.len()) {
            return Err(Error::parse(
                "payload",
                format!(
                    "payload length mismatch: header declares {n}x{d} but payload holds {} bytes",
                    payload.len()
                ),
            ));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, d, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = 0;
            for (j, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                let v: f32 = cell.parse().map_err(|_| {
                    Error::parse(format!("row {i}, column {j}"), format!("cannot parse {cell:?} as a real"))
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(
                        format!("row {i}, column {j}"),
                        format!("non-finite entry {cell:?}"),
                    ));
                }
                values.push(v);
                cols += 1;
            }
            match d {
                None => d = Some(cols),
                Some(d) if d != cols => {
                    return Err(Error::parse(
                        format!("row {i}"),
                        format!("dimension mismatch: expected {d} columns, found {cols}"),
                    ))
                }
                _ => {}
            }
            n += 1;
        }
        Self::new(n, d.unwrap_or(0), values)
    }
}

pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    match format {
        FeatureFormat::Binary => {
            let mut bytes = Vec::new();
            fs::File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path, e))?;
            FeatureMatrix::from_binary(&bytes)
        }
        FeatureFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            FeatureMatrix::from_csv(&text)
        }
    }
}

pub fn save_features(
    features: &FeatureMatrix,
    path: impl AsRef<Path>,
    format: FeatureFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        FeatureFormat::Binary => features.to_binary(),
        FeatureFormat::Csv => features.to_csv().into_bytes(),
    };
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Sparse `(index, label)` assignments over a pool of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub entries: Vec<(usize, usize)>,
    pub classes: usize,
}

impl LabelFile {
    /// Validate entries. `classes` defaults to one more than the largest label.
    pub fn new(entries: Vec<(usize, usize)>, classes: Option<usize>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(index, _) in &entries {
            if !seen.insert(index) {
                return Err(Error::InvalidLabels(format!("duplicate index {index}")));
            }
        }
        let inferred = entries.iter().map(|&(_, l)| l + 1).max().unwrap_or(0);
        let classes = classes.unwrap_or(inferred);
        if classes < 2 {
            return Err(Error::InvalidLabels(format!(
                "at least 2 classes are required, found {classes}"
            )));
        }
        if let Some(&(index, label)) = entries.iter().find(|&&(_, l)| l >= classes) {
            return Err(Error::InvalidLabels(format!(
                "label {label} at index {index} exceeds class count {classes}"
            )));
        }
        Ok(Self { entries, classes })
    }

    pub fn parse(text: &str, classes: Option<usize>) -> Result<Self> {
        let mut entries = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| {
                Error::parse(format!("line {}", line_no + 1), "expected \"index,label\"")
            })?;
            let index: i64 = a.trim().parse().map_err(|_| {
                Error::parse(format!("line {}", line_no + 1), format!("bad index {a:?}"))
            })?;
            let label: i64 = b.trim().parse().map_err(|_| {
                Error::parse(format!("line {}", line_no + 1), format!("bad label {b:?}"))
            })?;
            if index < 0 {
                return Err(Error::InvalidLabels(format!(
                    "negative index {index} on line {}",
                    line_no + 1
                )));
            }
            if label < 0 {
                return Err(Error::InvalidLabels(format!(
                    "negative label {label} on line {}",
                    line_no + 1
                )));
            }
            entries.push((index as usize, label as usize));
        }
        Self::new(entries, classes)
    }

    /// Check every index against a pool of `n` samples.
    pub fn validate_against(&self, n: usize) -> Result<()> {
        match self.entries.iter().find(|&&(i, _)| i >= n) {
            Some(&(index, _)) => Err(Error::InvalidLabels(format!(
                "index {index} out of range for {n} samples"
            ))),
            None => Ok(()),
        }
    }

    /// Dense label vector of length `n`, `None` where unlabeled.
    pub fn dense(&self, n: usize) -> Result<Vec<Option<usize>>> {
        self.validate_against(n)?;
        let mut out = vec![None; n];
        for &(i, l) in &self.entries {
            out[i] = Some(l);
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, l) in &self.entries {
            writeln!(out, "{i},{l}").unwrap();
        }
        out
    }
}

pub fn load_labels(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelFile::parse(&text, classes)
}

/// A magnitude/phase image pair, each `height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SarImagePair {
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SarImagePair {
    pub fn new(height: usize, width: usize, magnitude: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        let len = height * width;
        if magnitude.len() != len || phase.len() != len {
            return Err(Error::InvalidParameter(format!(
                "magnitude ({}) and phase ({}) must both hold {height}x{width} pixels",
                magnitude.len(),
                phase.len()
            )));
        }
        Ok(Self {
            height,
            width,
            magnitude,
            phase,
        })
    }

    /// Pair two single-channel images stored as `height x width` feature matrices.
    pub fn from_features(magnitude: &FeatureMatrix, phase: &FeatureMatrix) -> Result<Self> {
        if magnitude.n() != phase.n() || magnitude.d() != phase.d() {
            return Err(Error::InvalidParameter(format!(
                "magnitude is {}x{} but phase is {}x{}",
                magnitude.n(),
                magnitude.d(),
                phase.n(),
                phase.d()
            )));
        }
        let widen = |m: &FeatureMatrix| m.values().iter().map(|&v| f64::from(v)).collect();
        Self::new(magnitude.n(), magnitude.d(), widen(magnitude), widen(phase))
    }
}

/// `height x width x 3` image, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeChannelImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ThreeChannelImage {
    /// One row per image row, channels interleaved along the columns.
    pub fn to_features(&self) -> Result<FeatureMatrix> {
        let values = self
            .pixels
            .iter()
            .flat_map(|p| p.iter().map(|&c| c as f32))
            .collect();
        FeatureMatrix::new(self.height, self.width * 3, values)
    }
}

/// `(M, (M cos P + 1) / 2, (M sin P + 1) / 2)` per pixel, with `M` clipped to `[0, 1]` first.
pub fn sar_to_3channel(img: &SarImagePair) -> ThreeChannelImage {
    let pixels = img
        .magnitude
        .iter()
        .zip(&img.phase)
        .map(|(&m, &p)| {
            let m = m.clamp(0.0, 1.0);
            let (sin, cos) = p.sin_cos();
            [m, 0.5 * (m * cos + 1.0), 0.5 * (m * sin + 1.0)]
        })
        .collect();
    ThreeChannelImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}
