//! A persistent sequential labeling loop.
//!
//! A session alternates between a pending query (selected, not yet labeled)
//! and a commit that labels it. Every commit is appended to a label journal
//! before any in-memory state changes, and replaying the journal repeats the
//! exact sequence of solves and covariance updates, so a reopened session is
//! identical to one that never stopped.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::active::{acquisition_values, init_covariance, select_query, AcquisitionKind, CovarianceState, QueryRecord};
use crate::error::{Error, Result};
use crate::graph::{LaplacianKind, Metric, SimilarityGraph, DEFAULT_K};
use crate::spectral::{SpectralData, DEFAULT_M};
use crate::ssl::{classify, laplace_learn_from, LabelState, NodeFunction, Prediction, DEFAULT_GAMMA};

pub const CONFIG_FILE: &str = "config.txt";
pub const GRAPH_FILE: &str = "graph.txt";
pub const SPECTRUM_FILE: &str = "spectrum.gasp";
pub const JOURNAL_FILE: &str = "journal.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SPLIT_FILE: &str = "split.csv";
const JOURNAL_HEADER: &str = "step,index,label,source";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Seed,
    Human,
    Oracle,
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Seed => "seed",
            LabelSource::Human => "human",
            LabelSource::Oracle => "oracle",
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seed" => Ok(LabelSource::Seed),
            "human" => Ok(LabelSource::Human),
            "oracle" => Ok(LabelSource::Oracle),
            other => Err(Error::InvalidParameter(format!(
                "unknown label source {other:?}, expected one of {{seed,human,oracle}}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub step: usize,
    pub index: usize,
    pub label: usize,
    pub source: LabelSource,
}

pub fn journal_to_csv(entries: &[JournalEntry]) -> String {
    let mut out = String::from(JOURNAL_HEADER);
    out.push('\n');
    for e in entries {
        writeln!(out, "{},{},{},{}", e.step, e.index, e.label, e.source).unwrap();
    }
    out
}

pub fn parse_journal(text: &str) -> Result<Vec<JournalEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == JOURNAL_HEADER) {
            continue;
        }
        let loc = format!("journal line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(loc, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(loc.clone(), format!("bad integer {s:?}")));
        let entry = JournalEntry {
            step: num(fields[0])?,
            index: num(fields[1])?,
            label: num(fields[2])?,
            source: fields[3].parse().map_err(|_| Error::parse(loc.clone(), format!("bad source {:?}", fields[3])))?,
        };
        if entry.step != entries.len() {
            return Err(Error::Journal(format!(
                "{loc}: step {} out of sequence, expected {}",
                entry.step,
                entries.len()
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Session parameters, stored as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub name: String,
    pub k: usize,
    pub metric: Metric,
    pub laplacian: LaplacianKind,
    pub gamma: f64,
    pub m: usize,
    pub acquisition: AcquisitionKind,
    pub seed: u64,
    pub classes: usize,
    pub tol: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            name: String::from("dataset"),
            k: DEFAULT_K,
            metric: Metric::Angular,
            laplacian: LaplacianKind::Unnormalized,
            gamma: DEFAULT_GAMMA,
            m: DEFAULT_M,
            acquisition: AcquisitionKind::Uncertainty,
            seed: 0,
            classes: 2,
            tol: crate::ssl::DEFAULT_TOL,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("tol must lie in (0, 1), got {}", self.tol));
        }
        if self.name.contains('\n') {
            return bad("name must be a single line".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "name={}\nk={}\nmetric={}\nlaplacian={}\ngamma={}\nm={}\nacquisition={}\nseed={}\nclasses={}\ntol={}\n",
            self.name,
            self.k,
            self.metric,
            self.laplacian,
            self.gamma,
            self.m,
            self.acquisition,
            self.seed,
            self.classes,
            self.tol
        )
    }

    /// Missing keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = format!("config line {}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(loc.clone(), "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let wrap = |e: Error| Error::parse(loc.clone(), e.to_string());
            let num_err = |what: &str| Error::parse(loc.clone(), format!("bad {what} value {value:?}"));
            match key {
                "name" => cfg.name = value.to_string(),
                "k" => cfg.k = value.parse().map_err(|_| num_err("k"))?,
                "metric" => cfg.metric = value.parse().map_err(wrap)?,
                "laplacian" => cfg.laplacian = value.parse().map_err(wrap)?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| num_err("gamma"))?,
                "m" => cfg.m = value.parse().map_err(|_| num_err("m"))?,
                "acquisition" => cfg.acquisition = value.parse().map_err(wrap)?,
                "seed" => cfg.seed = value.parse().map_err(|_| num_err("seed"))?,
                "classes" => cfg.classes = value.parse().map_err(|_| num_err("classes"))?,
                "tol" => cfg.tol = value.parse().map_err(|_| num_err("tol"))?,
                other => return Err(Error::parse(loc, format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Candidate pool and evaluation set. Queries come from `train` only and
/// accuracy is measured on `test`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// One line per node: `index,train` or `index,test`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for &i in &self.train {
            writeln!(out, "{i},train").unwrap();
        }
        for &i in &self.test {
            writeln!(out, "{i},test").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("split line {}", lineno + 1);
            let (idx, side) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(loc.clone(), "expected index,side"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(loc.clone(), format!("bad index {idx:?}")))?;
            match side.trim() {
                "train" => split.train.push(idx),
                "test" => split.test.push(idx),
                other => return Err(Error::parse(loc, format!("side must be train or test, got {other:?}"))),
            }
        }
        Ok(split)
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return Err(Error::NodeOutOfRange { node: i, n });
            }
            if seen[i] {
                return Err(Error::InvalidParameter(format!("node {i} appears twice in the split")));
            }
            seen[i] = true;
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidParameter("split needs nonempty train and test sides".into()));
        }
        Ok(())
    }
}

/// Everything needed to start a session.
#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub config: SessionConfig,
    pub graph: Arc<SimilarityGraph>,
    /// Required when the acquisition reads the covariance.
    pub spectral: Option<Arc<SpectralData>>,
    pub seeds: Vec<(usize, usize)>,
    pub truth: Option<Vec<usize>>,
    pub split: Option<Split>,
}

/// One row of the label history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub node: usize,
    pub label: usize,
    pub source: LabelSource,
    pub acquisition_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ActiveSession {
    config: SessionConfig,
    graph: Arc<SimilarityGraph>,
    spectral: Option<Arc<SpectralData>>,
    truth: Option<Arc<Vec<usize>>>,
    split: Option<Arc<Split>>,
    in_train: Option<Arc<Vec<bool>>>,
    state: LabelState,
    solution: Option<NodeFunction>,
    cov: Option<CovarianceState>,
    /// Unlabeled candidates, ascending.
    pool: Vec<usize>,
    pending: Option<(usize, f64)>,
    journal: Vec<JournalEntry>,
    values: Vec<Option<f64>>,
    /// `(labeled count, accuracy)` after the seeds and after every commit.
    accuracy_trace: Vec<(usize, f64)>,
    dir: Option<PathBuf>,
}

impl ActiveSession {
    /// Commit the seeds as one batch and select the first query.
    pub fn start(setup: SessionSetup) -> Result<Self> {
        Self::start_inner(setup, None)
    }

    fn start_inner(setup: SessionSetup, dir: Option<PathBuf>) -> Result<Self> {
        let SessionSetup {
            config,
            graph,
            spectral,
            seeds,
            truth,
            split,
        } = setup;
        config.validate()?;
        let n = graph.n();
        graph.ensure_connected()?;
        if config.acquisition.needs_covariance() {
            match &spectral {
                None => {
                    return Err(Error::InvalidParameter(format!(
                        "acquisition {} needs a spectrum",
                        config.acquisition
                    )))
                }
                Some(s) if s.n() != n => {
                    return Err(Error::InvalidParameter(format!(
                        "spectrum has {} rows but the graph has {n} nodes",
                        s.n()
                    )))
                }
                _ => {}
            }
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::InvalidLabels(format!("ground truth has {} entries, graph has {n} nodes", t.len())));
            }
            if let Some(&bad) = t.iter().find(|&&c| c >= config.classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: config.classes,
                });
            }
        }
        let in_train = match &split {
            Some(s) => {
                s.validate(n)?;
                let mut mask = vec![false; n];
                for &i in &s.train {
                    mask[i] = true;
                }
                Some(Arc::new(mask))
            }
            None => None,
        };
        let state = LabelState::from_pairs(n, config.classes, &seeds)?;
        let pool = (0..n)
            .filter(|&i| !state.is_labeled(i) && in_train.as_ref().is_none_or(|m| m[i]))
            .collect();
        let journal: Vec<JournalEntry> = seeds
            .iter()
            .enumerate()
            .map(|(step, &(index, label))| JournalEntry {
                step,
                index,
                label,
                source: LabelSource::Seed,
            })
            .collect();
        let mut session = Self {
            values: vec![None; journal.len()],
            config,
            graph,
            spectral,
            truth: truth.map(Arc::new),
            split: split.map(Arc::new),
            in_train,
            state,
            solution: None,
            cov: None,
            pool,
            pending: None,
            journal,
            accuracy_trace: Vec::new(),
            dir,
        };
        if !session.state.is_empty() {
            session.solution = Some(session.solve(&session.state, None)?);
            if session.config.acquisition.needs_covariance() {
                session.cov = Some(init_covariance(
                    session.spectral.clone().unwrap(),
                    &session.state,
                    session.config.gamma,
                )?);
            }
        }
        session.pending = session.select()?;
        session.trace_accuracy();
        Ok(session)
    }

    fn trace_accuracy(&mut self) {
        if let Some(acc) = self.accuracy() {
            self.accuracy_trace.push((self.state.len(), acc));
        }
    }

    fn solve(&self, state: &LabelState, warm: Option<&NodeFunction>) -> Result<NodeFunction> {
        laplace_learn_from(&self.graph, state, self.config.tol, warm).map(|(u, _)| u)
    }

    /// Next query; `None` once the pool is empty.
    fn select(&self) -> Result<Option<(usize, f64)>> {
        if self.pool.is_empty() {
            return Ok(None);
        }
        let step = self.journal.len() as u64;
        // nothing to condition on yet, so the first query is uniform
        let kind = if self.state.is_empty() {
            AcquisitionKind::Random
        } else {
            self.config.acquisition
        };
        let values = acquisition_values(
            kind,
            self.solution.as_ref(),
            self.cov.as_ref(),
            &self.pool,
            self.config.seed,
            step,
        )?;
        select_query(&values, &self.pool).map(Some)
    }

    /// Label `node`. Without `allow_override` the node must be the pending query.
    pub fn commit(&mut self, node: usize, label: usize, source: LabelSource, allow_override: bool) -> Result<QueryRecord> {
        let n = self.n();
        if node >= n {
            return Err(Error::NodeOutOfRange { node, n });
        }
        if label >= self.config.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.config.classes,
            });
        }
        if self.state.is_labeled(node) {
            return Err(Error::AlreadyLabeled { node });
        }
        let value = match self.pending {
            Some((p, v)) if p == node => Some(v),
            Some((p, _)) if !allow_override => return Err(Error::NodeMismatch { expected: p, got: node }),
            None if !allow_override => return Err(Error::NoPendingQuery),
            _ => None,
        };

        let mut state = self.state.clone();
        state.insert(node, label)?;
        let solution = self.solve(&state, self.solution.as_ref())?;
        let entry = JournalEntry {
            step: self.journal.len(),
            index: node,
            label,
            source,
        };
        if let Some(dir) = &self.dir {
            let mut journal = self.journal.clone();
            journal.push(entry);
            write_atomic(&dir.join(JOURNAL_FILE), journal_to_csv(&journal).as_bytes())?;
        }

        // node was validated above, so the update cannot fail from here on
        if self.config.acquisition.needs_covariance() {
            match &mut self.cov {
                Some(c) => c.update(node)?,
                None => self.cov = Some(init_covariance(self.spectral.clone().unwrap(), &state, self.config.gamma)?),
            }
        }
        self.state = state;
        self.solution = Some(solution);
        if let Ok(p) = self.pool.binary_search(&node) {
            self.pool.remove(p);
        }
        self.journal.push(entry);
        self.values.push(value);
        self.pending = self.select()?;
        self.trace_accuracy();
        Ok(QueryRecord {
            step: entry.step,
            chosen: node,
            acquisition_value: value.unwrap_or(f64::NAN),
            label_assigned: label,
            accuracy_after: self.accuracy_trace.last().map(|&(_, a)| a),
        })
    }

    /// Create a session directory and start a session persisted in it.
    pub fn create_in(dir: impl AsRef<Path>, setup: SessionSetup) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        setup.config.validate()?;
        write_atomic(&dir.join(CONFIG_FILE), setup.config.to_text().as_bytes())?;
        write_atomic(&dir.join(GRAPH_FILE), setup.graph.to_text().as_bytes())?;
        if let Some(s) = &setup.spectral {
            write_atomic(&dir.join(SPECTRUM_FILE), &s.to_bytes())?;
        }
        if let Some(t) = &setup.truth {
            let text: String = t.iter().enumerate().map(|(i, c)| format!("{i},{c}\n")).collect();
            write_atomic(&dir.join(TRUTH_FILE), text.as_bytes())?;
        }
        if let Some(s) = &setup.split {
            write_atomic(&dir.join(SPLIT_FILE), s.to_csv().as_bytes())?;
        }
        let session = Self::start_inner(setup, Some(dir.clone()))?;
        write_atomic(&dir.join(JOURNAL_FILE), journal_to_csv(&session.journal).as_bytes())?;
        Ok(session)
    }

    /// Rebuild a session from its directory by replaying the journal.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let config = SessionConfig::parse(&read(CONFIG_FILE)?)?;
        let graph = Arc::new(SimilarityGraph::from_text(&read(GRAPH_FILE)?)?);
        let spectrum_path = dir.join(SPECTRUM_FILE);
        let spectral = if spectrum_path.exists() {
            Some(Arc::new(SpectralData::load(&spectrum_path)?))
        } else {
            None
        };
        let truth = if dir.join(TRUTH_FILE).exists() {
            let labels = crate::data::LabelFile::parse(&read(TRUTH_FILE)?, Some(config.classes))?;
            Some(labels.dense(graph.n())?.into_iter().map(|c| c.unwrap_or(0)).collect())
        } else {
            None
        };
        let split = if dir.join(SPLIT_FILE).exists() {
            Some(Split::parse(&read(SPLIT_FILE)?)?)
        } else {
            None
        };
        let journal = parse_journal(&read(JOURNAL_FILE)?)?;
        Self::replay(
            SessionSetup {
                config,
                graph,
                spectral,
                seeds: Vec::new(),
                truth,
                split,
            },
            &journal,
            Some(dir),
        )
    }

    /// Start from `setup` (its seeds are ignored) and apply `journal` in order.
    pub fn replay(mut setup: SessionSetup, journal: &[JournalEntry], dir: Option<PathBuf>) -> Result<Self> {
        let lead = journal.iter().take_while(|e| e.source == LabelSource::Seed).count();
        setup.seeds = journal[..lead].iter().map(|e| (e.index, e.label)).collect();
        let mut session = Self::start_inner(setup, None)?;
        for e in &journal[lead..] {
            session
                .commit(e.index, e.label, e.source, true)
                .map_err(|err| Error::Journal(format!("replay failed at step {}: {err}", e.step)))?;
        }
        session.dir = dir;
        Ok(session)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn graph(&self) -> &Arc<SimilarityGraph> {
        &self.graph
    }

    pub fn spectral(&self) -> Option<&Arc<SpectralData>> {
        self.spectral.as_ref()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn labels(&self) -> &LabelState {
        &self.state
    }

    pub fn labeled_count(&self) -> usize {
        self.state.len()
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn pool_remaining(&self) -> usize {
        self.pool.len()
    }

    pub fn pending(&self) -> Option<(usize, f64)> {
        self.pending
    }

    /// Number of journal entries so far, which is also the next step number.
    pub fn step(&self) -> usize {
        self.journal.len()
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn accuracy_trace(&self) -> &[(usize, f64)] {
        &self.accuracy_trace
    }

    pub fn covariance(&self) -> Option<&CovarianceState> {
        self.cov.as_ref()
    }

    pub fn solution(&self) -> Option<&NodeFunction> {
        self.solution.as_ref()
    }

    pub fn truth(&self) -> Option<&[usize]> {
        self.truth.as_deref().map(Vec::as_slice)
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_deref()
    }

    pub fn is_candidate(&self, node: usize) -> bool {
        node < self.n() && !self.state.is_labeled(node) && self.in_train.as_ref().is_none_or(|m| m[node])
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.journal
            .iter()
            .zip(&self.values)
            .map(|(e, &v)| HistoryEntry {
                step: e.step,
                node: e.index,
                label: e.label,
                source: e.source,
                acquisition_value: v,
            })
            .collect()
    }

    /// Current classifier output; committed labels report confidence 1.
    pub fn predictions(&self) -> Prediction {
        match &self.solution {
            Some(u) => classify(u),
            None => Prediction {
                classes: vec![0; self.n()],
                confidence: vec![0.0; self.n()],
            },
        }
    }

    /// Accuracy against the registered ground truth, on the test side of the
    /// split if there is one, else on the unlabeled nodes (all nodes once none remain).
    pub fn accuracy(&self) -> Option<f64> {
        let truth = self.truth.as_deref()?;
        let pred = self.predictions();
        match &self.split {
            Some(s) => pred.accuracy(truth, s.test.iter().copied()),
            None if self.state.len() < self.n() => pred.accuracy(truth, self.state.unlabeled()),
            None => pred.accuracy(truth, 0..self.n()),
        }
    }
}

/// Write to a sibling temp file and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
