//! Session registry backed by one directory per session.
//!
//! Readers clone the current `Arc<ActiveSession>` and never wait on a commit;
//! a commit works on a private copy under the session's writer lock and swaps
//! it in when the re-solve has finished.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use graphal_core::data::{load_features, load_labels, FeatureFormat};
use graphal_core::graph::{build_graph, GraphConfig, Kernel};
use graphal_core::session::{write_atomic, Split};
use graphal_core::spectral::{cached_spectrum, SpectralOptions};
use graphal_core::{ActiveSession, Error, Result, SessionConfig, SessionSetup, SimilarityGraph};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

const META_FILE: &str = "meta.json";
const DISPLAY_FILE: &str = "display.json";

/// Facts about a session that the engine does not track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub dataset: String,
    pub d: Option<usize>,
    pub created: String,
    pub updated: String,
}

pub struct SessionSlot {
    pub meta: RwLock<SessionMeta>,
    snapshot: RwLock<Arc<ActiveSession>>,
    pub writer: tokio::sync::Mutex<()>,
    /// Per-node display payloads registered at creation, if any.
    pub display: Option<Arc<Vec<serde_json::Value>>>,
}

impl SessionSlot {
    pub fn snapshot(&self) -> Arc<ActiveSession> {
        self.snapshot.read().clone()
    }

    /// Replace the snapshot. Callers must hold `writer`.
    pub fn publish(&self, session: ActiveSession) -> Result<()> {
        let dir = session.dir().map(Path::to_path_buf);
        *self.snapshot.write() = Arc::new(session);
        let mut meta = self.meta.write();
        meta.updated = now();
        if let Some(dir) = dir {
            write_meta(&dir, &meta)?;
        }
        Ok(())
    }
}

/// Server-side file references and parameters for a new session.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub name: Option<String>,
    /// Feature file (`.csv` or binary); the graph is built from it.
    pub features: Option<PathBuf>,
    /// Prebuilt graph file, used instead of `features`.
    pub graph: Option<PathBuf>,
    /// Ground-truth label file enabling the accuracy endpoint.
    pub labels: Option<PathBuf>,
    /// Train/test split file (`index,train|test` lines).
    pub split: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<SeedLabel>,
    pub display: Option<Vec<serde_json::Value>>,
    pub classes: usize,
    pub k: Option<usize>,
    pub metric: Option<String>,
    pub laplacian: Option<String>,
    pub gamma: Option<f64>,
    pub m: Option<usize>,
    pub acquisition: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct SeedLabel {
    pub node: usize,
    pub label: usize,
}

pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    counter: AtomicU64,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_meta(dir: &Path, meta: &SessionMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_atomic(&dir.join(META_FILE), text.as_bytes())
}

impl SessionStore {
    /// Open `root`, replaying every session directory found in it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::Io { path: root.clone(), source: e })?;
        let probe = root.join(".write-test");
        fs::write(&probe, b"").map_err(|e| Error::Io { path: root.clone(), source: e })?;
        let _ = fs::remove_file(&probe);

        let mut sessions = BTreeMap::new();
        let entries = fs::read_dir(&root).map_err(|e| Error::Io { path: root.clone(), source: e })?;
        for entry in entries.flatten() {
            let dir = entry.path();
            let meta_path = dir.join(META_FILE);
            if !meta_path.is_file() {
                continue;
            }
            let meta: SessionMeta = fs::read_to_string(&meta_path)
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .ok_or_else(|| Error::Journal(format!("unreadable {}", meta_path.display())))?;
            let session = ActiveSession::open(&dir)?;
            let display = read_display(&dir)?;
            sessions.insert(
                meta.session_id.clone(),
                Arc::new(SessionSlot {
                    meta: RwLock::new(meta),
                    snapshot: RwLock::new(Arc::new(session)),
                    writer: tokio::sync::Mutex::new(()),
                    display,
                }),
            );
        }
        Ok(Self {
            root,
            sessions: RwLock::new(sessions),
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.read().get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().keys().cloned().collect()
    }

    fn fresh_id(&self) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let id = format!("s{}-{n}", Utc::now().format("%Y%m%d%H%M%S"));
            if !self.sessions.read().contains_key(&id) && !self.root.join(&id).exists() {
                return id;
            }
        }
    }

    /// Build everything the request needs and persist the new session. Blocking.
    pub fn create(&self, req: CreateRequest) -> Result<Arc<SessionSlot>> {
        let mut config = SessionConfig {
            classes: req.classes,
            ..SessionConfig::default()
        };
        if let Some(name) = &req.name {
            config.name = name.clone();
        }
        if let Some(k) = req.k {
            config.k = k;
        }
        if let Some(m) = &req.metric {
            config.metric = m.parse()?;
        }
        if let Some(l) = &req.laplacian {
            config.laplacian = l.parse()?;
        }
        if let Some(g) = req.gamma {
            config.gamma = g;
        }
        if let Some(m) = req.m {
            config.m = m;
        }
        if let Some(a) = &req.acquisition {
            config.acquisition = a.parse()?;
        }
        if let Some(s) = req.seed {
            config.seed = s;
        }
        config.validate()?;

        let (graph, d) = match (&req.features, &req.graph) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter("give either features or graph, not both".into()))
            }
            (None, None) => return Err(Error::InvalidParameter("a features or graph file is required".into())),
            (Some(path), None) => {
                let x = load_features(path, FeatureFormat::from_path(path))?;
                let graph = build_graph(
                    &x,
                    &GraphConfig {
                        k: config.k,
                        metric: config.metric,
                        kernel: Kernel::SelfTuning,
                    },
                )?;
                (graph, Some(x.d()))
            }
            (None, Some(path)) => {
                let g = SimilarityGraph::load(path)?;
                g.ensure_connected()?;
                (g, None)
            }
        };
        let n = graph.n();
        config.m = config.m.min(n);
        let truth = match &req.labels {
            Some(path) => {
                let labels = load_labels(path, Some(config.classes))?;
                let dense = labels.dense(n)?;
                let full: Option<Vec<usize>> = dense.into_iter().collect();
                Some(full.ok_or_else(|| Error::InvalidLabels("ground truth must label every node".into()))?)
            }
            None => None,
        };
        let split = match &req.split {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                Some(Split::parse(&text)?)
            }
            None => None,
        };
        if let Some(display) = &req.display {
            if display.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "display has {} entries, graph has {n} nodes",
                    display.len()
                )));
            }
        }
        let spectral = if config.acquisition.needs_covariance() {
            let opts = SpectralOptions {
                seed: config.seed,
                ..SpectralOptions::with_m(config.m)
            };
            Some(Arc::new(cached_spectrum(&graph, config.laplacian, &opts, &self.root.join("cache"))?))
        } else {
            None
        };

        let id = self.fresh_id();
        let dir = self.root.join(&id);
        let setup = SessionSetup {
            config,
            graph: Arc::new(graph),
            spectral,
            seeds: req.seeds.iter().map(|s| (s.node, s.label)).collect(),
            truth,
            split,
        };
        let session = match ActiveSession::create_in(&dir, setup) {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        let display = req.display.map(Arc::new);
        if let Some(values) = &display {
            let text = serde_json::to_string(&**values).expect("display serializes");
            write_atomic(&dir.join(DISPLAY_FILE), text.as_bytes())?;
        }
        let stamp = now();
        let meta = SessionMeta {
            session_id: id.clone(),
            dataset: req.name.unwrap_or_else(|| "dataset".into()),
            d,
            created: stamp.clone(),
            updated: stamp,
        };
        // meta.json marks the directory as complete
        write_meta(&dir, &meta)?;
        let slot = Arc::new(SessionSlot {
            meta: RwLock::new(meta),
            snapshot: RwLock::new(Arc::new(session)),
            writer: tokio::sync::Mutex::new(()),
            display,
        });
        self.sessions.write().insert(id, slot.clone());
        Ok(slot)
    }
}

fn read_display(dir: &Path) -> Result<Option<Arc<Vec<serde_json::Value>>>> {
    let path = dir.join(DISPLAY_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let values = serde_json::from_str(&text).map_err(|e| Error::Journal(format!("{}: {e}", path.display())))?;
    Ok(Some(Arc::new(values)))
}
