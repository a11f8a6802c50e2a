//! Oracle-driven active-learning experiments and synthetic datasets.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::active::{AcquisitionKind, QueryRecord};
use crate::data::{FeatureMatrix, LabelFile};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, Kernel, LaplacianKind, Metric, SimilarityGraph, DEFAULT_K};
use crate::session::{ActiveSession, JournalEntry, LabelSource, SessionConfig, SessionSetup, Split};
use crate::spectral::{graph_spectrum, SpectralData, SpectralOptions, DEFAULT_M};
use crate::ssl::{DEFAULT_GAMMA, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Moons,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "moons" => Ok(SynthKind::Moons),
            other => Err(Error::InvalidParameter(format!(
                "unknown dataset {other:?}, expected one of {{blobs,moons}}"
            ))),
        }
    }
}

/// Parameters for [`SynthSpec::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
    /// Ambient dimension for blobs; defaults to `classes`. Moons are always planar.
    pub dim: Option<usize>,
}

impl SynthSpec {
    /// Labeled synthetic points; node `i` belongs to class `i % classes`.
    ///
    /// Blobs place class `c` around `e_c / sqrt(2)`, so any two centers are at
    /// distance 1, with isotropic Gaussian noise in every coordinate. Moons lay
    /// out interleaved half circles in the plane, two classes per pair, with
    /// neighboring pairs overlapping in x.
    pub fn generate(&self) -> Result<(FeatureMatrix, LabelFile)> {
        let Self { kind, n, classes, noise, seed, dim } = *self;
        if classes < 2 {
            return Err(Error::InvalidParameter("synthetic data needs at least two classes".into()));
        }
        if n < classes {
            return Err(Error::InvalidParameter(format!("n = {n} is smaller than classes = {classes}")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise must be non-negative, got {noise}")));
        }
        let d = match kind {
            SynthKind::Blobs => dim.unwrap_or(classes),
            SynthKind::Moons => 2,
        };
        if kind == SynthKind::Blobs && d < classes {
            return Err(Error::InvalidParameter(format!("blob dimension {d} is smaller than classes = {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut values = Vec::with_capacity(n * d);
        let mut point = vec![0.0; d];
        for i in 0..n {
            let c = i % classes;
            point.fill(0.0);
            match kind {
                SynthKind::Blobs => point[c] = std::f64::consts::FRAC_1_SQRT_2,
                SynthKind::Moons => {
                    let t = rng.random::<f64>() * std::f64::consts::PI;
                    let shift = 2.0 * (c / 2) as f64;
                    if c % 2 == 0 {
                        point[0] = t.cos() + shift;
                        point[1] = t.sin();
                    } else {
                        point[0] = 1.0 - t.cos() + shift;
                        point[1] = 0.5 - t.sin();
                    }
                }
            }
            for p in &mut point {
                *p += noise * normal.sample(&mut rng);
                values.push(*p as f32);
            }
        }
        let features = FeatureMatrix::new(n, d, values)?;
        let labels = LabelFile::new((0..n).map(|i| (i, i % classes)).collect(), Some(classes))?;
        Ok((features, labels))
    }
}

/// [`SynthSpec::generate`] with the default dimension.
pub fn synth_dataset(kind: SynthKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<(FeatureMatrix, LabelFile)> {
    SynthSpec { kind, n, classes, noise, seed, dim: None }.generate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub acquisition: AcquisitionKind,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub gamma: f64,
    pub m: usize,
    pub k: usize,
    pub metric: Metric,
    pub laplacian: LaplacianKind,
    pub initial_per_class: usize,
    pub split: Option<Split>,
    pub tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionKind::Uncertainty,
            steps: 500,
            trials: 10,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            m: DEFAULT_M,
            k: DEFAULT_K,
            metric: Metric::Angular,
            laplacian: LaplacianKind::Unnormalized,
            initial_per_class: 1,
            split: None,
            tol: DEFAULT_TOL,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.initial_per_class == 0 {
            return Err(Error::InvalidParameter("initial_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean and standard deviation of accuracy per step over trials.
/// Entry `s` is the accuracy after `s` queries beyond the seed labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyCurve {
    pub acquisition: AcquisitionKind,
    pub trials: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AccuracyCurve {
    /// Population statistics over `per_trial` rows, reduced in trial order.
    pub fn from_trials(acquisition: AcquisitionKind, per_trial: &[Vec<f64>]) -> Self {
        let trials = per_trial.len();
        let len = per_trial.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; len];
        let mut std = vec![0.0; len];
        for s in 0..len {
            let mu = per_trial.iter().map(|t| t[s]).sum::<f64>() / trials as f64;
            let var = per_trial.iter().map(|t| (t[s] - mu).powi(2)).sum::<f64>() / trials as f64;
            mean[s] = mu;
            std[s] = var.sqrt();
        }
        Self {
            acquisition,
            trials,
            mean,
            std,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_accuracy,std_accuracy\n");
        for (s, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(out, "{s},{m},{d}").unwrap();
        }
        out
    }
}

/// Plot data for several curves over a shared step axis.
pub fn plot_json(curves: &[AccuracyCurve]) -> serde_json::Value {
    let len = curves.iter().map(AccuracyCurve::len).max().unwrap_or(0);
    let mut map = serde_json::Map::new();
    for c in curves {
        map.insert(
            c.acquisition.name().to_string(),
            serde_json::json!({ "mean": c.mean, "std": c.std, "trials": c.trials }),
        );
    }
    serde_json::json!({ "steps": (0..len).collect::<Vec<_>>(), "curves": map })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub trial: usize,
    pub journal: Vec<JournalEntry>,
    pub queries: Vec<QueryRecord>,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub curve: AccuracyCurve,
    pub trials: Vec<TrialLog>,
}

impl ExperimentResult {
    /// All trial journals, each row prefixed with its trial number.
    pub fn journal_csv(&self) -> String {
        let mut out = String::from("trial,step,index,label,source\n");
        for t in &self.trials {
            for e in &t.journal {
                writeln!(out, "{},{},{},{},{}", t.trial, e.step, e.index, e.label, e.source).unwrap();
            }
        }
        out
    }
}

/// Build the graph (and the spectrum when needed) and run the experiment.
pub fn run_experiment(features: &FeatureMatrix, labels: &LabelFile, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let graph = Arc::new(build_graph(
        features,
        &GraphConfig {
            k: config.k,
            metric: config.metric,
            kernel: Kernel::SelfTuning,
        },
    )?);
    let spectral = if config.acquisition.needs_covariance() {
        let opts = SpectralOptions {
            seed: config.seed,
            ..SpectralOptions::with_m(config.m.min(graph.n()))
        };
        Some(Arc::new(graph_spectrum(&graph, config.laplacian, &opts)?))
    } else {
        None
    };
    let truth: Vec<usize> = labels.dense(graph.n())?.into_iter().enumerate().map(|(i, c)| {
        c.ok_or_else(|| Error::InvalidLabels(format!("node {i} has no ground-truth label")))
    }).collect::<Result<_>>()?;
    run_on_graph(graph, spectral, &truth, labels.classes, config)
}

/// Run trials on a prebuilt graph; `spectral` may be shared across calls.
pub fn run_on_graph(
    graph: Arc<SimilarityGraph>,
    spectral: Option<Arc<SpectralData>>,
    truth: &[usize],
    classes: usize,
    config: &ExperimentConfig,
) -> Result<ExperimentResult> {
    config.validate()?;
    let n = graph.n();
    if truth.len() != n {
        return Err(Error::InvalidLabels(format!("ground truth has {} entries, graph has {n} nodes", truth.len())));
    }
    let spectral = match spectral {
        Some(s) if s.m() > config.m => Some(Arc::new(s.truncated(config.m)?)),
        other => other,
    };
    let train: Vec<usize> = match &config.split {
        Some(s) => s.train.clone(),
        None => (0..n).collect(),
    };
    let mut by_class = vec![Vec::new(); classes];
    for &i in &train {
        let c = truth[i];
        if c >= classes {
            return Err(Error::LabelOutOfRange { label: c, classes });
        }
        by_class[c].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < config.initial_per_class {
            return Err(Error::InvalidLabels(format!(
                "class {c} has {} training nodes, fewer than the {} seed labels requested",
                members.len(),
                config.initial_per_class
            )));
        }
    }
    let seeds_total = classes * config.initial_per_class;
    if config.steps > train.len() - seeds_total {
        return Err(Error::InvalidParameter(format!(
            "budget of {} queries exceeds the {} unlabeled training nodes",
            config.steps,
            train.len() - seeds_total
        )));
    }

    let logs: Vec<TrialLog> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(t, &graph, spectral.as_ref(), truth, classes, &by_class, config))
        .collect::<Result<_>>()?;
    let per_trial: Vec<Vec<f64>> = logs.iter().map(|l| l.accuracy.clone()).collect();
    Ok(ExperimentResult {
        curve: AccuracyCurve::from_trials(config.acquisition, &per_trial),
        trials: logs,
    })
}

fn run_trial(
    trial: usize,
    graph: &Arc<SimilarityGraph>,
    spectral: Option<&Arc<SpectralData>>,
    truth: &[usize],
    classes: usize,
    by_class: &[Vec<usize>],
    config: &ExperimentConfig,
) -> Result<TrialLog> {
    let seed = config.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = Vec::with_capacity(classes * config.initial_per_class);
    for (c, members) in by_class.iter().enumerate() {
        for &i in members.choose_multiple(&mut rng, config.initial_per_class) {
            seeds.push((i, c));
        }
    }
    let mut session = ActiveSession::start(SessionSetup {
        config: SessionConfig {
            name: format!("trial-{trial}"),
            k: config.k,
            metric: config.metric,
            laplacian: config.laplacian,
            gamma: config.gamma,
            m: config.m,
            acquisition: config.acquisition,
            seed,
            classes,
            tol: config.tol,
        },
        graph: graph.clone(),
        spectral: spectral.cloned(),
        seeds,
        truth: Some(truth.to_vec()),
        split: config.split.clone(),
    })?;
    let mut accuracy = Vec::with_capacity(config.steps + 1);
    accuracy.push(session.accuracy().unwrap_or(0.0));
    let mut queries = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (node, _) = session.pending().ok_or(Error::PoolExhausted)?;
        let record = session.commit(node, truth[node], LabelSource::Oracle, false)?;
        accuracy.push(record.accuracy_after.unwrap_or(0.0));
        queries.push(record);
    }
    Ok(TrialLog {
        trial,
        journal: session.journal().to_vec(),
        queries,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_without_noise_sit_on_centers() {
        let (x, y) = synth_dataset(SynthKind::Blobs, 12, 3, 0.0, 1).unwrap();
        assert_eq!(x.d(), 3);
        for i in 0..12 {
            let row = x.row_f64(i);
            let c = y.entries[i].1;
            assert_eq!(c, i % 3);
            for (j, v) in row.iter().enumerate() {
                let expect = if j == c { std::f32::consts::FRAC_1_SQRT_2 as f64 } else { 0.0 };
                assert_eq!(*v, expect);
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in [SynthKind::Blobs, SynthKind::Moons] {
            let a = synth_dataset(kind, 50, 4, 0.1, 9).unwrap();
            let b = synth_dataset(kind, 50, 4, 0.1, 9).unwrap();
            assert_eq!(a.0.to_binary(), b.0.to_binary());
            assert_eq!(a.1, b.1);
        }
        assert!(synth_dataset(SynthKind::Blobs, 3, 4, 0.1, 0).is_err());
    }

    #[test]
    fn curve_statistics_and_csv() {
        let c = AccuracyCurve::from_trials(AcquisitionKind::Random, &[vec![0.5, 1.0], vec![0.7, 1.0]]);
        assert!((c.mean[0] - 0.6).abs() < 1e-15);
        assert!((c.std[0] - 0.1).abs() < 1e-12);
        assert_eq!(c.std[1], 0.0);
        assert!(c.to_csv().starts_with("step,mean_accuracy,std_accuracy\n0,"));
        let plot = plot_json(&[c]);
        assert_eq!(plot["steps"], serde_json::json!([0, 1]));
        assert_eq!(plot["curves"]["random"]["trials"], 2);
    }

    fn small_setup() -> (FeatureMatrix, LabelFile) {
        let spec = SynthSpec { kind: SynthKind::Blobs, n: 120, classes: 3, noise: 0.2, seed: 5, dim: Some(12) };
        spec.generate().unwrap()
    }

    #[test]
    fn zero_steps_gives_baseline_only() {
        let (x, y) = small_setup();
        let cfg = ExperimentConfig {
            steps: 0,
            trials: 2,
            k: 10,
            metric: Metric::Euclidean,
            ..ExperimentConfig::default()
        };
        let res = run_experiment(&x, &y, &cfg).unwrap();
        assert_eq!(res.curve.len(), 1);
        assert_eq!(res.curve.trials, 2);
    }

    #[test]
    fn budget_and_class_checks() {
        let (x, y) = small_setup();
        let cfg = ExperimentConfig {
            steps: 118,
            trials: 1,
            k: 10,
            metric: Metric::Euclidean,
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_experiment(&x, &y, &cfg), Err(Error::InvalidParameter(_))));
        let cfg = ExperimentConfig {
            initial_per_class: 41,
            ..cfg
        };
        assert!(matches!(run_experiment(&x, &y, &cfg), Err(Error::InvalidLabels(_))));
    }

    #[test]
    fn experiment_is_reproducible() {
        let (x, y) = small_setup();
        let cfg = ExperimentConfig {
            acquisition: AcquisitionKind::Vopt,
            steps: 10,
            trials: 3,
            m: 20,
            k: 10,
            metric: Metric::Euclidean,
            ..ExperimentConfig::default()
        };
        let a = run_experiment(&x, &y, &cfg).unwrap();
        let b = run_experiment(&x, &y, &cfg).unwrap();
        assert_eq!(a.curve.to_csv(), b.curve.to_csv());
        assert_eq!(a.journal_csv(), b.journal_csv());
        assert!(a.curve.mean.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.trials.len(), 3);
    }
}
