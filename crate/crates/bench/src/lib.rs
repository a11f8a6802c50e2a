//! Shared fixtures for the benchmarks.

use graphal_core::graph::{build_graph, GraphConfig, Kernel, Metric};
use graphal_core::sim::{SynthKind, SynthSpec};
use graphal_core::ssl::LabelState;
use graphal_core::{FeatureMatrix, SimilarityGraph};

/// Well-separated 4-class blobs in 12 dimensions.
pub fn blobs(n: usize) -> (FeatureMatrix, Vec<usize>) {
    let spec = SynthSpec {
        kind: SynthKind::Blobs,
        n,
        classes: 4,
        noise: 0.15,
        seed: 0,
        dim: Some(12),
    };
    let (x, y) = spec.generate().expect("valid synthetic spec");
    (x, y.entries.iter().map(|e| e.1).collect())
}

pub fn graph_config() -> GraphConfig {
    GraphConfig {
        k: 20,
        metric: Metric::Euclidean,
        kernel: Kernel::SelfTuning,
    }
}

pub fn blob_graph(n: usize) -> (SimilarityGraph, Vec<usize>) {
    let (x, y) = blobs(n);
    (build_graph(&x, &graph_config()).expect("blobs connect"), y)
}

/// The first `per_class` nodes of each class, labeled with the truth.
pub fn seed_labels(truth: &[usize], classes: usize, per_class: usize) -> LabelState {
    let mut state = LabelState::new(truth.len(), classes).expect("non-empty");
    let mut counts = vec![0; classes];
    for (i, &c) in truth.iter().enumerate() {
        if counts[c] < per_class {
            state.insert(i, c).expect("fresh node");
            counts[c] += 1;
        }
    }
    state
}
