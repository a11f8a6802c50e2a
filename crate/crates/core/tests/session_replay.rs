use std::fs;
use std::sync::Arc;

use graphal_core::active::AcquisitionKind;
use graphal_core::graph::{build_graph, GraphConfig, Kernel, LaplacianKind, Metric};
use graphal_core::session::{journal_to_csv, JournalEntry, JOURNAL_FILE};
use graphal_core::sim::{SynthKind, SynthSpec};
use graphal_core::spectral::{graph_spectrum, SpectralOptions};
use graphal_core::{ActiveSession, LabelSource, SessionConfig, SessionSetup};

fn setup(acq: AcquisitionKind) -> SessionSetup {
    let spec = SynthSpec {
        kind: SynthKind::Blobs,
        n: 300,
        classes: 3,
        noise: 0.15,
        seed: 4,
        dim: Some(9),
    };
    let (x, y) = spec.generate().unwrap();
    let graph = build_graph(
        &x,
        &GraphConfig {
            k: 10,
            metric: Metric::Euclidean,
            kernel: Kernel::SelfTuning,
        },
    )
    .unwrap();
    let spectral = graph_spectrum(&graph, LaplacianKind::Unnormalized, &SpectralOptions::with_m(40)).unwrap();
    SessionSetup {
        config: SessionConfig {
            acquisition: acq,
            classes: 3,
            m: 40,
            ..SessionConfig::default()
        },
        graph: Arc::new(graph),
        spectral: Some(Arc::new(spectral)),
        seeds: vec![(0, 0), (1, 1), (2, 2)],
        truth: Some(y.entries.iter().map(|e| e.1).collect()),
        split: None,
    }
}

fn label_pending(s: &mut ActiveSession, count: usize) {
    for _ in 0..count {
        let (q, _) = s.pending().unwrap();
        let truth = s.truth().unwrap()[q];
        s.commit(q, truth, LabelSource::Human, false).unwrap();
    }
}

#[test]
fn killed_after_journal_append_replays_to_same_state() {
    let root = tempfile::tempdir().unwrap();
    let mut reference = ActiveSession::create_in(root.path().join("a"), setup(AcquisitionKind::Vopt)).unwrap();
    label_pending(&mut reference, 12);

    // Second session stops after 11 commits; the 12th entry reaches the journal
    // but the process dies before touching memory, leaving a stale temp file too.
    let dir_b = root.path().join("b");
    let mut victim = ActiveSession::create_in(&dir_b, setup(AcquisitionKind::Vopt)).unwrap();
    label_pending(&mut victim, 11);
    let (q, _) = victim.pending().unwrap();
    let mut journal = victim.journal().to_vec();
    journal.push(JournalEntry {
        step: journal.len(),
        index: q,
        label: victim.truth().unwrap()[q],
        source: LabelSource::Human,
    });
    fs::write(dir_b.join(JOURNAL_FILE), journal_to_csv(&journal)).unwrap();
    fs::write(dir_b.join("journal.csv.tmp"), "0,garbage").unwrap();
    drop(victim);

    let restored = ActiveSession::open(&dir_b).unwrap();
    assert_eq!(restored.journal(), reference.journal());
    assert_eq!(restored.pending(), reference.pending());
    let labeled = |s: &ActiveSession| {
        let mut l = s.labels().labeled().to_vec();
        l.sort();
        l
    };
    assert_eq!(labeled(&restored), labeled(&reference));
    let gap = (restored.covariance().unwrap().sigma() - reference.covariance().unwrap().sigma()).amax();
    assert!(gap <= 1e-10, "sigma gap {gap:e}");
}

#[test]
fn sessions_are_independent_and_idempotent() {
    let mut a = ActiveSession::start(setup(AcquisitionKind::Mcvopt)).unwrap();
    let b = ActiveSession::start(setup(AcquisitionKind::Mcvopt)).unwrap();
    assert_eq!(a.pending(), a.pending());
    label_pending(&mut a, 3);
    assert_eq!(b.labeled_count(), 3);
    assert_eq!(a.labeled_count(), 6);
    let h = a.history();
    assert_eq!(h.len(), 6);
    assert!(h[..3].iter().all(|e| e.source == LabelSource::Seed && e.acquisition_value.is_none()));
    assert!(h[3..].iter().all(|e| e.source == LabelSource::Human && e.acquisition_value.is_some()));
    assert!(h.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn override_commit_is_replayed() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("s");
    let mut s = ActiveSession::create_in(&dir, setup(AcquisitionKind::Mc)).unwrap();
    let (q, _) = s.pending().unwrap();
    let other = (3..300).find(|&i| i != q).unwrap();
    s.commit(other, 1, LabelSource::Human, true).unwrap();
    label_pending(&mut s, 2);
    let r = ActiveSession::open(&dir).unwrap();
    assert_eq!(r.journal(), s.journal());
    assert_eq!(r.pending(), s.pending());
    assert_eq!(r.predictions(), s.predictions());
}
