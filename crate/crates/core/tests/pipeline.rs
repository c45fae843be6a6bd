use chrono::{DateTime, Utc};

use templeak_core::config::load_sweep;
use templeak_core::percept::{ClassRegistry, StubExtractor, StubSegmenter};
use templeak_core::pipeline::{run_analyze, run_detect, run_sweep, seal_run, AnalyzeOptions, DetectOptions, Perception, PipelineError};
use templeak_core::providers::StubProvider;
use templeak_core::store::Store;

fn at() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-04-05T06:07:08Z").unwrap().with_timezone(&Utc)
}

fn demo() -> templeak_core::config::LoadedSweep {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo.toml");
    load_sweep(&path, &ClassRegistry::default()).unwrap()
}

fn provider(l: &templeak_core::config::LoadedSweep) -> StubProvider {
    let (w, h) = (l.config.width, l.config.height);
    StubProvider::default().with_plants(l.plants.iter().map(|p| p.stub_plant(w, h)).collect())
}

fn register(store: &Store, l: &templeak_core::config::LoadedSweep) {
    for p in &l.plants {
        let r = p.region(l.config.width, l.config.height);
        store.add_atlas_region(&r.base, &r.mask.to_rle()).unwrap();
    }
}

#[tokio::test]
async fn rerunning_stages_is_free_and_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let l = demo();
    register(&store, &l);
    let p = provider(&l);
    let first = run_sweep(&store, &l.config, &p, 2, at()).await.unwrap();
    assert_eq!(first.batch.records.len(), 4);
    assert_eq!(p.calls(), 4);

    let seg = StubSegmenter::new(store.load_atlas().unwrap());
    let pc = Perception::new(&seg, &StubExtractor);
    let d1 = run_detect(&store, &pc, &first.run_id, &DetectOptions::default()).await.unwrap();
    let a1 = run_analyze(&store, &pc, &first.run_id, &AnalyzeOptions::default()).await.unwrap();
    let report = std::fs::read(&d1.report_path).unwrap();
    let findings = std::fs::read(&a1.findings_path).unwrap();
    let manifest_len = std::fs::metadata(dir.path().join("runs").join(&first.run_id).join("manifest.jsonl")).unwrap().len();

    // a fresh process: new store handle, new provider
    let store = Store::open(dir.path()).unwrap();
    let p2 = provider(&l);
    let again = run_sweep(&store, &l.config, &p2, 2, at()).await.unwrap();
    assert!(again.resumed);
    assert_eq!(again.run_id, first.run_id);
    assert_eq!(p2.calls(), 0);
    let d2 = run_detect(&store, &pc, &first.run_id, &DetectOptions::default()).await.unwrap();
    assert!(d2.unchanged);
    let a2 = run_analyze(&store, &pc, &first.run_id, &AnalyzeOptions::default()).await.unwrap();
    assert_eq!(a2.new, 0);
    assert_eq!(std::fs::read(&d2.report_path).unwrap(), report);
    assert_eq!(std::fs::read(&a2.findings_path).unwrap(), findings);
    let len = std::fs::metadata(dir.path().join("runs").join(&first.run_id).join("manifest.jsonl")).unwrap().len();
    assert_eq!(len, manifest_len, "re-running appended to the manifest");

    // sealed: identical results are accepted, different ones are refused
    seal_run(&store, &first.run_id).unwrap();
    assert!(run_detect(&store, &pc, &first.run_id, &DetectOptions::default()).await.unwrap().unchanged);
    let other = DetectOptions {
        threshold: 0.5,
        ..DetectOptions::default()
    };
    assert!(matches!(
        run_detect(&store, &pc, &first.run_id, &other).await,
        Err(PipelineError::Sealed(_))
    ));
}

#[tokio::test]
async fn replay_survives_a_cut_at_every_byte() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let l = demo();
    register(&store, &l);
    let out = run_sweep(&store, &l.config, &provider(&l), 1, at()).await.unwrap();
    let seg = StubSegmenter::new(store.load_atlas().unwrap());
    run_detect(&store, &Perception::new(&seg, &StubExtractor), &out.run_id, &DetectOptions::default())
        .await
        .unwrap();
    let path = dir.path().join("runs").join(&out.run_id).join("manifest.jsonl");
    let full = std::fs::read(&path).unwrap();
    let ends: Vec<usize> = full.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1).collect();

    // state after each durable line, from a clean replay of that prefix
    let mut expected = Vec::new();
    for &end in &ends {
        std::fs::write(&path, &full[..end]).unwrap();
        expected.push(Store::open(dir.path()).unwrap().replay(&out.run_id).unwrap());
    }
    let step = (full.len() / 400).max(1);
    for cut in (ends[0]..full.len()).step_by(step) {
        std::fs::write(&path, &full[..cut]).unwrap();
        let got = Store::open(dir.path()).unwrap().replay(&out.run_id).unwrap();
        let durable = ends.iter().rposition(|&e| e <= cut).unwrap();
        assert_eq!(got, expected[durable], "cut at byte {cut}");
    }
    std::fs::write(&path, &full).unwrap();
}
