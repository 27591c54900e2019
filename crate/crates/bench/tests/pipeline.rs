use argus_bench::commands;
use argus_bench::files;
use argus_bench::sweep::{grid, run_sweep, ProgressEntry, Status};
use argus_bench::synth::{count_components, octant_name, SynthSpec, NO_LESION_REPORT};
use argus_bench::{BenchError, RunConfig};
use argus_core::curation::RawRecord;
use argus_core::volume::read_ctvol;
use std::path::Path;

fn config(root: &Path, extra: &str) -> RunConfig {
    let text = format!(r#"{{"seed": 21{extra}}}"#);
    RunConfig::from_json(&text, root).unwrap()
}

#[derive(serde::Deserialize)]
struct LesionRow {
    id: String,
    lesions: Vec<argus_bench::synth::Lesion>,
}

#[test]
fn phantoms_read_back_with_their_lesion_counts() {
    for k in [0usize, 2] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &format!(r#", "synth": {{"n_samples": 5, "lesions": [{k}, {k}]}}"#));
        assert_eq!(commands::synth(&cfg).unwrap(), 5);
        let synth = cfg.out_dir("synth");
        let corpus: Vec<RawRecord> = files::read_jsonl(&synth.join("corpus.jsonl")).unwrap();
        let truth: Vec<LesionRow> = files::read_jsonl(&synth.join("lesions.jsonl")).unwrap();
        for (rec, t) in corpus.iter().zip(&truth) {
            assert_eq!(rec.id, t.id);
            assert_eq!(t.lesions.len(), k);
            let hu = read_ctvol(synth.join(rec.volume.as_ref().unwrap())).unwrap();
            // Background is -800 HU and lesions +800 HU.
            assert_eq!(count_components(&hu, 0.0), k, "{}", rec.id);
            let text = rec.findings.clone().or(rec.report.clone()).unwrap();
            if k == 0 {
                assert!(text.contains(NO_LESION_REPORT));
            } else {
                for l in &t.lesions {
                    assert!(text.contains(&octant_name(l.octant)), "{text}");
                }
            }
        }
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_and_curate_repeat_byte_for_byte() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = config(dir.path(), r#", "synth": {"n_samples": 6}"#);
            commands::synth(&cfg).unwrap();
            commands::curate(&cfg).unwrap();
            commands::split(&cfg).unwrap();
            tree(&cfg.paths.out)
        })
        .collect();
    assert!(!runs[0].is_empty());
    assert!(runs[0] == runs[1]);
}

#[test]
fn later_stages_need_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#", "synth": {"n_samples": 6}"#);
    let err = commands::curate(&cfg).unwrap_err();
    assert!(matches!(err, BenchError::Io { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pretrain_audit_is_clean_and_checkpoints_exist() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#", "synth": {"n_samples": 6}, "pretrain": {"epochs": 1}, "align": {"stage2_epochs": 1}"#);
    commands::synth(&cfg).unwrap();
    commands::curate(&cfg).unwrap();
    commands::split(&cfg).unwrap();
    commands::preprocess(&cfg).unwrap();
    let s = commands::pretrain(&cfg).unwrap();
    assert!(s.audit.iter().all(|a| a.violations.is_empty()), "{:?}", s.audit);
    let stage1 = s.audit.iter().find(|a| a.stage == "stage1").unwrap();
    assert!(stage1.changed.iter().all(|n| n.starts_with("connector.")));
    let out = cfg.out_dir("pretrain");
    for f in ["history.csv", "audit.json", "model.avt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

fn sweep_config(root: &Path, ratios: &str) -> RunConfig {
    config(
        root,
        &format!(
            r#", "sweep": {{"mask_ratios": {ratios}, "n_samples": 9, "eval_samples": 3, "pretrain_steps": 2, "align_steps": 2}}"#
        ),
    )
}

#[test]
fn sweep_runs_each_distinct_cell_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), "[0.25, 0.5, 0.75, 0.5]");
    let o = run_sweep(&cfg).unwrap();
    assert_eq!(o.rows.len(), 3);
    assert_eq!(o.ran.len(), 3);
    assert_eq!(o.duplicates.len(), 1);
    let mut reader = csv::Reader::from_path(cfg.out_dir("sweep").join("results.csv")).unwrap();
    assert_eq!(reader.records().count(), 3);

    let again = run_sweep(&cfg).unwrap();
    assert!(again.ran.is_empty());
    assert_eq!(again.skipped.len(), 3);
    assert_eq!(again.rows, o.rows);
}

#[test]
fn sweep_resumes_from_a_partial_progress_log() {
    let dir = tempfile::tempdir().unwrap();
    let full = sweep_config(dir.path(), "[0.25, 0.75]");
    let (cells, _) = grid(&full.sweep);

    // Finish the first cell, then fake a crash in the second and a stale
    // entry from an older grid.
    let first = sweep_config(dir.path(), "[0.25]");
    let done = run_sweep(&first).unwrap();
    let log = full.out_dir("sweep").join("progress.jsonl");
    let mut entries: Vec<ProgressEntry> = files::read_jsonl(&log).unwrap();
    entries.push(ProgressEntry {
        cell: cells[1].key(),
        status: Status::Started,
        row: None,
    });
    entries.push(ProgressEntry {
        cell: "mask_ratio=0.9|compression=pixel_shuffle|connector_depth=2|data_fraction=1".into(),
        status: Status::Complete,
        row: done.rows.first().cloned(),
    });
    files::write_jsonl(&log, &entries).unwrap();

    let o = run_sweep(&full).unwrap();
    assert_eq!(o.skipped, vec![cells[0].key()]);
    assert_eq!(o.ran, vec![cells[1].key()]);
    assert_eq!(o.rows[0], done.rows[0]);
    let after: Vec<ProgressEntry> = files::read_jsonl(&log).unwrap();
    assert!(after.iter().all(|e| !e.cell.contains("mask_ratio=0.9")));
    assert!(after.iter().any(|e| e.cell == cells[1].key() && e.status == Status::Incomplete));
    assert!(after.iter().any(|e| e.cell == cells[1].key() && e.status == Status::Complete));
}

#[test]
fn oversize_lesions_are_rejected() {
    let spec = SynthSpec {
        dims: [12, 12, 12],
        ..SynthSpec::default()
    };
    assert!(matches!(spec.generate(), Err(BenchError::Validation(_))));
}
