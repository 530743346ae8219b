mod common;

use std::fs;
use std::path::Path;

use common::{config, fixture, small, Fixture};
use csegg::protocols::ScenarioKind;
use csegg::runner::{run_scenario, RunConfig, RunContext, RunError, RunOptions, RunRecord};
use csegg::synth::write_placeholder_images;

fn run(cfg: &RunConfig, dir: &Path) -> RunRecord {
    let ctx = RunContext::prepare(cfg, cfg.seeds[0], dir).unwrap();
    run_scenario(cfg, &ctx, cfg.seeds[0], dir, RunOptions::default()).unwrap()
}

fn s1(dir: &Path) -> Fixture {
    fixture(dir, &small(300), ScenarioKind::S1, 3)
}

#[test]
fn oracle_naive_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let rec = run(&config(&f, "naive", "oracle"), &tmp.path().join("run"));
    let r = rec.report(20).unwrap();
    assert_eq!(r.tasks.len(), 5);
    for t in &r.tasks {
        assert_eq!(t.avg_recall, 100.0);
        assert_eq!(t.forgetting, 0.0);
        assert_eq!(t.cumulative_recall, Some(100.0));
    }
    assert_eq!(r.bwt, Some(0.0));
    assert_eq!(r.fwt, None);
    assert_eq!(rec.checkpoints.len(), 5);
    let journal = fs::read_to_string(tmp.path().join("run/journal.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 5);
}

#[test]
fn empty_predictor_scores_zero_and_fwt_uses_scratch_models() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let rec = run(&config(&f, "naive", "empty"), &tmp.path().join("empty"));
    assert!(rec.report(20).unwrap().tasks.iter().all(|t| t.avg_recall == 0.0));
    let cfg = RunConfig { fwt: true, ..config(&f, "naive", "oracle") };
    let rec = run(&cfg, &tmp.path().join("fwt"));
    let r = rec.report(20).unwrap();
    assert_eq!(r.fwt, Some(0.0));
    assert!(r.recall.baselines.as_ref().unwrap().iter().all(|b| *b == Some(100.0)));
}

#[test]
fn decay_oracle_forgets_old_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let rec = run(&config(&f, "naive", "decay_oracle:1"), &tmp.path().join("run"));
    let r = rec.report(20).unwrap();
    assert_eq!(r.recall.get(1, 1).unwrap(), 100.0);
    for t in 2..=5 {
        assert_eq!(r.recall.get(t, 1).unwrap(), 0.0);
        assert_eq!(r.recall.get(t, t).unwrap(), 100.0);
    }
    assert_eq!(r.tasks[4].forgetting, -100.0);
    assert_eq!(r.bwt, Some(-100.0));
}

#[test]
fn replay_keeps_decayed_classes_alive() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let naive = run(&config(&f, "naive", "decay_oracle:1"), &tmp.path().join("naive"));
    let replay = run(&config(&f, "replay@100", "decay_oracle:1"), &tmp.path().join("replay"));
    let (n, r) = (naive.report(20).unwrap(), replay.report(20).unwrap());
    assert!(r.tasks[4].avg_recall > n.tasks[4].avg_recall);
    assert_eq!(r.tasks[4].forgetting, 0.0);
    assert!(replay.storage.replay_bytes.unwrap() > 0);
    // identical payloads at task 1
    let a = fs::read(tmp.path().join("naive/tasks/task1/payload.json")).unwrap();
    let b = fs::read(tmp.path().join("replay/tasks/task1/payload.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(naive.checkpoints[0], replay.checkpoints[0]);
}

#[test]
fn replay_buffer_respects_percentage() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let ids: Vec<&str> = f.dataset.graphs().map(|g| g.image_id.as_str()).collect();
    write_placeholder_images(&f.dataset_dir.join("images"), ids.iter().copied(), 2_000, 1).unwrap();
    let rec = run(&config(&f, "replay@10", "oracle"), &tmp.path().join("run"));
    for row in &rec.rows {
        assert!(row.replay_items > 0);
    }
    assert!(rec.storage.replay_image_bytes.unwrap() >= 2_000 * rec.rows[4].replay_items as u64);
}

#[test]
fn joint_fills_last_row_only() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let rec = run(&config(&f, "joint", "decay_oracle:0.5"), &tmp.path().join("run"));
    let r = rec.report(20).unwrap();
    assert_eq!(rec.rows.len(), 1);
    assert!(r.recall.get(1, 1).is_err());
    for j in 1..=5 {
        assert_eq!(r.recall.get(5, j).unwrap(), 100.0);
    }
    // F needs R[1][1]; joint reports no per-task rows
    assert!(r.tasks.is_empty());
}

#[test]
fn ewc_and_packnet_bookkeeping() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let ewc = run(&config(&f, "ewc", "oracle"), &tmp.path().join("ewc"));
    assert_eq!(ewc.rows[0].ewc_penalty, None);
    assert!(ewc.rows[1..].iter().all(|r| r.ewc_penalty.is_some_and(|p| p >= 0.0)));
    assert!(tmp.path().join("ewc/ewc/fisher_task5.bin").exists());
    let payload = fs::read_to_string(tmp.path().join("ewc/tasks/task2/payload.json")).unwrap();
    assert!(payload.contains("anchor_task1.bin"));
    let pn = run(&config(&f, "packnet", "oracle"), &tmp.path().join("pn"));
    let free: Vec<usize> = pn.rows.iter().map(|r| r.packnet_free.unwrap()).collect();
    assert!(free.windows(2).all(|w| w[1] <= w[0]), "{free:?}");
    let payload = fs::read_to_string(tmp.path().join("pn/tasks/task3/payload.json")).unwrap();
    assert!(payload.contains("mask_task2.bin"));
}

#[test]
fn ras_strategies_run_with_mock_providers() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let mut cfg = config(&f, "ras", "decay_oracle:1");
    cfg.ras.gamma = 2;
    let rec = run(&cfg, &tmp.path().join("ras"));
    assert!(rec.storage.ras_state_bytes.unwrap() > 0);
    assert!(rec.rows[..4].iter().all(|r| r.replay_items > 0));
    let manifest = fs::read_to_string(tmp.path().join("ras/replay/task2.jsonl")).unwrap();
    assert!(manifest.contains("Realistic Image of"));
    let mut cfg = config(&f, "ras_gt", "oracle");
    cfg.ras.gamma = 1;
    cfg.ras.budget.items = Some(20);
    let rec = run(&cfg, &tmp.path().join("gt"));
    assert_eq!(rec.rows[0].replay_items, 20);
    assert_eq!(rec.rows[1].replay_items, 40);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let mut cfg = config(&f, "ras", "decay_oracle:0.3");
    cfg.ras.gamma = 2;
    let whole = tmp.path().join("whole");
    run(&cfg, &whole);
    let split = tmp.path().join("split");
    let ctx = RunContext::prepare(&cfg, 0, &split).unwrap();
    let stop = RunOptions { resume: false, stop_after: Some(2) };
    assert!(matches!(run_scenario(&cfg, &ctx, 0, &split, stop), Err(RunError::Stopped(2))));
    assert!(matches!(run_scenario(&cfg, &ctx, 0, &split, RunOptions::default()), Err(RunError::Resume(_))));
    run_scenario(&cfg, &ctx, 0, &split, RunOptions { resume: true, stop_after: None }).unwrap();
    assert_eq!(fs::read(whole.join("record.json")).unwrap(), fs::read(split.join("record.json")).unwrap());
    let other = RunConfig { predictor: "oracle".into(), ..cfg };
    let err = run_scenario(&other, &ctx, 0, &split, RunOptions { resume: true, stop_after: None }).unwrap_err();
    assert_eq!(err.code(), "ResumeError");
}

#[test]
fn s3_reports_generalization() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), &small(1500), ScenarioKind::S3, 1);
    let rec = run(&config(&f, "naive", "oracle"), &tmp.path().join("run"));
    let r = rec.report(20).unwrap();
    assert_eq!(r.generalization.len(), 4 * 3);
    for g in &r.generalization {
        assert_eq!(g.recall_bbox, Some(100.0));
        assert_eq!(g.recall_rel, Some(100.0));
    }
    let rec = run(&config(&f, "naive", "empty"), &tmp.path().join("empty"));
    assert!(rec.report(20).unwrap().generalization.iter().all(|g| g.recall_bbox == Some(0.0)));
}

#[test]
fn frequency_baseline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let rec = run(&config(&f, "naive", "freq_baseline"), &tmp.path().join("run"));
    let r = rec.report(20).unwrap();
    assert!(r.tasks.iter().all(|t| (0.0..=100.0).contains(&t.avg_recall)));
}

#[cfg(unix)]
#[test]
fn external_command_predictor() {
    use std::os::unix::fs::PermissionsExt;
    let tmp = tempfile::tempdir().unwrap();
    let f = s1(tmp.path());
    let script = tmp.path().join("trainer.sh");
    fs::write(
        &script,
        "#!/bin/sh\nset -e\ncase \"$1\" in\n  train) test -f \"$2\"; echo \"training\"; echo \"ext-$(basename $(dirname $2))\" ;;\n  predict) : > \"$4\" ;;\n  *) exit 2 ;;\nesac\n",
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let cfg = config(&f, "naive", &format!("cmd:{}", script.display()));
    let rec = run(&cfg, &tmp.path().join("run"));
    assert_eq!(rec.checkpoints, vec!["ext-task1", "ext-task2", "ext-task3", "ext-task4", "ext-task5"]);
    assert!(rec.report(20).unwrap().tasks.iter().all(|t| t.avg_recall == 0.0));
    let failing = tmp.path().join("fail.sh");
    fs::write(&failing, "#!/bin/sh\necho boom >&2\nexit 3\n").unwrap();
    fs::set_permissions(&failing, fs::Permissions::from_mode(0o755)).unwrap();
    let cfg = config(&f, "naive", &format!("cmd:{}", failing.display()));
    let dir = tmp.path().join("fail");
    let ctx = RunContext::prepare(&cfg, 0, &dir).unwrap();
    let err = run_scenario(&cfg, &ctx, 0, &dir, RunOptions::default()).unwrap_err();
    assert_eq!(err.code(), "PredictorFailure");
    assert!(err.to_string().contains("boom"));
}
