mod common;

use std::fs;
use std::path::Path;

use axum::http::StatusCode;
use common::{quick, settings, App};
use latentsteer_service::Manager;

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            // A file can vanish between listing and copying (temp files).
            let _ = fs::copy(entry.path(), &target);
        }
    }
}

fn frames(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(root.join("frames"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".png"))
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn loss_iterations(root: &Path) -> Vec<u64> {
    fs::read_to_string(root.join("events.jsonl"))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|r| r["event"]["type"] == "loss")
        .map(|r| r["event"]["data"]["iteration"].as_u64().unwrap())
        .collect()
}

/// Copying a live job directory captures exactly what a killed process
/// leaves behind.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn killed_job_recovers_from_checkpoint_and_matches_uninterrupted_run() {
    let app = App::new().await;
    let id = app.create(quick("red", 80, 10)).await;
    app.wait_for(&id, |v| v["iteration"].as_u64().unwrap_or(0) >= 30).await;
    let crashed = tempfile::tempdir().unwrap();
    let src = app.path().join("jobs").join(&id);
    let dst = crashed.path().join("jobs").join(&id);
    copy_tree(&src, &dst);
    app.wait_phase(&id, "completed").await;
    let reference_final = fs::read(src.join("final.png")).unwrap();
    let reference_frames = frames(&src);
    app.close().await;

    let before = frames(&dst);
    assert!(dst.join("checkpoint.bin").exists());
    let manager = Manager::open(settings(crashed.path())).await.unwrap();
    let recovered = App::with(crashed, manager);
    recovered.wait_phase(&id, "completed").await;
    assert_eq!(fs::read(dst.join("final.png")).unwrap(), reference_final);
    let after = frames(&dst);
    assert_eq!(after, reference_frames);
    for (name, bytes) in &before {
        assert_eq!(
            after.iter().find(|(n, _)| n == name).map(|(_, b)| b),
            Some(bytes),
            "{name} rewritten"
        );
    }
    assert_eq!(loss_iterations(&dst), (1..=80).collect::<Vec<_>>());
    recovered.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_rebuilds_identical_job_list() {
    let app = App::new().await;
    let done = app.create(quick("red", 5, 5)).await;
    let cancelled = app.create(common::endless("blue")).await;
    app.wait_phase(&done, "completed").await;
    app.control(&cancelled, "cancel").await;
    let listed = app.manager.list();
    let app = app.restart().await;
    assert_eq!(app.manager.list(), listed);
    app.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn paused_job_comes_back_paused_at_its_checkpoint() {
    let app = App::new().await;
    let id = app.create(common::endless("green")).await;
    app.wait_for(&id, |v| v["iteration"].as_u64().unwrap_or(0) > 3).await;
    app.control(&id, "pause").await;
    let at = app.job(&id).await["iteration"].as_u64().unwrap();
    let app = app.restart().await;
    let v = app.job(&id).await;
    assert_eq!(v["phase"], "paused");
    assert_eq!(v["iteration"].as_u64().unwrap(), at);
    assert_eq!(app.control(&id, "resume").await.0, StatusCode::OK);
    app.wait_for(&id, |v| v["iteration"].as_u64().unwrap_or(0) > at).await;
    app.control(&id, "cancel").await;
    app.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn graceful_shutdown_checkpoints_running_jobs() {
    let app = App::new().await;
    let id = app.create(common::endless("red")).await;
    app.wait_for(&id, |v| v["iteration"].as_u64().unwrap_or(0) > 3).await;
    app.manager.shutdown().await;
    let root = app.path().join("jobs").join(&id);
    let ck = latentsteer_core::pipeline::Checkpoint::load(&root.join("checkpoint.bin")).unwrap();
    let last_loss = *loss_iterations(&root).last().unwrap();
    assert_eq!(ck.iteration, last_loss);
    let mut app = app;
    let dir = app.take_dir();
    drop(app);
    let manager = Manager::open(settings(dir.path())).await.unwrap();
    let app = App::with(dir, manager);
    app.wait_for(&id, |v| {
        v["phase"] == "running" && v["iteration"].as_u64().unwrap_or(0) > last_loss
    })
    .await;
    app.control(&id, "cancel").await;
    app.close().await;
}
