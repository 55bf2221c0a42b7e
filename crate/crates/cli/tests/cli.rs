mod common;

use std::path::{Path, PathBuf};
use std::process::{Output, Stdio};
use std::time::Duration;

use common::*;
use serde_json::Value;
use verifarm::fabric::Fabric;
use verifarm::model::ClientId;
use verifarm::queue::QueueConfig;
use verifarm::sim::{presets, SimConfig};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn demo_manifest() -> PathBuf {
    workspace().join("demo/toy/manifest.json")
}

fn run(args: &[&str]) -> Output {
    verifarm().args(args).stdin(Stdio::null()).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["monitor", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cloud_submit_without_fabric_is_a_usage_error() {
    let manifest = demo_manifest();
    let out = run(&["submit", "--manifest", manifest.to_str().unwrap(), "--backend", "cloud"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("VERIFARM_FABRIC"));
}

#[test]
fn unreachable_fabric_is_a_runtime_error() {
    let out = run(&["monitor", "--fabric", "http://127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn demo_suite_locally_reports_the_defect() {
    let manifest = demo_manifest();
    let out = run(&["submit", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("DoubleFree"), "{text}");
    assert!(text.contains("total: Defect 1, Pass 4"), "{text}");

    let out = run(&["--json", "submit", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    assert_eq!(report["backend"], "local");
    assert_eq!(report["counts"]["Defect"], 1);
    assert_eq!(report["counts"]["Pass"], 4);
    assert_eq!(report["tasks"].as_array().unwrap().len(), 5);
}

#[test]
fn clean_suite_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let demo = workspace().join("demo/toy");
    let mut manifest: Value = serde_json::from_slice(&std::fs::read(demo.join("manifest.json")).unwrap()).unwrap();
    manifest["rules"] = serde_json::json!(["LockRelease", "NullDeref"]);
    manifest["modules"][0]["source_dir"] = Value::String(demo.join("src").display().to_string());
    manifest["local"]["tool_dir"] = Value::String(demo.join("tool").display().to_string());
    let path = dir.path().join("clean.json");
    std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();

    let out = run(&["--json", "submit", "--manifest", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["counts"]["Pass"], 2);
}

#[test]
fn versions_upload_and_list() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = FabricProc::spawn(&dir.path().join("fabric"), &[]);
    let archive = dir.path().join("tool.zip");
    std::fs::write(&archive, tool_zip(TOY_TOOL)).unwrap();

    let out = run(&["--json", "versions", "upload", "--id", "v7", "--archive", archive.to_str().unwrap(), "--fabric", &fabric.url]);
    assert_eq!(out.status.code(), Some(0));
    let package = stdout_json(&out);
    assert_eq!(package["id"], "v7");

    let out = run(&["--json", "versions", "list", "--fabric", &fabric.url]);
    let list = stdout_json(&out);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["archive"]["content_hash"], package["archive"]["content_hash"]);

    let out = run(&["versions", "list", "--fabric", &fabric.url]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("VERSION"), "{text}");
    assert!(text.contains("v7"), "{text}");
}

#[test]
fn demo_suite_on_the_cloud_backend() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = FabricProc::spawn(&dir.path().join("fabric"), &[]);
    let script = std::fs::read_to_string(workspace().join("demo/toy/tool/run-analysis")).unwrap();
    let archive = dir.path().join("toy-1.zip");
    std::fs::write(&archive, tool_zip(&script)).unwrap();
    let out = run(&["versions", "upload", "--id", "toy-1", "--archive", archive.to_str().unwrap(), "--fabric", &fabric.url]);
    assert_eq!(out.status.code(), Some(0));
    let _workers: Vec<WorkerProc> = (0..2)
        .map(|i| WorkerProc::spawn(&fabric.url, &format!("w{i}"), &dir.path().join(format!("w{i}")), 0.1))
        .collect();

    let manifest = demo_manifest();
    let out = verifarm()
        .args(["--json", "submit", "--backend", "cloud", "--poll-interval", "0.2", "--deadline", "60"])
        .arg("--manifest")
        .arg(&manifest)
        .env("VERIFARM_FABRIC", &fabric.url)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    assert_eq!(report["backend"], "cloud");
    assert_eq!(report["counts"]["Defect"], 1);
    assert_eq!(report["counts"]["Pass"], 4);

    // The orchestrator closes its topic once it has every result.
    let client = report["client"].as_str().unwrap();
    let out = run(&["--json", "results", "--client", client, "--fabric", &fabric.url]);
    assert_eq!(stdout_json(&out)["records"], serde_json::json!([]));
}

#[test]
fn results_lists_each_task_once() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = LocalFabric::start(&dir.path().join("fabric"), QueueConfig::default());
    fabric.upload_tool("v1", TOY_TOOL);
    let client = ClientId::new();
    let tasks: Vec<_> = ["R1", "R2", "R3"].iter().map(|r| task(client, r, "v1", "{tool_dir}/run-analysis", 30)).collect();
    enqueue_all(fabric.service.as_ref(), &tasks);
    let _worker = WorkerProc::spawn(&fabric.url(), "w", &dir.path().join("w"), 0.05);
    wait_for(Duration::from_secs(20), || fabric.service.snapshot().unwrap().is_empty().then_some(()))
        .expect("queue never drained");

    let out = run(&["--json", "results", "--client", &client.to_string(), "--fabric", &fabric.url()]);
    let results = stdout_json(&out);
    let records = results["records"].as_array().unwrap();
    assert_eq!(records.len(), 3, "{results}");
    assert_eq!(results["duplicates"], 0);
    let defects = records.iter().filter(|r| r["outcome"]["kind"] == "Defect").count();
    assert_eq!(defects, 1);

    let out = run(&["results", "--client", &client.to_string(), "--fabric", &fabric.url()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("TASK"), "{text}");
    assert!(text.contains("3 results, 0 duplicates"), "{text}");
}

#[test]
fn results_for_an_unknown_client_are_empty() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = FabricProc::spawn(&dir.path().join("fabric"), &[]);
    let client = ClientId::new().to_string();
    let out = run(&["results", "--client", &client, "--fabric", &fabric.url]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 results, 0 duplicates"));
}

#[test]
fn monitor_shows_launched_workers() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = FabricProc::spawn(&dir.path().join("fabric"), &["--launcher", "process"]);
    let seen = wait_for(Duration::from_secs(20), || {
        let out = run(&["--json", "monitor", "--fabric", &fabric.url]);
        let snap = stdout_json(&out);
        (snap["active_workers"] == 2).then_some(snap)
    });
    let snap = seen.expect("two workers never became active");
    assert_eq!(snap["workers"].as_array().unwrap().len(), 2);

    let out = run(&["monitor", "--fabric", &fabric.url]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("deployment local  active workers 2  queued tasks 0"), "{text}");
}

#[test]
fn fabric_exits_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let mut fabric = FabricProc::spawn(&dir.path().join("fabric"), &["--launcher", "process"]);
    wait_for(Duration::from_secs(20), || {
        let snap = stdout_json(&run(&["--json", "monitor", "--fabric", &fabric.url]));
        (snap["active_workers"] == 2).then_some(())
    })
    .expect("workers never started");
    // SAFETY: signal delivery to our own child.
    unsafe {
        libc::kill(fabric.child.id() as i32, libc::SIGTERM);
    }
    let status = wait_for(Duration::from_secs(15), || fabric.child.try_wait().unwrap());
    assert_eq!(status.expect("fabric did not exit").code(), Some(0));
}

#[test]
fn worker_finishes_its_task_before_stopping() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = LocalFabric::start(&dir.path().join("fabric"), QueueConfig::default());
    fabric.upload_tool("v1", TOY_TOOL);
    let client = ClientId::new();
    let t = task(client, "Slow", "v1", "sleep 1; echo started > /dev/null", 30);
    enqueue_all(fabric.service.as_ref(), &[t]);

    let mut worker = WorkerProc::spawn(&fabric.url(), "w", &dir.path().join("w"), 0.05);
    wait_for(Duration::from_secs(10), || {
        fabric.service.monitor().unwrap().workers.iter().any(|w| w.current_task.is_some()).then_some(())
    })
    .expect("task never started");
    worker.signal(libc::SIGTERM);
    let exited = wait_for(Duration::from_secs(10), || worker.exited().then_some(()));
    assert!(exited.is_some(), "worker did not stop");

    let (records, _) = fabric.service.poll(&client.to_string(), 0).unwrap();
    assert_eq!(records.len(), 1);
    assert!(fabric.service.monitor().unwrap().queue.is_empty());
}

#[test]
fn simulate_preset_writes_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("table.json");
    let csv_path = dir.path().join("table.csv");
    let out = run(&[
        "simulate",
        "--preset",
        "fail_driver1",
        "--caps",
        "20,100",
        "--out",
        out_path.to_str().unwrap(),
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("192 checks"), "{text}");

    let table: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("Checks,Local,Cloud20,Cloud100\n"), "{csv}");
}

#[test]
fn simulate_csv_requires_caps() {
    let out = run(&["simulate", "--preset", "bugbash", "--csv", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_from_config_file_is_deterministic() {
    let config = workspace().join("configs/sim-queue-wait.json");
    let a = stdout_json(&run(&["--json", "simulate", "--config", config.to_str().unwrap()]));
    let b = stdout_json(&run(&["--json", "simulate", "--config", config.to_str().unwrap()]));
    assert_eq!(a["trace_hash"], b["trace_hash"]);
    assert_eq!(a["completed"], 3858);
    let c = stdout_json(&run(&["--json", "simulate", "--config", config.to_str().unwrap(), "--seed", "7"]));
    assert_ne!(a["trace_hash"], c["trace_hash"]);
}

#[test]
fn invalid_sim_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = presets::bugbash();
    config.policy.min_instances = 0;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_vec(&config).unwrap()).unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_match_presets() {
    for name in presets::NAMES {
        let path = workspace().join(format!("configs/sim-{}.json", name.replace('_', "-")));
        let shipped: SimConfig = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(shipped, presets::by_name(name).unwrap(), "{}", path.display());
    }
    let fabric: verifarm::fabric::FabricConfig =
        serde_json::from_slice(&std::fs::read(workspace().join("configs/fabric.json")).unwrap()).unwrap();
    fabric.autoscale.validate().unwrap();
}
