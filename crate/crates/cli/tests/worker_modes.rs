mod common;

use std::fs;
use std::os::unix::process::ExitStatusExt;
use std::process::Command;

use common::*;
use heapscout::codec::encode;
use heapscout::model::ModelSpec;
use heapscout::sandbox::{WorkerClient, WorkerConfig};
use heapscout::target::TargetSource;

fn lines(path: &std::path::Path) -> Vec<String> {
    fs::read_to_string(path).unwrap_or_default().lines().map(str::to_string).collect()
}

/// The counting allocator logs every entry-point call of the worker
/// process; an execution must add exactly the trace's own calls.
#[test]
fn preloaded_worker_makes_no_hidden_heap_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("calls.log");
    let spec = ModelSpec::default();
    let target = TargetSource::Preload(so_path("counting"));
    let config = WorkerConfig::new(target, spec.clone());
    std::env::set_var("HEAPSCOUT_COUNT_LOG", &log);
    let mut client = WorkerClient::spawn(&exe(), &config).unwrap();

    // Worker start-up (loader, stdio) is allowed to allocate.
    client.run(&[], 1, false).unwrap();
    let before = lines(&log).len();
    client.run(&[], 1, false).unwrap();
    let empty = lines(&log).len();
    assert_eq!(empty, before, "empty trace made heap calls: {:?}", &lines(&log)[before..]);

    let trace = encode(&[alloc(40), alloc(100), free(0), write(0, 0, size(64)), free(1)], &spec).unwrap();
    let r = client.run(&trace, 1, false).unwrap();
    assert_eq!(r.outcome, heapscout::sandbox::Outcome::NoImpact, "{r:?}");
    let all = lines(&log);
    assert_eq!(all[empty..], ["malloc 40", "malloc 100", "free", "free"]);
}

#[test]
fn native_target_rejects_preload_path_that_is_not_loaded() {
    let config = WorkerConfig::new(TargetSource::Preload(so_path("page")), ModelSpec::default());
    let mut cmd = Command::new(exe());
    cmd.arg("worker").args(config.to_args()).env_remove("LD_PRELOAD");
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preload"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn one_shot_mode_reports_and_signals() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ModelSpec::default();
    let config = WorkerConfig {
        finding_signal: Some(libc_sigusr2()),
        ..WorkerConfig::new(bundled("unsafe-unlink").parse().unwrap(), spec.clone())
    };
    let input = tmp.path().join("input");
    let report = tmp.path().join("report.json");
    let one_shot = |bytes: &[u8]| {
        fs::write(&input, bytes).unwrap();
        Command::new(exe())
            .arg("worker")
            .args(config.to_args())
            .args(["--input", input.to_str().unwrap(), "--report", report.to_str().unwrap(), "--salt", "9"])
            .status()
            .unwrap()
    };

    let status = one_shot(&encode(&container_unlink_trace(), &spec).unwrap());
    assert_eq!(status.signal(), Some(libc_sigusr2()));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["impact"], "ArbitraryWrite");
    assert_eq!(json["salt"], 9);

    let status = one_shot(&[]);
    assert_eq!(status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["outcome"], "NoImpact");
}

fn libc_sigusr2() -> i32 {
    heapscout::sandbox::parse_signal("SIGUSR2").unwrap()
}
