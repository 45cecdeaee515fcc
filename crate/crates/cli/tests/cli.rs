mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use heapscout::codec::encode;
use heapscout::model::ModelSpec;
use heapscout::report::ImpactReport;

fn heapscout(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn campaign(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["fuzz", "--target", "bundled:unsafe-unlink", "--workers", "1", "--seed", "7"];
    args.extend(["--out", out.to_str().unwrap()]);
    args.extend(extra);
    stdout(&heapscout(&args))
}

fn finding_dirs(out: &Path) -> Vec<std::path::PathBuf> {
    let mut dirs: Vec<_> = fs::read_dir(out.join("findings")).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn campaign_layout_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = campaign(tmp.path(), &["--execs", "3000"]);
    let n = |k| field(&summary, k).unwrap().parse::<u64>().unwrap();
    assert_eq!(n("executions"), n("findings") + n("no_impact") + n("crashes") + n("timeouts"));
    assert!(tmp.path().join("aborts.txt").is_file());
    assert!(tmp.path().join("summary.txt").is_file());
    let dirs = finding_dirs(tmp.path());
    assert!(!dirs.is_empty());
    for dir in &dirs {
        for file in ["report.txt", "trace.bin", "min_trace.bin", "poc.c"] {
            assert!(dir.join(file).is_file(), "{} lacks {file}", dir.display());
        }
        let report = ImpactReport::parse(&fs::read_to_string(dir.join("report.txt")).unwrap()).unwrap();
        assert_eq!(dir.file_name().unwrap().to_str().unwrap(), report.dedup_key());
        for extra in [&[][..], &["--minimized"][..]] {
            let mut args = vec!["replay", dir.to_str().unwrap()];
            args.extend(extra);
            let out = stdout(&heapscout(&args));
            assert_eq!(field(&out, "outcome"), Some("finding"), "{}", dir.display());
            assert_eq!(field(&out, "impact"), Some(report.primary.class.to_string().as_str()));
        }
    }
}

#[test]
fn identical_seeds_give_identical_campaigns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let counters = |s: String| s.lines().filter(|l| !l.starts_with("elapsed") && !l.starts_with("execs_per") && !l.starts_with("finding ")).collect::<Vec<_>>().join("\n");
    let sa = counters(campaign(a.path(), &["--execs", "1500"]));
    let sb = counters(campaign(b.path(), &["--execs", "1500"]));
    assert_eq!(sa, sb);
    let names = |p: &Path| finding_dirs(p).iter().map(|d| d.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    assert_eq!(names(a.path()), names(b.path()));
    for (x, y) in finding_dirs(a.path()).iter().zip(finding_dirs(b.path())) {
        assert_eq!(fs::read(x.join("trace.bin")).unwrap(), fs::read(y.join("trace.bin")).unwrap());
        assert_eq!(fs::read(x.join("poc.c")).unwrap(), fs::read(y.join("poc.c")).unwrap());
    }
}

#[test]
fn keep_duplicates_and_input_dir() {
    let tmp = tempfile::tempdir().unwrap();
    campaign(tmp.path(), &["--execs", "1500", "--keep-duplicates"]);
    let dirs = finding_dirs(tmp.path());
    let dups: Vec<_> = dirs.iter().filter(|d| d.to_str().unwrap().contains('~')).collect();
    assert!(!dups.is_empty());
    for d in &dups {
        let key = d.file_name().unwrap().to_str().unwrap().split('~').next().unwrap().to_string();
        assert!(dirs.iter().any(|x| x.file_name().unwrap().to_str() == Some(key.as_str())));
    }

    let inputs = tmp.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    for (i, d) in dirs.iter().take(5).enumerate() {
        fs::copy(d.join("trace.bin"), inputs.join(format!("{i:02}"))).unwrap();
    }
    fs::write(inputs.join("empty"), b"").unwrap();
    let out = tmp.path().join("external");
    let summary = stdout(&heapscout(&[
        "fuzz",
        "--target",
        "bundled:unsafe-unlink",
        "--workers",
        "1",
        "--input-dir",
        inputs.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let n = |k| field(&summary, k).unwrap().parse::<u64>().unwrap();
    assert_eq!(n("executions") - n("salvage_runs"), dirs.len().min(5) as u64 + 1);
}

#[test]
fn minimize_emit_and_differential_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec");
    fs::write(&spec, "bugs = OF\n").unwrap();
    let trace = encode(&container_unlink_trace(), &ModelSpec::parse("bugs = OF").unwrap()).unwrap();
    let raw = tmp.path().join("trace.bin");
    fs::write(&raw, &trace).unwrap();
    let out = stdout(&heapscout(&[
        "replay",
        raw.to_str().unwrap(),
        "--target",
        "bundled:checked",
        "--spec",
        spec.to_str().unwrap(),
    ]));
    assert_eq!(field(&out, "outcome"), Some("finding"));

    let out = stdout(&heapscout(&["replay", raw.to_str().unwrap(), "--target", "bundled:page", "--spec", spec.to_str().unwrap()]));
    assert_eq!(field(&out, "outcome"), Some("crash"), "{out}");

    let cdir = tmp.path().join("c");
    campaign(&cdir, &["--execs", "2000"]);
    let dir = &finding_dirs(&cdir)[0];
    let mdir = tmp.path().join("min");
    let out = stdout(&heapscout(&["minimize", dir.to_str().unwrap(), "--out", mdir.to_str().unwrap()]));
    assert!(out.contains("actions "), "{out}");
    let original = ImpactReport::parse(&fs::read_to_string(dir.join("report.txt")).unwrap()).unwrap();
    let min = ImpactReport::parse(&fs::read_to_string(mdir.join("min_report.txt")).unwrap()).unwrap();
    assert_eq!(min.key(), original.key());
    assert_eq!(min.trace, fs::read(mdir.join("min_trace.bin")).unwrap());

    let pdir = tmp.path().join("poc");
    let out = stdout(&heapscout(&["emit-poc", dir.to_str().unwrap(), "--out", pdir.to_str().unwrap(), "--check"]));
    assert!(out.contains("poc exit status 0"), "{out}");
    let written: Vec<_> = fs::read_dir(&pdir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(written.len(), 1);
    let name = &written[0];
    assert!(name.starts_with(&format!("unsafe-unlink_{}_", original.primary.class)), "{name}");
    assert!(name.ends_with(".c"));

    let bad = heapscout(&["emit-poc", dir.to_str().unwrap(), "--out", pdir.to_str().unwrap(), "--check", "--cc", "false"]);
    assert!(!bad.status.success());
}

#[test]
fn coverage_and_selftest() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("aborts.txt"), "3\tSP3\tfree(): invalid pointer\n1\t-\tsomething new\n").unwrap();
    let out = stdout(&heapscout(&["coverage", tmp.path().to_str().unwrap()]));
    assert!(out.contains("covered 1/21"), "{out}");
    assert!(out.contains("unclassified 1\tsomething new"));
    let out = stdout(&heapscout(&["selftest"]));
    assert_eq!(out.matches("PASS").count(), 3, "{out}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = heapscout(&["fuzz", "--target", "bundled:nonesuch", "--execs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = heapscout(&["fuzz", "--target", "native"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--budget"));
}
