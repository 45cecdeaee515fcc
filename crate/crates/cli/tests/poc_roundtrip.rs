mod common;

use common::*;
use heapscout::codec::{encode, Action, BugAction};
use heapscout::model::{ImpactClass, ModelSpec};
use heapscout::poc::{compile_and_run, emit, DEFAULT_CC};
use heapscout::report::ImpactReport;
use heapscout::sandbox::Outcome;
use heapscout::target::TargetSource;

fn report_for(target: &str, spec: &ModelSpec, actions: &[Action]) -> (ImpactReport, heapscout::engine::Execution) {
    let trace = encode(actions, spec).unwrap();
    let r = client(target, spec).run(&trace, 3, true).unwrap();
    assert_eq!(r.outcome, Outcome::Finding, "{r:?}");
    let exec = r.execution.unwrap();
    let primary = exec.verdict.primary.unwrap();
    let report =
        ImpactReport::new(primary, exec.verdict.events.clone(), exec.committed_bug, trace, 3, target.into(), spec.clone());
    (report, exec)
}

fn check(target: &str, spec: &ModelSpec, actions: &[Action]) -> String {
    let (report, exec) = report_for(target, spec, actions);
    let poc = emit(&report, &exec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let status = compile_and_run(&poc.source, &target.parse::<TargetSource>().unwrap(), DEFAULT_CC, dir.path()).unwrap();
    assert_eq!(status, 0, "{}", poc.source);
    if std::env::var_os("HS_SHOW_POC").is_some() {
        eprintln!("{}", poc.source);
    }
    poc.source
}

#[test]
fn container_unlink_poc_reproduces() {
    let src = check(&bundled("unsafe-unlink"), &ModelSpec::default(), &container_unlink_trace());
    assert!(src.contains("p[0] = malloc(136);"));
    assert!(src.contains("/* VULNERABILITY: overflow */"));
    assert!(src.contains("if (diverged() & IN_CONTAINER) return 0;"));
}

#[test]
fn double_free_overlap_poc_reproduces() {
    let spec = ModelSpec::parse("bugs = FF").unwrap();
    let actions = [
        alloc(32),
        free(0),
        Action::Bug(BugAction::DoubleFree { chunk: 0 }),
        alloc(32),
        alloc(32),
    ];
    let (report, _) = report_for(&bundled("unsafe-unlink"), &spec, &actions);
    assert_eq!(report.primary.class, ImpactClass::OverlappingChunk);
    let src = check(&bundled("unsafe-unlink"), &spec, &actions);
    assert!(src.contains("/* VULNERABILITY: double free */"));
    assert!(src.contains("hits_live("));
}

#[test]
fn stale_reports_are_refused() {
    let spec = ModelSpec::default();
    let (mut report, exec) = report_for(&bundled("unsafe-unlink"), &spec, &container_unlink_trace());
    report.primary.class = ImpactClass::ArbitraryChunk;
    assert!(matches!(emit(&report, &exec), Err(heapscout::error::PocError::Stale(_))));
}
