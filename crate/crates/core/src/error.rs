use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::ActionKind;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("line {0}: expected `key = value`, got {1:?}")]
    Syntax(usize, String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("invalid {0} value `{1}`")]
    UnknownValue(&'static str, String),
    #[error("model spec enables no actions")]
    NoActions,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("action {index} ({kind}) is not representable under the model spec")]
    Unrepresentable { index: usize, kind: ActionKind },
}

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("invalid target `{0}` (expected native, so:PATH, bundled:NAME or preload:PATH)")]
    BadSpec(String),
    #[error("unknown bundled allocator `{0}`")]
    UnknownBundled(String),
    #[error("cannot load {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: libloading::Error,
    },
    #[error("{path} does not export `{symbol}`")]
    MissingSymbol { path: PathBuf, symbol: &'static str },
    #[error("{0} is not preloaded into this process")]
    NotPreloaded(PathBuf),
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("worker i/o: {0}")]
    Io(#[from] io::Error),
    #[error("worker protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report line {0}: {1}")]
    Malformed(usize, String),
    #[error("report is missing field `{0}`")]
    MissingField(&'static str),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Error)]
pub enum MinimizeError {
    #[error("finding is flaky: original trace gave {observed} instead of {expected}")]
    Flaky { expected: String, observed: String },
    #[error("minimized trace no longer reproduces ({0})")]
    Lost(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
}

#[derive(Debug, Error)]
pub enum PocError {
    #[error("stale finding: replay gave {0}")]
    Stale(String),
    #[error("replay carries no action log")]
    MissingLog,
    #[error("compiler invocation failed: {0}")]
    Compile(String),
    #[error("poc i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("campaign finished without a single execution")]
    NoExecutions,
    #[error("campaign i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error(transparent)]
    Minimize(#[from] MinimizeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Poc(#[from] PocError),
}
