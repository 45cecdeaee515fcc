//! Single-action delta debugging.

use crate::codec::{encode, Action};
use crate::detector::ImpactKey;
use crate::error::MinimizeError;
use crate::model::{ModelSpec, Site};
use crate::sandbox::{Outcome, WorkerClient};

pub const MAX_PASSES: usize = 8;

/// What one re-execution showed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observation {
    Impact(ImpactKey),
    NoImpact,
    Crash(String),
    Timeout,
}

impl Observation {
    pub fn describe(&self) -> String {
        match self {
            Observation::Impact((class, site)) => format!("{class}/{}", site.map_or("-", Site::name)),
            Observation::NoImpact => "no impact".into(),
            Observation::Crash(m) => format!("crash ({m})"),
            Observation::Timeout => "timeout".into(),
        }
    }
}

/// Re-executes a candidate action list in a fresh process.
pub trait ImpactOracle {
    fn get_impact(&mut self, actions: &[Action]) -> Result<Observation, MinimizeError>;
}

/// Oracle backed by a worker; each call forks a fresh child.
pub struct WorkerOracle<'a> {
    pub client: &'a mut WorkerClient,
    pub spec: &'a ModelSpec,
    pub salt: u64,
}

impl ImpactOracle for WorkerOracle<'_> {
    fn get_impact(&mut self, actions: &[Action]) -> Result<Observation, MinimizeError> {
        let bytes = encode(actions, self.spec)?;
        let r = self.client.run(&bytes, self.salt, false)?;
        let primary = r.primary();
        Ok(match (r.outcome, primary) {
            (Outcome::Finding, Some(p)) => Observation::Impact(p.key()),
            (Outcome::Crash { message }, _) => Observation::Crash(message),
            (Outcome::Timeout, _) => Observation::Timeout,
            _ => Observation::NoImpact,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minimized {
    pub actions: Vec<Action>,
    /// Indices into the original action list, strictly increasing.
    pub kept: Vec<usize>,
    pub passes: usize,
    pub evaluations: usize,
}

/// Removes single actions while the primary `(class, site)` stays equal to
/// `reference`, repeating passes until nothing changes (at most
/// [`MAX_PASSES`]).
pub fn minimize(
    original: &[Action],
    reference: ImpactKey,
    oracle: &mut impl ImpactOracle,
) -> Result<Minimized, MinimizeError> {
    let want = Observation::Impact(reference);
    let observed = oracle.get_impact(original)?;
    let mut evaluations = 1;
    if observed != want {
        return Err(MinimizeError::Flaky { expected: want.describe(), observed: observed.describe() });
    }
    let mut kept: Vec<usize> = (0..original.len()).collect();
    let mut passes = 0;
    while passes < MAX_PASSES {
        passes += 1;
        let mut changed = false;
        let mut i = 0;
        while i < kept.len() {
            let candidate: Vec<Action> =
                kept.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, k)| original[*k]).collect();
            evaluations += 1;
            if oracle.get_impact(&candidate)? == want {
                kept.remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            break;
        }
    }
    let actions: Vec<Action> = kept.iter().map(|k| original[*k]).collect();
    evaluations += 1;
    let last = oracle.get_impact(&actions)?;
    if last != want {
        return Err(MinimizeError::Lost(last.describe()));
    }
    Ok(Minimized { actions, kept, passes, evaluations })
}
