//! Finding records: one `key=value` per line.
//!
//! ```text
//! impact=AW
//! site=container
//! action_index=7
//! action=heap_write
//! bug=OF
//! trace_hex=00021f...
//! salt=42
//! target=bundled:unsafe-unlink
//! codec_version=hs-codec-1
//! model=actions=allocate,...;bugs=OF;...
//! events=RW@5:container:deallocate:-,AW@7:container:heap_write:-
//! ```
//!
//! `site` is `-` for OC findings. `bug` is the bug committed by the run
//! (`-` if none). Unknown keys are ignored when parsing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::codec::CODEC_VERSION;
use crate::detector::{ImpactEvent, ImpactKey};
use crate::error::ReportError;
use crate::model::{ActionKind, BugKind, ImpactClass, ModelSpec, Site};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpactReport {
    pub primary: ImpactEvent,
    pub events: Vec<ImpactEvent>,
    pub bug: Option<BugKind>,
    pub trace: Vec<u8>,
    pub salt: u64,
    pub target: String,
    pub codec_version: String,
    pub model: ModelSpec,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn parse_opt<T: FromStr>(s: &str) -> Result<Option<T>, ()> {
    match s {
        "-" => Ok(None),
        s => s.parse().map(Some).map_err(|_| ()),
    }
}

fn format_event(e: &ImpactEvent) -> String {
    format!("{}@{}:{}:{}:{}", e.class, e.action_index, opt(e.site), e.action, opt(e.bug))
}

fn parse_event(s: &str) -> Option<ImpactEvent> {
    let (class, rest) = s.split_once('@')?;
    let mut parts = rest.split(':');
    let event = ImpactEvent {
        class: class.parse().ok()?,
        action_index: parts.next()?.parse().ok()?,
        site: parse_opt(parts.next()?).ok()?,
        action: parts.next()?.parse().ok()?,
        bug: parse_opt(parts.next()?).ok()?,
    };
    parts.next().is_none().then_some(event)
}

impl ImpactReport {
    pub fn new(
        primary: ImpactEvent,
        events: Vec<ImpactEvent>,
        bug: Option<BugKind>,
        trace: Vec<u8>,
        salt: u64,
        target: String,
        model: ModelSpec,
    ) -> Self {
        ImpactReport { primary, events, bug, trace, salt, target, codec_version: CODEC_VERSION.to_string(), model }
    }

    pub fn key(&self) -> ImpactKey {
        self.primary.key()
    }

    /// Directory name for deduplication: impact, site, bug, triggering action.
    pub fn dedup_key(&self) -> String {
        format!(
            "{}-{}-{}-{}",
            self.primary.class,
            opt(self.primary.site),
            opt(self.bug),
            self.primary.action
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.primary;
        let events: Vec<String> = self.events.iter().map(format_event).collect();
        let _ = writeln!(out, "impact={}", p.class);
        let _ = writeln!(out, "site={}", opt(p.site));
        let _ = writeln!(out, "action_index={}", p.action_index);
        let _ = writeln!(out, "action={}", p.action);
        let _ = writeln!(out, "bug={}", opt(self.bug));
        let _ = writeln!(out, "trace_hex={}", hex::encode(&self.trace));
        let _ = writeln!(out, "salt={}", self.salt);
        let _ = writeln!(out, "target={}", self.target);
        let _ = writeln!(out, "codec_version={}", self.codec_version);
        let _ = writeln!(out, "model={}", self.model.to_compact());
        let _ = writeln!(out, "events={}", events.join(","));
        out
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut fields = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ReportError::Malformed(n + 1, line.to_string()))?;
            fields.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
        }
        let get = |key: &'static str| fields.get(key).ok_or(ReportError::MissingField(key));
        let bad = |(n, v): &(usize, String)| ReportError::Malformed(*n, v.clone());
        let field = |key: &'static str| get(key).map(|(_, v)| v.as_str());

        let class: ImpactClass = get("impact").and_then(|f| f.1.parse().map_err(|_| bad(f)))?;
        let site: Option<Site> = get("site").and_then(|f| parse_opt(&f.1).map_err(|_| bad(f)))?;
        let action_index: usize = get("action_index").and_then(|f| f.1.parse().map_err(|_| bad(f)))?;
        let bug: Option<BugKind> = get("bug").and_then(|f| parse_opt(&f.1).map_err(|_| bad(f)))?;
        let trace = get("trace_hex").and_then(|f| hex::decode(&f.1).map_err(|_| bad(f)))?;
        let salt: u64 = get("salt").and_then(|f| crate::model::parse_u64(&f.1).ok_or_else(|| bad(f)))?;
        let target = field("target")?.to_string();
        let codec_version = field("codec_version")?.to_string();
        let model = match fields.get("model") {
            Some((_, m)) => ModelSpec::from_compact(m)?,
            None => ModelSpec::default(),
        };
        let action: ActionKind = match fields.get("action") {
            Some(f) => f.1.parse().map_err(|_| bad(f))?,
            None => ActionKind::BugInvoke,
        };
        let events = match fields.get("events") {
            Some(f) if !f.1.is_empty() => f.1.split(',').map(|e| parse_event(e).ok_or_else(|| bad(f))).collect::<Result<Vec<_>, _>>()?,
            _ => Vec::new(),
        };
        let primary = events
            .iter()
            .find(|e| e.class == class && e.action_index == action_index)
            .copied()
            .unwrap_or(ImpactEvent { class, site, action_index, action, bug: None });
        Ok(ImpactReport { primary: ImpactEvent { site, ..primary }, events, bug, trace, salt, target, codec_version, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImpactReport {
        let rw = ImpactEvent {
            class: ImpactClass::RestrictedWrite,
            site: Some(Site::Container),
            action_index: 5,
            action: ActionKind::Deallocate,
            bug: None,
        };
        let ac = ImpactEvent {
            class: ImpactClass::ArbitraryChunk,
            site: Some(Site::Buffer),
            action_index: 9,
            action: ActionKind::Allocate,
            bug: None,
        };
        ImpactReport::new(
            ac,
            vec![rw, ac],
            Some(BugKind::DoubleFree),
            vec![0, 1, 0xff],
            42,
            "bundled:checked".into(),
            ModelSpec::parse("bugs = FF\nsizes = 24").unwrap(),
        )
    }

    #[test]
    fn round_trip() {
        let r = sample();
        let text = r.to_text();
        assert!(text.contains("impact=AC\nsite=buffer\naction_index=9\n"));
        assert!(text.contains("trace_hex=0001ff\n"));
        assert_eq!(ImpactReport::parse(&text).unwrap(), r);
    }

    #[test]
    fn dedup_key_names() {
        assert_eq!(sample().dedup_key(), "AC-buffer-FF-allocate");
    }

    #[test]
    fn minimal_report_parses() {
        let text = "impact=OC\nsite=-\naction_index=3\nbug=-\ntrace_hex=00\nsalt=0x10\ntarget=native\ncodec_version=hs-codec-1\n";
        let r = ImpactReport::parse(text).unwrap();
        assert_eq!(r.key(), (ImpactClass::OverlappingChunk, None));
        assert_eq!(r.salt, 16);
        assert_eq!(r.model, ModelSpec::default());
    }

    #[test]
    fn missing_and_malformed_fields() {
        assert!(matches!(ImpactReport::parse("impact=AW"), Err(ReportError::MissingField("site"))));
        assert!(matches!(ImpactReport::parse("impact=ZZ\n"), Err(ReportError::Malformed(1, _))));
        assert!(matches!(ImpactReport::parse("nonsense\n"), Err(ReportError::Malformed(1, _))));
    }
}
