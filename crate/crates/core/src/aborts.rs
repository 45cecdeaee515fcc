//! Catalog of ptmalloc security checks and abort-message classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Check {
    pub id: &'static str,
    pub message: &'static str,
}

const fn check(id: &'static str, message: &'static str) -> Check {
    Check { id, message }
}

/// The catalog. D4 is glibc's plain "corrupted unsorted chunks" message in
/// `malloc()`; D5 is the variant suffixed with ` 2`.
pub const CATALOG: [Check; 21] = [
    check("D1", "corrupted double-linked list"),
    check("D2", "corrupted double-linked list (not small)"),
    check("D3", "free(): corrupted unsorted chunks"),
    check("D4", "malloc(): corrupted unsorted chunks"),
    check("D5", "malloc(): corrupted unsorted chunks 2"),
    check("D6", "malloc(): smallbin double linked list corrupted"),
    check("S1", "free(): invalid next size (fast)"),
    check("S2", "free(): invalid next size (normal)"),
    check("S3", "free(): invalid size"),
    check("S4", "malloc(): memory corruption"),
    check("F1", "double free or corruption (!prev)"),
    check("F2", "double free or corruption (fasttop)"),
    check("F3", "double free or corruption (top)"),
    check("F4", "double free or corruption (out)"),
    check("U1", "malloc(): memory corruption (fast)"),
    check("U2", "malloc_consolidate(): invalid chunk size"),
    check("SP1", "break adjusted to free malloc space"),
    check("SP2", "corrupted size vs. prev_size"),
    check("SP3", "free(): invalid pointer"),
    check("SP4", "munmap_chunk(): invalid pointer"),
    check("SP5", "invalid fastbin entry (free)"),
];

/// Strips decorations glibc versions put around the check message.
pub fn normalize(message: &str) -> &str {
    let mut m = message.trim();
    for prefix in ["Fatal glibc error: ", "*** "] {
        m = m.strip_prefix(prefix).unwrap_or(m);
    }
    if let Some(rest) = m.strip_prefix("Error in `") {
        m = rest.split_once("': ").map_or(rest, |(_, msg)| msg);
    }
    if let Some((msg, _)) = m.split_once(": 0x") {
        m = msg;
    }
    m.trim_end_matches(" ***").trim()
}

/// Longest catalog message that prefixes the normalized abort message.
pub fn classify(message: &str) -> Option<&'static Check> {
    let m = normalize(message);
    CATALOG
        .iter()
        .filter(|c| m.starts_with(c.message))
        .max_by_key(|c| c.message.len())
}

/// Abort messages seen during a campaign, with counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbortTally {
    counts: BTreeMap<String, u64>,
}

impl AbortTally {
    pub fn record(&mut self, message: &str) {
        *self.counts.entry(normalize(message).to_string()).or_default() += 1;
    }

    pub fn merge(&mut self, other: &AbortTally) {
        for (m, n) in &other.counts {
            *self.counts.entry(m.clone()).or_default() += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `(count, check id, message)` rows, most frequent first.
    pub fn rows(&self) -> Vec<(u64, Option<&'static str>, &str)> {
        let mut rows: Vec<_> = self
            .counts
            .iter()
            .map(|(m, n)| (*n, classify(m).map(|c| c.id), m.as_str()))
            .collect();
        rows.sort_by(|a, b| b.0.cmp(&a.0).then(a.2.cmp(b.2)));
        rows
    }

    /// Distinct catalog ids observed, in catalog order.
    pub fn covered(&self) -> Vec<&'static str> {
        CATALOG
            .iter()
            .filter(|c| self.counts.keys().any(|m| classify(m).map(|x| x.id) == Some(c.id)))
            .map(|c| c.id)
            .collect()
    }

    /// `count<TAB>id<TAB>message` lines (`-` for unclassified messages).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (n, id, m) in self.rows() {
            let _ = writeln!(out, "{n}\t{}\t{m}", id.unwrap_or("-"));
        }
        out
    }

    pub fn parse(text: &str) -> AbortTally {
        let mut tally = AbortTally::default();
        for line in text.lines() {
            let mut parts = line.splitn(3, '\t');
            if let (Some(n), Some(_), Some(m)) = (parts.next(), parts.next(), parts.next()) {
                if let Ok(n) = n.parse::<u64>() {
                    *tally.counts.entry(m.to_string()).or_default() += n;
                }
            }
        }
        tally
    }
}

/// Coverage table: each catalog row with hit/miss.
pub fn coverage_table(tally: &AbortTally) -> String {
    let covered = tally.covered();
    let mut out = String::new();
    for c in &CATALOG {
        let mark = if covered.contains(&c.id) { "hit " } else { "miss" };
        let _ = writeln!(out, "{:<4}{mark}  {}", c.id, c.message);
    }
    let _ = writeln!(out, "covered {}/{}", covered.len(), CATALOG.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(m: &str) -> Option<&'static str> {
        classify(m).map(|c| c.id)
    }

    #[test]
    fn catalog_examples() {
        assert_eq!(id("free(): invalid pointer"), Some("SP3"));
        assert_eq!(id("double free or corruption (fasttop)"), Some("F2"));
        assert_eq!(id("utterly novel message"), None);
    }

    #[test]
    fn longest_prefix_wins() {
        assert_eq!(id("malloc(): memory corruption (fast)"), Some("U1"));
        assert_eq!(id("malloc(): memory corruption"), Some("S4"));
        assert_eq!(id("corrupted double-linked list (not small)"), Some("D2"));
        assert_eq!(id("malloc(): corrupted unsorted chunks 2"), Some("D5"));
        assert_eq!(id("malloc(): corrupted unsorted chunks"), Some("D4"));
        assert_eq!(id("corrupted size vs. prev_size while consolidating"), Some("SP2"));
    }

    #[test]
    fn decorations_are_stripped() {
        assert_eq!(id("*** Error in `./a.out': free(): invalid size: 0x0000000001c4e010 ***"), Some("S3"));
        assert_eq!(id("Fatal glibc error: malloc_consolidate(): invalid chunk size"), Some("U2"));
        assert_eq!(id("  munmap_chunk(): invalid pointer\n"), Some("SP4"));
    }

    #[test]
    fn tally_round_trip_and_coverage() {
        let mut t = AbortTally::default();
        t.record("free(): invalid pointer");
        t.record("free(): invalid pointer");
        t.record("something else");
        t.record("double free or corruption (top)");
        assert_eq!(t.total(), 4);
        assert_eq!(t.covered(), vec!["F3", "SP3"]);
        let text = t.to_text();
        assert!(text.starts_with("2\tSP3\tfree(): invalid pointer\n"));
        assert!(text.contains("1\t-\tsomething else\n"));
        assert_eq!(AbortTally::parse(&text), t);
        assert!(coverage_table(&t).ends_with("covered 2/21\n"));
        assert!(AbortTally::default().covered().is_empty());
    }
}
