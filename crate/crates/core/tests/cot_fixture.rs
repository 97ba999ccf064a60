//! The labelled CoT fixture: every violation class is detected with precision
//! and recall of 1.

use groundrl::response_format::{classify_line, filter_corpus, FilterSettings, LineOutcome, Violation};
use std::collections::BTreeMap;

const FIXTURE: &str = include_str!("fixtures/cot_fixture.jsonl");
const EXPECTED: &str = include_str!("fixtures/cot_fixture_expected.json");

fn expected() -> BTreeMap<usize, Vec<Violation>> {
    let raw: BTreeMap<String, Vec<Violation>> = serde_json::from_str(EXPECTED).unwrap();
    raw.into_iter().map(|(k, mut v)| {
        v.sort();
        (k.parse().unwrap(), v)
    }).collect()
}

fn predicted() -> BTreeMap<usize, Vec<Violation>> {
    let settings = FilterSettings::default();
    FIXTURE
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let v = match classify_line(line, &settings) {
                LineOutcome::Accepted(_) => Vec::new(),
                LineOutcome::Rejected { verdict, .. } => verdict.violations,
            };
            (i + 1, v)
        })
        .collect()
}

#[test]
fn every_class_has_perfect_precision_and_recall() {
    let (want, got) = (expected(), predicted());
    assert_eq!(want.len(), 20);
    assert_eq!(got.len(), 20);
    for class in Violation::ALL {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (line, truth) in &want {
            let (t, p) = (truth.contains(&class), got[line].contains(&class));
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        assert!(tp > 0, "{class:?} never occurs in the fixture");
        assert_eq!((fp, fn_), (0, 0), "{class:?}: tp {tp} fp {fp} fn {fn_}");
    }
    assert_eq!(want, got);
}

#[test]
fn streaming_filter_agrees_with_line_classification() {
    let (mut acc, mut rej, mut ver) = (Vec::new(), Vec::new(), Vec::new());
    let summary = filter_corpus(FIXTURE.as_bytes(), &FilterSettings::default(), &mut acc, &mut rej, &mut ver).unwrap();
    let want = expected();
    let clean = want.values().filter(|v| v.is_empty()).count();
    assert_eq!(summary.total, 20);
    assert_eq!(summary.accepted, clean);
    assert_eq!(summary.rejected, 20 - clean);
    assert_eq!(String::from_utf8(acc).unwrap().lines().count(), clean);
    assert_eq!(String::from_utf8(rej).unwrap().lines().count(), 20 - clean);
    assert_eq!(String::from_utf8(ver).unwrap().lines().count(), 20);
    for class in Violation::ALL {
        let n = want.values().filter(|v| v.contains(&class)).count();
        assert_eq!(summary.by_violation.get(&class).copied().unwrap_or(0), n, "{class:?}");
    }
}
