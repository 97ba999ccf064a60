//! `<think>…</think><answer>…</answer>` transcripts: parsing, the format reward,
//! and the quality filters applied to chain-of-thought training records.

use crate::geometry::{self, BBox};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Problems noticed while parsing. Parsing never fails; it records these instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseIssue {
    MissingThink,
    MissingAnswer,
    UnclosedTag,
    OutOfOrder,
    RepeatedTag,
    NestedTag,
    UnparseableAnswer,
    InvalidBox,
    OutOfBounds,
}

impl ParseIssue {
    fn breaks_tags(self) -> bool {
        matches!(
            self,
            ParseIssue::MissingAnswer
                | ParseIssue::UnclosedTag
                | ParseIssue::OutOfOrder
                | ParseIssue::RepeatedTag
                | ParseIssue::NestedTag
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub raw: String,
    pub think: Option<String>,
    pub answer: Option<String>,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub image_w: f64,
    pub image_h: f64,
    pub issues: Vec<ParseIssue>,
}

impl Transcript {
    pub fn has_issue(&self, issue: ParseIssue) -> bool {
        self.issues.contains(&issue)
    }

    /// Tag structure is broken (anything beyond a missing think block).
    pub fn tags_malformed(&self) -> bool {
        self.issues.iter().any(|i| i.breaks_tags())
    }

    /// The parsed box is a valid rectangle inside the image.
    pub fn box_ok(&self) -> bool {
        matches!(self.bbox, Some(b) if b.is_valid() && b.is_within(self.image_w, self.image_h))
    }
}

/// Render a transcript in canonical form.
pub fn serialize_transcript(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

pub fn format_box(b: &BBox) -> String {
    format!("[{},{},{},{}]", b.x1, b.y1, b.x2, b.y2)
}

/// Parse `[x1, y1, x2, y2]`. Any four finite numbers are accepted; validity is
/// checked separately.
pub fn parse_box_text(text: &str) -> Option<BBox> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut vals = [0.0; 4];
    let mut n = 0;
    for part in inner.split(',') {
        if n == 4 {
            return None;
        }
        let v: f64 = part.trim().parse().ok()?;
        if !v.is_finite() {
            return None;
        }
        vals[n] = v;
        n += 1;
    }
    (n == 4).then(|| BBox::from(vals))
}

/// Segment between the first `open` at or after `from` and the next `close`.
/// Returns (content, end offset after the close tag).
fn segment<'a>(raw: &'a str, open_at: usize, open: &str, close: &str) -> Option<(&'a str, usize)> {
    let start = open_at + open.len();
    let close_at = raw[start..].find(close)? + start;
    Some((&raw[start..close_at], close_at + close.len()))
}

pub fn parse_transcript(raw: &str, image_w: f64, image_h: f64) -> Transcript {
    let mut issues = Vec::new();
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if raw.matches(tag).count() > 1 {
            issues.push(ParseIssue::RepeatedTag);
            break;
        }
    }

    let think_at = raw.find(THINK_OPEN);
    let answer_at = raw.find(ANSWER_OPEN);

    let mut think = None;
    let mut think_end = 0;
    match think_at {
        Some(at) => match segment(raw, at, THINK_OPEN, THINK_CLOSE) {
            Some((text, end)) => {
                think = Some(text.to_string());
                think_end = end;
            }
            None => issues.push(ParseIssue::UnclosedTag),
        },
        None => {
            issues.push(ParseIssue::MissingThink);
            if raw.contains(THINK_CLOSE) {
                issues.push(ParseIssue::UnclosedTag);
            }
        }
    }

    let mut answer = None;
    match answer_at {
        Some(at) => {
            if let Some(t) = think_at {
                if at < t {
                    issues.push(ParseIssue::OutOfOrder);
                } else if think.is_some() && at < think_end {
                    issues.push(ParseIssue::NestedTag);
                }
            }
            match segment(raw, at, ANSWER_OPEN, ANSWER_CLOSE) {
                Some((text, _)) => answer = Some(text.to_string()),
                None => issues.push(ParseIssue::UnclosedTag),
            }
        }
        None => {
            issues.push(ParseIssue::MissingAnswer);
            if raw.contains(ANSWER_CLOSE) {
                issues.push(ParseIssue::UnclosedTag);
            }
        }
    }
    if let Some(t) = &think {
        if t.contains(ANSWER_OPEN) || t.contains(ANSWER_CLOSE) {
            issues.push(ParseIssue::NestedTag);
        }
    }

    let mut bbox = None;
    if let Some(a) = &answer {
        match parse_box_text(a) {
            None => issues.push(ParseIssue::UnparseableAnswer),
            Some(b) => {
                if !b.is_valid() {
                    issues.push(ParseIssue::InvalidBox);
                } else if !b.is_within(image_w, image_h) {
                    issues.push(ParseIssue::OutOfBounds);
                }
                bbox = Some(b);
            }
        }
    }

    issues.sort();
    issues.dedup();
    Transcript {
        raw: raw.to_string(),
        think,
        answer,
        bbox,
        image_w,
        image_h,
        issues,
    }
}

/// 1 when the tags are present and in order, the think block is nonempty, and the
/// answer is a valid in-bounds box; 0 otherwise.
pub fn format_reward(t: &Transcript) -> f64 {
    let think_ok = t.think.as_deref().is_some_and(|s| !s.trim().is_empty());
    if think_ok && !t.tags_malformed() && t.box_ok() {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// CoT record filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    IncompleteChain,
    InconsistentCoordinates,
    WrongBox,
    MalformedTags,
}

impl Violation {
    pub const ALL: [Violation; 4] = [
        Violation::IncompleteChain,
        Violation::InconsistentCoordinates,
        Violation::WrongBox,
        Violation::MalformedTags,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub violations: Vec<Violation>,
}

impl FilterVerdict {
    fn from_violations(mut violations: Vec<Violation>) -> Self {
        violations.sort();
        violations.dedup();
        FilterVerdict {
            accepted: violations.is_empty(),
            violations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// Minimum length of the trimmed think block, in characters.
    pub min_think_chars: usize,
    /// Minimum IoU between the answered box and the ground truth.
    pub match_tolerance: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            min_think_chars: 40,
            match_tolerance: 0.99,
        }
    }
}

/// One line of a CoT corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTLine {
    pub image_id: String,
    pub query: String,
    pub response: String,
    pub gt_box: BBox,
    pub image_w: f64,
    pub image_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoTRecord {
    pub image_id: String,
    pub query: String,
    pub transcript: Transcript,
    pub gt_box: BBox,
}

impl CoTRecord {
    pub fn from_line(line: &CoTLine) -> Self {
        CoTRecord {
            image_id: line.image_id.clone(),
            query: line.query.clone(),
            transcript: parse_transcript(&line.response, line.image_w, line.image_h),
            gt_box: line.gt_box,
        }
    }
}

pub fn validate_cot(record: &CoTRecord, settings: &FilterSettings) -> FilterVerdict {
    let t = &record.transcript;
    let mut v = Vec::new();

    let think_len = t.think.as_deref().map_or(0, |s| s.trim().chars().count());
    if t.think.is_none() || think_len < settings.min_think_chars {
        v.push(Violation::IncompleteChain);
    }
    if t.tags_malformed() {
        v.push(Violation::MalformedTags);
    }
    if t.answer.is_some() && !t.box_ok() {
        v.push(Violation::InconsistentCoordinates);
    }
    if let Some(b) = t.bbox.filter(|b| b.is_valid()) {
        let overlap = geometry::iou(&b, &record.gt_box).unwrap_or(0.0);
        if overlap < settings.match_tolerance {
            v.push(Violation::WrongBox);
        }
    }
    if !record.gt_box.is_valid() || !record.gt_box.is_within(t.image_w, t.image_h) {
        v.push(Violation::InconsistentCoordinates);
    }
    FilterVerdict::from_violations(v)
}

/// Verdict for one input line, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineVerdict {
    pub line: usize,
    pub image_id: Option<String>,
    #[serde(flatten)]
    pub verdict: FilterVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub undecodable: usize,
    pub by_violation: BTreeMap<Violation, usize>,
}

impl FilterSummary {
    fn record(&mut self, v: &FilterVerdict) {
        self.total += 1;
        if v.accepted {
            self.accepted += 1;
        } else {
            self.rejected += 1;
        }
        for x in &v.violations {
            *self.by_violation.entry(*x).or_default() += 1;
        }
    }

    /// Associative merge of two partial summaries.
    pub fn merge(&mut self, other: &FilterSummary) {
        self.total += other.total;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.undecodable += other.undecodable;
        for (k, n) in &other.by_violation {
            *self.by_violation.entry(*k).or_default() += n;
        }
    }
}

/// Result of classifying a single raw corpus line.
#[derive(Debug, Clone, PartialEq)]
pub enum LineOutcome {
    Accepted(CoTLine),
    Rejected {
        record: Option<CoTLine>,
        raw: String,
        verdict: FilterVerdict,
    },
}

pub fn classify_line(raw: &str, settings: &FilterSettings) -> LineOutcome {
    match serde_json::from_str::<CoTLine>(raw) {
        Ok(line) => {
            let verdict = validate_cot(&CoTRecord::from_line(&line), settings);
            if verdict.accepted {
                LineOutcome::Accepted(line)
            } else {
                LineOutcome::Rejected {
                    record: Some(line),
                    raw: raw.to_string(),
                    verdict,
                }
            }
        }
        Err(_) => LineOutcome::Rejected {
            record: None,
            raw: raw.to_string(),
            verdict: FilterVerdict::from_violations(vec![Violation::MalformedTags]),
        },
    }
}

#[derive(Serialize)]
struct RejectedOut<'a> {
    #[serde(flatten)]
    record: Option<&'a CoTLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw: Option<&'a str>,
    verdict: &'a FilterVerdict,
}

/// Stream a JSON Lines corpus into accepted records, rejected records (each with
/// its verdict attached), and a per-line verdict report. Blank lines are skipped.
pub fn filter_corpus<R: BufRead, A: Write, J: Write, V: Write>(
    input: R,
    settings: &FilterSettings,
    accepted: &mut A,
    rejected: &mut J,
    verdicts: &mut V,
) -> std::io::Result<FilterSummary> {
    let mut summary = FilterSummary::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = classify_line(&line, settings);
        let (image_id, verdict) = match &outcome {
            LineOutcome::Accepted(rec) => {
                serde_json::to_writer(&mut *accepted, rec)?;
                writeln!(accepted)?;
                (
                    Some(rec.image_id.clone()),
                    FilterVerdict::from_violations(Vec::new()),
                )
            }
            LineOutcome::Rejected {
                record,
                raw,
                verdict,
            } => {
                if record.is_none() {
                    summary.undecodable += 1;
                }
                let out = RejectedOut {
                    record: record.as_ref(),
                    raw: record.is_none().then_some(raw.as_str()),
                    verdict,
                };
                serde_json::to_writer(&mut *rejected, &out)?;
                writeln!(rejected)?;
                (record.as_ref().map(|r| r.image_id.clone()), verdict.clone())
            }
        };
        summary.record(&verdict);
        serde_json::to_writer(
            &mut *verdicts,
            &LineVerdict {
                line: idx + 1,
                image_id,
                verdict,
            },
        )?;
        writeln!(verdicts)?;
    }
    Ok(summary)
}
