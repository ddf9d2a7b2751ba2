//! Radiology report parsing.
//!
//! Reports are split on a fixed set of section headers. Anything before the
//! first recognized header lands in [`SectionKind::Preamble`]; many reports
//! open with an unlabeled impression summary, so the preamble doubles as the
//! impression fallback in [`compose_input`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report text is empty")]
    EmptyText,
    #[error("report {id}: no impression or preamble text to classify")]
    EmptyInput { id: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate report id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionKind {
    Impression,
    Findings,
    ClinicalIndication,
    Technique,
    Comparison,
    Preamble,
}

impl SectionKind {
    pub const ALL: [SectionKind; 6] = [
        SectionKind::Impression,
        SectionKind::Findings,
        SectionKind::ClinicalIndication,
        SectionKind::Technique,
        SectionKind::Comparison,
        SectionKind::Preamble,
    ];

    /// Header token introducing this section, `None` for the preamble.
    pub fn header(self) -> Option<&'static str> {
        match self {
            SectionKind::Impression => Some("IMPRESSION:"),
            SectionKind::Findings => Some("FINDINGS:"),
            SectionKind::ClinicalIndication => Some("CLINICAL INDICATION:"),
            SectionKind::Technique => Some("TECHNIQUE:"),
            SectionKind::Comparison => Some("COMPARISON:"),
            SectionKind::Preamble => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Sex {
    M,
    F,
    #[default]
    Unknown,
}

impl FromStr for Sex {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "M" | "MALE" => Sex::M,
            "F" | "FEMALE" => Sex::F,
            _ => Sex::Unknown,
        })
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::Unknown => "U",
        };
        f.write_str(s)
    }
}

/// Which part of a report the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[serde(alias = "impression_only")]
    Impression,
    #[default]
    #[serde(alias = "full_report")]
    Full,
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "impression" | "impression-only" | "impression_only" => Ok(InputMode::Impression),
            "full" | "full-report" | "full_report" => Ok(InputMode::Full),
            other => Err(format!("unknown input mode '{other}'")),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Impression => "impression",
            InputMode::Full => "full",
        })
    }
}

pub type Sections = BTreeMap<SectionKind, String>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub id: String,
    pub raw_text: String,
    pub sections: Sections,
    pub exam_year: i32,
    pub site: String,
    pub age_days: u32,
    pub sex: Sex,
    pub procedure_description: String,
}

impl Report {
    pub fn new(
        id: impl Into<String>,
        raw_text: impl Into<String>,
        exam_year: i32,
        site: impl Into<String>,
        age_days: u32,
        sex: Sex,
        procedure_description: impl Into<String>,
    ) -> Result<Self, ReportError> {
        let raw_text = raw_text.into();
        if raw_text.trim().is_empty() {
            return Err(ReportError::EmptyText);
        }
        let sections = parse_sections(&raw_text);
        Ok(Self {
            id: id.into(),
            raw_text,
            sections,
            exam_year,
            site: site.into(),
            age_days,
            sex,
            procedure_description: procedure_description.into(),
        })
    }

    pub fn section(&self, kind: SectionKind) -> Option<&str> {
        self.sections.get(&kind).map(String::as_str)
    }
}

/// One line of the report JSON-lines ingest format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub text: String,
    pub exam_year: i32,
    pub site: String,
    pub age_days: u32,
    #[serde(default)]
    pub sex: String,
    #[serde(default)]
    pub procedure_description: String,
}

impl ReportRecord {
    pub fn into_report(self) -> Result<Report, ReportError> {
        let sex = self.sex.parse().unwrap_or_default();
        Report::new(self.id, self.text, self.exam_year, self.site, self.age_days, sex, self.procedure_description)
    }
}

impl From<&Report> for ReportRecord {
    fn from(r: &Report) -> Self {
        Self {
            id: r.id.clone(),
            text: r.raw_text.clone(),
            exam_year: r.exam_year,
            site: r.site.clone(),
            age_days: r.age_days,
            sex: r.sex.to_string(),
            procedure_description: r.procedure_description.clone(),
        }
    }
}

/// Reads reports from JSON lines. Blank lines are skipped; ids must be unique.
pub fn read_reports_jsonl<R: BufRead>(reader: R) -> Result<Vec<Report>, ReportError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReportRecord =
            serde_json::from_str(&line).map_err(|source| ReportError::Json { line: idx + 1, source })?;
        if !seen.insert(record.id.clone()) {
            return Err(ReportError::DuplicateId(record.id));
        }
        out.push(record.into_report()?);
    }
    Ok(out)
}

pub fn write_reports_jsonl<W: std::io::Write>(mut w: W, reports: &[Report]) -> Result<(), ReportError> {
    for r in reports {
        let line = serde_json::to_string(&ReportRecord::from(r)).expect("report record serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// Words that, directly before a header token, mark it as body text
// ("END OF IMPRESSION:").
const HEADER_DISQUALIFIERS: [&str; 1] = ["of"];

fn header_spans(text: &str) -> Vec<(usize, usize, SectionKind)> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut spans = Vec::new();
    for kind in SectionKind::ALL {
        let Some(header) = kind.header() else { continue };
        let needle = header.to_ascii_lowercase();
        let mut from = 0;
        while let Some(pos) = lower[from..].find(&needle) {
            let start = from + pos;
            let end = start + needle.len();
            from = end;
            if start > 0 && bytes[start - 1].is_ascii_alphanumeric() {
                // single-word headers need a word boundary
                if !header.contains(' ') {
                    continue;
                }
            }
            let before = lower[..start].trim_end();
            let prev_word = before.rsplit(|c: char| !c.is_ascii_alphanumeric()).next().unwrap_or("");
            if HEADER_DISQUALIFIERS.contains(&prev_word) {
                continue;
            }
            spans.push((start, end, kind));
        }
    }
    spans.sort_by_key(|s| s.0);
    // a header nested inside an earlier one cannot occur with this header set,
    // but overlapping matches are dropped all the same
    let mut kept: Vec<(usize, usize, SectionKind)> = Vec::with_capacity(spans.len());
    for s in spans {
        if kept.last().is_none_or(|k| s.0 >= k.1) {
            kept.push(s);
        }
    }
    kept
}

/// Collapses runs of spaces and tabs to one space, keeps newlines, trims.
pub fn normalize_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c == ' ' || c == '\t' || c == '\r' {
            pending_space = true;
            continue;
        }
        if c == '\n' {
            pending_space = false;
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
            continue;
        }
        if pending_space && !out.is_empty() && !out.ends_with('\n') {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out.trim().to_string()
}

/// Splits report text into sections in document order.
///
/// Total: text without any recognized header yields only a preamble, and
/// empty sections are omitted. Repeated headers concatenate their bodies
/// with a newline.
pub fn parse_sections(raw_text: &str) -> Sections {
    let mut sections = Sections::new();
    let spans = header_spans(raw_text);
    let mut push = |kind: SectionKind, body: &str| {
        let body = normalize_whitespace(body);
        if body.is_empty() {
            return;
        }
        sections
            .entry(kind)
            .and_modify(|v: &mut String| {
                v.push('\n');
                v.push_str(&body);
            })
            .or_insert(body);
    };
    let first = spans.first().map_or(raw_text.len(), |s| s.0);
    push(SectionKind::Preamble, &raw_text[..first]);
    for (i, &(_, end, kind)) in spans.iter().enumerate() {
        let stop = spans.get(i + 1).map_or(raw_text.len(), |s| s.0);
        push(kind, &raw_text[end..stop]);
    }
    sections
}

/// Classifier input text for a report under the given mode.
pub fn compose_input(report: &Report, mode: InputMode) -> Result<&str, ReportError> {
    match mode {
        InputMode::Full => Ok(&report.raw_text),
        InputMode::Impression => report
            .section(SectionKind::Impression)
            .filter(|s| !s.is_empty())
            .or_else(|| report.section(SectionKind::Preamble).filter(|s| !s.is_empty()))
            .ok_or_else(|| ReportError::EmptyInput { id: report.id.clone() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(text: &str) -> Report {
        Report::new("r1", text, 2020, "CHOP", 400, Sex::F, "MRI BRAIN").unwrap()
    }

    #[test]
    fn parses_indication_and_findings_after_summary() {
        let s = parse_sections("Unremarkable brain MRI. CLINICAL INDICATION: Headache FINDINGS: Normal.");
        assert_eq!(s.len(), 3);
        assert_eq!(s[&SectionKind::Preamble], "Unremarkable brain MRI.");
        assert_eq!(s[&SectionKind::ClinicalIndication], "Headache");
        assert_eq!(s[&SectionKind::Findings], "Normal.");
    }

    #[test]
    fn no_headers_is_all_preamble() {
        let s = parse_sections("x");
        assert_eq!(s.len(), 1);
        assert_eq!(s[&SectionKind::Preamble], "x");
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(Report::new("a", "  ", 2020, "CHOP", 1, Sex::M, ""), Err(ReportError::EmptyText)));
    }

    #[test]
    fn repeated_impression_concatenates_in_order() {
        let text = "IMPRESSION: first part. FINDINGS: stuff. IMPRESSION: second part.";
        let s = parse_sections(text);
        assert_eq!(s[&SectionKind::Impression], "first part.\nsecond part.");
        let first = text.find("first part.").unwrap();
        let second = text.find("second part.").unwrap();
        assert!(first < second);
        assert_eq!(s[&SectionKind::Findings], "stuff.");
    }

    #[test]
    fn headers_case_insensitive() {
        let a = parse_sections("Impression: ok. findings: fine.");
        let b = parse_sections("IMPRESSION: ok. FINDINGS: fine.");
        assert_eq!(a, b);
        assert_eq!(a[&SectionKind::Impression], "ok.");
    }

    #[test]
    fn end_of_impression_is_body_text() {
        let s = parse_sections("1. Normal brain. END OF IMPRESSION: Requires notification.");
        assert_eq!(s.len(), 1);
        assert!(s[&SectionKind::Preamble].contains("END OF IMPRESSION:"));
    }

    #[test]
    fn run_on_multiword_header_still_recognized() {
        let s = parse_sections("WITHOUT CONTRAST:CLINICAL INDICATION: headacheTECHNIQUE: axial");
        assert_eq!(s[&SectionKind::ClinicalIndication], "headacheTECHNIQUE: axial");
    }

    #[test]
    fn whitespace_runs_collapse_newlines_kept() {
        assert_eq!(normalize_whitespace("a   b\t c\n  d  "), "a b c\nd");
    }

    #[test]
    fn compose_modes() {
        let r = report("Summary line. FINDINGS: x. IMPRESSION: Normal study.");
        assert_eq!(compose_input(&r, InputMode::Impression).unwrap(), "Normal study.");
        assert_eq!(compose_input(&r, InputMode::Full).unwrap(), r.raw_text);
        let r = report("No definite abnormality on this screening brain MRI. FINDINGS: clear.");
        assert_eq!(
            compose_input(&r, InputMode::Impression).unwrap(),
            "No definite abnormality on this screening brain MRI."
        );
        let r = report("FINDINGS: only findings.");
        assert!(matches!(compose_input(&r, InputMode::Impression), Err(ReportError::EmptyInput { .. })));
    }

    #[test]
    fn jsonl_ignores_unknown_fields() {
        let data = r#"{"id":"a","text":"IMPRESSION: ok","exam_year":2021,"site":"CHOP","age_days":30,"sex":"F","procedure_description":"MRI BRAIN","extra":1}

{"id":"b","text":"x","exam_year":2023,"site":"GEISINGER","age_days":9000,"sex":"?"}"#;
        let reports = read_reports_jsonl(data.as_bytes()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].sex, Sex::F);
        assert_eq!(reports[1].sex, Sex::Unknown);
        assert_eq!(reports[1].procedure_description, "");
    }

    #[test]
    fn jsonl_duplicate_and_negative_age_rejected() {
        let dup = "{\"id\":\"a\",\"text\":\"x\",\"exam_year\":1,\"site\":\"s\",\"age_days\":1}\n\
                   {\"id\":\"a\",\"text\":\"y\",\"exam_year\":1,\"site\":\"s\",\"age_days\":1}";
        assert!(matches!(read_reports_jsonl(dup.as_bytes()), Err(ReportError::DuplicateId(_))));
        let neg = "{\"id\":\"a\",\"text\":\"x\",\"exam_year\":1,\"site\":\"s\",\"age_days\":-4}";
        assert!(matches!(read_reports_jsonl(neg.as_bytes()), Err(ReportError::Json { line: 1, .. })));
    }

    fn header_strategy() -> impl Strategy<Value = &'static str> {
        prop_oneof![
            Just("IMPRESSION:"),
            Just("Findings:"),
            Just("clinical indication:"),
            Just("TECHNIQUE:"),
            Just("Comparison:"),
        ]
    }

    proptest! {
        #[test]
        fn sections_reconstruct_text(
            lead in "[a-z ]{0,12}",
            parts in proptest::collection::vec((header_strategy(), "[a-z .]{0,16}"), 0..6),
        ) {
            let mut text = lead.clone();
            for (h, body) in &parts {
                text.push(' ');
                text.push_str(h);
                text.push(' ');
                text.push_str(body);
            }
            prop_assume!(!text.trim().is_empty());
            let sections = parse_sections(&text);
            // every section body segment is a substring of the normalized text
            let norm = normalize_whitespace(&text);
            for body in sections.values() {
                for seg in body.split('\n') {
                    prop_assert!(norm.contains(seg));
                }
            }
            // rebuilding from spans and headers gives back the normalized text
            let spans = header_spans(&text);
            let mut rebuilt = normalize_whitespace(&text[..spans.first().map_or(text.len(), |s| s.0)]);
            for (i, &(start, end, _)) in spans.iter().enumerate() {
                let stop = spans.get(i + 1).map_or(text.len(), |s| s.0);
                let body = normalize_whitespace(&text[end..stop]);
                for piece in [&text[start..end], body.as_str()] {
                    if piece.is_empty() { continue; }
                    if !rebuilt.is_empty() { rebuilt.push(' '); }
                    rebuilt.push_str(piece);
                }
            }
            prop_assert_eq!(rebuilt.split_whitespace().collect::<Vec<_>>(), norm.split_whitespace().collect::<Vec<_>>());
            prop_assert_eq!(parse_sections(&text), sections);
        }
    }
}
