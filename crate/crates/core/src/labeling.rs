//! Reference labels: coarse keyword flagging and annotator grade aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{Report, SectionKind};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("annotation has no grades")]
    EmptyAnnotation,
    #[error("grade {0} outside {{0, 1, 2}}")]
    InvalidGrade(u8),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Report label. `Normal` is the positive (minority) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Abnormal,
    Uncertain,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Normal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
            Label::Uncertain => "uncertain",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            "uncertain" => Ok(Label::Uncertain),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

pub const COARSE_KEYWORDS: [&str; 6] =
    ["chemotherapy", "resect", "craniotomy", "craniectomy", "surgical cavity", "post surgery"];

/// Keyword pre-labeling: `true` flags the report as abnormal.
///
/// Requires "brain" in the procedure description and any keyword as a
/// case-insensitive substring of the findings.
pub fn coarse_flag(report: &Report) -> bool {
    if !report.procedure_description.to_lowercase().contains("brain") {
        return false;
    }
    let Some(findings) = report.section(SectionKind::Findings) else {
        return false;
    };
    let findings = findings.to_lowercase();
    COARSE_KEYWORDS.iter().any(|k| findings.contains(k))
}

/// Mean grade > 1.5 is Normal, < 0.5 is Abnormal, anything between is Uncertain.
pub fn aggregate_grades(grades: &[u8]) -> Result<Label, LabelError> {
    if grades.is_empty() {
        return Err(LabelError::EmptyAnnotation);
    }
    if let Some(&g) = grades.iter().find(|&&g| g > 2) {
        return Err(LabelError::InvalidGrade(g));
    }
    // compare sums against scaled thresholds to stay exact
    let sum: u64 = grades.iter().map(|&g| u64::from(g)).sum();
    let n = grades.len() as u64;
    Ok(if 2 * sum > 3 * n {
        Label::Normal
    } else if 2 * sum < n {
        Label::Abnormal
    } else {
        Label::Uncertain
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub report_id: String,
    pub grades: Vec<u8>,
}

impl AnnotationSet {
    pub fn label(&self) -> Result<Label, LabelError> {
        aggregate_grades(&self.grades)
    }
}

pub fn read_annotations_jsonl<R: BufRead>(reader: R) -> Result<Vec<AnnotationSet>, LabelError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationSet =
            serde_json::from_str(&line).map_err(|source| LabelError::Json { line: idx + 1, source })?;
        out.push(a);
    }
    Ok(out)
}

/// Where a resolved label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LabelSource {
    Annotation,
    Keyword,
}

/// Resolves one label per report. Human grades win over the keyword flag;
/// reports with neither are left out, as are Uncertain aggregates.
pub fn resolve_labels(
    reports: &[Report],
    annotations: &[AnnotationSet],
) -> Result<BTreeMap<String, (Label, LabelSource)>, LabelError> {
    let mut graded: HashMap<&str, Vec<u8>> = HashMap::new();
    for a in annotations {
        graded.entry(a.report_id.as_str()).or_default().extend_from_slice(&a.grades);
    }
    let mut out = BTreeMap::new();
    for r in reports {
        if let Some(grades) = graded.get(r.id.as_str()) {
            let label = aggregate_grades(grades)?;
            if label != Label::Uncertain {
                out.insert(r.id.clone(), (label, LabelSource::Annotation));
            }
        } else if coarse_flag(r) {
            out.insert(r.id.clone(), (Label::Abnormal, LabelSource::Keyword));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Sex;
    use proptest::prelude::*;

    fn rep(procedure: &str, text: &str) -> Report {
        Report::new("r", text, 2020, "CHOP", 10, Sex::M, procedure).unwrap()
    }

    #[test]
    fn keyword_flags() {
        assert!(coarse_flag(&rep("MRI BRAIN", "FINDINGS: status post craniotomy")));
        assert!(coarse_flag(&rep("MRI BRAIN", "FINDINGS: Chemotherapy ongoing")));
        assert!(!coarse_flag(&rep("MRI BRAIN", "FINDINGS: unremarkable study")));
        assert!(coarse_flag(&rep("mri brain w/o", "FINDINGS: prior RESECTION bed")));
        // keyword outside findings, or not a brain procedure
        assert!(!coarse_flag(&rep("MRI BRAIN", "Post craniotomy. FINDINGS: clear")));
        assert!(!coarse_flag(&rep("MRI SPINE", "FINDINGS: craniotomy")));
        assert!(!coarse_flag(&rep("MRI BRAIN", "no findings section")));
    }

    #[test]
    fn low_quality_language_not_flagged() {
        assert!(!coarse_flag(&rep("MRI BRAIN", "FINDINGS: degraded, non-diagnostic images")));
    }

    #[test]
    fn grade_thresholds() {
        assert_eq!(aggregate_grades(&[2, 2]).unwrap(), Label::Normal);
        assert_eq!(aggregate_grades(&[0]).unwrap(), Label::Abnormal);
        assert_eq!(aggregate_grades(&[1, 2]).unwrap(), Label::Uncertain);
        assert_eq!(aggregate_grades(&[0, 1]).unwrap(), Label::Uncertain);
        assert_eq!(aggregate_grades(&[0, 0, 1]).unwrap(), Label::Abnormal);
        assert!(matches!(aggregate_grades(&[]), Err(LabelError::EmptyAnnotation)));
        assert!(matches!(aggregate_grades(&[3]), Err(LabelError::InvalidGrade(3))));
    }

    #[test]
    fn human_grades_override_keywords() {
        let a = Report::new("a", "FINDINGS: craniotomy", 2020, "CHOP", 1, Sex::F, "MRI BRAIN").unwrap();
        let b = Report::new("b", "FINDINGS: craniotomy", 2020, "CHOP", 1, Sex::F, "MRI BRAIN").unwrap();
        let c = Report::new("c", "FINDINGS: clear", 2020, "CHOP", 1, Sex::F, "MRI BRAIN").unwrap();
        let d = Report::new("d", "FINDINGS: clear", 2020, "CHOP", 1, Sex::F, "MRI BRAIN").unwrap();
        let ann = vec![
            AnnotationSet { report_id: "a".into(), grades: vec![2, 2] },
            AnnotationSet { report_id: "d".into(), grades: vec![1] },
        ];
        let labels = resolve_labels(&[a, b, c, d], &ann).unwrap();
        assert_eq!(labels["a"], (Label::Normal, LabelSource::Annotation));
        assert_eq!(labels["b"], (Label::Abnormal, LabelSource::Keyword));
        assert!(!labels.contains_key("c"));
        assert!(!labels.contains_key("d"));
    }

    proptest! {
        #[test]
        fn grades_permutation_invariant(mut grades in proptest::collection::vec(0u8..=2, 1..20), seed in any::<u64>()) {
            let before = aggregate_grades(&grades).unwrap();
            // rotate and reverse as cheap permutations
            let k = (seed as usize) % grades.len();
            grades.rotate_left(k);
            prop_assert_eq!(aggregate_grades(&grades).unwrap(), before);
            grades.reverse();
            prop_assert_eq!(aggregate_grades(&grades).unwrap(), before);
        }

        #[test]
        fn constant_grades(n in 1usize..50) {
            prop_assert_eq!(aggregate_grades(&vec![2; n]).unwrap(), Label::Normal);
            prop_assert_eq!(aggregate_grades(&vec![0; n]).unwrap(), Label::Abnormal);
            prop_assert_eq!(aggregate_grades(&vec![1; n]).unwrap(), Label::Uncertain);
        }

        #[test]
        fn keyword_monotone(findings in "[a-z ]{0,40}", k in 0usize..6) {
            let base = rep("MRI BRAIN", &format!("FINDINGS: {findings}"));
            let more = rep("MRI BRAIN", &format!("FINDINGS: {findings} {}", COARSE_KEYWORDS[k]));
            prop_assert!(coarse_flag(&more));
            prop_assert!(!coarse_flag(&base) || coarse_flag(&more));
        }
    }
}
