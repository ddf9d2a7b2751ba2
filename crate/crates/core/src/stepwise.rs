//! Yes/no inquiry protocols for report triage by a language model.
//!
//! The direct protocol asks Q1 only. The stepwise protocol asks all five
//! questions independently and labels a report Normal only when
//! `(Q1 = No OR Q2 = Yes) AND Q3 = Q4 = Q5 = No`. An answer that cannot be
//! parsed never satisfies a condition, so parse failures fall toward
//! Abnormal.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::Label;
use crate::metrics::{confusion, EvalResult, MetricsError};
use crate::report::Report;

pub const TOKEN_ENV: &str = "NORMCHARTS_LLM_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionId {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
}

impl QuestionId {
    pub const ALL: [QuestionId; 5] = [QuestionId::Q1, QuestionId::Q2, QuestionId::Q3, QuestionId::Q4, QuestionId::Q5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prompt(self) -> &'static PromptSpec {
        &PROMPTS[self.index()]
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.index() + 1)
    }
}

impl FromStr for QuestionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q1" | "1" => Ok(QuestionId::Q1),
            "Q2" | "2" => Ok(QuestionId::Q2),
            "Q3" | "3" => Ok(QuestionId::Q3),
            "Q4" | "4" => Ok(QuestionId::Q4),
            "Q5" | "5" => Ok(QuestionId::Q5),
            other => Err(format!("unknown question id '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSpec {
    pub id: QuestionId,
    pub text: &'static str,
    /// Whether a "Yes" points toward a brain abnormality (false only for Q2).
    pub abnormal_on_yes: bool,
}

pub static PROMPTS: [PromptSpec; 5] = [
    PromptSpec {
        id: QuestionId::Q1,
        text: "Does the provided radiology report indicate any brain abnormalities? (Yes/No followed by reasoning)",
        abnormal_on_yes: true,
    },
    PromptSpec {
        id: QuestionId::Q2,
        text: "Does the provided radiology report indicate that the pathology is outside of the brain? (Yes/No followed by reasoning)",
        abnormal_on_yes: false,
    },
    PromptSpec {
        id: QuestionId::Q3,
        text: "Does the provided radiology report indicate any motion artifact or low quality scan? (Yes/No followed by reasoning)",
        abnormal_on_yes: true,
    },
    PromptSpec {
        id: QuestionId::Q4,
        text: "Does the provided radiology report indicate any immediate clinical follow up is required? (Yes/No followed by reasoning)",
        abnormal_on_yes: true,
    },
    PromptSpec {
        id: QuestionId::Q5,
        text: "Does the provided radiology report indicate that the radiologist or the medical doctor is highly concerned about the patient's condition? (Yes/No followed by reasoning)",
        abnormal_on_yes: true,
    },
];

/// Full prompt for one question: question text, a blank line, report text.
pub fn build_prompt(question: QuestionId, report_text: &str) -> String {
    format!("{}\n\n{}", question.prompt().text, report_text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
    Unparsed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Unparsed => "unparsed",
        })
    }
}

/// Reads the verdict from the first alphabetic token of a response, after
/// skipping leading whitespace, punctuation and HTML-style tags.
pub fn parse_answer(response_text: &str) -> Verdict {
    let mut rest = response_text;
    loop {
        rest = rest.trim_start_matches(|c: char| !c.is_alphabetic() && c != '<');
        if let Some(tail) = rest.strip_prefix('<') {
            match tail.find('>') {
                Some(end) => rest = &tail[end + 1..],
                None => rest = tail,
            }
        } else {
            break;
        }
    }
    let token: String = rest.chars().take_while(|c| c.is_alphabetic()).collect();
    match token.to_lowercase().as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => Verdict::Unparsed,
    }
}

pub fn aggregate_direct(q1: Verdict) -> Label {
    match q1 {
        Verdict::No => Label::Normal,
        Verdict::Yes | Verdict::Unparsed => Label::Abnormal,
    }
}

#[derive(Debug, Error)]
pub enum StepwiseError {
    #[error("record {report_id} lacks an answer for {question}")]
    IncompleteRecord { report_id: String, question: QuestionId },
    #[error("no gold label for report {0}")]
    MissingGold(String),
    #[error("bad fixture row {row}: {message}")]
    Fixture { row: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Verdicts indexed Q1..Q5.
pub type Answers = [Verdict; 5];

pub fn aggregate_answers(a: &Answers) -> Label {
    let [q1, q2, q3, q4, q5] = *a;
    let presence_ok = q1 == Verdict::No || q2 == Verdict::Yes;
    let rest_ok = q3 == Verdict::No && q4 == Verdict::No && q5 == Verdict::No;
    if presence_ok && rest_ok {
        Label::Normal
    } else {
        Label::Abnormal
    }
}

pub fn aggregate_stepwise(answers: &BTreeMap<QuestionId, Verdict>) -> Result<Label, StepwiseError> {
    let mut a = [Verdict::Unparsed; 5];
    for q in QuestionId::ALL {
        a[q.index()] =
            *answers.get(&q).ok_or(StepwiseError::IncompleteRecord { report_id: String::new(), question: q })?;
    }
    Ok(aggregate_answers(&a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InquiryMode {
    Direct,
    Stepwise,
}

impl FromStr for InquiryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(InquiryMode::Direct),
            "stepwise" => Ok(InquiryMode::Stepwise),
            other => Err(format!("unknown inquiry mode '{other}'")),
        }
    }
}

impl fmt::Display for InquiryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InquiryMode::Direct => "direct",
            InquiryMode::Stepwise => "stepwise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{question} for report {report_id}: {message}")]
pub struct ClientError {
    pub report_id: String,
    pub question: QuestionId,
    pub message: String,
}

/// Something that answers a prompt about a report.
pub trait AnswerSource: Sync {
    fn answer(&self, report_id: &str, question: QuestionId, prompt: &str) -> Result<String, ClientError>;
}

/// Canned responses keyed by (report id, question). Missing cells answer
/// with an empty string, which parses as Unparsed.
#[derive(Debug, Clone, Default)]
pub struct FixtureSource {
    responses: HashMap<(String, QuestionId), String>,
}

impl FixtureSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, report_id: impl Into<String>, q: QuestionId, text: impl Into<String>) {
        self.responses.insert((report_id.into(), q), text.into());
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Tab-separated `report_id, question_id, response_text` with a header row.
    pub fn from_tsv<R: Read>(reader: R) -> Result<Self, StepwiseError> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_reader(reader);
        let mut out = Self::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(StepwiseError::Fixture {
                    row: row + 1,
                    message: format!("expected 3 columns, got {}", rec.len()),
                });
            }
            let q: QuestionId = rec[1].parse().map_err(|message| StepwiseError::Fixture { row: row + 1, message })?;
            out.insert(&rec[0], q, &rec[2]);
        }
        Ok(out)
    }

    pub fn write_tsv<W: Write>(&self, w: W) -> Result<(), StepwiseError> {
        let mut wtr = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
        wtr.write_record(["report_id", "question_id", "response_text"])?;
        let mut keys: Vec<&(String, QuestionId)> = self.responses.keys().collect();
        keys.sort();
        for k in keys {
            wtr.write_record([k.0.as_str(), &k.1.to_string(), &self.responses[k]])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl AnswerSource for FixtureSource {
    fn answer(&self, report_id: &str, question: QuestionId, _prompt: &str) -> Result<String, ClientError> {
        Ok(self.responses.get(&(report_id.to_string(), question)).cloned().unwrap_or_default())
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    model: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// JSON-over-HTTP answer source: POSTs `{"prompt", "model"}` and expects
/// `{"text"}` back.
#[derive(Debug, Clone)]
pub struct HttpSource {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl HttpSource {
    /// Reads the bearer token from `NORMCHARTS_LLM_TOKEN` when set.
    pub fn from_env(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout,
        }
    }
}

impl AnswerSource for HttpSource {
    fn answer(&self, report_id: &str, question: QuestionId, prompt: &str) -> Result<String, ClientError> {
        let fail = |message: String| ClientError { report_id: report_id.to_string(), question, message };
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(HttpRequest { prompt, model: &self.model }).map_err(|e| fail(e.to_string()))?;
        let body: HttpResponse = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepwiseRecord {
    pub report_id: String,
    pub mode: InquiryMode,
    pub answers: BTreeMap<QuestionId, Verdict>,
    pub reasoning: BTreeMap<QuestionId, String>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy)]
pub struct InquiryOptions {
    /// Extra attempts after a transport failure.
    pub retries: usize,
}

impl Default for InquiryOptions {
    fn default() -> Self {
        Self { retries: 2 }
    }
}

fn ask(client: &dyn AnswerSource, report: &Report, q: QuestionId, opts: &InquiryOptions) -> (Verdict, String) {
    let prompt = build_prompt(q, &report.raw_text);
    let mut last_err = None;
    for _ in 0..=opts.retries {
        match client.answer(&report.id, q, &prompt) {
            Ok(text) => return (parse_answer(&text), text),
            Err(e) => {
                log::warn!("{e}");
                last_err = Some(e);
            }
        }
    }
    let msg = last_err.map(|e| e.to_string()).unwrap_or_default();
    (Verdict::Unparsed, format!("[no answer: {msg}]"))
}

/// Queries the answer source and labels the report.
///
/// Stepwise questions are sent concurrently and independently. In direct
/// mode Q2..Q5 are recorded as Unparsed with empty reasoning.
pub fn run_inquiry(
    report: &Report,
    mode: InquiryMode,
    client: &dyn AnswerSource,
    opts: &InquiryOptions,
) -> StepwiseRecord {
    let mut answers = BTreeMap::new();
    let mut reasoning = BTreeMap::new();
    match mode {
        InquiryMode::Direct => {
            let (v, text) = ask(client, report, QuestionId::Q1, opts);
            answers.insert(QuestionId::Q1, v);
            reasoning.insert(QuestionId::Q1, text);
            for q in &QuestionId::ALL[1..] {
                answers.insert(*q, Verdict::Unparsed);
                reasoning.insert(*q, String::new());
            }
        }
        InquiryMode::Stepwise => {
            let results: Vec<(QuestionId, (Verdict, String))> = std::thread::scope(|s| {
                let handles: Vec<_> =
                    QuestionId::ALL.iter().map(|&q| s.spawn(move || (q, ask(client, report, q, opts)))).collect();
                handles.into_iter().map(|h| h.join().expect("inquiry thread panicked")).collect()
            });
            for (q, (v, text)) in results {
                answers.insert(q, v);
                reasoning.insert(q, text);
            }
        }
    }
    let label = match mode {
        InquiryMode::Direct => aggregate_direct(answers[&QuestionId::Q1]),
        InquiryMode::Stepwise => aggregate_stepwise(&answers).expect("all five answers recorded"),
    };
    StepwiseRecord { report_id: report.id.clone(), mode, answers, reasoning, label }
}

pub fn evaluate_inquiry(
    records: &[StepwiseRecord],
    gold: &BTreeMap<String, Label>,
) -> Result<EvalResult, StepwiseError> {
    let mut preds = Vec::with_capacity(records.len());
    let mut truth = Vec::with_capacity(records.len());
    for r in records {
        let g = gold.get(&r.report_id).ok_or_else(|| StepwiseError::MissingGold(r.report_id.clone()))?;
        preds.push(r.label);
        truth.push(*g);
    }
    Ok(confusion(&preds, &truth)?)
}

/// One row per record: id, mode, five verdicts, label.
pub fn write_records_tsv<W: Write>(mut w: W, records: &[StepwiseRecord]) -> std::io::Result<()> {
    writeln!(w, "report_id\tmode\tQ1\tQ2\tQ3\tQ4\tQ5\tlabel")?;
    for r in records {
        write!(w, "{}\t{}", r.report_id, r.mode)?;
        for q in QuestionId::ALL {
            write!(w, "\t{}", r.answers.get(&q).copied().unwrap_or(Verdict::Unparsed))?;
        }
        writeln!(w, "\t{}", r.label)?;
    }
    Ok(())
}
