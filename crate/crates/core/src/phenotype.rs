//! Per-sequence volumetric phenotypes, QC exclusion and session aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::seeded_rng;
use crate::growthchart::{GrowthError, GrowthTruth};
use crate::report::Sex;

pub const QC_THRESHOLD: f64 = 0.65;

#[derive(Debug, Error)]
pub enum PhenotypeError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    InvalidValue { row: usize, message: String },
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    CorticalGM,
    SubcorticalGM,
    WhiteMatter,
    Ventricles,
    Cerebellum,
    TotalIntracranial,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::CorticalGM,
        Region::SubcorticalGM,
        Region::WhiteMatter,
        Region::Ventricles,
        Region::Cerebellum,
        Region::TotalIntracranial,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Region::CorticalGM => "vol_cortical_gm",
            Region::SubcorticalGM => "vol_subcortical_gm",
            Region::WhiteMatter => "vol_white_matter",
            Region::Ventricles => "vol_ventricles",
            Region::Cerebellum => "vol_cerebellum",
            Region::TotalIntracranial => "vol_tiv",
        }
    }

    /// Typical size relative to cortical grey matter; used by the synthesizer.
    fn relative_size(self) -> f64 {
        match self {
            Region::CorticalGM => 1.0,
            Region::SubcorticalGM => 0.1,
            Region::WhiteMatter => 0.8,
            Region::Ventricles => 0.04,
            Region::Cerebellum => 0.25,
            Region::TotalIntracranial => 2.6,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Region {
    type Err = PhenotypeError;

    /// Accepts the variant name (`CorticalGM`) or the column stem (`cortical_gm`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Region::ALL
            .into_iter()
            .find(|r| {
                r.to_string().eq_ignore_ascii_case(t)
                    || r.column().eq_ignore_ascii_case(t)
                    || r.column()[4..].eq_ignore_ascii_case(t)
            })
            .ok_or_else(|| PhenotypeError::Schema(format!("unknown region '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QcCategory {
    GeneralWhiteMatter,
    GeneralGreyMatter,
    GeneralCSF,
    Cerebellum,
    Brainstem,
    Thalamus,
    PutamenPallidum,
    HippocampusAmygdala,
}

impl QcCategory {
    pub const ALL: [QcCategory; 8] = [
        QcCategory::GeneralWhiteMatter,
        QcCategory::GeneralGreyMatter,
        QcCategory::GeneralCSF,
        QcCategory::Cerebellum,
        QcCategory::Brainstem,
        QcCategory::Thalamus,
        QcCategory::PutamenPallidum,
        QcCategory::HippocampusAmygdala,
    ];

    pub fn column(self) -> &'static str {
        match self {
            QcCategory::GeneralWhiteMatter => "qc_gwm",
            QcCategory::GeneralGreyMatter => "qc_ggm",
            QcCategory::GeneralCSF => "qc_gcsf",
            QcCategory::Cerebellum => "qc_cerebellum",
            QcCategory::Brainstem => "qc_brainstem",
            QcCategory::Thalamus => "qc_thalamus",
            QcCategory::PutamenPallidum => "qc_putamen_pallidum",
            QcCategory::HippocampusAmygdala => "qc_hippocampus_amygdala",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeRecord {
    pub session_id: String,
    pub sequence_id: String,
    pub scanner_id: String,
    pub age_days: u32,
    pub sex: Sex,
    pub is_mprage: bool,
    pub volumes: BTreeMap<Region, f64>,
    pub qc: BTreeMap<QcCategory, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    MprageOnly,
    #[default]
    MedianAllSequences,
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMethod::MprageOnly => "mprage_only",
            AggregationMethod::MedianAllSequences => "median_all_sequences",
        })
    }
}

impl FromStr for AggregationMethod {
    type Err = PhenotypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mprage_only" | "mprage" => Ok(AggregationMethod::MprageOnly),
            "median_all_sequences" | "median_all" | "all" => Ok(AggregationMethod::MedianAllSequences),
            other => Err(PhenotypeError::Schema(format!("unknown aggregation method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPhenotype {
    pub session_id: String,
    pub scanner_id: String,
    pub age_days: u32,
    pub sex: Sex,
    pub volumes: BTreeMap<Region, f64>,
    pub method: AggregationMethod,
}

impl SessionPhenotype {
    pub fn age_years(&self) -> f64 {
        f64::from(self.age_days) / 365.25
    }
}

/// Keeps records whose every QC score is at least the threshold.
pub fn qc_filter(records: &[PhenotypeRecord]) -> Result<Vec<PhenotypeRecord>, PhenotypeError> {
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        if qc_pass(r)? {
            kept.push(r.clone());
        }
    }
    Ok(kept)
}

pub fn qc_pass(record: &PhenotypeRecord) -> Result<bool, PhenotypeError> {
    let mut pass = true;
    for cat in QcCategory::ALL {
        let score = record.qc.get(&cat).ok_or_else(|| {
            PhenotypeError::Schema(format!("{}/{}: missing {}", record.session_id, record.sequence_id, cat.column()))
        })?;
        if *score < QC_THRESHOLD {
            pass = false;
        }
    }
    Ok(pass)
}

/// Median with the even-count midpoint convention. `None` for empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Collapses one session's QC-passing records. Session metadata comes from
/// the record with the smallest sequence id.
pub fn aggregate_session(records: &[PhenotypeRecord], method: AggregationMethod) -> Option<SessionPhenotype> {
    let used: Vec<&PhenotypeRecord> =
        records.iter().filter(|r| method == AggregationMethod::MedianAllSequences || r.is_mprage).collect();
    let first = used.iter().min_by(|a, b| a.sequence_id.cmp(&b.sequence_id))?;
    let mut volumes = BTreeMap::new();
    for region in Region::ALL {
        let vals: Vec<f64> = used.iter().filter_map(|r| r.volumes.get(&region).copied()).collect();
        if let Some(m) = median(&vals) {
            volumes.insert(region, m);
        }
    }
    Some(SessionPhenotype {
        session_id: first.session_id.clone(),
        scanner_id: first.scanner_id.clone(),
        age_days: first.age_days,
        sex: first.sex,
        volumes,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Qc,
    NoMprage,
}

impl fmt::Display for DropCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropCause::Qc => "qc",
            DropCause::NoMprage => "no_mprage",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttritionReport {
    pub input_records: usize,
    pub qc_passing_records: usize,
    pub input_sessions: usize,
    pub output_sessions: usize,
    pub dropped: BTreeMap<String, DropCause>,
}

impl AttritionReport {
    pub fn dropped_count(&self, cause: DropCause) -> usize {
        self.dropped.values().filter(|c| **c == cause).count()
    }

    pub fn balances(&self) -> bool {
        self.input_sessions == self.output_sessions + self.dropped.len()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PhenotypeError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["session_id", "cause"])?;
        for (id, cause) in &self.dropped {
            out.write_record([id.as_str(), &cause.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// QC filter then per-session aggregation, with a drop report.
/// Sessions are returned sorted by id.
pub fn aggregate_cohort(
    records: &[PhenotypeRecord],
    method: AggregationMethod,
) -> Result<(Vec<SessionPhenotype>, AttritionReport), PhenotypeError> {
    let mut by_session: BTreeMap<&str, (&PhenotypeRecord, Vec<PhenotypeRecord>)> = BTreeMap::new();
    let mut passing = 0;
    for r in records {
        let (first, kept) = by_session.entry(r.session_id.as_str()).or_insert((r, Vec::new()));
        if r.scanner_id != first.scanner_id || r.age_days != first.age_days || r.sex != first.sex {
            return Err(PhenotypeError::Schema(format!(
                "session {}: records disagree on scanner, age or sex",
                r.session_id
            )));
        }
        if qc_pass(r)? {
            passing += 1;
            kept.push(r.clone());
        }
    }
    let mut report = AttritionReport {
        input_records: records.len(),
        qc_passing_records: passing,
        input_sessions: by_session.len(),
        ..Default::default()
    };
    let mut sessions = Vec::new();
    for (id, (_, recs)) in by_session {
        if recs.is_empty() {
            report.dropped.insert(id.to_string(), DropCause::Qc);
            continue;
        }
        match aggregate_session(&recs, method) {
            Some(s) => sessions.push(s),
            None => {
                report.dropped.insert(id.to_string(), DropCause::NoMprage);
            }
        }
    }
    report.output_sessions = sessions.len();
    Ok((sessions, report))
}

fn header() -> Vec<&'static str> {
    let mut h = vec!["session_id", "sequence_id", "scanner_id", "age_days", "sex", "is_mprage"];
    h.extend(Region::ALL.iter().map(|r| r.column()));
    h.extend(QcCategory::ALL.iter().map(|c| c.column()));
    h
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "t" => Some(true),
        "false" | "0" | "no" | "f" => Some(false),
        _ => None,
    }
}

pub fn read_phenotypes_csv<R: Read>(reader: R) -> Result<Vec<PhenotypeRecord>, PhenotypeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| PhenotypeError::Schema(format!("missing column {name}")))
    };
    let idx: Vec<usize> = header().iter().map(|h| col(h)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let bad = |message: String| PhenotypeError::InvalidValue { row: line, message };
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let number = |k: usize| -> Result<f64, PhenotypeError> {
            field(k).parse::<f64>().map_err(|_| bad(format!("{} is not a number", header()[k])))
        };
        let age_days: u32 = field(3).parse().map_err(|_| bad("age_days must be a non-negative integer".into()))?;
        if age_days == 0 {
            return Err(bad("age_days must be positive".into()));
        }
        let sex = match Sex::from_str(field(4)) {
            Ok(Sex::Unknown) | Err(_) => return Err(bad(format!("sex '{}' is not M or F", field(4)))),
            Ok(s) => s,
        };
        let is_mprage = parse_bool(field(5)).ok_or_else(|| bad(format!("is_mprage '{}' is not boolean", field(5))))?;
        let mut volumes = BTreeMap::new();
        for (j, region) in Region::ALL.into_iter().enumerate() {
            let v = number(6 + j)?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{} must be positive and finite", region.column())));
            }
            volumes.insert(region, v);
        }
        let mut qc = BTreeMap::new();
        for (j, cat) in QcCategory::ALL.into_iter().enumerate() {
            let v = number(12 + j)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("{} must lie in [0, 1]", cat.column())));
            }
            qc.insert(cat, v);
        }
        out.push(PhenotypeRecord {
            session_id: field(0).to_string(),
            sequence_id: field(1).to_string(),
            scanner_id: field(2).to_string(),
            age_days,
            sex,
            is_mprage,
            volumes,
            qc,
        });
    }
    Ok(out)
}

pub fn write_phenotypes_csv<W: Write>(w: W, records: &[PhenotypeRecord]) -> Result<(), PhenotypeError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header())?;
    for r in records {
        let mut row = vec![
            r.session_id.clone(),
            r.sequence_id.clone(),
            r.scanner_id.clone(),
            r.age_days.to_string(),
            r.sex.to_string(),
            r.is_mprage.to_string(),
        ];
        for region in Region::ALL {
            row.push(r.volumes.get(&region).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        for cat in QcCategory::ALL {
            row.push(r.qc.get(&cat).map(|v| format!("{v:.4}")).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sessions_csv<W: Write>(w: W, sessions: &[SessionPhenotype]) -> Result<(), PhenotypeError> {
    let mut out = csv::Writer::from_writer(w);
    let mut h = vec!["session_id", "scanner_id", "age_days", "sex", "method"];
    h.extend(Region::ALL.iter().map(|r| r.column()));
    out.write_record(&h)?;
    for s in sessions {
        let mut row = vec![
            s.session_id.clone(),
            s.scanner_id.clone(),
            s.age_days.to_string(),
            s.sex.to_string(),
            s.method.to_string(),
        ];
        for region in Region::ALL {
            row.push(s.volumes.get(&region).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sessions_csv<R: Read>(reader: R) -> Result<Vec<SessionPhenotype>, PhenotypeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| pos(name).ok_or_else(|| PhenotypeError::Schema(format!("missing column {name}")));
    let (c_id, c_scanner, c_age, c_sex, c_method) =
        (need("session_id")?, need("scanner_id")?, need("age_days")?, need("sex")?, need("method")?);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |message: String| PhenotypeError::InvalidValue { row: i + 2, message };
        let age_days: u32 = row[c_age].parse().map_err(|_| bad("age_days must be an integer".into()))?;
        let sex = match Sex::from_str(&row[c_sex]) {
            Ok(Sex::Unknown) | Err(_) => return Err(bad("sex must be M or F".into())),
            Ok(s) => s,
        };
        let mut volumes = BTreeMap::new();
        for region in Region::ALL {
            let Some(c) = pos(region.column()) else { continue };
            if row[c].is_empty() {
                continue;
            }
            let v: f64 = row[c].parse().map_err(|_| bad(format!("{} is not a number", region.column())))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{} must be positive", region.column())));
            }
            volumes.insert(region, v);
        }
        out.push(SessionPhenotype {
            session_id: row[c_id].to_string(),
            scanner_id: row[c_scanner].to_string(),
            age_days,
            sex,
            volumes,
            method: row[c_method].parse()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub seed: u64,
    pub n_sessions: usize,
    pub n_scanners: usize,
    pub age_min_days: u32,
    pub age_max_days: u32,
    /// Probability that a sequence gets one QC score below threshold.
    pub qc_failure_fraction: f64,
    pub mprage_fraction: f64,
    pub max_sequences: usize,
    /// Standard deviation of the per-sequence log-scale jitter.
    pub jitter: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sessions: 500,
            n_scanners: 5,
            age_min_days: 135,
            age_max_days: 7100,
            qc_failure_fraction: 0.05,
            mprage_fraction: 0.8,
            max_sequences: 4,
            jitter: 0.01,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), PhenotypeError> {
        let bad = |m: &str| Err(PhenotypeError::InvalidSpec(m.to_string()));
        if self.n_sessions == 0 || self.n_scanners == 0 {
            return bad("n_sessions and n_scanners must be at least 1");
        }
        if self.age_min_days == 0 || self.age_min_days > self.age_max_days {
            return bad("age range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.qc_failure_fraction) || !(0.0..=1.0).contains(&self.mprage_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.max_sequences == 0 || !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("max_sequences must be at least 1 and jitter non-negative");
        }
        Ok(())
    }
}

pub fn scanner_name(index: usize) -> String {
    format!("scanner_{index:02}")
}

/// Simulates a cohort. The truth's region is drawn from the generalized
/// gamma model; other regions follow it by fixed size ratios.
pub fn synth_cohort(spec: &CohortSpec, truth: &GrowthTruth) -> Result<Vec<PhenotypeRecord>, PhenotypeError> {
    spec.validate()?;
    truth.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let mut out = Vec::new();
    for i in 0..spec.n_sessions {
        let age_days = rng.random_range(spec.age_min_days..=spec.age_max_days);
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let scanner = i % spec.n_scanners;
        let params = truth.params_at(f64::from(age_days) / 365.25, sex == Sex::M, scanner)?;
        let value = params.sample(&mut rng);
        let n_seq = rng.random_range(1..=spec.max_sequences);
        for j in 0..n_seq {
            let mut volumes = BTreeMap::new();
            let jitter = (spec.jitter * rng.sample::<f64, _>(StandardNormal)).exp();
            for region in Region::ALL {
                let ratio = region.relative_size() / truth.region.relative_size();
                volumes.insert(region, value * ratio * jitter);
            }
            let mut qc: BTreeMap<QcCategory, f64> =
                QcCategory::ALL.into_iter().map(|c| (c, rng.random_range(0.70..=1.0))).collect();
            if rng.random_bool(spec.qc_failure_fraction) {
                let cat = QcCategory::ALL[rng.random_range(0..QcCategory::ALL.len())];
                qc.insert(cat, rng.random_range(0.20..0.64));
            }
            out.push(PhenotypeRecord {
                session_id: format!("ses_{i:05}"),
                sequence_id: format!("seq_{j}"),
                scanner_id: scanner_name(scanner),
                age_days,
                sex,
                is_mprage: rng.random_bool(spec.mprage_fraction),
                volumes,
                qc,
            });
        }
    }
    Ok(out)
}

/// Draws `n` sessions directly, skipping the per-sequence layer.
pub fn synth_sessions(spec: &CohortSpec, truth: &GrowthTruth) -> Result<Vec<SessionPhenotype>, PhenotypeError> {
    spec.validate()?;
    truth.validate()?;
    let mut rng = seeded_rng(spec.seed);
    (0..spec.n_sessions)
        .map(|i| {
            let age_days = rng.random_range(spec.age_min_days..=spec.age_max_days);
            let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
            let scanner = i % spec.n_scanners;
            let params = truth.params_at(f64::from(age_days) / 365.25, sex == Sex::M, scanner)?;
            Ok(SessionPhenotype {
                session_id: format!("ses_{i:05}"),
                scanner_id: scanner_name(scanner),
                age_days,
                sex,
                volumes: BTreeMap::from([(truth.region, params.sample(&mut rng))]),
                method: AggregationMethod::MedianAllSequences,
            })
        })
        .collect()
}
