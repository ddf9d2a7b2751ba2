//! Experiment driver: config, run directories and the six named protocols.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, ClassifierError, FeatureConfig, LinearModel, TrainConfig};
use crate::corpus::{self, seeded_rng, CorpusError, SplitRatios, Subset, RNG_ALGORITHM};
use crate::growthchart::{
    self, age_grid, centile, compare_centiles, percentile_curves, FitOptions, GrowthError, GrowthModel, DEFAULT_PROBS,
};
use crate::labeling::{self, Label, LabelError};
use crate::metrics::{self, EvalResult, MetricsError, ResultRow};
use crate::phenotype::{self, AggregationMethod, PhenotypeError, Region, SessionPhenotype};
use crate::report::{self, compose_input, InputMode, Report, ReportError, Sex};
use crate::stepwise::{self, AnswerSource, FixtureSource, HttpSource, InquiryMode, InquiryOptions, StepwiseError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Io { .. } => 3,
            PipelineError::Numerical(_) => 4,
        }
    }

    fn context(self, what: &str) -> Self {
        match self {
            PipelineError::Config(m) => PipelineError::Config(format!("{what}: {m}")),
            PipelineError::Data(m) => PipelineError::Data(format!("{what}: {m}")),
            PipelineError::Numerical(m) => PipelineError::Numerical(format!("{what}: {m}")),
            io => io,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(ReportError, LabelError, CorpusError, MetricsError, StepwiseError, csv::Error, serde_json::Error);

impl From<ClassifierError> for PipelineError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Divergence { .. } => PipelineError::Numerical(e.to_string()),
            ClassifierError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<GrowthError> for PipelineError {
    fn from(e: GrowthError) -> Self {
        match e {
            GrowthError::InvalidParams(_) | GrowthError::DegenerateInput(_) | GrowthError::DomainError(_) => {
                PipelineError::Numerical(e.to_string())
            }
            GrowthError::InvalidSpec(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PhenotypeError> for PipelineError {
    fn from(e: PhenotypeError) -> Self {
        match e {
            PhenotypeError::Growth(g) => g.into(),
            PhenotypeError::InvalidSpec(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub reports: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub phenotypes: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthConfig {
    pub region: Region,
    pub method: AggregationMethod,
    /// Share of the union cohort present in both subsets.
    pub shared_fraction: f64,
    pub curve_points: usize,
    pub age_min_days: f64,
    pub age_max_days: f64,
    pub fit: FitOptions,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            region: Region::CorticalGM,
            method: AggregationMethod::MedianAllSequences,
            shared_fraction: 0.92,
            curve_points: 50,
            age_min_days: 135.0,
            age_max_days: 7100.0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self { endpoint: None, model: "default".into(), timeout_secs: 60, retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Vec<u64>,
    pub ratios: String,
    pub cutoff_year: Option<i32>,
    pub holdout_site: Option<String>,
    /// Positive-class weight used when training on the balanced subset.
    pub balanced_pos_weight: f64,
    pub paths: PathsConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub growth: GrowthConfig,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            ratios: "0.8,0.1,0.1".into(),
            cutoff_year: None,
            holdout_site: None,
            balanced_pos_weight: 1.0,
            paths: PathsConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            growth: GrowthConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let p = &mut cfg.paths;
            for slot in [&mut p.reports, &mut p.annotations, &mut p.phenotypes, &mut p.fixtures, &mut p.output_dir] {
                if let Some(v) = slot.as_mut() {
                    if v.is_relative() {
                        *v = base.join(&*v);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::Config("seeds: at least one seed required".into()));
        }
        self.split_ratios()?;
        self.train.validate().map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        self.features.validate().map_err(|e| PipelineError::Config(format!("features: {e}")))?;
        if !(self.balanced_pos_weight > 0.0) {
            return Err(PipelineError::Config("balanced_pos_weight must be positive".into()));
        }
        let g = &self.growth;
        if !(g.shared_fraction > 0.0 && g.shared_fraction <= 1.0) {
            return Err(PipelineError::Config("growth.shared_fraction must lie in (0, 1]".into()));
        }
        if !(g.age_min_days > 0.0 && g.age_min_days < g.age_max_days) || g.curve_points < 2 {
            return Err(PipelineError::Config("growth age range or curve_points invalid".into()));
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> Result<SplitRatios, PipelineError> {
        self.ratios.parse().map_err(|e: CorpusError| PipelineError::Config(format!("ratios: {e}")))
    }

    fn require<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, PipelineError> {
        let p = value.as_deref().ok_or_else(|| PipelineError::Config(format!("paths.{field} is required")))?;
        if !p.exists() {
            return Err(PipelineError::Config(format!("paths.{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Exp1Balanced,
    Exp2Weighted,
    Exp3Ood,
    Exp4Impression,
    Exp5Stepwise,
    Exp6Growthcharts,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Exp1Balanced,
        Experiment::Exp2Weighted,
        Experiment::Exp3Ood,
        Experiment::Exp4Impression,
        Experiment::Exp5Stepwise,
        Experiment::Exp6Growthcharts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Exp1Balanced => "exp1_balanced",
            Experiment::Exp2Weighted => "exp2_weighted",
            Experiment::Exp3Ood => "exp3_ood",
            Experiment::Exp4Impression => "exp4_impression",
            Experiment::Exp5Stepwise => "exp5_stepwise",
            Experiment::Exp6Growthcharts => "exp6_growthcharts",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    experiment: &'a str,
    started: String,
    rng: &'a str,
    config: &'a PipelineConfig,
}

/// Creates `<root>/<name>_<timestamp>`, adding a counter on collision.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    for k in 0.. {
        let dir = if k == 0 { root.join(format!("{name}_{stamp}")) } else { root.join(format!("{name}_{stamp}_{k}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

pub fn load_reports(path: &Path) -> Result<Vec<Report>, PipelineError> {
    report::read_reports_jsonl(open(path)?).map_err(PipelineError::from)
}

pub fn load_annotations(path: &Path) -> Result<Vec<labeling::AnnotationSet>, PipelineError> {
    Ok(labeling::read_annotations_jsonl(open(path)?)?)
}

pub fn load_phenotypes(path: &Path) -> Result<Vec<phenotype::PhenotypeRecord>, PipelineError> {
    Ok(phenotype::read_phenotypes_csv(open(path)?)?)
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub centile_r: Option<f64>,
}

/// Runs one named experiment into a fresh directory under `out_root`.
pub fn run_experiment(exp: Experiment, cfg: &PipelineConfig, out_root: &Path) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let dir = create_run_dir(out_root, exp.name())?;
    let manifest = RunManifest {
        experiment: exp.name(),
        started: chrono::Utc::now().to_rfc3339(),
        rng: RNG_ALGORITHM,
        config: cfg,
    };
    let mut echo = create(&dir.join("config.toml"))?;
    echo.write_all(toml::to_string(&manifest).expect("manifest serializes").as_bytes()).map_err(io_err(&dir))?;
    echo.flush().map_err(io_err(&dir))?;
    drop(echo);

    let run = || -> Result<RunOutput, PipelineError> {
        let (rows, centile_r) = match exp {
            Experiment::Exp1Balanced | Experiment::Exp2Weighted | Experiment::Exp3Ood | Experiment::Exp4Impression => {
                (classifier_experiment(exp, cfg, &dir)?, None)
            }
            Experiment::Exp5Stepwise => (stepwise_experiment(cfg, &dir)?, None),
            Experiment::Exp6Growthcharts => (Vec::new(), Some(growth_experiment(cfg, &dir)?)),
        };
        if !rows.is_empty() {
            let path = dir.join("metrics.csv");
            let mut w = create(&path)?;
            metrics::write_results_csv(&mut w, &rows).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
        Ok(RunOutput { dir: dir.clone(), rows, centile_r })
    };
    run().map_err(|e| e.context(exp.name()))
}

/// Labeled reports: annotations first, keyword flag as fallback.
pub fn labeled_corpus(cfg: &PipelineConfig) -> Result<(Vec<Report>, BTreeMap<String, Label>), PipelineError> {
    let reports = load_reports(cfg.require("reports", &cfg.paths.reports)?)?;
    let annotations = match &cfg.paths.annotations {
        Some(_) => load_annotations(cfg.require("annotations", &cfg.paths.annotations)?)?,
        None => Vec::new(),
    };
    let resolved = labeling::resolve_labels(&reports, &annotations)?;
    let labels: BTreeMap<String, Label> = resolved.into_iter().map(|(k, (l, _))| (k, l)).collect();
    let labeled: Vec<Report> = reports.into_iter().filter(|r| labels.contains_key(&r.id)).collect();
    if labeled.is_empty() {
        return Err(PipelineError::Data("no labeled reports".into()));
    }
    Ok((labeled, labels))
}

/// Training or evaluation pairs; reports without the requested section are
/// returned separately.
pub fn examples_for(
    reports: &[&Report],
    labels: &BTreeMap<String, Label>,
    mode: InputMode,
) -> (Vec<(String, Label)>, Vec<String>) {
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for r in reports {
        match compose_input(r, mode) {
            Ok(text) => out.push((text.to_string(), labels[&r.id])),
            Err(_) => dropped.push(r.id.clone()),
        }
    }
    (out, dropped)
}

pub fn evaluate_model(model: &LinearModel, examples: &[(String, Label)]) -> Result<EvalResult, PipelineError> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut gold = Vec::with_capacity(examples.len());
    for (text, label) in examples {
        preds.push(model.classify(text)?);
        gold.push(*label);
    }
    Ok(metrics::confusion(&preds, &gold)?)
}

struct SeedRun {
    rows: Vec<ResultRow>,
    models: Vec<(String, Vec<u8>)>,
    dropped: Vec<(String, String)>,
    split_csv: Vec<u8>,
}

fn classifier_experiment(exp: Experiment, cfg: &PipelineConfig, dir: &Path) -> Result<Vec<ResultRow>, PipelineError> {
    let cutoff = match exp {
        Experiment::Exp3Ood => {
            Some(cfg.cutoff_year.ok_or_else(|| PipelineError::Config("cutoff_year is required".into()))?)
        }
        _ => None,
    };
    let (reports, labels) = labeled_corpus(cfg)?;
    let ratios = cfg.split_ratios()?;
    let (pool, ood): (Vec<&Report>, Vec<&Report>) = if let Some(cutoff) = cutoff {
        corpus::ood_partition(&reports, cutoff, cfg.holdout_site.as_deref())
    } else {
        (reports.iter().collect(), Vec::new())
    };
    if pool.is_empty() {
        return Err(PipelineError::Data("no in-distribution reports".into()));
    }
    let pool_owned: Vec<Report> = pool.iter().map(|r| (*r).clone()).collect();
    let by_id: BTreeMap<&str, &Report> = pool.iter().map(|r| (r.id.as_str(), *r)).collect();

    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRun, PipelineError> {
            let assignment = corpus::split(&pool_owned, &labels, seed, ratios)?;
            let mut split_csv = Vec::new();
            assignment.write_csv(&mut split_csv).expect("in-memory write");
            let train_ids = assignment.ids(Subset::Train);
            let test_ids = assignment.ids(Subset::Test);
            let pick = |ids: &[String]| ids.iter().map(|id| by_id[id.as_str()]).collect::<Vec<_>>();
            let variants: Vec<(&str, InputMode, Vec<String>, f64)> = match exp {
                Experiment::Exp1Balanced => {
                    let balanced = corpus::balance(&train_ids, &labels, seed)?;
                    vec![("balanced", cfg.train.input_mode, balanced, cfg.balanced_pos_weight)]
                }
                Experiment::Exp2Weighted | Experiment::Exp3Ood => {
                    vec![("weighted", cfg.train.input_mode, train_ids.clone(), cfg.train.pos_weight)]
                }
                Experiment::Exp4Impression => vec![
                    ("impression", InputMode::Impression, train_ids.clone(), cfg.train.pos_weight),
                    ("full", InputMode::Full, train_ids.clone(), cfg.train.pos_weight),
                ],
                _ => unreachable!("classifier experiments only"),
            };
            let mut run = SeedRun { rows: Vec::new(), models: Vec::new(), dropped: Vec::new(), split_csv };
            for (dist, mode, ids, pos_weight) in variants {
                let (train_ex, dropped) = examples_for(&pick(&ids), &labels, mode);
                run.dropped.extend(dropped.into_iter().map(|id| (id, format!("{dist}: missing section"))));
                let tcfg = TrainConfig { seed, pos_weight, input_mode: mode, ..cfg.train };
                let (model, _) = classifier::train(&train_ex, &tcfg, &cfg.features)?;
                let mut eval_sets = vec![("test", pick(&test_ids))];
                if exp == Experiment::Exp3Ood {
                    eval_sets.push(("ood", ood.clone()));
                }
                for (eval_name, set) in eval_sets {
                    let (ex, dropped) = examples_for(&set, &labels, mode);
                    run.dropped
                        .extend(dropped.into_iter().map(|id| (id, format!("{dist}/{eval_name}: missing section"))));
                    if ex.is_empty() {
                        return Err(PipelineError::Data(format!("evaluation set {eval_name} is empty")));
                    }
                    run.rows.push(ResultRow {
                        model: "classifier".into(),
                        experiment: exp.name().into(),
                        distribution: dist.into(),
                        eval_set: eval_name.into(),
                        seed,
                        result: evaluate_model(&model, &ex)?,
                    });
                }
                run.models.push((format!("{dist}_seed{seed}.nclm"), model.to_bytes()));
            }
            Ok(run)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut drops = BTreeMap::new();
    for (run, seed) in runs.into_iter().zip(&cfg.seeds) {
        rows.extend(run.rows);
        for (name, bytes) in run.models {
            let path = dir.join("models").join(name);
            let mut w = create(&path)?;
            w.write_all(&bytes).map_err(io_err(&path))?;
        }
        let path = dir.join("splits").join(format!("seed{seed}.csv"));
        create(&path)?.write_all(&run.split_csv).map_err(io_err(&path))?;
        drops.extend(run.dropped);
    }
    // rows grouped by distribution then eval set, seeds in config order
    rows.sort_by(|a, b| (&a.distribution, &a.eval_set).cmp(&(&b.distribution, &b.eval_set)));
    write_drops(dir, &drops)?;
    Ok(rows)
}

fn write_drops(dir: &Path, drops: &BTreeMap<String, String>) -> Result<(), PipelineError> {
    let path = dir.join("drops.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["id", "reason"])?;
    for (id, reason) in drops {
        w.write_record([id, reason])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Answer source from config: fixture file first, then HTTP endpoint.
pub fn answer_source(cfg: &PipelineConfig) -> Result<Box<dyn AnswerSource>, PipelineError> {
    if cfg.paths.fixtures.is_some() {
        let path = cfg.require("fixtures", &cfg.paths.fixtures)?;
        return Ok(Box::new(FixtureSource::from_tsv(open(path)?)?));
    }
    match &cfg.llm.endpoint {
        Some(url) => Ok(Box::new(HttpSource::from_env(
            url.clone(),
            cfg.llm.model.clone(),
            Duration::from_secs(cfg.llm.timeout_secs),
        ))),
        None => Err(PipelineError::Config("paths.fixtures or llm.endpoint is required".into())),
    }
}

fn stepwise_experiment(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<ResultRow>, PipelineError> {
    let (reports, labels) = labeled_corpus(cfg)?;
    let source = answer_source(cfg)?;
    let opts = InquiryOptions { retries: cfg.llm.retries };
    let seed = cfg.seeds[0];
    let mut rows = Vec::new();
    for (mode, name) in [(InquiryMode::Direct, "direct"), (InquiryMode::Stepwise, "stepwise")] {
        let records: Vec<_> =
            reports.par_iter().map(|r| stepwise::run_inquiry(r, mode, source.as_ref(), &opts)).collect();
        let path = dir.join(format!("answers_{name}.tsv"));
        let mut w = create(&path)?;
        stepwise::write_records_tsv(&mut w, &records).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        rows.push(ResultRow {
            model: "llm".into(),
            experiment: Experiment::Exp5Stepwise.name().into(),
            distribution: name.into(),
            eval_set: "edge_cases".into(),
            seed,
            result: stepwise::evaluate_inquiry(&records, &labels)?,
        });
    }
    Ok(rows)
}

/// Two overlapping subsets whose intersection is `shared_fraction` of the union.
pub fn overlapping_subsets(
    sessions: &[SessionPhenotype],
    shared_fraction: f64,
    seed: u64,
) -> (Vec<SessionPhenotype>, Vec<SessionPhenotype>) {
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_shared = (shared_fraction * sessions.len() as f64).round() as usize;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, &i) in order.iter().enumerate() {
        let s = sessions[i].clone();
        if k < n_shared {
            a.push(s.clone());
            b.push(s);
        } else if (k - n_shared).is_multiple_of(2) {
            a.push(s);
        } else {
            b.push(s);
        }
    }
    let by_id = |v: &mut Vec<SessionPhenotype>| v.sort_by(|x, y| x.session_id.cmp(&y.session_id));
    by_id(&mut a);
    by_id(&mut b);
    (a, b)
}

pub fn write_model(path: &Path, model: &GrowthModel) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    w.write_all(model.to_json()?.as_bytes()).map_err(io_err(path))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_model(path: &Path) -> Result<GrowthModel, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(GrowthModel::from_json(&text)?)
}

/// Writes 2.5/50/97.5 curves for both sexes to `<stem>_F.csv` and `<stem>_M.csv`.
pub fn write_plot_data(dir: &Path, stem: &str, model: &GrowthModel, grid: &[f64]) -> Result<(), PipelineError> {
    for sex in [Sex::F, Sex::M] {
        let rows = percentile_curves(model, grid, sex, &DEFAULT_PROBS)?;
        let path = dir.join(format!("{stem}_{sex}.csv"));
        let mut w = create(&path)?;
        growthchart::write_curves_csv(&mut w, &DEFAULT_PROBS, &rows)?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Comparison {
    region: Region,
    n_union: usize,
    n_a: usize,
    n_b: usize,
    n_shared: usize,
    fp_a: String,
    fp_b: String,
    converged_a: bool,
    converged_b: bool,
    pearson_r: f64,
}

fn growth_experiment(cfg: &PipelineConfig, dir: &Path) -> Result<f64, PipelineError> {
    let g = &cfg.growth;
    let records = load_phenotypes(cfg.require("phenotypes", &cfg.paths.phenotypes)?)?;
    let (sessions, attrition) = phenotype::aggregate_cohort(&records, g.method)?;
    {
        let path = dir.join("attrition.csv");
        let mut w = create(&path)?;
        attrition.write_csv(&mut w)?;
        w.flush().map_err(io_err(&path))?;
        let path = dir.join("attrition.json");
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &attrition)?;
        w.flush().map_err(io_err(&path))?;
    }
    let seed = cfg.seeds[0];
    let (a, b) = overlapping_subsets(&sessions, g.shared_fraction, seed);
    let opts = FitOptions { seed, ..g.fit.clone() };
    let model_a = growthchart::fit(&a, g.region, &opts)?;
    let model_b = growthchart::fit(&b, g.region, &opts)?;
    write_model(&dir.join("models").join("subset_a.json"), &model_a)?;
    write_model(&dir.join("models").join("subset_b.json"), &model_b)?;

    let mut ca = Vec::with_capacity(sessions.len());
    let mut cb = Vec::with_capacity(sessions.len());
    let path = dir.join("centiles.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["session_id", "centile_a", "centile_b"])?;
    for s in &sessions {
        let (x, y) = (centile(&model_a, s)?, centile(&model_b, s)?);
        w.write_record([s.session_id.as_str(), &format!("{x:.10}"), &format!("{y:.10}")])?;
        ca.push(x);
        cb.push(y);
    }
    w.flush().map_err(io_err(&path))?;
    let r = compare_centiles(&ca, &cb)?;

    let grid = age_grid(g.age_min_days, g.age_max_days, g.curve_points);
    write_plot_data(&dir.join("plot-data"), "subset_a", &model_a, &grid)?;
    write_plot_data(&dir.join("plot-data"), "subset_b", &model_b, &grid)?;

    let ids_a: std::collections::BTreeSet<&str> = a.iter().map(|s| s.session_id.as_str()).collect();
    let summary = Comparison {
        region: g.region,
        n_union: sessions.len(),
        n_a: a.len(),
        n_b: b.len(),
        n_shared: b.iter().filter(|s| ids_a.contains(s.session_id.as_str())).count(),
        fp_a: model_a.fp_mu.to_string(),
        fp_b: model_b.fp_mu.to_string(),
        converged_a: model_a.converged,
        converged_b: model_b.converged,
        pearson_r: r,
    };
    let path = dir.join("comparison.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.flush().map_err(io_err(&path))?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.seeds.len(), 5);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = PipelineConfig::from_toml_str("seeds = [7]\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.pos_weight, 10.0);
    }

    #[test]
    fn config_errors_are_config_class() {
        for text in ["seeds = []", "ratios = \"0.5,0.5,0.5\"", "bogus = 1", "[train]\nepochs = 0"] {
            let err = PipelineConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn missing_input_names_field() {
        let tmp = tempfile::tempdir().unwrap();
        let err = run_experiment(Experiment::Exp2Weighted, &PipelineConfig::default(), tmp.path()).unwrap_err();
        assert!(matches!(&err, PipelineError::Config(m) if m.contains("paths.reports")), "{err}");
        let cfg = PipelineConfig {
            paths: PathsConfig { phenotypes: Some(tmp.path().join("nope.csv")), ..Default::default() },
            ..Default::default()
        };
        let err = run_experiment(Experiment::Exp6Growthcharts, &cfg, tmp.path()).unwrap_err();
        assert!(matches!(&err, PipelineError::Config(m) if m.contains("paths.phenotypes")), "{err}");
    }

    #[test]
    fn experiment_names() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("exp7".parse::<Experiment>().is_err());
    }

    #[test]
    fn subsets_share_fraction() {
        let spec = phenotype::CohortSpec { n_sessions: 1000, ..Default::default() };
        let sessions = phenotype::synth_sessions(&spec, &growthchart::GrowthTruth::default()).unwrap();
        let (a, b) = overlapping_subsets(&sessions, 0.92, 3);
        let ids_a: std::collections::BTreeSet<_> = a.iter().map(|s| &s.session_id).collect();
        let shared = b.iter().filter(|s| ids_a.contains(&s.session_id)).count();
        assert_eq!(shared, 920);
        assert_eq!(a.len() + b.len() - shared, 1000);
        assert_eq!(a.len(), 960);
    }

    #[test]
    fn run_dirs_unique() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "x").unwrap();
        let b = create_run_dir(tmp.path(), "x").unwrap();
        assert_ne!(a, b);
    }
}
