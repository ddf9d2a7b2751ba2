use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use normcharts::classifier::{self, LinearModel, TrainConfig};
use normcharts::corpus::{self, SplitRatios, Subset};
use normcharts::growthchart::{
    self, age_grid, centile, compare_centiles, percentile_curves, read_centiles_csv, write_centiles_csv, FitOptions,
    FpSpec, GrowthTruth, DEFAULT_PROBS,
};
use normcharts::labeling::{self, LabelSource};
use normcharts::metrics::{self, ResultRow};
use normcharts::phenotype::{self, AggregationMethod, CohortSpec, Region};
use normcharts::pipeline::{self, Experiment, PipelineConfig, PipelineError};
use normcharts::report::{self, InputMode, SectionKind, Sex};
use normcharts::stepwise::{self, AnswerSource, FixtureSource, HttpSource, InquiryMode, InquiryOptions};
use normcharts::synth::{synth_reports, ReportSynthSpec};

#[derive(Parser)]
#[command(name = "normcharts", version, about = "Report triage and normative growth charts for pediatric brain MRI")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for run-experiment
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Corpus {
    #[arg(long)]
    reports: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a report JSONL file and write the normalized corpus
    Ingest {
        #[arg(long)]
        reports: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Resolve one label per report from annotations and keyword flags
    Label {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Stratified train/val/test assignment
    Split {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        ratios: Option<SplitRatios>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the n-gram classifier on the train subset of a seeded split
    Train {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        pos_weight: Option<f64>,
        #[arg(long)]
        mode: Option<InputMode>,
        /// Downsample the majority class before training
        #[arg(long)]
        balanced: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a trained classifier on one subset of a seeded split
    Eval {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "full")]
        mode: InputMode,
        #[arg(long, default_value = "test")]
        subset: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Direct or stepwise LLM inquiry over a report set
    Triage {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long, default_value = "stepwise")]
        mode: InquiryMode,
        #[arg(long, conflicts_with = "endpoint")]
        fixture: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "default")]
        model: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Keep sequences whose QC scores all reach the threshold
    Qc {
        #[arg(long)]
        phenotypes: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// QC plus per-session aggregation
    Aggregate {
        #[arg(long)]
        phenotypes: PathBuf,
        #[arg(long, default_value = "median_all_sequences")]
        method: AggregationMethod,
        #[arg(short, long)]
        output: PathBuf,
        /// Attrition report (CSV)
        #[arg(long)]
        drops: Option<PathBuf>,
    },
    /// Fit a growth model to aggregated sessions
    FitGrowth {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        region: Option<Region>,
        /// Restrict the search to these mu powers, e.g. "0.5" or "-2,1"
        #[arg(long = "fp", allow_hyphen_values = true)]
        candidates: Vec<FpSpec>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Centile score of every session under a model
    Centiles {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Percentile curves for one sex
    Curves {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sex: Sex,
        #[arg(long, default_value_t = 135.0)]
        min_days: f64,
        #[arg(long, default_value_t = 7100.0)]
        max_days: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Pearson correlation of two centile files over shared sessions
    Compare { a: PathBuf, b: PathBuf },
    /// 2.5/50/97.5 curves for both sexes as CSV
    PlotData {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(short, long)]
        output_dir: PathBuf,
    },
    /// Run a named experiment, or `all`
    RunExperiment { name: String },
    /// Write a synthetic report corpus and annotations
    SynthReports {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(short, long)]
        output_dir: PathBuf,
    },
    /// Write a synthetic per-sequence phenotype table
    SynthCohort {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        scanners: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.into(), source })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), PipelineError> {
    w.flush().map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn with_corpus(mut cfg: PipelineConfig, corpus: &Corpus) -> PipelineConfig {
    if corpus.reports.is_some() {
        cfg.paths.reports = corpus.reports.clone();
    }
    if corpus.annotations.is_some() {
        cfg.paths.annotations = corpus.annotations.clone();
    }
    cfg
}

type SplitCorpus = (Vec<report::Report>, BTreeMap<String, labeling::Label>, corpus::SplitAssignment);

fn seeded_split(cfg: &PipelineConfig, ratios: SplitRatios) -> Result<SplitCorpus, PipelineError> {
    let (reports, labels) = pipeline::labeled_corpus(cfg)?;
    let assignment = corpus::split(&reports, &labels, cfg.seeds[0], ratios)?;
    Ok((reports, labels, assignment))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    match cli.command {
        Command::Ingest { reports, output } => {
            let parsed = pipeline::load_reports(&reports)?;
            let with_impression = parsed.iter().filter(|r| r.section(SectionKind::Impression).is_some()).count();
            let mut w = create(&output)?;
            report::write_reports_jsonl(&mut w, &parsed)?;
            finish(w, &output)?;
            eprintln!("{} reports, {with_impression} with an impression section", parsed.len());
        }
        Command::Label { corpus, output } => {
            let cfg = with_corpus(cfg, &corpus);
            let reports = pipeline::load_reports(cfg.paths.reports.as_deref().ok_or_else(missing("--reports"))?)?;
            let annotations = match &cfg.paths.annotations {
                Some(p) => pipeline::load_annotations(p)?,
                None => Vec::new(),
            };
            let resolved = labeling::resolve_labels(&reports, &annotations)?;
            let mut w = create(&output)?;
            let io = |source| PipelineError::Io { path: output.clone(), source };
            writeln!(w, "report_id,label,source").map_err(io)?;
            for (id, (label, source)) in &resolved {
                let source = match source {
                    LabelSource::Annotation => "annotation",
                    LabelSource::Keyword => "keyword",
                };
                writeln!(w, "{id},{label},{source}").map_err(io)?;
            }
            finish(w, &output)?;
            eprintln!("{} of {} reports labeled", resolved.len(), reports.len());
        }
        Command::Split { corpus, ratios, output } => {
            let cfg = with_corpus(cfg, &corpus);
            let ratios = match ratios {
                Some(r) => r,
                None => cfg.split_ratios()?,
            };
            let (_, _, assignment) = seeded_split(&cfg, ratios)?;
            let mut w = create(&output)?;
            assignment.write_csv(&mut w).map_err(|source| PipelineError::Io { path: output.clone(), source })?;
            finish(w, &output)?;
            let (a, b, c) = assignment.counts();
            eprintln!("train {a}, val {b}, test {c}");
        }
        Command::Train { corpus, pos_weight, mode, balanced, output } => {
            let cfg = with_corpus(cfg, &corpus);
            let (reports, labels, assignment) = seeded_split(&cfg, cfg.split_ratios()?)?;
            let seed = cfg.seeds[0];
            let mut ids = assignment.ids(Subset::Train);
            if balanced {
                ids = corpus::balance(&ids, &labels, seed)?;
            }
            let by_id: BTreeMap<&str, &report::Report> = reports.iter().map(|r| (r.id.as_str(), r)).collect();
            let picked: Vec<_> = ids.iter().map(|id| by_id[id.as_str()]).collect();
            let mode = mode.unwrap_or(cfg.train.input_mode);
            let (examples, dropped) = pipeline::examples_for(&picked, &labels, mode);
            if !dropped.is_empty() {
                log::warn!("{} training reports lack the {mode} section", dropped.len());
            }
            let default_weight = if balanced { cfg.balanced_pos_weight } else { cfg.train.pos_weight };
            let tcfg =
                TrainConfig { seed, input_mode: mode, pos_weight: pos_weight.unwrap_or(default_weight), ..cfg.train };
            let (model, rep) = classifier::train(&examples, &tcfg, &cfg.features)?;
            let mut w = create(&output)?;
            model.write_to(&mut w)?;
            finish(w, &output)?;
            eprintln!("trained on {} reports, final loss {:.6}", examples.len(), rep.final_loss);
        }
        Command::Eval { corpus, model, mode, subset, output } => {
            let cfg = with_corpus(cfg, &corpus);
            let subset = match subset.as_str() {
                "train" => Subset::Train,
                "val" => Subset::Val,
                "test" => Subset::Test,
                other => return Err(PipelineError::Config(format!("unknown subset '{other}'"))),
            };
            let model = LinearModel::read_from(open(&model)?)?;
            let (reports, labels, assignment) = seeded_split(&cfg, cfg.split_ratios()?)?;
            let by_id: BTreeMap<&str, &report::Report> = reports.iter().map(|r| (r.id.as_str(), r)).collect();
            let picked: Vec<_> = assignment.ids(subset).iter().map(|id| by_id[id.as_str()]).collect();
            let (examples, _) = pipeline::examples_for(&picked, &labels, mode);
            let result = pipeline::evaluate_model(&model, &examples)?;
            let rows = [ResultRow {
                model: "classifier".into(),
                experiment: "eval".into(),
                distribution: mode.to_string(),
                eval_set: subset.to_string(),
                seed: cfg.seeds[0],
                result,
            }];
            write_rows(output.as_deref(), &rows)?;
        }
        Command::Triage { corpus, mode, fixture, endpoint, model, output } => {
            let cfg = with_corpus(cfg, &corpus);
            let reports = pipeline::load_reports(cfg.paths.reports.as_deref().ok_or_else(missing("--reports"))?)?;
            let source: Box<dyn AnswerSource> = match (fixture, endpoint) {
                (Some(f), _) => Box::new(FixtureSource::from_tsv(open(&f)?)?),
                (None, Some(url)) => {
                    Box::new(HttpSource::from_env(url, model, Duration::from_secs(cfg.llm.timeout_secs)))
                }
                (None, None) => pipeline::answer_source(&cfg)?,
            };
            let opts = InquiryOptions { retries: cfg.llm.retries };
            let records: Vec<_> =
                reports.iter().map(|r| stepwise::run_inquiry(r, mode, source.as_ref(), &opts)).collect();
            let mut w = create(&output)?;
            stepwise::write_records_tsv(&mut w, &records)
                .map_err(|source| PipelineError::Io { path: output.clone(), source })?;
            finish(w, &output)?;
            if let Some(gold) = &cfg.paths.annotations {
                let labels = labeling::resolve_labels(&reports, &pipeline::load_annotations(gold)?)?
                    .into_iter()
                    .map(|(k, (l, _))| (k, l))
                    .collect();
                let result = stepwise::evaluate_inquiry(&records, &labels)?;
                let rows = [ResultRow {
                    model: "llm".into(),
                    experiment: "triage".into(),
                    distribution: mode.to_string(),
                    eval_set: "gold".into(),
                    seed: cfg.seeds[0],
                    result,
                }];
                write_rows(None, &rows)?;
            }
        }
        Command::Qc { phenotypes, output } => {
            let records = pipeline::load_phenotypes(&phenotypes)?;
            let kept = phenotype::qc_filter(&records)?;
            let mut w = create(&output)?;
            phenotype::write_phenotypes_csv(&mut w, &kept)?;
            finish(w, &output)?;
            eprintln!("{} of {} sequences pass QC", kept.len(), records.len());
        }
        Command::Aggregate { phenotypes, method, output, drops } => {
            let records = pipeline::load_phenotypes(&phenotypes)?;
            let (sessions, attrition) = phenotype::aggregate_cohort(&records, method)?;
            let mut w = create(&output)?;
            phenotype::write_sessions_csv(&mut w, &sessions)?;
            finish(w, &output)?;
            if let Some(path) = drops {
                let mut w = create(&path)?;
                attrition.write_csv(&mut w)?;
                finish(w, &path)?;
            }
            eprintln!(
                "{} sessions in, {} out ({} dropped)",
                attrition.input_sessions,
                attrition.output_sessions,
                attrition.dropped.len()
            );
        }
        Command::FitGrowth { sessions, region, candidates, output } => {
            let sessions = phenotype::read_sessions_csv(open(&sessions)?)?;
            let opts = FitOptions {
                seed: cfg.seeds[0],
                candidates: if candidates.is_empty() { cfg.growth.fit.candidates.clone() } else { candidates },
                ..cfg.growth.fit.clone()
            };
            let model = growthchart::fit(&sessions, region.unwrap_or(cfg.growth.region), &opts)?;
            if !model.converged {
                log::warn!("optimizer did not reach tolerance (max gradient {:.2e})", model.grad_max);
            }
            pipeline::write_model(&output, &model)?;
            eprintln!("selected {} (BIC {:.2}, nu {:.3})", model.fp_mu, model.bic, model.nu);
        }
        Command::Centiles { model, sessions, output } => {
            let model = pipeline::read_model(&model)?;
            let sessions = phenotype::read_sessions_csv(open(&sessions)?)?;
            let rows = sessions
                .iter()
                .map(|s| Ok((s.session_id.clone(), centile(&model, s)?)))
                .collect::<Result<Vec<_>, growthchart::GrowthError>>()?;
            let mut w = create(&output)?;
            write_centiles_csv(&mut w, &rows)?;
            finish(w, &output)?;
        }
        Command::Curves { model, sex, min_days, max_days, points, output } => {
            let model = pipeline::read_model(&model)?;
            let rows = percentile_curves(&model, &age_grid(min_days, max_days, points), sex, &DEFAULT_PROBS)?;
            let mut w = create(&output)?;
            growthchart::write_curves_csv(&mut w, &DEFAULT_PROBS, &rows)?;
            finish(w, &output)?;
        }
        Command::Compare { a, b } => {
            let a = read_centiles_csv(open(&a)?)?;
            let b: BTreeMap<String, f64> = read_centiles_csv(open(&b)?)?.into_iter().collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = a.iter().filter_map(|(id, x)| b.get(id).map(|y| (*x, *y))).unzip();
            let r = compare_centiles(&xs, &ys)?;
            println!("n={} r={r:.6}", xs.len());
        }
        Command::PlotData { model, points, output_dir } => {
            let m = pipeline::read_model(&model)?;
            let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let g = &cfg.growth;
            pipeline::write_plot_data(&output_dir, stem, &m, &age_grid(g.age_min_days, g.age_max_days, points))?;
        }
        Command::RunExperiment { name } => {
            let root = cli.out.or(cfg.paths.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            let experiments: Vec<Experiment> =
                if name == "all" { Experiment::ALL.to_vec() } else { vec![name.parse()?] };
            for exp in experiments {
                let out = pipeline::run_experiment(exp, &cfg, &root)?;
                println!("{exp}: {}", out.dir.display());
                if let Some(r) = out.centile_r {
                    println!("centile pearson r = {r:.6}");
                }
            }
        }
        Command::SynthReports { n, output_dir } => {
            let spec = ReportSynthSpec { n, seed: cfg.seeds[0], ..Default::default() };
            let (reports, annotations) = synth_reports(&spec)?;
            let path = output_dir.join("reports.jsonl");
            let mut w = create(&path)?;
            report::write_reports_jsonl(&mut w, &reports)?;
            finish(w, &path)?;
            let path = output_dir.join("annotations.jsonl");
            let mut w = create(&path)?;
            for a in &annotations {
                serde_json::to_writer(&mut w, a)?;
                writeln!(w).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            }
            finish(w, &path)?;
        }
        Command::SynthCohort { n, scanners, output } => {
            let spec = CohortSpec { seed: cfg.seeds[0], n_sessions: n, n_scanners: scanners, ..Default::default() };
            let records = phenotype::synth_cohort(&spec, &GrowthTruth::default())?;
            let mut w = create(&output)?;
            phenotype::write_phenotypes_csv(&mut w, &records)?;
            finish(w, &output)?;
        }
    }
    Ok(())
}

fn missing(flag: &'static str) -> impl FnOnce() -> PipelineError {
    move || PipelineError::Config(format!("{flag} (or paths.reports in the config) is required"))
}

fn write_rows(path: Option<&Path>, rows: &[ResultRow]) -> Result<(), PipelineError> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            metrics::write_results_csv(&mut w, rows).map_err(|source| PipelineError::Io { path: p.into(), source })?;
            finish(w, p)
        }
        None => metrics::write_results_csv(std::io::stdout().lock(), rows)
            .map_err(|source| PipelineError::Io { path: "<stdout>".into(), source }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
