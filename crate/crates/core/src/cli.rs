//! Command-line front end. Every subcommand writes its outputs plus a
//! `<subcommand>.manifest.json` into `--out-dir`.
//!
//! Exit codes: 0 success, 1 data error (JSON on stderr), 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::docgen::{self, Chi2Params, DocInputs, Stopwords};
use crate::embedstore::{self, AnnotationSet, CaptionSet, ContainerPaths, EmbeddingStore};
use crate::mathcore;
use crate::reviewsvc::{self, DecisionLog, ReviewConfig, ReviewService};
use crate::scanner::{self, Emit, FlagReport, ScanOptions};
use crate::tuner::{self, InitMode, LabeledSet, PromptModel, RatedSet, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "q16",
    version,
    about = "Flag and document potentially inappropriate images from embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tune the two prompt embeddings on labeled or rated images.
    Train(TrainArgs),
    /// Cross-validate training, optionally over training-set fractions.
    Eval(EvalArgs),
    /// Score a dataset and write the flag report.
    Scan(ScanArgs),
    /// Build the datasheet and word clouds from a flag report.
    Document(DocumentArgs),
    /// Run the local review service.
    Serve(ServeArgs),
    /// Project embeddings onto their first two principal components.
    Pca(PcaArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    /// Rated images, one `{"id", "rating"}` per line.
    #[arg(long, required_unless_present = "labels", conflicts_with = "labels")]
    pub ratings: Option<PathBuf>,
    /// Binary labels, one `{"id", "label"}` per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Ratings strictly below this are labeled inappropriate.
    #[arg(long, default_value_t = tuner::DEFAULT_NEG_THRESHOLD)]
    pub neg_threshold: f64,
    /// Ratings strictly above this are labeled non-inappropriate.
    #[arg(long, default_value_t = tuner::DEFAULT_POS_THRESHOLD)]
    pub pos_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, env = "Q16_SEED", default_value_t = tuner::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f64,
    /// class-mean, random-sphere or file=PATH
    #[arg(long, default_value = "class-mean")]
    pub init: InitMode,
    /// Skip re-normalizing prompt rows after each step.
    #[arg(long)]
    pub no_renormalize: bool,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            logit_scale: self.logit_scale,
            seed: self.seed,
            init_mode: self.init.clone(),
            renormalize: !self.no_renormalize,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Embedding container (`*.meta.json`).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Comma-separated training fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Flag when the inappropriate probability is strictly above this.
    #[arg(long, default_value_t = scanner::DEFAULT_DECISION_THRESHOLD)]
    pub threshold: f64,
    /// flagged-only or all
    #[arg(long, default_value = "flagged-only")]
    pub emit: Emit,
    /// Defaults to the embedding container's file stem.
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CloudArgs {
    /// Replaces the built-in stopword list; one word per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_terms: usize,
    #[arg(long, default_value_t = 2.0)]
    pub common_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
}

impl CloudArgs {
    fn params(&self) -> Chi2Params {
        Chi2Params {
            max_terms: self.max_terms,
            common_ratio: self.common_ratio,
            smoothing: self.smoothing,
        }
    }

    fn stopwords(&self) -> Result<Stopwords, CliError> {
        match &self.stopwords {
            Some(p) => Ok(Stopwords::load(p)?),
            None => Ok(Stopwords::builtin()),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DocumentArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Review decision log; missing file means nothing reviewed yet.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[command(flatten)]
    pub clouds: CloudArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Append-only decision log; created if absent.
    #[arg(long)]
    pub decisions: PathBuf,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8016")]
    pub bind: String,
    #[command(flatten)]
    pub clouds: CloudArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Optional labels added as a third CSV column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// A data error: stable kind plus message, printed as JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

/// Innermost variant name of a nested error enum, from its Debug form:
/// `Store(SizeMismatch { .. })` gives `SizeMismatch`.
fn variant_kind(debug: &str) -> String {
    let mut rest = debug;
    let mut last = "Error";
    loop {
        let end = rest
            .find(|c: char| !(c.is_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if end == 0 {
            break;
        }
        last = &rest[..end];
        match rest[end..].strip_prefix('(') {
            Some(tail) if tail.starts_with(|c: char| c.is_ascii_uppercase()) => rest = tail,
            _ => break,
        }
    }
    if last == "Io" {
        "IoFailure".into()
    } else {
        last.into()
    }
}

macro_rules! cli_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(variant_kind(&format!("{e:?}")), e.to_string())
            }
        }
    )*};
}

cli_error_from!(
    embedstore::StoreError,
    mathcore::MathError,
    tuner::TunerError,
    scanner::ScanError,
    docgen::DocError,
    reviewsvc::ReviewError,
    reviewsvc::LogError
);

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("IoFailure", format!("{}: {e}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    /// Input path to SHA-256 of its bytes (containers hash all three files).
    pub inputs: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub duration_secs: f64,
    pub outputs: Vec<String>,
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_error(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    inputs: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push((path.display().to_string(), file_sha256(path)?));
        Ok(())
    }

    fn container(&mut self, meta: &Path) -> Result<(), CliError> {
        let paths = ContainerPaths::from_meta(meta)?;
        for p in [&paths.meta, &paths.ids, &paths.payload] {
            self.input(p)?;
        }
        Ok(())
    }

    fn optional(&mut self, path: Option<&Path>) -> Result<(), CliError> {
        match path {
            Some(p) if p.exists() => self.input(p),
            _ => Ok(()),
        }
    }

    fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        println!("{}", path.display());
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, out_dir: &Path, config: &impl Serialize, seed: Option<u64>) -> Result<(), CliError> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            config: serde_json::to_value(config).expect("args serialize"),
            inputs: self.inputs,
            seed,
            tool_version: TOOL_VERSION.into(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = out_dir.join(format!("{}.manifest.json", self.subcommand));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_error(&path, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn load_labeled(args: &LabelArgs, run: &mut Run) -> Result<LabeledSet, CliError> {
    if let Some(p) = &args.labels {
        run.input(p)?;
        return Ok(LabeledSet::load(p)?);
    }
    let p = args.ratings.as_ref().expect("clap enforces one of ratings/labels");
    run.input(p)?;
    let rated = RatedSet::load(p)?;
    Ok(tuner::binarize(&rated, args.neg_threshold, args.pos_threshold)?)
}

fn init_input(init: &InitMode, run: &mut Run) -> Result<(), CliError> {
    if let InitMode::ProvidedFile(p) = init {
        if p.exists() {
            run.container(p)?;
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut run = Run::new("train");
    ensure_dir(&args.out_dir)?;
    run.container(&args.embeddings)?;
    let store = EmbeddingStore::load(&args.embeddings)?;
    let labeled = load_labeled(&args.labels, &mut run)?;
    let config = args.optim.config();
    config.validate()?;
    init_input(&config.init_mode, &mut run)?;
    let init = tuner::init_prompts(&config.init_mode, &labeled, &store, config.seed)?;
    let model = tuner::train(&labeled, &store, &config, init)?;
    run.write(args.out_dir.join("model.json"), model.to_json())?;
    run.finish(&args.out_dir, args, Some(config.seed))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut run = Run::new("eval");
    ensure_dir(&args.out_dir)?;
    run.container(&args.embeddings)?;
    let store = EmbeddingStore::load(&args.embeddings)?;
    let labeled = load_labeled(&args.labels, &mut run)?;
    let config = args.optim.config();
    init_input(&config.init_mode, &mut run)?;
    let cv = tuner::cross_validate(&labeled, &store, &config, args.k)?;
    let fewshot = if args.fractions.is_empty() {
        Vec::new()
    } else {
        tuner::fewshot_curve(&labeled, &store, &config, args.k, &args.fractions)?
    };
    let [non_inappropriate, inappropriate] = labeled.class_counts();
    let metrics = json!({
        "k": args.k,
        "seed": config.seed,
        "labels": { "non_inappropriate": non_inappropriate, "inappropriate": inappropriate },
        "cross_validation": cv,
        "fewshot": fewshot,
    });
    let mut text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    text.push('\n');
    run.write(args.out_dir.join("metrics.json"), text)?;
    run.finish(&args.out_dir, args, Some(config.seed))
}

fn dataset_name_from(meta: &Path) -> String {
    let name = meta.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    name.strip_suffix(".meta.json").unwrap_or(name).to_string()
}

fn cmd_scan(args: &ScanArgs) -> Result<(), CliError> {
    let mut run = Run::new("scan");
    ensure_dir(&args.out_dir)?;
    run.container(&args.embeddings)?;
    run.input(&args.model)?;
    let store = EmbeddingStore::load(&args.embeddings)?;
    let model = PromptModel::load(&args.model)?;
    let opts = ScanOptions {
        dataset_name: args
            .dataset_name
            .clone()
            .unwrap_or_else(|| dataset_name_from(&args.embeddings)),
        threshold: args.threshold,
        emit: args.emit,
        ..ScanOptions::default()
    };
    let report = scanner::scan(&store, &model, &opts)?;
    run.write(args.out_dir.join("report.jsonl"), report.to_bytes())?;
    run.finish(&args.out_dir, args, None)
}

fn load_side_inputs(
    annotations: Option<&Path>,
    captions: Option<&Path>,
) -> Result<(AnnotationSet, CaptionSet), CliError> {
    let a = match annotations {
        Some(p) => embedstore::load_annotations(p)?.records,
        None => AnnotationSet::default(),
    };
    let c = match captions {
        Some(p) => embedstore::load_captions(p)?.records,
        None => CaptionSet::default(),
    };
    Ok((a, c))
}

/// RFC 3339 generation time; honours `SOURCE_DATE_EPOCH` for reproducible output.
pub fn generation_timestamp() -> Result<String, CliError> {
    let secs = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v.trim().parse::<i64>().map_err(|_| {
            CliError::new(
                "InvalidEnvironment",
                format!("SOURCE_DATE_EPOCH {v:?} is not an integer"),
            )
        })?,
        Err(_) => chrono::Utc::now().timestamp(),
    };
    let t = chrono::DateTime::from_timestamp(secs, 0)
        .ok_or_else(|| CliError::new("InvalidEnvironment", format!("timestamp {secs} out of range")))?;
    Ok(t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

fn cmd_document(args: &DocumentArgs) -> Result<(), CliError> {
    let mut run = Run::new("document");
    ensure_dir(&args.out_dir)?;
    run.input(&args.report)?;
    run.optional(args.annotations.as_deref())?;
    run.optional(args.captions.as_deref())?;
    run.optional(args.decisions.as_deref())?;
    run.optional(args.clouds.stopwords.as_deref())?;
    let report = FlagReport::load(&args.report)?;
    let (annotations, captions) = load_side_inputs(args.annotations.as_deref(), args.captions.as_deref())?;
    let decisions = match &args.decisions {
        Some(p) => DecisionLog::replay(p)?,
        None => DecisionLog::new(),
    };
    let inputs = DocInputs {
        annotations: args.annotations.as_ref().map(|_| &annotations),
        captions: args.captions.as_ref().map(|_| &captions),
        decisions: Some(&decisions),
        stopwords: args.clouds.stopwords()?,
        params: args.clouds.params(),
    };
    let sheet = docgen::build_datasheet(&report, &inputs, &generation_timestamp()?)?;
    run.write(args.out_dir.join("datasheet.md"), docgen::render_markdown(&sheet))?;
    run.write(args.out_dir.join("datasheet.json"), docgen::render_json(&sheet))?;
    for cloud in sheet.clouds.iter() {
        run.write(
            args.out_dir.join(format!("cloud_{}.svg", cloud.kind.slug())),
            docgen::render_svg(cloud),
        )?;
    }
    run.finish(&args.out_dir, args, None)
}

fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let report = FlagReport::load(&args.report)?;
    let (annotations, captions) = load_side_inputs(args.annotations.as_deref(), args.captions.as_deref())?;
    let service = ReviewService::open(ReviewConfig {
        report,
        annotations,
        captions,
        log_path: args.decisions.clone(),
        images_dir: args.images_dir.clone(),
        stopwords: args.clouds.stopwords()?,
        chi2: args.clouds.params(),
    })?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("ServerError", e.to_string()))?;
    rt.block_on(reviewsvc::serve(service, &args.bind))?;
    Ok(())
}

fn cmd_pca(args: &PcaArgs) -> Result<(), CliError> {
    let mut run = Run::new("pca");
    ensure_dir(&args.out_dir)?;
    run.container(&args.embeddings)?;
    let store = EmbeddingStore::load(&args.embeddings)?;
    let labels = match &args.labels {
        Some(p) => {
            run.input(p)?;
            let l = LabeledSet::load(p)?;
            Some(
                l.ids
                    .into_iter()
                    .zip(l.labels)
                    .collect::<std::collections::HashMap<_, _>>(),
            )
        }
        None => None,
    };
    let pca = mathcore::pca2(store.rows(), store.dim())?;
    let mut csv = String::from(if labels.is_some() {
        "id,pc1,pc2,label\n"
    } else {
        "id,pc1,pc2\n"
    });
    for (id, [a, b]) in store.ids().iter().zip(&pca.projections) {
        let _ = write!(csv, "{id},{a},{b}");
        if let Some(l) = &labels {
            let _ = write!(csv, ",{}", l.get(id).map(|v| v.to_string()).unwrap_or_default());
        }
        csv.push('\n');
    }
    run.write(args.out_dir.join("pca.csv"), csv)?;
    let config = json!({ "args": args, "explained_variance": pca.explained_variance });
    run.finish(&args.out_dir, &config, None)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Scan(a) => cmd_scan(a),
        Command::Document(a) => cmd_document(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Pca(a) => cmd_pca(a),
    }
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::new("UsageError", e.kind().to_string()).to_json());
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
