//! Command-line front end. Exit codes: 0 success, 2 usage, 3 data or I/O
//! error, 4 search finished without flipping the decision.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attributes::attribute_importance;
use crate::bundle::{load_bundle, Bundle};
use crate::document::{load_trace, save_report, save_trace, TraceDocument};
use crate::error::Error;
use crate::head::apply_edit;
use crate::metrics::{
    aggregate_report, clustering_accuracy, select_distractor_class, select_distractor_class_by_attributes, trace_metrics,
    Scope,
};
use crate::search::{find_counterfactual, ConstraintMode, SearchConfig};
use crate::semantic::{cluster_images, Normalization, DEFAULT_K_FRACTION, DEFAULT_TEMPERATURE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NO_FLIP: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "counterfact", version, about = "Semantically consistent counterfactual explanations")]
struct Cli {
    /// Worker threads for data-parallel scoring (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search a counterfactual for one query image and write its trace.
    Explain(ExplainArgs),
    /// Aggregate Near-KP, Same-KP and edit counts over a directory of traces.
    Evaluate(EvaluateArgs),
    /// Cluster all cell embeddings and score the clusters against keypoints.
    ClusterEval(ClusterEvalArgs),
    /// Add an attribute ranking for the first edit of a trace.
    AttrExplain(AttrExplainArgs),
    /// Pick a distractor class for every class.
    SelectPairs(SelectPairsArgs),
    /// Count head evaluations and time the first edit.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Soft,
    Hard,
    None,
}

impl From<ModeArg> for ConstraintMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Soft => ConstraintMode::Soft,
            ModeArg::Hard => ConstraintMode::Hard,
            ModeArg::None => ConstraintMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Pooled,
    PerImage,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, default_value_t = crate::search::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    tau: f64,
    /// Fraction of cell pairs kept by the similarity prefilter.
    #[arg(long, default_value_t = DEFAULT_K_FRACTION)]
    topk: f64,
    #[arg(long, value_enum, default_value = "soft")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "pooled")]
    normalization: NormArg,
    #[arg(long)]
    max_edits: Option<usize>,
    /// Allow a query cell to be replaced more than once.
    #[arg(long)]
    reuse_cells: bool,
    #[arg(long, default_value_t = crate::search::DEFAULT_HARD_CLUSTERS)]
    hard_clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            lambda: self.lambda,
            temperature: self.tau,
            k_fraction: self.topk,
            max_edits: self.max_edits,
            constraint_mode: self.mode.into(),
            normalization: match self.normalization {
                NormArg::Pooled => Normalization::Pooled,
                NormArg::PerImage => Normalization::PerImage,
            },
            reuse_cells: self.reuse_cells,
            hard_clusters: self.hard_clusters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    query: String,
    /// Explicit distractor image ids; the target class is the first one's class.
    #[arg(long = "distractor", num_args = 1.., conflicts_with = "distractor_class", required_unless_present = "distractor_class")]
    distractors: Vec<String>,
    /// Sample distractors from this class instead.
    #[arg(long)]
    distractor_class: Option<String>,
    #[arg(long, default_value_t = 1, requires = "distractor_class")]
    num_distractors: usize,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Single,
    All,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Directory of trace documents (`*.json`).
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    scope: ScopeArg,
    /// Keypoint neighbourhood radius in cells.
    #[arg(long, default_value_t = 0)]
    dilation: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterEvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttrExplainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 5)]
    topk_attrs: usize,
    /// Where to write the extended trace (default: overwrite the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairMethod {
    Confusion,
    Attributes,
}

#[derive(Debug, Args)]
struct SelectPairsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum, default_value = "confusion")]
    method: PairMethod,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    n_distractors: usize,
    #[arg(long, default_value_t = DEFAULT_K_FRACTION)]
    topk: f64,
    /// Query image (default: the first image in the bundle).
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Temperature(_) | Error::KFraction(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(usage(format!("cannot start {n} workers: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Explain(a) => explain(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ClusterEval(a) => cluster_eval(a),
        Command::AttrExplain(a) => attr_explain(a),
        Command::SelectPairs(a) => select_pairs(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> std::result::Result<Bundle, Failure> {
    let bundle = load_bundle(path)?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    Ok(bundle)
}

/// Draws `n` distinct images of `class` other than `query`, in bundle order.
fn sample_distractors(bundle: &Bundle, class: usize, query: &str, n: usize, seed: u64) -> std::result::Result<Vec<String>, Failure> {
    let pool: Vec<&str> = bundle
        .images_of_class(class)
        .map(|i| i.id.as_str())
        .filter(|id| *id != query)
        .collect();
    if n == 0 || n > pool.len() {
        return Err(usage(format!(
            "asked for {n} distractors but class `{}` has {} candidate images",
            bundle.class_names[class],
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].to_string()).collect())
}

fn explain(a: ExplainArgs) -> Outcome {
    let config = a.search.config();
    config.validate()?;
    let bundle = load(&a.bundle)?;
    let query = bundle.image(&a.query)?;
    let (target, distractors) = match &a.distractor_class {
        Some(name) => {
            let class = bundle.class_index(name)?;
            (class, sample_distractors(&bundle, class, &query.id, a.num_distractors, config.seed)?)
        }
        None => (bundle.image(&a.distractors[0])?.class, a.distractors.clone()),
    };
    let case = bundle.search_case(&a.query, &distractors, target)?;
    let trace = find_counterfactual(&bundle.head, &case, &config)?;
    let mut doc = TraceDocument::new(trace, config);
    // Keypoint metrics ride along when the bundle has the annotations.
    if let Ok(ann) = bundle.annotations(&doc.trace) {
        doc.metrics = Some(trace_metrics(&doc.trace, &ann, Scope::AllEdits, 0)?);
    }
    save_trace(&doc, &a.out)?;
    log::info!("{} edits, success {}", doc.trace.edits.len(), doc.trace.success);
    Ok(if doc.trace.success { EXIT_OK } else { EXIT_NO_FLIP })
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let bundle = load(&a.bundle)?;
    let entries = fs::read_dir(&a.traces).map_err(|e| Error::io(&a.traces, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&a.traces, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut cases = Vec::with_capacity(paths.len());
    for path in &paths {
        let doc = load_trace(path)?;
        let ann = bundle.annotations(&doc.trace)?;
        cases.push((doc.trace, ann));
    }
    let scope = match a.scope {
        ScopeArg::Single => Scope::SingleEdit,
        ScopeArg::All => Scope::AllEdits,
    };
    let report = aggregate_report(&cases, scope, a.dilation)?;
    match &a.out {
        Some(path) => save_report(&report, path)?,
        None => print!("{}", crate::metrics::render_report(&report)),
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ClusterEvalOutput {
    k: usize,
    seed: u64,
    accuracy: f64,
    evaluated_cells: usize,
    inertia: f64,
    iterations: usize,
    cluster_parts: Vec<Option<usize>>,
}

fn cluster_eval(a: ClusterEvalArgs) -> Outcome {
    let bundle = load(&a.bundle)?;
    let grids: Vec<(&str, _)> = bundle.images.iter().map(|i| (i.id.as_str(), &i.embedding)).collect();
    let assignment = cluster_images(&grids, a.k, a.seed)?;
    let mut parts = BTreeMap::new();
    for img in &bundle.images {
        if let Some(grid) = img.part_grid() {
            parts.insert(img.id.clone(), grid?);
        }
    }
    let report = clustering_accuracy(&assignment, &parts)?;
    let out = ClusterEvalOutput {
        k: a.k,
        seed: a.seed,
        accuracy: report.accuracy,
        evaluated_cells: report.evaluated_cells,
        inertia: assignment.inertia,
        iterations: assignment.iterations,
        cluster_parts: report.clusters.iter().map(|c| c.part).collect(),
    };
    emit(&out, a.out.as_deref())?;
    Ok(EXIT_OK)
}

fn attr_explain(a: AttrExplainArgs) -> Outcome {
    let bundle = load(&a.bundle)?;
    let mut doc = load_trace(&a.trace)?;
    let bank = bundle
        .attributes
        .as_ref()
        .ok_or_else(|| Error::Invalid("bundle has no attribute bank".into()))?;
    let Some(first) = doc.trace.edits.first() else {
        return Err(Error::Invalid("trace has no edits to explain".into()).into());
    };
    let cand = first.candidate;
    let query = bundle.image(&doc.trace.query_id)?;
    let distractor_id = doc
        .trace
        .distractor_ids
        .get(cand.distractor_image)
        .ok_or_else(|| Error::OutOfRange(format!("distractor {}", cand.distractor_image)))?;
    let distractor = bundle.image(distractor_id)?;
    let missing = |id: &str| Error::Invalid(format!("image `{id}` has no part probabilities"));
    let query_parts = query.part_probs.as_ref().ok_or_else(|| missing(&query.id))?;
    let distractor_parts = distractor.part_probs.as_ref().ok_or_else(|| missing(&distractor.id))?;
    // only the first edit: the candidate index refers to the trace's distractor list
    let mut remapped = cand;
    remapped.distractor_image = 0;
    let edited = apply_edit(&query.features, std::slice::from_ref(&distractor.features), remapped)?;
    let mut ranked = attribute_importance(
        &query.features,
        &edited,
        &bundle.head,
        bank,
        doc.trace.target_class,
        cand,
        query_parts,
        distractor_parts,
    )?;
    ranked.truncate(a.topk_attrs);
    doc.attributes = Some(ranked);
    save_trace(&doc, a.out.as_ref().unwrap_or(&a.trace))?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Pair {
    class: usize,
    class_name: String,
    distractor_class: usize,
    distractor_name: String,
}

fn select_pairs(a: SelectPairsArgs) -> Outcome {
    let bundle = load(&a.bundle)?;
    let mut pairs = Vec::new();
    for class in 0..bundle.class_names.len() {
        let picked = match a.method {
            PairMethod::Confusion => {
                let cm = bundle
                    .confusion
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("bundle has no confusion matrix".into()))?;
                select_distractor_class(cm, class)
            }
            PairMethod::Attributes => {
                let m = bundle
                    .class_attributes
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("bundle has no class-attribute matrix".into()))?;
                select_distractor_class_by_attributes(m, class)
            }
        };
        match picked {
            Ok(d) => pairs.push(Pair {
                class,
                class_name: bundle.class_names[class].clone(),
                distractor_class: d,
                distractor_name: bundle.class_names[d].clone(),
            }),
            Err(e) => eprintln!("warning: skipping class `{}`: {e}", bundle.class_names[class]),
        }
    }
    emit(&pairs, a.out.as_deref())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BenchmarkOutput {
    query: String,
    target_class: usize,
    n_distractors: usize,
    topk: f64,
    cells: usize,
    head_evaluations_per_edit: u64,
    dot_products: u64,
    candidate_pool: u64,
    repeats: usize,
    /// Median wall time of a single-edit search, table included.
    median_seconds: f64,
}

fn benchmark(a: BenchmarkArgs) -> Outcome {
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let bundle = load(&a.bundle)?;
    let query = match &a.query {
        Some(id) => bundle.image(id)?,
        None => bundle.images.first().ok_or_else(|| Error::Invalid("bundle has no images".into()))?,
    };
    // the class with the most other images supplies the distractors
    let target = (0..bundle.class_names.len())
        .filter(|&c| c != query.class)
        .max_by_key(|&c| (bundle.images_of_class(c).count(), std::cmp::Reverse(c)))
        .ok_or_else(|| Error::Invalid("benchmark needs a second class".into()))?;
    let distractors = sample_distractors(&bundle, target, &query.id, a.n_distractors, a.seed)?;
    let case = bundle.search_case(&query.id, &distractors, target)?;
    let config = SearchConfig {
        k_fraction: a.topk,
        max_edits: Some(1),
        seed: a.seed,
        ..SearchConfig::default()
    };
    config.validate()?;
    let mut times = Vec::with_capacity(a.repeats);
    let mut trace = None;
    for _ in 0..a.repeats {
        let start = Instant::now();
        let t = find_counterfactual(&bundle.head, &case, &config)?;
        times.push(start.elapsed().as_secs_f64());
        trace = Some(t);
    }
    let trace = trace.expect("at least one repeat");
    times.sort_by(f64::total_cmp);
    let out = BenchmarkOutput {
        query: query.id.clone(),
        target_class: target,
        n_distractors: a.n_distractors,
        topk: a.topk,
        cells: bundle.height * bundle.width,
        head_evaluations_per_edit: trace.stats.candidates_per_edit.first().copied().unwrap_or(0),
        dot_products: trace.stats.dot_products,
        candidate_pool: trace.stats.candidate_pool,
        repeats: a.repeats,
        median_seconds: times[times.len() / 2],
    };
    emit(&out, a.out.as_deref())?;
    Ok(EXIT_OK)
}
