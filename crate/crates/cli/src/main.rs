//! `chunkforest` operator CLI.
//!
//! Every run prints an `effective-config:` line to stderr that spells out
//! all flags, defaults included, so the run can be repeated exactly.
//! Failures print `error[CODE]: message` and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use chunkforest::corpus::{load_midi_dir, synthetic_corpus, CorpusError};
use chunkforest::forest::{
    build_forest_to_dir, load_forest_with, save_manifest, ForestConfig, ForestError, LoadOptions,
};
use chunkforest::generator::{train, GeneratorError, GeneratorModel, GeneratorSpec};
use chunkforest::seed::RngSeed;
use chunkforest::study::report::{read_composer_csv, read_ratings_csv};
use chunkforest::study::{aggregate_rows, make_assignments, ComparisonKind, Deck, StudyError, StudyPlan};
use chunkforest_service::error::{forest_code, study_code};
use chunkforest_service::{ApiError, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "chunkforest",
    version,
    about = "Build continuation forests and run steering studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Markov chunk generator and write the model file.
    Train(TrainArgs),
    /// Generate a continuation forest into a directory.
    BuildForest(BuildArgs),
    /// Compute quintile bin edges and store them in the forest manifest.
    IndexFeatures(IndexArgs),
    /// Write per-node features as CSV.
    DumpFeatures(DumpArgs),
    /// Generate counterbalanced composer assignments.
    Assign(AssignArgs),
    /// Aggregate ratings into the study report CSVs.
    Report(ReportArgs),
    /// Run the HTTP service. Flags override PORT, FOREST_PATH, CARDS_PATH and DATA_DIR.
    Serve(ServeArgs),
}

/// Where the generator comes from: a model file, a MIDI directory, or the
/// built-in procedural corpus.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Generator preset: default, coherent or erratic.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Markov order; overrides the preset.
    #[arg(long)]
    order: Option<usize>,
    /// Additive smoothing constant; overrides the preset.
    #[arg(long)]
    smoothing: Option<f64>,
    /// Sampling temperature; overrides the preset.
    #[arg(long)]
    temperature: Option<f64>,
    /// Number of procedural corpus pieces used when no MIDI corpus is given.
    #[arg(long, default_value_t = 24)]
    synthetic: usize,
    /// Seed for the procedural corpus.
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
}

impl ModelArgs {
    fn spec(&self) -> Result<GeneratorSpec, CliError> {
        let mut spec = GeneratorSpec::preset(&self.preset)
            .ok_or_else(|| CliError::new("INVALID_SPEC", format!("unknown preset {:?}", self.preset)))?;
        if let Some(o) = self.order {
            spec.order = o;
        }
        if let Some(s) = self.smoothing {
            spec.smoothing = s;
        }
        if let Some(t) = self.temperature {
            spec.temperature = t;
        }
        Ok(spec)
    }

    fn describe(&self, spec: &GeneratorSpec) -> String {
        format!(
            "--preset {} --order {} --smoothing {} --temperature {} --synthetic {} --corpus-seed {}",
            self.preset, spec.order, spec.smoothing, spec.temperature, self.synthetic, self.corpus_seed
        )
    }

    fn train(&self, corpus_dir: Option<&Path>) -> Result<GeneratorModel, CliError> {
        let spec = self.spec()?;
        let corpus = match corpus_dir {
            Some(dir) => load_midi_dir(dir)?,
            None => synthetic_corpus(RngSeed(self.corpus_seed), self.synthetic),
        };
        Ok(train(&corpus, spec)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
    /// Directory of .mid files; the procedural corpus is used when omitted.
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    /// Trained model file; when omitted a model is trained from the model flags.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    model_args: ModelArgs,
    #[arg(long, default_value_t = ForestConfig::DEFAULT_WIDTH)]
    n1: u32,
    #[arg(long, default_value_t = ForestConfig::DEFAULT_WIDTH)]
    n2: u32,
    #[arg(long, default_value_t = ForestConfig::DEFAULT_WIDTH)]
    n3: u32,
    /// Forest seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core. Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also compute feature bins.
    #[arg(long)]
    index: bool,
    /// Output directory.
    #[arg(long, default_value = "forest")]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    forest: PathBuf,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct DumpArgs {
    forest: PathBuf,
    /// Only nodes of this depth.
    #[arg(long)]
    depth: Option<u8>,
    /// CSV file to write; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AssignArgs {
    /// Number of composers, named c01, c02, ...
    #[arg(long, conflicts_with = "composer_ids")]
    composers: Option<usize>,
    /// Explicit comma-separated composer ids.
    #[arg(long, value_delimiter = ',')]
    composer_ids: Vec<String>,
    /// Card deck JSON; the built-in deck when omitted.
    #[arg(long)]
    cards: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Composer whose model comparison is dropped; repeatable.
    #[arg(long)]
    drop_model: Vec<String>,
    /// Composer whose interface comparison is dropped; repeatable.
    #[arg(long)]
    drop_interface: Vec<String>,
    /// Listener count used for rating bookkeeping.
    #[arg(long, default_value_t = 20)]
    listeners: usize,
    /// Assignment CSV to write; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// ratings.csv with header listener_id,comparison_id,kind,card,question,raw,numeric.
    #[arg(long)]
    data: PathBuf,
    /// Composer questionnaire CSV.
    #[arg(long)]
    composer: Option<PathBuf>,
    /// Card deck JSON fixing the by-card row order.
    #[arg(long)]
    cards: Option<PathBuf>,
    /// Output directory for report.csv, by_card.csv, counts.csv and composer_report.csv.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    forest: Option<PathBuf>,
    #[arg(long)]
    cards: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: String,
    message: String,
}

impl CliError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        let code = match &e {
            GeneratorError::EmptyCorpus => "EMPTY_CORPUS",
            GeneratorError::InvalidSpec(_) => "INVALID_SPEC",
            GeneratorError::InvalidSequence { .. } => "INVALID_SEQUENCE",
            GeneratorError::Corrupt(_) => "CORRUPT_MODEL",
            GeneratorError::VersionMismatch { .. } => "VERSION_MISMATCH",
        };
        CliError::new(code, e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = match &e {
            CorpusError::Io { .. } => "IO_ERROR",
            CorpusError::Midi { .. } => "INVALID_MIDI",
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        CliError::new(forest_code(&e).1, e.to_string())
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        CliError::new(study_code(&e).1, e.to_string())
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::new(&e.code, e.message)
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("IO_ERROR", format!("{}: {e}", path.display()))
}

fn effective(line: String) {
    eprintln!("effective-config: chunkforest {line}");
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::new("INVALID_CONFIG", e.to_string()))?;
    Ok(pool.install(f))
}

fn load_deck(path: Option<&Path>) -> Result<Deck, CliError> {
    Ok(match path {
        Some(p) => Deck::load(p)?,
        None => Deck::default(),
    })
}

fn opt_path(flag: &str, p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| format!(" --{flag} {}", p.display()))
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let spec = a.model.spec()?;
    effective(format!(
        "train {} --out {}{}",
        a.model.describe(&spec),
        a.out.display(),
        a.corpus.as_ref().map_or(String::new(), |c| format!(" {}", c.display()))
    ));
    let model = a.model.train(a.corpus.as_deref())?;
    let tmp = a.out.with_extension("partial");
    fs::write(&tmp, model.to_bytes()).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, &a.out).map_err(|e| io_error(&a.out, e))?;
    println!(
        "model {} vocabulary={} digest={}",
        a.out.display(),
        model.vocab_size(),
        model.digest()
    );
    Ok(())
}

fn run_build(a: BuildArgs) -> Result<(), CliError> {
    let config = ForestConfig::new(a.n1, a.n2, a.n3, a.seed);
    config.validate()?;
    let model = match &a.model {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
            GeneratorModel::from_bytes(&bytes)?
        }
        None => a.model_args.train(None)?,
    };
    let source = match &a.model {
        Some(p) => format!("--model {}", p.display()),
        None => a.model_args.describe(&a.model_args.spec()?),
    };
    effective(format!(
        "build-forest {source} --n1 {} --n2 {} --n3 {} --seed {} --jobs {}{} --out {}",
        a.n1,
        a.n2,
        a.n3,
        a.seed,
        a.jobs,
        if a.index { " --index" } else { "" },
        a.out.display()
    ));
    let built_at = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    let manifest = with_jobs(a.jobs, || build_forest_to_dir(&model, config, &a.out, built_at))??;
    println!(
        "forest {} nodes={} phrases={} digest={}",
        a.out.display(),
        config.total_nodes(),
        config.phrase_count(),
        manifest.digest
    );
    if a.index {
        index(&a.out, a.jobs)?;
    }
    Ok(())
}

fn index(dir: &Path, jobs: usize) -> Result<(), CliError> {
    let mut forest = load_forest_with(dir, LoadOptions { lazy_leaves: true })?;
    with_jobs(jobs, || forest.index_features().map(|_| ()))??;
    save_manifest(&forest, dir)?;
    let edges = forest.bin_edges().expect("just indexed");
    for d in &edges.depths {
        for (dim, bins) in &d.dimensions {
            println!(
                "depth {} {}: edges {:?} epsilon {}",
                d.depth,
                dim.name(),
                bins.edges,
                bins.epsilon
            );
        }
    }
    Ok(())
}

fn run_index(a: IndexArgs) -> Result<(), CliError> {
    effective(format!("index-features --jobs {} {}", a.jobs, a.forest.display()));
    index(&a.forest, a.jobs)
}

fn run_dump(a: DumpArgs) -> Result<(), CliError> {
    effective(format!(
        "dump-features{}{} {}",
        a.depth.map_or(String::new(), |d| format!(" --depth {d}")),
        opt_path("out", &a.out),
        a.forest.display()
    ));
    if let Some(d) = a.depth {
        if !(1..=3).contains(&d) {
            return Err(CliError::new(
                "INVALID_CONFIG",
                format!("--depth must be 1, 2 or 3, got {d}"),
            ));
        }
    }
    let forest = load_forest_with(&a.forest, LoadOptions { lazy_leaves: true })?;
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| io_error(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| CliError::new("IO_ERROR", e.to_string());
    w.write_record([
        "node_id",
        "depth",
        "path",
        "tempo",
        "pitch_mean",
        "pitch_diversity",
        "dissonance",
        "key",
    ])
    .map_err(csv_err)?;
    let mut failure = None;
    forest.for_each_node(|node| {
        if failure.is_some() || a.depth.is_some_and(|d| d != node.depth) {
            return Ok(());
        }
        let f = &node.features;
        let rec = [
            node.id.to_string(),
            node.depth.to_string(),
            node.path.to_string(),
            f.tempo.to_string(),
            f.pitch_mean.to_string(),
            f.pitch_diversity.to_string(),
            f.dissonance.to_string(),
            f.key.map_or(String::new(), |k| k.to_string()),
        ];
        if let Err(e) = w.write_record(&rec) {
            failure = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(csv_err(e));
    }
    w.flush().map_err(|e| CliError::new("IO_ERROR", e.to_string()))
}

fn run_assign(a: AssignArgs) -> Result<(), CliError> {
    let ids: Vec<String> = match a.composers {
        Some(n) => (1..=n).map(|i| format!("c{i:02}")).collect(),
        None => a.composer_ids.clone(),
    };
    if ids.is_empty() {
        return Err(CliError::new("INVALID_CONFIG", "give --composers N or --composer-ids"));
    }
    let repeat = |flag: &str, v: &[String]| v.iter().map(|x| format!(" --{flag} {x}")).collect::<String>();
    effective(format!(
        "assign --composer-ids {}{} --seed {}{}{} --listeners {}{}",
        ids.join(","),
        opt_path("cards", &a.cards),
        a.seed,
        repeat("drop-model", &a.drop_model),
        repeat("drop-interface", &a.drop_interface),
        a.listeners,
        opt_path("out", &a.out)
    ));
    let deck = load_deck(a.cards.as_deref())?;
    let mut plan = StudyPlan::new(make_assignments(&ids, &deck, RngSeed(a.seed)));
    for c in &a.drop_model {
        plan.drop_comparison(c, ComparisonKind::Model)?;
    }
    for c in &a.drop_interface {
        plan.drop_comparison(c, ComparisonKind::Interface)?;
    }
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| io_error(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| CliError::new("IO_ERROR", e.to_string());
    w.write_record([
        "comparison_id",
        "composer_id",
        "kind",
        "card_id",
        "treatment_first",
        "comparison_first",
    ])
    .map_err(csv_err)?;
    for c in &plan.comparisons {
        w.write_record([
            c.comparison_id(),
            c.composer_id.clone(),
            c.kind.name().to_string(),
            c.card_id.clone(),
            c.treatment_first.to_string(),
            c.comparison_first.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::new("IO_ERROR", e.to_string()))?;
    drop(w);
    let b = plan.bookkeeping(a.listeners);
    eprintln!(
        "comparisons={} interface={} model={} listeners={} pair_ratings={} question_ratings={}",
        b.comparisons, b.interface_comparisons, b.model_comparisons, b.listeners, b.pair_ratings, b.question_ratings
    );
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<(), CliError> {
    effective(format!(
        "report --data {}{}{} --out {}",
        a.data.display(),
        opt_path("composer", &a.composer),
        opt_path("cards", &a.cards),
        a.out.display()
    ));
    let deck = load_deck(a.cards.as_deref())?;
    let rows = read_ratings_csv(fs::File::open(&a.data).map_err(|e| io_error(&a.data, e))?)?;
    let composer = match &a.composer {
        Some(p) => read_composer_csv(fs::File::open(p).map_err(|e| io_error(p, e))?)?,
        None => Vec::new(),
    };
    let order: Vec<String> = deck.ids().map(str::to_string).collect();
    let report = aggregate_rows(&rows, &order, &composer);
    // Write into a sibling staging directory so a failure leaves no partial report.
    let staging = a.out.with_extension("partial");
    let _ = fs::remove_dir_all(&staging);
    fs::create_dir_all(&staging).map_err(|e| io_error(&staging, e))?;
    if let Err(e) = report.write_all(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e.into());
    }
    if a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    }
    fs::rename(&staging, &a.out).map_err(|e| io_error(&a.out, e))?;
    for r in &report.overall {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} {}: n={} mean={} t={} p={}",
            r.kind.name(),
            r.question.name(),
            r.n,
            fmt(r.mean),
            fmt(r.stat.map(|s| s.t)),
            fmt(r.stat.map(|s| s.p))
        );
    }
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config = ServiceConfig::from_lookup(|k| {
        let flag = match k {
            "PORT" => a.port.map(|p| p.to_string()),
            "FOREST_PATH" => a.forest.as_ref().map(|p| p.display().to_string()),
            "CARDS_PATH" => a.cards.as_ref().map(|p| p.display().to_string()),
            "DATA_DIR" => a.data_dir.as_ref().map(|p| p.display().to_string()),
            _ => None,
        };
        flag.or_else(|| std::env::var(k).ok())
    })?;
    config.lazy_leaves = true;
    effective(format!(
        "serve --port {} --forest {}{}{}",
        config.port,
        config.forest_path.display(),
        opt_path("cards", &config.cards_path),
        opt_path("data-dir", &config.data_dir)
    ));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("INTERNAL", e.to_string()))?;
    runtime.block_on(chunkforest_service::serve(config))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::BuildForest(a) => run_build(a),
        Command::IndexFeatures(a) => run_index(a),
        Command::DumpFeatures(a) => run_dump(a),
        Command::Assign(a) => run_assign(a),
        Command::Report(a) => run_report(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::FAILURE
        }
    }
}
