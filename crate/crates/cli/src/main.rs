use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noiselens_core::eval::{
    confidence_histogram, label_confidences, quote, threshold_sweep, ReportFormat, TrainBundle,
};
use noiselens_core::experiment::{evaluate, load_aligned_scores, run_experiment, select, training_log, ExperimentConfig, Stage};
use noiselens_core::io::{self, Encoding};
use noiselens_core::noise::{self, inject, oracle_scores, parse_pair_map, BlobSpec, NoiseKind, NoiseSpec, TruncationSpec};
use noiselens_core::priors::{compute_class_prior, estimate_transition_matrix};
use noiselens_core::scorer::{score_with_surrogate, ClassEmbeddingBank, ScorerConfig, ScorerSource, DEFAULT_TEMPERATURE};
use noiselens_core::selection::{apply_mask, Criterion, MU_DEFAULT, RHO_DEFAULT};
use noiselens_core::trainer::{train, LrSchedule, TrainConfig};
use noiselens_core::{Error, MarginConfig};

#[derive(Parser)]
#[command(name = "noiselens", version, about = "Training-free clean-sample selection and noise-aware margin training")]
struct Cli {
    /// Worker thread cap (default: all cores)
    #[arg(long, global = true, env = "NOISELENS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Gaussian blobs, optionally with injected label noise
    Synth(SynthArgs),
    /// Score a dataset with a surrogate
    Score(ScoreArgs),
    /// Select the samples whose labels look clean
    Select(SelectArgs),
    /// Estimate the transition matrix and the clean-subset class prior
    Priors(PriorsArgs),
    /// Train a linear head on the selected subset
    Train(TrainArgs),
    /// Evaluation, confidence histograms and threshold sweeps
    Report(ReportArgs),
    /// Run a whole experiment from a config file
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Seeds the class means
    #[arg(long)]
    seed: u64,
    /// Seeds the sample draw (defaults to --seed)
    #[arg(long)]
    sample_seed: Option<u64>,
    /// sym, asym or idn
    #[arg(long)]
    noise: Option<NoiseKind>,
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Pair map for asymmetric noise, e.g. "0:1,2:3"
    #[arg(long)]
    pairs: Option<String>,
    /// Standard deviation of the per-sample flip rate (idn)
    #[arg(long)]
    flip_sd: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a clean test set drawn with this seed
    #[arg(long, requires = "test_out")]
    test_seed: Option<u64>,
    #[arg(long, requires = "test_seed")]
    test_out: Option<PathBuf>,
    /// Write the corruption record here
    #[arg(long)]
    corruption_out: Option<PathBuf>,
    /// Write the class means as an embedding bank here
    #[arg(long)]
    means_out: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    encoding: Encoding,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Class embedding bank for cosine-softmax scoring
    #[arg(long, conflicts_with = "oracle")]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Surrogate-space embeddings (default: the dataset features)
    #[arg(long, requires = "bank")]
    embeddings: Option<PathBuf>,
    /// Ground-truth oracle with this confidence (synthetic data only)
    #[arg(long)]
    oracle: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "text")]
    encoding: Encoding,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Second prompt's scores (prompt-consistency, combined)
    #[arg(long)]
    scores2: Option<PathBuf>,
    #[arg(long, default_value = "confidence")]
    criterion: Criterion,
    #[arg(long, default_value_t = RHO_DEFAULT)]
    rho: f64,
    #[arg(long, default_value_t = MU_DEFAULT)]
    mu: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PriorsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    tm_out: PathBuf,
    #[arg(long)]
    prior_out: PathBuf,
}

#[derive(Args, Clone)]
struct MarginArgs {
    /// shallow, deep, ce or focal
    #[arg(long, default_value = "shallow")]
    preset: String,
    /// Transition-matrix margin weight
    #[arg(long)]
    delta: Option<f64>,
    /// Log-prior margin weight
    #[arg(long)]
    prior_weight: Option<f64>,
    /// Logit scale divisor
    #[arg(long)]
    scale: Option<f64>,
    /// Focal exponent
    #[arg(long)]
    gamma: Option<f64>,
}

impl MarginArgs {
    fn resolve(&self) -> Result<MarginConfig, Error> {
        let mut m = match self.preset.as_str() {
            "shallow" => MarginConfig::shallow(),
            "deep" => MarginConfig::deep(),
            "ce" | "cross-entropy" => MarginConfig::cross_entropy(),
            "focal" => MarginConfig::focal(1.0),
            other => return Err(Error::InvalidArgument(format!("unknown margin preset {other:?}"))),
        };
        m.delta = self.delta.unwrap_or(m.delta);
        m.t = self.prior_weight.unwrap_or(m.t);
        m.s = self.scale.unwrap_or(m.s);
        m.gamma = self.gamma.unwrap_or(m.gamma);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    #[arg(long)]
    no_shuffle: bool,
    /// Multiply the rate by --lr-step-factor every this many epochs
    #[arg(long)]
    lr_step_every: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_step_factor: f64,
}

impl OptimArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            seed: self.train_seed,
            shuffle: !self.no_shuffle,
            schedule: match self.lr_step_every {
                None => LrSchedule::Constant,
                Some(every) => LrSchedule::Step {
                    every,
                    factor: self.lr_step_factor,
                },
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    tm: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[command(flatten)]
    margin: MarginArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and accuracy records
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    encoding: Encoding,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "table", value_parser = ["table", "records"])]
    format: String,
    /// Evaluate this checkpoint on --test
    #[arg(long, requires = "test")]
    classifier: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Training set (histogram and sweep)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Scores for --dataset (histogram and sweep)
    #[arg(long, requires = "dataset")]
    scores: Option<PathBuf>,
    /// Confidence histogram of the scores at the given labels
    #[arg(long, requires = "scores")]
    histogram: bool,
    /// Comma-separated ascending thresholds
    #[arg(long, requires_all = ["scores", "test", "tm"], value_delimiter = ',')]
    sweep: Vec<f64>,
    #[arg(long)]
    tm: Option<PathBuf>,
    #[command(flatten)]
    margin: MarginArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides output.dir
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    stage: Stage,
    error: Error,
}

impl Failure {
    fn render(&self) -> String {
        let mut line = format!("error: stage={} message={}", self.stage, quote(&self.error.to_string()));
        if let Some(record) = self.error.record_index() {
            line.push_str(&format!(" record={record}"));
        }
        line
    }
}

trait At<T> {
    fn at(self, stage: Stage) -> Result<T, Failure>;
}

impl<T> At<T> for Result<T, Error> {
    fn at(self, stage: Stage) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select_cmd(a),
        Command::Priors(a) => priors(a),
        Command::Train(a) => train_cmd(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.render());
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let s = Stage::Data;
    let blobs = BlobSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        dim: a.dim,
        separation: a.separation,
        seed: a.seed,
    };
    let clean = blobs.sample(a.sample_seed.unwrap_or(a.seed)).at(s)?;
    let (ds, record) = match a.noise {
        None => {
            let rec = noise::CorruptionRecord::from_dataset(&clean).at(s)?;
            (clean, rec)
        }
        Some(kind) => {
            let mut spec = match kind {
                NoiseKind::Symmetric => NoiseSpec::symmetric(a.rate, a.noise_seed),
                NoiseKind::Asymmetric => {
                    let pairs = a
                        .pairs
                        .as_deref()
                        .ok_or_else(|| Error::InvalidArgument("asymmetric noise needs --pairs".into()))
                        .at(s)?;
                    NoiseSpec::asymmetric(a.rate, parse_pair_map(pairs).at(s)?, a.noise_seed)
                }
                NoiseKind::InstanceDependent => NoiseSpec::instance_dependent(a.rate, a.noise_seed),
            };
            if let Some(sd) = a.flip_sd {
                spec.truncation = TruncationSpec {
                    sd,
                    ..TruncationSpec::default()
                };
            }
            inject(&clean, &spec).at(s)?
        }
    };
    io::save_dataset(&a.out, &ds, a.encoding).at(s)?;
    if let (Some(seed), Some(path)) = (a.test_seed, &a.test_out) {
        io::save_dataset(path, &blobs.sample(seed).at(s)?, a.encoding).at(s)?;
    }
    if let Some(path) = &a.corruption_out {
        io::save_corruption(path, &record).at(s)?;
    }
    if let Some(path) = &a.means_out {
        let bank = ClassEmbeddingBank::new(blobs.means().at(s)?, "blob-means").at(s)?;
        io::save_bank(path, &bank, Encoding::Text).at(s)?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), Failure> {
    let s = Stage::Score;
    let ds = io::load_dataset(&a.dataset).at(Stage::Data)?;
    let scores = match (&a.bank, a.oracle) {
        (Some(bank), None) => {
            let source = ScorerSource::Cosine {
                bank: io::load_bank(bank).at(s)?,
                config: ScorerConfig::new(a.temperature).at(s)?,
                embeddings: a.embeddings.as_ref().map(io::load_embeddings).transpose().at(s)?,
            };
            score_with_surrogate(&ds, &source).at(s)?
        }
        (None, Some(conf)) => oracle_scores(&ds, conf).at(s)?,
        _ => return Err(Error::InvalidArgument("give exactly one of --bank or --oracle".into())).at(s),
    };
    io::save_scores(&a.out, &scores, a.encoding).at(s)
}

fn select_cmd(a: SelectArgs) -> Result<(), Failure> {
    let s = Stage::Select;
    let ds = io::load_dataset(&a.dataset).at(Stage::Data)?;
    let one = load_aligned_scores(&a.scores, &ds).at(s)?;
    let two = a.scores2.as_deref().map(|p| load_aligned_scores(p, &ds)).transpose().at(s)?;
    let mask = select(a.criterion, &ds, &one, two.as_ref(), a.rho, a.mu).at(s)?;
    io::save_mask(&a.out, &mask).at(s)?;
    eprintln!("selected {} of {}", mask.selected_count(), mask.len());
    Ok(())
}

fn priors(a: PriorsArgs) -> Result<(), Failure> {
    let s = Stage::Priors;
    let ds = io::load_dataset(&a.dataset).at(Stage::Data)?;
    let scores = load_aligned_scores(&a.scores, &ds).at(s)?;
    let mask = io::load_mask(&a.mask).at(s)?;
    let tm = estimate_transition_matrix(&ds, &scores).at(s)?;
    for w in tm.warnings() {
        eprintln!("warning: {w}");
    }
    let clean = apply_mask(&ds, &mask).at(s)?;
    let prior = compute_class_prior(&clean, ds.label_space()).at(s)?;
    io::save_tm(&a.tm_out, &tm).at(s)?;
    io::save_prior(&a.prior_out, &prior).at(s)
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let s = Stage::Train;
    let ds = io::load_dataset(&a.dataset).at(Stage::Data)?;
    let mask = io::load_mask(&a.mask).at(s)?;
    let tm = io::load_tm(&a.tm).at(s)?;
    let prior = io::load_prior(&a.prior).at(s)?;
    let margin = a.margin.resolve().at(s)?;
    let cfg = a.optim.resolve().at(s)?;
    let clean = apply_mask(&ds, &mask).at(s)?;
    let report = train(&clean, &tm, &prior, &margin, &cfg).at(s)?;
    io::save_classifier(&a.out, &report.classifier, a.encoding).at(s)?;
    if let Some(log) = &a.log {
        io::write_file(log, training_log(&report).as_bytes()).at(s)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let s = Stage::Report;
    let format: ReportFormat = a.format.parse().at(s)?;
    let mut out = String::new();
    let test = a.test.as_deref().map(io::load_dataset).transpose().at(Stage::Data)?;
    let train_set = a.dataset.as_deref().map(io::load_dataset).transpose().at(Stage::Data)?;
    let scores = match (&a.scores, &train_set) {
        (Some(p), Some(ds)) => Some(load_aligned_scores(p, ds).at(s)?),
        _ => None,
    };

    if let (Some(clf), Some(test)) = (&a.classifier, &test) {
        let classifier = io::load_classifier(clf).at(s)?;
        let report = noiselens_core::TrainReport {
            epoch_loss: Vec::new(),
            epoch_accuracy: Vec::new(),
            classifier,
            wall_clock_seconds: 0.0,
        };
        let train_size = train_set.as_ref().map_or(0, |d| d.len());
        out.push_str(&evaluate(&report, test, train_size, a.top_k, None).at(s)?.render(format));
    }
    if a.histogram {
        if let (Some(ds), Some(sc)) = (&train_set, &scores) {
            let conf = label_confidences(ds, sc).at(s)?;
            out.push_str(&confidence_histogram(&conf, source_name(a.scores.as_deref())).at(s)?.render(format));
        }
    }
    if !a.sweep.is_empty() {
        if let (Some(ds), Some(sc), Some(test), Some(tm)) = (&train_set, &scores, &test, &a.tm) {
            let bundle = TrainBundle {
                transition: io::load_tm(tm).at(s)?,
                margin: a.margin.resolve().at(s)?,
                train: a.optim.resolve().at(s)?,
                test: test.clone(),
            };
            out.push_str(&threshold_sweep(ds, sc, &a.sweep, &bundle).at(s)?.render(format));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to report: pass --classifier/--test, --histogram or --sweep".into(),
        ))
        .at(s);
    }
    match &a.out {
        Some(path) => io::write_file(path, out.as_bytes()).at(s),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn source_name(path: Option<&Path>) -> String {
    path.and_then(Path::file_name)
        .map_or_else(|| "scores".to_string(), |n| n.to_string_lossy().into_owned())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::from_file(&a.config).at(Stage::Config)?;
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    let outcome = run_experiment(&cfg).map_err(|e| Failure {
        stage: e.stage,
        error: e.error,
    })?;
    print!("{}", outcome.eval.render(ReportFormat::Table));
    if let Some(dir) = &cfg.output_dir {
        println!("artifacts in {}", dir.display());
    }
    println!("numeric_sha256 {}", outcome.manifest.numeric_sha256());
    Ok(())
}
