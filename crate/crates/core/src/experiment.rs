//! End-to-end runs driven by a `section.key = value` config file.
//!
//! ```text
//! # comments start with '#'
//! synth.classes = 4
//! synth.per_class = 500
//! synth.dim = 16
//! synth.separation = 3
//! synth.seed = 7
//! noise.kind = sym
//! noise.rate = 0.4
//! noise.seed = 8
//! scorer.kind = blob-means
//! selection.criterion = confidence
//! selection.rho = 0.5
//! margin.preset = shallow
//! train.seed = 9
//! test.seed = 1007
//! output.dir = out
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{ingest_scores, Dataset, ScoreMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, confidence_histogram, label_confidences, per_class_recall, reference_labels, threshold_sweep,
    top_k_accuracy, EvalReport, ReportFormat, SweepReport, TrainBundle,
};
use crate::io::{self, Encoding};
use crate::losses::MarginConfig;
use crate::noise::{inject, oracle_scores, selection_quality, BlobSpec, CorruptionRecord, NoiseKind, NoiseSpec, TruncationSpec};
use crate::priors::{compute_class_prior, estimate_transition_matrix, ClassPrior, TransitionMatrix};
use crate::scorer::{score_with_surrogate, ClassEmbeddingBank, ScorerConfig, ScorerSource, DEFAULT_TEMPERATURE};
use crate::selection::{
    apply_mask, select_by_confidence, select_by_prompt_consistency, Criterion, SelectionMask, MU_DEFAULT, RHO_DEFAULT,
};
use crate::trainer::{predict, train, LrSchedule, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Score,
    Select,
    Priors,
    Train,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Priors => "priors",
            Stage::Train => "train",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub blobs: BlobSpec,
    pub sample_seed: u64,
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    File(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSource {
    /// Cosine-softmax against one or two class-embedding banks.
    Cosine {
        bank: PathBuf,
        bank2: Option<PathBuf>,
        temperature: f64,
        embeddings: Option<PathBuf>,
    },
    /// Precomputed score files.
    Files { primary: PathBuf, secondary: Option<PathBuf> },
    /// Ground-truth oracle; synthetic data only.
    Oracle { confidence: f64, confidence2: Option<f64> },
    /// Cosine-softmax against the generating blob means; synthetic data only.
    BlobMeans { temperature: f64 },
}

impl ScoreSource {
    fn has_second(&self) -> bool {
        match self {
            ScoreSource::Cosine { bank2, .. } => bank2.is_some(),
            ScoreSource::Files { secondary, .. } => secondary.is_some(),
            ScoreSource::Oracle { confidence2, .. } => confidence2.is_some(),
            ScoreSource::BlobMeans { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestSource {
    File(PathBuf),
    /// Fresh noise-free draw from the training blobs.
    Synth { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub scorer: ScoreSource,
    pub criterion: Criterion,
    pub rho: f64,
    pub mu: f64,
    pub margin: MarginConfig,
    pub train: TrainConfig,
    pub test: TestSource,
    pub output_dir: Option<PathBuf>,
    pub encoding: Encoding,
    pub top_k: usize,
    pub sweep: Vec<f64>,
    /// Raw `key = value` entries as written, sorted by key.
    pub entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "dataset.path",
    "synth.classes",
    "synth.per_class",
    "synth.dim",
    "synth.separation",
    "synth.seed",
    "synth.sample_seed",
    "noise.kind",
    "noise.rate",
    "noise.seed",
    "noise.pairs",
    "noise.sd",
    "noise.lower",
    "noise.upper",
    "scorer.kind",
    "scorer.bank",
    "scorer.bank2",
    "scorer.temperature",
    "scorer.embeddings",
    "scorer.scores",
    "scorer.scores2",
    "scorer.confidence",
    "scorer.confidence2",
    "selection.criterion",
    "selection.rho",
    "selection.mu",
    "margin.preset",
    "margin.delta",
    "margin.t",
    "margin.s",
    "margin.gamma",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.momentum",
    "train.seed",
    "train.shuffle",
    "train.lr_step_every",
    "train.lr_step_factor",
    "test.path",
    "test.seed",
    "output.dir",
    "output.encoding",
    "report.top_k",
    "report.sweep",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
    base: PathBuf,
}

impl Entries {
    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.map.keys().any(|k| k.starts_with(&prefix))
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(l, _)| *l)
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                reason: format!("cannot parse {key} = {raw:?}"),
            }),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config {
            line: 0,
            reason: format!("missing required key {key}"),
        })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.str(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    fn fail(&self, key: &str, reason: impl Into<String>) -> Error {
        Error::Config {
            line: self.line(key),
            reason: reason.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: "expected `section.key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.split('.').count() != 2 || key.split('.').any(str::is_empty) {
                return Err(Error::Config {
                    line,
                    reason: format!("key {key:?} must have the form section.key"),
                });
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    reason: format!("unknown key {key}"),
                });
            }
            if map.insert(key.to_string(), (line, value.to_string())).is_some() {
                return Err(Error::Config {
                    line,
                    reason: format!("{key} given twice"),
                });
            }
        }
        let e = Entries {
            map,
            base: base.to_path_buf(),
        };

        let synthetic = e.has_section("synth");
        let dataset = match (e.path("dataset.path"), synthetic) {
            (Some(_), true) => return Err(e.fail("dataset.path", "give either dataset.path or synth.*, not both")),
            (None, false) => {
                return Err(Error::Config {
                    line: 0,
                    reason: "no dataset source: set dataset.path or synth.*".into(),
                })
            }
            (Some(p), false) => {
                if e.has_section("noise") {
                    return Err(e.fail("noise.kind", "noise.* only applies to synthetic datasets"));
                }
                DatasetSource::File(p)
            }
            (None, true) => {
                let seed: u64 = e.require("synth.seed")?;
                let blobs = BlobSpec {
                    num_classes: e.require("synth.classes")?,
                    per_class: e.require("synth.per_class")?,
                    dim: e.require("synth.dim")?,
                    separation: e.get("synth.separation")?.unwrap_or(3.0),
                    seed,
                };
                let noise = if e.has("noise.kind") {
                    let kind: NoiseKind = e.require("noise.kind")?;
                    let rate: f64 = e.require("noise.rate")?;
                    let noise_seed: u64 = e.require("noise.seed")?;
                    let mut spec = match kind {
                        NoiseKind::Symmetric => NoiseSpec::symmetric(rate, noise_seed),
                        NoiseKind::Asymmetric => {
                            let pairs = e
                                .str("noise.pairs")
                                .ok_or_else(|| e.fail("noise.kind", "asymmetric noise needs noise.pairs"))?;
                            NoiseSpec::asymmetric(rate, crate::noise::parse_pair_map(pairs)?, noise_seed)
                        }
                        NoiseKind::InstanceDependent => NoiseSpec::instance_dependent(rate, noise_seed),
                    };
                    let d = TruncationSpec::default();
                    spec.truncation = TruncationSpec {
                        sd: e.get("noise.sd")?.unwrap_or(d.sd),
                        lower: e.get("noise.lower")?.unwrap_or(d.lower),
                        upper: e.get("noise.upper")?.unwrap_or(d.upper),
                    };
                    Some(spec)
                } else if e.has_section("noise") {
                    return Err(e.fail("noise.rate", "noise.* given without noise.kind"));
                } else {
                    None
                };
                DatasetSource::Synth(SynthSpec {
                    blobs,
                    sample_seed: e.get("synth.sample_seed")?.unwrap_or(seed),
                    noise,
                })
            }
        };

        let temperature = e.get("scorer.temperature")?.unwrap_or(DEFAULT_TEMPERATURE);
        let kind = e.str("scorer.kind").unwrap_or(if e.has("scorer.scores") { "file" } else { "cosine" });
        let scorer = match kind {
            "cosine" => ScoreSource::Cosine {
                bank: e
                    .path("scorer.bank")
                    .ok_or_else(|| e.fail("scorer.kind", "cosine scorer needs scorer.bank"))?,
                bank2: e.path("scorer.bank2"),
                temperature,
                embeddings: e.path("scorer.embeddings"),
            },
            "file" => ScoreSource::Files {
                primary: e
                    .path("scorer.scores")
                    .ok_or_else(|| e.fail("scorer.kind", "file scorer needs scorer.scores"))?,
                secondary: e.path("scorer.scores2"),
            },
            "oracle" => ScoreSource::Oracle {
                confidence: e.get("scorer.confidence")?.unwrap_or(1.0),
                confidence2: e.get("scorer.confidence2")?,
            },
            "blob-means" => ScoreSource::BlobMeans { temperature },
            other => return Err(e.fail("scorer.kind", format!("unknown scorer kind {other:?}"))),
        };
        if matches!(scorer, ScoreSource::Oracle { .. } | ScoreSource::BlobMeans { .. }) && !synthetic {
            return Err(e.fail("scorer.kind", format!("scorer kind {kind} needs a synthetic dataset")));
        }

        let criterion: Criterion = e.get("selection.criterion")?.unwrap_or(Criterion::Confidence);
        if criterion != Criterion::Confidence && !scorer.has_second() {
            return Err(e.fail(
                "selection.criterion",
                format!("criterion {criterion} needs a second score source"),
            ));
        }

        let mut margin = match e.str("margin.preset").unwrap_or("shallow") {
            "shallow" => MarginConfig::shallow(),
            "deep" => MarginConfig::deep(),
            "ce" | "cross-entropy" => MarginConfig::cross_entropy(),
            "focal" => MarginConfig::focal(1.0),
            other => return Err(e.fail("margin.preset", format!("unknown margin preset {other:?}"))),
        };
        margin.delta = e.get("margin.delta")?.unwrap_or(margin.delta);
        margin.t = e.get("margin.t")?.unwrap_or(margin.t);
        margin.s = e.get("margin.s")?.unwrap_or(margin.s);
        margin.gamma = e.get("margin.gamma")?.unwrap_or(margin.gamma);
        margin.validate().map_err(|err| e.fail("margin.preset", err.to_string()))?;

        let d = TrainConfig::default();
        let schedule = match (e.get::<usize>("train.lr_step_every")?, e.get::<f64>("train.lr_step_factor")?) {
            (None, None) => LrSchedule::Constant,
            (Some(every), factor) => LrSchedule::Step {
                every,
                factor: factor.unwrap_or(0.1),
            },
            (None, Some(_)) => return Err(e.fail("train.lr_step_factor", "lr_step_factor needs lr_step_every")),
        };
        let train = TrainConfig {
            epochs: e.get("train.epochs")?.unwrap_or(d.epochs),
            batch_size: e.get("train.batch_size")?.unwrap_or(d.batch_size),
            learning_rate: e.get("train.lr")?.unwrap_or(d.learning_rate),
            weight_decay: e.get("train.weight_decay")?.unwrap_or(d.weight_decay),
            momentum: e.get("train.momentum")?.unwrap_or(d.momentum),
            seed: e.get("train.seed")?.unwrap_or(d.seed),
            shuffle: e.get("train.shuffle")?.unwrap_or(d.shuffle),
            schedule,
        };
        train.validate().map_err(|err| e.fail("train.epochs", err.to_string()))?;

        let test = match (e.path("test.path"), e.get::<u64>("test.seed")?) {
            (Some(_), Some(_)) => return Err(e.fail("test.path", "give either test.path or test.seed, not both")),
            (Some(p), None) => TestSource::File(p),
            (None, Some(seed)) if synthetic => TestSource::Synth { seed },
            (None, Some(_)) => return Err(e.fail("test.seed", "test.seed needs a synthetic dataset")),
            (None, None) if synthetic => {
                let DatasetSource::Synth(s) = &dataset else { unreachable!() };
                TestSource::Synth {
                    seed: s.sample_seed.wrapping_add(1_000_003),
                }
            }
            (None, None) => {
                return Err(Error::Config {
                    line: 0,
                    reason: "file datasets need test.path".into(),
                })
            }
        };
        if let (DatasetSource::Synth(s), TestSource::Synth { seed }) = (&dataset, &test) {
            if *seed == s.sample_seed {
                return Err(e.fail("test.seed", "test.seed must differ from the training sample seed"));
            }
        }

        let sweep = match e.str("report.sweep") {
            None => Vec::new(),
            Some(raw) => raw
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| e.fail("report.sweep", format!("bad threshold {v:?}"))))
                .collect::<Result<Vec<_>>>()?,
        };

        Ok(Self {
            dataset,
            scorer,
            criterion,
            rho: e.get("selection.rho")?.unwrap_or(RHO_DEFAULT),
            mu: e.get("selection.mu")?.unwrap_or(MU_DEFAULT),
            margin,
            train,
            test,
            output_dir: e.path("output.dir"),
            encoding: e.get("output.encoding")?.unwrap_or(Encoding::Text),
            top_k: e.get("report.top_k")?.unwrap_or(5),
            sweep,
            entries: e.map.into_iter().map(|(k, (_, v))| (k, v)).collect(),
        })
    }

    /// Sorted `key = value` lines; the basis of the config hash.
    pub fn canonical_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Every named seed, in a fixed order.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        let mut out = Vec::new();
        if let DatasetSource::Synth(s) = &self.dataset {
            out.push(("synth", s.blobs.seed));
            out.push(("sample", s.sample_seed));
            if let Some(n) = &s.noise {
                out.push(("noise", n.seed));
            }
        }
        if let TestSource::Synth { seed } = self.test {
            out.push(("test", seed));
        }
        out.push(("train", self.train.seed));
        out
    }
}

/// Inputs after the data stage: the (noisy) training set, its corruption
/// record when synthetic, and the test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub corruption: Option<CorruptionRecord>,
    pub test: Dataset,
    pub blobs: Option<BlobSpec>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match &cfg.dataset {
        DatasetSource::File(path) => {
            let train = io::load_dataset(path)?;
            let test = match &cfg.test {
                TestSource::File(p) => io::load_dataset(p)?,
                TestSource::Synth { .. } => return Err(Error::invalid("synthetic test set for a file dataset")),
            };
            check_test_shape(&train, &test)?;
            let corruption = if train.has_ground_truth() {
                Some(CorruptionRecord::from_dataset(&train)?)
            } else {
                None
            };
            Ok(PreparedData {
                train,
                corruption,
                test,
                blobs: None,
            })
        }
        DatasetSource::Synth(s) => {
            let clean = s.blobs.sample(s.sample_seed)?;
            let (train, corruption) = match &s.noise {
                Some(spec) => inject(&clean, spec)?,
                None => {
                    let rec = CorruptionRecord::from_dataset(&clean)?;
                    (clean, rec)
                }
            };
            let test = match &cfg.test {
                TestSource::Synth { seed } => s.blobs.sample(*seed)?,
                TestSource::File(p) => io::load_dataset(p)?,
            };
            check_test_shape(&train, &test)?;
            Ok(PreparedData {
                train,
                corruption: Some(corruption),
                test,
                blobs: Some(s.blobs),
            })
        }
    }
}

fn check_test_shape(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes() != test.num_classes() || train.feature_dim() != test.feature_dim() {
        return Err(Error::invalid(format!(
            "test set has C={} D={}, training set has C={} D={}",
            test.num_classes(),
            test.feature_dim(),
            train.num_classes(),
            train.feature_dim()
        )));
    }
    Ok(())
}

/// Primary and optional secondary score matrices.
pub fn compute_scores(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(ScoreMatrix, Option<ScoreMatrix>)> {
    let ds = &data.train;
    match &cfg.scorer {
        ScoreSource::Files { primary, secondary } => {
            let one = score_with_surrogate(ds, &ScorerSource::File(primary.clone()))?;
            let two = secondary
                .as_ref()
                .map(|p| score_with_surrogate(ds, &ScorerSource::File(p.clone())))
                .transpose()?;
            Ok((one, two))
        }
        ScoreSource::Cosine {
            bank,
            bank2,
            temperature,
            embeddings,
        } => {
            let config = ScorerConfig::new(*temperature)?;
            let embeddings = embeddings.as_ref().map(io::load_embeddings).transpose()?;
            let run = |path: &PathBuf| -> Result<ScoreMatrix> {
                let source = ScorerSource::Cosine {
                    bank: io::load_bank(path)?,
                    config,
                    embeddings: embeddings.clone(),
                };
                score_with_surrogate(ds, &source)
            };
            Ok((run(bank)?, bank2.as_ref().map(run).transpose()?))
        }
        ScoreSource::Oracle {
            confidence,
            confidence2,
        } => Ok((
            oracle_scores(ds, *confidence)?,
            confidence2.map(|c| oracle_scores(ds, c)).transpose()?,
        )),
        ScoreSource::BlobMeans { temperature } => {
            let blobs = data
                .blobs
                .ok_or_else(|| Error::invalid("blob-means scorer needs a synthetic dataset"))?;
            let source = ScorerSource::Cosine {
                bank: ClassEmbeddingBank::new(blobs.means()?, "blob-means")?,
                config: ScorerConfig::new(*temperature)?,
                embeddings: None,
            };
            Ok((score_with_surrogate(ds, &source)?, None))
        }
    }
}

pub fn select(
    criterion: Criterion,
    dataset: &Dataset,
    primary: &ScoreMatrix,
    secondary: Option<&ScoreMatrix>,
    rho: f64,
    mu: f64,
) -> Result<SelectionMask> {
    let second = || secondary.ok_or_else(|| Error::invalid(format!("criterion {criterion} needs two score sets")));
    match criterion {
        Criterion::Confidence => select_by_confidence(dataset, primary, rho),
        Criterion::PromptConsistency => select_by_prompt_consistency(dataset, primary, second()?, mu),
        Criterion::Combined => {
            let by_conf = select_by_confidence(dataset, primary, rho)?;
            let by_js = select_by_prompt_consistency(dataset, primary, second()?, mu)?;
            by_conf.and(&by_js)
        }
    }
}

/// Everything an experiment produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub data: PreparedData,
    pub scores: ScoreMatrix,
    pub scores2: Option<ScoreMatrix>,
    pub mask: SelectionMask,
    pub transition: TransitionMatrix,
    pub prior: ClassPrior,
    pub training: TrainReport,
    pub eval: EvalReport,
    pub sweep: Option<SweepReport>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub config_sha256: String,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    /// File name and sha256 of each artifact, in write order.
    pub artifacts: Vec<(String, String)>,
    pub failure: Option<(Stage, String)>,
}

impl Manifest {
    /// Hash over the artifact hashes; identical runs give identical values.
    pub fn numeric_sha256(&self) -> String {
        let mut h = Sha256::new();
        for (name, digest) in &self.artifacts {
            h.update(name.as_bytes());
            h.update(b"\0");
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn render(&self) -> String {
        use crate::eval::quote;
        let mut out = String::from("#noiselens-manifest v1\n");
        match &self.failure {
            None => out.push_str("status=ok\n"),
            Some((stage, msg)) => out.push_str(&format!("status=failed stage={stage} message={}\n", quote(msg))),
        }
        out.push_str(&format!("config_sha256={}\n", self.config_sha256));
        for (k, v) in &self.config {
            out.push_str(&format!("config key={k} value={}\n", quote(v)));
        }
        for (name, seed) in &self.seeds {
            out.push_str(&format!("seed name={name} value={seed}\n"));
        }
        for (name, digest) in &self.artifacts {
            out.push_str(&format!("artifact file={name} sha256={digest}\n"));
        }
        out.push_str(&format!("numeric_sha256={}\n", self.numeric_sha256()));
        out
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

struct ArtifactSink<'a> {
    dir: Option<&'a Path>,
    manifest: Manifest,
}

impl ArtifactSink<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.manifest
            .artifacts
            .push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        match self.dir {
            Some(dir) => io::write_file(&dir.join(name), bytes),
            None => Ok(()),
        }
    }

    fn finish(&self) -> Result<()> {
        match self.dir {
            Some(dir) => io::write_file(&dir.join(MANIFEST_FILE), self.manifest.render().as_bytes()),
            None => Ok(()),
        }
    }
}

fn dataset_bytes(ds: &Dataset, enc: Encoding) -> Vec<u8> {
    match enc {
        Encoding::Text => io::dataset_to_text(ds).into_bytes(),
        Encoding::Binary => io::dataset_to_binary(ds),
    }
}

fn scores_bytes(s: &ScoreMatrix, enc: Encoding) -> Vec<u8> {
    match enc {
        Encoding::Text => io::scores_to_text(s).into_bytes(),
        Encoding::Binary => io::scores_to_binary(s),
    }
}

/// One record per epoch; timing is left out so logs are reproducible.
pub fn training_log(report: &TrainReport) -> String {
    report
        .epoch_loss
        .iter()
        .zip(&report.epoch_accuracy)
        .enumerate()
        .map(|(epoch, (loss, acc))| format!("kind=epoch epoch={epoch} loss={loss:?} train_accuracy={acc:?}\n"))
        .collect()
}

pub fn evaluate(
    report: &TrainReport,
    test: &Dataset,
    train_size: usize,
    top_k: usize,
    selection: Option<crate::noise::SelectionQuality>,
) -> Result<EvalReport> {
    let (pred, probs) = predict(&report.classifier, test)?;
    let reference = reference_labels(test);
    Ok(EvalReport {
        top1: accuracy(&pred, &reference)?,
        top_k: if top_k > 1 && top_k < test.num_classes() {
            Some((top_k, top_k_accuracy(&probs, &reference, top_k)?))
        } else {
            None
        },
        per_class_recall: per_class_recall(&pred, &reference, test.num_classes())?,
        selection,
        train_size,
        test_size: test.len(),
    })
}

/// Runs the whole pipeline. With an output directory every intermediate
/// artifact is written as soon as it exists, and `manifest.txt` is written
/// last, also on failure (recording the failing stage).
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<RunOutcome, StageError> {
    let mut sink = ArtifactSink {
        dir: cfg.output_dir.as_deref(),
        manifest: Manifest {
            config_sha256: cfg.sha256(),
            config: cfg.entries.clone().into_iter().collect(),
            seeds: cfg.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            ..Manifest::default()
        },
    };
    let result = run_stages(cfg, &mut sink);
    match result {
        Ok(mut outcome) => {
            sink.finish().at(Stage::Report)?;
            outcome.manifest = sink.manifest;
            Ok(outcome)
        }
        Err(err) => {
            sink.manifest.failure = Some((err.stage, err.error.to_string()));
            // the stage error is more useful than a manifest write error
            let _ = sink.finish();
            Err(err)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, sink: &mut ArtifactSink<'_>) -> std::result::Result<RunOutcome, StageError> {
    let enc = cfg.encoding;
    let ext = match enc {
        Encoding::Text => "txt",
        Encoding::Binary => "bin",
    };

    let data = prepare_data(cfg).at(Stage::Data)?;
    if matches!(cfg.dataset, DatasetSource::Synth(_)) {
        sink.put(&format!("dataset.{ext}"), &dataset_bytes(&data.train, enc)).at(Stage::Data)?;
        sink.put(&format!("test.{ext}"), &dataset_bytes(&data.test, enc)).at(Stage::Data)?;
        if let Some(rec) = &data.corruption {
            sink.put("corruption.txt", io::corruption_to_text(rec).as_bytes()).at(Stage::Data)?;
        }
    }

    let (scores, scores2) = compute_scores(cfg, &data).at(Stage::Score)?;
    sink.put(&format!("scores.{ext}"), &scores_bytes(&scores, enc)).at(Stage::Score)?;
    if let Some(s2) = &scores2 {
        sink.put(&format!("scores2.{ext}"), &scores_bytes(s2, enc)).at(Stage::Score)?;
    }

    let mask = select(cfg.criterion, &data.train, &scores, scores2.as_ref(), cfg.rho, cfg.mu).at(Stage::Select)?;
    sink.put("mask.txt", io::mask_to_text(&mask).as_bytes()).at(Stage::Select)?;
    let clean = apply_mask(&data.train, &mask).at(Stage::Select)?;

    let transition = estimate_transition_matrix(&data.train, &scores).at(Stage::Priors)?;
    sink.put("tm.txt", io::tm_to_text(&transition).as_bytes()).at(Stage::Priors)?;
    let prior = compute_class_prior(&clean, data.train.label_space()).at(Stage::Priors)?;
    sink.put("prior.txt", io::prior_to_text(&prior).as_bytes()).at(Stage::Priors)?;

    let training = train(&clean, &transition, &prior, &cfg.margin, &cfg.train).at(Stage::Train)?;
    let clf_bytes = match enc {
        Encoding::Text => io::classifier_to_text(&training.classifier).into_bytes(),
        Encoding::Binary => io::classifier_to_binary(&training.classifier),
    };
    sink.put(&format!("classifier.{ext}"), &clf_bytes).at(Stage::Train)?;
    sink.put("train_log.txt", training_log(&training).as_bytes()).at(Stage::Train)?;

    let quality = match &data.corruption {
        Some(rec) => Some(selection_quality(&mask, &data.train, rec).at(Stage::Report)?),
        None => None,
    };
    let eval = evaluate(&training, &data.test, clean.len(), cfg.top_k, quality).at(Stage::Report)?;
    sink.put("report.txt", eval.render(ReportFormat::Records).as_bytes()).at(Stage::Report)?;
    let confidences = label_confidences(&data.train, &scores).at(Stage::Report)?;
    let histogram = confidence_histogram(&confidences, "scores").at(Stage::Report)?;
    sink.put("histogram.txt", histogram.render(ReportFormat::Records).as_bytes()).at(Stage::Report)?;
    let sweep = if cfg.sweep.is_empty() {
        None
    } else {
        let bundle = TrainBundle {
            transition: transition.clone(),
            margin: cfg.margin,
            train: cfg.train.clone(),
            test: data.test.clone(),
        };
        let report = threshold_sweep(&data.train, &scores, &cfg.sweep, &bundle).at(Stage::Report)?;
        sink.put("sweep.txt", report.render(ReportFormat::Records).as_bytes()).at(Stage::Report)?;
        Some(report)
    };

    Ok(RunOutcome {
        data,
        scores,
        scores2,
        mask,
        transition,
        prior,
        training,
        eval,
        sweep,
        manifest: Manifest::default(),
    })
}

/// Score rows loaded from disk, validated against the dataset.
pub fn load_aligned_scores(path: &Path, dataset: &Dataset) -> Result<ScoreMatrix> {
    ingest_scores(io::load_scores(path)?, dataset)
}
