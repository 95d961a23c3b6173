//! On-disk formats.
//!
//! Every artifact has a line-oriented text form with a `#noiselens-<kind> v1`
//! header. Datasets, score matrices, embedding banks, embedding sets and
//! classifier checkpoints also have a little-endian binary twin starting with
//! the magic bytes `NLNS`, a `u16` version and a `u8` kind tag. Loaders detect
//! the binary form by its magic bytes.
//!
//! Floats are written with Rust's shortest round-trip formatting, so text
//! files reproduce values bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Dataset, LabelSpace, Sample, ScoreMatrix};
use crate::error::{Error, Result};
use crate::noise::CorruptionRecord;
use crate::priors::{ClassPrior, TransitionMatrix};
use crate::scorer::{ClassEmbeddingBank, EmbeddingSet};
use crate::selection::{Criterion, SelectionMask};
use crate::trainer::LinearClassifier;

pub const MAGIC: &[u8; 4] = b"NLNS";
pub const BINARY_VERSION: u16 = 1;

const KIND_DATASET: u8 = 1;
const KIND_SCORES: u8 = 2;
const KIND_BANK: u8 = 3;
const KIND_CLASSIFIER: u8 = 4;
const KIND_EMBEDDINGS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Encoding::Text),
            "binary" | "bin" => Ok(Encoding::Binary),
            other => Err(Error::invalid(format!("unknown encoding {other:?}"))),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::Header(format!("{} is not UTF-8 text", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_binary(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

// ---------------------------------------------------------------------------
// Text helpers

struct Header {
    fields: HashMap<String, String>,
}

impl Header {
    fn parse(line: &str, tag: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let want = format!("#noiselens-{tag}");
        match (parts.next(), parts.next()) {
            (Some(t), Some("v1")) if t == want => {}
            _ => return Err(Error::Header(format!("expected `{want} v1 ...`, got {line:?}"))),
        }
        let fields = parts
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Header(format!("bad header field {kv:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { fields })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .fields
            .get(key)
            .ok_or_else(|| Error::Header(format!("missing header field {key}")))?;
        raw.parse()
            .map_err(|_| Error::Header(format!("bad value {raw:?} for header field {key}")))
    }

    fn get_opt(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

/// Header plus the non-empty body lines, numbered from record 0.
fn split_text<'a>(text: &'a str, tag: &str) -> Result<(Header, Vec<&'a str>)> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Header("empty file".into()))?;
    let header = Header::parse(first, tag)?;
    let body = lines.filter(|l| !l.trim().is_empty()).collect();
    Ok((header, body))
}

fn parse_field<T: FromStr>(raw: &str, record: usize, what: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Malformed {
        record,
        reason: format!("cannot parse {what} from {raw:?}"),
    })
}

fn parse_floats(fields: &[&str], record: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| parse_field::<f64>(f, record, "float"))
        .collect()
}

fn check_count(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Header(format!("header declares {expected} records, file has {got}")))
    }
}

fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, ",{v:?}");
    }
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

// ---------------------------------------------------------------------------
// Binary helpers

struct BinWriter(Vec<u8>);

impl BinWriter {
    fn new(kind: u8) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        buf.push(kind);
        Self(buf)
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    fn open(buf: &'a [u8], kind: u8) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Header("missing NLNS magic".into()));
        }
        let version = r.u16()?;
        if version != BINARY_VERSION {
            return Err(Error::Header(format!("unsupported binary version {version}")));
        }
        let got = r.u8()?;
        if got != kind {
            return Err(Error::Header(format!("binary kind {got}, expected {kind}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Header(format!("binary file truncated at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Header("size does not fit in usize".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Header("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Header("non UTF-8 string".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Header(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset

pub fn dataset_to_text(ds: &Dataset) -> String {
    let gt = ds.has_ground_truth();
    let mut out = format!(
        "#noiselens-dataset v1 N={} C={} D={} GT={}\n",
        ds.len(),
        ds.num_classes(),
        ds.feature_dim(),
        u8::from(gt)
    );
    for s in ds.samples() {
        let _ = write!(out, "{},{}", s.id, s.noisy_label);
        if let Some(t) = s.true_label {
            let _ = write!(out, ",{t}");
        }
        push_floats(&mut out, &s.features);
        out.push('\n');
    }
    out
}

pub fn dataset_from_text(text: &str) -> Result<Dataset> {
    let (header, lines) = split_text(text, "dataset")?;
    let n: usize = header.get("N")?;
    let c: usize = header.get("C")?;
    let d: usize = header.get("D")?;
    let gt = match header.get::<u8>("GT")? {
        0 => false,
        1 => true,
        other => return Err(Error::Header(format!("GT must be 0 or 1, got {other}"))),
    };
    let label_space = LabelSpace::with_classes(c)?;
    let lead = if gt { 3 } else { 2 };
    let mut samples = Vec::with_capacity(lines.len());
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < lead {
            return Err(Error::Malformed {
                record,
                reason: format!("expected at least {lead} fields"),
            });
        }
        if fields.len() != lead + d {
            return Err(Error::DimensionMismatch {
                record,
                expected: d,
                got: fields.len() - lead,
            });
        }
        let id = parse_field(fields[0], record, "id")?;
        let noisy_label: usize = parse_field(fields[1], record, "label")?;
        let true_label: Option<usize> = if gt {
            Some(parse_field(fields[2], record, "true label")?)
        } else {
            None
        };
        for label in std::iter::once(noisy_label).chain(true_label) {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    record,
                    label,
                    num_classes: c,
                });
            }
        }
        samples.push(Sample {
            id,
            features: parse_floats(&fields[lead..], record)?,
            noisy_label,
            true_label,
        });
    }
    check_count(n, samples.len())?;
    Dataset::new(label_space, samples)
}

pub fn dataset_to_binary(ds: &Dataset) -> Vec<u8> {
    let mut w = BinWriter::new(KIND_DATASET);
    w.u64(ds.len() as u64);
    w.u64(ds.num_classes() as u64);
    w.u64(ds.feature_dim() as u64);
    w.u8(u8::from(ds.has_ground_truth()));
    for s in ds.samples() {
        w.u64(s.id);
        w.u32(s.noisy_label as u32);
        if let Some(t) = s.true_label {
            w.u32(t as u32);
        }
        w.f64s(&s.features);
    }
    w.0
}

pub fn dataset_from_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = BinReader::open(bytes, KIND_DATASET)?;
    let n = r.usize()?;
    let c = r.usize()?;
    let d = r.usize()?;
    let gt = r.u8()? == 1;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for record in 0..n {
        let id = r.u64()?;
        let noisy_label = r.u32()? as usize;
        let true_label = if gt { Some(r.u32()? as usize) } else { None };
        for label in std::iter::once(noisy_label).chain(true_label) {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    record,
                    label,
                    num_classes: c,
                });
            }
        }
        samples.push(Sample {
            id,
            features: r.f64s(d)?,
            noisy_label,
            true_label,
        });
    }
    r.finish()?;
    Dataset::new(LabelSpace::with_classes(c)?, samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if is_binary(&bytes) {
        dataset_from_binary(&bytes)
    } else {
        dataset_from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Header("dataset is not UTF-8".into()))?)
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => dataset_to_text(ds).into_bytes(),
        Encoding::Binary => dataset_to_binary(ds),
    };
    write_file(path.as_ref(), &bytes)
}

// ---------------------------------------------------------------------------
// Score matrix

pub fn scores_to_text(s: &ScoreMatrix) -> String {
    let mut out = format!("#noiselens-scores v1 N={} C={}\n", s.rows(), s.cols());
    for (id, row) in s.sample_ids().iter().zip(s.values()) {
        let _ = write!(out, "{id}");
        push_floats(&mut out, row);
        out.push('\n');
    }
    out
}

pub fn scores_from_text(text: &str) -> Result<ScoreMatrix> {
    let (header, lines) = split_text(text, "scores")?;
    let n: usize = header.get("N")?;
    let c: usize = header.get("C")?;
    let mut ids = Vec::with_capacity(lines.len());
    let mut rows = Vec::with_capacity(lines.len());
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 1 {
            return Err(Error::DimensionMismatch {
                record,
                expected: c,
                got: fields.len().saturating_sub(1),
            });
        }
        ids.push(parse_field(fields[0], record, "id")?);
        rows.push(parse_floats(&fields[1..], record)?);
    }
    check_count(n, rows.len())?;
    ScoreMatrix::new(ids, rows)
}

pub fn scores_to_binary(s: &ScoreMatrix) -> Vec<u8> {
    let mut w = BinWriter::new(KIND_SCORES);
    w.u64(s.rows() as u64);
    w.u64(s.cols() as u64);
    for (id, row) in s.sample_ids().iter().zip(s.values()) {
        w.u64(*id);
        w.f64s(row);
    }
    w.0
}

pub fn scores_from_binary(bytes: &[u8]) -> Result<ScoreMatrix> {
    let mut r = BinReader::open(bytes, KIND_SCORES)?;
    let n = r.usize()?;
    let c = r.usize()?;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    let mut rows = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        ids.push(r.u64()?);
        rows.push(r.f64s(c)?);
    }
    r.finish()?;
    ScoreMatrix::new(ids, rows)
}

/// Loads a score file. Callers are expected to validate it against a dataset
/// (see [`crate::data::ingest_scores`]).
pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if is_binary(&bytes) {
        scores_from_binary(&bytes)
    } else {
        scores_from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Header("scores are not UTF-8".into()))?)
    }
}

pub fn save_scores(path: impl AsRef<Path>, s: &ScoreMatrix, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => scores_to_text(s).into_bytes(),
        Encoding::Binary => scores_to_binary(s),
    };
    write_file(path.as_ref(), &bytes)
}

// ---------------------------------------------------------------------------
// Class embedding bank

pub fn bank_to_text(bank: &ClassEmbeddingBank) -> String {
    let mut out = format!(
        "#noiselens-bank v1 C={} D={} PROMPT={}\n",
        bank.num_classes(),
        bank.dim(),
        bank.prompt_id()
    );
    for (k, e) in bank.embeddings().iter().enumerate() {
        let _ = write!(out, "{k}");
        push_floats(&mut out, e);
        out.push('\n');
    }
    out
}

pub fn bank_from_text(text: &str) -> Result<ClassEmbeddingBank> {
    let (header, lines) = split_text(text, "bank")?;
    let c: usize = header.get("C")?;
    let d: usize = header.get("D")?;
    let prompt = header.get_opt("PROMPT").unwrap_or("default").to_string();
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; c];
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::DimensionMismatch {
                record,
                expected: d,
                got: fields.len().saturating_sub(1),
            });
        }
        let k: usize = parse_field(fields[0], record, "class index")?;
        if k >= c {
            return Err(Error::LabelOutOfRange {
                record,
                label: k,
                num_classes: c,
            });
        }
        if slots[k].is_some() {
            return Err(Error::Malformed {
                record,
                reason: format!("class {k} listed twice"),
            });
        }
        slots[k] = Some(parse_floats(&fields[1..], record)?);
    }
    let embeddings = slots
        .into_iter()
        .enumerate()
        .map(|(k, e)| e.ok_or_else(|| Error::Header(format!("bank is missing class {k}"))))
        .collect::<Result<Vec<_>>>()?;
    ClassEmbeddingBank::new(embeddings, prompt)
}

pub fn bank_to_binary(bank: &ClassEmbeddingBank) -> Vec<u8> {
    let mut w = BinWriter::new(KIND_BANK);
    w.u64(bank.num_classes() as u64);
    w.u64(bank.dim() as u64);
    w.str(bank.prompt_id());
    for (k, e) in bank.embeddings().iter().enumerate() {
        w.u64(k as u64);
        w.f64s(e);
    }
    w.0
}

pub fn bank_from_binary(bytes: &[u8]) -> Result<ClassEmbeddingBank> {
    let mut r = BinReader::open(bytes, KIND_BANK)?;
    let c = r.usize()?;
    let d = r.usize()?;
    let prompt = r.str()?;
    let mut embeddings = Vec::with_capacity(c.min(1 << 16));
    for record in 0..c {
        let k = r.usize()?;
        if k != record {
            return Err(Error::Malformed {
                record,
                reason: format!("class index {k} out of order"),
            });
        }
        embeddings.push(r.f64s(d)?);
    }
    r.finish()?;
    ClassEmbeddingBank::new(embeddings, prompt)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<ClassEmbeddingBank> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if is_binary(&bytes) {
        bank_from_binary(&bytes)
    } else {
        bank_from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Header("bank is not UTF-8".into()))?)
    }
}

pub fn save_bank(path: impl AsRef<Path>, bank: &ClassEmbeddingBank, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => bank_to_text(bank).into_bytes(),
        Encoding::Binary => bank_to_binary(bank),
    };
    write_file(path.as_ref(), &bytes)
}

// ---------------------------------------------------------------------------
// Embedding set (surrogate-space embeddings separate from dataset features)

pub fn embeddings_to_text(set: &EmbeddingSet) -> String {
    let d = set.vectors.first().map_or(0, Vec::len);
    let mut out = format!("#noiselens-embeddings v1 N={} D={d}\n", set.ids.len());
    for (id, v) in set.ids.iter().zip(&set.vectors) {
        let _ = write!(out, "{id}");
        push_floats(&mut out, v);
        out.push('\n');
    }
    out
}

pub fn embeddings_from_text(text: &str) -> Result<EmbeddingSet> {
    let (header, lines) = split_text(text, "embeddings")?;
    let n: usize = header.get("N")?;
    let d: usize = header.get("D")?;
    let mut ids = Vec::with_capacity(lines.len());
    let mut vectors = Vec::with_capacity(lines.len());
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::DimensionMismatch {
                record,
                expected: d,
                got: fields.len().saturating_sub(1),
            });
        }
        ids.push(parse_field(fields[0], record, "id")?);
        vectors.push(parse_floats(&fields[1..], record)?);
    }
    check_count(n, ids.len())?;
    Ok(EmbeddingSet { ids, vectors })
}

pub fn embeddings_to_binary(set: &EmbeddingSet) -> Vec<u8> {
    let d = set.vectors.first().map_or(0, Vec::len);
    let mut w = BinWriter::new(KIND_EMBEDDINGS);
    w.u64(set.ids.len() as u64);
    w.u64(d as u64);
    for (id, v) in set.ids.iter().zip(&set.vectors) {
        w.u64(*id);
        w.f64s(v);
    }
    w.0
}

pub fn embeddings_from_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = BinReader::open(bytes, KIND_EMBEDDINGS)?;
    let n = r.usize()?;
    let d = r.usize()?;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    let mut vectors = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        ids.push(r.u64()?);
        vectors.push(r.f64s(d)?);
    }
    r.finish()?;
    Ok(EmbeddingSet { ids, vectors })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if is_binary(&bytes) {
        embeddings_from_binary(&bytes)
    } else {
        embeddings_from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Header("embeddings are not UTF-8".into()))?)
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => embeddings_to_text(set).into_bytes(),
        Encoding::Binary => embeddings_to_binary(set),
    };
    write_file(path.as_ref(), &bytes)
}

// ---------------------------------------------------------------------------
// Selection mask

pub fn mask_to_text(mask: &SelectionMask) -> String {
    let mut out = format!(
        "#noiselens-mask v1 N={} CRITERION={} THRESHOLD={:?}\n",
        mask.len(),
        mask.criterion,
        mask.threshold
    );
    for ((id, score), verdict) in mask.sample_ids.iter().zip(&mask.scores).zip(&mask.verdicts) {
        let _ = writeln!(out, "{id},{score:?},{}", u8::from(*verdict));
    }
    out
}

pub fn mask_from_text(text: &str) -> Result<SelectionMask> {
    let (header, lines) = split_text(text, "mask")?;
    let n: usize = header.get("N")?;
    let criterion: Criterion = header
        .get_opt("CRITERION")
        .ok_or_else(|| Error::Header("missing header field CRITERION".into()))?
        .parse()?;
    let threshold: f64 = header.get("THRESHOLD")?;
    let mut mask = SelectionMask {
        sample_ids: Vec::with_capacity(lines.len()),
        verdicts: Vec::with_capacity(lines.len()),
        scores: Vec::with_capacity(lines.len()),
        criterion,
        threshold,
    };
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed {
                record,
                reason: "expected id,score,verdict".into(),
            });
        }
        mask.sample_ids.push(parse_field(fields[0], record, "id")?);
        mask.scores.push(parse_field(fields[1], record, "score")?);
        mask.verdicts.push(match fields[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::Malformed {
                    record,
                    reason: format!("bad verdict {other:?}"),
                })
            }
        });
    }
    check_count(n, mask.len())?;
    Ok(mask)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SelectionMask> {
    mask_from_text(&read_text(path.as_ref())?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &SelectionMask) -> Result<()> {
    write_file(path.as_ref(), mask_to_text(mask).as_bytes())
}

// ---------------------------------------------------------------------------
// Transition matrix and class prior

fn join_counts(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn parse_counts(raw: &str, c: usize) -> Result<Vec<usize>> {
    let counts = raw
        .split(';')
        .map(|v| v.parse().map_err(|_| Error::Header(format!("bad count {v:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    if counts.len() != c {
        return Err(Error::Header(format!("{} counts for {c} classes", counts.len())));
    }
    Ok(counts)
}

/// Header carries an optional `COUNTS=n0;n1;...` field with the per-class
/// sample counts behind each row.
pub fn tm_to_text(m: &TransitionMatrix) -> String {
    let mut out = format!(
        "#noiselens-tm v1 C={} COUNTS={}\n",
        m.num_classes(),
        join_counts(m.source_count())
    );
    for row in m.values() {
        out.push_str(&join_floats(row));
        out.push('\n');
    }
    out
}

pub fn tm_from_text(text: &str) -> Result<TransitionMatrix> {
    let (header, lines) = split_text(text, "tm")?;
    let c: usize = header.get("C")?;
    let counts = match header.get_opt("COUNTS") {
        Some(raw) => parse_counts(raw, c)?,
        None => vec![0; c],
    };
    let rows = lines
        .iter()
        .enumerate()
        .map(|(record, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: c,
                    got: fields.len(),
                });
            }
            parse_floats(&fields, record)
        })
        .collect::<Result<Vec<_>>>()?;
    check_count(c, rows.len())?;
    TransitionMatrix::from_rows(rows, counts)
}

pub fn load_tm(path: impl AsRef<Path>) -> Result<TransitionMatrix> {
    tm_from_text(&read_text(path.as_ref())?)
}

pub fn save_tm(path: impl AsRef<Path>, m: &TransitionMatrix) -> Result<()> {
    write_file(path.as_ref(), tm_to_text(m).as_bytes())
}

/// One `class,count,value` line per class; `value` is the smoothed prior.
pub fn prior_to_text(p: &ClassPrior) -> String {
    let mut out = format!("#noiselens-prior v1 C={} N={}\n", p.num_classes(), p.total());
    for (k, (count, value)) in p.counts().iter().zip(p.values()).enumerate() {
        let _ = writeln!(out, "{k},{count},{value:?}");
    }
    out
}

pub fn prior_from_text(text: &str) -> Result<ClassPrior> {
    let (header, lines) = split_text(text, "prior")?;
    let c: usize = header.get("C")?;
    let mut counts = vec![0usize; c];
    let mut values = vec![f64::NAN; c];
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed {
                record,
                reason: "expected class,count,value".into(),
            });
        }
        let k: usize = parse_field(fields[0], record, "class")?;
        if k >= c {
            return Err(Error::LabelOutOfRange {
                record,
                label: k,
                num_classes: c,
            });
        }
        counts[k] = parse_field(fields[1], record, "count")?;
        values[k] = parse_field(fields[2], record, "value")?;
    }
    check_count(c, lines.len())?;
    let prior = ClassPrior::from_parts(values, counts)?;
    let total: usize = header.get("N")?;
    if total != prior.total() {
        return Err(Error::Header(format!("N={total} but counts sum to {}", prior.total())));
    }
    Ok(prior)
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<ClassPrior> {
    prior_from_text(&read_text(path.as_ref())?)
}

pub fn save_prior(path: impl AsRef<Path>, p: &ClassPrior) -> Result<()> {
    write_file(path.as_ref(), prior_to_text(p).as_bytes())
}

// ---------------------------------------------------------------------------
// Corruption record

/// Header, then one line with the comma-separated flipped ids (empty when
/// nothing flipped), then C rows of the realized transition matrix.
pub fn corruption_to_text(rec: &CorruptionRecord) -> String {
    let c = rec.realized_transition.len();
    let mut out = format!(
        "#noiselens-corruption v1 C={c} FLIPPED={} RATE={:?}\n",
        rec.flipped_ids.len(),
        rec.realized_rate
    );
    out.push_str(
        &rec.flipped_ids
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for row in &rec.realized_transition {
        out.push_str(&join_floats(row));
        out.push('\n');
    }
    out
}

pub fn corruption_from_text(text: &str) -> Result<CorruptionRecord> {
    let mut lines = text.lines();
    let header = Header::parse(
        lines.next().ok_or_else(|| Error::Header("empty file".into()))?,
        "corruption",
    )?;
    let c: usize = header.get("C")?;
    let flipped: usize = header.get("FLIPPED")?;
    let realized_rate: f64 = header.get("RATE")?;
    let ids_line = lines.next().unwrap_or("");
    let flipped_ids = ids_line
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_field::<u64>(s, 0, "id"))
        .collect::<Result<BTreeSet<u64>>>()?;
    if flipped_ids.len() != flipped {
        return Err(Error::Header(format!("FLIPPED={flipped} but {} ids listed", flipped_ids.len())));
    }
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(record, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c {
                return Err(Error::DimensionMismatch {
                    record: record + 1,
                    expected: c,
                    got: fields.len(),
                });
            }
            parse_floats(&fields, record + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    check_count(c, rows.len())?;
    Ok(CorruptionRecord {
        flipped_ids,
        realized_rate,
        realized_transition: rows,
    })
}

pub fn load_corruption(path: impl AsRef<Path>) -> Result<CorruptionRecord> {
    corruption_from_text(&read_text(path.as_ref())?)
}

pub fn save_corruption(path: impl AsRef<Path>, rec: &CorruptionRecord) -> Result<()> {
    write_file(path.as_ref(), corruption_to_text(rec).as_bytes())
}

// ---------------------------------------------------------------------------
// Classifier checkpoint

/// C weight rows followed by one bias row.
pub fn classifier_to_text(clf: &LinearClassifier) -> String {
    let mut out = format!("#noiselens-clf v1 C={} D={}\n", clf.num_classes(), clf.dim());
    for row in &clf.weights {
        out.push_str(&join_floats(row));
        out.push('\n');
    }
    out.push_str(&join_floats(&clf.bias));
    out.push('\n');
    out
}

pub fn classifier_from_text(text: &str) -> Result<LinearClassifier> {
    let (header, lines) = split_text(text, "clf")?;
    let c: usize = header.get("C")?;
    let d: usize = header.get("D")?;
    check_count(c + 1, lines.len())?;
    let mut rows = Vec::with_capacity(c);
    for (record, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let want = if record < c { d } else { c };
        if fields.len() != want {
            return Err(Error::DimensionMismatch {
                record,
                expected: want,
                got: fields.len(),
            });
        }
        rows.push(parse_floats(&fields, record)?);
    }
    let bias = rows.pop().unwrap_or_default();
    Ok(LinearClassifier { weights: rows, bias })
}

pub fn classifier_to_binary(clf: &LinearClassifier) -> Vec<u8> {
    let mut w = BinWriter::new(KIND_CLASSIFIER);
    w.u64(clf.num_classes() as u64);
    w.u64(clf.dim() as u64);
    for row in &clf.weights {
        w.f64s(row);
    }
    w.f64s(&clf.bias);
    w.0
}

pub fn classifier_from_binary(bytes: &[u8]) -> Result<LinearClassifier> {
    let mut r = BinReader::open(bytes, KIND_CLASSIFIER)?;
    let c = r.usize()?;
    let d = r.usize()?;
    let weights = (0..c).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
    let bias = r.f64s(c)?;
    r.finish()?;
    Ok(LinearClassifier { weights, bias })
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<LinearClassifier> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if is_binary(&bytes) {
        classifier_from_binary(&bytes)
    } else {
        classifier_from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Header("checkpoint is not UTF-8".into()))?)
    }
}

pub fn save_classifier(path: impl AsRef<Path>, clf: &LinearClassifier, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => classifier_to_text(clf).into_bytes(),
        Encoding::Binary => classifier_to_binary(clf),
    };
    write_file(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{inject_symmetric, make_blobs, NoiseSpec};
    use proptest::prelude::*;

    const SMALL: &str = "#noiselens-dataset v1 N=3 C=2 D=4 GT=0\n\
        0,0,1.0,2.0,3.0,4.0\n\
        1,1,0.5,-0.25,1e-3,7\n\
        2,0,0,0,0,1\n";

    #[test]
    fn parses_smallest_file() {
        let ds = dataset_from_text(SMALL).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert!(!ds.has_ground_truth());
        assert_eq!(ds.samples()[1].features[2], 1e-3);
    }

    #[test]
    fn label_equal_to_c_is_out_of_range() {
        let text = SMALL.replace("1,1,0.5", "1,2,0.5");
        match dataset_from_text(&text) {
            Err(Error::LabelOutOfRange { record, label, .. }) => assert_eq!((record, label), (1, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        let short = SMALL.replace("2,0,0,0,0,1", "2,0,0,0,1");
        assert!(matches!(dataset_from_text(&short), Err(Error::DimensionMismatch { record: 2, .. })));
        let dup = SMALL.replace("2,0,0,0,0,1", "1,0,0,0,0,1");
        assert!(matches!(dataset_from_text(&dup), Err(Error::DuplicateId { record: 2, id: 1 })));
        let junk = SMALL.replace("0.5", "zebra");
        assert!(matches!(dataset_from_text(&junk), Err(Error::Malformed { record: 1, .. })));
        let count = SMALL.replace("N=3", "N=4");
        assert!(matches!(dataset_from_text(&count), Err(Error::Header(_))));
        assert!(dataset_from_text("#noiselens-scores v1 N=0 C=2\n").is_err());
    }

    #[test]
    fn text_and_binary_round_trip_with_ground_truth() {
        let ds = make_blobs(3, 7, 5, 2.5, 9).unwrap();
        let (noisy, rec) = inject_symmetric(&ds, &NoiseSpec::symmetric(0.5, 1)).unwrap();
        assert_eq!(dataset_from_text(&dataset_to_text(&noisy)).unwrap(), noisy);
        assert_eq!(dataset_from_binary(&dataset_to_binary(&noisy)).unwrap(), noisy);
        assert_eq!(corruption_from_text(&corruption_to_text(&rec)).unwrap(), rec);
    }

    #[test]
    fn loaders_detect_binary_by_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_blobs(2, 4, 3, 1.0, 2).unwrap();
        let p = dir.path().join("ds.bin");
        save_dataset(&p, &ds, Encoding::Binary).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..4], MAGIC);
        assert_eq!(load_dataset(&p).unwrap(), ds);
        let s = ScoreMatrix::uniform(ds.ids().collect(), 2).unwrap();
        let p = dir.path().join("s.bin");
        save_scores(&p, &s, Encoding::Binary).unwrap();
        assert_eq!(load_scores(&p).unwrap(), s);
        let p = dir.path().join("s.txt");
        save_scores(&p, &s, Encoding::Text).unwrap();
        assert_eq!(load_scores(&p).unwrap(), s);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let ds = make_blobs(2, 4, 3, 1.0, 2).unwrap();
        let bytes = dataset_to_binary(&ds);
        assert!(dataset_from_binary(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[6] = KIND_SCORES;
        assert!(dataset_from_binary(&wrong).is_err());
    }

    #[test]
    fn other_artifacts_round_trip() {
        let bank = ClassEmbeddingBank::new(vec![vec![1.0, 0.5], vec![-0.1, 2.0], vec![0.3, 0.3]], "photo").unwrap();
        assert_eq!(bank_from_text(&bank_to_text(&bank)).unwrap(), bank);
        assert_eq!(bank_from_binary(&bank_to_binary(&bank)).unwrap(), bank);

        let set = EmbeddingSet {
            ids: vec![4, 9],
            vectors: vec![vec![0.1, 0.2], vec![0.3, -0.4]],
        };
        assert_eq!(embeddings_from_text(&embeddings_to_text(&set)).unwrap(), set);
        assert_eq!(embeddings_from_binary(&embeddings_to_binary(&set)).unwrap(), set);

        let mask = SelectionMask {
            sample_ids: vec![3, 5, 8],
            verdicts: vec![true, false, true],
            scores: vec![0.9, 0.1, 0.50000000000000011],
            criterion: Criterion::PromptConsistency,
            threshold: 0.1,
        };
        assert_eq!(mask_from_text(&mask_to_text(&mask)).unwrap(), mask);

        let tm = TransitionMatrix::from_rows(vec![vec![0.7, 0.3], vec![0.2, 0.8]], vec![10, 12]).unwrap();
        assert_eq!(tm_from_text(&tm_to_text(&tm)).unwrap(), tm);
        let prior = ClassPrior::from_counts(vec![3, 0, 9]).unwrap();
        assert_eq!(prior_from_text(&prior_to_text(&prior)).unwrap(), prior);

        let clf = LinearClassifier {
            weights: vec![vec![0.1, -0.2, 0.3], vec![1e-300, 5.0, -7.25]],
            bias: vec![0.5, -0.5],
        };
        assert_eq!(classifier_from_text(&classifier_to_text(&clf)).unwrap(), clf);
        assert_eq!(classifier_from_binary(&classifier_to_binary(&clf)).unwrap(), clf);
    }

    #[test]
    fn mask_header_matches_format() {
        let mask = SelectionMask {
            sample_ids: vec![1],
            verdicts: vec![true],
            scores: vec![0.75],
            criterion: Criterion::Confidence,
            threshold: 0.5,
        };
        assert_eq!(
            mask_to_text(&mask),
            "#noiselens-mask v1 N=1 CRITERION=confidence THRESHOLD=0.5\n1,0.75,1\n"
        );
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (2usize..5, 1usize..6, 1usize..12, any::<bool>()).prop_flat_map(|(c, d, n, gt)| {
            prop::collection::vec(
                (
                    prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, d),
                    0..c,
                    0..c,
                ),
                n,
            )
            .prop_map(move |rows| {
                let samples = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (features, y, t))| Sample {
                        id: (i as u64) * 3 + 1,
                        features,
                        noisy_label: y,
                        true_label: gt.then_some(t),
                    })
                    .collect();
                Dataset::new(LabelSpace::with_classes(c).unwrap(), samples).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn dataset_round_trips_bit_exactly(ds in arb_dataset()) {
            let text = dataset_from_text(&dataset_to_text(&ds)).unwrap();
            let bin = dataset_from_binary(&dataset_to_binary(&ds)).unwrap();
            for back in [text, bin] {
                prop_assert_eq!(back.noisy_labels(), ds.noisy_labels());
                for (a, b) in back.samples().iter().zip(ds.samples()) {
                    prop_assert_eq!(a.true_label, b.true_label);
                    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(&a.features), bits(&b.features));
                }
            }
        }
    }
}
