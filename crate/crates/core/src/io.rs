//! Reading and writing datasets, policies and results.
//!
//! A dataset is a directory holding a JSON manifest plus one CSV per head
//! and split:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "num_classes": 3,
//!   "heads": [
//!     { "budget_gflops": 0.5, "risk": 0.4,
//!       "probs_csv": { "train": "train/head_1.csv", "calib": "calib/head_1.csv", "test": "test/head_1.csv" } }
//!   ],
//!   "labels_csv": { "train": "train/labels.csv", "test": "test/labels.csv" }
//! }
//! ```
//!
//! Probability files have the header `instance_id,p_1,...,p_K` and one row
//! per instance, sorted by strictly increasing `instance_id`. Label files
//! have the header `instance_id,label` with 1-based class indices. Paths
//! are relative to the manifest; a `.gz` suffix is decompressed on the fly.
//! Heads and classes are 1-based in files and 0-based in memory.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BatchResult, Dataset, DomainError, HeadBank, HeadSlice, Split, SplitData};
use crate::scoring::head_predict;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("file not found: {}", path.display())]
    FileNotFound { path: PathBuf },

    #[error("{}:{row}:{column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid manifest {}: {message}", path.display())]
    InvalidManifest { path: PathBuf, message: String },

    #[error("{split} split: {source}")]
    Domain {
        split: &'static str,
        #[source]
        source: DomainError,
    },

    #[error("the {0} split has no labels")]
    MissingLabels(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::FileNotFound {
                path: path.to_path_buf(),
            }
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn parse(file: &Path, row: usize, column: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            file: file.to_path_buf(),
            row,
            column,
            message: message.into(),
        }
    }
}

/// One path per split. `calib` is required for probability files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl SplitPaths {
    pub fn get(&self, split: Split) -> Option<&str> {
        match split {
            Split::Train => self.train.as_deref(),
            Split::Calib => self.calib.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }

    fn set(&mut self, split: Split, path: String) {
        match split {
            Split::Train => self.train = Some(path),
            Split::Calib => self.calib = Some(path),
            Split::Test => self.test = Some(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHead {
    pub budget_gflops: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    pub probs_csv: SplitPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub heads: Vec<ManifestHead>,
    #[serde(default)]
    pub labels_csv: SplitPaths,
}

/// Resolves `--data`: a directory means its `manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::parse(path, e.line(), e.column(), e.to_string()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<(), IoError>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| IoError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<Box<dyn Read>>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader))
}

fn csv_error(path: &Path, err: csv::Error) -> IoError {
    let row = err.position().map_or(0, |p| p.line() as usize);
    let column = match err.kind() {
        csv::ErrorKind::Utf8 { err, .. } => err.field() + 1,
        _ => 0,
    };
    match err.into_kind() {
        csv::ErrorKind::Io(e) => IoError::io(path, e),
        kind => IoError::parse(path, row, column, format!("{kind:?}")),
    }
}

/// Rows of a CSV file with the expected header, as `(line, fields)`.
fn read_records(
    path: &Path,
    header: &[String],
) -> Result<Vec<(usize, csv::StringRecord)>, IoError> {
    let mut reader = open_csv(path)?;
    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(IoError::parse(path, 1, 1, "missing header row")),
    };
    check_width(path, 1, &first, header.len())?;
    for (j, (got, want)) in first.iter().zip(header).enumerate() {
        if got.trim().trim_start_matches('\u{feff}') != want {
            return Err(IoError::parse(
                path,
                1,
                j + 1,
                format!("expected header {want:?}, found {got:?}"),
            ));
        }
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        check_width(path, line, &rec, header.len())?;
        out.push((line, rec));
    }
    Ok(out)
}

fn check_width(
    path: &Path,
    line: usize,
    rec: &csv::StringRecord,
    width: usize,
) -> Result<(), IoError> {
    if rec.len() != width {
        let column = rec.len().min(width) + 1;
        return Err(IoError::parse(
            path,
            line,
            column,
            format!("expected {width} fields, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    column: usize,
    text: &str,
) -> Result<T, IoError>
where
    T::Err: fmt::Display,
{
    text.trim()
        .parse()
        .map_err(|e| IoError::parse(path, line, column, format!("{text:?}: {e}")))
}

/// Checks ids are strictly increasing.
fn check_sorted(path: &Path, ids: &[u64], lines: &[usize]) -> Result<(), IoError> {
    for w in 1..ids.len() {
        if ids[w] <= ids[w - 1] {
            return Err(IoError::parse(
                path,
                lines[w],
                1,
                format!(
                    "instance_id {} does not increase after {}",
                    ids[w],
                    ids[w - 1]
                ),
            ));
        }
    }
    Ok(())
}

/// Instance ids, source line numbers and row-major probabilities.
struct ProbsFile {
    path: PathBuf,
    ids: Vec<u64>,
    lines: Vec<usize>,
    probs: Vec<f64>,
}

fn read_probs(path: &Path, num_classes: usize) -> Result<ProbsFile, IoError> {
    let header: Vec<String> = std::iter::once("instance_id".to_string())
        .chain((1..=num_classes).map(|c| format!("p_{c}")))
        .collect();
    let records = read_records(path, &header)?;
    let mut ids = Vec::with_capacity(records.len());
    let mut lines = Vec::with_capacity(records.len());
    let mut probs = Vec::with_capacity(records.len() * num_classes);
    for (line, rec) in &records {
        ids.push(parse_field(path, *line, 1, &rec[0])?);
        lines.push(*line);
        for c in 0..num_classes {
            probs.push(parse_field::<f64>(path, *line, c + 2, &rec[c + 1])?);
        }
    }
    check_sorted(path, &ids, &lines)?;
    Ok(ProbsFile {
        path: path.to_path_buf(),
        ids,
        lines,
        probs,
    })
}

/// Ids, source line numbers and 0-based labels of one labels file.
type LabelColumns = (Vec<u64>, Vec<usize>, Vec<usize>);

fn read_labels(path: &Path, num_classes: usize) -> Result<LabelColumns, IoError> {
    let header = ["instance_id".to_string(), "label".to_string()];
    let records = read_records(path, &header)?;
    let mut ids = Vec::with_capacity(records.len());
    let mut lines = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        ids.push(parse_field(path, *line, 1, &rec[0])?);
        lines.push(*line);
        let label: usize = parse_field(path, *line, 2, &rec[1])?;
        if !(1..=num_classes).contains(&label) {
            return Err(IoError::parse(
                path,
                *line,
                2,
                format!("label {label} outside 1..={num_classes}"),
            ));
        }
        labels.push(label - 1);
    }
    check_sorted(path, &ids, &lines)?;
    Ok((ids, lines, labels))
}

/// Reports the first row where `ids` departs from `reference`.
fn check_same_ids(
    path: &Path,
    ids: &[u64],
    lines: &[usize],
    reference: &[u64],
    reference_path: &Path,
) -> Result<(), IoError> {
    if let Some(k) = (0..ids.len().min(reference.len())).find(|&k| ids[k] != reference[k]) {
        return Err(IoError::parse(
            path,
            lines[k],
            1,
            format!(
                "instance_id {} does not match {} at the same row of {}",
                ids[k],
                reference[k],
                reference_path.display()
            ),
        ));
    }
    if ids.len() != reference.len() {
        let line = lines
            .get(reference.len())
            .copied()
            .unwrap_or(lines.last().map_or(1, |l| l + 1));
        return Err(IoError::parse(
            path,
            line,
            1,
            format!(
                "{} rows, but {} has {}",
                ids.len(),
                reference_path.display(),
                reference.len()
            ),
        ));
    }
    Ok(())
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn load_split(
    manifest: &Manifest,
    base: &Path,
    split: Split,
) -> Result<Option<SplitData>, IoError> {
    let paths: Vec<Option<&str>> = manifest
        .heads
        .iter()
        .map(|h| h.probs_csv.get(split))
        .collect();
    if paths.iter().all(Option::is_none) {
        return Ok(None);
    }
    if let Some(l) = paths.iter().position(Option::is_none) {
        return Err(IoError::InvalidManifest {
            path: base.join(MANIFEST_NAME),
            message: format!(
                "head {} has no {} file while other heads do",
                l + 1,
                split.name()
            ),
        });
    }
    let files: Vec<ProbsFile> = paths
        .par_iter()
        .map(|p| read_probs(&resolve(base, p.unwrap()), manifest.num_classes))
        .collect::<Result<_, _>>()?;
    let reference = &files[0];
    for f in &files[1..] {
        check_same_ids(&f.path, &f.ids, &f.lines, &reference.ids, &reference.path)?;
    }
    let labels = match manifest.labels_csv.get(split) {
        Some(rel) => {
            let path = resolve(base, rel);
            let (ids, lines, labels) = read_labels(&path, manifest.num_classes)?;
            check_same_ids(&path, &ids, &lines, &reference.ids, &reference.path)?;
            Some(labels)
        }
        None => None,
    };
    let instance_ids = reference.ids.clone();
    let domain = |source| IoError::Domain {
        split: split.name(),
        source,
    };
    let heads = files
        .into_iter()
        .zip(&manifest.heads)
        .map(|(f, h)| HeadSlice::new(f.probs, manifest.num_classes, h.budget_gflops, h.risk))
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain)?;
    let bank = HeadBank::new(heads).map_err(domain)?;
    Ok(Some(SplitData {
        bank,
        instance_ids,
        labels,
    }))
}

/// Loads a dataset from a manifest file or a directory containing one.
/// Nothing is returned unless every file parses and validates.
pub fn load_manifest(path: &Path) -> Result<Dataset, IoError> {
    let path = manifest_path(path);
    let manifest: Manifest = read_json(&path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(IoError::InvalidManifest {
            path,
            message: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    if manifest.heads.is_empty() {
        return Err(IoError::InvalidManifest {
            path,
            message: "no heads".into(),
        });
    }
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let calib =
        load_split(&manifest, &base, Split::Calib)?.ok_or_else(|| IoError::InvalidManifest {
            path: path.clone(),
            message: "every head needs a calib file".into(),
        })?;
    let train = load_split(&manifest, &base, Split::Train)?;
    let test = load_split(&manifest, &base, Split::Test)?;
    Ok(Dataset { train, calib, test })
}

/// Per-head 0-1 risk of the raw argmax on a labeled bank.
pub fn risks_from_labels(bank: &HeadBank, labels: &[usize]) -> Vec<f64> {
    let n = labels.len() as f64;
    bank.heads()
        .iter()
        .map(|h| {
            let wrong = h
                .rows()
                .zip(labels)
                .filter(|(row, &y)| head_predict(row) != y)
                .count();
            wrong as f64 / n
        })
        .collect()
}

/// Per-head empirical risk on a labeled split, without jitter.
pub fn compute_risks(split: &SplitData, name: &'static str) -> Result<Vec<f64>, IoError> {
    let labels = split
        .labels
        .as_deref()
        .ok_or(IoError::MissingLabels(name))?;
    Ok(risks_from_labels(&split.bank, labels))
}

fn write_probs_csv(path: &Path, ids: &[u64], head: &HeadSlice) -> Result<(), IoError> {
    write_atomic(path, |w| {
        write!(w, "instance_id")?;
        for c in 1..=head.num_classes() {
            write!(w, ",p_{c}")?;
        }
        writeln!(w)?;
        for (id, row) in ids.iter().zip(head.rows()) {
            write!(w, "{id}")?;
            for &p in row {
                write!(w, ",{}", format_f64(p))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

fn write_labels_csv(path: &Path, ids: &[u64], labels: &[usize]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        writeln!(w, "instance_id,label")?;
        for (id, y) in ids.iter().zip(labels) {
            writeln!(w, "{id},{}", y + 1)?;
        }
        Ok(())
    })
}

/// Writes `dataset` as a manifest plus CSVs under `dir` and returns the
/// manifest. Head risks are taken from the calibration bank.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest, IoError> {
    let m = dataset.num_heads();
    let mut heads: Vec<ManifestHead> = dataset
        .calib
        .bank
        .heads()
        .iter()
        .map(|h| ManifestHead {
            budget_gflops: h.budget_gflops(),
            risk: h.risk(),
            probs_csv: SplitPaths::default(),
        })
        .collect();
    let mut labels_csv = SplitPaths::default();
    for split in Split::ALL {
        let Some(data) = dataset.split(split) else {
            continue;
        };
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| IoError::io(&sub, e))?;
        (0..m)
            .into_par_iter()
            .map(|l| {
                let rel = format!("{}/head_{}.csv", split.name(), l + 1);
                write_probs_csv(&dir.join(&rel), &data.instance_ids, data.bank.head(l))
            })
            .collect::<Result<Vec<()>, _>>()?;
        for (l, h) in heads.iter_mut().enumerate() {
            h.probs_csv
                .set(split, format!("{}/head_{}.csv", split.name(), l + 1));
        }
        if let Some(labels) = &data.labels {
            let rel = format!("{}/labels.csv", split.name());
            write_labels_csv(&dir.join(&rel), &data.instance_ids, labels)?;
            labels_csv.set(split, rel);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_classes: dataset.num_classes(),
        heads,
        labels_csv,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// `instance_id,exit_head,prediction,cost,correct` with 1-based heads and
/// classes; `correct` is `1`/`0`, or empty without labels.
pub fn write_per_instance_csv(
    path: &Path,
    instance_ids: &[u64],
    result: &BatchResult,
) -> Result<(), IoError> {
    write_atomic(path, |w| {
        writeln!(w, "instance_id,exit_head,prediction,cost,correct")?;
        for i in 0..result.num_instances() {
            let correct = match &result.correct {
                Some(c) => {
                    if c[i] {
                        "1"
                    } else {
                        "0"
                    }
                }
                None => "",
            };
            writeln!(
                w,
                "{},{},{},{},{}",
                instance_ids[i],
                result.exits[i] + 1,
                result.predictions[i] + 1,
                format_f64(result.per_instance_cost[i]),
                correct
            )?;
        }
        Ok(())
    })
}

/// Which method produced a sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepSource {
    Eero,
    Oracle,
    /// A single head used alone, 0-based.
    Head(usize),
}

impl fmt::Display for SweepSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepSource::Eero => f.write_str("eero"),
            SweepSource::Oracle => f.write_str("oracle"),
            SweepSource::Head(l) => write!(f, "head_{}", l + 1),
        }
    }
}

impl std::str::FromStr for SweepSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eero" => Ok(SweepSource::Eero),
            "oracle" => Ok(SweepSource::Oracle),
            _ => s
                .strip_prefix("head_")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| SweepSource::Head(n - 1))
                .ok_or_else(|| format!("unknown sweep source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub budget: f64,
    pub accuracy: f64,
    pub consumed: f64,
    pub within_budget: bool,
    pub source: SweepSource,
}

pub const SWEEP_HEADER: &str = "budget,accuracy,consumed,within_budget,source";

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        writeln!(w, "{SWEEP_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                format_f64(r.budget),
                format_f64(r.accuracy),
                format_f64(r.consumed),
                r.within_budget,
                r.source
            )?;
        }
        Ok(())
    })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, IoError> {
    let header: Vec<String> = SWEEP_HEADER.split(',').map(String::from).collect();
    read_records(path, &header)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(SweepRow {
                budget: parse_field(path, line, 1, &rec[0])?,
                accuracy: parse_field(path, line, 2, &rec[1])?,
                consumed: parse_field(path, line, 3, &rec[2])?,
                within_budget: parse_field(path, line, 4, &rec[3])?,
                source: parse_field(path, line, 5, &rec[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AllocationResult;
    use crate::synth::{generate, SplitSizes, SynthSpec};

    fn tiny_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(
            p.join("manifest.json"),
            r#"{"format_version":1,"num_classes":2,"heads":[
                {"budget_gflops":1.0,"probs_csv":{"calib":"h1.csv","test":"h1.csv"}},
                {"budget_gflops":2.0,"risk":0.25,"probs_csv":{"calib":"h2.csv","test":"h2.csv"}}],
               "labels_csv":{"test":"y.csv"}}"#,
        )
        .unwrap();
        fs::write(
            p.join("h1.csv"),
            "instance_id,p_1,p_2\n1,0.9,0.1\n2,0.4,0.6\n5,0.5,0.5\n",
        )
        .unwrap();
        fs::write(
            p.join("h2.csv"),
            "instance_id,p_1,p_2\r\n1,1,0\r\n2,0.25,0.75\r\n5,0.3,0.7\r\n",
        )
        .unwrap();
        fs::write(p.join("y.csv"), "instance_id,label\n1,1\n2,2\n5,2\n").unwrap();
        dir
    }

    #[test]
    fn loads_minimal_manifest() {
        let dir = tiny_dir();
        let ds = load_manifest(dir.path()).unwrap();
        assert_eq!(ds.num_heads(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert!(ds.train.is_none());
        let test = ds.test.as_ref().unwrap();
        assert_eq!(test.instance_ids, vec![1, 2, 5]);
        assert_eq!(test.labels.as_deref(), Some(&[0, 1, 1][..]));
        assert_eq!(test.bank.head(1).row(1), &[0.25, 0.75]);
        assert_eq!(ds.calib.bank.risks(), None);
        assert_eq!(ds.calib.bank.head(1).risk(), Some(0.25));
    }

    #[test]
    fn short_row_names_the_row() {
        let dir = tiny_dir();
        fs::write(
            dir.path().join("h1.csv"),
            "instance_id,p_1,p_2\n1,0.9,0.1\n2,0.4\n5,0.5,0.5\n",
        )
        .unwrap();
        match load_manifest(dir.path()) {
            Err(IoError::Parse {
                file, row, column, ..
            }) => {
                assert!(file.ends_with("h1.csv"));
                assert_eq!((row, column), (3, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_column() {
        let dir = tiny_dir();
        fs::write(
            dir.path().join("h2.csv"),
            "instance_id,p_1,p_2\n1,1,0\n2,x,0.75\n5,0.3,0.7\n",
        )
        .unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(
            matches!(
                err,
                IoError::Parse {
                    row: 3,
                    column: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn unsorted_and_mismatched_ids() {
        let dir = tiny_dir();
        fs::write(
            dir.path().join("h2.csv"),
            "instance_id,p_1,p_2\n1,1,0\n5,0.25,0.75\n2,0.3,0.7\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Parse {
                row: 4,
                column: 1,
                ..
            })
        ));
        fs::write(
            dir.path().join("h2.csv"),
            "instance_id,p_1,p_2\n1,1,0\n3,0.25,0.75\n5,0.3,0.7\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Parse {
                row: 3,
                column: 1,
                ..
            })
        ));
        fs::write(
            dir.path().join("h2.csv"),
            "instance_id,p_1,p_2\n1,1,0\n2,0.25,0.75\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Parse { .. })
        ));
    }

    #[test]
    fn header_and_labels_are_checked() {
        let dir = tiny_dir();
        fs::write(
            dir.path().join("y.csv"),
            "instance_id,label\n1,1\n2,3\n5,2\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Parse {
                row: 3,
                column: 2,
                ..
            })
        ));
        fs::write(dir.path().join("h1.csv"), "id,p_1,p_2\n1,0.9,0.1\n").unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Parse {
                row: 1,
                column: 1,
                ..
            })
        ));
    }

    #[test]
    fn domain_errors_propagate() {
        let dir = tiny_dir();
        fs::write(
            dir.path().join("h2.csv"),
            "instance_id,p_1,p_2\n1,0.7,0\n2,0.25,0.75\n5,0.3,0.7\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::Domain {
                source: DomainError::RowNotNormalized { .. },
                ..
            })
        ));
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("nope.json")),
            Err(IoError::FileNotFound { .. })
        ));
        let dir = tiny_dir();
        fs::remove_file(dir.path().join("h2.csv")).unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(IoError::FileNotFound { .. })
        ));
    }

    #[test]
    fn gzip_input() {
        use flate2::write::GzEncoder;
        let dir = tiny_dir();
        let text = fs::read(dir.path().join("h1.csv")).unwrap();
        let mut enc = GzEncoder::new(
            File::create(dir.path().join("h1.csv.gz")).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&text).unwrap();
        enc.finish().unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.json"))
            .unwrap()
            .replace("h1.csv", "h1.csv.gz");
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let ds = load_manifest(dir.path()).unwrap();
        assert_eq!(ds.calib.bank.head(0).row(0), &[0.9, 0.1]);
    }

    #[test]
    fn risk_examples() {
        let dir = tiny_dir();
        let ds = load_manifest(dir.path()).unwrap();
        let risks = compute_risks(ds.test.as_ref().unwrap(), "test").unwrap();
        // Head 1 ties on the last row and predicts class 1.
        assert_eq!(risks, vec![1.0 / 3.0, 0.0]);
        assert!(matches!(
            compute_risks(&ds.calib, "calib"),
            Err(IoError::MissingLabels("calib"))
        ));

        let constant: Vec<f64> = [[0.7, 0.1, 0.1, 0.1]; 4].concat();
        let bank = HeadBank::new(vec![
            HeadSlice::new(constant.clone(), 4, 1.0, None).unwrap(),
            HeadSlice::new(constant, 4, 2.0, None).unwrap(),
        ])
        .unwrap();
        assert_eq!(risks_from_labels(&bank, &[0, 1, 2, 3]), vec![0.75, 0.75]);
    }

    #[test]
    fn synthetic_round_trip_is_bitwise() {
        let spec = SynthSpec {
            sizes: SplitSizes {
                n_train: 50,
                n_calib: 40,
                n_test: 30,
            },
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, ds);
        for split in Split::ALL {
            let (a, b) = (ds.split(split).unwrap(), back.split(split).unwrap());
            for l in 0..ds.num_heads() {
                let bits =
                    |h: &HeadSlice| h.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.bank.head(l)), bits(b.bank.head(l)));
            }
        }
    }

    #[test]
    fn allocation_json_round_trip() {
        let res = AllocationResult {
            epsilons: vec![0.1 + 0.2, 1.0 / 3.0, 1.0 - 0.3 - 1.0 / 3.0],
            multiplier: f64::INFINITY,
            expected_budget: 1.234_567_890_123_456_7,
            kl_to_prior: 5e-324,
            saturated: true,
            degenerate: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_json(&path, &res).unwrap();
        let back: AllocationResult = read_json(&path).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [
            0.0,
            1.0,
            0.1,
            1.0 / 3.0,
            1e-300,
            5e-324,
            123456.789,
            1e20,
            -2.5e-7,
            f64::MAX,
        ] {
            assert_eq!(
                format_f64(x).parse::<f64>().unwrap().to_bits(),
                x.to_bits(),
                "{x}"
            );
        }
        assert_eq!(format_f64(0.5), "0.5");
        assert_eq!(format_f64(1e-30), "1e-30");
    }

    #[test]
    fn sweep_csv_schema() {
        let rows: Vec<SweepRow> = [1.0, 2.0, 3.0]
            .iter()
            .flat_map(|&b| {
                [
                    SweepSource::Eero,
                    SweepSource::Oracle,
                    SweepSource::Head(0),
                    SweepSource::Head(1),
                ]
                .into_iter()
                .map(move |source| SweepRow {
                    budget: b,
                    accuracy: 0.5,
                    consumed: b * 0.9,
                    within_budget: true,
                    source,
                })
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some(SWEEP_HEADER));
        assert_eq!(text.lines().count(), 1 + 3 * 4);
        assert!(text.contains(",true,head_2\n"));
        assert_eq!(read_sweep_csv(&path).unwrap(), rows);
    }

    #[test]
    fn per_instance_csv() {
        let r = BatchResult::from_assignment(vec![0, 1], vec![2, 0], &[1.0, 2.5], Some(&[2, 1]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_per_instance_csv(&path, &[10, 11], &r).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "instance_id,exit_head,prediction,cost,correct\n10,1,3,1,1\n11,2,1,2.5,0\n"
        );
    }
}
