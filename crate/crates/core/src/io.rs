//! On-disk formats.
//!
//! A benchmark is a directory:
//!
//! ```text
//! manifest.json        weights, test specs, task names, metadata
//! tasks/task_0000.csv  one file per task: [label,]f_0,...,f_{d-1}
//! test.csv             shared test pool: category,f_0,...,f_{d-1}
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.
//! Models and reports are JSON; embeddings, similarity matrices and loss
//! traces are headered CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::LossTrace;
use crate::types::{Benchmark, FeatureVector, TaskCollection, TaskDataset, TaskTestSpec, TestPool};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_FILE: &str = "test.csv";
pub const TASK_DIR: &str = "tasks";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    feature_dim: usize,
    weights: Vec<f64>,
    task_tests: Vec<TaskTestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth_active: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_names: Option<Vec<String>>,
    meta: BTreeMap<String, String>,
}

pub fn task_file_name(task_id: usize) -> String {
    format!("task_{task_id:04}.csv")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn feature_header(prefix: Option<&str>, d: usize, name: &str) -> Vec<String> {
    prefix
        .into_iter()
        .map(str::to_owned)
        .chain((0..d).map(|j| format!("{name}_{j}")))
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{other:?}")),
    })
}

/// Writes rows of `[lead?, values...]` under the given header.
fn write_rows<'a>(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = (Option<String>, &'a [f64])>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for (lead, values) in rows {
        let record = lead.into_iter().chain(values.iter().map(|v| v.to_string()));
        w.write_record(record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Table {
    header: Vec<String>,
    leads: Vec<String>,
    rows: Vec<Vec<f64>>,
}

/// Reads a headered CSV whose first `lead` columns are kept as text (only
/// `lead` ∈ {0, 1} is used) and whose remaining columns are floats.
fn read_rows(path: &Path, lead: usize) -> Result<Table> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(1, format!("{other:?}")),
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut leads = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if lead == 1 {
            leads.push(rec[0].to_owned());
        }
        let values = rec
            .iter()
            .skip(lead)
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(line, format!("bad number {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok(Table { header, leads, rows })
}

/// Writes a benchmark directory, replacing any previous task files.
pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    let d = b.train.feature_dim();
    let task_dir = dir.join(TASK_DIR);
    if task_dir.exists() {
        fs::remove_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
    }
    create_dir(&task_dir)?;
    for task in b.train.tasks() {
        let path = task_dir.join(task_file_name(task.task_id));
        let labelled = task.labels.is_some();
        let header = feature_header(labelled.then_some("label"), d, "f");
        let leads = task.labels.iter().flatten().map(|l| Some(l.to_string()));
        let leads: Box<dyn Iterator<Item = Option<String>>> = if labelled {
            Box::new(leads)
        } else {
            Box::new(std::iter::repeat(None))
        };
        write_rows(&path, &header, leads.zip(task.samples.iter().map(|x| x.as_slice())))?;
    }
    write_rows(
        &dir.join(TEST_FILE),
        &feature_header(Some("category"), d, "f"),
        b.test
            .categories
            .iter()
            .map(|c| Some(c.to_string()))
            .zip(b.test.samples.iter().map(|x| x.as_slice())),
    )?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        feature_dim: d,
        weights: b.train.weights(),
        task_tests: b.task_tests.clone(),
        ground_truth_active: b.ground_truth_active.clone(),
        task_names: b.task_names.clone(),
        meta: b.meta.clone(),
    };
    save_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn parse_label(path: &Path, row: usize, s: &str) -> Result<u32> {
    s.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: row as u64 + 2,
        message: format!("bad category {s:?}"),
    })
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest: Manifest = load_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported benchmark format version {}",
            manifest.format_version
        )));
    }
    let m = manifest.weights.len();
    if manifest.task_tests.len() != m {
        return Err(Error::Shape {
            context: "task test specs",
            expected: m,
            found: manifest.task_tests.len(),
        });
    }
    let mut tasks = Vec::with_capacity(m);
    for (t, &weight) in manifest.weights.iter().enumerate() {
        let path = dir.join(TASK_DIR).join(task_file_name(t));
        let labelled = {
            let mut rdr = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(&path, io),
                other => Error::InvalidArgument(format!("{other:?}")),
            })?;
            rdr.headers()?.get(0) == Some("label")
        };
        let table = read_rows(&path, usize::from(labelled))?;
        let mut task = TaskDataset::new(t, table.rows.into_iter().map(FeatureVector::new).collect());
        task.weight = weight;
        if labelled {
            let labels = table
                .leads
                .iter()
                .enumerate()
                .map(|(i, s)| parse_label(&path, i, s))
                .collect::<Result<Vec<_>>>()?;
            task.labels = Some(labels);
        }
        tasks.push(task);
    }
    let train = TaskCollection::with_weights(tasks);
    train.validate()?;
    if train.feature_dim() != manifest.feature_dim {
        return Err(Error::Shape {
            context: "benchmark feature dimension",
            expected: manifest.feature_dim,
            found: train.feature_dim(),
        });
    }
    let test_path = dir.join(TEST_FILE);
    let table = read_rows(&test_path, 1)?;
    let categories = table
        .leads
        .iter()
        .enumerate()
        .map(|(i, s)| parse_label(&test_path, i, s))
        .collect::<Result<Vec<_>>>()?;
    let test = TestPool {
        samples: table.rows.into_iter().map(FeatureVector::new).collect(),
        categories,
    };
    Ok(Benchmark {
        train,
        test,
        task_tests: manifest.task_tests,
        ground_truth_active: manifest.ground_truth_active,
        task_names: manifest.task_names,
        meta: manifest.meta,
    })
}

/// Embedding table as `task,e_0,...`.
pub fn write_embeddings_csv(path: &Path, table: &Array2<f64>) -> Result<()> {
    write_task_rows(path, table, "e")
}

pub fn read_embeddings_csv(path: &Path) -> Result<Array2<f64>> {
    matrix_from_rows(path, read_rows(path, 1)?.rows)
}

/// Square matrix with a `task,t_0,...` header, one row per task.
pub fn write_matrix_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    write_task_rows(path, matrix, "t")
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    read_embeddings_csv(path)
}

fn write_task_rows(path: &Path, table: &Array2<f64>, name: &str) -> Result<()> {
    let header = feature_header(Some("task"), table.ncols(), name);
    let rows: Vec<Vec<f64>> = table.rows().into_iter().map(|r| r.to_vec()).collect();
    write_rows(
        path,
        &header,
        rows.iter().enumerate().map(|(t, r)| (Some(t.to_string()), r.as_slice())),
    )
}

fn matrix_from_rows(path: &Path, rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "ragged rows".into(),
    })
}

pub fn write_loss_trace(path: &Path, trace: &LossTrace) -> Result<()> {
    write_text(path, &trace.to_csv())
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let table = read_rows(path, 0)?;
    if table.header != ["epoch", "train_loss", "val_loss"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header epoch,train_loss,val_loss".into(),
        });
    }
    Ok(table
        .rows
        .into_iter()
        .map(|r| (r[0] as usize, r[1], r[2]))
        .collect())
}

/// Path of a report file for `experiment` and `seed` inside `dir`.
pub fn report_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn bench() -> Benchmark {
        generate(&SynthConfig {
            categories: 4,
            dim: 3,
            k: 2,
            n_per_category: 20,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn benchmark_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = bench();
        save_benchmark(&b, dir.path()).unwrap();
        assert!(dir.path().join("tasks/task_0005.csv").exists());
        let loaded = load_benchmark(dir.path()).unwrap();
        assert_eq!(loaded, b);
        // Saving twice gives identical bytes.
        let first = read_text(&dir.path().join(MANIFEST_FILE)).unwrap();
        save_benchmark(&loaded, dir.path()).unwrap();
        assert_eq!(read_text(&dir.path().join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn unlabelled_tasks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bench();
        let tasks: Vec<TaskDataset> = b
            .train
            .tasks()
            .iter()
            .cloned()
            .map(|mut t| {
                t.labels = None;
                t
            })
            .collect();
        b.train = TaskCollection::with_weights(tasks);
        save_benchmark(&b, dir.path()).unwrap();
        assert_eq!(load_benchmark(dir.path()).unwrap(), b);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_benchmark(&dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn embeddings_and_matrices_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = Array2::from_shape_vec((2, 3), vec![0.1, -2.5e-9, 3.0, 1.0 / 3.0, 0.0, -7.25]).unwrap();
        let p = dir.path().join("e.csv");
        write_embeddings_csv(&p, &table).unwrap();
        assert!(read_text(&p).unwrap().starts_with("task,e_0,e_1,e_2\n0,"));
        assert_eq!(read_embeddings_csv(&p).unwrap(), table);
        let sim = Array2::from_shape_vec((2, 2), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let p = dir.path().join("s.csv");
        write_matrix_csv(&p, &sim).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), sim);
    }

    #[test]
    fn loss_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = LossTrace::default();
        trace.push(0, 1.5, 1.25);
        trace.push(1, 0.75, 0.8);
        let p = dir.path().join("loss_trace.csv");
        write_loss_trace(&p, &trace).unwrap();
        assert_eq!(read_loss_trace(&p).unwrap(), vec![(0, 1.5, 1.25), (1, 0.75, 0.8)]);
    }

    #[test]
    fn json_parse_errors_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_text(&p, "{\n\"a\": }").unwrap();
        match load_json::<serde_json::Value>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
