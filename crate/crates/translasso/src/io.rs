//! Table output, instance files and delimited class data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use translasso_core::{GroundTruth, Instance, Matrix, ProblemGeometry};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// Write `rows` to `dir/stem.{csv,json}` and return the path.
pub fn write_table<T: Serialize>(
    dir: &Path,
    stem: &str,
    rows: &[T],
    format: OutputFormat,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            for r in rows {
                w.serialize(r).map_err(|e| csv_error(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        OutputFormat::Json => {
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, rows).map_err(|e| Error::io(&path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(path)
}

/// Read a table written by [`write_table`].
pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display()))),
        _ => csv::Reader::from_reader(BufReader::new(file))
            .deserialize()
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| csv_error(path, e)),
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

const MAGIC: &[u8; 8] = b"TLINST01";

#[derive(Serialize, Deserialize)]
struct InstanceHeader {
    geometry: ProblemGeometry,
    n_features: usize,
    seed: u64,
    rows: Vec<usize>,
    support_sizes: Vec<usize>,
}

/// Save an instance: a magic tag, a JSON header with the geometry and seed
/// (enough to regenerate it), then raw little-endian arrays.
pub fn write_instance(path: &Path, inst: &Instance) -> Result<()> {
    let header = InstanceHeader {
        geometry: inst.geometry.clone(),
        n_features: inst.n_features,
        seed: inst.seed,
        rows: inst.designs.iter().map(Matrix::rows).collect(),
        support_sizes: inst.truth.supports.iter().map(Vec::len).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&(json.len() as u64).to_le_bytes())?;
    put(&json)?;
    for (a, y) in inst.designs.iter().zip(&inst.responses) {
        for v in a.as_col_major().iter().chain(y) {
            put(&v.to_le_bytes())?;
        }
    }
    for (idx, val) in inst.truth.supports.iter().zip(&inst.truth.coefficients) {
        for &i in idx {
            put(&(i as u64).to_le_bytes())?;
        }
        for v in val {
            put(&v.to_le_bytes())?;
        }
    }
    drop(put);
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instance(path: &Path) -> Result<Instance> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(buf)
    };
    if take(8)? != MAGIC {
        return Err(bad("not an instance file"));
    }
    let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: InstanceHeader =
        serde_json::from_slice(&take(len)?).map_err(|e| bad(&e.to_string()))?;
    let mut words = |n: usize| -> Result<Vec<[u8; 8]>> {
        Ok(take(8 * n)?
            .chunks_exact(8)
            .map(|c| c.try_into().unwrap())
            .collect())
    };
    let n = header.n_features;
    let mut designs = Vec::new();
    let mut responses = Vec::new();
    for &m in &header.rows {
        let data = words(m * n)?.into_iter().map(f64::from_le_bytes).collect();
        designs.push(Matrix::from_col_major(m, n, data).ok_or_else(|| bad("design size"))?);
        responses.push(words(m)?.into_iter().map(f64::from_le_bytes).collect());
    }
    let mut supports = Vec::new();
    let mut coefficients = Vec::new();
    for &s in &header.support_sizes {
        supports.push(
            words(s)?
                .into_iter()
                .map(|w| u64::from_le_bytes(w) as usize)
                .collect(),
        );
        coefficients.push(words(s)?.into_iter().map(f64::from_le_bytes).collect());
    }
    Ok(Instance {
        geometry: header.geometry,
        n_features: n,
        seed: header.seed,
        designs,
        responses,
        truth: GroundTruth {
            n_features: n,
            supports,
            coefficients,
        },
    })
}

/// Write one class as a delimited table: one column per feature, then the
/// response. Numbers use the shortest representation that reads back
/// exactly.
pub fn write_class_table(
    path: &Path,
    features: &[String],
    response_name: &str,
    design: &Matrix,
    response: &[f64],
    delimiter: u8,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = features.iter().map(String::as_str).chain([response_name]);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (i, y) in response.iter().enumerate() {
        let row = (0..design.cols())
            .map(|j| design.get(i, j).to_string())
            .chain([y.to_string()]);
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature names `x0, x1, …` used when exporting synthetic data.
pub fn default_feature_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("x{j}")).collect()
}

/// Export every class of a synthetic instance as `dir/class{k}.csv`
/// (class 1 is the target) with response column `y`.
pub fn export_instance_csv(dir: &Path, inst: &Instance) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = default_feature_names(inst.n_features);
    let mut paths = Vec::new();
    for (k, (a, y)) in inst.datasets().into_iter().enumerate() {
        let p = dir.join(format!("class{}.csv", k + 1));
        write_class_table(&p, &names, "y", a, y, b',')?;
        paths.push(p);
    }
    Ok(paths)
}
