//! Row-major sample sets `z_j` and their on-disk formats.
//!
//! The binary format is a flat little-endian `f64` array (`J * d` values,
//! row-major) with a JSON sidecar `<file>.json` holding `{labels, j, d}`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    labels: Vec<String>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<String>,
    j: usize,
    d: usize,
}

impl Dataset {
    pub fn new(labels: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let d = labels.len();
        if d == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one dimension".into()));
        }
        if data.len() % d != 0 {
            return Err(Error::DimensionMismatch { expected: d, got: data.len() % d });
        }
        Ok(Dataset { labels, data })
    }

    pub fn with_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        Dataset { labels: labels.iter().map(|s| s.as_ref().to_string()).collect(), data: Vec::new() }
    }

    pub fn from_rows<S: AsRef<str>>(labels: &[S], rows: &[Vec<f64>]) -> Result<Self> {
        let mut ds = Self::with_labels(labels);
        for r in rows {
            ds.push_row(r)?;
        }
        Ok(ds)
    }

    /// One-dimensional dataset, mostly for tests and examples.
    pub fn from_column(label: &str, values: &[f64]) -> Self {
        Dataset { labels: vec![label.to_string()], data: values.to_vec() }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: row.len() });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.data[j * d..(j + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim())
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    /// Keep only the listed dimensions, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: bad + 1 });
        }
        let labels = cols.iter().map(|&c| self.labels[c].clone()).collect();
        let mut data = Vec::with_capacity(self.len() * cols.len());
        for r in self.rows() {
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Dataset::new(labels, data)
    }

    /// First `n` rows.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { labels: self.labels.clone(), data: self.data[..n * self.dim()].to_vec() }
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let sidecar = Sidecar { labels: self.labels.clone(), j: self.len(), d: self.dim() };
        atomic_write(path, &bytes)?;
        atomic_write(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn read_binary(path: &Path) -> Result<Dataset> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if sidecar.d != sidecar.labels.len() || bytes.len() != sidecar.j * sidecar.d * 8 {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {} x {} values, found {} bytes",
                path.display(),
                sidecar.j,
                sidecar.d,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        Dataset::new(sidecar.labels, data)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.labels)?;
        for r in self.rows() {
            wr.write_record(r.iter().map(|v| format!("{v:?}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rd = csv::Reader::from_reader(r);
        let labels: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let mut ds = Dataset::with_labels(&labels);
        for rec in rd.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            ds.push_row(&row)?;
        }
        Ok(ds)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write through a sibling temp file and rename, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}
