//! Serializable experiment output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentKind;
use crate::error::Result;

/// Mean and sample standard deviation, accumulated in index order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one sample.
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        let count = xs.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count,
            };
        }
        let mut sum = 0.0;
        for x in xs {
            sum += x;
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for x in xs {
            ss += (x - mean) * (x - mean);
        }
        let std = if count > 1 {
            (ss / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }
}

/// A named numeric table, written as `<kind>_<name>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            columns: columns.iter().map(|c| (*c).to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Integral values are written without a fraction, everything else in
    /// shortest round-trip form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format_cell(*v)).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub kind: String,
    /// Fully resolved parameters.
    pub config: BTreeMap<String, String>,
    pub scalars: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub ensembles: BTreeMap<String, Stats>,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl ExperimentRecord {
    pub fn new(kind: ExperimentKind, config: BTreeMap<String, String>) -> Self {
        Self {
            kind: kind.name().to_owned(),
            config,
            scalars: BTreeMap::new(),
            flags: BTreeMap::new(),
            ensembles: BTreeMap::new(),
            tables: Vec::new(),
            notes: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn scalar(&mut self, key: impl Into<String>, v: f64) {
        self.scalars.insert(key.into(), v);
    }

    pub fn flag(&mut self, key: impl Into<String>, v: bool) {
        self.flags.insert(key.into(), v);
    }

    pub fn stats(&mut self, key: impl Into<String>, xs: &[f64]) -> Stats {
        let s = Stats::of(xs);
        self.ensembles.insert(key.into(), s);
        s
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    /// Everything except the wall clock and the `jobs` setting, compared bit
    /// for bit (so `NaN` cells compare equal), for reproducibility checks.
    pub fn same_results(&self, other: &Self) -> bool {
        let bits = |m: &BTreeMap<String, f64>| -> Vec<(String, u64)> {
            m.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect()
        };
        let config = |c: &BTreeMap<String, String>| -> Vec<(String, String)> {
            c.iter()
                .filter(|(k, _)| k.as_str() != "jobs")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let stats = |m: &BTreeMap<String, Stats>| -> Vec<(String, [u64; 2], usize)> {
            m.iter()
                .map(|(k, s)| (k.clone(), [s.mean.to_bits(), s.std.to_bits()], s.count))
                .collect()
        };
        let tables = |ts: &[Table]| -> Vec<(String, Vec<String>, Vec<Vec<u64>>)> {
            ts.iter()
                .map(|t| {
                    let rows = t.rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
                    (t.name.clone(), t.columns.clone(), rows)
                })
                .collect()
        };
        self.kind == other.kind
            && config(&self.config) == config(&other.config)
            && bits(&self.scalars) == bits(&other.scalars)
            && self.flags == other.flags
            && stats(&self.ensembles) == stats(&other.ensembles)
            && tables(&self.tables) == tables(&other.tables)
            && self.notes == other.notes
    }

    /// `kind=<kind>` followed by every scalar and flag as `key=value`.
    pub fn summary_line(&self) -> String {
        let mut parts = vec![format!("kind={}", self.kind)];
        parts.extend(self.scalars.iter().map(|(k, v)| format!("{k}={v}")));
        parts.extend(self.flags.iter().map(|(k, v)| format!("{k}={v}")));
        parts.push(format!("wall_clock_s={:.3}", self.wall_clock_seconds));
        parts.join(" ")
    }

    pub fn to_json(&self) -> String {
        // The record holds only strings, numbers and booleans; non-finite
        // numbers become null.
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    /// Writes `config.txt`, one `<kind>_<table>.csv` per table and
    /// `summary.json` into `dir`; returns the paths written.
    pub fn write_outputs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let cfg_path = dir.join("config.txt");
        let mut text = String::new();
        for (k, v) in &self.config {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(&cfg_path, text)?;
        written.push(cfg_path);
        let stem = self.kind.replace('-', "_");
        for t in &self.tables {
            let path = dir.join(format!("{stem}_{}.csv", t.name));
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            fs::write(&path, buf)?;
            written.push(path);
        }
        let json_path = dir.join("summary.json");
        fs::write(&json_path, self.to_json())?;
        written.push(json_path);
        Ok(written)
    }
}
