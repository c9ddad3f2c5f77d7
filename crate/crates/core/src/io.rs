//! Plain-text graph and node-value files.
//!
//! Graph file:
//!
//! ```text
//! N M beta
//! i j Q        (M lines, 0-based ids, i < j when written)
//! ```
//!
//! Node-values file: `N` lines `i y_i`, each node exactly once.
//!
//! Reals are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every coupling bit for bit. Blank lines and
//! lines starting with `#` are ignored on input; reported line numbers are
//! physical (1-based) lines of the file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeValues};

pub fn write_graph<W: Write>(g: &Graph, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {} {}", g.n(), g.edge_count(), g.beta())?;
    for (&(i, j), q) in g.edges().iter().zip(g.couplings()) {
        writeln!(out, "{i} {j} {q}")?;
    }
    Ok(())
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_graph(g, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    read_graph(BufReader::new(File::open(path)?), path)
}

pub fn write_values<W: Write>(y: &NodeValues, mut out: W) -> std::io::Result<()> {
    for (i, v) in y.as_slice().iter().enumerate() {
        writeln!(out, "{i} {v}")?;
    }
    Ok(())
}

pub fn save_values(y: &NodeValues, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_values(y, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_values(path: impl AsRef<Path>, n: usize) -> Result<NodeValues> {
    let path = path.as_ref();
    read_values(BufReader::new(File::open(path)?), path, n)
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R, path: &Path) -> Self {
        Self {
            inner: reader.lines(),
            path: path.to_path_buf(),
            line: 0,
        }
    }

    /// Next non-blank, non-comment line split into fields.
    fn next_fields(&mut self) -> Result<Option<Vec<String>>> {
        for text in self.inner.by_ref() {
            self.line += 1;
            let text = text?;
            let trimmed = text.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(Some(trimmed.split_whitespace().map(str::to_owned).collect()));
        }
        Ok(None)
    }

    fn error(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn parse<T: FromStr>(&self, field: &str, what: &str) -> Result<T> {
        field
            .parse()
            .map_err(|_| self.error(format!("cannot parse {what} from `{field}`")))
    }

    fn expect_len(&self, fields: &[String], n: usize, layout: &str) -> Result<()> {
        if fields.len() == n {
            Ok(())
        } else {
            Err(self.error(format!("expected `{layout}`, found {} fields", fields.len())))
        }
    }
}

pub fn read_graph<R: BufRead>(reader: R, path: &Path) -> Result<Graph> {
    let mut lines = Lines::new(reader, path);
    let header = lines
        .next_fields()?
        .ok_or_else(|| lines.error("empty file, expected header `N M beta`"))?;
    lines.expect_len(&header, 3, "N M beta")?;
    let n: usize = lines.parse(&header[0], "node count")?;
    let m: usize = lines.parse(&header[1], "edge count")?;
    let beta: f64 = lines.parse(&header[2], "beta")?;
    if n == 0 {
        return Err(lines.error("node count must be positive"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(lines.error(format!("beta must be positive and finite, got {beta}")));
    }

    let mut seen = std::collections::HashMap::with_capacity(m);
    let mut edges = Vec::with_capacity(m);
    let mut q = Vec::with_capacity(m);
    while let Some(fields) = lines.next_fields()? {
        lines.expect_len(&fields, 3, "i j Q")?;
        let i: usize = lines.parse(&fields[0], "node id")?;
        let j: usize = lines.parse(&fields[1], "node id")?;
        let qij: f64 = lines.parse(&fields[2], "coupling")?;
        if i >= n || j >= n {
            return Err(lines.error(format!("edge ({i}, {j}) has an endpoint outside [0, {n})")));
        }
        if i == j {
            return Err(lines.error(format!("self-loop at node {i}")));
        }
        if !(qij.is_finite() && qij > 0.0) {
            return Err(lines.error(format!("coupling must be positive and finite, got {qij}")));
        }
        let key = (i.min(j), i.max(j));
        if let Some(first) = seen.insert(key, lines.line) {
            return Err(lines.error(format!(
                "duplicate edge ({}, {}) (first given on line {first})",
                key.0, key.1
            )));
        }
        edges.push(key);
        q.push(qij);
    }
    if edges.len() != m {
        return Err(lines.error(format!("header declares {m} edges, file has {}", edges.len())));
    }
    Graph::new(n, edges, q, beta)
}

pub fn read_values<R: BufRead>(reader: R, path: &Path, n: usize) -> Result<NodeValues> {
    let mut lines = Lines::new(reader, path);
    let mut y = vec![None; n];
    while let Some(fields) = lines.next_fields()? {
        lines.expect_len(&fields, 2, "i y_i")?;
        let i: usize = lines.parse(&fields[0], "node id")?;
        let v: f64 = lines.parse(&fields[1], "value")?;
        if i >= n {
            return Err(lines.error(format!("node {i} outside [0, {n})")));
        }
        if !v.is_finite() {
            return Err(lines.error(format!("value for node {i} is not finite")));
        }
        if y[i].replace(v).is_some() {
            return Err(lines.error(format!("node {i} given twice")));
        }
    }
    let values: Option<Vec<f64>> = y.iter().copied().collect();
    match values {
        Some(v) => NodeValues::new(v),
        None => {
            let missing = y.iter().position(Option::is_none).unwrap();
            Err(lines.error(format!("no value for node {missing}")))
        }
    }
}
