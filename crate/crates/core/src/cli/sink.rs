//! Tabular output as CSV or as a single JSON object.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Bool(bool),
    Text(String),
}

impl Cell {
    /// Shortest representation that parses back to the same `f64`.
    fn csv(&self) -> String {
        match self {
            Cell::Float(x) => format!("{x:?}"),
            Cell::Int(i) => i.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Float(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
            Cell::Int(i) => json!(i),
            Cell::Bool(b) => json!(b),
            Cell::Text(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as u64)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Where and how a [`Table`] is written.
#[derive(Clone, Debug)]
pub struct ResultSink {
    pub format: Format,
    /// `None` writes to standard output.
    pub path: Option<PathBuf>,
}

/// Metadata stored alongside the rows in JSON output.
pub struct Meta {
    pub seed: Option<u64>,
    pub config: Value,
}

impl ResultSink {
    pub fn render(&self, table: &Table, meta: &Meta) -> Result<Vec<u8>> {
        match self.format {
            Format::Csv => render_csv(table),
            Format::Json => Ok(render_json(table, meta)),
        }
    }

    pub fn write(&self, table: &Table, meta: &Meta) -> Result<()> {
        let bytes = self.render(table, meta)?;
        match &self.path {
            Some(path) => write_file(path, &bytes),
            None => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                lock.write_all(&bytes)
                    .and_then(|_| lock.flush())
                    .map_err(|e| Error::io("<stdout>", e))
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn render_csv(table: &Table) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Format {
        what: "csv output".into(),
        expected: "serializable record".into(),
        found: e.to_string(),
    };
    w.write_record(&table.columns).map_err(wrap)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::csv)).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| wrap(e.into_error().into()))
}

fn render_json(table: &Table, meta: &Meta) -> Vec<u8> {
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|row| {
            let obj: Map<String, Value> = table
                .columns
                .iter()
                .zip(row)
                .map(|(c, v)| (c.to_string(), v.json()))
                .collect();
            Value::Object(obj)
        })
        .collect();
    let doc = json!({
        "meta": {
            "seed": meta.seed,
            "config": meta.config,
            "version": env!("CARGO_PKG_VERSION"),
        },
        "rows": rows,
    });
    let mut out = serde_json::to_vec_pretty(&doc).expect("json values always serialize");
    out.push(b'\n');
    out
}
