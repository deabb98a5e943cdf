//! Deterministic table output: CSV with 17-significant-digit floats and UNIX
//! newlines, a column-order-preserving JSON variant, and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::OutputFormat;

/// One table cell.
#[derive(Clone, Debug)]
pub enum Cell {
    Str(String),
    Num(f64),
    Int(u64),
    /// Empty cell (failed row).
    Blank,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            // 17 significant digits: exact round trip for every f64.
            Cell::Num(v) => format!("{v:.16e}"),
            Cell::Int(v) => v.to_string(),
            Cell::Blank => String::new(),
        }
    }

    fn render_json(&self) -> String {
        match self {
            Cell::Str(s) => serde_json::to_string(s).expect("string serializes"),
            Cell::Num(v) if v.is_finite() => format!("{v:.16e}"),
            Cell::Num(v) => serde_json::to_string(&v.to_string()).expect("string serializes"),
            Cell::Int(v) => v.to_string(),
            Cell::Blank => "null".to_string(),
        }
    }
}

/// An in-memory result table with fixed column order.
#[derive(Clone, Debug)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    /// Render the table body as bytes in the requested format.
    pub fn render(&self, format: OutputFormat) -> Result<Vec<u8>> {
        match format {
            OutputFormat::Csv => self.render_csv(),
            OutputFormat::Json => Ok(self.render_json()),
        }
    }

    fn render_csv(&self) -> Result<Vec<u8>> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer.write_record(&self.columns)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(|c| c.render()))?;
        }
        Ok(writer.into_inner()?)
    }

    fn render_json(&self) -> Vec<u8> {
        let mut out = String::from("[\n");
        for (r, row) in self.rows.iter().enumerate() {
            out.push_str("  {");
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str(", ");
                }
                out.push_str(
                    &serde_json::to_string(self.columns[c]).expect("string serializes"),
                );
                out.push_str(": ");
                out.push_str(&cell.render_json());
            }
            out.push('}');
            if r + 1 < self.rows.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("]\n");
        out.into_bytes()
    }
}

/// Where a run's manifest lives: `<table>.manifest.json` next to the table.
pub fn manifest_path(table_path: &Path) -> PathBuf {
    let mut name = table_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    name.push_str(".manifest.json");
    table_path.with_file_name(name)
}

/// Write the table, then its manifest. The manifest carries every resolved
/// parameter plus the only timestamp of the run, keeping the table itself
/// byte-identical across reruns.
pub fn write_outputs(
    table: &Table,
    format: OutputFormat,
    out: Option<&Path>,
    manifest: serde_json::Value,
) -> Result<()> {
    let body = table.render(format)?;
    match out {
        None => {
            std::io::stdout().write_all(&body)?;
        }
        Some(path) => {
            std::fs::write(path, &body)
                .with_context(|| format!("writing table to {}", path.display()))?;
            let mut doc = manifest;
            if let serde_json::Value::Object(map) = &mut doc {
                map.insert(
                    "timestamp_unix_seconds".into(),
                    serde_json::json!(
                        std::time::SystemTime::now()
                            .duration_since(std::time::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0)
                    ),
                );
                map.insert(
                    "table_path".into(),
                    serde_json::json!(path.display().to_string()),
                );
            }
            let mpath = manifest_path(path);
            std::fs::write(&mpath, serde_json::to_vec_pretty(&doc)?)
                .with_context(|| format!("writing manifest to {}", mpath.display()))?;
        }
    }
    Ok(())
}
