//! Table, CSV and JSON rendering of command results.

use std::fmt::Write as _;

use serde_json::Value;

use crate::args::Format;

/// Rows of string cells under a header.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    /// Two-column `metric,value` rows.
    pub fn metrics(pairs: &[(&str, String)]) -> Self {
        let mut t = Table::new(&["metric", "value"]);
        for (k, v) in pairs {
            t.push(vec![k.to_string(), v.clone()]);
        }
        t
    }

    fn aligned(&self) -> String {
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                // numbers right-aligned, text left-aligned
                if c.parse::<f64>().is_ok() {
                    let _ = write!(s, "{c:>w$}");
                } else {
                    let _ = write!(s, "{c:<w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * width.len().saturating_sub(1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// What a command prints: human tables and a JSON document carrying the same data.
pub struct Report {
    pub title: Option<String>,
    pub tables: Vec<Table>,
    pub json: Value,
}

impl Report {
    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        Ok(match format {
            Format::Table => {
                let mut out = String::new();
                if let Some(t) = &self.title {
                    out.push_str(t);
                    out.push_str("\n\n");
                }
                let parts: Vec<String> = self.tables.iter().map(Table::aligned).collect();
                out.push_str(&parts.join("\n"));
                out
            }
            Format::Csv => {
                let parts = self.tables.iter().map(Table::csv).collect::<anyhow::Result<Vec<_>>>()?;
                parts.join("\n")
            }
            Format::Json => format!("{}\n", serde_json::to_string_pretty(&self.json)?),
        })
    }
}

pub fn fmt_f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}
