use std::fmt::Write as _;

use clap::ValueEnum;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
    Jsonl,
}

/// One table cell: the text shown in markdown/CSV and the typed value
/// emitted in JSON lines.
#[derive(Debug, Clone)]
pub struct Cell {
    text: String,
    json: Value,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Self {
        let s = s.into();
        Cell {
            json: Value::String(s.clone()),
            text: s,
        }
    }

    pub fn int(v: u64) -> Self {
        Cell {
            text: v.to_string(),
            json: Value::from(v),
        }
    }

    /// Shown with `decimals` places, emitted at full precision.
    pub fn float(v: f64, decimals: usize) -> Self {
        Cell {
            text: format!("{v:.decimals$}"),
            json: Value::from(v),
        }
    }

    /// Shown as `shown`, emitted as the raw value.
    pub fn shown_as(shown: impl Into<String>, raw: Value) -> Self {
        Cell {
            text: shown.into(),
            json: raw,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<&'static str>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Markdown => self.markdown(),
            Format::Csv => self.csv(),
            Format::Jsonl => self.jsonl(),
        }
    }

    fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.columns.len()));
        for row in &self.rows {
            let cells: Vec<&str> = row.iter().map(|c| c.text.as_str()).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    fn csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| csv_field(&c.text)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    fn jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let obj: Map<String, Value> = self
                .columns
                .iter()
                .zip(row)
                .map(|(k, c)| (k.to_string(), c.json.clone()))
                .collect();
            let _ = writeln!(out, "{}", Value::Object(obj));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(vec!["name", "bytes", "pct"]);
        t.push(vec![
            Cell::text("a,b"),
            Cell::shown_as("1.50 KB", Value::from(1500u64)),
            Cell::float(12.345, 2),
        ]);
        t
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(sample().render(Format::Csv), "name,bytes,pct\n\"a,b\",1.50 KB,12.35\n");
    }

    #[test]
    fn markdown_has_header_rule() {
        let md = sample().render(Format::Markdown);
        assert_eq!(md.lines().nth(1), Some("|---|---|---|"));
    }

    #[test]
    fn jsonl_keeps_raw_values() {
        let line = sample().render(Format::Jsonl);
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["bytes"], 1500);
        assert_eq!(v["pct"], 12.345);
    }
}
