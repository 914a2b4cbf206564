//! Accuracy tables and their CSV, Markdown and JSON renderings.

use std::fmt::Write as _;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    /// `None` for rows that are not merges (individual fine-tuned models).
    pub use_sens: Option<bool>,
    /// One accuracy per task, in the table's task order.
    pub accuracies: Vec<f64>,
}

impl Row {
    pub fn average(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    fn sens_cell(&self) -> &'static str {
        match self.use_sens {
            Some(true) => "true",
            Some(false) => "false",
            None => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub task_ids: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

impl ResultTable {
    pub fn new(task_ids: Vec<String>) -> Self {
        Self {
            task_ids,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Row) -> Result<()> {
        if row.accuracies.len() != self.task_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "row `{}` has {} accuracies for {} tasks",
                row.method,
                row.accuracies.len(),
                self.task_ids.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn find(&self, method: &str, use_sens: Option<bool>) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.use_sens == use_sens)
    }

    /// Row-by-row mean of several tables with identical layout.
    pub fn mean(tables: &[ResultTable]) -> Result<Self> {
        let first = tables.first().ok_or(Error::Empty("no tables to average"))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            let same = t.task_ids == first.task_ids
                && t.rows.len() == first.rows.len()
                && t.rows
                    .iter()
                    .zip(&first.rows)
                    .all(|(a, b)| a.method == b.method && a.use_sens == b.use_sens);
            if !same {
                return Err(Error::InvalidArgument("tables differ in layout".into()));
            }
            for (acc, row) in out.rows.iter_mut().zip(&t.rows) {
                for (a, v) in acc.accuracies.iter_mut().zip(&row.accuracies) {
                    *a += v;
                }
            }
        }
        let n = tables.len() as f64;
        for row in &mut out.rows {
            row.accuracies.iter_mut().for_each(|a| *a /= n);
        }
        Ok(out)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Empty("result table has no rows"));
        }
        Ok(match format {
            Format::Csv => self.csv(),
            Format::Markdown => self.markdown(),
            Format::Json => self.json()?,
        })
    }

    fn csv(&self) -> String {
        let mut out = String::from("method,use_sens");
        for id in &self.task_ids {
            let _ = write!(out, ",{id}");
        }
        out.push_str(",average\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.method, r.sens_cell());
            for a in &r.accuracies {
                let _ = write!(out, ",{}", fixed(*a));
            }
            let _ = writeln!(out, ",{}", fixed(r.average()));
        }
        out
    }

    fn markdown(&self) -> String {
        let mut out = String::from("| Method | Sens |");
        for id in &self.task_ids {
            let _ = write!(out, " {id} |");
        }
        out.push_str(" Avg. |\n|---|---|");
        for _ in &self.task_ids {
            out.push_str("---:|");
        }
        out.push_str("---:|\n");
        for r in &self.rows {
            let sens = match r.use_sens {
                Some(true) => "✓",
                Some(false) => "",
                None => "-",
            };
            let _ = write!(out, "| {} | {} |", r.method, sens);
            for a in &r.accuracies {
                let _ = write!(out, " {} |", fixed(*a));
            }
            let _ = writeln!(out, " {} |", fixed(r.average()));
        }
        out
    }

    fn json(&self) -> Result<String> {
        // values go through the same 4-decimal rounding as the text formats
        let num = |v: f64| -> Value { json!(fixed(v).parse::<f64>().expect("formatted float")) };
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let acc: serde_json::Map<String, Value> = self
                    .task_ids
                    .iter()
                    .zip(&r.accuracies)
                    .map(|(id, a)| (id.clone(), num(*a)))
                    .collect();
                json!({
                    "method": r.method,
                    "use_sens": r.use_sens,
                    "accuracies": acc,
                    "average": num(r.average()),
                })
            })
            .collect();
        let doc = json!({ "tasks": self.task_ids, "rows": rows });
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }
}
