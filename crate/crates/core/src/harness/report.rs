use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Study;
use crate::{io_err, Error, Result};

/// One table row: a condition, the regime(s) it describes, a status, and
/// the study's metric cells (`None` renders as blank / `-`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub regime: String,
    pub status: String,
    pub cells: Vec<Option<f64>>,
}

impl ReportRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Raw result of one trained and scored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub condition: String,
    pub regime: String,
    pub seed: u64,
    pub params: usize,
    /// Beam-search BLEU on the test slice.
    pub bleu: f64,
    /// BLEU of teacher-forced predictions on the test slice.
    pub tf_bleu: f64,
    pub steps: usize,
    pub initial_mean_g: Option<f64>,
    pub final_mean_g: Option<f64>,
    /// Hybrid only: last-epoch mean token and sentence losses.
    #[serde(default)]
    pub final_token_loss: Option<f64>,
    #[serde(default)]
    pub final_sentence_loss: Option<f64>,
    /// `None` when the run finished normally.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seeds: Vec<u64>,
    pub wall_time_secs: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub study: Study,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
    pub metadata: ReportMetadata,
}

pub const KEY_COLUMNS: [&str; 3] = ["condition", "regime", "status"];

impl ExperimentReport {
    pub fn columns(&self) -> &'static [&'static str] {
        self.study.columns()
    }

    pub fn rows_for(&self, condition: &str) -> impl Iterator<Item = &ReportRow> {
        let c = condition.to_string();
        self.rows.iter().filter(move |r| r.condition == c)
    }

    pub fn row(&self, condition: &str, regime: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition && r.regime == regime)
    }

    /// Cell by column name.
    pub fn cell(&self, condition: &str, regime: &str, column: &str) -> Option<f64> {
        let i = self.columns().iter().position(|c| *c == column)?;
        self.row(condition, regime)?.cells[i]
    }

    pub fn to_csv(&self) -> String {
        let mut s = KEY_COLUMNS.join(",");
        for c in self.columns() {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", csv_field(&r.condition), csv_field(&r.regime), csv_field(&r.status));
            for c in &r.cells {
                s.push(',');
                if let Some(v) = c {
                    let _ = write!(s, "{v:.6}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parse rows written by [`to_csv`](Self::to_csv). Runs and metadata are
    /// not part of the CSV and come back empty.
    pub fn from_csv(study: Study, text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            path: "report csv".into(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let expected: Vec<&str> = KEY_COLUMNS.iter().chain(study.columns()).copied().collect();
        if header.split(',').collect::<Vec<_>>() != expected {
            return Err(bad(format!("header {header:?} does not match {}", study.as_str())));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f = split_csv(line);
            if f.len() != expected.len() {
                return Err(bad(format!("row {line:?} has {} fields", f.len())));
            }
            let cells = f[3..]
                .iter()
                .map(|v| {
                    if v.is_empty() {
                        Ok(None)
                    } else {
                        v.parse().map(Some).map_err(|_| bad(format!("bad number {v:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(ReportRow {
                condition: f[0].clone(),
                regime: f[1].clone(),
                status: f[2].clone(),
                cells,
            });
        }
        Ok(Self {
            study,
            rows,
            runs: Vec::new(),
            metadata: ReportMetadata {
                seeds: Vec::new(),
                wall_time_secs: 0.0,
                notes: Vec::new(),
            },
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = KEY_COLUMNS.iter().chain(self.columns()).copied().collect();
        let _ = writeln!(s, "| {} |", header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
        for r in &self.rows {
            let cells: Vec<String> = r
                .cells
                .iter()
                .map(|c| c.map_or_else(|| "-".to_string(), |v| format!("{v:.2}")))
                .collect();
            let _ = writeln!(s, "| {} | {} | {} | {} |", r.condition, r.regime, r.status, cells.join(" | "));
        }
        if !self.metadata.notes.is_empty() {
            s.push('\n');
            for n in &self.metadata.notes {
                let _ = writeln!(s, "- {n}");
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn write_markdown(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_markdown()).map_err(io_err(path))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Relative change `(noised - orig) / orig`.
pub fn delta_rate(orig: f64, noised: f64) -> Option<f64> {
    (orig != 0.0).then(|| (noised - orig) / orig)
}
