//! Result tables: per-task scores, their average and the gain over a base row.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use crate::error::{Error, Result};
use crate::fusion::FusionSchemeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Markdown,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::Config(format!(
                "unknown format `{s}` (valid: markdown, csv)"
            ))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Markdown => "md",
            Format::Csv => "csv",
        }
    }
}

/// One input row. Gains are taken against the base row of the same group.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub group: String,
    pub method: String,
    pub is_base: bool,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub method: String,
    pub is_base: bool,
    pub scores: Vec<f64>,
    pub average: f64,
    /// `average − base average`; `None` for base rows and groups without a base.
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableReport {
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl TableReport {
    pub fn new(tasks: Vec<String>, rows: Vec<TableRow>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptySequence("table tasks"));
        }
        for r in &rows {
            if r.scores.len() != tasks.len() {
                return Err(Error::shape("table row", &[tasks.len()], &[r.scores.len()]));
            }
        }
        let average = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let mut out = Vec::with_capacity(rows.len());
        for r in &rows {
            let bases: Vec<&TableRow> = rows
                .iter()
                .filter(|b| b.is_base && b.group == r.group)
                .collect();
            if bases.len() > 1 {
                return Err(Error::Config(format!(
                    "group `{}` has {} base rows",
                    r.group,
                    bases.len()
                )));
            }
            let avg = average(&r.scores);
            let gain = match bases.first() {
                Some(b) if !r.is_base => Some(avg - average(&b.scores)),
                _ => None,
            };
            out.push(ReportRow {
                group: r.group.clone(),
                method: r.method.clone(),
                is_base: r.is_base,
                scores: r.scores.clone(),
                average: avg,
                gain,
            });
        }
        Ok(Self { tasks, rows: out })
    }

    /// Scores are success rates in percent; the base is the `none` scheme.
    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptySequence("records"))?;
        let tasks: Vec<String> = first.tasks.iter().map(|t| t.task.clone()).collect();
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            let these: Vec<&str> = r.tasks.iter().map(|t| t.task.as_str()).collect();
            if these != tasks.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Protocol(format!(
                    "record `{}` has tasks {these:?}, expected {tasks:?}",
                    r.label
                )));
            }
            rows.push(TableRow {
                group: r.group.clone(),
                method: r.label.clone(),
                is_base: r.config.scheme == FusionSchemeId::None,
                scores: r
                    .tasks
                    .iter()
                    .map(|t| 100.0 * t.metrics.success_rate)
                    .collect(),
            });
        }
        Self::new(tasks, rows)
    }

    pub fn has_gain(&self) -> bool {
        self.rows.iter().any(|r| r.gain.is_some())
    }

    pub fn mean_gain(&self) -> Option<f64> {
        let g: Vec<f64> = self.rows.iter().filter_map(|r| r.gain).collect();
        (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
    }

    fn grouped(&self) -> bool {
        self.rows.iter().any(|r| r.group != self.rows[0].group)
    }

    pub fn render(&self, format: Format) -> String {
        let grouped = self.grouped();
        let gain = self.has_gain();
        let mut header: Vec<String> = Vec::new();
        if grouped {
            header.push("Group".into());
        }
        header.push("Method".into());
        header.extend(self.tasks.iter().cloned());
        header.push("Avg".into());
        if gain {
            header.push("Gain".into());
        }
        let mut lines: Vec<Vec<String>> = Vec::new();
        for r in &self.rows {
            let mut cells = Vec::new();
            if grouped {
                cells.push(r.group.clone());
            }
            cells.push(r.method.clone());
            cells.extend(r.scores.iter().map(|s| format!("{s:.2}")));
            cells.push(format!("{:.2}", r.average));
            if gain {
                cells.push(r.gain.map(|g| format!("{g:+.2}")).unwrap_or_default());
            }
            lines.push(cells);
        }
        let mut s = String::new();
        match format {
            Format::Markdown => {
                let _ = writeln!(s, "| {} |", header.join(" | "));
                let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
                for l in &lines {
                    let _ = writeln!(s, "| {} |", l.join(" | "));
                }
                if let Some(m) = self.mean_gain() {
                    let _ = writeln!(s, "\nMean gain: {m:+.2}");
                }
            }
            Format::Csv => {
                let _ = writeln!(
                    s,
                    "{}",
                    header
                        .iter()
                        .map(|h| csv_field(h))
                        .collect::<Vec<_>>()
                        .join(",")
                );
                for l in &lines {
                    let _ = writeln!(
                        s,
                        "{}",
                        l.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",")
                    );
                }
                if let Some(m) = self.mean_gain() {
                    let mut cells = vec![String::new(); header.len()];
                    cells[if grouped { 1 } else { 0 }] = "Mean gain".into();
                    cells[header.len() - 1] = format!("{m:+.2}");
                    let _ = writeln!(s, "{}", cells.join(","));
                }
            }
        }
        s
    }

    /// Read a fixture table.
    ///
    /// ```text
    /// tasks<TAB>task_1<TAB>...<TAB>task_n
    /// group<TAB>method<TAB>base|method<TAB>score_1<TAB>...<TAB>score_n
    /// ```
    pub fn parse_fixture(text: &str) -> Result<Self> {
        let mut tasks = None;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f[0] == "tasks" {
                tasks = Some(f[1..].iter().map(|t| t.to_string()).collect::<Vec<_>>());
                continue;
            }
            if f.len() < 4 {
                return Err(err(format!(
                    "expected group, method, role and scores, found {} fields",
                    f.len()
                )));
            }
            let is_base = match f[2] {
                "base" => true,
                "method" => false,
                other => return Err(err(format!("role `{other}` is neither base nor method"))),
            };
            let scores = f[3..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| err(format!("bad score `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(TableRow {
                group: f[0].to_string(),
                method: f[1].to_string(),
                is_base,
                scores,
            });
        }
        let tasks = tasks.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "fixture has no `tasks` line".into(),
        })?;
        Self::new(tasks, rows)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render records as a table.
pub fn emit_table(records: &[RunRecord], format: Format) -> Result<String> {
    Ok(TableReport::from_records(records)?.render(format))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, base: bool, scores: &[f64]) -> TableRow {
        TableRow {
            group: String::new(),
            method: method.into(),
            is_base: base,
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn averages_and_gains() {
        let t = TableReport::new(
            vec!["a".into(), "b".into()],
            vec![
                row("Base", true, &[10.0, 20.0]),
                row("X", false, &[30.0, 40.0]),
            ],
        )
        .unwrap();
        assert_eq!(t.rows[0].average, 15.0);
        assert_eq!(t.rows[1].gain, Some(20.0));
        let md = t.render(Format::Markdown);
        assert!(
            md.contains("| X | 30.00 | 40.00 | 35.00 | +20.00 |"),
            "{md}"
        );
        assert!(md.contains("Mean gain: +20.00"));
        let csv = t.render(Format::Csv);
        assert!(csv.starts_with("Method,a,b,Avg,Gain\n"), "{csv}");
    }

    #[test]
    fn no_base_means_no_gain_column() {
        let t = TableReport::new(vec!["a".into()], vec![row("X", false, &[1.0])]).unwrap();
        let md = t.render(Format::Markdown);
        assert!(!md.contains("Gain"), "{md}");
        assert!(t.mean_gain().is_none());
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(
            TableReport::new(vec!["a".into(), "b".into()], vec![row("X", false, &[1.0])]).is_err()
        );
        assert!("html".parse::<Format>().is_err());
    }
}
