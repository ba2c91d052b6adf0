use std::fmt::Write;

use super::benchmark::{Method, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::validation(format!(
                "unknown report format '{s}' (expected table or csv)"
            ))),
        }
    }
}

fn corruptions(report: &RunReport) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for c in &report.cells {
        if !names.contains(&c.corruption) {
            names.push(c.corruption.clone());
        }
    }
    names
}

fn methods(report: &RunReport) -> Vec<Method> {
    let mut m: Vec<Method> = Vec::new();
    for c in &report.cells {
        if !m.contains(&c.method) {
            m.push(c.method);
        }
    }
    m
}

/// Mean accuracy of a method over the corruptions where it succeeded.
pub fn method_mean(report: &RunReport, method: Method) -> Option<f64> {
    let accs: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| c.method == method)
        .filter_map(|c| c.accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

fn percent(acc: Option<f64>) -> String {
    acc.map_or_else(|| "error".to_string(), |a| format!("{:.2}", a * 100.0))
}

/// Corruption × method accuracy grid in percent, with a mean row.
pub fn render(report: &RunReport, format: ReportFormat) -> String {
    let names = corruptions(report);
    let methods = methods(report);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["corruption".to_string()];
    header.extend(methods.iter().map(|m| m.to_string()));
    rows.push(header);
    for name in &names {
        let mut row = vec![name.clone()];
        row.extend(
            methods
                .iter()
                .map(|&m| percent(report.cell(name, m).and_then(|c| c.accuracy))),
        );
        rows.push(row);
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend(methods.iter().map(|&m| percent(method_mean(report, m))));
    rows.push(mean);

    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            for row in &rows {
                writeln!(out, "{}", row.join(",")).unwrap();
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..rows[0].len())
                .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
                .collect();
            for (r, row) in rows.iter().enumerate() {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (v, &w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                    .collect();
                writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
                if r == 0 || r + 2 == rows.len() {
                    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                    writeln!(out, "{}", "-".repeat(total)).unwrap();
                }
            }
        }
    }
    let failed: Vec<String> = report
        .cells
        .iter()
        .filter(|c| c.failed())
        .map(|c| {
            let why = c
                .error
                .clone()
                .unwrap_or_else(|| format!("{} images failed to load or corrupt", c.item_errors.len()));
            format!("{} / {}: {why}", c.corruption, c.method)
        })
        .collect();
    if format == ReportFormat::Table && !failed.is_empty() {
        writeln!(out, "\nfailures:").unwrap();
        for f in failed {
            writeln!(out, "  {f}").unwrap();
        }
    }
    out
}
