//! Batch F1/IoU consistency audit over a table of published results.
//!
//! Input columns (header required, order free): `method`, `dataset`, `f1`,
//! `iou`, `oa`, `decimals`. `f1`, `iou` and `oa` are the figures as printed
//! (fractions, `oa` may be a percentage and is carried through unchecked).
//! Blank `decimals` means "as many decimals as the longer of `f1` and `iou`".
//! A row with a blank `f1` or `iou` gets the verdict `insufficient data`.

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{audit_consistency, AuditResult, Verdict};
use crate::train::csv_err;

/// M-CD's published F1 figures next to the re-evaluated ones, with the IoU
/// and OA that go with them where they were published.
pub const BUNDLED_TABLE: &str = include_str!("../data/mcd_f1_audit.csv");

#[derive(Clone, Debug, Deserialize)]
struct RawRow {
    method: String,
    dataset: String,
    #[serde(default)]
    f1: String,
    #[serde(default)]
    iou: String,
    #[serde(default)]
    oa: String,
    #[serde(default)]
    decimals: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub method: String,
    pub dataset: String,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub oa: Option<f64>,
    pub decimals: u32,
    /// 1-based line in the source table.
    pub line: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowVerdict {
    Checked(Verdict),
    InsufficientData,
}

impl fmt::Display for RowVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowVerdict::Checked(v) => v.fmt(f),
            RowVerdict::InsufficientData => f.write_str("insufficient data"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditedRow {
    pub row: AuditRow,
    pub verdict: RowVerdict,
    pub detail: Option<AuditResult>,
}

fn decimals_of(text: &str) -> u32 {
    text.split_once('.')
        .map_or(0, |(_, frac)| frac.len() as u32)
}

fn parse_field(text: &str, what: &str, path: &Path, line: u64) -> Result<Option<f64>> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse().map(Some).map_err(|_| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg: format!("`{what}` is not a number: {t:?}"),
    })
}

fn parse_rows(mut reader: csv::Reader<impl std::io::Read>, path: &Path) -> Result<Vec<AuditRow>> {
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let raw: RawRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| csv_err(path, e))?;
        let decimals = if raw.decimals.is_empty() {
            decimals_of(&raw.f1).max(decimals_of(&raw.iou))
        } else {
            raw.decimals.parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                line,
                msg: format!("`decimals` is not a count: {:?}", raw.decimals),
            })?
        };
        rows.push(AuditRow {
            f1: parse_field(&raw.f1, "f1", path, line)?,
            iou: parse_field(&raw.iou, "iou", path, line)?,
            oa: parse_field(&raw.oa, "oa", path, line)?,
            method: raw.method,
            dataset: raw.dataset,
            decimals,
            line,
        });
    }
    Ok(rows)
}

pub fn read_table(path: &Path) -> Result<Vec<AuditRow>> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    parse_rows(reader, path)
}

pub fn bundled_table() -> Vec<AuditRow> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BUNDLED_TABLE.as_bytes());
    parse_rows(reader, Path::new("<bundled>")).expect("bundled table parses")
}

pub fn audit_row(row: &AuditRow) -> Result<AuditedRow> {
    let (Some(f1), Some(iou)) = (row.f1, row.iou) else {
        return Ok(AuditedRow {
            row: row.clone(),
            verdict: RowVerdict::InsufficientData,
            detail: None,
        });
    };
    let detail = audit_consistency(f1, iou, row.decimals)
        .map_err(|e| Error::Metrics(format!("line {}: {e}", row.line)))?;
    Ok(AuditedRow {
        row: row.clone(),
        verdict: RowVerdict::Checked(detail.verdict),
        detail: Some(detail),
    })
}

pub fn audit_rows(rows: &[AuditRow]) -> Result<Vec<AuditedRow>> {
    rows.iter().map(audit_row).collect()
}

fn fmt_opt(v: Option<f64>, decimals: u32) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.*}", decimals as usize))
}

fn fmt_interval(lo: f64, hi: f64, closed: bool) -> String {
    format!("[{lo:.5}, {hi:.5}{}", if closed { "]" } else { ")" })
}

/// Fixed-width text table, one line per row after a header.
pub fn render_table(rows: &[AuditedRow]) -> String {
    let header = [
        "method",
        "dataset",
        "f1",
        "iou",
        "decimals",
        "iou interval",
        "f1 from iou",
        "verdict",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let (ii, fi) = match &r.detail {
            Some(d) => {
                let (a, b) = d.iou_interval.to_f64();
                let (c, e) = d.f1_interval.to_f64();
                (
                    fmt_interval(a, b, d.iou_interval.hi_inclusive),
                    fmt_interval(c, e, d.f1_interval.hi_inclusive),
                )
            }
            None => ("-".into(), "-".into()),
        };
        cells.push(vec![
            r.row.method.clone(),
            r.row.dataset.clone(),
            fmt_opt(r.row.f1, r.row.decimals),
            fmt_opt(r.row.iou, r.row.decimals),
            r.row.decimals.to_string(),
            ii,
            fi,
            r.verdict.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            cells
                .iter()
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_rows_parse() {
        let rows = bundled_table();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.decimals == 3));
        assert_eq!(rows[0].iou, None);
    }

    #[test]
    fn decimals_inferred_from_text() {
        assert_eq!(decimals_of("0.9215"), 4);
        assert_eq!(decimals_of("1"), 0);
    }
}
