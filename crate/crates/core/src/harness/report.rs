//! Benchmark result rows, CSV storage and Markdown tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::registry::Category;
use crate::error::{Error, Result};

/// One method evaluated at one episode setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub method: String,
    pub category: Category,
    pub n_way: usize,
    pub k_shot: usize,
    /// Mean episode accuracy in percent.
    pub accuracy: f64,
    /// 95% confidence half-width in percent.
    pub ci95: f64,
    pub minutes_per_epoch: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// Column order of the results file.
pub const COLUMNS: [&str; 9] = [
    "method",
    "category",
    "n_way",
    "k_shot",
    "accuracy",
    "ci95",
    "minutes_per_epoch",
    "seed",
    "config_digest",
];

/// Results as CSV text with a header line, also for an empty list.
pub fn to_csv_string(rows: &[BenchmarkResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    if rows.is_empty() {
        w.write_record(COLUMNS).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv(rows: &[BenchmarkResult], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchmarkResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Append rows to a CSV file, writing the header only for a new file.
pub fn append_csv(rows: &[BenchmarkResult], path: &Path) -> Result<()> {
    let mut all = if path.exists() { read_csv(path)? } else { Vec::new() };
    all.extend_from_slice(rows);
    write_csv(&all, path)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

/// For each (category, n_way, k_shot) group, flag the row with the highest
/// accuracy. Ties go to the earliest row.
pub fn best_flags(rows: &[BenchmarkResult]) -> Vec<bool> {
    let mut flags = vec![false; rows.len()];
    for (i, r) in rows.iter().enumerate() {
        let beaten = rows.iter().enumerate().any(|(j, o)| {
            j != i
                && o.category == r.category
                && o.n_way == r.n_way
                && o.k_shot == r.k_shot
                && (o.accuracy > r.accuracy || (o.accuracy == r.accuracy && j < i))
        });
        flags[i] = !beaten && !r.accuracy.is_nan();
    }
    flags
}

/// Episode settings as `(n_way, k_shot)` columns, sorted.
fn settings(rows: &[BenchmarkResult]) -> Vec<(usize, usize)> {
    rows.iter()
        .map(|r| (r.n_way, r.k_shot))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Method rows ordered by category, then by first appearance.
fn method_order(rows: &[BenchmarkResult]) -> Vec<(Category, String)> {
    let mut seen: Vec<(Category, String)> = Vec::new();
    for r in rows {
        if !seen.iter().any(|(_, m)| *m == r.method) {
            seen.push((r.category, r.method.clone()));
        }
    }
    seen.sort_by_key(|(c, _)| *c);
    seen
}

/// Place each row in its (method, setting) cell, rejecting duplicates and
/// methods listed under two categories.
fn layout(rows: &[BenchmarkResult]) -> Result<(Vec<(Category, String)>, Vec<(usize, usize)>, Vec<Vec<Option<usize>>>)> {
    let methods = method_order(rows);
    let cols = settings(rows);
    let mut cells = vec![vec![None; cols.len()]; methods.len()];
    for (i, r) in rows.iter().enumerate() {
        let m = methods.iter().position(|(_, m)| *m == r.method).expect("method listed");
        if methods[m].0 != r.category {
            return Err(Error::Layout(format!("{} appears under two categories", r.method)));
        }
        let c = cols.iter().position(|&s| s == (r.n_way, r.k_shot)).expect("setting listed");
        if cells[m][c].replace(i).is_some() {
            return Err(Error::Layout(format!(
                "{} has more than one result for {}-way {}-shot",
                r.method, r.n_way, r.k_shot
            )));
        }
    }
    Ok((methods, cols, cells))
}

fn header(out: &mut String, first: &str, cols: &[(usize, usize)]) {
    let _ = write!(out, "| {first} | Category |");
    for (n, k) in cols {
        let _ = write!(out, " {n}-way {k}-shot |");
    }
    out.push_str("\n|---|---|");
    for _ in cols {
        out.push_str("---:|");
    }
    out.push('\n');
}

/// Accuracy table (best per category in bold) followed by a table of
/// training minutes per epoch.
pub fn render_markdown(rows: &[BenchmarkResult]) -> Result<String> {
    let (methods, cols, cells) = layout(rows)?;
    let best = best_flags(rows);
    let mut out = String::new();
    header(&mut out, "Method", &cols);
    for ((cat, name), line) in methods.iter().zip(&cells) {
        let _ = write!(out, "| {name} | {cat} |");
        for cell in line {
            match cell {
                Some(i) => {
                    let r = &rows[*i];
                    let text = format!("{:.2} ± {:.2}", r.accuracy, r.ci95);
                    if best[*i] {
                        let _ = write!(out, " **{text}** |");
                    } else {
                        let _ = write!(out, " {text} |");
                    }
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\nMinutes per training epoch:\n\n");
    header(&mut out, "Method", &cols);
    for ((cat, name), line) in methods.iter().zip(&cells) {
        let _ = write!(out, "| {name} | {cat} |");
        for cell in line {
            match cell {
                Some(i) => {
                    let _ = write!(out, " {:.2} |", rows[*i].minutes_per_epoch);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Published 5-way results on the ten-class vehicle benchmark with the
/// four-block backbone: accuracy (1-shot, 5-shot) and minutes per epoch
/// (1-shot, 5-shot).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub category: Category,
    pub accuracy: [f64; 2],
    pub minutes: [f64; 2],
}

pub const REFERENCE: [ReferenceRow; 15] = [
    ReferenceRow { method: "Baseline", category: Category::FineTuning, accuracy: [54.44, 83.13], minutes: [0.9, 2.18] },
    ReferenceRow { method: "Baseline++", category: Category::FineTuning, accuracy: [59.98, 86.37], minutes: [5.85, 15.27] },
    ReferenceRow { method: "SKD_Model", category: Category::FineTuning, accuracy: [57.92, 78.39], minutes: [0.48, 0.52] },
    ReferenceRow { method: "MAML", category: Category::Meta, accuracy: [19.87, 60.67], minutes: [0.1, 0.18] },
    ReferenceRow { method: "Versa", category: Category::Meta, accuracy: [66.96, 68.01], minutes: [0.72, 0.76] },
    ReferenceRow { method: "R2D2", category: Category::Meta, accuracy: [63.99, 68.88], minutes: [0.58, 0.68] },
    ReferenceRow { method: "MTL", category: Category::Meta, accuracy: [18.13, 47.07], minutes: [0.08, 0.1] },
    ReferenceRow { method: "Leo", category: Category::Meta, accuracy: [36.0, 44.0], minutes: [0.08, 0.1] },
    ReferenceRow { method: "ANIL", category: Category::Meta, accuracy: [20.99, 61.91], minutes: [0.62, 0.84] },
    ReferenceRow { method: "ProtoNet", category: Category::Metric, accuracy: [39.68, 42.72], minutes: [0.46, 0.52] },
    ReferenceRow { method: "Feat", category: Category::Metric, accuracy: [46.11, 56.36], minutes: [0.6, 0.74] },
    ReferenceRow { method: "RelationNet", category: Category::Metric, accuracy: [64.84, 77.51], minutes: [0.64, 0.78] },
    ReferenceRow { method: "DN4", category: Category::Metric, accuracy: [67.37, 85.15], minutes: [0.64, 0.8] },
    ReferenceRow { method: "ATL_Net", category: Category::Metric, accuracy: [72.03, 88.81], minutes: [0.63, 0.76] },
    ReferenceRow { method: "CovaMNet", category: Category::Metric, accuracy: [58.75, 45.75], minutes: [0.62, 0.76] },
];

/// The reference table as result rows (5-way, 1 and 5 shots, no interval).
pub fn reference_results() -> Vec<BenchmarkResult> {
    REFERENCE
        .iter()
        .flat_map(|r| {
            [(1usize, 0usize), (5, 1)].map(|(k, i)| BenchmarkResult {
                method: r.method.to_string(),
                category: r.category,
                n_way: 5,
                k_shot: k,
                accuracy: r.accuracy[i],
                ci95: 0.0,
                minutes_per_epoch: r.minutes[i],
                seed: 0,
                config_digest: "reference".to_string(),
            })
        })
        .collect()
}
