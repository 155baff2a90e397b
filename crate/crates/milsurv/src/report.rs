//! Rendering of cross-validation tables as markdown and CSV.

use std::fmt::Write as _;

use milsurv_core::report::{Cell, Outcome, ReportTable};
use milsurv_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Markdown,
}

/// `0.6067, 0.0712` → `0.607 ± 0.071`.
pub fn mean_std_cell(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

pub fn render_markdown(table: &ReportTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Concordance index, mean ± standard deviation over folds (population convention, divides by K)."
    );
    let mut provenance: Vec<(u64, &str)> = table.cells().map(|(_, _, _, c)| (c.seed, c.config_hash.as_str())).collect();
    provenance.sort();
    provenance.dedup();
    for (seed, hash) in provenance {
        let _ = writeln!(out, "seed {seed}, config {hash}");
    }
    out.push('\n');
    let mut header = String::from("| Model | Extractors |");
    let mut rule = String::from("|---|---|");
    for d in &table.datasets {
        let _ = write!(header, " {d} |");
        rule.push_str("---|");
    }
    header.push_str(" Average |");
    rule.push_str("---|");
    let _ = writeln!(out, "{header}\n{rule}");

    let mut notes = Vec::new();
    for row in &table.rows {
        let _ = write!(out, "| {} | {} |", row.head, row.extractors);
        for (d, cell) in table.datasets.iter().zip(&row.cells) {
            let text = match cell.as_ref().map(|c| &c.outcome) {
                None => " |".to_string(),
                Some(Outcome::Folds(_)) => {
                    let (m, s) = cell.as_ref().and_then(Cell::mean_std).expect("non-empty folds");
                    format!(" {} |", mean_std_cell(m, s))
                }
                Some(Outcome::Failed(reason)) => {
                    notes.push(format!("{} / {} / {d}: {reason}", row.head, row.extractors));
                    format!(" —[{}] |", notes.len())
                }
            };
            out.push_str(&text);
        }
        match row.average() {
            Some((m, s)) => {
                let _ = writeln!(out, " {} |", mean_std_cell(m, s));
            }
            None => out.push_str(" — |\n"),
        }
    }
    if !notes.is_empty() {
        out.push('\n');
        for (i, n) in notes.iter().enumerate() {
            let _ = writeln!(out, "[{}] failed: {n}", i + 1);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    head: String,
    extractors: String,
    dataset: String,
    status: String,
    mean: Option<f64>,
    std: Option<f64>,
    n_folds: usize,
    /// Per-fold values separated by `;`, shortest exact decimal form.
    fold_values: String,
    seed: u64,
    config_hash: String,
    message: String,
}

pub fn render_csv(table: &ReportTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (head, extractors, dataset, cell) in table.cells() {
        let (status, folds, message) = match &cell.outcome {
            Outcome::Folds(v) => ("ok", v.as_slice(), String::new()),
            Outcome::Failed(r) => ("failed", &[][..], r.clone()),
        };
        let ms = cell.mean_std();
        w.serialize(CsvRow {
            head: head.into(),
            extractors: extractors.into(),
            dataset: dataset.into(),
            status: status.into(),
            mean: ms.map(|m| m.0),
            std: ms.map(|m| m.1),
            n_folds: folds.len(),
            fold_values: folds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            seed: cell.seed,
            config_hash: cell.config_hash.clone(),
            message,
        })
        .expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8")
}

pub fn parse_csv(text: &str) -> CliResult<ReportTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut table = ReportTable::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(CliError::csv("<report>"))?;
        let outcome = match row.status.as_str() {
            "ok" => {
                let folds = row
                    .fold_values
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Error::Ingestion(format!("report fold value: {e}")))?;
                Outcome::Folds(folds)
            }
            "failed" => Outcome::Failed(row.message),
            other => return Err(Error::Ingestion(format!("unknown report status '{other}'")).into()),
        };
        table.insert(
            &row.head,
            &row.extractors,
            &row.dataset,
            Cell {
                outcome,
                seed: row.seed,
                config_hash: row.config_hash,
            },
        );
    }
    Ok(table)
}

pub fn render(table: &ReportTable, format: Format) -> String {
    match format {
        Format::Csv => render_csv(table),
        Format::Markdown => render_markdown(table),
    }
}
