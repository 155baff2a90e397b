//! Cross-validation results grouped into the (head, extractor set) ×
//! dataset layout of the result tables.

use alloc::string::String;
use alloc::vec::Vec;

/// Mean and population standard deviation (divides by `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    /// Best validation c-index of each fold, in fold order.
    Folds(Vec<f64>),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub outcome: Outcome,
    pub seed: u64,
    pub config_hash: String,
}

impl Cell {
    pub fn mean_std(&self) -> Option<(f64, f64)> {
        match &self.outcome {
            Outcome::Folds(v) if !v.is_empty() => Some(mean_std(v)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub head: String,
    pub extractors: String,
    /// One entry per dataset column of the table.
    pub cells: Vec<Option<Cell>>,
}

impl ReportRow {
    /// Mean ± std over the pooled fold values of every dataset in the row;
    /// `None` if any cell is missing or failed.
    pub fn average(&self) -> Option<(f64, f64)> {
        let mut pooled = Vec::new();
        for c in &self.cells {
            match c.as_ref().map(|c| &c.outcome) {
                Some(Outcome::Folds(v)) => pooled.extend_from_slice(v),
                _ => return None,
            }
        }
        (!pooled.is_empty()).then(|| mean_std(&pooled))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces one cell, creating its row and column as needed.
    pub fn insert(&mut self, head: &str, extractors: &str, dataset: &str, cell: Cell) {
        let col = match self.datasets.iter().position(|d| d == dataset) {
            Some(c) => c,
            None => {
                self.datasets.push(dataset.into());
                for r in &mut self.rows {
                    r.cells.push(None);
                }
                self.datasets.len() - 1
            }
        };
        let row = match self.rows.iter().position(|r| r.head == head && r.extractors == extractors) {
            Some(r) => r,
            None => {
                self.rows.push(ReportRow {
                    head: head.into(),
                    extractors: extractors.into(),
                    cells: alloc::vec![None; self.datasets.len()],
                });
                self.rows.len() - 1
            }
        };
        self.rows[row].cells[col] = Some(cell);
    }

    pub fn get(&self, head: &str, extractors: &str, dataset: &str) -> Option<&Cell> {
        let col = self.datasets.iter().position(|d| d == dataset)?;
        self.rows
            .iter()
            .find(|r| r.head == head && r.extractors == extractors)?
            .cells[col]
            .as_ref()
    }

    pub fn merge(&mut self, other: &ReportTable) {
        for row in &other.rows {
            for (d, cell) in other.datasets.iter().zip(&row.cells) {
                if let Some(c) = cell {
                    self.insert(&row.head, &row.extractors, d, c.clone());
                }
            }
        }
    }

    /// `(head, extractors, dataset, cell)` for every filled cell.
    pub fn cells(&self) -> impl Iterator<Item = (&str, &str, &str, &Cell)> {
        self.rows.iter().flat_map(move |r| {
            self.datasets
                .iter()
                .zip(&r.cells)
                .filter_map(move |(d, c)| c.as_ref().map(|c| (r.head.as_str(), r.extractors.as_str(), d.as_str(), c)))
        })
    }
}
