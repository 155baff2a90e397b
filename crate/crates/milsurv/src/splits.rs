//! Fold assignments as `case_id,fold` CSV.

use std::collections::BTreeMap;
use std::path::Path;

use milsurv_core::cohort::FoldSplit;
use milsurv_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::store::write_atomic;

#[derive(Serialize, Deserialize)]
struct Row {
    case_id: String,
    fold: usize,
}

pub fn write_splits(split: &FoldSplit, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (case_id, &fold) in &split.assignments {
        w.serialize(Row {
            case_id: case_id.clone(),
            fold,
        })
        .map_err(CliError::csv(path))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a split file. Folds must be numbered `0..K` with every fold used.
pub fn read_splits(path: &Path) -> CliResult<FoldSplit> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let mut assignments = BTreeMap::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(CliError::csv(path))?;
        if assignments.insert(row.case_id.clone(), row.fold).is_some() {
            return Err(Error::Ingestion(format!("{}: duplicate case_id '{}'", path.display(), row.case_id)).into());
        }
    }
    let k = assignments.values().max().map_or(0, |m| m + 1);
    let split = FoldSplit { k, assignments };
    if k < 2 || split.fold_sizes().contains(&0) {
        return Err(Error::Ingestion(format!("{}: folds must be 0..K with K >= 2 and none empty", path.display())).into());
    }
    Ok(split)
}
