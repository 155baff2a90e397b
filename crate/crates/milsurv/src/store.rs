//! Feature files on disk and the clinical manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use milsurv_core::cohort::PatientRecord;
use milsurv_core::features::{concat_ensemble, ExtractorRegistry, FeatureMatrix, ENSEMBLE_SEPARATOR};
use milsurv_core::{milf, Error};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const FEATURE_EXTENSION: &str = "milf";

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    f.write_all(bytes).map_err(CliError::io(&tmp))?;
    f.sync_all().map_err(CliError::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn write_features(fm: &FeatureMatrix, path: &Path) -> CliResult<()> {
    write_atomic(path, &milf::encode(fm))
}

pub fn read_features(path: &Path, registry: &ExtractorRegistry) -> CliResult<FeatureMatrix> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    milf::decode(&bytes, registry).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())).into(),
        other => other.into(),
    })
}

/// `<root>/<extractor>/<slide_id>.milf`, the layout written by `synth` and
/// `concat`.
pub fn feature_path(root: &Path, extractor: &str, slide_id: &str) -> PathBuf {
    root.join(extractor).join(format!("{slide_id}.{FEATURE_EXTENSION}"))
}

/// Parses `"uni,uni+hibou-base"` into extractor sets.
pub fn parse_extractor_sets(spec: &str) -> CliResult<Vec<Vec<String>>> {
    let sets: Vec<Vec<String>> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.split(ENSEMBLE_SEPARATOR).map(|p| p.trim().to_string()).collect())
        .collect();
    if sets.is_empty() || sets.iter().flatten().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("invalid extractor list '{spec}'")));
    }
    Ok(sets)
}

pub fn set_name(set: &[String]) -> String {
    set.join(&ENSEMBLE_SEPARATOR.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub slide_id: String,
    pub survival_months: f64,
    pub censored: bool,
    /// Extractor id to feature file, resolved against the feature root.
    pub feature_paths: BTreeMap<String, PathBuf>,
}

impl ManifestRow {
    pub fn record(&self) -> PatientRecord {
        PatientRecord::new(self.case_id.clone(), self.survival_months, self.censored)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line in the CSV, header included.
    pub line: usize,
    pub case_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Manifest {
    pub extractors: Vec<String>,
    pub rows: Vec<ManifestRow>,
    pub rejected: Vec<Rejection>,
}

const REQUIRED: [&str; 4] = ["case_id", "slide_id", "survival_months", "censored"];

/// Reads the clinical CSV. Feature paths in extractor columns are relative
/// to `feature_root`. Rows lacking a readable-looking file for any extractor
/// in `required` are dropped into [`Manifest::rejected`]; duplicate case ids
/// and malformed clinical values fail the whole load.
pub fn load_manifest(csv_path: &Path, feature_root: &Path, required: &[String]) -> CliResult<Manifest> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(CliError::csv(csv_path))?;
    let headers = reader.headers().map_err(CliError::csv(csv_path))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::Ingestion(format!("{}: missing column '{name}'", csv_path.display())))?;
    }
    let extractors: Vec<String> = headers
        .iter()
        .map(|h| h.trim().to_string())
        .filter(|h| !REQUIRED.contains(&h.as_str()))
        .collect();
    for r in required {
        if !extractors.contains(r) {
            return Err(Error::Ingestion(format!("{}: no column for extractor '{r}'", csv_path.display())).into());
        }
    }

    let mut manifest = Manifest {
        extractors: extractors.clone(),
        ..Manifest::default()
    };
    let mut seen = BTreeSet::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(CliError::csv(csv_path))?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let case_id = field(idx[0]).to_string();
        let bad = |what: String| Error::Ingestion(format!("{}:{line}: {what}", csv_path.display()));
        if case_id.is_empty() {
            return Err(bad("empty case_id".into()).into());
        }
        if !seen.insert(case_id.clone()) {
            return Err(bad(format!("duplicate case_id '{case_id}'")).into());
        }
        let survival_months: f64 = field(idx[2])
            .parse()
            .map_err(|_| bad(format!("survival_months '{}' is not a number", field(idx[2]))))?;
        if !(survival_months >= 0.0 && survival_months.is_finite()) {
            return Err(bad(format!("negative or non-finite survival_months {survival_months}")).into());
        }
        let censored = match field(idx[3]) {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("censored must be 0 or 1, got '{other}'")).into()),
        };
        let mut feature_paths = BTreeMap::new();
        for ex in &extractors {
            let k = headers.iter().position(|h| h.trim() == ex).expect("column exists");
            let rel = field(k);
            if !rel.is_empty() {
                feature_paths.insert(ex.clone(), feature_root.join(rel));
            }
        }
        let missing: Vec<&str> = required
            .iter()
            .filter(|r| feature_paths.get(*r).is_none_or(|p| !p.is_file()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            manifest.rejected.push(Rejection {
                line,
                case_id,
                reason: format!("missing feature file for {}", missing.join(", ")),
            });
            continue;
        }
        manifest.rows.push(ManifestRow {
            case_id,
            slide_id: field(idx[1]).to_string(),
            survival_months,
            censored,
            feature_paths,
        });
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path, feature_root: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(manifest.extractors.iter().map(String::as_str));
    w.write_record(&header).map_err(CliError::csv(path))?;
    for r in &manifest.rows {
        let mut rec = vec![
            r.case_id.clone(),
            r.slide_id.clone(),
            r.survival_months.to_string(),
            if r.censored { "1" } else { "0" }.to_string(),
        ];
        for ex in &manifest.extractors {
            let p = r.feature_paths.get(ex).map(|p| p.strip_prefix(feature_root).unwrap_or(p));
            rec.push(p.map(|p| p.to_string_lossy().into_owned()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(CliError::csv(path))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Loads one bag for an extractor set, concatenating ensemble parts.
pub fn load_bag(row: &ManifestRow, set: &[String], registry: &ExtractorRegistry) -> CliResult<FeatureMatrix> {
    let mut parts = Vec::with_capacity(set.len());
    for ex in set {
        let path = row
            .feature_paths
            .get(ex)
            .ok_or_else(|| Error::Ingestion(format!("case '{}' has no '{ex}' features", row.case_id)))?;
        let fm = read_features(path, registry)?;
        if fm.extractor_id != *ex {
            return Err(Error::Ingestion(format!(
                "{}: file declares extractor '{}', manifest column is '{ex}'",
                path.display(),
                fm.extractor_id
            ))
            .into());
        }
        parts.push(fm);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    Ok(concat_ensemble(&parts)?.into_feature_matrix())
}
