//! Synthetic cohorts with a known latent risk, written in the same layout
//! as real data: a manifest CSV plus one feature file per slide and
//! extractor.

use std::path::{Path, PathBuf};

use milsurv_core::features::{Coord, ExtractorRegistry, FeatureMatrix};
use milsurv_core::{Error, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::store::{feature_path, write_features, write_manifest, Manifest, ManifestRow};

pub const DEFAULT_EXTRACTOR: &str = "synthetic";
/// Median survival of an average-risk patient is about `ln 2 · 30` months.
pub const TIME_SCALE_MONTHS: f64 = 30.0;
pub const PATCH_SIZE: i32 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Width of extractors without a registered dimension.
    pub d: usize,
    pub censor_fraction: f64,
    pub signal_strength: f64,
    pub seed: u64,
    pub extractors: Vec<String>,
    pub min_patches: usize,
    pub max_patches: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 400,
            d: 32,
            censor_fraction: 0.45,
            signal_strength: 1.0,
            seed: 0,
            extractors: vec![DEFAULT_EXTRACTOR.to_string()],
            min_patches: 20,
            max_patches: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n < 20 {
            return Err(Error::Config(format!("synthetic cohort needs n >= 20, got {}", self.n)));
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return Err(Error::Config(format!("censor fraction {} outside [0, 1)", self.censor_fraction)));
        }
        if !self.signal_strength.is_finite() || self.d == 0 {
            return Err(Error::Config("signal strength must be finite and d positive".into()));
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return Err(Error::Config(format!(
                "invalid patch range {}..={}",
                self.min_patches, self.max_patches
            )));
        }
        if self.extractors.is_empty() {
            return Err(Error::Config("at least one extractor is required".into()));
        }
        Ok(())
    }

    pub fn dim_of(&self, extractor: &str, registry: &ExtractorRegistry) -> usize {
        registry.expected_dim(extractor).unwrap_or(self.d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthPatient {
    pub case_id: String,
    pub slide_id: String,
    pub latent_risk: f64,
    pub survival_months: f64,
    pub censored: bool,
    pub patches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub config: SynthConfig,
    pub censored: usize,
    pub realized_censor_fraction: f64,
    /// Upper end of the uniform censoring distribution, in months.
    pub censor_horizon: Option<f64>,
    pub manifest: PathBuf,
    pub feature_root: PathBuf,
}

const CLINICAL_STREAM: u64 = 1;
const DIRECTION_STREAM: u64 = 2;
const FEATURE_STREAM: u64 = 1 << 32;

/// Draws the clinical table: latent risk, exponential event time, uniform
/// censoring calibrated on the realized draws, and a patch count per slide.
pub fn draw_patients(config: &SynthConfig) -> Result<(Vec<SynthPatient>, Option<f64>), Error> {
    config.validate()?;
    let mut rng = Rng::new(config.seed, CLINICAL_STREAM);
    let n = config.n;
    let latent: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let event: Vec<f64> = latent
        .iter()
        .map(|r| -(1.0 - rng.uniform()).ln() / (config.signal_strength * r).exp() * TIME_SCALE_MONTHS)
        .collect();
    let censor_u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let patches: Vec<usize> = (0..n)
        .map(|_| rng.int_inclusive(config.min_patches, config.max_patches))
        .collect();

    let horizon = censor_horizon(&event, &censor_u, config.censor_fraction);
    let patients = (0..n)
        .map(|i| {
            let cut = horizon.map_or(f64::INFINITY, |h| censor_u[i] * h);
            let censored = cut < event[i];
            let case_id = format!("SYN-{i:04}");
            SynthPatient {
                slide_id: format!("{case_id}-01"),
                case_id,
                latent_risk: latent[i],
                survival_months: if censored { cut } else { event[i] },
                censored,
                patches: patches[i],
            }
        })
        .collect();
    Ok((patients, horizon))
}

/// Smallest horizon `h` for which the share of `u_i·h < t_i` is at most
/// `target`, found by bisection; `None` means no censoring.
fn censor_horizon(event: &[f64], u: &[f64], target: f64) -> Option<f64> {
    if target <= 0.0 {
        return None;
    }
    let n = event.len() as f64;
    let fraction = |h: f64| event.iter().zip(u).filter(|(t, u)| *u * h < **t).count() as f64 / n;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while fraction(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// Unit-norm signal direction of one extractor.
fn direction(seed: u64, extractor_index: usize, d: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed, DIRECTION_STREAM + ((extractor_index as u64) << 8));
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn coords(m: usize) -> Vec<Coord> {
    let cols = (m as f64).sqrt().ceil() as usize;
    (0..m)
        .map(|j| [(j % cols) as i32 * PATCH_SIZE, (j / cols) as i32 * PATCH_SIZE])
        .collect()
}

/// Features of one slide: standard normal noise plus `latent · direction`
/// on every patch.
pub fn slide_features(
    config: &SynthConfig,
    patient_index: usize,
    patient: &SynthPatient,
    extractor_index: usize,
    extractor: &str,
    direction: &[f64],
) -> Result<FeatureMatrix, Error> {
    let d = direction.len();
    let stream = FEATURE_STREAM * (extractor_index as u64 + 1) + patient_index as u64;
    let mut rng = Rng::new(config.seed, stream);
    let m = patient.patches;
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        for u in direction {
            data.push((rng.normal() + patient.latent_risk * u) as f32);
        }
    }
    FeatureMatrix::new(extractor, Tensor::new(m, d, data)?, Some(coords(m)))
}

/// Writes `<out>/manifest.csv` and `<out>/features/<extractor>/<slide>.milf`.
pub fn synth_cohort(config: &SynthConfig, out: &Path, registry: &ExtractorRegistry) -> CliResult<SynthSummary> {
    let (patients, horizon) = draw_patients(config)?;
    let feature_root = out.join("features");
    let dims: Vec<usize> = config.extractors.iter().map(|e| config.dim_of(e, registry)).collect();
    let directions: Vec<Vec<f64>> = dims.iter().enumerate().map(|(k, &d)| direction(config.seed, k, d)).collect();
    let mut manifest = Manifest {
        extractors: config.extractors.clone(),
        ..Manifest::default()
    };
    for (i, p) in patients.iter().enumerate() {
        let mut feature_paths = std::collections::BTreeMap::new();
        for (k, ex) in config.extractors.iter().enumerate() {
            let fm = slide_features(config, i, p, k, ex, &directions[k])?;
            registry.validate(&fm)?;
            let path = feature_path(&feature_root, ex, &p.slide_id);
            write_features(&fm, &path)?;
            feature_paths.insert(ex.clone(), path);
        }
        manifest.rows.push(ManifestRow {
            case_id: p.case_id.clone(),
            slide_id: p.slide_id.clone(),
            survival_months: p.survival_months,
            censored: p.censored,
            feature_paths,
        });
    }
    let manifest_path = out.join("manifest.csv");
    write_manifest(&manifest, &manifest_path, &feature_root)?;
    let censored = patients.iter().filter(|p| p.censored).count();
    Ok(SynthSummary {
        config: config.clone(),
        censored,
        realized_censor_fraction: censored as f64 / config.n as f64,
        censor_horizon: horizon,
        manifest: manifest_path,
        feature_root,
    })
}
