//! K-fold cross-validation over a grid of heads and extractor sets.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json               resolved configuration, seed, config hash
//! <run>/splits.csv                fold assignment used
//! <run>/rejected.csv              manifest rows dropped at load time
//! <run>/cells/<head>__<set>/fold<k>/log.csv    epoch,train_loss,val_cindex
//! <run>/cells/<head>__<set>/fold<k>/best.milc  best-epoch checkpoint
//! <run>/report.csv, report.md
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use milsurv_core::cohort::{discretize, split_kfold, FoldSplit, PatientRecord};
use milsurv_core::features::ExtractorRegistry;
use milsurv_core::heads::{HeadConfig, HeadKind, MilHead};
use milsurv_core::report::{Cell, Outcome, ReportTable};
use milsurv_core::train::{evaluate, train_fold, EpochLog, Sample, TrainConfig};
use milsurv_core::{Error, Rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{CliError, CliResult};
use crate::report::{render_csv, render_markdown};
use crate::splits::{read_splits, write_splits};
use crate::store::{load_bag, load_manifest, set_name, write_atomic, Manifest};

pub const SPLIT_STREAM: u64 = 0x5711;

/// Everything that determines the numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub extractor_sets: Vec<Vec<String>>,
    pub heads: Vec<HeadKind>,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub train: TrainConfig,
    pub folds: usize,
    /// Column label in the report, e.g. the cohort name.
    pub dataset: String,
    /// Fixed fold assignment; drawn from the seed when absent.
    pub splits: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(manifest: impl Into<PathBuf>, features: impl Into<PathBuf>, train: TrainConfig) -> Self {
        RunSpec {
            manifest: manifest.into(),
            features: features.into(),
            extractor_sets: vec![vec!["uni".into()]],
            heads: vec![HeadKind::Mean],
            hidden_dim: 512,
            attn_dim: 128,
            train,
            folds: 5,
            dataset: "cohort".into(),
            splits: None,
        }
    }

    pub fn head_config(&self, kind: HeadKind, input_dim: usize) -> HeadConfig {
        let mut c = HeadConfig::new(kind, input_dim);
        c.hidden_dim = self.hidden_dim;
        c.attn_dim = self.attn_dim;
        c.dropout = self.train.dropout;
        c
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)).into());
        }
        if self.heads.is_empty() || self.extractor_sets.is_empty() {
            return Err(CliError::Usage("at least one head and one extractor set are required".into()));
        }
        Ok(())
    }
}

/// The hashed part of the configuration: data are identified by content,
/// so moving files or choosing another output directory keeps the hash.
#[derive(Serialize)]
struct HashedConfig<'a> {
    manifest_sha256: String,
    splits_sha256: Option<String>,
    extractor_sets: &'a [Vec<String>],
    heads: &'a [HeadKind],
    hidden_dim: usize,
    attn_dim: usize,
    train: &'a TrainConfig,
    folds: usize,
    dataset: &'a str,
    bins: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(CliError::io(path))?))
}

/// Short content hash of the resolved configuration.
pub fn config_hash(spec: &RunSpec) -> CliResult<String> {
    let hashed = HashedConfig {
        manifest_sha256: file_sha256(&spec.manifest)?,
        splits_sha256: spec.splits.as_deref().map(file_sha256).transpose()?,
        extractor_sets: &spec.extractor_sets,
        heads: &spec.heads,
        hidden_dim: spec.hidden_dim,
        attn_dim: spec.attn_dim,
        train: &spec.train,
        folds: spec.folds,
        dataset: &spec.dataset,
        bins: HeadConfig::BINS,
    };
    let json = serde_json::to_vec(&hashed).expect("config serializes");
    Ok(sha256_hex(&json)[..16].to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub spec: RunSpec,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_cindex: f64,
    pub final_train_loss: f64,
    pub stopped_epoch: usize,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldRecord {
    pub head: HeadKind,
    pub extractors: String,
    pub fold: usize,
    pub result: Result<FoldResult, String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub table: ReportTable,
    pub folds: Vec<FoldRecord>,
    pub manifest: Manifest,
}

/// Independent random stream for one fold job, derived from its identity
/// so results do not depend on scheduling.
pub fn stream_for(head: HeadKind, set: &str, fold: usize, purpose: &str) -> u64 {
    let digest = Sha256::digest(format!("{}|{set}|{fold}|{purpose}", head.as_str()).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn cell_dir(run_dir: &Path, head: HeadKind, set: &str, fold: usize) -> PathBuf {
    run_dir.join("cells").join(format!("{}__{set}", head.as_str())).join(format!("fold{fold}"))
}

/// Labelled cohort after binning, in manifest order.
pub struct Cohort {
    pub manifest: Manifest,
    pub records: Vec<PatientRecord>,
    pub split: FoldSplit,
}

pub fn prepare_cohort(spec: &RunSpec, split_override: Option<FoldSplit>) -> CliResult<Cohort> {
    let required: Vec<String> = {
        let mut all: Vec<String> = spec.extractor_sets.iter().flatten().cloned().collect();
        all.sort();
        all.dedup();
        all
    };
    let manifest = load_manifest(&spec.manifest, &spec.features, &required)?;
    if manifest.rows.len() < spec.folds {
        return Err(Error::Ingestion(format!(
            "{} usable rows for {} folds",
            manifest.rows.len(),
            spec.folds
        ))
        .into());
    }
    let mut records: Vec<PatientRecord> = manifest.rows.iter().map(|r| r.record()).collect();
    discretize(&mut records, HeadConfig::BINS)?;
    let split = match split_override {
        Some(s) => s,
        None => match &spec.splits {
            Some(p) => read_splits(p)?,
            None => split_kfold(&records, spec.folds, &mut Rng::new(spec.train.seed, SPLIT_STREAM))?,
        },
    };
    for r in &records {
        if split.fold_of(&r.case_id).is_none() {
            return Err(Error::Ingestion(format!("case '{}' has no fold assignment", r.case_id)).into());
        }
    }
    if split.k != spec.folds {
        return Err(Error::Config(format!("split has {} folds, run asks for {}", split.k, spec.folds)).into());
    }
    Ok(Cohort {
        manifest,
        records,
        split,
    })
}

fn load_bags(cohort: &Cohort, set: &[String], registry: &ExtractorRegistry) -> CliResult<Vec<Tensor<f32>>> {
    cohort
        .manifest
        .rows
        .iter()
        .map(|row| Ok(load_bag(row, set, registry)?.values))
        .collect()
}

fn samples<'a>(cohort: &'a Cohort, bags: &'a [Tensor<f32>], fold: usize, validation: bool) -> Vec<Sample<'a, f32>> {
    cohort
        .records
        .iter()
        .zip(bags)
        .filter(|(r, _)| (cohort.split.fold_of(&r.case_id) == Some(fold)) == validation)
        .map(|(r, bag)| Sample {
            case_id: &r.case_id,
            bag,
            bin: r.bin.expect("discretized"),
            time: r.survival_months,
            censored: r.censored,
        })
        .collect()
}

fn write_log(path: &Path, log: &[EpochLog]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in log {
        w.serialize(e).map_err(CliError::csv(path))?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?)
}

struct Job {
    head: HeadKind,
    fold: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    spec: &RunSpec,
    hash: &str,
    run_dir: &Path,
    cohort: &Cohort,
    bags: &[Tensor<f32>],
    set: &str,
    job: &Job,
) -> CliResult<FoldResult> {
    let train = samples(cohort, bags, job.fold, false);
    let val = samples(cohort, bags, job.fold, true);
    let config = spec.head_config(job.head, bags[0].cols());
    let seed = spec.train.seed;
    let mut head = MilHead::<f32>::new(config, &mut Rng::new(seed, stream_for(job.head, set, job.fold, "init")))?;
    let mut rng = Rng::new(seed, stream_for(job.head, set, job.fold, "train"));
    let out = train_fold(&mut head, &train, &val, &spec.train, &mut rng)?;
    let dir = cell_dir(run_dir, job.head, set, job.fold);
    write_log(&dir.join("log.csv"), &out.log)?;
    let checkpoint = dir.join("best.milc");
    let header = CheckpointHeader {
        head: config,
        extractors: set.to_string(),
        seed,
        fold: job.fold,
        epoch: out.best_epoch,
        val_cindex: out.best_val_cindex,
        config_hash: hash.to_string(),
    };
    checkpoint::save(&checkpoint, &header, &out.best_params)?;
    Ok(FoldResult {
        fold: job.fold,
        best_epoch: out.best_epoch,
        best_val_cindex: out.best_val_cindex,
        final_train_loss: out.final_train_loss,
        stopped_epoch: out.stopped_epoch,
        checkpoint,
    })
}

/// Runs every (head, extractor set, fold) job and writes the run directory.
/// A failing fold marks its cell as failed; other cells still run. Results
/// are identical for any `jobs ≥ 1`.
pub fn run_cv(spec: &RunSpec, run_dir: &Path, jobs: usize) -> CliResult<RunOutcome> {
    spec.validate()?;
    let registry = ExtractorRegistry::default();
    let hash = config_hash(spec)?;
    let cohort = prepare_cohort(spec, None)?;
    fs::create_dir_all(run_dir).map_err(CliError::io(run_dir))?;
    let snapshot = RunSnapshot {
        spec: spec.clone(),
        seed: spec.train.seed,
        config_hash: hash.clone(),
    };
    let json = serde_json::to_vec_pretty(&snapshot).expect("snapshot serializes");
    write_atomic(&run_dir.join("config.json"), &json)?;
    write_splits(&cohort.split, &run_dir.join("splits.csv"))?;
    write_rejections(&cohort.manifest, &run_dir.join("rejected.csv"))?;

    let mut table = ReportTable::new();
    let mut records = Vec::new();
    for set in &spec.extractor_sets {
        let name = set_name(set);
        let bags = load_bags(&cohort, set, &registry)?;
        let queue: Vec<Job> = spec
            .heads
            .iter()
            .flat_map(|&head| (0..spec.folds).map(move |fold| Job { head, fold }))
            .collect();
        let results: Vec<Mutex<Option<CliResult<FoldResult>>>> = queue.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = jobs.clamp(1, queue.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = queue.get(i) else { break };
                    let r = run_fold(spec, &hash, run_dir, &cohort, &bags, &name, job);
                    match &r {
                        Ok(f) => eprintln!(
                            "[{} {} fold {}] best c-index {:.4} at epoch {} (stopped {})",
                            job.head, name, job.fold, f.best_val_cindex, f.best_epoch, f.stopped_epoch
                        ),
                        Err(e) => eprintln!("[{} {} fold {}] failed: {e}", job.head, name, job.fold),
                    }
                    *results[i].lock().expect("no poisoned lock") = Some(r);
                });
            }
        });
        let results: Vec<CliResult<FoldResult>> = results
            .into_iter()
            .map(|m| m.into_inner().expect("no poisoned lock").expect("every job ran"))
            .collect();
        for &head in &spec.heads {
            let mut values = Vec::new();
            let mut failure = None;
            for (job, r) in queue.iter().zip(&results).filter(|(j, _)| j.head == head) {
                match r {
                    Ok(f) => values.push(f.best_val_cindex),
                    Err(e) => {
                        failure.get_or_insert_with(|| format!("fold {}: {e}", job.fold));
                    }
                }
                records.push(FoldRecord {
                    head,
                    extractors: name.clone(),
                    fold: job.fold,
                    result: r.as_ref().cloned().map_err(ToString::to_string),
                });
            }
            let outcome = match failure {
                Some(reason) => Outcome::Failed(reason),
                None => Outcome::Folds(values),
            };
            table.insert(
                head.display_name(),
                &name,
                &spec.dataset,
                Cell {
                    outcome,
                    seed: spec.train.seed,
                    config_hash: hash.clone(),
                },
            );
        }
    }
    write_atomic(&run_dir.join("report.csv"), render_csv(&table).as_bytes())?;
    write_atomic(&run_dir.join("report.md"), render_markdown(&table).as_bytes())?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        config_hash: hash,
        table,
        folds: records,
        manifest: cohort.manifest,
    })
}

fn write_rejections(manifest: &Manifest, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["line", "case_id", "reason"]).map_err(CliError::csv(path))?;
    for r in &manifest.rejected {
        w.write_record([r.line.to_string(), r.case_id.clone(), r.reason.clone()])
            .map_err(CliError::csv(path))?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub head: String,
    pub extractors: String,
    pub fold: usize,
    pub epoch: usize,
    pub recorded_cindex: f64,
    pub cindex: f64,
}

pub fn load_snapshot(run_dir: &Path) -> CliResult<RunSnapshot> {
    let path = run_dir.join("config.json");
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    serde_json::from_slice(&bytes).map_err(CliError::json(&path))
}

/// Reloads every best checkpoint of a finished run and scores it on its
/// validation fold.
pub fn evaluate_run(run_dir: &Path) -> CliResult<Vec<EvalRow>> {
    let snapshot = load_snapshot(run_dir)?;
    let spec = &snapshot.spec;
    let split = read_splits(&run_dir.join("splits.csv"))?;
    let cohort = prepare_cohort(spec, Some(split))?;
    let registry = ExtractorRegistry::default();
    let mut rows = Vec::new();
    for set in &spec.extractor_sets {
        let name = set_name(set);
        let bags = load_bags(&cohort, set, &registry)?;
        for &kind in &spec.heads {
            for fold in 0..spec.folds {
                let path = cell_dir(run_dir, kind, &name, fold).join("best.milc");
                if !path.is_file() {
                    continue;
                }
                let (header, head) = checkpoint::load(&path)?;
                let val = samples(&cohort, &bags, fold, true);
                rows.push(EvalRow {
                    head: kind.display_name().into(),
                    extractors: name.clone(),
                    fold,
                    epoch: header.epoch,
                    recorded_cindex: header.val_cindex,
                    cindex: evaluate(&head, &val)?,
                });
            }
        }
    }
    Ok(rows)
}
