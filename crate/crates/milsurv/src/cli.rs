//! Command-line surface. [`dispatch`] returns the process exit code: 0 on
//! success, 1 when input is rejected, 2 when a run fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use milsurv_core::cohort::split_kfold;
use milsurv_core::features::{concat_ensemble, ExtractorRegistry};
use milsurv_core::gradcheck::{head_suite, primitive_suite, HEAD_TOLERANCE, PRIMITIVE_TOLERANCE};
use milsurv_core::heads::{HeadConfig, HeadKind};
use milsurv_core::report::ReportTable;
use milsurv_core::train::{Preset, TrainConfig};
use milsurv_core::Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::report::{parse_csv, render, Format};
use crate::runner::{evaluate_run, run_cv, RunSpec, SPLIT_STREAM};
use crate::splits::write_splits;
use crate::store::{self, load_manifest, parse_extractor_sets, read_features, write_atomic, write_features, FEATURE_EXTENSION};
use crate::synth::{synth_cohort, SynthConfig};

/// Default parent directory for run outputs when `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "MILSURV_OUT";

#[derive(Debug, Parser)]
#[command(name = "milsurv", version, about = "Survival MIL on whole-slide feature bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and every feature file it references.
    Ingest(IngestArgs),
    /// Generate a synthetic cohort with a known latent risk.
    Synth(SynthArgs),
    /// Concatenate per-extractor feature files into ensemble files.
    Concat(ConcatArgs),
    /// Write a stratified K-fold assignment.
    Split(SplitArgs),
    /// Cross-validate heads over extractor sets.
    Train(TrainArgs),
    /// Re-score the best checkpoints of a finished run.
    Eval(EvalArgs),
    /// Merge and render report tables.
    Report(ReportArgs),
    /// Print the trainable parameter count of a head.
    Paramcount(ParamcountArgs),
    /// Check tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Root that feature paths in the manifest are relative to.
    #[arg(long)]
    pub features: PathBuf,
    /// Extractor sets, comma separated; ensemble parts joined with '+'.
    #[arg(long)]
    pub extractors: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    /// Feature width for extractors without a registered dimension.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 0.45)]
    pub censor: f64,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extractor ids to emit, comma separated.
    #[arg(long, default_value = "synthetic")]
    pub extractors: String,
    #[arg(long, default_value_t = 20)]
    pub min_patches: usize,
    #[arg(long, default_value_t = 200)]
    pub max_patches: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConcatArgs {
    /// Extractor ids in concatenation order, comma separated.
    #[arg(long)]
    pub parts: String,
    /// Directory holding one sub-directory per extractor.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Extractor sets, comma separated; ensemble parts joined with '+'.
    #[arg(long)]
    pub extractors: String,
    /// Heads, comma separated: mean, max, abmil, transmil.
    #[arg(long, default_value = "mean")]
    pub head: String,
    /// Hyperparameter preset: blca, luad or brca.
    #[arg(long, default_value = "blca")]
    pub preset: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Number of epochs; the earliest stop epoch scales with it unless set.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub earliest_stop: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 512)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub attn_dim: usize,
    /// Report column label; defaults to the preset name.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Fixed fold assignment CSV (case_id,fold).
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Run directory; defaults to a directory under $MILSURV_OUT (or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or report.csv files to merge.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamcountArgs {
    #[arg(long)]
    pub head: HeadKind,
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    #[arg(long, default_value_t = 512)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub attn_dim: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn announce<T: Serialize>(command: &str, seed: Option<u64>, config: &T) {
    let line = json!({ "command": command, "seed": seed, "config": config });
    eprintln!("resolved {line}");
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn parse_heads(spec: &str) -> CliResult<Vec<HeadKind>> {
    let heads = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<HeadKind>())
        .collect::<Result<Vec<_>, _>>()?;
    if heads.is_empty() {
        return Err(CliError::Usage("no head given".into()));
    }
    Ok(heads)
}

pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = TrainConfig::preset(preset);
    if let Some(e) = args.epochs {
        if e == 0 {
            return Err(milsurv_core::Error::Config("epochs must be at least 1".into()).into());
        }
        cfg = cfg.scaled_to(e);
    }
    if let Some(v) = args.earliest_stop {
        cfg.earliest_stop_epoch = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.accumulation {
        cfg.grad_accum_steps = v;
    }
    cfg.seed = args.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn ingest(args: &IngestArgs) -> CliResult<()> {
    let sets = parse_extractor_sets(&args.extractors)?;
    let mut required: Vec<String> = sets.iter().flatten().cloned().collect();
    required.sort();
    required.dedup();
    announce("ingest", None, &json!({ "manifest": args.manifest, "features": args.features, "extractors": sets }));
    let manifest = load_manifest(&args.manifest, &args.features, &required)?;
    let registry = ExtractorRegistry::default();
    let mut per_set = Vec::new();
    for set in &sets {
        let mut dim = None;
        for row in &manifest.rows {
            let fm = store::load_bag(row, set, &registry)?;
            if *dim.get_or_insert(fm.d()) != fm.d() {
                return Err(milsurv_core::Error::Ingestion(format!(
                    "case '{}': width {} differs from {} in set {}",
                    row.case_id,
                    fm.d(),
                    dim.unwrap_or(0),
                    store::set_name(set)
                ))
                .into());
            }
        }
        per_set.push(json!({ "extractors": store::set_name(set), "d": dim }));
    }
    let censored = manifest.rows.iter().filter(|r| r.censored).count();
    print_json(&json!({
        "rows": manifest.rows.len(),
        "censored": censored,
        "rejected": manifest.rejected,
        "sets": per_set,
    }));
    Ok(())
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let config = SynthConfig {
        n: args.n,
        d: args.d,
        censor_fraction: args.censor,
        signal_strength: args.signal,
        seed: args.seed,
        extractors: args.extractors.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        min_patches: args.min_patches,
        max_patches: args.max_patches,
    };
    announce("synth", Some(args.seed), &config);
    let summary = synth_cohort(&config, &args.out, &ExtractorRegistry::default())?;
    print_json(&summary);
    Ok(())
}

fn concat(args: &ConcatArgs) -> CliResult<()> {
    let parts: Vec<String> = args.parts.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if parts.is_empty() {
        return Err(CliError::Usage("no parts given".into()));
    }
    announce("concat", None, &json!({ "parts": parts, "in": args.input, "out": args.out }));
    let registry = ExtractorRegistry::default();
    let first = args.input.join(&parts[0]);
    let mut names: Vec<String> = fs::read_dir(&first)
        .map_err(CliError::io(&first))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| Path::new(n).extension().is_some_and(|x| x == FEATURE_EXTENSION))
        .collect();
    names.sort();
    let id = store::set_name(&parts);
    let (mut written, mut skipped, mut dim) = (0usize, Vec::new(), None);
    for name in &names {
        let paths: Vec<PathBuf> = parts.iter().map(|p| args.input.join(p).join(name)).collect();
        if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
            skipped.push(json!({ "file": name, "reason": format!("missing {}", missing.display()) }));
            continue;
        }
        let fms = paths.iter().map(|p| read_features(p, &registry)).collect::<CliResult<Vec<_>>>()?;
        let ens = concat_ensemble(&fms)?;
        dim = Some(ens.dim());
        let fm = ens.into_feature_matrix();
        registry.validate(&fm)?;
        write_features(&fm, &args.out.join(&id).join(name))?;
        written += 1;
    }
    print_json(&json!({ "extractor_id": id, "d": dim, "written": written, "skipped": skipped }));
    Ok(())
}

fn split(args: &SplitArgs) -> CliResult<()> {
    announce("split", Some(args.seed), &json!({ "manifest": args.manifest, "folds": args.folds }));
    let root = args.manifest.parent().unwrap_or(Path::new("."));
    let manifest = load_manifest(&args.manifest, root, &[])?;
    let records: Vec<_> = manifest.rows.iter().map(|r| r.record()).collect();
    let split = split_kfold(&records, args.folds, &mut Rng::new(args.seed, SPLIT_STREAM))?;
    write_splits(&split, &args.out)?;
    print_json(&json!({ "folds": split.k, "sizes": split.fold_sizes(), "out": args.out }));
    Ok(())
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let train = train_config(args)?;
    let mut spec = RunSpec::new(&args.manifest, &args.features, train);
    spec.extractor_sets = parse_extractor_sets(&args.extractors)?;
    spec.heads = parse_heads(&args.head)?;
    spec.hidden_dim = args.hidden_dim;
    spec.attn_dim = args.attn_dim;
    spec.folds = args.folds;
    spec.dataset = args.dataset.clone().unwrap_or_else(|| args.preset.to_ascii_uppercase());
    spec.splits = args.splits.clone();
    spec.validate()?;
    let hash = crate::runner::config_hash(&spec)?;
    let run_dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_output_root().join(format!("{}-{hash}", spec.dataset.to_ascii_lowercase())));
    announce("train", Some(spec.train.seed), &json!({ "spec": spec, "config_hash": hash, "run_dir": run_dir, "jobs": args.jobs }));
    let outcome = run_cv(&spec, &run_dir, args.jobs)?;
    print!("{}", render(&outcome.table, args.format));
    let failed = outcome.folds.iter().filter(|f| f.result.is_err()).count();
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} fold(s) failed; see {}", run_dir.join("report.md").display())));
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let snapshot = crate::runner::load_snapshot(&args.run)?;
    announce("eval", Some(snapshot.seed), &snapshot);
    let rows = evaluate_run(&args.run)?;
    match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r).map_err(CliError::csv("<stdout>"))?;
            }
            w.flush().map_err(CliError::io("<stdout>"))?;
        }
        Format::Markdown => {
            println!("| Model | Extractors | Fold | Epoch | Recorded | Re-scored |\n|---|---|---|---|---|---|");
            for r in &rows {
                println!(
                    "| {} | {} | {} | {} | {:.4} | {:.4} |",
                    r.head, r.extractors, r.fold, r.epoch, r.recorded_cindex, r.cindex
                );
            }
        }
    }
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    announce("report", None, &json!({ "runs": args.runs, "format": format!("{:?}", args.format) }));
    let mut table = ReportTable::new();
    for r in &args.runs {
        let path = if r.is_dir() { r.join("report.csv") } else { r.clone() };
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        table.merge(&parse_csv(&text)?);
    }
    let text = render(&table, args.format);
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn paramcount(args: &ParamcountArgs) -> CliResult<()> {
    let mut c = HeadConfig::new(args.head, args.dim);
    c.hidden_dim = args.hidden_dim;
    c.attn_dim = args.attn_dim;
    c.validate()?;
    announce("paramcount", None, &c);
    println!("{}", c.parameter_count());
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    announce(
        "gradcheck",
        Some(args.seed),
        &json!({ "primitive_tolerance": PRIMITIVE_TOLERANCE, "head_tolerance": HEAD_TOLERANCE }),
    );
    let mut failures = Vec::new();
    for (group, reports) in [("primitive", primitive_suite(args.seed)?), ("head", head_suite(args.seed)?)] {
        for r in reports {
            let ok = r.report.passed();
            println!(
                "{group:<9} {:<24} {:.3e} < {:.0e} {}",
                r.name,
                r.report.max_error(),
                r.report.tolerance,
                if ok { "ok" } else { "FAIL" }
            );
            if !ok {
                failures.push(r.name);
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failures.join(", "))))
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Concat(a) => concat(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Paramcount(a) => paramcount(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `argv` and runs the command, printing errors as one JSON line on
/// stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": msg.trim(), "exit_code": 1 }));
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
