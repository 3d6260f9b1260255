//! `crica` command-line tool: dataset generation, training, descriptor
//! extraction, PCA, Recall@N evaluation and gradient checks.

mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crica::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use crica::dataset::Dataset;
use crica::io::{self, DescriptorSet, Manifest, Role};
use crica::model::CricaModel;
use crica::pca::PcaModel;
use crica::retrieval::{evaluate, DescriptorIndex, GtRule};
use crica::synth::{SynthConfig, SynthDataset};
use crica::train::{extract, Trainer};
use serde::Serialize;

use crate::config::{seed_override, RunConfig, CONFIG_VERSION};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const METRICS_FILE: &str = "metrics.log";
const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Parser)]
#[command(name = "crica", version, about = "Cross-image place recognition descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic place dataset.
    GenData(GenDataArgs),
    /// Train adapters, pooling and encoder on a dataset directory.
    Train(TrainArgs),
    /// Write one descriptor per manifest image.
    Extract(ExtractArgs),
    /// Fit a PCA reduction, or apply a fitted one with --model.
    Pca(PcaArgs),
    /// Recall@N of query descriptors against a database.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 50)]
    places: usize,
    #[arg(long, default_value_t = 4)]
    per_place: usize,
    /// Defaults to $CRICA_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = SynthConfig::default().aliasing)]
    aliasing: f64,
    #[arg(long, default_value_t = SynthConfig::default().max_magnitude)]
    max_magnitude: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bypass the cross-image encoder.
    #[arg(long)]
    no_crica: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint; its optimizer state is read from the
    /// same directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image paths in the manifest are relative to its directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Only images with this role in the split file next to the manifest.
    #[arg(long, value_parser = parse_role)]
    role: Option<Role>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    descriptors: PathBuf,
    /// Output dimension when fitting.
    #[arg(long, required_unless_present = "model")]
    dim: Option<usize>,
    /// Apply this fitted model instead of fitting.
    #[arg(long, conflicts_with = "dim")]
    model: Option<PathBuf>,
    #[arg(long)]
    whiten: bool,
    /// Fitted model, or reduced descriptors with --model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Geotags and places for both descriptor files.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "euclidean:25")]
    rule: GtRule,
    #[arg(long = "ns", alias = "Ns", value_delimiter = ',', default_value = "1,5,10")]
    ns: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all`, a module name or a single case name.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, hide = true)]
    inject_sign_bug: bool,
}

/// Bad arguments or configuration: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// A check ran and failed: exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CheckFailed(String);

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    match s {
        "db" => Ok(Role::Db),
        "query" => Ok(Role::Query),
        _ => Err(format!("expected `db` or `query`, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Pca(a) => pca(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(crica::Error::Config(_)) = cause.downcast_ref::<crica::Error>() {
            return 1;
        }
    }
    2
}

fn write_config<T: Serialize>(path: &Path, command: &str, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        version: u32,
        command: &'a str,
        #[serde(flatten)]
        value: &'a T,
    }
    let text = toml::to_string(&Resolved {
        version: CONFIG_VERSION,
        command,
        value,
    })?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<file>.toml` beside an output file.
fn config_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".toml");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => seed_override(0)?,
    };
    let cfg = SynthConfig {
        places: a.places,
        per_place: a.per_place,
        image_size: a.image_size,
        seed,
        max_magnitude: a.max_magnitude,
        aliasing: a.aliasing,
    };
    let data = SynthDataset::generate(&cfg)?;
    data.write(&a.out)?;
    write_config(&a.out.join("gen-data.toml"), "gen-data", &cfg)?;
    println!("wrote {} images of {} places to {}", data.images.len(), cfg.places, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = seed_override(cfg.seed)?;
    if a.no_crica {
        cfg.model.use_crica = false;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }

    let (model, optimizer, start) = match &a.resume {
        Some(ckpt) => {
            let (model, epoch) = load_checkpoint(ckpt)?;
            if a.no_crica && model.config.use_crica {
                bail!(UsageError("--no-crica conflicts with a checkpoint that uses the encoder".into()));
            }
            cfg.model = model.config.clone();
            let opt_path = ckpt.with_file_name(OPTIMIZER_FILE);
            let opt = load_optimizer(&opt_path, &model, cfg.train.adam)?;
            (model, Some(opt), epoch)
        }
        None => (CricaModel::new(cfg.model.clone(), cfg.seed)?, None, 0),
    };
    let cfg = cfg.resolve()?;

    let data = Dataset::load(&a.data)?;
    let train_set = data.train_set();
    let val = data.retrieval_set();

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(RUN_CONFIG_FILE), cfg.to_toml())?;
    let mut trainer = match optimizer {
        Some(opt) => Trainer::resume(model, opt, cfg.train.clone(), start)?,
        None => Trainer::new(model, cfg.train.clone())?,
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(start > 0)
        .write(true)
        .truncate(start == 0)
        .open(a.out.join(METRICS_FILE))?;
    eprintln!(
        "training {} images of {} places, {} trainable parameters",
        train_set.images.len(),
        train_set.groups().len(),
        trainer.model.params.decls().iter().filter(|d| d.group.trainable()).map(|d| d.numel()).sum::<usize>()
    );
    let out = a.out.clone();
    trainer.fit(&train_set, Some(&val), |t, rec| {
        writeln!(log, "{rec}")?;
        eprintln!("{rec}");
        save_checkpoint(&out.join(CHECKPOINT_FILE), &t.model, t.epoch)?;
        save_optimizer(&out.join(OPTIMIZER_FILE), &t.optimizer)?;
        Ok(())
    })?;
    if trainer.epoch == start {
        save_checkpoint(&out.join(CHECKPOINT_FILE), &trainer.model, trainer.epoch)?;
        save_optimizer(&out.join(OPTIMIZER_FILE), &trainer.optimizer)?;
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    if a.batch == 0 {
        bail!(UsageError("--batch must be positive".into()));
    }
    if a.batch == 1 {
        eprintln!("warning: --batch 1 gives the cross-image encoder no other images to attend to");
    }
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    let keep: Option<Vec<String>> = match a.role {
        Some(role) => {
            let split = root.join(crica::synth::SPLIT_FILE);
            let text = fs::read_to_string(&split).with_context(|| format!("reading {}", split.display()))?;
            Some(io::parse_split(&text)?.into_iter().filter(|e| e.1 == role).map(|e| e.0).collect())
        }
        None => None,
    };
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| keep.as_ref().is_none_or(|k| k.contains(&r.id())))
        .collect();
    let images = records
        .iter()
        .map(|r| io::read_image(&root.join(&r.path)))
        .collect::<crica::Result<Vec<_>>>()?;
    let vectors = extract(&model, &images, a.batch)?;
    let mut set = DescriptorSet::new(model.config.descriptor_dim());
    for (r, v) in records.iter().zip(&vectors) {
        set.push(r.id(), v)?;
    }
    ensure_parent(&a.out)?;
    set.save(&a.out)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        manifest: &'a Path,
        role: Option<&'static str>,
        batch: usize,
        count: usize,
        dim: usize,
    }
    write_config(
        &config_beside(&a.out),
        "extract",
        &Resolved {
            checkpoint: &a.checkpoint,
            manifest: &a.manifest,
            role: a.role.map(Role::as_str),
            batch: a.batch,
            count: set.len(),
            dim: set.dim,
        },
    )?;
    println!("wrote {} descriptors of dim {} to {}", set.len(), set.dim, a.out.display());
    Ok(())
}

fn pca(a: PcaArgs) -> Result<()> {
    let descs = DescriptorSet::load(&a.descriptors)?;
    ensure_parent(&a.out)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        descriptors: &'a Path,
        model: Option<&'a Path>,
        dim: usize,
        whiten: bool,
    }
    let dim = match (&a.model, a.dim) {
        (Some(model_path), _) => {
            let model = PcaModel::load(model_path)?;
            model.transform_set(&descs, a.whiten)?.save(&a.out)?;
            println!("reduced {} descriptors {} → {}", descs.len(), descs.dim, model.out_dim);
            model.out_dim
        }
        (None, Some(dim)) => {
            if dim == 0 || dim > descs.dim {
                bail!(UsageError(format!("--dim must be in 1..={}, got {dim}", descs.dim)));
            }
            let model = PcaModel::fit_set(&descs, dim)?;
            model.save(&a.out)?;
            if model.is_rank_deficient() {
                eprintln!("warning: data has rank {} < {dim}; basis was completed arbitrarily", model.rank);
            }
            println!("fitted PCA {} → {dim} on {} descriptors", descs.dim, descs.len());
            dim
        }
        (None, None) => bail!(UsageError("either --dim or --model is required".into())),
    };
    write_config(
        &config_beside(&a.out),
        "pca",
        &Resolved {
            descriptors: &a.descriptors,
            model: a.model.as_deref(),
            dim,
            whiten: a.whiten,
        },
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.ns.is_empty() || a.ns.contains(&0) {
        bail!(UsageError("--ns needs positive cutoffs".into()));
    }
    let manifest = Manifest::load(&a.manifest)?;
    let db = DescriptorSet::load(&a.db)?;
    let queries = DescriptorSet::load(&a.queries)?;
    let index = DescriptorIndex::build(&db, &manifest)?;
    let recalls = evaluate(&index, &queries, &manifest, a.rule, &a.ns)?;
    println!("rule {}  db {}  queries {}", a.rule, db.len(), queries.len());
    for (n, r) in a.ns.iter().zip(&recalls) {
        println!("R@{n:<4} {r:6.2}");
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let known = crica::gradsuite::modules();
    let names: Vec<&str> = crica::gradsuite::cases().iter().map(|c| c.name).collect();
    if a.module != "all" && !known.contains(&a.module.as_str()) && !names.contains(&a.module.as_str()) {
        bail!(UsageError(format!(
            "unknown module {:?}; expected all, one of {} or a case name",
            a.module,
            known.join(", ")
        )));
    }
    let results = crica::gradsuite::run_suite(&a.module, a.inject_sign_bug)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<20} {:<10} {:.3e}  {}",
            r.name,
            r.module,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!(CheckFailed(format!(
            "{failed} of {} gradient checks at or above {:e}",
            results.len(),
            crica::gradsuite::TOLERANCE
        )));
    }
    println!("{} checks passed", results.len());
    Ok(())
}
