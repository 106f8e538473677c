//! Command-line driver: each subcommand runs one pipeline stage over a run
//! directory, so a full experiment is a sequence of invocations that can be
//! resumed, parallelised per artifact, or re-run selectively.

use attrinject_core::attribution::Method;
use attrinject_core::error::{Error, Result};
use attrinject_core::pipeline::{
    stage_evaluate, stage_extract, stage_report, stage_sanity, stage_train_attributor,
    stage_train_student, stage_train_teacher, ExperimentConfig, HeadMaskKind, MapSource, RunDir,
    StudentSpec, TargetOrigin,
};
use attrinject_core::tape::ComposeOp;
use attrinject_core::transformer::Site;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Environment variable consulted for the output root when `--out` is absent.
const OUT_ENV: &str = "ATTRINJECT_OUT";
const DEFAULT_OUT: &str = "attrinject-run";

#[derive(Parser)]
#[command(
    name = "attrinject",
    version,
    about = "Train a toy translation teacher, extract token attribution maps, \
             inject them into students, and measure what they are worth."
)]
struct Cli {
    /// Experiment configuration file.  Falls back to <out>/experiment.json,
    /// then to the built-in desk-scale defaults.
    #[arg(long, global = true)]
    experiment: Option<PathBuf>,

    /// Output root directory.  Falls back to $ATTRINJECT_OUT, then ./attrinject-run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress per-epoch progress lines (stderr).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and train the teacher model.
    TrainTeacher,
    /// Extract one attribution file per configured method from the teacher.
    Extract,
    /// Train a student with injected maps (or the whole configured grid).
    TrainStudent {
        /// Map source: none, random, diagonal, gold-alignment, or a method
        /// name such as attention or integrated_gradients.
        #[arg(long, default_value = "none")]
        maps: String,
        /// Which targets the maps explain: gold or teacher-generated.
        /// Defaults to the experiment's setting.
        #[arg(long)]
        origin: Option<String>,
        /// Composition operator: add, multiply, average or replace.
        #[arg(long, default_value = "multiply")]
        op: String,
        /// Injection site: encoder-self or cross.
        #[arg(long, default_value = "encoder-self")]
        site: String,
        /// Head mask: all or alternating.
        #[arg(long, default_value = "all")]
        mask: String,
        /// Training seed (defaults to the experiment seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Ignore the flags above and train the baseline plus every
        /// method x operator x site x mask cell of the experiment grid.
        #[arg(long)]
        grid: bool,
    },
    /// Re-evaluate an already-trained student from persisted artifacts.
    Evaluate {
        #[arg(long, default_value = "none")]
        maps: String,
        #[arg(long)]
        origin: Option<String>,
        #[arg(long, default_value = "multiply")]
        op: String,
        #[arg(long, default_value = "encoder-self")]
        site: String,
        #[arg(long, default_value = "all")]
        mask: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the map-reconstruction network on extracted attribution files.
    TrainAttributor {
        /// Method whose maps to learn; omitted = every configured method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        origin: Option<String>,
    },
    /// Train the paired baseline plus random and diagonal control students.
    Sanity {
        #[arg(long, default_value = "multiply")]
        op: String,
        #[arg(long, default_value = "encoder-self")]
        site: String,
        #[arg(long, default_value = "all")]
        mask: String,
    },
    /// Reduce every recorded artifact into tables, correlations and
    /// concentration summaries.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let run_dir = RunDir::new(&out);
    let (cfg, cfg_source) = resolve_config(&cli, &run_dir)?;
    eprintln!("run directory {} — configuration from {cfg_source}", out.display());
    let quiet = cli.quiet;
    let log = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };

    match cli.command {
        Command::TrainTeacher => {
            let summary = stage_train_teacher(&cfg, &run_dir, log)?;
            emit(&summary)?;
        }
        Command::Extract => {
            let summary = stage_extract(&cfg, &run_dir, log)?;
            emit(&summary)?;
        }
        Command::TrainStudent {
            maps,
            origin,
            op,
            site,
            mask,
            seed,
            grid,
        } => {
            if grid {
                let mut records = Vec::new();
                records.push(stage_train_student(
                    &cfg,
                    &run_dir,
                    &StudentSpec::baseline(cfg.seed),
                    log,
                )?);
                for &method in &cfg.methods {
                    for &op in &cfg.operators {
                        for &site in &cfg.sites {
                            for &mask in &cfg.head_masks {
                                let spec = StudentSpec {
                                    source: MapSource::File {
                                        origin: cfg.target_origin,
                                        method,
                                    },
                                    op,
                                    site,
                                    mask,
                                    seed: cfg.seed,
                                };
                                records.push(stage_train_student(&cfg, &run_dir, &spec, log)?);
                            }
                        }
                    }
                }
                emit(&records)?;
            } else {
                let spec = build_spec(&cfg, &maps, origin.as_deref(), &op, &site, &mask, seed)?;
                let record = stage_train_student(&cfg, &run_dir, &spec, log)?;
                emit(&record)?;
            }
        }
        Command::Evaluate {
            maps,
            origin,
            op,
            site,
            mask,
            seed,
        } => {
            let spec = build_spec(&cfg, &maps, origin.as_deref(), &op, &site, &mask, seed)?;
            let record = stage_evaluate(&cfg, &run_dir, &spec)?;
            emit(&record)?;
        }
        Command::TrainAttributor { method, origin } => {
            let origin = parse_origin(origin.as_deref(), cfg.target_origin)?;
            let methods: Vec<Method> = match method {
                Some(name) => vec![Method::from_name(&normalize(&name))?],
                None => cfg.methods.clone(),
            };
            let mut summaries = Vec::new();
            for method in methods {
                summaries.push(stage_train_attributor(&cfg, &run_dir, origin, method, log)?);
            }
            emit(&summaries)?;
        }
        Command::Sanity { op, site, mask } => {
            let summary = stage_sanity(
                &cfg,
                &run_dir,
                ComposeOp::from_name(&normalize(&op))?,
                Site::from_name(&normalize(&site))?,
                HeadMaskKind::from_name(&normalize(&mask))?,
                log,
            )?;
            emit(&summary)?;
        }
        Command::Report => {
            stage_report(&cfg, &run_dir)?;
            let text = std::fs::read_to_string(run_dir.report_text())
                .map_err(|e| Error::io(run_dir.report_text().display().to_string(), e))?;
            print!("{text}");
            eprintln!(
                "written: {} and {}",
                run_dir.report_text().display(),
                run_dir.report_json().display()
            );
        }
    }
    Ok(())
}

/// Flag values accept hyphens where names use underscores.
fn normalize(s: &str) -> String {
    s.replace('-', "_")
}

fn resolve_config(cli: &Cli, run: &RunDir) -> Result<(ExperimentConfig, String)> {
    if let Some(path) = &cli.experiment {
        return Ok((ExperimentConfig::load(path)?, path.display().to_string()));
    }
    let stored = run.config();
    if stored.exists() {
        return Ok((ExperimentConfig::load(&stored)?, stored.display().to_string()));
    }
    Ok((ExperimentConfig::desk(), "built-in desk defaults".to_string()))
}

fn parse_origin(flag: Option<&str>, default: TargetOrigin) -> Result<TargetOrigin> {
    match flag {
        Some(s) => TargetOrigin::from_name(&normalize(s)),
        None => Ok(default),
    }
}

fn build_spec(
    cfg: &ExperimentConfig,
    maps: &str,
    origin: Option<&str>,
    op: &str,
    site: &str,
    mask: &str,
    seed: Option<u64>,
) -> Result<StudentSpec> {
    let origin = parse_origin(origin, cfg.target_origin)?;
    let source = match normalize(maps).as_str() {
        "none" | "baseline" => MapSource::None,
        "random" => MapSource::Random,
        "diagonal" => MapSource::Diagonal,
        "gold_alignment" => MapSource::GoldAlignment,
        name => MapSource::File {
            origin,
            method: Method::from_name(name)?,
        },
    };
    Ok(StudentSpec {
        source,
        op: ComposeOp::from_name(&normalize(op))?,
        site: Site::from_name(&normalize(site))?,
        mask: HeadMaskKind::from_name(&normalize(mask))?,
        seed: seed.unwrap_or(cfg.seed),
    })
}

fn emit<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
