//! The `pareto-debias` command line.
//!
//! Payload files are deterministic functions of inputs and flags; the wall
//! clock and argv go to a `<out>.meta.json` sidecar. Diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage, 2 data error, 3 invariant violation.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    generate_synthetic, queries_from_texts, run_report, DebiasMode, MetricsSpec, SynthSpec, Task,
    Workspace,
};
use crate::geometry::{build_subspace, Embedding, Modality, DEFAULT_RANK_TOLERANCE};
use crate::io::{self, Dtype};
use crate::metrics::statistical_parity;
use crate::prototypes::{build_prototypes, VariantSetFile};
use crate::solver::{oracle_check, Degeneracy, ExtremeMode, Solver, DEFAULT_EPS_DEG, MIN_ORACLE_GRID};

/// Largest closed-form/oracle disagreement `oracle check` accepts.
pub const ORACLE_AGREEMENT: f64 = 1e-9;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pareto-debias", version, about = "Pareto-optimal debiasing of vision-language embeddings")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = DebiasMode::Both)]
    mode: DebiasMode,
    /// Component norms at or below this skip debiasing.
    #[arg(long, global = true, default_value_t = DEFAULT_EPS_DEG)]
    eps_deg: f64,
    /// Relative singular-value cut-off for the attribute subspace.
    #[arg(long, global = true, default_value_t = DEFAULT_RANK_TOLERANCE)]
    rank_tol: f64,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (a directory for `synth generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group prototypes.
    #[command(subcommand)]
    Prototypes(PrototypesCmd),
    /// Attribute subspace.
    #[command(subcommand)]
    Subspace(SubspaceCmd),
    /// Debias an embedding file.
    #[command(subcommand)]
    Debias(DebiasCmd),
    /// Zero-shot classification or retrieval.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Standalone metrics.
    #[command(subcommand)]
    Metric(MetricCmd),
    /// Synthetic data with planted leakage.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Closed form against the numerical oracle.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Classification and retrieval metrics in one report.
    Report {
        #[command(flatten)]
        ws: WorkspaceArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Task::Classify, Task::Retrieve])]
        tasks: Vec<Task>,
    },
}

#[derive(Subcommand, Debug)]
enum PrototypesCmd {
    /// Spherical-mean prototypes from a variant-set JSON and text embeddings.
    Build {
        #[arg(long)]
        variants: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum SubspaceCmd {
    /// Attribute subspace spanned by prototype differences.
    Build {
        #[arg(long)]
        prototypes: PathBuf,
        /// Reference group; defaults to the first prototype.
        #[arg(long)]
        reference: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum DebiasCmd {
    /// Debias every record the mode applies to.
    Run {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        subspace: PathBuf,
        /// Per-record solver output; defaults to `<out>.results.jsonl`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Nearest class prompt for every labelled image, with EO and F1.
    Classify(WorkspaceArgs),
    /// Rank images for every query, with MaxSkew and Recall.
    Retrieve(WorkspaceArgs),
}

#[derive(Subcommand, Debug)]
enum MetricCmd {
    /// Statistical parity per prompt from `prompt_id,group,count` rows.
    Sp {
        #[arg(long)]
        counts: PathBuf,
        /// Declared groups; defaults to every group in the file.
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<String>>,
    },
}

#[derive(Subcommand, Debug)]
enum SynthCmd {
    /// Synthetic images, texts, prototypes and subspace with planted bias.
    Generate {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        n_groups: usize,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        #[arg(long, default_value_t = 500)]
        samples_per_cell: usize,
        #[arg(long, default_value_t = 0.8)]
        leakage_strength: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 1.2)]
        prompt_bias: f64,
    },
}

#[derive(Subcommand, Debug)]
enum OracleCmd {
    /// Compare the closed form against the numeric oracle on random inputs.
    Check {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = MIN_ORACLE_GRID)]
        grid: usize,
    },
}

#[derive(Args, Debug)]
struct WorkspaceArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    /// JSON object mapping class name to prompt id.
    #[arg(long)]
    class_prompts: PathBuf,
    #[arg(long)]
    subspace: PathBuf,
    /// Retrieval queries; defaults to every text that is not a class prompt.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// `query_id,relevant_id` judgments.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// MaxSkew cut-off.
    #[arg(long, default_value_t = 50)]
    m: usize,
    /// Recall cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    k: Vec<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvariantViolation(_) => EXIT_INVARIANT,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&cli, &argv)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    tool: &'a str,
    version: &'a str,
    created_unix_ms: u128,
    argv: Vec<String>,
}

fn write_sidecar(out: &Path, argv: &[OsString]) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    let meta = Sidecar {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis()),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    io::write_json(Path::new(&name), &meta)
}

fn solver(cli: &Cli) -> Result<Solver> {
    Solver::new(cli.eps_deg)
}

fn execute(cli: &Cli, argv: &[OsString]) -> Result<i32> {
    match &cli.command {
        Command::Prototypes(PrototypesCmd::Build {
            variants,
            embeddings,
        }) => {
            let out = require_out(cli)?;
            let file: VariantSetFile = io::read_json(variants)?;
            let embs = io::load_embeddings(embeddings)?;
            let protos = build_prototypes(&file.resolve(&embs)?)?;
            io::save_prototypes(out, &protos)?;
            write_sidecar(out, argv)?;
            eprintln!("wrote {} prototypes for `{}`", protos.len(), file.attribute);
        }
        Command::Subspace(SubspaceCmd::Build {
            prototypes,
            reference,
        }) => {
            let out = require_out(cli)?;
            let protos = io::load_prototypes(prototypes)?;
            let reference = match reference {
                Some(r) => r.clone(),
                None => protos
                    .first()
                    .map(|p| p.group.clone())
                    .ok_or_else(|| Error::InvalidArgument("no prototypes".into()))?,
            };
            let s = build_subspace(&protos, &reference, cli.rank_tol)?;
            io::save_subspace(out, &s)?;
            write_sidecar(out, argv)?;
            eprintln!("subspace rank {} in d = {}", s.rank(), s.dim());
        }
        Command::Debias(DebiasCmd::Run {
            embeddings,
            subspace,
            results,
            dtype,
        }) => {
            let out = require_out(cli)?;
            let results = results.clone().unwrap_or_else(|| {
                let mut name = out.as_os_str().to_owned();
                name.push(".results.jsonl");
                PathBuf::from(name)
            });
            debias_run(cli, embeddings, subspace, out, &results, (*dtype).into())?;
            write_sidecar(out, argv)?;
        }
        Command::Eval(EvalCmd::Classify(ws)) => {
            report(cli, ws, vec![Task::Classify], argv)?;
        }
        Command::Eval(EvalCmd::Retrieve(ws)) => {
            report(cli, ws, vec![Task::Retrieve], argv)?;
        }
        Command::Report { ws, tasks } => {
            report(cli, ws, tasks.clone(), argv)?;
        }
        Command::Metric(MetricCmd::Sp { counts, groups }) => {
            let rows = io::load_group_counts(counts)?;
            let groups: BTreeSet<String> = match groups {
                Some(g) => g.iter().cloned().collect(),
                None => rows.iter().flat_map(|r| r.counts.keys().cloned()).collect(),
            };
            let mut values = BTreeMap::new();
            for row in &rows {
                let sp = statistical_parity(row, &groups)?;
                println!("{}\t{sp:.5}", row.prompt_id);
                values.insert(row.prompt_id.clone(), sp);
            }
            if let Some(out) = &cli.out {
                io::write_json(out, &values)?;
                write_sidecar(out, argv)?;
            }
        }
        Command::Synth(SynthCmd::Generate {
            d,
            n_groups,
            n_classes,
            samples_per_cell,
            leakage_strength,
            noise_sigma,
            prompt_bias,
        }) => {
            let out = require_out(cli)?;
            let spec = SynthSpec {
                d: *d,
                n_groups: *n_groups,
                n_classes: *n_classes,
                samples_per_cell: *samples_per_cell,
                leakage_strength: *leakage_strength,
                noise_sigma: *noise_sigma,
                seed: cli.seed,
                prompt_bias: *prompt_bias,
            };
            synth_generate(cli, &spec, out)?;
            write_sidecar(out, argv)?;
        }
        Command::Oracle(OracleCmd::Check { trials, grid }) => {
            let r = oracle_check(*trials, cli.seed, *grid)?;
            println!("max |delta alpha| = {:e}", r.max_alpha_deviation);
            println!("max |L~ - V~| = {:e}", r.max_equalization_gap);
            if let Some(out) = &cli.out {
                io::write_json(out, &r)?;
                write_sidecar(out, argv)?;
            }
            let worst = r.max_alpha_deviation.max(r.max_equalization_gap);
            if worst.is_nan() || worst > ORACLE_AGREEMENT {
                return Err(Error::InvariantViolation(format!(
                    "closed form and oracle disagree by {worst:e} > {ORACLE_AGREEMENT:e}"
                )));
            }
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DebiasRecord<'a> {
    id: &'a str,
    modality: Modality,
    applied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_parallel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_orthogonal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    leakage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    self_utility_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    degenerate: Option<Degeneracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_bound_term: Option<f64>,
}

fn debias_run(
    cli: &Cli,
    embeddings: &Path,
    subspace: &Path,
    out: &Path,
    results: &Path,
    dtype: Dtype,
) -> Result<()> {
    use rayon::prelude::*;

    let embs = io::load_embeddings(embeddings)?;
    let s = io::load_subspace(subspace)?;
    let solver = solver(cli)?;
    let mode = cli.mode;
    let outcomes: Vec<_> = embs
        .par_iter()
        .map(|e| {
            if !mode.touches(e.modality) {
                return Ok(None);
            }
            let r = if mode == DebiasMode::FullProjectionBoth {
                solver.debias_extreme(&e.vector, &s, ExtremeMode::FullProjection)?
            } else {
                solver.debias(&e.vector, &s)?
            };
            Ok(Some(r))
        })
        .collect::<Result<_>>()?;

    let mut debiased = Vec::with_capacity(embs.len());
    let mut records = Vec::with_capacity(embs.len());
    for (e, r) in embs.iter().zip(&outcomes) {
        let vector = r.as_ref().map_or_else(|| e.vector.clone(), |r| r.u_star.clone());
        debiased.push(Embedding {
            vector,
            ..e.clone()
        });
        records.push(DebiasRecord {
            id: &e.id,
            modality: e.modality,
            applied: r.is_some(),
            alpha_star: r.as_ref().map(|r| r.alpha_star),
            norm_parallel: r.as_ref().map(|r| r.norm_parallel),
            norm_orthogonal: r.as_ref().map(|r| r.norm_orthogonal),
            leakage: r.as_ref().map(|r| r.leakage),
            self_utility_loss: r.as_ref().map(|r| r.self_utility_loss),
            degenerate: r.as_ref().map(|r| r.degenerate),
            cross_bound_term: r.as_ref().map(|r| r.cross_bound_term),
        });
    }
    io::save_embeddings(out, &debiased, dtype)?;
    io::write_jsonl(results, &records)?;
    let applied = records.iter().filter(|r| r.applied).count();
    eprintln!("debiased {applied} of {} records", records.len());
    Ok(())
}

fn report(cli: &Cli, args: &WorkspaceArgs, tasks: Vec<Task>, argv: &[OsString]) -> Result<()> {
    let out = require_out(cli)?;
    let images = io::load_embeddings(&args.images)?;
    let texts = io::load_embeddings(&args.texts)?;
    let class_prompts: BTreeMap<String, String> = io::read_json(&args.class_prompts)?;
    let subspace = io::load_subspace(&args.subspace)?;
    let qrels = match &args.qrels {
        Some(p) => io::load_qrels(p)?,
        None => BTreeMap::new(),
    };
    let queries = match &args.queries {
        Some(p) => queries_from_texts(&io::load_embeddings(p)?, &BTreeMap::new(), &qrels),
        None => queries_from_texts(&texts, &class_prompts, &qrels),
    };
    let ws = Workspace::new(images, texts, class_prompts, subspace, cli.mode, solver(cli)?)?;
    let spec = MetricsSpec {
        tasks,
        m: args.m,
        ks: args.k.clone(),
    };
    let report = run_report(&ws, &queries, &spec)?;
    io::write_json(out, &report)?;
    write_sidecar(out, argv)?;
    Ok(())
}

fn synth_generate(cli: &Cli, spec: &SynthSpec, dir: &Path) -> Result<()> {
    let data = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = data.groups();
    let subspace = build_subspace(&data.prototypes, &groups[0], cli.rank_tol)?;
    io::write_json(&dir.join("spec.json"), spec)?;
    io::save_embeddings(&dir.join("images.jsonl"), &data.images, Dtype::F64)?;
    io::save_embeddings(&dir.join("texts.jsonl"), &data.texts, Dtype::F64)?;
    io::save_prototypes(&dir.join("prototypes.jsonl"), &data.prototypes)?;
    io::save_subspace(&dir.join("subspace.json"), &subspace)?;
    io::write_json(&dir.join("class_prompts.json"), &data.class_prompts)?;
    io::save_qrels(&dir.join("qrels.csv"), &data.qrels)?;
    eprintln!(
        "wrote {} images and {} texts to {}",
        data.images.len(),
        data.texts.len(),
        dir.display()
    );
    Ok(())
}
