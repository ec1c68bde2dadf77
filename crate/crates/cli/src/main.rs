//! `certood` command-line front end.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use certood::attacks::{self, AttackConfig, AttackResult, InitScheme};
use certood::checkpoint::{load_checkpoint, load_points, save_points, Checkpoint};
use certood::data::{
    encode_rgb_blob, load_source, smooth_noise, source_paths_exist, uniform_noise, Dataset,
};
use certood::interval::certify_chunked;
use certood::metrics::{
    confidences, write_metrics_csv_file, write_scores_csv_file, EvalRecord, MetricsRow,
};
use certood::network::forward_chunked;
use certood::train::{train, TrainConfig, TrainOptions};
use certood::{Error, Tensor};

const CHUNK: usize = 256;
const ATTACK_CHUNK: usize = 100;

#[derive(Parser)]
#[command(
    name = "certood",
    version,
    about = "Certified out-of-distribution detection"
)]
struct Cli {
    /// Seed for every random choice of the command (default 0; `train`
    /// defaults to the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints and the training log.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validate the config and datasets, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Per-sample certified confidence upper bounds.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset source, e.g. `uniform:1000` or `idx:IMAGES`.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        epsilon: f32,
        /// Use the unclipped ε-box instead of its intersection with [0,1]^d.
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        /// In-distribution source; prints the GAUC when given.
        #[arg(long)]
        in_dataset: Option<String>,
    },
    /// Confidence-maximizing attack on every sample.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        epsilon: f32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        /// Extra starting points from an earlier `--dump-points`.
        #[arg(long)]
        seed_points: Option<PathBuf>,
        /// Write the best point of every sample.
        #[arg(long)]
        dump_points: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// AUC, CAUROC, AAUC, GAUC and mean confidence per out-distribution.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        in_dataset: String,
        /// Out-distribution sources; one row each, in order.
        #[arg(long = "ood")]
        ood: Vec<String>,
        #[arg(long)]
        epsilon: f32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        /// Skip the attack; the AAUC column stays empty.
        #[arg(long)]
        no_attack: bool,
        #[arg(long)]
        limit: Option<usize>,
        /// Method name written to the CSV.
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Write a noise dataset as an RGB blob.
    GenNoise {
        #[arg(long, value_enum)]
        kind: NoiseKind,
        #[arg(long)]
        count: usize,
        /// `C,H,W`.
        #[arg(long, value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct AttackArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Also run one attack from the contrast starting point.
    #[arg(long)]
    contrast: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Uniform,
    Smooth,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| format!("bad extent {d:?}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected C,H,W".to_string())
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Invariant(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_)) => 3,
            CliError::Core(Error::Parse(_)) => 4,
            CliError::Core(Error::Numeric { .. } | Error::Diverged { .. }) => 5,
            CliError::Invariant(_) => 6,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        }
        .into())
    }
}

fn load_limited(
    source: &str,
    shape: [usize; 3],
    seed: u64,
    limit: Option<usize>,
) -> CliResult<Dataset> {
    let ds = load_source(source, shape, seed)?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.take(n)?,
        _ => ds,
    })
}

fn attack_config(args: &AttackArgs, epsilon: f32, seed: u64) -> AttackConfig {
    AttackConfig {
        steps: args.steps,
        restarts: args.restarts,
        seed,
        ..AttackConfig::new(epsilon)
    }
}

/// Runs the configured attacks in chunks and merges them per sample.
fn run_attacks(
    ck: &Checkpoint,
    x: &Tensor,
    args: &AttackArgs,
    epsilon: f32,
    seed: u64,
    seeds: Option<&Tensor>,
) -> CliResult<Vec<AttackResult>> {
    let config = attack_config(args, epsilon, seed);
    config.validate()?;
    let n = x.batch();
    let mut results = Vec::with_capacity(n);
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let idx: Vec<usize> = (start..(start + ATTACK_CHUNK).min(n)).collect();
        let xs = x.select(&idx)?;
        let mut runs = vec![attacks::monotone_pgd(&ck.spec, &ck.params, &xs, &config)?];
        if args.contrast {
            let c = AttackConfig {
                init: InitScheme::Contrast,
                restarts: 1,
                ..config.clone()
            };
            runs.push(attacks::monotone_pgd(&ck.spec, &ck.params, &xs, &c)?);
        }
        if let Some(seeds) = seeds {
            let s = seeds.select(&idx)?;
            runs.push(attacks::transfer_attack(
                &ck.spec,
                &ck.params,
                &xs,
                &[s],
                &config,
            )?);
        }
        results.extend(attacks::merge(runs));
    }
    Ok(results)
}

fn cmd_train(
    config: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    dry_run: bool,
    seed: Option<u64>,
) -> CliResult<()> {
    require_file(config)?;
    let text = std::fs::read_to_string(config).map_err(|e| Error::Io {
        path: config.to_path_buf(),
        source: e,
    })?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    source_paths_exist(&cfg.in_data)?;
    for s in &cfg.out_data {
        source_paths_exist(s)?;
    }
    if let Some(r) = resume {
        require_file(r)?;
    }
    if dry_run {
        let spec = cfg.network()?;
        println!(
            "config ok: {} parameters, method {}",
            spec.param_count(),
            cfg.method
        );
        return Ok(());
    }
    let shape = cfg.input_shape;
    let mut in_ds = load_source(&cfg.in_data, shape, cfg.seed)?;
    if let Some(n) = cfg.in_limit {
        in_ds = in_ds.take(n.min(in_ds.len()))?;
    }
    let out_ds = if cfg.out_data.is_empty() {
        None
    } else {
        let parts = cfg
            .out_data
            .iter()
            .enumerate()
            .map(|(i, s)| load_source(s, shape, cfg.seed.wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Some(Dataset::concat("out", &parts)?)
    };
    let options = TrainOptions {
        out_dir: Some(out_dir.to_path_buf()),
        resume: resume.map(load_checkpoint).transpose()?,
    };
    let outcome = train(&cfg, &in_ds, out_ds.as_ref(), &options)?;
    for e in &outcome.log {
        println!(
            "epoch {:>4}  ce {:.4}  ood {:.4}  acc {:.4}  eps {:.4}  kappa {:.4}",
            e.epoch, e.ce_loss, e.ood_loss, e.train_accuracy, e.epsilon, e.kappa
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_certify(
    checkpoint: &Path,
    dataset: &str,
    epsilon: f32,
    clip: bool,
    out: &Path,
    limit: Option<usize>,
    in_dataset: Option<&str>,
    seed: u64,
) -> CliResult<()> {
    require_file(checkpoint)?;
    source_paths_exist(dataset)?;
    if let Some(s) = in_dataset {
        source_paths_exist(s)?;
    }
    let ck = load_checkpoint(checkpoint)?;
    let shape = ck.spec.input_shape();
    let ds = load_limited(dataset, shape, seed, limit)?;
    let clean = confidences(&forward_chunked(&ck.spec, &ck.params, &ds.images, CHUNK)?);
    let upper = certify_chunked(&ck.spec, &ck.params, &ds.images, epsilon, clip, CHUNK)?;
    write_scores_csv_file(out, &[("clean_conf", &clean), ("certified_upper", &upper)])?;
    if let Some(src) = in_dataset {
        let in_ds = load_limited(src, shape, seed, limit)?;
        let in_conf = confidences(&forward_chunked(
            &ck.spec,
            &ck.params,
            &in_ds.images,
            CHUNK,
        )?);
        println!("gauc {:.6}", certood::metrics::gauc(&in_conf, &upper));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    checkpoint: &Path,
    dataset: &str,
    epsilon: f32,
    out: &Path,
    args: &AttackArgs,
    seed_points: Option<&Path>,
    dump_points: Option<&Path>,
    limit: Option<usize>,
    seed: u64,
) -> CliResult<()> {
    require_file(checkpoint)?;
    source_paths_exist(dataset)?;
    if let Some(p) = seed_points {
        require_file(p)?;
    }
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_limited(dataset, ck.spec.input_shape(), seed, limit)?;
    let seeds = match seed_points {
        Some(p) => {
            // Samples without a stored point start from the clean input.
            let mut batch = ds.images.clone();
            let d = batch.item_len();
            for (index, point) in load_points(p)? {
                if index < ds.len() && point.len() == d {
                    batch.data_mut()[index * d..(index + 1) * d].copy_from_slice(point.data());
                }
            }
            Some(batch)
        }
        None => None,
    };
    let clean = confidences(&forward_chunked(&ck.spec, &ck.params, &ds.images, CHUNK)?);
    let results = run_attacks(&ck, &ds.images, args, epsilon, seed, seeds.as_ref())?;
    let attacked: Vec<f32> = results.iter().map(|r| r.best_confidence).collect();
    write_scores_csv_file(out, &[("clean_conf", &clean), ("attacked_conf", &attacked)])?;
    if let Some(p) = dump_points {
        let points: Vec<(usize, Tensor)> = results
            .into_iter()
            .map(|r| r.best_point)
            .enumerate()
            .collect();
        save_points(p, &points)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    in_dataset: &str,
    ood: &[String],
    epsilon: f32,
    out: &Path,
    args: Option<&AttackArgs>,
    limit: Option<usize>,
    method: &str,
    seed: u64,
) -> CliResult<()> {
    require_file(checkpoint)?;
    source_paths_exist(in_dataset)?;
    for s in ood {
        source_paths_exist(s)?;
    }
    let ck = load_checkpoint(checkpoint)?;
    let shape = ck.spec.input_shape();
    let in_ds = load_limited(in_dataset, shape, seed, limit)?;
    let in_conf = confidences(&forward_chunked(
        &ck.spec,
        &ck.params,
        &in_ds.images,
        CHUNK,
    )?);
    let mut rows = Vec::with_capacity(ood.len());
    for (i, src) in ood.iter().enumerate() {
        let ds_seed = seed.wrapping_add(1 + i as u64);
        let ds = load_limited(src, shape, ds_seed, limit)?;
        let clean = confidences(&forward_chunked(&ck.spec, &ck.params, &ds.images, CHUNK)?);
        let upper = certify_chunked(&ck.spec, &ck.params, &ds.images, epsilon, true, CHUNK)?;
        let attacked = match args {
            Some(a) => Some(run_attacks(&ck, &ds.images, a, epsilon, ds_seed, None)?),
            None => None,
        };
        let records: Vec<EvalRecord> = (0..ds.len())
            .map(|j| EvalRecord {
                clean_conf: clean[j],
                attacked_conf: attacked.as_ref().map(|a| a[j].best_confidence),
                certified_upper: Some(upper[j]),
                dataset: src.clone(),
            })
            .collect();
        if let Some((j, r)) = records
            .iter()
            .enumerate()
            .find(|(_, r)| !r.is_consistent(1e-5))
        {
            return Err(CliError::Invariant(format!(
                "{src} sample {j}: clean {} attacked {:?} certified {:?}",
                r.clean_conf, r.attacked_conf, r.certified_upper
            )));
        }
        let row = MetricsRow::from_records(method, &in_conf, &records, epsilon);
        let gauc = row.gauc.unwrap_or(f64::NEG_INFINITY);
        let aauc = row.aauc.unwrap_or(row.auc);
        if !(gauc <= aauc && aauc <= row.auc) {
            return Err(CliError::Invariant(format!(
                "{src}: expected gauc <= aauc <= auc, got {gauc} / {aauc} / {}",
                row.auc
            )));
        }
        rows.push(row);
    }
    write_metrics_csv_file(out, &rows)?;
    Ok(())
}

fn cmd_gen_noise(
    kind: NoiseKind,
    count: usize,
    shape: [usize; 3],
    out: &Path,
    seed: u64,
) -> CliResult<()> {
    let ds = match kind {
        NoiseKind::Uniform => uniform_noise(count, shape, seed)?,
        NoiseKind::Smooth => smooth_noise(count, shape, seed)?,
    };
    std::fs::write(out, encode_rgb_blob(&ds.images)).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Train {
            config,
            out_dir,
            resume,
            dry_run,
        } => cmd_train(&config, &out_dir, resume.as_deref(), dry_run, cli.seed),
        Command::Certify {
            checkpoint,
            dataset,
            epsilon,
            no_clip,
            out,
            limit,
            in_dataset,
        } => cmd_certify(
            &checkpoint,
            &dataset,
            epsilon,
            !no_clip,
            &out,
            limit,
            in_dataset.as_deref(),
            seed,
        ),
        Command::Attack {
            checkpoint,
            dataset,
            epsilon,
            out,
            attack,
            seed_points,
            dump_points,
            limit,
        } => cmd_attack(
            &checkpoint,
            &dataset,
            epsilon,
            &out,
            &attack,
            seed_points.as_deref(),
            dump_points.as_deref(),
            limit,
            seed,
        ),
        Command::Eval {
            checkpoint,
            in_dataset,
            ood,
            epsilon,
            out,
            attack,
            no_attack,
            limit,
            method,
        } => cmd_eval(
            &checkpoint,
            &in_dataset,
            &ood,
            epsilon,
            &out,
            (!no_attack).then_some(&attack),
            limit,
            &method,
            seed,
        ),
        Command::GenNoise {
            kind,
            count,
            shape,
            out,
        } => cmd_gen_noise(kind, count, shape, &out, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
