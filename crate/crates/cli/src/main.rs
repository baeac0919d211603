//! `metasvdd` command-line driver.

mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use metasvdd::baseline::{baseline_grid_eval, run_protocol, Protocol};
use metasvdd::encoder::init_encoder;
use metasvdd::episodes::{synthetic_tasks, ClassIndexedDataset, EpisodeConfig, SplitTag};
use metasvdd::gradcheck::full_suite;
use metasvdd::heads::Head;
use metasvdd::io::{
    augment_rotations, ingest_idx, read_checkpoint, read_file, read_manifest, read_occb,
    resize_bilinear, write_checkpoint, write_file, write_occb, Checkpoint,
};
use metasvdd::linalg::Mat;
use metasvdd::metrics::HeadScorer;
use metasvdd::svdd::{build_kernel, solve_dual, KernelMatrix, DEFAULT_TOLERANCE};
use metasvdd::train::{meta_train, AdamConfig, TrainConfig};
use metasvdd::Tensor;

use config::RunConfig;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(metasvdd::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<metasvdd::Error> for CliError {
    fn from(e: metasvdd::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "metasvdd",
    version,
    about = "Meta-learned one-class classification with a differentiable SVDD layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train an encoder; writes checkpoint.occk and train_log.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(RunArgs),
    /// Solve the SVDD dual for a whitespace-separated matrix.
    SolveSvdd(SolveArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Convert IDX files or synthetic clusters to an OCCB dataset.
    PackDataset(PackArgs),
    /// PCA + one-class SVM grid search on the test split.
    Baseline(RunArgs),
}

/// Every run setting as a flag. Values are validated by `RunConfig::set`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// `key = value` file; flags take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// OCCB dataset file. [default: none]
    #[arg(long, value_name = "PATH")]
    dataset: Option<String>,
    /// Split manifest assigning class ids to splits. [default: none]
    #[arg(long, value_name = "PATH")]
    manifest: Option<String>,
    /// Manifest split used for meta-training. [default: train]
    #[arg(long, value_name = "NAME")]
    train_split: Option<String>,
    /// Manifest split used for model selection. [default: validation]
    #[arg(long, value_name = "NAME")]
    validation_split: Option<String>,
    /// Manifest split used by eval and baseline. [default: test]
    #[arg(long, value_name = "NAME")]
    test_split: Option<String>,
    /// meta_svdd or oc_protonet. [default: meta_svdd]
    #[arg(long, value_name = "TAG")]
    head: Option<String>,
    /// conv4 or mlp. [default: conv4]
    #[arg(long, value_name = "TAG")]
    architecture: Option<String>,
    /// Convolutional blocks. [default: 4]
    #[arg(long, value_name = "N")]
    conv_blocks: Option<String>,
    /// Filters per convolutional block. [default: 64]
    #[arg(long, value_name = "N")]
    conv_filters: Option<String>,
    /// Comma-separated MLP hidden widths. [default: 64,64]
    #[arg(long, value_name = "LIST")]
    mlp_hidden: Option<String>,
    /// MLP output dimension. [default: 64]
    #[arg(long, value_name = "N")]
    feature_dim: Option<String>,
    /// Support examples per episode. [default: 5]
    #[arg(long, value_name = "N")]
    shot: Option<String>,
    /// Training queries per side. [default: 10]
    #[arg(long, value_name = "N")]
    query_per_side: Option<String>,
    /// Episodes per meta-batch. [default: 16]
    #[arg(long, value_name = "N")]
    meta_batch: Option<String>,
    /// Adam learning rate. [default: 0.0005]
    #[arg(long, value_name = "X")]
    learning_rate: Option<String>,
    /// Kernel stabilization added to the diagonal. [default: 0.000001]
    #[arg(long, value_name = "X")]
    lambda: Option<String>,
    /// Seed for all sampling and initialization. [default: 0]
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    /// Meta-batches between validations. [default: 100]
    #[arg(long, value_name = "N")]
    eval_every: Option<String>,
    /// Validations without improvement before stopping. [default: 10]
    #[arg(long, value_name = "N")]
    patience: Option<String>,
    /// Episodes per validation. [default: 500]
    #[arg(long, value_name = "N")]
    val_tasks: Option<String>,
    /// Hard step limit, 0 for none. [default: 0]
    #[arg(long, value_name = "N")]
    max_steps: Option<String>,
    /// Episodes for the accuracy protocol. [default: 10000]
    #[arg(long, value_name = "N")]
    episodes: Option<String>,
    /// Repetitions per class pair for the auc protocol. [default: 10]
    #[arg(long, value_name = "N")]
    repetitions: Option<String>,
    /// Fraction of support variance kept by the baseline PCA. [default: 0.95]
    #[arg(long, value_name = "X")]
    variance_keep: Option<String>,
    /// Directory for checkpoints and reports. [default: .]
    #[arg(long, value_name = "PATH")]
    output_dir: Option<String>,
    /// Checkpoint path. [default: <output_dir>/checkpoint.occk]
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    /// Worker threads; results do not depend on it. [default: 1]
    #[arg(long, value_name = "N")]
    jobs: Option<String>,
    /// auc or accuracy (eval and baseline). [default: accuracy]
    #[arg(long, value_name = "NAME", default_value = "accuracy")]
    protocol: String,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("dataset", &self.dataset),
            ("manifest", &self.manifest),
            ("train_split", &self.train_split),
            ("validation_split", &self.validation_split),
            ("test_split", &self.test_split),
            ("head", &self.head),
            ("architecture", &self.architecture),
            ("conv_blocks", &self.conv_blocks),
            ("conv_filters", &self.conv_filters),
            ("mlp_hidden", &self.mlp_hidden),
            ("feature_dim", &self.feature_dim),
            ("shot", &self.shot),
            ("query_per_side", &self.query_per_side),
            ("meta_batch", &self.meta_batch),
            ("learning_rate", &self.learning_rate),
            ("lambda", &self.lambda),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("patience", &self.patience),
            ("val_tasks", &self.val_tasks),
            ("max_steps", &self.max_steps),
            ("episodes", &self.episodes),
            ("repetitions", &self.repetitions),
            ("variance_keep", &self.variance_keep),
            ("output_dir", &self.output_dir),
            ("checkpoint", &self.checkpoint),
            ("jobs", &self.jobs),
        ]
    }

    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let bytes = read_file(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        Ok(cfg)
    }

    fn protocol(&self, cfg: &RunConfig) -> CliResult<Protocol> {
        match self.protocol.as_str() {
            "auc" => Ok(Protocol::Auc {
                repetitions: cfg.repetitions,
            }),
            "accuracy" => Ok(Protocol::Accuracy {
                episodes: cfg.episodes,
            }),
            other => Err(CliError::Usage(format!(
                "unknown protocol '{other}', expected auc or accuracy"
            ))),
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Text matrix: one row per line, whitespace-separated.
    matrix: PathBuf,
    /// Treat the matrix as a Gram matrix instead of feature rows.
    #[arg(long)]
    gram: bool,
    /// Kernel stabilization added to the diagonal.
    #[arg(long, default_value_t = metasvdd::svdd::DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PackArgs {
    /// Output OCCB path.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// IDX image file (requires --idx-labels).
    #[arg(long, value_name = "PATH", requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, value_name = "PATH", requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    /// Existing OCCB file to transform.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Gaussian clusters as CLASSES,PER_CLASS,DIM,SPREAD.
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<String>,
    /// Seed for --synthetic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bilinear resize to HxW.
    #[arg(long, value_name = "HxW")]
    resize: Option<String>,
    /// Add the 90, 180 and 270 degree rotations as new classes.
    #[arg(long)]
    rotate: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => with_jobs(&args, train),
        Command::Eval(args) => with_jobs(&args, eval),
        Command::Baseline(args) => with_jobs(&args, baseline),
        Command::SolveSvdd(args) => solve_svdd(&args),
        Command::Gradcheck(args) => gradcheck(&args),
        Command::PackDataset(args) => pack_dataset(&args),
    }
}

fn with_jobs(args: &RunArgs, f: fn(&RunArgs, &RunConfig) -> CliResult) -> CliResult {
    let cfg = args.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    pool.install(|| f(args, &cfg))
}

fn require_dataset(cfg: &RunConfig) -> CliResult<ClassIndexedDataset> {
    let path = cfg.dataset.as_ref().ok_or_else(|| {
        CliError::Usage("no dataset given; use --dataset or the dataset key".into())
    })?;
    Ok(read_occb(path)?)
}

fn split(
    cfg: &RunConfig,
    dataset: &ClassIndexedDataset,
    name: &str,
    tag: SplitTag,
) -> CliResult<ClassIndexedDataset> {
    let manifest = read_manifest(cfg.manifest.as_ref().ok_or_else(|| {
        CliError::Usage("training needs a split manifest; use --manifest".into())
    })?)?;
    let mut ds = manifest.select(dataset, name)?;
    ds.split = tag;
    Ok(ds)
}

/// Test split from the manifest, or the whole dataset when none is given.
fn test_split(cfg: &RunConfig, dataset: ClassIndexedDataset) -> CliResult<ClassIndexedDataset> {
    match &cfg.manifest {
        Some(_) => split(cfg, &dataset, &cfg.test_split, SplitTag::Test),
        None => Ok(dataset),
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(metasvdd::Error::Io {
            path: dir.display().to_string(),
            source: e,
        })
    })
}

fn emit(path: &Path, text: &str) -> CliResult {
    write_file(path, text.as_bytes())?;
    print!("{text}");
    let _ = std::io::stdout().flush();
    Ok(())
}

fn train(_args: &RunArgs, cfg: &RunConfig) -> CliResult {
    let dataset = require_dataset(cfg)?;
    let train_ds = split(cfg, &dataset, &cfg.train_split, SplitTag::Train)?;
    let val_ds = split(cfg, &dataset, &cfg.validation_split, SplitTag::Validation)?;
    let head = Head::new(cfg.head, cfg.lambda)?;
    let init = init_encoder(
        &cfg.architecture(),
        dataset.example_shape(),
        cfg.feature_dim,
        cfg.seed,
    )?;
    info!(
        "{} parameters, {} train / {} validation classes",
        init.num_parameters(),
        train_ds.class_count(),
        val_ds.class_count()
    );
    let config = TrainConfig {
        episode: EpisodeConfig {
            shot: cfg.shot,
            query_per_side: cfg.query_per_side,
            meta_batch: cfg.meta_batch,
        },
        adam: AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        eval_every: cfg.eval_every,
        patience: cfg.patience,
        validation_tasks: cfg.val_tasks,
        max_steps: (cfg.max_steps > 0).then_some(cfg.max_steps),
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let state = meta_train(
        &train_ds,
        &val_ds,
        head,
        init,
        &config,
        cfg.seed,
        Some(&mut log),
    )?;

    ensure_dir(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("run_config.txt"),
        cfg.to_text().as_bytes(),
    )?;
    let best = state.best_validation;
    let checkpoint = Checkpoint {
        head,
        params: state.best_params,
        step: best.map_or(0, |b| b.step as u64),
        best_mean: best.map(|b| b.validation.mean),
        best_ci_low: best.map(|b| b.validation.ci_low),
    };
    write_checkpoint(&cfg.checkpoint_path(), &checkpoint)?;
    emit(
        &cfg.output_dir.join("train_log.csv"),
        &String::from_utf8(log).expect("csv is UTF-8"),
    )
}

fn eval(args: &RunArgs, cfg: &RunConfig) -> CliResult {
    let protocol = args.protocol(cfg)?;
    let checkpoint = read_checkpoint(&cfg.checkpoint_path())?;
    let test = test_split(cfg, require_dataset(cfg)?)?;
    let scorer = HeadScorer {
        head: checkpoint.head,
        params: &checkpoint.params,
    };
    let report = run_protocol(&scorer, &test, cfg.shot, protocol, cfg.seed)?;
    ensure_dir(&cfg.output_dir)?;
    emit(
        &cfg.output_dir.join(format!("eval_{}.csv", args.protocol)),
        &report.to_csv(),
    )
}

fn baseline(args: &RunArgs, cfg: &RunConfig) -> CliResult {
    let protocol = args.protocol(cfg)?;
    let test = test_split(cfg, require_dataset(cfg)?)?;
    let report = baseline_grid_eval(&test, cfg.shot, protocol, cfg.seed, cfg.variance_keep)?;
    let best = report.best_entry();
    info!("best gamma {} nu {}", best.gamma, best.nu);
    ensure_dir(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("baseline_grid.csv"),
        report.grid_csv().as_bytes(),
    )?;
    let text = format!(
        "{}\nbest_gamma,best_nu\n{},{}\n",
        best.report.to_csv(),
        best.gamma,
        best.nu
    );
    emit(
        &cfg.output_dir
            .join(format!("baseline_{}.csv", args.protocol)),
        &text,
    )
}

fn parse_matrix(text: &str) -> CliResult<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| {
                metasvdd::Error::Config(format!("line {}: expected finite numbers", i + 1))
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(metasvdd::Error::Config(format!(
                    "line {}: {} columns, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                ))
                .into());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(metasvdd::Error::Config("matrix is empty".into()).into());
    }
    Ok(rows)
}

/// Rounds to six decimals for stable printing; `-0` prints as `0`.
fn fmt6(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6 + 0.0;
    format!("{r}")
}

fn fmt_row(label: &str, values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|&v| fmt6(v)).collect();
    if parts.is_empty() {
        label.to_string()
    } else {
        format!("{label} {}", parts.join(" "))
    }
}

fn solve_svdd(args: &SolveArgs) -> CliResult {
    let bytes = read_file(&args.matrix)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| metasvdd::Error::Config(format!("{}: not UTF-8", args.matrix.display())))?;
    let rows = parse_matrix(&text)?;
    let kernel = if args.gram {
        let n = rows.len();
        if rows[0].len() != n {
            return Err(metasvdd::Error::Config(format!(
                "gram matrix must be square, got {n}x{}",
                rows[0].len()
            ))
            .into());
        }
        KernelMatrix::from_gram(Mat::from_rows(n, n, rows.concat()), args.lambda)?
    } else {
        build_kernel(&Tensor::from_rows(&rows)?, args.lambda)?
    };
    let sol = solve_dual(&kernel, DEFAULT_TOLERANCE)?;
    println!("{}", fmt_row("alpha", &sol.alpha));
    if !sol.center.is_empty() {
        println!("{}", fmt_row("center", &sol.center));
    }
    println!("radius {}", fmt6(sol.radius));
    println!("nu {}", fmt6(sol.nu));
    println!("kkt_residual {:e}", sol.kkt_residual);
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> CliResult {
    let outcomes = full_suite(args.seed)?;
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<40} error {:.3e} tolerance {:.0e}",
            o.name, o.error, o.tolerance
        );
        failed += usize::from(!o.passed());
    }
    if failed > 0 {
        return Err(metasvdd::Error::Numeric {
            op: "gradcheck".into(),
            detail: format!("{failed} of {} checks above tolerance", outcomes.len()),
        }
        .into());
    }
    Ok(())
}

fn parse_resize(spec: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--resize expects HxW, got '{spec}'"));
    let (h, w) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn parse_synthetic(spec: &str, seed: u64) -> CliResult<ClassIndexedDataset> {
    let bad = || {
        CliError::Usage(format!(
            "--synthetic expects CLASSES,PER_CLASS,DIM,SPREAD, got '{spec}'"
        ))
    };
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    let classes: usize = parts[0].parse().map_err(|_| bad())?;
    let per_class: usize = parts[1].parse().map_err(|_| bad())?;
    let dim: usize = parts[2].parse().map_err(|_| bad())?;
    let spread: f64 = parts[3].parse().map_err(|_| bad())?;
    Ok(synthetic_tasks(classes, per_class, dim, spread, seed)?)
}

fn pack_dataset(args: &PackArgs) -> CliResult {
    let sources = [
        args.idx_images.is_some(),
        args.input.is_some(),
        args.synthetic.is_some(),
    ];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(CliError::Usage(
            "give exactly one of --idx-images/--idx-labels, --input or --synthetic".into(),
        ));
    }
    let mut ds = if let (Some(images), Some(labels)) = (&args.idx_images, &args.idx_labels) {
        ingest_idx(images, labels)?
    } else if let Some(input) = &args.input {
        read_occb(input)?
    } else {
        parse_synthetic(args.synthetic.as_deref().unwrap_or_default(), args.seed)?
    };
    if let Some(spec) = &args.resize {
        let (h, w) = parse_resize(spec)?;
        ds = resize_bilinear(&ds, h, w)?;
    }
    if args.rotate {
        ds = augment_rotations(&ds)?;
    }
    write_occb(&args.output, &ds)?;
    println!(
        "classes {} examples {} shape {:?}",
        ds.class_count(),
        ds.total_examples(),
        ds.example_shape()
    );
    Ok(())
}
