//! `certilev` command-line front end: alphabet building, training,
//! verification and reports.
//!
//! Exit codes: 0 on success, 2 on any input, configuration or runtime error,
//! 3 when the soundness audit finds a violation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use certilev::checkpoint::{check_alphabet, load_checkpoint, save_checkpoint, Checkpoint};
use certilev::data::{build_dataset, load_csv, CsvSchema, LabelMap, LabeledDataset};
use certilev::text::build_alphabet;
use certilev::training::{train, TrainConfig, TrainMode};
use certilev::verify::{
    comparison_table, evaluate, length_table, summarize, BruteOptions, EvalOptions, SampleRecord,
    Verifier,
};
use certilev::{Alphabet, NormOrder};

const EXIT_ERROR: u8 = 2;
const EXIT_UNSOUND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "certilev",
    version,
    about = "Levenshtein-distance robustness certificates"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "CERTILEV_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the character alphabet of a data file.
    BuildAlphabet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// Train a classifier and write its checkpoint.
    Train(TrainArgs),
    /// Run verifiers over a data file.
    Verify(VerifyArgs),
    /// Aggregate verification records.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Also print verified accuracy by sentence length.
        #[arg(long)]
        by_length: bool,
        /// Width of a length bucket.
        #[arg(long, default_value_t = 10)]
        bucket: usize,
        /// Radius used for the length table.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Largest radius in the summary table.
        #[arg(long, default_value_t = 10)]
        k_max: usize,
    },
}

#[derive(Args, Clone, Copy)]
struct CsvArgs {
    /// The first row is a header.
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 0)]
    label_col: usize,
    #[arg(long, default_value_t = 1)]
    text_col: usize,
}

impl CsvArgs {
    fn schema(self, path: &Path) -> CsvSchema {
        CsvSchema {
            label_col: self.label_col,
            text_col: self.text_col,
            has_header: self.header,
            ..CsvSchema::for_path(path)
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alphabet: PathBuf,
    /// Checkpoint path. The label map and the per-epoch report are written
    /// next to it as `<out>.labels.tsv` and `<out>.train.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// plain, one_lip or regularized.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// 1, 2 or inf.
    #[arg(long)]
    p: Option<NormOrder>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Kernel width q.
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Backpropagate through the normalization divisors (one_lip only).
    #[arg(long)]
    full_normalization_grad: bool,
    /// Drop training sentences longer than this.
    #[arg(long)]
    max_len: Option<usize>,
    /// Skip rows that fail to parse or tokenize instead of failing.
    #[arg(long)]
    skip_bad_rows: bool,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the alphabet named in the checkpoint.
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Overrides the label map named in the checkpoint.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated subset of lipslev, brute, ibp.
    #[arg(long, default_value = "lipslev", value_delimiter = ',')]
    verifiers: Vec<Verifier>,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    /// Radius checked by brute force.
    #[arg(long, default_value_t = 1)]
    brute_k: usize,
    /// Permit brute force beyond radius 1.
    #[arg(long)]
    allow_expensive: bool,
    /// Use the global embedding constant instead of the per-sentence one.
    #[arg(long)]
    global_embedding: bool,
    /// Verify only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Per-sample records, one JSON object per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    skip_bad_rows: bool,
    #[command(flatten)]
    csv: CsvArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    let result = match cli.command {
        Command::BuildAlphabet { data, out, csv } => cmd_build_alphabet(&data, &out, csv),
        Command::Train(args) => cmd_train(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Report {
            records,
            by_length,
            bucket,
            k,
            k_max,
        } => cmd_report(&records, by_length, bucket, k, k_max),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn cmd_build_alphabet(data: &Path, out: &Path, csv: CsvArgs) -> Result<ExitCode> {
    let load = load_csv(data, csv.schema(data))?;
    let records = load.strict()?;
    let alphabet = build_alphabet(records.iter().map(|r| r.text.as_str()))?;
    alphabet
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("alphabet size {}", alphabet.len());
    Ok(ExitCode::SUCCESS)
}

/// Loads a data file into a dataset, failing on the first bad row unless
/// `skip_bad` is set.
fn load_dataset(
    path: &Path,
    csv: CsvArgs,
    alphabet: &Alphabet,
    labels: &LabelMap,
    max_len: Option<usize>,
    skip_bad: bool,
) -> Result<LabeledDataset> {
    let load = load_csv(path, csv.schema(path))?;
    let mut bad = load.errors.clone();
    let (ds, report) = build_dataset(&load.records, alphabet, labels, max_len);
    bad.extend(report.rejected);
    bad.sort_by_key(|e| e.line);
    if let Some(first) = bad.first() {
        if !skip_bad {
            bail!(
                "{}: line {}: {} ({} bad rows; --skip-bad-rows to ignore)",
                path.display(),
                first.line,
                first.msg,
                bad.len()
            );
        }
        eprintln!("skipped {} bad rows in {}", bad.len(), path.display());
    }
    if report.over_length > 0 {
        eprintln!(
            "dropped {} sentences over the length limit",
            report.over_length
        );
    }
    if ds.is_empty() {
        bail!("{}: no usable rows", path.display());
    }
    Ok(ds)
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}: line {}: expected key = value", path.display(), n + 1);
        };
        let key = key.trim().replace('-', "_");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("{}: line {}: duplicate key {key}", path.display(), n + 1);
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("config key {key}: {e}"))
}

/// Config file values first, then command-line flags.
fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mode = match (args.mode, file.get("mode")) {
        (Some(m), _) => m,
        (None, Some(v)) => parse_value("mode", v)?,
        (None, None) => TrainMode::OneLip,
    };
    let p = match (args.p, file.get("p")) {
        (Some(p), _) => p,
        (None, Some(v)) => parse_value("p", v)?,
        (None, None) => NormOrder::L2,
    };
    let mut cfg = TrainConfig::new(mode, p);
    for (key, value) in &file {
        match key.as_str() {
            "mode" | "p" => {}
            "epochs" => cfg.epochs = parse_value(key, value)?,
            "batch" | "batch_size" => cfg.batch_size = parse_value(key, value)?,
            "lr_max" => cfg.lr_max = parse_value(key, value)?,
            "lambda" => cfg.lambda = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            "val_size" => cfg.val_size = parse_value(key, value)?,
            "embed_dim" => cfg.embed_dim = parse_value(key, value)?,
            "hidden" => cfg.hidden = parse_value(key, value)?,
            "kernel" => cfg.kernel = parse_value(key, value)?,
            "layers" => cfg.layers = parse_value(key, value)?,
            "full_normalization_grad" => cfg.full_normalization_grad = parse_value(key, value)?,
            other => bail!("unknown config key {other}"),
        }
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.batch_size, args.batch);
    set(&mut cfg.val_size, args.val_size);
    set(&mut cfg.embed_dim, args.embed_dim);
    set(&mut cfg.hidden, args.hidden);
    set(&mut cfg.kernel, args.kernel);
    set(&mut cfg.layers, args.layers);
    if let Some(v) = args.lr_max {
        cfg.lr_max = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.full_normalization_grad |= args.full_normalization_grad;
    cfg.validate()?;
    Ok(cfg)
}

/// `<path><suffix>` in the same directory.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// How a checkpoint refers to a companion file: by bare name when both live
/// in the same directory, by absolute path otherwise.
fn companion_ref(checkpoint: &Path, file: &Path) -> Result<String> {
    let dir = |p: &Path| -> Result<PathBuf> {
        let parent = p
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        parent
            .canonicalize()
            .with_context(|| format!("resolving {}", parent.display()))
    };
    if dir(checkpoint)? == dir(file)? {
        if let Some(name) = file.file_name().and_then(|n| n.to_str()) {
            return Ok(name.to_string());
        }
    }
    let abs = file
        .canonicalize()
        .with_context(|| format!("resolving {}", file.display()))?;
    abs.to_str()
        .map(str::to_string)
        .context("companion path is not valid UTF-8")
}

fn resolve_companion(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(args)?;
    let alphabet = Alphabet::load(&args.alphabet)
        .with_context(|| format!("reading alphabet {}", args.alphabet.display()))?;
    let load = load_csv(&args.data, args.csv.schema(&args.data))?;
    let labels = LabelMap::from_labels(load.records.iter().map(|r| r.label.as_str()));
    let ds = load_dataset(
        &args.data,
        args.csv,
        &alphabet,
        &labels,
        args.max_len,
        args.skip_bad_rows,
    )?;
    let (model, report) = train(&ds, &cfg)?;

    let labels_path = sibling(&args.out, ".labels.tsv");
    let report_path = sibling(&args.out, ".train.jsonl");
    labels.save(&labels_path)?;
    fs::write(&report_path, report.to_jsonl())
        .with_context(|| format!("writing {}", report_path.display()))?;
    let ckpt = Checkpoint {
        model,
        alphabet: Some(companion_ref(&args.out, &args.alphabet)?),
        labels: Some(companion_ref(&args.out, &labels_path)?),
    };
    save_checkpoint(&ckpt, &args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let last = report.epochs.last().context("no epochs recorded")?;
    let val = last
        .val_acc
        .map_or_else(|| "n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
    println!(
        "trained {} p={} on {} samples: loss {:.4}, G {:.6}, val acc {val}",
        cfg.mode,
        cfg.p,
        ds.len(),
        last.loss,
        last.g
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    if args.verifiers.is_empty() {
        bail!("no verifiers selected");
    }
    if args.brute_k == 0 {
        bail!("--brute-k must be at least 1");
    }
    if args.brute_k > 1 && !args.allow_expensive {
        bail!("brute force beyond radius 1 needs --allow-expensive");
    }
    let ckpt = load_checkpoint(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let alphabet_path = match (&args.alphabet, &ckpt.alphabet) {
        (Some(p), _) => p.clone(),
        (None, Some(name)) => resolve_companion(&args.model, name),
        (None, None) => bail!("checkpoint names no alphabet; pass --alphabet"),
    };
    let labels_path = match (&args.labels, &ckpt.labels) {
        (Some(p), _) => p.clone(),
        (None, Some(name)) => resolve_companion(&args.model, name),
        (None, None) => bail!("checkpoint names no label map; pass --labels"),
    };
    let alphabet = Alphabet::load(&alphabet_path)
        .with_context(|| format!("reading alphabet {}", alphabet_path.display()))?;
    let labels = LabelMap::load(&labels_path)
        .with_context(|| format!("reading labels {}", labels_path.display()))?;
    check_alphabet(&ckpt.model, alphabet.len())?;
    if labels.len() != ckpt.model.shape.classes {
        bail!(
            "label map has {} classes, model has {}",
            labels.len(),
            ckpt.model.shape.classes
        );
    }

    let mut ds = load_dataset(
        &args.data,
        args.csv,
        &alphabet,
        &labels,
        None,
        args.skip_bad_rows,
    )?;
    if let Some(n) = args.limit {
        ds = ds.truncated(n);
    }
    let opts = EvalOptions {
        k_max: args.k_max,
        brute_k: args.brute_k,
        brute: BruteOptions {
            allow_expensive: args.allow_expensive,
            ..BruteOptions::default()
        },
        local: !args.global_embedding,
    };
    let mut verifiers = args.verifiers.clone();
    verifiers.sort();
    verifiers.dedup();
    let ev = evaluate(&ckpt.model, &ds.samples, &verifiers, opts)?;

    if let Some(out) = &args.out {
        let mut text = String::new();
        for r in &ev.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", comparison_table(&ev.reports));
    if ev.skipped_empty > 0 {
        println!("empty-sentence deletions excluded: {}", ev.skipped_empty);
    }
    if let Some(a) = &ev.audit {
        let mut line = format!("soundness audit: {} samples checked", a.checked);
        let _ = write!(
            line,
            ", LipsLev violations {}, IBP violations {}, radius mismatches {}",
            a.lipslev_violations.len(),
            a.ibp_violations.len(),
            a.floor_mismatches.len()
        );
        println!("{line}");
        if !a.is_clean() {
            eprintln!(
                "soundness violation: lipslev {:?}, ibp {:?}, radius {:?}",
                a.lipslev_violations, a.ibp_violations, a.floor_mismatches
            );
            return Ok(ExitCode::from(EXIT_UNSOUND));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(
    path: &Path,
    by_length: bool,
    bucket: usize,
    k: usize,
    k_max: usize,
) -> Result<ExitCode> {
    if bucket == 0 {
        bail!("--bucket must be positive");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}", path.display(), n + 1))?;
        records.push(r);
    }
    let reports = summarize(&records, k_max)?;
    print!("{}", comparison_table(&reports));
    for r in &reports {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"));
        println!(
            "{}: mean length verified {}, unverified {}",
            r.verifier,
            fmt(r.mean_length_verified),
            fmt(r.mean_length_unverified)
        );
    }
    if by_length {
        for r in &reports {
            println!("\n{} at k={k}", r.verifier);
            print!("{}", length_table(&records, r.verifier, k, bucket)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
