//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime fault.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::data::{fixed_budget_split, load_feature_file, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::nn::Checkpoint;
use crate::pipeline::analysis::{kl_report, pca_dump, recall, synthetic_alignment};
use crate::pipeline::run::CHECKPOINT_DIR;
use crate::pipeline::{
    from_checkpoint, load_data, resume_experiment, run_experiment, run_on_data, ExperimentConfig, Method, RawConfig,
    RunOutput,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "NOVELAUG_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const ANALYSES: [&str; 4] = ["recall", "kl", "pca", "similarity"];

#[derive(Debug, Parser)]
#[command(
    name = "novelaug",
    version,
    about = "Novel-class embedding augmentation for proxy-based metric learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Fixed-budget sweep over the number of training classes.
    SweepClasses(SweepArgs),
    /// Paired multi-seed comparison of methods.
    Compare(CompareArgs),
    /// Run analyses on a finished run.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file (`key = value` lines); defaults apply when omitted.
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set method=vanilla`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root (defaults to $NOVELAUG_OUTPUT_ROOT, then `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Continue the run in this directory instead of starting a new one.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Training class counts.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub counts: Vec<usize>,
    /// Total training samples shared by all classes (defaults to
    /// `train_classes × samples_per_class`).
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,l2a_nc")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory (or its checkpoint directory).
    pub run: PathBuf,
    /// Comma-separated subset of recall, kl, pca, similarity.
    #[arg(long, value_delimiter = ',', default_value = "recall")]
    pub analyses: Vec<String>,
    /// Training feature file (defaults to the run's dataset).
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    /// Test feature file.
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    /// Directory for the CSV files (defaults to `<run>/analysis`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random configurations per operation.
    #[arg(long, default_value_t = 50)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Spec(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Dimension { .. }
        | Error::LabelRange { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a).map(|dir| {
            println!("{}", dir.display());
            EXIT_OK
        }),
        Command::SweepClasses(a) => cmd_sweep_classes(&a).map(|p| {
            println!("{}", p.display());
            EXIT_OK
        }),
        Command::Compare(a) => cmd_compare(&a).map(|p| {
            println!("{}", p.display());
            EXIT_OK
        }),
        Command::Analyze(a) => cmd_analyze(&a).map(|files| {
            files.iter().for_each(|f| println!("{}", f.display()));
            EXIT_OK
        }),
        Command::GradCheck(a) => {
            let rows = gradsuite::run_suite(a.seed, a.configs)?;
            print!("{}", gradsuite::format_table(&rows));
            Ok(if rows.iter().all(gradsuite::CheckRow::passed) {
                EXIT_OK
            } else {
                EXIT_RUNTIME
            })
        }
    }
}

/// Config file plus overrides. An unreadable file is a usage error.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut raw = match path {
        Some(p) => RawConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(vec![format!("cannot read {}: {source}", path.display())]),
            other => other,
        })?,
        None => RawConfig::default(),
    };
    for o in overrides {
        raw.set(o)?;
    }
    ExperimentConfig::from_raw(&raw)
}

fn output_root(out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `root/<stem>-<timestamp>`, suffixed until it does not exist yet.
pub fn fresh_dir(root: &Path, stem: &str) -> Result<PathBuf> {
    let base = format!("{stem}-{}", timestamp());
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{base}-{n}"));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn provenance(hash: &str, seeds: &str) -> String {
    format!("# config_hash={hash} seed={seeds}\n")
}

fn seeds_label(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    if let Some(dir) = &a.resume {
        resume_experiment(dir, &a.common.set)?;
        return Ok(dir.clone());
    }
    let cfg = load_config(a.common.config.as_deref(), &a.common.set)?;
    let root = output_root(a.common.out.as_deref(), &cfg);
    let dir = fresh_dir(&root, &format!("{}-{}", cfg.method.name(), cfg.seed))?;
    run_experiment(&cfg, &dir)?;
    Ok(dir)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rows `(k, samples_per_class, median recall@1)` in the order of `counts`.
pub fn sweep_classes(
    base: &ExperimentConfig,
    counts: &[usize],
    total: usize,
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<(usize, usize, f64)>> {
    if seeds.is_empty() || counts.is_empty() {
        return Err(Error::Config(vec![
            "sweep needs at least one class count and one seed".into()
        ]));
    }
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); counts.len()];
    let mut runs = String::from("k,seed,samples_per_class,recall@1\n");
    for &seed in seeds {
        let cfg = base.with_overrides(&[format!("seed={seed}"), format!("data.seed={seed}")])?;
        let (_, test) = make_synthetic(&cfg.data)?;
        let splits = fixed_budget_split(&cfg.data, counts, total)?;
        for (i, (&k, train)) in counts.iter().zip(&splits).enumerate() {
            let novel = (cfg.novel_ratio * k as f64).round() as usize;
            let cfg_k = cfg.with_overrides(&[format!("novel.classes={novel}")])?;
            let out = run_on_data(&cfg_k, train, &test, &dir.join(format!("k{k}-seed{seed}")))?;
            let r1 = out.metric("recall@1").unwrap_or(f64::NAN);
            per_k[i].push(r1);
            let _ = writeln!(runs, "{k},{seed},{},{r1:?}", total / k);
        }
    }
    let hash = base.hash();
    write(
        &dir.join("sweep_runs.csv"),
        &(provenance(&hash, &seeds_label(seeds)) + &runs),
    )?;
    let rows: Vec<(usize, usize, f64)> = counts
        .iter()
        .zip(per_k.iter_mut())
        .map(|(&k, v)| (k, total / k, median(v)))
        .collect();
    let mut csv = provenance(&hash, &seeds_label(seeds));
    csv.push_str("k,samples_per_class,recall@1\n");
    for (k, s, r) in &rows {
        let _ = writeln!(csv, "{k},{s},{r:?}");
    }
    write(&dir.join("sweep.csv"), &csv)?;
    Ok(rows)
}

pub fn cmd_sweep_classes(a: &SweepArgs) -> Result<PathBuf> {
    let cfg = load_config(a.common.config.as_deref(), &a.common.set)?;
    let total = a.total.unwrap_or(cfg.data.train_classes * cfg.data.samples_per_class);
    let dir = fresh_dir(&output_root(a.common.out.as_deref(), &cfg), "sweep-classes")?;
    sweep_classes(&cfg, &a.counts, total, &a.seeds, &dir)?;
    Ok(dir.join("sweep.csv"))
}

/// One finished member of a comparison.
#[derive(Clone, Debug)]
pub struct CompareRun {
    pub seed: u64,
    pub method: Method,
    pub data_checksum: String,
    pub output: RunOutput,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Paired runs: every seed row shares its data seed across methods.
pub fn compare(base: &ExperimentConfig, methods: &[Method], seeds: &[u64], dir: &Path) -> Result<Vec<CompareRun>> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config(vec![
            "compare needs at least one method and one seed".into()
        ]));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &m in methods {
            let cfg = base.with_overrides(&[
                format!("method={}", m.name()),
                format!("seed={seed}"),
                format!("data.seed={seed}"),
            ])?;
            let (train, test) = load_data(&cfg)?;
            let output = run_on_data(&cfg, &train, &test, &dir.join(format!("{}-{seed}", m.name())))?;
            runs.push(CompareRun {
                seed,
                method: m,
                data_checksum: train.checksum(),
                output,
            });
        }
    }
    let hash = base.hash();
    let label = seeds_label(seeds);
    let mut names: Vec<String> = Vec::new();
    for r in &runs {
        for (k, _) in &r.output.eval {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    let mut per_run = provenance(&hash, &label);
    let _ = writeln!(per_run, "seed,method,data_checksum,{}", names.join(","));
    for r in &runs {
        let vals: Vec<String> = names
            .iter()
            .map(|n| r.output.metric(n).map(|v| format!("{v:?}")).unwrap_or_default())
            .collect();
        let _ = writeln!(
            per_run,
            "{},{},{},{}",
            r.seed,
            r.method.name(),
            r.data_checksum,
            vals.join(",")
        );
    }
    write(&dir.join("runs.csv"), &per_run)?;

    let mut table = provenance(&hash, &label);
    let header: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    let _ = writeln!(table, "metric,{}", header.join(","));
    for n in &names {
        let stats: Vec<Option<(f64, f64)>> = methods
            .iter()
            .map(|&m| {
                let v: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.method == m)
                    .filter_map(|r| r.output.metric(n))
                    .collect();
                (!v.is_empty()).then(|| mean_std(&v))
            })
            .collect();
        let cell = |f: fn((f64, f64)) -> f64| -> String {
            stats
                .iter()
                .map(|s| s.map(|s| format!("{:?}", f(s))).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(table, "{n}_mean,{}", cell(|s| s.0));
        let _ = writeln!(table, "{n}_std,{}", cell(|s| s.1));
    }
    write(&dir.join("comparison.csv"), &table)?;
    Ok(runs)
}

pub fn cmd_compare(a: &CompareArgs) -> Result<PathBuf> {
    let cfg = load_config(a.common.config.as_deref(), &a.common.set)?;
    let methods = a
        .methods
        .iter()
        .map(|s| {
            Method::parse(s).ok_or_else(|| {
                Error::Config(vec![format!(
                    "unknown method `{s}`; valid: vanilla, ps, l2a_ec, l2a_nc"
                )])
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = fresh_dir(&output_root(a.common.out.as_deref(), &cfg), "compare")?;
    compare(&cfg, &methods, &a.seeds, &dir)?;
    Ok(dir.join("comparison.csv"))
}

fn checkpoint_dir(run: &Path) -> PathBuf {
    if run.join(crate::nn::checkpoint::BIN_NAME).exists() {
        run.to_path_buf()
    } else {
        run.join(CHECKPOINT_DIR)
    }
}

/// Input width the checkpoint's embedder expects.
fn checkpoint_input_dim(ck: &Checkpoint) -> Result<usize> {
    let first = ck
        .get("param.embed.trunk0.weight")
        .or_else(|| ck.get("param.embed.head.weight"))
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no embedder".into()))?;
    Ok(first.cols())
}

/// Runs `analyses` on a finished run and returns the written files.
pub fn analyze(run: &Path, analyses: &[String], data: Option<(&Path, &Path)>, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(bad) = analyses.iter().find(|a| !ANALYSES.contains(&a.as_str())) {
        return Err(Error::Config(vec![format!(
            "unknown analysis `{bad}`; valid: {}",
            ANALYSES.join(", ")
        )]));
    }
    let ck = Checkpoint::load(&checkpoint_dir(run))?;
    let cfg = ExperimentConfig::from_raw(&RawConfig::parse(&ck.config_echo, "checkpoint manifest")?)?;
    let (train, test): (Dataset, Dataset) = match data {
        Some((tr, te)) => (load_feature_file(tr)?, load_feature_file(te)?),
        None => load_data(&cfg)?,
    };
    let want = checkpoint_input_dim(&ck)?;
    for d in [&train, &test] {
        if d.dim() != want {
            return Err(Error::dim("analyze", want, d.dim()));
        }
    }
    let mut state = from_checkpoint(&cfg, &train, &ck)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let head = provenance(&cfg.hash(), &cfg.seed.to_string());
    let mut files = Vec::new();
    for a in analyses {
        let mut csv = head.clone();
        match a.as_str() {
            "recall" => {
                csv.push_str("k,recall\n");
                for (k, r) in recall(&state, &test, &[1, 2, 4, 8])? {
                    let _ = writeln!(csv, "{k},{r:?}");
                }
            }
            "kl" => {
                let kl = kl_report(&mut state, &train, &test)?;
                csv.push_str("source,target,kl\n");
                let _ = writeln!(csv, "train,test,{:?}", kl.train_to_test);
                if let Some(v) = kl.novel_to_test {
                    let _ = writeln!(csv, "novel,test,{v:?}");
                }
            }
            "pca" => csv.push_str(&pca_dump(&mut state, &test)?),
            _ => {
                csv.push_str("metric,value\n");
                if let Some((ps, pp)) = synthetic_alignment(&mut state, &train)? {
                    let _ = writeln!(csv, "proxy_sample_cos_mean,{:?}", ps.mean);
                    let _ = writeln!(csv, "proxy_sample_cos_min,{:?}", ps.min);
                    if let Some(pp) = pp {
                        let _ = writeln!(csv, "proxy_proxy_cos_mean,{:?}", pp.mean);
                        let _ = writeln!(csv, "proxy_proxy_cos_max,{:?}", pp.max);
                    }
                }
            }
        }
        let path = out.join(format!("{a}.csv"));
        write(&path, &csv)?;
        files.push(path);
    }
    Ok(files)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let out = a.out.clone().unwrap_or_else(|| a.run.join("analysis"));
    let data = a.train.as_deref().zip(a.test.as_deref());
    analyze(&a.run, &a.analyses, data, &out)
}
