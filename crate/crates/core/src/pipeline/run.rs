use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_feature_file, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Checkpoint, Tensor};

use super::analysis::{kl_report, recall, synthetic_alignment};
use super::config::{ExperimentConfig, RawConfig};
use super::train::{Stage, StepRecord, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Train and test splits for a config: feature files when both are given,
/// the synthetic generator otherwise.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match (&cfg.train_file, &cfg.test_file) {
        (Some(tr), Some(te)) => {
            let train = load_feature_file(tr)?;
            let test = load_feature_file(te)?;
            if train.classes != cfg.real_classes() {
                return Err(Error::Config(vec![format!(
                    "data.train_classes = {} but {} holds {} classes",
                    cfg.real_classes(),
                    tr.display(),
                    train.classes
                )]));
            }
            if train.dim() != test.dim() {
                return Err(Error::dim("load_data", train.dim(), test.dim()));
            }
            Ok((train, test))
        }
        _ => make_synthetic(&cfg.data),
    }
}

/// Parameter counts per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub trunk: usize,
    pub head: usize,
    pub real_proxies: usize,
    pub generator: usize,
    pub novel_proxies: usize,
}

impl ParamCounts {
    pub fn base(&self) -> usize {
        self.trunk + self.head + self.real_proxies
    }

    pub fn overhead(&self) -> usize {
        self.generator + self.novel_proxies
    }

    /// Generator and novel proxies relative to the trunk, in percent.
    pub fn overhead_vs_trunk_pct(&self) -> f64 {
        100.0 * self.overhead() as f64 / self.trunk.max(1) as f64
    }

    pub fn total(&self) -> usize {
        self.base() + self.overhead()
    }
}

pub fn count_parameters(state: &TrainState) -> ParamCounts {
    ParamCounts {
        trunk: state.embedder.trunk_parameter_count(),
        head: state.embedder.head_parameter_count(),
        real_proxies: state.bank.real_classes * state.bank.dim,
        generator: state.generator.as_ref().map_or(0, |g| g.parameter_count()),
        novel_proxies: state.bank.novel_classes * state.bank.dim,
    }
}

/// Held-out retrieval, KL alignment to the test classes and, for methods
/// with synthetic classes, their alignment statistics.
pub fn evaluate(state: &mut TrainState, train: &Dataset, test: &Dataset) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = recall(state, test, &state.config.eval_ks.clone())?
        .into_iter()
        .map(|(k, r)| (format!("recall@{k}"), r))
        .collect();
    if let Some((ps, pp)) = synthetic_alignment(state, train)? {
        out.push(("proxy_sample_cos_mean".into(), ps.mean));
        out.push(("proxy_sample_cos_min".into(), ps.min));
        if let Some(pp) = pp {
            out.push(("proxy_proxy_cos_mean".into(), pp.mean));
            out.push(("proxy_proxy_cos_max".into(), pp.max));
        }
    }
    let kl = kl_report(state, train, test)?;
    out.push(("kl_train_test".into(), kl.train_to_test));
    if let Some(v) = kl.novel_to_test {
        out.push(("kl_novel_test".into(), v));
    }
    Ok(out)
}

fn provenance(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub fn metrics_csv(cfg: &ExperimentConfig, log: &[StepRecord]) -> String {
    let mut s = provenance(cfg);
    s.push_str("step,stage,j_met,j_div,total\n");
    for r in log {
        let jd = r.j_div.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:?},{},{:?}", r.step, r.stage.name(), r.j_met, jd, r.total);
    }
    s
}

pub fn eval_csv(cfg: &ExperimentConfig, metrics: &[(String, f64)]) -> String {
    let mut s = provenance(cfg);
    s.push_str("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(s, "{k},{v:?}");
    }
    s
}

fn opt_entries(name: &str, opt: &AdamW, out: &mut Vec<(String, Tensor)>) -> Result<()> {
    out.push((format!("opt.{name}.step"), Tensor::scalar(opt.step_count() as f64)));
    let (m, v) = opt.moments();
    for (i, (a, b)) in m.iter().zip(v).enumerate() {
        out.push((format!("opt.{name}.m{i}"), Tensor::vector(a.clone())?));
        out.push((format!("opt.{name}.v{i}"), Tensor::vector(b.clone())?));
    }
    Ok(())
}

fn restore_opt(name: &str, opt: &mut AdamW, ck: &Checkpoint) -> Result<()> {
    let get = |k: String| {
        ck.get(&k)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {k}")))
    };
    let step = get(format!("opt.{name}.step"))?.item() as u64;
    let n = opt.params().len();
    let m = (0..n)
        .map(|i| get(format!("opt.{name}.m{i}")).map(|t| t.data().to_vec()))
        .collect::<Result<_>>()?;
    let v = (0..n)
        .map(|i| get(format!("opt.{name}.v{i}")).map(|t| t.data().to_vec()))
        .collect::<Result<_>>()?;
    opt.restore(step, m, v)
}

fn stage_code(s: Stage) -> f64 {
    s.index() as f64
}

/// Everything needed to continue training: parameters, buffers, optimizer
/// moments, per-stage progress and the metric log.
pub fn to_checkpoint(state: &TrainState) -> Result<Checkpoint> {
    let mut entries: Vec<(String, Tensor)> = state
        .store
        .iter()
        .map(|(_, name, t)| {
            let mut t = t.clone();
            t.zero_grad();
            (format!("param.{name}"), t)
        })
        .collect();
    opt_entries("f", &state.opt_f, &mut entries)?;
    opt_entries("p", &state.opt_p, &mut entries)?;
    if let Some(o) = &state.opt_g {
        opt_entries("g", o, &mut entries)?;
    }
    if let Some(o) = &state.opt_pn {
        opt_entries("pn", o, &mut entries)?;
    }
    entries.push((
        "progress".into(),
        Tensor::vector(state.completed.iter().map(|&c| c as f64).collect())?,
    ));
    if !state.log.is_empty() {
        let rows: Vec<f64> = state
            .log
            .iter()
            .flat_map(|r| {
                [
                    stage_code(r.stage),
                    r.step as f64,
                    r.j_met,
                    r.j_div.unwrap_or(f64::NAN),
                    r.total,
                ]
            })
            .collect();
        entries.push(("log".into(), Tensor::matrix(state.log.len(), 5, rows)?));
    }
    Ok(Checkpoint {
        entries,
        config_hash: state.config.hash(),
        config_echo: state.config.echo(),
    })
}

/// Rebuilds a state for `cfg` and loads `ck` into it. Shapes must match.
pub fn from_checkpoint(cfg: &ExperimentConfig, train: &Dataset, ck: &Checkpoint) -> Result<TrainState> {
    let mut state = TrainState::with_real_classes(cfg, train.dim(), train.classes)?;
    let ids: Vec<_> = state.store.ids().collect();
    for id in ids {
        let key = format!("param.{}", state.store.name(id));
        let t = ck
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
        let dst = state.store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{key}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    restore_opt("f", &mut state.opt_f, ck)?;
    restore_opt("p", &mut state.opt_p, ck)?;
    if let Some(o) = &mut state.opt_g {
        restore_opt("g", o, ck)?;
    }
    if let Some(o) = &mut state.opt_pn {
        restore_opt("pn", o, ck)?;
    }
    let progress = ck
        .get("progress")
        .ok_or_else(|| Error::Checkpoint("missing progress".into()))?;
    if progress.numel() != 3 {
        return Err(Error::Checkpoint("progress must hold three counters".into()));
    }
    for (dst, &v) in state.completed.iter_mut().zip(progress.data()) {
        *dst = v as usize;
    }
    if let Some(log) = ck.get("log") {
        for i in 0..log.rows() {
            let r = log.row(i);
            state.log.push(StepRecord {
                stage: Stage::ALL[r[0] as usize],
                step: r[1] as usize,
                j_met: r[2],
                j_div: (!r[3].is_nan()).then_some(r[3]),
                total: r[4],
            });
        }
    }
    Ok(state)
}

/// Files written for one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub eval: Vec<(String, f64)>,
    pub log: Vec<StepRecord>,
    pub params: ParamCounts,
}

impl RunOutput {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.eval.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluates `state` and writes metrics, evaluation, config echo and a
/// checkpoint into `dir`.
pub fn finish_run(state: &mut TrainState, train: &Dataset, test: &Dataset, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let eval = evaluate(state, train, test)?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&state.config, &state.log))?;
    write(&dir.join(EVAL_FILE), &eval_csv(&state.config, &eval))?;
    write(&dir.join(CONFIG_FILE), &state.config.echo())?;
    to_checkpoint(state)?.save(&dir.join(CHECKPOINT_DIR))?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        eval,
        log: state.log.clone(),
        params: count_parameters(state),
    })
}

/// Trains a fresh model for `cfg` and writes its outputs into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let (train, test) = load_data(cfg)?;
    run_on_data(cfg, &train, &test, dir)
}

/// Trains on the given splits; the real class count comes from `train`.
pub fn run_on_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, dir: &Path) -> Result<RunOutput> {
    let mut state = TrainState::with_real_classes(cfg, train.dim(), train.classes)?;
    state.advance(train, None)?;
    finish_run(&mut state, train, test, dir)
}

/// Continues the run stored in `dir` (optionally with overrides, e.g. more
/// steps) and rewrites its outputs.
pub fn resume_experiment(dir: &Path, overrides: &[String]) -> Result<RunOutput> {
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_DIR))?;
    let mut raw = RawConfig::parse(&ck.config_echo, "checkpoint manifest")?;
    for o in overrides {
        raw.set(o)?;
    }
    let cfg = ExperimentConfig::from_raw(&raw)?;
    let (train, test) = load_data(&cfg)?;
    let mut state = from_checkpoint(&cfg, &train, &ck)?;
    state.advance(&train, None)?;
    finish_run(&mut state, &train, &test, dir)
}
