//! Experiment configuration: a line-oriented `key = value` file with dotted
//! keys, `#` comments and `--set key=value` overrides in the same namespace.
//!
//! A handful of keys accept `auto`, resolved from other fields:
//! `novel.classes` (from `novel.ratio`), `batch.synthetic` (equal to
//! `batch.real`), `model.generator_hidden` (four times the embedding dim),
//! `loss.temperature` (per loss kind). The echo always shows resolved values,
//! so echo → parse is a fixed point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossParams};
use crate::ot::SinkhornParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vanilla,
    Ps,
    L2aEc,
    L2aNc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Ps, Method::L2aEc, Method::L2aNc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ps => "ps",
            Method::L2aEc => "l2a_ec",
            Method::L2aNc => "l2a_nc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the method trains a conditional generator.
    pub fn uses_generator(self) -> bool {
        matches!(self, Method::L2aEc | Method::L2aNc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub pretrain_f: f64,
    pub pretrain_g: f64,
    pub joint_f: f64,
    pub joint_g: f64,
    /// Multiplier applied to the learning rate of proxy banks.
    pub proxy_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCounts {
    pub pretrain_f: usize,
    pub pretrain_g: usize,
    pub joint: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub data: SyntheticSpec,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub embedding_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub generator_hidden: usize,
    pub loss: LossParams,
    pub novel_ratio: f64,
    /// Novel classes `C̃` (generator classes for l2a_nc; zero otherwise).
    pub novel_classes: usize,
    pub ps_alpha: f64,
    pub lambda_div: f64,
    pub sinkhorn: SinkhornParams,
    pub batch_real: usize,
    pub batch_synthetic: usize,
    pub lr: LearningRates,
    pub weight_decay: f64,
    pub steps: StepCounts,
    pub eval_ks: Vec<usize>,
    pub output_dir: PathBuf,
}

/// Every key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "method",
    "data.total_classes",
    "data.train_classes",
    "data.samples_per_class",
    "data.input_dim",
    "data.signal_dim",
    "data.cluster_spread",
    "data.min_angle_deg",
    "data.seed",
    "data.train_file",
    "data.test_file",
    "model.embedding_dim",
    "model.trunk_hidden",
    "model.generator_hidden",
    "loss.kind",
    "loss.alpha",
    "loss.delta",
    "loss.temperature",
    "novel.ratio",
    "novel.classes",
    "ps.alpha",
    "lambda_div",
    "ot.epsilon",
    "ot.max_iterations",
    "ot.convergence_tol",
    "batch.real",
    "batch.synthetic",
    "lr.pretrain_f",
    "lr.pretrain_g",
    "lr.joint_f",
    "lr.joint_g",
    "lr.proxy_scale",
    "optim.weight_decay",
    "steps.pretrain_f",
    "steps.pretrain_g",
    "steps.joint",
    "eval.ks",
    "output.dir",
];

/// Raw `key → value` pairs before typing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line == "[config]" {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            raw.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not key=value")]))?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

struct Reader<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn value<T: FromStr>(&mut self, key: &str, default: T) -> T {
        match self.raw.get(key) {
            None => default,
            Some(s) => s.parse().unwrap_or_else(|_| {
                self.errors.push(format!("{key}: cannot parse `{s}`"));
                default
            }),
        }
    }

    /// `None` when absent or `auto`.
    fn auto<T: FromStr>(&mut self, key: &str) -> Option<T> {
        match self.raw.get(key) {
            None | Some("auto") => None,
            Some(s) => match s.parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    self.errors.push(format!("{key}: cannot parse `{s}`"));
                    None
                }
            },
        }
    }

    fn list(&mut self, key: &str, default: &[usize]) -> Vec<usize> {
        match self.raw.get(key) {
            None => default.to_vec(),
            Some("") => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .unwrap_or_else(|_| {
                    self.errors
                        .push(format!("{key}: expected comma-separated integers, got `{s}`"));
                    default.to_vec()
                }),
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        match self.raw.get(key) {
            None | Some("") => None,
            Some(s) => Some(PathBuf::from(s)),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader {
            raw,
            errors: Vec::new(),
        };
        for k in raw.entries.keys() {
            if !KEYS.contains(&k.as_str()) {
                r.errors.push(format!("unknown key `{k}`"));
            }
        }
        let method_s: String = r.value("method", "l2a_nc".to_string());
        let method = Method::parse(&method_s).unwrap_or_else(|| {
            r.errors.push(format!(
                "method: `{method_s}` is not one of vanilla, ps, l2a_ec, l2a_nc"
            ));
            Method::L2aNc
        });
        let seed = r.value("seed", 0u64);
        let dd = SyntheticSpec::default();
        let data = SyntheticSpec {
            total_classes: r.value("data.total_classes", dd.total_classes),
            train_classes: r.value("data.train_classes", dd.train_classes),
            samples_per_class: r.value("data.samples_per_class", dd.samples_per_class),
            input_dim: r.value("data.input_dim", dd.input_dim),
            signal_dim: r.value("data.signal_dim", dd.signal_dim),
            cluster_spread: r.value("data.cluster_spread", dd.cluster_spread),
            min_angle_deg: r.value("data.min_angle_deg", dd.min_angle_deg),
            seed: r.value("data.seed", dd.seed),
        };
        let train_file = r.path("data.train_file");
        let test_file = r.path("data.test_file");
        let embedding_dim = r.value("model.embedding_dim", 32usize);
        let trunk_hidden = r.list("model.trunk_hidden", &[128]);
        let generator_hidden = r.auto("model.generator_hidden").unwrap_or(4 * embedding_dim);

        let kind_s: String = r.value("loss.kind", "proxy_anchor".to_string());
        let kind = LossKind::parse(&kind_s).unwrap_or_else(|| {
            r.errors.push(format!(
                "loss.kind: `{kind_s}` is not one of proxy_anchor, proxy_nca, norm_softmax"
            ));
            LossKind::ProxyAnchor
        });
        let base = LossParams::for_kind(kind);
        let loss = LossParams {
            kind,
            alpha: r.value("loss.alpha", base.alpha),
            delta: r.value("loss.delta", base.delta),
            temperature: r.auto("loss.temperature").unwrap_or(base.temperature),
        };

        let novel_ratio = r.value("novel.ratio", 2.0f64);
        let explicit_novel: Option<usize> = r.auto("novel.classes");
        let real_classes = data.train_classes;
        let novel_classes = match method {
            Method::L2aNc => explicit_novel.unwrap_or((novel_ratio * real_classes as f64).round() as usize),
            _ => 0,
        };
        let sd = SinkhornParams::default();
        let sinkhorn = SinkhornParams {
            epsilon: r.value("ot.epsilon", sd.epsilon),
            max_iterations: r.value("ot.max_iterations", sd.max_iterations),
            convergence_tol: r.value("ot.convergence_tol", sd.convergence_tol),
        };
        let batch_real = r.value("batch.real", 64usize);
        let batch_synthetic = r.auto("batch.synthetic").unwrap_or(batch_real);
        let lr = LearningRates {
            pretrain_f: r.value("lr.pretrain_f", 1e-4),
            pretrain_g: r.value("lr.pretrain_g", 1e-3),
            joint_f: r.value("lr.joint_f", 5e-5),
            joint_g: r.value("lr.joint_g", 1e-4),
            proxy_scale: r.value("lr.proxy_scale", 100.0),
        };
        let cfg = ExperimentConfig {
            seed,
            method,
            data,
            train_file,
            test_file,
            embedding_dim,
            trunk_hidden,
            generator_hidden,
            loss,
            novel_ratio,
            novel_classes,
            ps_alpha: r.value("ps.alpha", 2.0),
            lambda_div: r.value("lambda_div", 1.0),
            sinkhorn,
            batch_real,
            batch_synthetic,
            lr,
            weight_decay: r.value("optim.weight_decay", 1e-4),
            steps: StepCounts {
                pretrain_f: r.value("steps.pretrain_f", 1000usize),
                pretrain_g: r.value("steps.pretrain_g", 500usize),
                joint: r.value("steps.joint", 1000usize),
            },
            eval_ks: r.list("eval.ks", &[1, 2, 4, 8]),
            output_dir: r.path("output.dir").unwrap_or_else(|| PathBuf::from("runs")),
        };
        let mut errors = r.errors;
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text, "<config>")?)
    }

    /// Field-level validation messages; empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.train_file.is_none() {
            if let Err(e) = self.data.validate() {
                p.push(format!("data: {e}"));
            }
        }
        if self.train_file.is_some() != self.test_file.is_some() {
            p.push("data.train_file and data.test_file must be given together".into());
        }
        if self.embedding_dim == 0 {
            p.push("model.embedding_dim must be positive".into());
        }
        if self.trunk_hidden.contains(&0) {
            p.push("model.trunk_hidden entries must be positive".into());
        }
        if self.method.uses_generator() && self.generator_hidden == 0 {
            p.push("model.generator_hidden must be positive".into());
        }
        if let Err(e) = self.loss.validate() {
            p.push(format!("loss: {e}"));
        }
        if !(self.novel_ratio >= 0.0) {
            p.push("novel.ratio must be nonnegative".into());
        }
        if !(self.lambda_div >= 0.0) {
            p.push(format!("lambda_div must be >= 0, got {}", self.lambda_div));
        }
        if let Err(e) = self.sinkhorn.validate() {
            p.push(format!("ot: {e}"));
        }
        if self.batch_real < 2 {
            p.push("batch.real must be at least 2".into());
        }
        if self.method != Method::Vanilla && self.uses_synthetic() && self.batch_synthetic < 2 {
            p.push("batch.synthetic must be at least 2".into());
        }
        if self.uses_synthetic() && self.lambda_div > 0.0 && self.method.uses_generator()
            && (self.batch_real < 4 || self.batch_synthetic < 4) {
                p.push("energy distance needs batch.real and batch.synthetic of at least 4".into());
            }
        if self.method == Method::Ps && !(self.ps_alpha > 0.0) {
            p.push("ps.alpha must be positive".into());
        }
        for (name, v) in [
            ("lr.pretrain_f", self.lr.pretrain_f),
            ("lr.pretrain_g", self.lr.pretrain_g),
            ("lr.joint_f", self.lr.joint_f),
            ("lr.joint_g", self.lr.joint_g),
            ("lr.proxy_scale", self.lr.proxy_scale),
            ("optim.weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                p.push(format!("{name} must be a finite nonnegative number"));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            p.push("eval.ks must list positive integers".into());
        }
        p
    }

    /// Whether any synthetic embeddings enter training.
    pub fn uses_synthetic(&self) -> bool {
        match self.method {
            Method::Vanilla => false,
            Method::Ps | Method::L2aEc => true,
            Method::L2aNc => self.novel_classes > 0,
        }
    }

    /// Canonical listing of every key with its resolved value.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            self.method.name().into(),
            self.data.total_classes.to_string(),
            self.data.train_classes.to_string(),
            self.data.samples_per_class.to_string(),
            self.data.input_dim.to_string(),
            self.data.signal_dim.to_string(),
            format!("{:?}", self.data.cluster_spread),
            format!("{:?}", self.data.min_angle_deg),
            self.data.seed.to_string(),
            path(&self.train_file),
            path(&self.test_file),
            self.embedding_dim.to_string(),
            join(&self.trunk_hidden),
            self.generator_hidden.to_string(),
            self.loss.kind.name().into(),
            format!("{:?}", self.loss.alpha),
            format!("{:?}", self.loss.delta),
            format!("{:?}", self.loss.temperature),
            format!("{:?}", self.novel_ratio),
            self.novel_classes.to_string(),
            format!("{:?}", self.ps_alpha),
            format!("{:?}", self.lambda_div),
            format!("{:?}", self.sinkhorn.epsilon),
            self.sinkhorn.max_iterations.to_string(),
            format!("{:?}", self.sinkhorn.convergence_tol),
            self.batch_real.to_string(),
            self.batch_synthetic.to_string(),
            format!("{:?}", self.lr.pretrain_f),
            format!("{:?}", self.lr.pretrain_g),
            format!("{:?}", self.lr.joint_f),
            format!("{:?}", self.lr.joint_g),
            format!("{:?}", self.lr.proxy_scale),
            format!("{:?}", self.weight_decay),
            self.steps.pretrain_f.to_string(),
            self.steps.pretrain_g.to_string(),
            self.steps.joint.to_string(),
            join(&self.eval_ks),
            self.output_dir.display().to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the echo, excluding the output
    /// directory (which does not affect results).
    pub fn hash(&self) -> String {
        let echo: String = self
            .echo()
            .lines()
            .filter(|l| !l.starts_with("output.dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(echo.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Applies overrides to the echo of `self` and re-resolves.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::parse(&self.echo(), "<echo>")?;
        for key in [
            "novel.classes",
            "batch.synthetic",
            "model.generator_hidden",
            "loss.temperature",
        ] {
            // re-derive auto fields unless the override sets them
            if !overrides
                .iter()
                .any(|o| o.split('=').next().map(str::trim) == Some(key))
            {
                raw.entries.remove(key);
            }
        }
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }

    /// Real classes seen in training.
    pub fn real_classes(&self) -> usize {
        self.data.train_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.echo().lines().count(), KEYS.len());
    }

    #[test]
    fn novel_ratio_resolves() {
        let c =
            ExperimentConfig::parse("method = l2a_nc\ndata.train_classes = 64\ndata.total_classes = 128\n").unwrap();
        assert_eq!(c.novel_classes, 128);
        assert!(c.echo().contains("novel.classes = 128\n"));
        let v = ExperimentConfig::parse("method = vanilla").unwrap();
        assert_eq!(v.novel_classes, 0);
    }

    #[test]
    fn unknown_and_invalid_keys_are_listed() {
        match ExperimentConfig::parse("bogus = 1\nlambda_div = -1\nbatch.real = x\n") {
            Err(Error::Config(list)) => {
                assert!(list.iter().any(|m| m.contains("bogus")));
                assert!(list.iter().any(|m| m.contains("lambda_div")));
                assert!(list.iter().any(|m| m.contains("batch.real")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_rederive_auto_fields() {
        let c = ExperimentConfig::default();
        let d = c
            .with_overrides(&["batch.real=16".into(), "loss.kind=norm_softmax".into()])
            .unwrap();
        assert_eq!(d.batch_synthetic, 16);
        assert_eq!(d.loss.temperature, 0.05);
        assert_ne!(c.hash(), d.hash());
        assert!(c.with_overrides(&["nope=1".into()]).is_err());
        assert!(c.with_overrides(&["method".into()]).is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = ExperimentConfig::parse("# header\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
        assert!(matches!(
            RawConfig::parse("seed 7", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
