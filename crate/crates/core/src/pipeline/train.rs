//! Training state and the three stages: embedder pretraining, generator
//! pretraining with `f` frozen, and joint training.
//!
//! Every step draws from its own rng stream keyed by `(seed, stage, step)`,
//! so skipping a stage or resuming from a checkpoint never shifts the random
//! numbers seen by later steps.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{j_met_var, union_vars, ProxyBank, ProxySet, UnionMode};
use crate::nn::{AdamW, AdamWConfig, Graph, Mode, ParamStore, Tensor, Var};
use crate::ot::energy_distance_var;
use crate::synthesis::{ps_batch_var, ps_plan, sample_noise, ConditionalGenerator, PsParams};

use super::config::{ExperimentConfig, Method};
use super::model::Embedder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    PretrainF,
    PretrainG,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PretrainF, Stage::PretrainG, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainF => "pretrain_f",
            Stage::PretrainG => "pretrain_g",
            Stage::Joint => "joint",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One logged optimization step. `j_div` is `None` when the divergence term
/// was not evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub j_met: f64,
    pub j_div: Option<f64>,
    pub total: f64,
}

/// Rng for `(seed, stage, step)`; stream 0 is reserved for initialization.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.index() as u64 + 1) << 48) | step as u64);
    rng
}

/// Forward graph of one joint step, exposed for gradient instrumentation.
pub struct JointGraph {
    pub graph: Graph,
    pub j_met: Var,
    pub j_div: Option<Var>,
    pub total: Var,
    pub x_real: Var,
    pub x_synthetic: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub bank: ProxyBank,
    pub generator: Option<ConditionalGenerator>,
    pub opt_f: AdamW,
    pub opt_p: AdamW,
    pub opt_g: Option<AdamW>,
    pub opt_pn: Option<AdamW>,
    /// Completed steps per stage.
    pub completed: [usize; 3],
    pub log: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, input_dim: usize) -> Result<Self> {
        Self::with_real_classes(config, input_dim, config.real_classes())
    }

    /// State for a training set with `real_classes` classes, which may differ
    /// from the config's dataset spec (fixed-budget class sweeps).
    pub fn with_real_classes(config: &ExperimentConfig, input_dim: usize, real_classes: usize) -> Result<Self> {
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&mut store, input_dim, &cfg.trunk_hidden, cfg.embedding_dim, &mut rng)?;
        let c = real_classes;
        let bank = ProxyBank::new(&mut store, c, cfg.novel_classes, cfg.embedding_dim, &mut rng)?;
        let generator = match cfg.method {
            Method::L2aNc if cfg.novel_classes > 0 => Some(ConditionalGenerator::new(
                &mut store,
                cfg.novel_classes,
                c,
                cfg.generator_hidden,
                cfg.embedding_dim,
                &mut rng,
            )?),
            Method::L2aEc => Some(ConditionalGenerator::new(
                &mut store,
                c,
                0,
                cfg.generator_hidden,
                cfg.embedding_dim,
                &mut rng,
            )?),
            _ => None,
        };
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let opt_f = AdamW::new(adam, embedder.params(), &store);
        let opt_p = AdamW::new(adam, bank.real_params(), &store);
        let opt_g = generator.as_ref().map(|g| AdamW::new(adam, g.params(), &store));
        let opt_pn = bank.novel.map(|_| AdamW::new(adam, bank.novel_params(), &store));
        Ok(TrainState {
            config: cfg,
            store,
            embedder,
            bank,
            generator,
            opt_f,
            opt_p,
            opt_g,
            opt_pn,
            completed: [0; 3],
            log: Vec::new(),
        })
    }

    /// Steps configured for `stage` under this method.
    pub fn planned_steps(&self, stage: Stage) -> usize {
        let s = &self.config.steps;
        match stage {
            Stage::PretrainF => s.pretrain_f,
            Stage::PretrainG if self.generator.is_some() => s.pretrain_g,
            Stage::PretrainG => 0,
            Stage::Joint => s.joint,
        }
    }

    pub fn is_finished(&self) -> bool {
        Stage::ALL
            .iter()
            .all(|&s| self.completed[s.index()] >= self.planned_steps(s))
    }

    /// Runs up to `budget` further steps (all remaining when `None`).
    pub fn advance(&mut self, train: &Dataset, budget: Option<usize>) -> Result<usize> {
        let mut done = 0;
        for stage in Stage::ALL {
            while self.completed[stage.index()] < self.planned_steps(stage) {
                if budget.is_some_and(|b| done >= b) {
                    return Ok(done);
                }
                let step = self.completed[stage.index()];
                let rec = match stage {
                    Stage::PretrainF => self.pretrain_f_step(train, step),
                    Stage::PretrainG => self.pretrain_g_step(train, step),
                    Stage::Joint => self.joint_step(train, step),
                }
                .map_err(|e| match e {
                    Error::Degenerate { op, detail } => Error::Divergence {
                        stage: stage.name().into(),
                        step,
                        detail: format!("{op}: {detail}"),
                    },
                    other => other,
                })?;
                log::trace!("{} {step}: total {:.6}", stage.name(), rec.total);
                if let Some((_, name, _)) = self
                    .store
                    .iter()
                    .find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite()))
                {
                    return Err(Error::Divergence {
                        stage: stage.name().into(),
                        step,
                        detail: format!("parameter {name} is not finite after the update"),
                    });
                }
                self.log.push(rec);
                self.completed[stage.index()] += 1;
                done += 1;
            }
        }
        Ok(done)
    }

    fn set_lr(&mut self, f: f64, g: f64) {
        let scale = self.config.lr.proxy_scale;
        self.opt_f.config.lr = f;
        self.opt_p.config.lr = f * scale;
        if let Some(o) = &mut self.opt_g {
            o.config.lr = g;
        }
        if let Some(o) = &mut self.opt_pn {
            o.config.lr = g * scale;
        }
    }

    fn real_batch(&self, train: &Dataset, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
        let b = self.config.batch_real.min(train.len());
        let idx = sample(rng, train.len(), b).into_vec();
        let sub = train.subset(&idx)?;
        Ok((sub.inputs, sub.labels))
    }

    fn check(stage: Stage, step: usize, name: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                stage: stage.name().into(),
                step,
                detail: format!("{name} = {v}"),
            })
        }
    }

    fn record(&self, g: &Graph, stage: Stage, step: usize, jm: Var, jd: Option<Var>, total: Var) -> Result<StepRecord> {
        let rec = StepRecord {
            stage,
            step,
            j_met: g.value(jm).item(),
            j_div: jd.map(|v| g.value(v).item()),
            total: g.value(total).item(),
        };
        Self::check(stage, step, "j_met", rec.j_met)?;
        if let Some(d) = rec.j_div {
            Self::check(stage, step, "j_div", d)?;
        }
        Ok(rec)
    }

    /// `J_met(f(X), Y, P)`, updating `θ_f` and `P`.
    pub fn pretrain_f_step(&mut self, train: &Dataset, step: usize) -> Result<StepRecord> {
        let mut rng = step_rng(self.config.seed, Stage::PretrainF, step);
        let (inputs, labels) = self.real_batch(train, &mut rng)?;
        let mut g = Graph::new();
        let xin = g.constant(inputs);
        let x = self.embedder.forward(&mut g, &self.store, xin)?;
        let (p, _) = self.bank.select(&mut g, &self.store, ProxySet::Real)?;
        let jm = j_met_var(&mut g, x, &labels, p, &self.config.loss)?;
        let rec = self.record(&g, Stage::PretrainF, step, jm, None, jm)?;
        self.store.zero_grad();
        g.backward_into(jm, &mut self.store)?;
        self.set_lr(self.config.lr.pretrain_f, self.config.lr.pretrain_g);
        self.opt_f.step(&mut self.store)?;
        self.opt_p.step(&mut self.store)?;
        Ok(rec)
    }

    fn synthetic_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let classes = self.generator.as_ref().map_or(0, |g| g.classes);
        (0..self.config.batch_synthetic)
            .map(|_| rng.gen_range(0..classes))
            .collect()
    }

    /// Generator pretraining with `f` frozen: real embeddings enter as
    /// constants, `J_met` sees only synthetic vectors and their proxies.
    pub fn pretrain_g_step(&mut self, train: &Dataset, step: usize) -> Result<StepRecord> {
        let gen = self
            .generator
            .clone()
            .ok_or_else(|| Error::Contract("generator pretraining without a generator".into()))?;
        let mut rng = step_rng(self.config.seed, Stage::PretrainG, step);
        let (inputs, _) = self.real_batch(train, &mut rng)?;
        let real = self.embedder.embed(&self.store, &inputs)?;
        let local = self.synthetic_labels(&mut rng);
        let noise = sample_noise(&mut rng, local.len())?;

        let mut g = Graph::new();
        let z = g.constant(noise);
        let xt = gen.forward(&mut g, &mut self.store, &local, z, Mode::Train)?;
        let set = if self.config.method == Method::L2aNc {
            ProxySet::Novel
        } else {
            ProxySet::Real
        };
        let (p, _) = self.bank.select(&mut g, &self.store, set)?;
        let jm = j_met_var(&mut g, xt, &local, p, &self.config.loss)?;
        let (jd, total) = self.divergence(&mut g, real, xt, jm, &mut rng)?;
        let rec = self.record(&g, Stage::PretrainG, step, jm, jd, total)?;
        self.store.zero_grad();
        g.backward_into(total, &mut self.store)?;
        self.set_lr(self.config.lr.pretrain_f, self.config.lr.pretrain_g);
        if let Some(o) = &mut self.opt_g {
            o.step(&mut self.store)?;
        }
        if self.config.method == Method::L2aNc {
            if let Some(o) = &mut self.opt_pn {
                o.step(&mut self.store)?;
            }
        }
        Ok(rec)
    }

    fn divergence<X: Into<RealInput>>(
        &self,
        g: &mut Graph,
        real: X,
        xt: Var,
        jm: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Option<Var>, Var)> {
        let lambda = self.config.lambda_div;
        if lambda == 0.0 {
            return Ok((None, jm));
        }
        let x = match real.into() {
            RealInput::Values(t) => g.constant(t),
            RealInput::Node(v) => v,
        };
        let (jd, _) = energy_distance_var(g, x, xt, &self.config.sinkhorn, rng)?;
        let weighted = g.scale(jd, lambda);
        let total = g.add(jm, weighted)?;
        Ok((Some(jd), total))
    }

    /// Records the joint objective for `step` without updating anything
    /// (batch-norm running statistics of the generator aside).
    pub fn joint_graph(&mut self, train: &Dataset, step: usize) -> Result<JointGraph> {
        let mut rng = step_rng(self.config.seed, Stage::Joint, step);
        let (inputs, labels) = self.real_batch(train, &mut rng)?;
        let mut g = Graph::new();
        let xin = g.constant(inputs);
        let x = self.embedder.forward(&mut g, &self.store, xin)?;
        let c = self.bank.real_classes;
        let loss = self.config.loss;

        let out = match (self.config.method, self.generator.clone()) {
            (Method::Ps, _) => {
                let (p_raw, _) = self.bank.select(&mut g, &self.store, ProxySet::Real)?;
                let p_unit = g.l2_normalize_rows(p_raw)?;
                let ps = PsParams {
                    alpha: self.config.ps_alpha,
                    renormalize: true,
                };
                let (pairs, lambdas) = ps_plan(
                    g.value(x),
                    &labels,
                    g.value(p_unit),
                    self.config.batch_synthetic,
                    &ps,
                    &mut rng,
                )?;
                let (xt, pt) = ps_batch_var(&mut g, x, &labels, p_unit, &pairs, &lambdas)?;
                let syn: Vec<usize> = (c..c + pairs.len()).collect();
                let (xu, yu) = union_vars(&mut g, (x, &labels), Some((xt, &syn)), UnionMode::Disjoint)?;
                let proxies = g.concat_rows(&[p_raw, pt])?;
                let jm = j_met_var(&mut g, xu, &yu, proxies, &loss)?;
                JointGraph {
                    graph: g,
                    j_met: jm,
                    j_div: None,
                    total: jm,
                    x_real: x,
                    x_synthetic: Some(xt),
                }
            }
            (Method::L2aNc | Method::L2aEc, Some(gen)) => {
                let local = self.synthetic_labels(&mut rng);
                let noise = sample_noise(&mut rng, local.len())?;
                let z = g.constant(noise);
                let xt = gen.forward(&mut g, &mut self.store, &local, z, Mode::Train)?;
                let (mode, set) = if self.config.method == Method::L2aNc {
                    (UnionMode::Disjoint, ProxySet::All)
                } else {
                    (UnionMode::ExistingClasses, ProxySet::Real)
                };
                let syn: Vec<usize> = local.iter().map(|l| l + gen.label_offset).collect();
                let (xu, yu) = union_vars(&mut g, (x, &labels), Some((xt, &syn)), mode)?;
                let (p, _) = self.bank.select(&mut g, &self.store, set)?;
                let jm = j_met_var(&mut g, xu, &yu, p, &loss)?;
                let (jd, total) = self.divergence(&mut g, x, xt, jm, &mut rng)?;
                JointGraph {
                    graph: g,
                    j_met: jm,
                    j_div: jd,
                    total,
                    x_real: x,
                    x_synthetic: Some(xt),
                }
            }
            _ => {
                let (p, _) = self.bank.select(&mut g, &self.store, ProxySet::All)?;
                let jm = j_met_var(&mut g, x, &labels, p, &loss)?;
                JointGraph {
                    graph: g,
                    j_met: jm,
                    j_div: None,
                    total: jm,
                    x_real: x,
                    x_synthetic: None,
                }
            }
        };
        Ok(out)
    }

    /// `J_met(f(X) ∪ X̃, Y ∪ Ỹ, P ∪ P̃) + λ·J_div(sg(f(X)), X̃)`, updating
    /// every parameter group the method owns.
    pub fn joint_step(&mut self, train: &Dataset, step: usize) -> Result<StepRecord> {
        let jg = self.joint_graph(train, step)?;
        let rec = self.record(&jg.graph, Stage::Joint, step, jg.j_met, jg.j_div, jg.total)?;
        self.store.zero_grad();
        jg.graph.backward_into(jg.total, &mut self.store)?;
        self.set_lr(self.config.lr.joint_f, self.config.lr.joint_g);
        self.opt_f.step(&mut self.store)?;
        self.opt_p.step(&mut self.store)?;
        if let Some(o) = &mut self.opt_g {
            o.step(&mut self.store)?;
        }
        if let Some(o) = &mut self.opt_pn {
            o.step(&mut self.store)?;
        }
        Ok(rec)
    }
}

enum RealInput {
    Values(Tensor),
    Node(Var),
}

impl From<Tensor> for RealInput {
    fn from(t: Tensor) -> Self {
        RealInput::Values(t)
    }
}

impl From<Var> for RealInput {
    fn from(v: Var) -> Self {
        RealInput::Node(v)
    }
}
