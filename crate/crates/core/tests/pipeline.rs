use novelaug::data::{make_synthetic, Dataset};
use novelaug::losses::EmbeddingBatch;
use novelaug::nn::{Checkpoint, ParamId};
use novelaug::ot::energy_distance;
use novelaug::pipeline::analysis::{embed_dataset, generated_batch};
use novelaug::pipeline::{
    count_parameters, from_checkpoint, run_on_data, to_checkpoint, ExperimentConfig, Stage, TrainState,
};
use novelaug::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(method: &str, extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "data.total_classes=16",
        "data.train_classes=8",
        "data.samples_per_class=10",
        "data.input_dim=16",
        "model.embedding_dim=8",
        "model.trunk_hidden=16",
        "batch.real=16",
        "steps.pretrain_f=20",
        "steps.pretrain_g=10",
        "steps.joint=20",
        "ot.max_iterations=30",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("method={method}"));
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::default().with_overrides(&o).unwrap()
}

fn data(cfg: &ExperimentConfig) -> (Dataset, Dataset) {
    make_synthetic(&cfg.data).unwrap()
}

fn trained(cfg: &ExperimentConfig, train: &Dataset) -> TrainState {
    let mut st = TrainState::new(cfg, train.dim()).unwrap();
    st.advance(train, None).unwrap();
    st
}

fn snapshot(st: &TrainState) -> Vec<(String, Vec<u64>)> {
    st.store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn generator_ids(st: &TrainState) -> Vec<ParamId> {
    st.generator.as_ref().unwrap().params()
}

#[test]
fn nc_without_novel_classes_or_divergence_is_vanilla() {
    let extra = ["steps.pretrain_f=50", "steps.joint=50"];
    let (train, _) = data(&tiny("vanilla", &extra));
    let v = trained(&tiny("vanilla", &extra), &train);
    let nc = trained(
        &tiny("l2a_nc", &[extra[0], extra[1], "lambda_div=0", "novel.classes=0"]),
        &train,
    );
    assert_eq!(v.log.len(), 100);
    assert_eq!(snapshot(&v), snapshot(&nc));
    assert_eq!(v.log, nc.log);
}

#[test]
fn ec_and_nc_differ_in_generator_label_universe_only() {
    let nc = tiny("l2a_nc", &[]);
    let ec = tiny("l2a_ec", &[]);
    let (train, _) = data(&nc);
    let s_nc = TrainState::new(&nc, train.dim()).unwrap();
    let s_ec = TrainState::new(&ec, train.dim()).unwrap();
    let (g_nc, g_ec) = (s_nc.generator.unwrap(), s_ec.generator.unwrap());
    assert_eq!((g_nc.classes, g_nc.label_offset), (16, 8));
    assert_eq!((g_ec.classes, g_ec.label_offset), (8, 0));
    assert!(s_ec.bank.novel.is_none());
    let diff: Vec<(String, String)> = nc
        .echo()
        .lines()
        .zip(ec.echo().lines())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(diff.len(), 2, "{diff:?}");
    assert!(diff[0].0.starts_with("method") && diff[1].0.starts_with("novel.classes"));
}

#[test]
fn divergence_term_does_not_reach_embedder() {
    let cfg = tiny("l2a_nc", &[]);
    let (train, _) = data(&cfg);
    let mut st = trained(&cfg, &train);
    let jg = st.joint_graph(&train, 0).unwrap();
    let jd = jg.j_div.expect("divergence active");
    let grads = jg.graph.backward(jd).unwrap();
    let mut store = st.store.clone();
    store.zero_grad();
    grads.accumulate_into(&jg.graph, &mut store).unwrap();

    let zero = |ids: &[ParamId]| {
        ids.iter()
            .all(|&id| store.get(id).grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
    };
    assert!(zero(&st.embedder.params()), "J_div leaked into the embedder");
    assert!(grads.get(jg.x_real).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert!(!zero(&generator_ids(&st)), "J_div must train the generator");

    // The value still depends on the real embeddings.
    let x = jg.graph.value(jg.x_real).clone();
    let xt = jg.graph.value(jg.x_synthetic.unwrap()).clone();
    let mut moved = x.clone();
    let row = moved.row_mut(0);
    row.swap(0, 1);
    let e = |a: &_| energy_distance(a, &xt, &cfg.sinkhorn, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!((e(&x) - e(&moved)).abs() > 1e-9);
}

#[test]
fn logged_total_is_met_plus_weighted_div() {
    let cfg = tiny("l2a_nc", &["lambda_div=0.7"]);
    let (train, _) = data(&cfg);
    let st = trained(&cfg, &train);
    assert_eq!(st.log.len(), 50);
    for r in &st.log {
        let expect = r.j_met + 0.7 * r.j_div.unwrap_or(0.0);
        assert!((r.total - expect).abs() <= 1e-10, "{r:?}");
        assert_eq!(r.j_div.is_some(), r.stage != Stage::PretrainF);
    }
}

#[test]
fn zero_lambda_never_evaluates_divergence() {
    let cfg = tiny("l2a_nc", &["lambda_div=0"]);
    let (train, _) = data(&cfg);
    let st = trained(&cfg, &train);
    assert!(st.log.iter().all(|r| r.j_div.is_none() && r.total == r.j_met));
}

#[test]
fn generator_stage_freezes_embedder_and_joint_moves_everything() {
    for method in ["l2a_nc", "l2a_ec"] {
        let cfg = tiny(method, &[]);
        let (train, _) = data(&cfg);
        let mut st = TrainState::new(&cfg, train.dim()).unwrap();
        st.advance(&train, Some(20)).unwrap();
        assert_eq!(st.completed, [20, 0, 0]);
        let f = st.embedder.params();
        let p = st.bank.real_params();
        let gids = generator_ids(&st);
        let before = (st.store.checksum(&f), st.store.checksum(&p), st.store.checksum(&gids));
        st.advance(&train, Some(10)).unwrap();
        assert_eq!(st.completed, [20, 10, 0]);
        assert_eq!(st.store.checksum(&f), before.0, "{method}: f moved in generator stage");
        assert_eq!(st.store.checksum(&p), before.1, "{method}: P moved in generator stage");
        assert_ne!(st.store.checksum(&gids), before.2);

        let mut groups = vec![f, p, gids];
        if method == "l2a_nc" {
            groups.push(st.bank.novel_params());
        }
        let mid: Vec<u64> = groups.iter().map(|g| st.store.checksum(g)).collect();
        st.advance(&train, Some(1)).unwrap();
        for (g, m) in groups.iter().zip(&mid) {
            assert_ne!(st.store.checksum(g), *m, "{method}: joint step left a group unchanged");
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    for method in ["l2a_nc", "ps"] {
        let cfg = tiny(method, &[]);
        let (train, _) = data(&cfg);
        let full = trained(&cfg, &train);

        let mut first = TrainState::new(&cfg, train.dim()).unwrap();
        first.advance(&train, Some(25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        to_checkpoint(&first).unwrap().save(dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        let mut resumed = from_checkpoint(&cfg, &train, &ck).unwrap();
        resumed.advance(&train, None).unwrap();

        assert_eq!(snapshot(&full), snapshot(&resumed), "{method}");
        assert_eq!(full.log, resumed.log, "{method}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = tiny("l2a_nc", &[]);
    let (train, test) = data(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_on_data(&cfg, &train, &test, a.path()).unwrap();
    run_on_data(&cfg, &train, &test, b.path()).unwrap();
    for f in ["metrics.csv", "eval.csv", "config.txt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn parameter_counts_match_hand_computation() {
    // (trunk, head, real proxies, generator, novel proxies)
    let cases: [(&str, &[&str], [usize; 5]); 3] = [
        ("vanilla", &[], [16 * 16 + 16, 16 * 8 + 8, 8 * 8, 0, 0]),
        (
            "l2a_nc",
            &[
                "model.trunk_hidden=32,12",
                "model.generator_hidden=10",
                "novel.classes=5",
            ],
            [
                16 * 32 + 32 + 32 * 12 + 12,
                12 * 8 + 8,
                8 * 8,
                (16 * 10 + 10) + 2 * (10 * 10 + 10) + (10 * 8 + 8) + 3 * 2 * 5 * 10,
                5 * 8,
            ],
        ),
        (
            "l2a_ec",
            &["model.trunk_hidden=", "model.generator_hidden=4"],
            [
                0,
                16 * 8 + 8,
                8 * 8,
                (16 * 4 + 4) + 2 * (4 * 4 + 4) + (4 * 8 + 8) + 3 * 2 * 8 * 4,
                0,
            ],
        ),
    ];
    for (method, extra, want) in cases {
        let cfg = tiny(method, extra);
        let st = TrainState::new(&cfg, 16).unwrap();
        let c = count_parameters(&st);
        assert_eq!(
            [c.trunk, c.head, c.real_proxies, c.generator, c.novel_proxies],
            want,
            "{method} {extra:?}"
        );
        assert_eq!(c.total(), want.iter().sum::<usize>());
        let expect_pct = 100.0 * (want[3] + want[4]) as f64 / want[0].max(1) as f64;
        assert!((c.overhead_vs_trunk_pct() - expect_pct).abs() < 1e-12);
    }
}

fn brute_force_r1(batch: &EmbeddingBatch) -> f64 {
    let x = batch.tensor().unwrap();
    let n = batch.len();
    let hits = (0..n)
        .filter(|&i| {
            let best = (0..n)
                .filter(|&j| j != i)
                .max_by(|&a, &b| {
                    let da: f64 = x.row(i).iter().zip(x.row(a)).map(|(p, q)| p * q).sum();
                    let db: f64 = x.row(i).iter().zip(x.row(b)).map(|(p, q)| p * q).sum();
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap();
            batch.labels[best] == batch.labels[i]
        })
        .count();
    hits as f64 / n as f64
}

#[test]
fn two_separable_classes_are_recalled_perfectly() {
    let cfg = tiny(
        "vanilla",
        &[
            "data.total_classes=3",
            "data.train_classes=2",
            "data.cluster_spread=0.05",
            "data.min_angle_deg=60",
            "steps.pretrain_f=200",
            "steps.joint=0",
        ],
    );
    let (train, _) = data(&cfg);
    let st = trained(&cfg, &train);
    assert_eq!(brute_force_r1(&embed_dataset(&st, &train).unwrap()), 1.0);
}

#[test]
fn separable_unseen_classes_are_retrieved() {
    let cfg = tiny(
        "vanilla",
        &[
            "data.cluster_spread=0.02",
            "data.min_angle_deg=60",
            "steps.pretrain_f=100",
        ],
    );
    let (train, test) = data(&cfg);
    let st = trained(&cfg, &train);
    let r1 = brute_force_r1(&embed_dataset(&st, &test).unwrap());
    assert!(r1 >= 0.9, "unseen R@1 {r1}");
}

#[test]
fn zero_steps_leave_initialization_untouched() {
    let cfg = tiny("l2a_nc", &["steps.pretrain_f=0", "steps.pretrain_g=0", "steps.joint=0"]);
    let (train, _) = data(&cfg);
    let fresh = TrainState::new(&cfg, train.dim()).unwrap();
    let st = trained(&cfg, &train);
    assert!(st.log.is_empty());
    assert_eq!(snapshot(&fresh), snapshot(&st));
}

#[test]
fn pretrained_generator_separates_its_classes() {
    let cfg = tiny("l2a_nc", &["novel.classes=8", "steps.pretrain_g=200", "steps.joint=0"]);
    let (train, _) = data(&cfg);
    let mut st = trained(&cfg, &train);
    let syn = generated_batch(&mut st, 20).unwrap().unwrap();
    let x = syn.tensor().unwrap();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..syn.len() {
        for j in i + 1..syn.len() {
            let c: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            let acc = if syn.labels[i] == syn.labels[j] {
                &mut intra
            } else {
                &mut inter
            };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    let (intra, inter) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    assert!(intra > inter, "intra {intra} inter {inter}");
}

#[test]
fn exploding_step_reports_divergence() {
    let cfg = tiny("vanilla", &["lr.pretrain_f=1e300"]);
    let (train, _) = data(&cfg);
    let mut st = TrainState::new(&cfg, train.dim()).unwrap();
    match st.advance(&train, None) {
        Err(Error::Divergence { stage, .. }) => assert_eq!(stage, "pretrain_f"),
        other => panic!("expected divergence, got {other:?}"),
    }
}
