use std::fs;
use std::path::{Path, PathBuf};

use novelaug::cli::{main_with_args, EXIT_OK, EXIT_USAGE};
use novelaug::data::{write_feature_file, Dataset};
use novelaug::nn::Tensor;

const TINY: &[&str] = &[
    "data.total_classes=12",
    "data.train_classes=6",
    "data.samples_per_class=8",
    "data.input_dim=10",
    "model.embedding_dim=6",
    "model.trunk_hidden=12",
    "batch.real=12",
    "steps.pretrain_f=10",
    "steps.pretrain_g=5",
    "steps.joint=10",
    "ot.max_iterations=20",
];

fn run(sub: &str, pre: &[&str], extra: &[&str], out: &Path) -> i32 {
    let mut args: Vec<String> = vec!["novelaug".into(), sub.into()];
    args.extend(pre.iter().map(|s| s.to_string()));
    for s in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    args.push("--out".into());
    args.push(out.display().to_string());
    main_with_args(args)
}

fn dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn train_writes_append_only_run_directories() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(run("train", &[], &["method=vanilla"], root.path()), EXIT_OK);
    assert_eq!(run("train", &[], &["method=vanilla"], root.path()), EXIT_OK);
    let runs = dirs(root.path());
    assert_eq!(runs.len(), 2);
    for r in &runs {
        let name = r.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.starts_with("vanilla-0-"), "{name}");
        let head = fs::read_to_string(r.join("metrics.csv")).unwrap();
        assert!(head.starts_with("# config_hash="));
        assert!(head.lines().nth(1) == Some("step,stage,j_met,j_div,total"));
    }
    assert_eq!(
        data_rows(&runs[0].join("metrics.csv")),
        data_rows(&runs[1].join("metrics.csv"))
    );
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(run("train", &[], &["no.such.key=1"], root.path()), EXIT_USAGE);
    assert_eq!(run("train", &[], &["lambda_div=-1"], root.path()), EXIT_USAGE);
    assert_eq!(main_with_args(["novelaug", "frobnicate"]), EXIT_USAGE);
    assert!(dirs(root.path()).is_empty());
}

#[test]
fn analyze_writes_requested_tables() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(run("train", &[], &["method=l2a_nc"], root.path()), EXIT_OK);
    let run_dir = dirs(root.path()).pop().unwrap();
    let out = root.path().join("analysis");
    let a = |names: &str, extra: &[&str]| {
        let mut args = vec![
            "novelaug".to_string(),
            "analyze".into(),
            run_dir.display().to_string(),
            "--analyses".into(),
            names.into(),
            "--out".into(),
            out.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        main_with_args(args)
    };
    assert_eq!(a("recall,kl", &[]), EXIT_OK);
    let ks: Vec<String> = data_rows(&out.join("recall.csv"))
        .iter()
        .map(|r| r.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(ks, ["1", "2", "4", "8"]);
    let kl = data_rows(&out.join("kl.csv"));
    assert!(kl[0].starts_with("train,test,") && kl[1].starts_with("novel,test,"));
    assert_eq!(a("recall,tsne", &[]), EXIT_USAGE);

    let narrow = Dataset::new(Tensor::matrix(4, 3, vec![0.5; 12]).unwrap(), vec![0, 0, 1, 1]).unwrap();
    let f = root.path().join("narrow.csv");
    write_feature_file(&f, &narrow).unwrap();
    let fs_ = f.display().to_string();
    assert_eq!(a("recall", &["--train", &fs_, "--test", &fs_]), EXIT_USAGE);
}

#[test]
fn compare_pairs_data_across_methods() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(
        run("compare", &["--methods", "vanilla", "--seeds", "0,1"], &[], root.path()),
        EXIT_OK
    );
    let dir = dirs(root.path()).pop().unwrap();
    let table = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert!(table.lines().any(|l| l == "metric,vanilla"));

    assert_eq!(
        run(
            "compare",
            &["--methods", "vanilla,ps,l2a_nc", "--seeds", "3"],
            &[],
            root.path()
        ),
        EXIT_OK
    );
    let dir = dirs(root.path()).into_iter().rfind(|d| d.is_dir()).unwrap();
    let rows = data_rows(&dir.join("runs.csv"));
    assert_eq!(rows.len(), 3);
    let sums: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert!(sums.iter().all(|s| *s == sums[0]));
    let table = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert!(table.contains("proxy_sample_cos_mean_mean") && table.contains("proxy_proxy_cos_max_mean"));
}

#[test]
fn sweep_rows_follow_the_budget() {
    let root = tempfile::tempdir().unwrap();
    let pre = ["--counts", "2,3,6", "--total", "40", "--seeds", "0"];
    assert_eq!(run("sweep-classes", &pre, &["method=vanilla"], root.path()), EXIT_OK);
    let dir = dirs(root.path()).pop().unwrap();
    let rows = data_rows(&dir.join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    for (row, (k, per)) in rows.iter().zip([(2, 20), (3, 13), (6, 6)]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(
            (f[0].parse::<usize>().unwrap(), f[1].parse::<usize>().unwrap()),
            (k, per)
        );
    }
}

#[test]
fn gradient_suite_subcommand_passes() {
    assert_eq!(main_with_args(["novelaug", "grad-check", "--configs", "3"]), EXIT_OK);
}
