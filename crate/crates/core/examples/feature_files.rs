//! Round trip through the plain-text feature format and training from
//! files instead of the built-in generator.

use novelaug::data::{load_feature_file, make_synthetic, write_feature_file, SyntheticSpec};
use novelaug::pipeline::{run_experiment, ExperimentConfig};

fn main() -> novelaug::Result<()> {
    let dir = std::env::temp_dir().join("novelaug-feature-example");
    std::fs::create_dir_all(&dir).map_err(|e| novelaug::Error::io(&dir, e))?;
    let spec = SyntheticSpec {
        total_classes: 20,
        train_classes: 10,
        ..SyntheticSpec::default()
    };
    let (train, test) = make_synthetic(&spec)?;
    let (tr, te) = (dir.join("train.csv"), dir.join("test.csv"));
    write_feature_file(&tr, &train)?;
    write_feature_file(&te, &test)?;
    let back = load_feature_file(&tr)?;
    println!(
        "{}: {} rows, dim {}, {} classes, identical: {}",
        tr.display(),
        back.len(),
        back.dim(),
        back.classes,
        back.inputs.data() == train.inputs.data()
    );

    let cfg = ExperimentConfig::default().with_overrides(&[
        "method=vanilla".into(),
        format!("data.train_file={}", tr.display()),
        format!("data.test_file={}", te.display()),
        "data.train_classes=10".into(),
        "data.total_classes=20".into(),
        "steps.pretrain_f=300".into(),
        "steps.joint=0".into(),
    ])?;
    let out = run_experiment(&cfg, &dir.join("run"))?;
    println!(
        "R@1 on the file test split {:.3}",
        out.metric("recall@1").unwrap_or(f64::NAN)
    );
    Ok(())
}
