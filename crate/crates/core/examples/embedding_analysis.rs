//! Diagnostics on a trained l2a_nc model: KL alignment of real and novel
//! classes to the unseen test classes, and a 2-D PCA dump.

use novelaug::data::make_synthetic;
use novelaug::pipeline::analysis::{kl_report, pca_dump, recall};
use novelaug::pipeline::{ExperimentConfig, TrainState};

fn main() -> novelaug::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "steps.pretrain_f=300".into(),
        "steps.pretrain_g=150".into(),
        "steps.joint=300".into(),
    ])?;
    let (train, test) = make_synthetic(&cfg.data)?;
    let mut st = TrainState::new(&cfg, train.dim())?;
    st.advance(&train, None)?;

    for (k, r) in recall(&st, &test, &cfg.eval_ks)? {
        println!("R@{k} {r:.3}");
    }
    let kl = kl_report(&mut st, &train, &test)?;
    println!("KL train -> test {:.3}", kl.train_to_test);
    if let Some(v) = kl.novel_to_test {
        println!("KL novel -> test {v:.3}");
    }
    let csv = pca_dump(&mut st, &test)?;
    let path = std::env::temp_dir().join("novelaug-pca.csv");
    std::fs::write(&path, &csv).map_err(|e| novelaug::Error::io(&path, e))?;
    println!(
        "{} projected points written to {}",
        csv.lines().count() - 1,
        path.display()
    );
    Ok(())
}
