//! Fixed sample budget spread over more or fewer training classes.

use novelaug::cli::sweep_classes;
use novelaug::pipeline::ExperimentConfig;

fn main() -> novelaug::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "method=vanilla".into(),
        "steps.pretrain_f=400".into(),
        "steps.joint=0".into(),
    ])?;
    let total = cfg.data.train_classes * cfg.data.samples_per_class;
    let dir = std::env::temp_dir().join("novelaug-sweep-example");
    let rows = sweep_classes(&cfg, &[8, 16, 32, 64], total, &[0, 1, 2], &dir)?;
    println!("{total} training samples");
    for (k, per, r1) in rows {
        println!("k = {k:>2}  {per:>3} per class  median R@1 {r1:.3}");
    }
    Ok(())
}
