//! Trains every method on the same data and prints held-out retrieval and
//! the synthetic-class statistics. Step counts are cut down so the example
//! finishes in well under a minute; pass `--full` for the default schedule.

use novelaug::pipeline::{count_parameters, run_experiment, ExperimentConfig, Method};

fn main() -> novelaug::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let root = std::env::temp_dir().join("novelaug-compare-example");
    let mut base = vec!["seed=0".to_string(), "data.seed=0".to_string()];
    if !full {
        base.extend(["steps.pretrain_f=300", "steps.pretrain_g=150", "steps.joint=300"].map(String::from));
    }
    for method in Method::ALL {
        let mut o = base.clone();
        o.push(format!("method={}", method.name()));
        let cfg = ExperimentConfig::default().with_overrides(&o)?;
        let out = run_experiment(&cfg, &root.join(method.name()))?;
        let shown: Vec<String> = out
            .eval
            .iter()
            .filter(|(k, _)| k.starts_with("recall@1") || k.contains("cos") || k.starts_with("kl"))
            .map(|(k, v)| format!("{k}={v:.3}"))
            .collect();
        println!(
            "{:<8} params {:>7}  {}",
            method.name(),
            out.params.total(),
            shown.join("  ")
        );
    }
    let cfg = ExperimentConfig::default();
    let st = novelaug::pipeline::TrainState::new(&cfg, cfg.data.input_dim)?;
    let c = count_parameters(&st);
    println!(
        "l2a_nc overhead: generator {} + novel proxies {} = {:.0}% of the trunk ({} parameters)",
        c.generator,
        c.novel_proxies,
        c.overhead_vs_trunk_pct(),
        c.trunk
    );
    println!("run directories under {}", root.display());
    Ok(())
}
