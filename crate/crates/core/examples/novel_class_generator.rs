//! Pretrains an embedder, then a class-conditional generator for novel
//! classes, and reports how well the generated classes align with their
//! proxies and how far they sit from the real ones.

use novelaug::data::make_synthetic;
use novelaug::eval::{proxy_proxy_similarity, proxy_sample_similarity};
use novelaug::losses::ProxySet;
use novelaug::pipeline::analysis::generated_batch;
use novelaug::pipeline::{ExperimentConfig, Stage, TrainState};

fn main() -> novelaug::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&[
        "method=l2a_nc".into(),
        "data.total_classes=32".into(),
        "data.train_classes=16".into(),
        "novel.classes=16".into(),
        "steps.pretrain_f=400".into(),
        "steps.pretrain_g=300".into(),
        "steps.joint=0".into(),
    ])?;
    let (train, _) = make_synthetic(&cfg.data)?;
    let mut st = TrainState::new(&cfg, train.dim())?;
    st.advance(&train, None)?;

    let g_log: Vec<_> = st.log.iter().filter(|r| r.stage == Stage::PretrainG).collect();
    for r in [g_log[0], g_log[g_log.len() / 2], g_log[g_log.len() - 1]] {
        println!(
            "generator step {:>3}: J_met {:.4}  J_div {:.4}",
            r.step,
            r.j_met,
            r.j_div.unwrap_or(f64::NAN)
        );
    }

    let syn = generated_batch(&mut st, 16)?.expect("l2a_nc owns a generator");
    let all = st.bank.normalized(&st.store, ProxySet::All)?;
    let ps = proxy_sample_similarity(&syn, &all, 0)?;
    let real = st.bank.normalized(&st.store, ProxySet::Real)?;
    let novel = st.bank.normalized(&st.store, ProxySet::Novel)?;
    let pp = proxy_proxy_similarity(&real, &novel)?;
    println!("cos(sample, own proxy): mean {:.3}, min {:.3}", ps.mean, ps.min);
    println!("cos(real proxy, novel proxy): mean {:.3}, max {:.3}", pp.mean, pp.max);
    Ok(())
}
