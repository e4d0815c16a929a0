use novelaug::data::make_synthetic;
use novelaug::nn::{Graph, Mode, ParamStore, Tensor};
use novelaug::pipeline::{ExperimentConfig, TrainState};
use novelaug::synthesis::{sample_noise, ConditionalGenerator, NOISE_DIM};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_rows_are_unit(seed in any::<u64>(), classes in 1usize..6, n in 2usize..12, eval in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gen = ConditionalGenerator::new(&mut store, classes, 3, 12, 5, &mut rng).unwrap();
        for norm in &gen.norms {
            prop_assert_eq!(store.get(norm.gamma).shape(), &[classes, 12][..]);
            prop_assert_eq!(store.get(norm.beta).shape(), &[classes, 12][..]);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let noise = sample_noise(&mut rng, n).unwrap();
        let mode = if eval { Mode::Eval } else { Mode::Train };
        let out = gen.generate(&mut store, &labels, &noise, mode).unwrap();
        for r in row_norms(&out.tensor().unwrap()) {
            prop_assert!((r - 1.0).abs() <= 1e-9);
        }
        prop_assert!(out.labels.iter().zip(&labels).all(|(o, l)| *o == l + 3));
    }

    #[test]
    fn l2_normalize_rows_are_unit(seed in any::<u64>(), n in 1usize..8, d in 1usize..9, scale in 1e-6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| scale * (rng.gen::<f64>() + 0.1)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(n, d, data).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        prop_assert!(g.is_topologically_ordered());
        for r in row_norms(g.value(y)) {
            prop_assert!((r - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn pretrained_generator_responds_to_noise() {
    let cfg = ExperimentConfig::default()
        .with_overrides(&[
            "method=l2a_nc".into(),
            "data.total_classes=16".into(),
            "data.train_classes=8".into(),
            "data.samples_per_class=10".into(),
            "data.input_dim=16".into(),
            "model.embedding_dim=8".into(),
            "model.trunk_hidden=16".into(),
            "batch.real=16".into(),
            "steps.pretrain_f=30".into(),
            "steps.pretrain_g=50".into(),
            "steps.joint=0".into(),
        ])
        .unwrap();
    let (train, _) = make_synthetic(&cfg.data).unwrap();
    let mut st = TrainState::new(&cfg, train.dim()).unwrap();
    st.advance(&train, None).unwrap();
    let gen = st.generator.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = sample_noise(&mut rng, 2).unwrap();
    assert_eq!(noise.cols(), NOISE_DIM);
    for class in 0..gen.classes {
        let out = gen
            .generate(&mut st.store, &[class, class], &noise, Mode::Eval)
            .unwrap();
        let cos: f64 = out.row(0).iter().zip(out.row(1)).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-6, "class {class}: cos {cos}");
    }
}
