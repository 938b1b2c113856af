use fhn_core::dataset::{DataSpec, FeatureKind, Scaler};
use fhn_core::fhn::SimConstants;
use fhn_core::nn::{glorot_limit, param_count, train, LayerSpec, Network, NetworkSpec, TrainConfig};
use proptest::prelude::*;

fn layer_strategy() -> impl Strategy<Value = LayerSpec> {
    prop_oneof![
        (1usize..5).prop_map(|units| LayerSpec::Dense { units }),
        (1usize..4, 1usize..4, 1usize..3).prop_map(|(filters, kernel, stride)| LayerSpec::Conv1d { filters, kernel, stride }),
        (1usize..3, 1usize..3).prop_map(|(size, stride)| LayerSpec::AvgPool1d { size, stride }),
        Just(LayerSpec::Flatten),
        Just(LayerSpec::swish()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn param_count_matches_vector_length(
        input_len in 1usize..40,
        channels in 1usize..3,
        layers in prop::collection::vec(layer_strategy(), 0..6),
        out in 1usize..4,
    ) {
        let mut layers = layers;
        layers.push(LayerSpec::Dense { units: out });
        let spec = NetworkSpec { input_len, input_channels: channels, layers, output_len: out };
        match param_count(&spec) {
            Ok(n) => prop_assert_eq!(Network::zeros(spec).unwrap().params.len(), n),
            Err(_) => prop_assert!(Network::zeros(spec).is_err()),
        }
    }
}

#[test]
fn glorot_variance_of_large_layer() {
    // Uniform on [-a, a] has variance a^2 / 3 = 2 / (fan_in + fan_out).
    let spec = NetworkSpec::dense_family(1000, 1, 100, 1);
    let net = Network::init(spec, 42).unwrap();
    let w = net.weights(0);
    assert_eq!(w.len(), 100_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / 1100.0;
    assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    assert!(w.iter().all(|x| x.abs() <= glorot_limit(1000, 100)));
}

fn small_sets() -> (fhn_core::dataset::Dataset, fhn_core::dataset::Dataset) {
    let spec = DataSpec { consts: SimConstants { t_end: 40.0, ..Default::default() }, ..Default::default() };
    let train_set = spec.build_dataset(1, 64, FeatureKind::Time, false, false).unwrap();
    let valid_set = spec.build_dataset(2, 16, FeatureKind::Time, false, false).unwrap();
    let scaler = Scaler::fit(&train_set).unwrap();
    (scaler.apply(&train_set).unwrap(), scaler.apply(&valid_set).unwrap())
}

#[test]
fn zero_epochs_returns_initialization() {
    let (tr, va) = small_sets();
    let net = Network::init(NetworkSpec::cnn_family(200, 2, 2, 2), 3).unwrap();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let (trained, history) = train(net.clone(), &tr, Some(&va), &cfg).unwrap();
    assert_eq!(trained, net);
    assert!(history.is_empty());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (tr, va) = small_sets();
    let cfg = TrainConfig { epochs: 30, batch_size: 10, lr: 0.002, shuffle_seed: 9 };
    let run = || train(Network::init(NetworkSpec::cnn_family(200, 2, 2, 2), 3).unwrap(), &tr, Some(&va), &cfg).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 30);
    assert!(ha[29].train_loss < ha[0].train_loss);
    assert!(ha.iter().all(|r| r.valid_loss.is_finite()));

    let other = TrainConfig { shuffle_seed: 10, ..cfg };
    let (c, _) = train(Network::init(NetworkSpec::cnn_family(200, 2, 2, 2), 3).unwrap(), &tr, Some(&va), &other).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn shape_mismatch_is_reported() {
    let (tr, _) = small_sets();
    let net = Network::init(NetworkSpec::dense_family(100, 1, 4, 2), 0).unwrap();
    assert!(train(net, &tr, None, &TrainConfig::default()).is_err());
}
